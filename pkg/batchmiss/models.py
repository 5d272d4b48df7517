"""Shared data types used across batchmiss modules.

All types are immutable after construction: array fields are copied into
read-only float arrays, so instances can be shared freely between workers.
"""

from collections.abc import Sequence
from dataclasses import dataclass
from enum import StrEnum
from typing import Any

import numpy as np

# Relative slack for symmetry / PSD checks on covariance matrices
_PSD_RTOL = 1e-10


class MechanismForm(StrEnum):
    """Functional form of the batch-level missing-data mechanism."""

    EXPONENTIAL = "exponential"
    LOGIT = "logit"


def _frozen(values: Any, *, ndim: int, name: str, dtype: type = float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    if dtype is float and arr.ndim < ndim:
        arr = arr.reshape(arr.shape + (1,) * (ndim - arr.ndim))
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def _check_psd(matrix: np.ndarray, name: str) -> np.ndarray:
    scale = max(1.0, float(np.max(np.abs(matrix))) if matrix.size else 1.0)
    if not np.allclose(matrix, matrix.T, rtol=0.0, atol=_PSD_RTOL * scale):
        raise ValueError(f"{name} must be symmetric")
    sym = 0.5 * (matrix + matrix.T)
    if np.linalg.eigvalsh(sym).min() < -_PSD_RTOL * scale:
        raise ValueError(f"{name} must be positive semidefinite")
    sym.setflags(write=False)
    return sym


@dataclass(frozen=True, eq=False)
class BatchDesign:
    """Fixed- and random-effect design of one batch (X_i, Z_i) plus the reference row."""

    # p_i × k fixed-effect matrix; column 0 is the intercept by convention
    x: np.ndarray
    # p_i × h random-effect matrix
    z: np.ndarray
    # Row index of the reference sample within the batch, if the batch has one
    reference_channel: int | None = None

    def __post_init__(self) -> None:
        x = _frozen(self.x, ndim=2, name="x")
        z = _frozen(self.z, ndim=2, name="z")
        if x.shape[0] < 1:
            raise ValueError("a batch needs at least one sample")
        if z.shape[0] != x.shape[0]:
            raise ValueError(f"x has {x.shape[0]} rows but z has {z.shape[0]}")
        if x.shape[1] < 1 or z.shape[1] < 1:
            raise ValueError("x and z need at least one column each")
        ref = self.reference_channel
        if ref is not None:
            ref = int(ref)
            if not 0 <= ref < x.shape[0]:
                raise ValueError(f"reference_channel {ref} outside batch of size {x.shape[0]}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "reference_channel", ref)

    @property
    def p(self) -> int:
        return int(self.x.shape[0])

    @property
    def k(self) -> int:
        return int(self.x.shape[1])

    @property
    def h(self) -> int:
        return int(self.z.shape[1])

    def reference_mask(self) -> np.ndarray:
        mask = np.zeros(self.p, dtype=bool)
        if self.reference_channel is not None:
            mask[self.reference_channel] = True
        return mask

    def take_rows(self, keep: np.ndarray) -> "BatchDesign":
        """Return the design restricted to rows where ``keep`` is True."""
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != (self.p,):
            raise ValueError(f"row mask has shape {keep.shape}, expected ({self.p},)")
        if keep.all():
            return self
        ref = None
        if self.reference_channel is not None and keep[self.reference_channel]:
            ref = int(np.count_nonzero(keep[: self.reference_channel]))
        return BatchDesign(x=self.x[keep], z=self.z[keep], reference_channel=ref)


@dataclass(frozen=True, eq=False)
class FeatureBatchData:
    """One feature's log-abundances organised by batch.

    Unobserved cells hold NaN. ``batch_missing[i]`` is M_i; ``sporadic_mask[i]``
    flags the observed samples of batch i (all False when M_i = 1).
    """

    batches: tuple[np.ndarray, ...]
    batch_missing: np.ndarray
    sporadic_mask: tuple[np.ndarray, ...]
    feature_id: str = ""

    def __post_init__(self) -> None:
        if len(self.batches) != len(self.sporadic_mask):
            raise ValueError("batches and sporadic_mask must have the same length")
        missing = _frozen(self.batch_missing, ndim=1, name="batch_missing", dtype=bool)
        if missing.shape[0] != len(self.batches):
            raise ValueError("batch_missing must have one flag per batch")

        values: list[np.ndarray] = []
        masks: list[np.ndarray] = []
        for i, (raw, raw_mask) in enumerate(zip(self.batches, self.sporadic_mask, strict=True)):
            mask = np.array(raw_mask, dtype=bool)
            vals = np.array(raw, dtype=float)
            if vals.ndim != 1 or mask.shape != vals.shape:
                raise ValueError(f"batch {i}: values and mask must be 1-D of equal length")
            if missing[i] and mask.any():
                raise ValueError(f"batch {i} is flagged missing but has observed samples")
            if not missing[i] and not mask.any():
                raise ValueError(f"batch {i} is flagged observed but has no observed samples")
            if not np.all(np.isfinite(vals[mask])):
                raise ValueError(f"batch {i} has non-finite observed abundances")
            vals[~mask] = np.nan
            vals.setflags(write=False)
            mask.setflags(write=False)
            values.append(vals)
            masks.append(mask)

        object.__setattr__(self, "batches", tuple(values))
        object.__setattr__(self, "sporadic_mask", tuple(masks))
        object.__setattr__(self, "batch_missing", missing)

    @classmethod
    def from_values(
        cls, batches: Sequence[Sequence[float]], feature_id: str = ""
    ) -> "FeatureBatchData":
        """Build from per-batch value vectors where NaN marks a missing sample."""
        arrays = [np.asarray(b, dtype=float) for b in batches]
        masks = [~np.isnan(a) for a in arrays]
        missing = np.array([not m.any() for m in masks], dtype=bool)
        return cls(
            batches=tuple(arrays),
            batch_missing=missing,
            sporadic_mask=tuple(masks),
            feature_id=feature_id,
        )

    @property
    def q(self) -> int:
        return len(self.batches)

    @property
    def q_obs(self) -> int:
        return int(np.count_nonzero(~self.batch_missing))

    @property
    def observed_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.batch_missing)

    @property
    def batch_sizes(self) -> tuple[int, ...]:
        return tuple(int(b.shape[0]) for b in self.batches)

    @property
    def missing_fraction(self) -> float:
        return 1.0 - self.q_obs / self.q if self.q else 0.0

    @property
    def available_mean(self) -> float:
        """Mean of every observed abundance (the available-case mean t_j)."""
        observed = [b[m] for b, m in zip(self.batches, self.sporadic_mask, strict=True) if m.any()]
        if not observed:
            return float("nan")
        return float(np.mean(np.concatenate(observed)))

    def observed_values(self, i: int) -> np.ndarray:
        return self.batches[i][self.sporadic_mask[i]]

    def permuted(self, order: Sequence[int]) -> "FeatureBatchData":
        """Reorder whole batches: batch j of the result is batch ``order[j]`` of this one."""
        order = [int(o) for o in order]
        if sorted(order) != list(range(self.q)):
            raise ValueError("order must be a permutation of the batch indices")
        return FeatureBatchData(
            batches=tuple(self.batches[o] for o in order),
            batch_missing=self.batch_missing[order],
            sporadic_mask=tuple(self.sporadic_mask[o] for o in order),
            feature_id=self.feature_id,
        )


@dataclass(frozen=True, eq=False)
class ModelParameters:
    """Ω = {α, σ₀², σ², D}."""

    alpha: np.ndarray
    sigma0_sq: float
    sigma_sq: float
    d: np.ndarray

    def __post_init__(self) -> None:
        alpha = _frozen(self.alpha, ndim=1, name="alpha")
        d = np.atleast_2d(np.array(self.d, dtype=float))
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ValueError(f"d must be a square matrix, got shape {d.shape}")
        for name in ("sigma0_sq", "sigma_sq"):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")
            object.__setattr__(self, name, value)
        if not np.all(np.isfinite(alpha)) or not np.all(np.isfinite(d)):
            raise ValueError("alpha and d must be finite")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "d", _check_psd(d, "d"))

    @property
    def k(self) -> int:
        return int(self.alpha.shape[0])

    @property
    def h(self) -> int:
        return int(self.d.shape[0])

    def as_vector(self) -> np.ndarray:
        """Flatten to (α, σ₀², σ², upper triangle of D) for convergence checks."""
        upper = self.d[np.triu_indices(self.h)]
        return np.concatenate([self.alpha, [self.sigma0_sq, self.sigma_sq], upper])


@dataclass(frozen=True, eq=False)
class MissingMechanism:
    """Γ: probability that a whole batch is missing given its mean abundance s.

    exponential: Pr(M=1|y) = exp(-γ₀ - γ·s)
    logit:       logit Pr(M=1|y) = γ₀ + γ·s + γ₂ᵀC_i
    """

    form: MechanismForm = MechanismForm.EXPONENTIAL
    gamma0: float = 0.0
    gamma: float = 0.0
    gamma2: np.ndarray | None = None
    # Q × c matrix of per-batch covariates C_i
    batch_covariates: np.ndarray | None = None

    def __post_init__(self) -> None:
        form = MechanismForm(self.form)
        gamma0, gamma = float(self.gamma0), float(self.gamma)
        if not (np.isfinite(gamma0) and np.isfinite(gamma)):
            raise ValueError("gamma0 and gamma must be finite")
        if form is MechanismForm.EXPONENTIAL and (gamma0 < 0 or gamma < 0):
            raise ValueError("the exponential mechanism requires gamma0 >= 0 and gamma >= 0")
        if (self.gamma2 is None) != (self.batch_covariates is None):
            raise ValueError("gamma2 and batch_covariates must be given together")
        if self.gamma2 is not None:
            if form is not MechanismForm.LOGIT:
                raise ValueError("batch covariates are only supported by the logit mechanism")
            gamma2 = _frozen(self.gamma2, ndim=1, name="gamma2")
            covariates = _frozen(self.batch_covariates, ndim=2, name="batch_covariates")
            if covariates.shape[1] != gamma2.shape[0]:
                raise ValueError(
                    f"batch_covariates has {covariates.shape[1]} columns "
                    f"but gamma2 has {gamma2.shape[0]} entries"
                )
            object.__setattr__(self, "gamma2", gamma2)
            object.__setattr__(self, "batch_covariates", covariates)
        object.__setattr__(self, "form", form)
        object.__setattr__(self, "gamma0", gamma0)
        object.__setattr__(self, "gamma", gamma)

    @classmethod
    def exponential(cls, gamma0: float = 0.0, gamma: float = 0.0) -> "MissingMechanism":
        return cls(form=MechanismForm.EXPONENTIAL, gamma0=gamma0, gamma=gamma)

    @classmethod
    def logit(
        cls,
        gamma0: float = 0.0,
        gamma: float = 0.0,
        gamma2: Sequence[float] | np.ndarray | None = None,
        batch_covariates: np.ndarray | None = None,
    ) -> "MissingMechanism":
        return cls(
            form=MechanismForm.LOGIT,
            gamma0=gamma0,
            gamma=gamma,
            gamma2=None if gamma2 is None else np.asarray(gamma2, dtype=float),
            batch_covariates=batch_covariates,
        )

    @property
    def is_ignorable(self) -> bool:
        """True when Pr(M=1|y) does not depend on y (the MAR case)."""
        return self.gamma == 0.0

    def covariates_for(self, batch_index: int) -> np.ndarray | None:
        """C_i for the given batch, None when no covariates are configured."""
        if self.batch_covariates is None:
            return None
        return self.batch_covariates[batch_index]

    def describe(self) -> dict[str, Any]:
        info: dict[str, Any] = {
            "form": str(self.form),
            "gamma0": self.gamma0,
            "gamma": self.gamma,
        }
        if self.gamma2 is not None:
            info["gamma2"] = self.gamma2.tolist()
        return info


@dataclass(frozen=True, eq=False)
class EStepMoments:
    """Conditional moments of one batch consumed by the CM step."""

    # E(b_i | data), length h
    b_t: np.ndarray
    # var(b_i | data), h × h
    delta_t: np.ndarray
    # var(e_i | data), p_i × p_i over the retained rows
    v_t: np.ndarray
    # Working response: observed y_i, or E(y_i | M_i = 1) for a missing batch
    y_t: np.ndarray
    # Design the moments refer to (row-reduced when samples are sporadically missing)
    design: BatchDesign
    missing: bool = False
