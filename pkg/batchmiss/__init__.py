"""Mixed-effects models for batch-structured abundance data with batch-level missingness."""
