"""batchmiss entry point - analyses a study from TSV files (see ``batchmiss --help``)."""

import sys

from batchmiss.cli import main

if __name__ == "__main__":
    sys.exit(main())
