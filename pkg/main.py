#!/usr/bin/env python3
"""mpdit command entry: ``python main.py analyze|train|sample|gradcheck ...``."""

import os
import sys

# BLAS thread pools are sized at numpy import, so pin them first.
if "--deterministic" in sys.argv or os.environ.get("MPDIT_DETERMINISTIC") == "1":
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ[var] = "1"

from harness.app import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
