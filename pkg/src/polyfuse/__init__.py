"""Polymer property prediction from fused text and structure embeddings."""

import os

# Pin BLAS threading before numpy loads anywhere in this process, so
# results are bit-identical regardless of the app-level --threads value.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
