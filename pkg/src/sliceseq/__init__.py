"""Slice-sequence scoring toolkit.

Pipeline: a denoising autoencoder compresses per-slice features into
compact vectors, a cosine prototype book groups them into K clusters, a
transformer with cluster-level attention scores each slice, and a linear
per-cluster fusion head turns cluster summaries into one patient logit
that decomposes exactly into cluster contributions.

Hot kernels run through numba when available; set SLICESEQ_BACKEND to
"numpy" or "numba" to pin the implementation.
"""

__version__ = "0.1.0"

from .backend import active_backend
from .errors import DataError, NumericalError

__all__ = ["active_backend", "DataError", "NumericalError", "__version__"]
