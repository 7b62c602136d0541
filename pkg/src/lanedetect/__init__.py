"""Lane segmentation with a from-scratch encoder-decoder FCN.

Everything numerical lives on plain numpy arrays wrapped in a thin rank-4
Tensor type.  Hot kernels (convolution, pooling, reductions) have two
implementations selected by the LANEDETECT_BACKEND environment variable:
a numba-compiled one (default when numba imports cleanly) and a pure
numpy fallback.  See lanedetect.backend.
"""

import os

# Thread caps must land in the environment before numpy loads its BLAS.
# Importing this package before numpy is the supported way to make
# LANEDETECT_THREADS stick; if numpy is already imported we leave the
# BLAS pool alone and only numba picks the cap up.
_threads = os.environ.get("LANEDETECT_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
del _threads

from .errors import (  # noqa: E402
    LaneDetectError,
    ShapeError,
    DomainError,
    DataError,
    AnnotationError,
    CheckpointError,
    BackendError,
    TrainingDiverged,
)
from .tensor import Shape, Tensor, zeros, elementwise, reduce_sum  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "LaneDetectError",
    "ShapeError",
    "DomainError",
    "DataError",
    "AnnotationError",
    "CheckpointError",
    "BackendError",
    "TrainingDiverged",
    "Shape",
    "Tensor",
    "zeros",
    "elementwise",
    "reduce_sum",
    "__version__",
]
