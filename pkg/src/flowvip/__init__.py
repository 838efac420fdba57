"""Flow-guided video inpainting at desk scale, on a self-contained autodiff engine.

The pipeline: a frame encoder, a coarse-to-fine flow completion network,
bidirectional flow-guided feature propagation with modulated deformable
alignment, a stack of temporal focal transformer blocks, and a decoder,
trained jointly with reconstruction, adversarial, and flow losses.
"""

import os

# FLOWVIP_THREADS caps internal parallelism. BLAS pools are sized at numpy
# import time, so this must run before any submodule pulls in numpy.
_threads = os.environ.get("FLOWVIP_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
