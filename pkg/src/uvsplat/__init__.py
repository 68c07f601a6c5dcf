"""UV-anchored Gaussian splatting on a deformable template mesh, with
sampling-based densification and neural baking into editable attribute maps."""
import os as _os

_threads = _os.environ.get("UVSPLAT_THREADS", "0")
if _threads.isdigit() and int(_threads) > 0:
    for _var in ("NUMBA_NUM_THREADS", "OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ[_var] = _threads

_os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
