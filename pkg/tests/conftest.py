import os

# single-threaded BLAS: deterministic and faster at this scale; must be set
# before numpy loads
os.environ.setdefault("OPENBLAS_NUM_THREADS", os.environ.get("MEDITOK_THREADS", "1"))
os.environ.setdefault("OMP_NUM_THREADS", os.environ.get("MEDITOK_THREADS", "1"))

import numpy as np
import pytest

from meditok import ndgrad

ndgrad.FINITE_CHECKS = True


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
