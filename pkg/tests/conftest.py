import sys
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).parent))

from boxprompt.geometry import TightBox  # noqa: E402


def random_case(rng, max_side=16, f_lo=0.0, f_hi=1.0):
    """One random (f grid, box) pair for loss tests."""
    h = int(rng.integers(3, max_side + 1))
    w = int(rng.integers(3, max_side + 1))
    rmin = int(rng.integers(0, h))
    rmax = int(rng.integers(rmin, h))
    cmin = int(rng.integers(0, w))
    cmax = int(rng.integers(cmin, w))
    f = rng.uniform(f_lo, f_hi, size=(h, w))
    return f, TightBox(rmin, cmin, rmax, cmax)


def torch_map(f: np.ndarray, requires_grad=False) -> torch.Tensor:
    t = torch.from_numpy(np.asarray(f, dtype=np.float64))
    if requires_grad:
        t.requires_grad_(True)
    return t
