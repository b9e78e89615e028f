import os

import numpy as np
import pytest

from hierseg.hierarchy import load_hierarchy

CONFIGS = os.path.join(os.path.dirname(__file__), "..", "src", "hierseg", "configs")


def numeric_grad(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


@pytest.fixture(scope="session")
def street():
    return load_hierarchy(os.path.join(CONFIGS, "street.hier"))


@pytest.fixture(scope="session")
def toy():
    return load_hierarchy(os.path.join(CONFIGS, "toy.hier"))
