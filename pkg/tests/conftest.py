import numpy as np
import pytest
import torch

from ordfusion.datasets import SyntheticSpec, build_synthetic_dataset


def rel_error(got: np.ndarray, want: np.ndarray) -> float:
    got = np.asarray(got, dtype=np.float64).ravel()
    want = np.asarray(want, dtype=np.float64).ravel()
    denom = max(float(np.linalg.norm(want)), 1e-12)
    return float(np.linalg.norm(got - want)) / denom


def finite_diff_grad(fn, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central finite differences of a scalar-valued fn at x (float64)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            f_plus = float(fn(x))
            flat[i] = orig - eps
            f_minus = float(fn(x))
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def autograd_grad(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    return x.grad.detach().clone()


@pytest.fixture(scope="session")
def tiny_ds():
    """Small balanced-ish 4-class dataset of 16x16 images for fast training tests."""
    spec = SyntheticSpec(
        k=4,
        proportions=(0.4, 0.3, 0.2, 0.1),
        image_size=16,
        overlap_sigma=0.25,
        seed=3,
    )
    return build_synthetic_dataset(spec, 160)
