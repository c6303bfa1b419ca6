"""Latent partition, affine phase-space projection and the log phase volume."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .diffnet import DTYPE, as_tensor
from .errors import DegenerateBaselineError, DimensionError, InsufficientDataError

EIG_FLOOR = 1e-8


def partition(h: torch.Tensor, split_index: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Split the deterministic state into its physical and environment parts."""
    d = h.shape[-1]
    if not 0 < split_index < d:
        raise DimensionError(f"split_index must lie in (0, {d}), got {split_index}")
    return h[..., :split_index], h[..., split_index:]


class Projection(nn.Module):
    """x = W_proj h_phys + b_proj."""

    def __init__(self, d_phys: int, n: int, generator: torch.Generator | None = None):
        super().__init__()
        if n > d_phys:
            raise DimensionError(f"phase dim {n} exceeds physical latent dim {d_phys}")
        self.d_phys, self.n = int(d_phys), int(n)
        self.W = nn.Parameter(torch.randn(n, d_phys, generator=generator, dtype=DTYPE) / np.sqrt(d_phys))
        self.b = nn.Parameter(torch.zeros(n, dtype=DTYPE))

    def forward(self, h_phys: torch.Tensor) -> torch.Tensor:
        return project(self, h_phys)


def project(p: Projection, h_phys) -> torch.Tensor:
    h_phys = as_tensor(h_phys)
    if h_phys.shape[-1] != p.d_phys:
        raise DimensionError(f"expected h_phys dim {p.d_phys}, got {h_phys.shape[-1]}")
    return h_phys @ p.W.T + p.b


def pca_eigenvalues(samples) -> np.ndarray:
    """Eigenvalues of the unbiased sample covariance, largest first."""
    x = np.asarray(samples.detach().cpu() if isinstance(samples, torch.Tensor) else samples, dtype=np.float64)
    x = x.reshape(-1, x.shape[-1])
    if x.shape[0] < 2:
        raise InsufficientDataError("need at least 2 samples for a covariance")
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    return np.linalg.eigvalsh(cov)[::-1]


def log_phase_volume(samples, n_components: int | None = None, floor: float = EIG_FLOOR) -> float:
    """Sum of the log of the top ``n_components`` PCA variances (floored)."""
    eig = pca_eigenvalues(samples)
    k = eig.size if n_components is None else int(n_components)
    if not 0 < k <= eig.size:
        raise DimensionError(f"n_components must be in [1, {eig.size}], got {k}")
    return float(np.sum(np.log(np.maximum(eig[:k], floor))))


def volume_reduction(baseline: float, ours: float) -> float:
    """Relative reduction of the log volume, in percent."""
    if baseline == 0:
        raise DegenerateBaselineError("baseline log volume is zero")
    return (baseline - ours) / abs(baseline) * 100.0
