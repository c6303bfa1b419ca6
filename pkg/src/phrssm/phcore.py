"""Port-Hamiltonian shadow dynamics in the projected latent phase space.

The structure ``x' = (J - R) grad H(x) + G a`` is built so that J is skew by
construction and R is positive semidefinite by construction; with ``a = 0``
the continuous flow can only lose energy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F
from torch import nn

from .diffnet import DTYPE, MLP, ScalarField, as_tensor
from .errors import DimensionError, NumericalError


def make_skew(A_raw: torch.Tensor) -> torch.Tensor:
    A_raw = as_tensor(A_raw)
    if A_raw.dim() < 2 or A_raw.shape[-1] != A_raw.shape[-2]:
        raise DimensionError(f"make_skew needs square matrices, got {tuple(A_raw.shape)}")
    return A_raw - A_raw.transpose(-1, -2)


def make_dissipation(B_raw: torch.Tensor, d_raw: torch.Tensor) -> torch.Tensor:
    """R = B B^T + diag(softplus(d_raw)), B the lower triangle of ``B_raw``."""
    B = torch.tril(as_tensor(B_raw))
    d = F.softplus(as_tensor(d_raw))
    return B @ B.transpose(-1, -2) + torch.diag_embed(d)


class PHStructure(nn.Module):
    """Learnable (J, R, G, H) for an n-dimensional phase space.

    ``mode="constant"`` keeps J, R, G state independent.  ``mode="state"``
    adds a small net producing per-state corrections to ``A_raw`` and
    ``B_raw`` (J(x), R(x)); the skew / PSD constructions are unchanged.
    """

    def __init__(
        self,
        n: int,
        d_a: int,
        hidden=(64, 64),
        mode: str = "constant",
        generator: torch.Generator | None = None,
        init_scale: float = 0.1,
    ):
        super().__init__()
        if mode not in ("constant", "state"):
            raise ValueError(f"unknown PH mode {mode!r}")
        self.n, self.d_a, self.mode = int(n), int(d_a), mode
        g = generator
        self.A_raw = nn.Parameter(init_scale * torch.randn(n, n, generator=g, dtype=DTYPE))
        self.B_raw = nn.Parameter(init_scale * torch.randn(n, n, generator=g, dtype=DTYPE))
        self.d_raw = nn.Parameter(torch.full((n,), -2.0, dtype=DTYPE))
        self.G = nn.Parameter(init_scale * torch.randn(n, d_a, generator=g, dtype=DTYPE))
        self.H = ScalarField(n, hidden, "tanh", generator=g)
        if mode == "state":
            self.structure_net = MLP(n, 2 * n * n, (32,), "tanh", generator=g, out_scale=0.01)

    def arch(self) -> dict:
        return {"n": self.n, "d_a": self.d_a, "mode": self.mode, "hidden": self.H.widths}

    def matrices(self, x: torch.Tensor | None = None):
        """Return (J, R, G); batched over ``x`` in state-dependent mode."""
        A, B = self.A_raw, self.B_raw
        if self.mode == "state":
            if x is None:
                raise ValueError("state-dependent structure needs x")
            corr = self.structure_net(x).reshape(*x.shape[:-1], 2, self.n, self.n)
            A = A + corr[..., 0, :, :]
            B = B + corr[..., 1, :, :]
        return make_skew(A), make_dissipation(B, self.d_raw), self.G

    def energy(self, x: torch.Tensor) -> torch.Tensor:
        return self.H(x)

    def grad_energy(self, x: torch.Tensor) -> torch.Tensor:
        """grad_x H, differentiable w.r.t. x and the parameters."""
        with torch.enable_grad():
            if not x.requires_grad:
                x = x.detach().requires_grad_(True)
            (g,) = torch.autograd.grad(self.H(x).sum(), x, create_graph=True)
        return g


def ph_vector_field(s: PHStructure, x: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    x = as_tensor(x)
    a = as_tensor(a)
    if x.shape[-1] != s.n:
        raise DimensionError(f"phase vector has dim {x.shape[-1]}, structure expects {s.n}")
    if a.shape[-1] != s.d_a:
        raise DimensionError(f"action has dim {a.shape[-1]}, structure expects {s.d_a}")
    J, R, G = s.matrices(x)
    dH = s.grad_energy(x)
    flow = ((J - R) @ dH.unsqueeze(-1)).squeeze(-1)
    return flow + (G @ a.unsqueeze(-1)).squeeze(-1)


def rk4_step(f: Callable, x: torch.Tensor, a: torch.Tensor, dt: float) -> torch.Tensor:
    """Classical RK4 with the action held over the step."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    if dt == 0:
        return x
    k1 = f(x, a)
    k2 = f(x + 0.5 * dt * k1, a)
    k3 = f(x + 0.5 * dt * k2, a)
    k4 = f(x + dt * k3, a)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not torch.isfinite(out).all():
        raise NumericalError("non-finite state in rk4_step", {"dt": dt})
    return out


def ph_rk4_step(s: PHStructure, x, a, dt: float) -> torch.Tensor:
    return rk4_step(lambda y, u: ph_vector_field(s, y, u), as_tensor(x), as_tensor(a), dt)


def shadow_loss(x_post_next: torch.Tensor, x_pred_next: torch.Tensor) -> torch.Tensor:
    """Batch mean of ||sg(x_post) - x_pred||^2; the target never gets a gradient."""
    if x_post_next.shape != x_pred_next.shape:
        raise DimensionError(
            f"target shape {tuple(x_post_next.shape)} != prediction {tuple(x_pred_next.shape)}"
        )
    diff = x_post_next.detach() - x_pred_next
    return (diff**2).sum(-1).mean()


@dataclass(frozen=True)
class CurriculumSchedule:
    """Zero through ``warmup_steps``, linear ramp, then ``lambda_max`` from
    ``total_steps`` (the end of the ramp) onwards."""

    lambda_max: float = 1.0
    warmup_steps: int = 0
    total_steps: int = 1

    def __post_init__(self):
        if self.lambda_max < 0:
            raise ValueError("lambda_max must be >= 0")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")

    @classmethod
    def for_run(cls, n_steps: int, lambda_max: float = 1.0, warmup_frac=0.1, ramp_frac=0.4):
        warm = int(round(warmup_frac * n_steps))
        return cls(lambda_max, warm, warm + max(1, int(round(ramp_frac * n_steps))))


def curriculum_weight(step: int, sched: CurriculumSchedule) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if step <= sched.warmup_steps:
        return 0.0
    if step >= sched.total_steps:
        return float(sched.lambda_max)
    frac = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return float(sched.lambda_max) * frac
