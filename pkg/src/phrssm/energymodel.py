"""Kinematics-aware energy world model.

Momentum is inferred from a short window of generalized coordinates, the
Hamiltonian splits into a learned potential and a kinetic term with a
Cholesky-factored inverse mass, and one RK4 step of the dissipative
port-Hamiltonian dynamics

    dq/dt = grad_p H,    dp/dt = -grad_q H - D(q, p) dq/dt + G(q) phi(a)

gives the post-action energy.  With this choice ``dH/dt = P_work - P_diss``
holds identically, which the tests check numerically.

Energies and momenta live in normalized units ``(E - offset) / scale`` and
``p / scale``; scaling both by the same factor leaves the flow unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffnet import DTYPE, MLP, ScalarField, as_tensor, make_optimizer
from .errors import DimensionError, InsufficientDataError, NumericalError
from .phcore import rk4_step


def _inv_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class MomentumTCN(nn.Module):
    """Two causal convolutions over finite-difference velocities of the window,
    a head that also sees the current configuration, and a linear skip path."""

    def __init__(self, d_q: int, k: int, embed_dim: int, channels: int = 32, generator=None):
        super().__init__()
        if k < 1:
            raise ValueError("history window needs k >= 1")
        self.d_q, self.k = d_q, k
        kernel = min(2, k)
        self.conv1 = nn.Conv1d(d_q, channels, kernel, dtype=DTYPE)
        self.conv2 = nn.Conv1d(channels, channels, kernel, dtype=DTYPE)
        conv_len = k - 2 * (kernel - 1)
        if conv_len < 1:
            self.conv2 = None
            conv_len = k - (kernel - 1)
        self.head = MLP(channels * conv_len + embed_dim, d_q, (channels,), "tanh", generator=generator)
        self.skip = nn.Linear(k * d_q, d_q, bias=False, dtype=DTYPE)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                if conv is not None:
                    w = torch.empty_like(conv.weight)
                    nn.init.orthogonal_(w, generator=generator)
                    conv.weight.copy_(w)
                    conv.bias.zero_()
            self.skip.weight.zero_()

    def forward(self, vel: torch.Tensor, q_embed: torch.Tensor) -> torch.Tensor:
        # vel: (B, k, d_q), oldest difference first
        y = torch.tanh(self.conv1(vel.transpose(1, 2)))
        if self.conv2 is not None:
            y = torch.tanh(self.conv2(y))
        feats = torch.cat([y.flatten(1), q_embed], dim=-1)
        return self.head(feats) + self.skip(vel.flatten(1))


@dataclass
class EnergyPrediction:
    H_t: torch.Tensor
    H_next: torch.Tensor
    p_t: torch.Tensor
    p_next: torch.Tensor
    q_next: torch.Tensor
    P_work: torch.Tensor
    P_diss: torch.Tensor


class EnergyModel(nn.Module):
    def __init__(
        self,
        d_q: int,
        d_a: int,
        k: int = 4,
        periodic=None,
        hidden=(64, 64),
        action_hidden=(32,),
        tcn_channels: int = 32,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.d_q, self.d_a, self.k = int(d_q), int(d_a), int(k)
        self.periodic = tuple(bool(p) for p in (periodic or (False,) * d_q))
        if len(self.periodic) != d_q:
            raise DimensionError("periodic mask must have one entry per coordinate")
        e = self.embed_dim
        g = generator
        n_tril = d_q * (d_q + 1) // 2
        self.momentum_net = MomentumTCN(d_q, k, e, tcn_channels, generator=g)
        self.V = ScalarField(e, hidden, "tanh", generator=g)
        self.L_net = MLP(e, n_tril, hidden, "tanh", generator=g, out_scale=0.1)
        self.G_net = MLP(e, d_q * d_a, hidden, "tanh", generator=g, out_scale=0.1)
        self.D_net = MLP(e + d_q, d_q, hidden, "tanh", generator=g, out_scale=0.1)
        self.action_encoder = MLP(d_a, d_a, action_hidden, "tanh", generator=g)
        self.register_buffer("energy_offset", torch.zeros((), dtype=DTYPE))
        self.register_buffer("energy_scale", torch.ones((), dtype=DTYPE))
        rows, cols = torch.tril_indices(d_q, d_q)
        self.register_buffer("_tril_rows", rows, persistent=False)
        self.register_buffer("_tril_cols", cols, persistent=False)
        self.register_buffer("_tril_diag", rows == cols, persistent=False)
        self._diag_mask = (rows == cols).tolist()
        with torch.no_grad():
            for mlp, bias in ((self.L_net, _inv_softplus(1.0)), (self.D_net, _inv_softplus(0.1))):
                last = mlp.net[-1]
                # only the diagonal entries of L go through softplus
                if mlp is self.L_net:
                    last.bias.copy_(torch.tensor([bias if d else 0.0 for d in self._diag_mask], dtype=DTYPE))
                else:
                    last.bias.fill_(bias)

    def arch(self) -> dict:
        return {"d_q": self.d_q, "d_a": self.d_a, "k": self.k, "periodic": list(self.periodic),
                "hidden": self.V.widths}

    @property
    def embed_dim(self) -> int:
        return sum(2 if p else 1 for p in self.periodic)

    # ------------------------------------------------------------- pieces
    def embed(self, q: torch.Tensor) -> torch.Tensor:
        parts = []
        for j, periodic in enumerate(self.periodic):
            if periodic:
                parts += [torch.cos(q[..., j : j + 1]), torch.sin(q[..., j : j + 1])]
            else:
                parts.append(q[..., j : j + 1])
        return torch.cat(parts, dim=-1)

    def cholesky_factor(self, q: torch.Tensor) -> torch.Tensor:
        raw = self.L_net(self.embed(q))
        vals = torch.where(self._tril_diag, F.softplus(raw), raw)
        L = torch.zeros(*q.shape[:-1], self.d_q, self.d_q, dtype=q.dtype)
        L[..., self._tril_rows, self._tril_cols] = vals
        return L

    def inverse_mass(self, q: torch.Tensor) -> torch.Tensor:
        L = self.cholesky_factor(q)
        return L @ L.transpose(-1, -2)

    def port_matrix(self, q: torch.Tensor) -> torch.Tensor:
        return self.G_net(self.embed(q)).reshape(*q.shape[:-1], self.d_q, self.d_a)

    def damping(self, q: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
        """Diagonal of D(q, p), strictly positive."""
        return F.softplus(self.D_net(torch.cat([self.embed(q), p], dim=-1)))

    def encode_action(self, a: torch.Tensor) -> torch.Tensor:
        return self.action_encoder(a)

    def hamiltonian(self, q: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
        Minv = self.inverse_mass(q)
        kinetic = 0.5 * (p.unsqueeze(-2) @ Minv @ p.unsqueeze(-1)).squeeze(-1).squeeze(-1)
        return self.V(self.embed(q)) + kinetic

    def kinetic(self, q, p):
        return self.hamiltonian(q, p) - self.V(self.embed(q))

    def velocity(self, q: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
        return (self.inverse_mass(q) @ p.unsqueeze(-1)).squeeze(-1)

    def velocity_autodiff(self, q: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
        with torch.enable_grad():
            if not p.requires_grad:
                p = p.detach().requires_grad_(True)
            (g,) = torch.autograd.grad(self.hamiltonian(q, p).sum(), p, create_graph=True)
        return g

    def grad_q_hamiltonian(self, q: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
        with torch.enable_grad():
            if not q.requires_grad:
                q = q.detach().requires_grad_(True)
            (g,) = torch.autograd.grad(self.hamiltonian(q, p).sum(), q, create_graph=True)
        return g

    def vector_field(self, y: torch.Tensor, a_enc: torch.Tensor) -> torch.Tensor:
        q, p = y[..., : self.d_q], y[..., self.d_q :]
        qdot = self.velocity(q, p)
        dHdq = self.grad_q_hamiltonian(q, p)
        port = (self.port_matrix(q) @ a_enc.unsqueeze(-1)).squeeze(-1)
        pdot = -dHdq - self.damping(q, p) * qdot + port
        return torch.cat([qdot, pdot], dim=-1)

    def power_terms(self, q, p, a) -> tuple[torch.Tensor, torch.Tensor]:
        qdot = self.velocity(q, p)
        port = (self.port_matrix(q) @ self.encode_action(a).unsqueeze(-1)).squeeze(-1)
        P_work = (qdot * port).sum(-1)
        P_diss = (qdot * self.damping(q, p) * qdot).sum(-1)
        return P_work, P_diss

    def ph_step(self, q, p, a, dt: float):
        a_enc = self.encode_action(a)
        y = torch.cat([q, p], dim=-1)
        try:
            y1 = rk4_step(self.vector_field, y, a_enc, float(dt))
        except NumericalError as exc:
            exc.diagnostics.update({"where": "energy ph_step"})
            raise
        return y1[..., : self.d_q], y1[..., self.d_q :]

    # ----------------------------------------------------------- history
    def velocity_features(self, q_window: torch.Tensor, dt: float) -> torch.Tensor:
        return (q_window[..., 1:, :] - q_window[..., :-1, :]) / dt

    def infer_momentum(self, q_window: torch.Tensor, dt: float) -> torch.Tensor:
        q_window = as_tensor(q_window)
        if q_window.dim() == 2:
            return self.infer_momentum(q_window.unsqueeze(0), dt).squeeze(0)
        if q_window.shape[-2:] != (self.k + 1, self.d_q):
            raise DimensionError(
                f"history window must be ({self.k + 1}, {self.d_q}), got {tuple(q_window.shape[-2:])}"
            )
        return self.momentum_net(self.velocity_features(q_window, dt), self.embed(q_window[:, -1]))

    def predict_next_energy(self, q_window, a, dt: float, step_dt: float | None = None) -> EnergyPrediction:
        """``dt`` is the sampling interval of the history; ``step_dt`` (default
        ``dt``) the integration step to the predicted next state."""
        q_window = as_tensor(q_window)
        a = as_tensor(a)
        single = q_window.dim() == 2
        if single:
            q_window, a = q_window.unsqueeze(0), a.unsqueeze(0)
        if a.shape[-1] != self.d_a:
            raise DimensionError(f"action dim {a.shape[-1]} != {self.d_a}")
        q = q_window[:, -1]
        p = self.infer_momentum(q_window, dt)
        H_t = self.hamiltonian(q, p)
        P_work, P_diss = self.power_terms(q, p, a)
        q1, p1 = self.ph_step(q, p, a, dt if step_dt is None else step_dt)
        H1 = self.hamiltonian(q1, p1)
        pred = EnergyPrediction(H_t, H1, p, p1, q1, P_work, P_diss)
        if single:
            pred = EnergyPrediction(*(getattr(pred, f).squeeze(0) for f in pred.__dataclass_fields__))
        return pred

    def next_energy(self, q_window, a, dt) -> torch.Tensor:
        return self.predict_next_energy(q_window, a, dt).H_next

    def energy_action_gradient(self, q_window, a, dt, create_graph: bool = False) -> torch.Tensor:
        """Exact d H_next / d a (rows independent across the batch)."""
        a = as_tensor(a)
        if not create_graph:
            a = a.detach()
        with torch.enable_grad():
            if not a.requires_grad:
                a = a.requires_grad_(True)
            H1 = self.next_energy(q_window, a, dt)
            (g,) = torch.autograd.grad(H1.sum(), a, create_graph=create_graph)
        return g

    def energy_action_hvp(self, q_window, a, direction, dt, create_graph: bool = False) -> torch.Tensor:
        a = as_tensor(a)
        v = as_tensor(direction)
        if v.shape != a.shape:
            raise DimensionError("direction must match the action shape")
        if not create_graph:
            a, v = a.detach(), v.detach()
        with torch.enable_grad():
            # differentiate w.r.t. a fresh node so a direction that aliases ``a``
            # (the smoothness constraint uses v = a) is held fixed
            a = a.clone() if a.requires_grad else a.clone().requires_grad_(True)
            g = self.energy_action_gradient(q_window, a, dt, create_graph=True)
            (hv,) = torch.autograd.grad((g * v).sum(), a, create_graph=create_graph)
        return hv

    # -------------------------------------------------------- calibration
    def set_calibration(self, offset: float, scale: float):
        if scale <= 0:
            raise ValueError("energy scale must be positive")
        self.energy_offset.fill_(float(offset))
        self.energy_scale.fill_(float(scale))

    def normalize_energy(self, E):
        return (as_tensor(E) - self.energy_offset) / self.energy_scale

    def to_physical(self, H):
        return as_tensor(H) * self.energy_scale + self.energy_offset


# ------------------------------------------------------------------ training


@dataclass
class EnergyDataset:
    """Training tuples ``(q window, a, dt, E_t, E_next[, p oracle])`` in physical units."""

    q_window: torch.Tensor
    a: torch.Tensor
    E_t: torch.Tensor
    E_next: torch.Tensor
    dt: float
    p_oracle: torch.Tensor | None = None
    episode: np.ndarray | None = None

    def __len__(self):
        return int(self.E_t.shape[0])

    def subset(self, idx) -> "EnergyDataset":
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        pick = lambda t: None if t is None else t[idx]
        ep = None if self.episode is None else self.episode[idx.numpy()]
        return EnergyDataset(self.q_window[idx], self.a[idx], self.E_t[idx], self.E_next[idx], self.dt,
                             pick(self.p_oracle), ep)

    @classmethod
    def from_trajectories(cls, trajs, k: int, momentum_fn=None) -> "EnergyDataset":
        """Slide a (k+1)-window over each episode.  ``momentum_fn(q, qdot)``
        supplies oracle momenta when the simulator knows them."""
        wins, acts, e0, e1, ps, eps = [], [], [], [], [], []
        for n, tr in enumerate(trajs):
            T = len(tr)
            for t in range(k, T - 1):
                wins.append(tr.q[t - k : t + 1])
                acts.append(tr.a[t])
                e0.append(tr.E_true[t])
                e1.append(tr.E_true[t + 1])
                eps.append(n)
                if momentum_fn is not None:
                    ps.append(momentum_fn(tr.q[t], tr.qdot[t]))
        if not wins:
            raise InsufficientDataError("no complete history windows in the trajectories")
        T = lambda x: torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)
        return cls(T(wins), T(acts), T(e0), T(e1), float(trajs[0].dt),
                   T(ps) if ps else None, np.asarray(eps))


@dataclass
class EnergyTrainConfig:
    epochs: int = 30
    batch_size: int = 256
    lr: float = 3e-3
    w_energy: float = 1.0
    w_next: float = 1.0
    w_momentum: float = 1.0
    seed: int = 0
    lr_decay: float = 0.1  # final lr fraction (cosine)


def energy_loss_terms(model: EnergyModel, batch: EnergyDataset) -> dict[str, torch.Tensor]:
    pred = model.predict_next_energy(batch.q_window, batch.a, batch.dt)
    scale = model.energy_scale
    terms = {
        "energy": ((pred.H_t - model.normalize_energy(batch.E_t)) ** 2).mean(),
        "next": ((pred.H_next - model.normalize_energy(batch.E_next)) ** 2).mean(),
    }
    if batch.p_oracle is not None:
        terms["momentum"] = ((pred.p_t - batch.p_oracle / scale) ** 2).sum(-1).mean()
    else:
        terms["momentum"] = torch.zeros((), dtype=DTYPE)
    return terms


def energy_objective(terms: dict, cfg: EnergyTrainConfig) -> torch.Tensor:
    total = cfg.w_energy * terms["energy"] + cfg.w_next * terms["next"]
    if cfg.w_momentum:
        total = total + cfg.w_momentum * terms["momentum"]
    return total


def calibrate(model: EnergyModel, data: EnergyDataset):
    E = torch.cat([data.E_t, data.E_next])
    model.set_calibration(float(E.mean()), max(float(E.std()), 1e-6))


def train_energy_model(
    model: EnergyModel,
    data: EnergyDataset,
    cfg: EnergyTrainConfig | None = None,
    recalibrate: bool = True,
    log=None,
) -> list[dict]:
    """Supervised regression of current / next energy (+ oracle momenta).

    Returns one dict of epoch-averaged loss terms per epoch.
    """
    cfg = cfg or EnergyTrainConfig()
    if len(data) == 0:
        raise InsufficientDataError("empty energy dataset")
    if recalibrate:
        calibrate(model, data)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = make_optimizer(params, cfg.lr)
    n = len(data)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: cfg.lr_decay + (1 - cfg.lr_decay) * 0.5 * (1 + math.cos(math.pi * min(s, total_steps) / total_steps))
    )
    rng = np.random.default_rng(cfg.seed)
    trace = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        sums = {"energy": 0.0, "next": 0.0, "momentum": 0.0, "total": 0.0}
        for i in range(steps_per_epoch):
            batch = data.subset(perm[i * cfg.batch_size : (i + 1) * cfg.batch_size])
            terms = energy_loss_terms(model, batch)
            loss = energy_objective(terms, cfg)
            if not torch.isfinite(loss):
                raise NumericalError("non-finite energy-model loss", {"epoch": epoch, "step": i})
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            w = len(batch) / n
            for key, val in terms.items():
                sums[key] += w * (float(val.detach()) if torch.is_tensor(val) else float(val))
            sums["total"] += w * float(loss.detach())
        sums["epoch"] = epoch
        trace.append(sums)
        if log is not None:
            log(sums)
    return trace


def evaluate_energy_alignment(model: EnergyModel, data: EnergyDataset) -> dict:
    """Pearson correlations of predicted vs true current / next energy."""
    pred = model.predict_next_energy(data.q_window, data.a, data.dt)
    H_t = model.to_physical(pred.H_t).detach().numpy()
    H_n = model.to_physical(pred.H_next).detach().numpy()
    E_t, E_n = data.E_t.numpy(), data.E_next.numpy()
    return {
        "corr_t": float(np.corrcoef(H_t, E_t)[0, 1]),
        "corr_next": float(np.corrcoef(H_n, E_n)[0, 1]),
        "rmse_t": float(np.sqrt(np.mean((H_t - E_t) ** 2))),
        "rmse_next": float(np.sqrt(np.mean((H_n - E_n) ** 2))),
        "H_t": H_t,
        "H_next": H_n,
    }


# ------------------------------------------------------------------ oracles


def analytic_pendulum_model(spec, k: int = 4, offset: float = 0.0, scale: float = 1.0, eps: float = 1e-3,
                            generator=None) -> EnergyModel:
    """Energy model whose nets reproduce the pendulum's analytic V, M^-1, D, G.

    The potential and port use linear read-outs; the action encoder and the
    momentum head use a tiny-amplitude tanh layer, so the match is exact up
    to O(eps^2) plus the finite-difference velocity error.
    """
    p = spec.params
    m, l, g, b = p["m"], p["l"], p["g"], p["b"]
    model = EnergyModel(1, 1, k=k, periodic=(True,), hidden=(), action_hidden=(1,), generator=generator)
    model.set_calibration(offset, scale)
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, (nn.Linear, nn.Conv1d)):
                mod.weight.zero_()
                if mod.bias is not None:
                    mod.bias.zero_()
        mgl = m * g * l
        V = model.V.net[-1]
        V.weight.copy_(torch.tensor([[-mgl / scale, 0.0]]))
        V.bias.fill_((mgl - offset) / scale)
        model.L_net.net[-1].bias.fill_(_inv_softplus(math.sqrt(scale / (m * l * l))))
        model.D_net.net[-1].bias.fill_(_inv_softplus(b / scale))
        model.G_net.net[-1].bias.fill_(spec.gear[0] / scale)
        enc = [mod for mod in model.action_encoder.net if isinstance(mod, nn.Linear)]
        enc[0].weight.fill_(eps)
        enc[1].weight.fill_(1.0 / eps)
        # second-order backward difference: 1.5 v_1 - 0.5 v_2 (v_1 most recent)
        w = torch.zeros(1, k)
        w[0, -1] = 1.5
        if k >= 2:
            w[0, -2] = -0.5
        else:
            w[0, -1] = 1.0
        model.momentum_net.skip.weight.copy_(w * m * l * l / scale)
    return model
