"""Recurrent state-space world model on proprioceptive observations, with the
port-Hamiltonian shadow regularizer attached to the physical half of ``h``."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffnet import DTYPE, MLP, make_generator, make_optimizer
from .errors import DimensionError, NumericalError
from .latentproj import Projection, partition
from .phcore import CurriculumSchedule, PHStructure, curriculum_weight, ph_rk4_step, shadow_loss

LOGSTD_MIN, LOGSTD_MAX = -5.0, 2.0
LOG_2PI = math.log(2 * math.pi)


@dataclass
class DiagGaussian:
    mean: torch.Tensor
    logstd: torch.Tensor

    @property
    def std(self):
        return self.logstd.exp()

    def sample(self, generator: torch.Generator | None = None, noise: torch.Tensor | None = None):
        if noise is None:
            noise = torch.randn(self.mean.shape, generator=generator, dtype=self.mean.dtype)
        return self.mean + self.std * noise

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.logstd.detach())

    def log_prob(self, x):
        z = (x - self.mean) / self.std
        return (-0.5 * z**2 - self.logstd - 0.5 * LOG_2PI).sum(-1)

    def entropy(self):
        return (self.logstd + 0.5 * (1.0 + LOG_2PI)).sum(-1)


def kl_divergence(p: DiagGaussian, q: DiagGaussian) -> torch.Tensor:
    """KL(p || q) for diagonal Gaussians, summed over the last axis."""
    var_ratio = torch.exp(2 * (p.logstd - q.logstd))
    mahal = ((p.mean - q.mean) / q.std) ** 2
    return 0.5 * (var_ratio + mahal - 1.0).sum(-1) + (q.logstd - p.logstd).sum(-1)


def gaussian_nll(target, mean):
    """Unit-variance Gaussian negative log-likelihood summed over the last axis."""
    return 0.5 * ((target - mean) ** 2).sum(-1) + 0.5 * target.shape[-1] * LOG_2PI


@dataclass
class RSSMConfig:
    obs_dim: int
    act_dim: int
    deter: int = 64
    stoch: int = 16
    hidden: int = 64
    embed: int = 64
    phase_dim: int = 8
    split_index: int | None = None
    ph_hidden: tuple = (64, 64)
    ph_mode: str = "constant"
    ph_enabled: bool = True
    ph_horizon: int = 1
    dt: float = 0.05
    lr: float = 1e-3
    ph_lr: float = 1e-3
    grad_clip: float = 100.0
    beta: float = 1.0
    kl_balance: float = 0.8
    free_bits: float = 1.0
    lambda_max: float = 1.0
    warmup_frac: float = 0.1
    ramp_frac: float = 0.4
    total_steps: int = 1000

    def __post_init__(self):
        if self.split_index is None:
            self.split_index = self.deter // 2
        if not 0 < self.split_index < self.deter:
            raise DimensionError("split_index must lie strictly inside the deterministic state")

    def schedule(self) -> CurriculumSchedule:
        return CurriculumSchedule.for_run(self.total_steps, self.lambda_max, self.warmup_frac, self.ramp_frac)


class GRUCell(nn.Module):
    """GRU-style cell: the input passes through a tanh layer, then one affine map
    of ``[x, h]`` yields reset, candidate and update pre-activations."""

    def __init__(self, inp: int, hidden: int, deter: int, generator=None):
        super().__init__()
        self.deter = deter
        self.inp = MLP(inp, hidden, (), "tanh", generator=generator)
        self.gates = MLP(hidden + deter, 3 * deter, (), "tanh", generator=generator)

    def forward(self, h, x):
        x = torch.tanh(self.inp(x))
        reset, cand, update = self.gates(torch.cat([x, h], -1)).chunk(3, -1)
        reset = torch.sigmoid(reset)
        cand = torch.tanh(reset * cand)
        update = torch.sigmoid(update - 1.0)
        return update * cand + (1.0 - update) * h


class RSSM(nn.Module):
    def __init__(self, cfg: RSSMConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        g = make_generator(seed, "rssm/init")
        c = cfg
        self.encoder = MLP(c.obs_dim, c.embed, (c.hidden,), "silu", generator=g)
        self.cell = GRUCell(c.stoch + c.act_dim, c.hidden, c.deter, generator=g)
        self.prior_head = MLP(c.deter, 2 * c.stoch, (c.hidden,), "silu", generator=g)
        self.post_head = MLP(c.deter + c.embed, 2 * c.stoch, (c.hidden,), "silu", generator=g)
        self.decoder = MLP(c.deter + c.stoch, c.obs_dim, (c.hidden, c.hidden), "silu", generator=g)
        self.reward_head = MLP(c.deter + c.stoch, 1, (c.hidden, c.hidden), "silu", generator=g)
        self.register_buffer("obs_mean", torch.zeros(c.obs_dim, dtype=DTYPE))
        self.register_buffer("obs_std", torch.ones(c.obs_dim, dtype=DTYPE))
        self.noise = make_generator(seed, "rssm/noise")

    @property
    def feat_dim(self) -> int:
        return self.cfg.deter + self.cfg.stoch

    def set_obs_stats(self, mean, std):
        self.obs_mean.copy_(torch.as_tensor(mean, dtype=DTYPE))
        self.obs_std.copy_(torch.clamp(torch.as_tensor(std, dtype=DTYPE), min=1e-3))

    def normalize(self, obs):
        return (obs - self.obs_mean) / self.obs_std

    def initial(self, batch: int):
        return (torch.zeros(batch, self.cfg.deter, dtype=DTYPE), torch.zeros(batch, self.cfg.stoch, dtype=DTYPE))

    @staticmethod
    def _dist(raw) -> DiagGaussian:
        mean, logstd = raw.chunk(2, -1)
        return DiagGaussian(mean, torch.clamp(logstd, LOGSTD_MIN, LOGSTD_MAX))

    def recurrent_step(self, h, z, a):
        if a.shape[-1] != self.cfg.act_dim or z.shape[-1] != self.cfg.stoch or h.shape[-1] != self.cfg.deter:
            raise DimensionError("recurrent_step: h, z, a dimensions disagree with the config")
        return self.cell(h, torch.cat([z, a], -1))

    def prior(self, h) -> DiagGaussian:
        return self._dist(self.prior_head(h))

    def posterior(self, h, obs, normalized: bool = False) -> DiagGaussian:
        if obs.shape[-1] != self.cfg.obs_dim:
            raise DimensionError(f"observation dim {obs.shape[-1]} != {self.cfg.obs_dim}")
        o = obs if normalized else self.normalize(obs)
        return self._dist(self.post_head(torch.cat([h, self.encoder(o)], -1)))

    def observe(self, obs, prev_actions, state=None, generator=None) -> dict:
        """Filter a (B, T, ·) batch; ``prev_actions[:, t]`` is the action that led to ``obs[:, t]``."""
        B, T, _ = obs.shape
        gen = generator or self.noise
        h, z = self.initial(B) if state is None else state
        o = self.normalize(obs)
        emb = self.encoder(o)
        hs, zs, post_m, post_s, prior_m, prior_s = [], [], [], [], [], []
        for t in range(T):
            h = self.recurrent_step(h, z, prev_actions[:, t])
            prior = self.prior(h)
            post = self._dist(self.post_head(torch.cat([h, emb[:, t]], -1)))
            z = post.sample(gen)
            hs.append(h)
            zs.append(z)
            post_m.append(post.mean)
            post_s.append(post.logstd)
            prior_m.append(prior.mean)
            prior_s.append(prior.logstd)
        st = lambda xs: torch.stack(xs, 1)
        return {
            "h": st(hs),
            "z": st(zs),
            "post": DiagGaussian(st(post_m), st(post_s)),
            "prior": DiagGaussian(st(prior_m), st(prior_s)),
        }

    def img_step(self, h, z, a, generator=None):
        h = self.recurrent_step(h, z, a)
        z = self.prior(h).sample(generator or self.noise)
        return h, z

    def features(self, h, z):
        return torch.cat([h, z], -1)

    def decode(self, feat):
        """Decoded observation in the raw (unnormalized) scale."""
        return self.decoder(feat) * self.obs_std + self.obs_mean

    def predict_reward(self, feat):
        return self.reward_head(feat).squeeze(-1)


def divergence_loss(post: DiagGaussian, prior: DiagGaussian, balance=0.8, free_bits=1.0) -> torch.Tensor:
    dyn = kl_divergence(post.detach(), prior)
    rep = kl_divergence(post, prior.detach())
    return balance * torch.clamp(dyn, min=free_bits).mean() + (1 - balance) * torch.clamp(rep, min=free_bits).mean()


@dataclass
class WorldModelLoss:
    recon: float
    divergence: float
    reward_pred: float
    ph: float
    total: float
    lambda_ph: float = 0.0
    kl: float = 0.0

    def as_dict(self):
        return dict(self.__dict__)


class PHShadow(nn.Module):
    """Projection of ``h_phys`` into phase space plus the PH structure."""

    def __init__(self, cfg: RSSMConfig, seed: int = 0):
        super().__init__()
        g = make_generator(seed, "ph/init")
        self.proj = Projection(cfg.split_index, cfg.phase_dim, generator=g)
        self.structure = PHStructure(cfg.phase_dim, cfg.act_dim, cfg.ph_hidden, cfg.ph_mode, generator=g)

    def phase(self, h):
        h_phys, _ = partition(h.detach(), self.proj.d_phys)
        return self.proj(h_phys)

    def loss(self, h, actions, dt: float, horizon: int = 1):
        """Shadow loss over all adjacent pairs (or ``horizon``-step rollouts).

        ``actions[:, t]`` drives ``h[:, t-1] -> h[:, t]``, matching the
        ``prev_actions`` convention of :meth:`RSSM.observe`.
        """
        x = self.phase(h)
        B, T, n = x.shape
        m = max(1, min(horizon, T - 1))
        pred = x[:, : T - m]
        losses = []
        for j in range(1, m + 1):
            a = actions[:, j : T - m + j]
            pred = ph_rk4_step(self.structure, pred.reshape(-1, n), a.reshape(-1, a.shape[-1]), dt).reshape(pred.shape)
            target = x[:, j : T - m + j]
            losses.append(shadow_loss(target.reshape(-1, n), pred.reshape(-1, n)))
        return torch.stack(losses).mean()


class WorldModel:
    """RSSM + optional PH shadow branch + their optimizers."""

    def __init__(self, cfg: RSSMConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.rssm = RSSM(cfg, seed)
        self.opt = make_optimizer(self.rssm.parameters(), cfg.lr)
        self.shadow = PHShadow(cfg, seed) if cfg.ph_enabled else None
        self.ph_opt = make_optimizer(self.shadow.parameters(), cfg.ph_lr) if self.shadow else None
        self.schedule = cfg.schedule()
        self.step = 0

    def parameters(self):
        yield from self.rssm.parameters()
        if self.shadow is not None:
            yield from self.shadow.parameters()

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)

    def loss(self, obs, prev_actions, rewards, step: int | None = None):
        step = self.step if step is None else step
        out = self.rssm.observe(obs, prev_actions)
        feat = self.rssm.features(out["h"], out["z"])
        recon = gaussian_nll(self.rssm.normalize(obs), self.rssm.decoder(feat)).mean()
        rew = gaussian_nll(rewards.unsqueeze(-1), self.rssm.reward_head(feat)).mean()
        c = self.cfg
        div = divergence_loss(out["post"], out["prior"], c.kl_balance, c.free_bits)
        lam = curriculum_weight(step, self.schedule) if self.shadow is not None else 0.0
        total = recon + c.beta * div + rew
        ph = torch.zeros((), dtype=DTYPE)
        if self.shadow is not None:
            ph = self.shadow.loss(out["h"], prev_actions, c.dt, c.ph_horizon)
            total = total + lam * ph
        kl = kl_divergence(out["post"], out["prior"]).mean()
        return total, {"recon": recon, "divergence": div, "reward_pred": rew, "ph": ph, "lambda_ph": lam,
                       "kl": kl, "out": out}

    def update(self, obs, prev_actions, rewards) -> WorldModelLoss:
        total, parts = self.loss(obs, prev_actions, rewards)
        if not torch.isfinite(total):
            raise NumericalError(
                "non-finite world-model loss",
                {k: float(v) for k, v in parts.items() if k != "out"} | {"step": self.step},
            )
        self.opt.zero_grad()
        if self.ph_opt is not None:
            self.ph_opt.zero_grad()
        total.backward()
        nn.utils.clip_grad_norm_(self.rssm.parameters(), self.cfg.grad_clip)
        self.opt.step()
        if self.ph_opt is not None:
            nn.utils.clip_grad_norm_(self.shadow.parameters(), self.cfg.grad_clip)
            self.ph_opt.step()
        self.step += 1
        f = lambda v: float(v.detach()) if torch.is_tensor(v) else float(v)
        return WorldModelLoss(
            f(parts["recon"]), f(parts["divergence"]), f(parts["reward_pred"]),
            f(parts["ph"]), f(total), f(parts["lambda_ph"]), f(parts["kl"]),
        )

    def state_dict(self) -> dict:
        d = {"rssm": self.rssm.state_dict(), "opt": self.opt.state_dict(), "step": self.step,
             "noise": self.rssm.noise.get_state()}
        if self.shadow is not None:
            d["shadow"] = self.shadow.state_dict()
            d["ph_opt"] = self.ph_opt.state_dict()
        return d

    def load_state_dict(self, d: dict):
        self.rssm.load_state_dict(d["rssm"])
        self.opt.load_state_dict(d["opt"])
        self.step = int(d["step"])
        self.rssm.noise.set_state(d["noise"])
        if self.shadow is not None:
            self.shadow.load_state_dict(d["shadow"])
            self.ph_opt.load_state_dict(d["ph_opt"])


# -------------------------------------------------------------------- replay


class ReplayBuffer:
    """FIFO of whole episodes holding obs, previous actions, rewards and q.

    ``snapshot()`` returns a frozen view so a trainer can sample while the
    collector keeps appending.
    """

    def __init__(self, capacity_steps: int = 100_000):
        self.capacity = capacity_steps
        self.episodes: list[dict] = []
        self.n_steps = 0

    def add(self, episode: dict):
        self.episodes.append({k: np.asarray(v, dtype=np.float64) for k, v in episode.items()})
        self.n_steps += len(episode["reward"])
        while self.n_steps > self.capacity and len(self.episodes) > 1:
            self.n_steps -= len(self.episodes.pop(0)["reward"])

    def snapshot(self) -> "ReplayBuffer":
        snap = ReplayBuffer(self.capacity)
        snap.episodes = list(self.episodes)
        snap.n_steps = self.n_steps
        return snap

    def __len__(self):
        return self.n_steps

    def sample(self, rng: np.random.Generator, batch: int, length: int, recent: int | None = None) -> dict:
        eps = self.episodes if recent is None else self.episodes[-recent:]
        eps = [e for e in eps if len(e["reward"]) >= length]
        if not eps:
            raise ValueError("no episode long enough to sample from")
        out = {k: [] for k in eps[0]}
        for _ in range(batch):
            e = eps[rng.integers(len(eps))]
            start = rng.integers(len(e["reward"]) - length + 1)
            for k in out:
                out[k].append(e[k][start : start + length])
        return {k: torch.as_tensor(np.stack(v), dtype=DTYPE) for k, v in out.items()}

    def obs_stats(self):
        obs = np.concatenate([e["obs"] for e in self.episodes])
        return obs.mean(0), obs.std(0)

    def state_dict(self):
        return {"capacity": self.capacity, "episodes": self.episodes}

    def load_state_dict(self, d):
        self.capacity = d["capacity"]
        self.episodes = [dict(e) for e in d["episodes"]]
        self.n_steps = sum(len(e["reward"]) for e in self.episodes)
