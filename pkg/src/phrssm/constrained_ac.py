"""Imagination actor-critic with Hamiltonian energy / smoothness constraints.

The primal objective is ``L_AC + lam_e (C_energy - eps_e) + lam_s (C_smooth - eps_s)``
with the multipliers held constant; after each primal step the multipliers
take a projected ascent step and stay nonnegative.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffnet import DTYPE, MLP, make_generator, make_optimizer
from .errors import DimensionError, NumericalError
from .rssm import LOG_2PI

# --------------------------------------------------------------- returns


def lambda_returns(rewards, values, continues, gamma: float, lam: float) -> torch.Tensor:
    """Backward lambda-return recursion along the last axis.

    ``R_t = r_t + gamma c_t ((1 - lam) V_{t+1} + lam R_{t+1})`` with the
    bootstrap ``R_H = V_H``.  All inputs share shape ``(..., H)``.
    """
    rewards, values, continues = (torch.as_tensor(x, dtype=DTYPE) for x in (rewards, values, continues))
    H = values.shape[-1]
    if H < 2:
        raise DimensionError("lambda returns need a horizon of at least 2")
    if rewards.shape != values.shape or continues.shape != values.shape:
        raise DimensionError("rewards, values and continues must share a shape")
    out = [values[..., -1]]
    for t in range(H - 2, -1, -1):
        nxt = (1 - lam) * values[..., t + 1] + lam * out[-1]
        out.append(rewards[..., t] + gamma * continues[..., t] * nxt)
    return torch.stack(out[::-1], -1)


def discount_from_horizon(horizon: float) -> float:
    return 1.0 - 1.0 / horizon


def discount_weights(continues, horizon: float) -> torch.Tensor:
    """Cumulative products of ``c_tau * gamma`` with ``gamma = 1 - 1/horizon``."""
    gamma = discount_from_horizon(horizon)
    c = torch.as_tensor(continues, dtype=DTYPE)
    return torch.cumprod(c * gamma, dim=-1)


class ReturnScaler:
    """EMA of the 5% / 95% return quantiles; ``scale = max(1, q95 - q05)``."""

    def __init__(self, decay: float = 0.99):
        if not 0 < decay < 1:
            raise ValueError("decay must lie in (0, 1)")
        self.decay = decay
        self.q05_ema: float | None = None
        self.q95_ema: float | None = None

    def update(self, returns: torch.Tensor):
        flat = returns.detach().reshape(-1)
        lo = float(torch.quantile(flat, 0.05))
        hi = float(torch.quantile(flat, 0.95))
        if self.q05_ema is None:
            self.q05_ema, self.q95_ema = lo, hi
        else:
            d = self.decay
            self.q05_ema = d * self.q05_ema + (1 - d) * lo
            self.q95_ema = d * self.q95_ema + (1 - d) * hi

    @property
    def scale(self) -> float:
        if self.q05_ema is None:
            return 1.0
        return max(1.0, self.q95_ema - self.q05_ema)

    def state_dict(self):
        return {"decay": self.decay, "q05": self.q05_ema, "q95": self.q95_ema}

    def load_state_dict(self, d):
        self.decay, self.q05_ema, self.q95_ema = d["decay"], d["q05"], d["q95"]


def normalized_advantage(R_lambda, values, scaler: ReturnScaler) -> torch.Tensor:
    return (R_lambda - values) / scaler.scale


# ---------------------------------------------------------------- networks


@dataclass
class SquashedGaussian:
    mean: torch.Tensor
    std: torch.Tensor

    def rsample(self, generator=None):
        """Returns (action, pre-squash sample)."""
        eps = torch.randn(self.mean.shape, generator=generator, dtype=self.mean.dtype)
        u = self.mean + self.std * eps
        return torch.tanh(u), u

    def mode(self):
        return torch.tanh(self.mean)

    def log_prob(self, u):
        z = (u - self.mean) / self.std
        base = (-0.5 * z**2 - torch.log(self.std) - 0.5 * LOG_2PI).sum(-1)
        # log |d tanh(u) / du| = 2 (log 2 - u - softplus(-2u))
        jac = (2.0 * (math.log(2.0) - u - F.softplus(-2.0 * u))).sum(-1)
        return base - jac

    def entropy(self):
        """Entropy of the pre-squash Gaussian."""
        return (torch.log(self.std) + 0.5 * (1.0 + LOG_2PI)).sum(-1)


class Actor(nn.Module):
    def __init__(self, feat_dim: int, act_dim: int, hidden=(64, 64), min_std=0.1, max_std=1.0, generator=None):
        super().__init__()
        self.net = MLP(feat_dim, 2 * act_dim, hidden, "silu", generator=generator, out_scale=0.1)
        self.act_dim = act_dim
        self.min_std, self.max_std = min_std, max_std

    def forward(self, feat) -> SquashedGaussian:
        mean, raw = self.net(feat).chunk(2, -1)
        std = (self.max_std - self.min_std) * torch.sigmoid(raw + 2.0) + self.min_std
        return SquashedGaussian(mean, std)


class Critic(nn.Module):
    """Gaussian value head with unit variance."""

    def __init__(self, feat_dim: int, hidden=(64, 64), generator=None):
        super().__init__()
        self.net = MLP(feat_dim, 1, hidden, "silu", generator=generator, out_scale=0.0)

    def forward(self, feat):
        return self.net(feat).squeeze(-1)

    @staticmethod
    def nll(mean, target):
        return 0.5 * (target - mean) ** 2 + 0.5 * LOG_2PI


# -------------------------------------------------------------- rollouts


@dataclass
class ImaginedRollout:
    feats: torch.Tensor      # (B, H, F)
    actions: torch.Tensor    # (B, H, A)
    pre_squash: torch.Tensor  # (B, H, A)
    rewards: torch.Tensor    # (B, H); rewards[:, t] follows actions[:, t]
    continues: torch.Tensor  # (B, H)
    values: torch.Tensor     # (B, H)


def imagine(rssm, actor: Actor, critic: Critic, h, z, horizon: int, generator) -> ImaginedRollout:
    """Roll the prior forward from (h, z) under the actor; the world model is
    not differentiated through."""
    feats, acts, pres = [], [], []
    with torch.no_grad():
        for t in range(horizon):
            feat = rssm.features(h, z)
            a, u = actor(feat).rsample(generator)
            feats.append(feat)
            acts.append(a)
            pres.append(u)
            if t < horizon - 1:
                h, z = rssm.img_step(h, z, a, generator)
        feats_t = torch.stack(feats, 1)
        rewards = torch.zeros(feats_t.shape[:2], dtype=DTYPE)
        rewards[:, :-1] = rssm.predict_reward(feats_t[:, 1:])
        values = critic(feats_t)
    return ImaginedRollout(feats_t, torch.stack(acts, 1), torch.stack(pres, 1), rewards,
                           torch.ones_like(rewards), values)


# ------------------------------------------------------------------- losses


def actor_loss(actor: Actor, rollout: ImaginedRollout, advantages, weights, entropy_scale: float):
    dist = actor(rollout.feats.detach())
    logp = dist.log_prob(rollout.pre_squash.detach())
    ent = dist.entropy()
    per_step = weights.detach() * (-logp * advantages.detach() - entropy_scale * ent)
    return per_step.sum(-1).mean(), {"entropy": ent.mean(), "logp": logp.mean()}


def pad_returns(R_lambda, values):
    """Final-step padding with the bootstrap value (already the case when R_H = V_H)."""
    R = R_lambda.clone()
    R[..., -1] = values[..., -1]
    return R


def critic_loss(critic: Critic, feats, R_padded, v_slow, weights):
    mean = critic(feats.detach())
    per_step = weights.detach() * (Critic.nll(mean, R_padded.detach()) + Critic.nll(mean, v_slow.detach()))
    return per_step.sum(-1).mean()


def energy_constraint(energy_model, q_window, actions, dt: float, create_graph: bool = True):
    """Mean of (grad_a H_next . a)^2 over the batch."""
    g = energy_model.energy_action_gradient(q_window, actions, dt, create_graph=create_graph)
    return ((g * actions).sum(-1) ** 2).mean()


def smoothness_constraint(energy_model, q_window, actions, dt: float, create_graph: bool = True):
    """Mean directional curvature a^T (d^2 H_next / d a^2) a, via an HVP."""
    hv = energy_model.energy_action_hvp(q_window, actions, actions, dt, create_graph=create_graph)
    return (hv * actions).sum(-1).mean()


def constraint_samples(energy_model, q_window, actions, dt: float):
    """Per-sample constraint values (no graph), used for threshold calibration."""
    g = energy_model.energy_action_gradient(q_window, actions, dt)
    hv = energy_model.energy_action_hvp(q_window, actions, actions, dt)
    return ((g * actions).sum(-1) ** 2).detach(), (hv * actions).sum(-1).detach()


@dataclass
class DualState:
    lambda_e: float = 0.0
    lambda_s: float = 0.0
    eps_e: float = 0.0
    eps_s: float = 0.0
    eta_lambda: float = 1e-2

    def __post_init__(self):
        if self.lambda_e < 0 or self.lambda_s < 0:
            raise ValueError("multipliers must start nonnegative")
        if self.eta_lambda < 0:
            raise ValueError("dual step size must be nonnegative")


def dual_update(dual: DualState, C_energy: float, C_smooth: float) -> DualState:
    """Projected dual ascent; returns a new state (the input is left untouched)."""
    return DualState(
        max(0.0, dual.lambda_e + dual.eta_lambda * (float(C_energy) - dual.eps_e)),
        max(0.0, dual.lambda_s + dual.eta_lambda * (float(C_smooth) - dual.eps_s)),
        dual.eps_e, dual.eps_s, dual.eta_lambda,
    )


def total_objective(L_actor, L_critic, dual: DualState, C_energy, C_smooth, alpha_p=1.0, alpha_v=1.0):
    # multipliers enter as plain floats: no gradient flows to them
    L_ac = alpha_p * L_actor + alpha_v * L_critic
    return L_ac + float(dual.lambda_e) * (C_energy - dual.eps_e) + float(dual.lambda_s) * (C_smooth - dual.eps_s)


# ------------------------------------------------------------------ learner


@dataclass
class ACConfig:
    horizon: int = 15
    discount_horizon: float = 100.0
    return_lambda: float = 0.95
    entropy_scale: float = 3e-4
    alpha_p: float = 1.0
    alpha_v: float = 1.0
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    grad_clip: float = 100.0
    slow_decay: float = 0.98
    quantile_decay: float = 0.99
    hidden: tuple = (64, 64)
    constraints: bool = False
    constraint_source: str = "replay"  # or "imagined"
    constraint_batch: int = 64
    lambda_e_init: float = 0.0
    lambda_s_init: float = 0.0
    eps_e: float | None = None
    eps_s: float | None = None
    eta_lambda: float = 1e-2
    eps_percentile: float = 60.0


class ActorCritic:
    def __init__(self, feat_dim: int, act_dim: int, cfg: ACConfig, seed: int = 0):
        self.cfg = cfg
        g = make_generator(seed, "ac/init")
        self.actor = Actor(feat_dim, act_dim, cfg.hidden, generator=g)
        self.critic = Critic(feat_dim, cfg.hidden, generator=g)
        self.slow_critic = copy.deepcopy(self.critic)
        for p in self.slow_critic.parameters():
            p.requires_grad_(False)
        self.actor_opt = make_optimizer(self.actor.parameters(), cfg.actor_lr)
        self.critic_opt = make_optimizer(self.critic.parameters(), cfg.critic_lr)
        self.scaler = ReturnScaler(cfg.quantile_decay)
        self.dual = DualState(cfg.lambda_e_init, cfg.lambda_s_init, cfg.eps_e or 0.0, cfg.eps_s or 0.0,
                              cfg.eta_lambda)
        self.imag_gen = make_generator(seed, "ac/imagine")
        self.constraint_gen = make_generator(seed, "ac/constraint")
        self.steps = 0

    @property
    def gamma(self) -> float:
        return discount_from_horizon(self.cfg.discount_horizon)

    def update_slow(self):
        d = self.cfg.slow_decay
        with torch.no_grad():
            for ps, pf in zip(self.slow_critic.parameters(), self.critic.parameters()):
                ps.mul_(d).add_((1 - d) * pf)

    def update(self, rssm, start_h, start_z, constraint_batch=None, energy_model=None, dt=None) -> dict:
        """One primal step on imagined rollouts (+ constraints), then the dual step."""
        cfg = self.cfg
        roll = imagine(rssm, self.actor, self.critic, start_h, start_z, cfg.horizon, self.imag_gen)
        R = lambda_returns(roll.rewards, roll.values, roll.continues, self.gamma, cfg.return_lambda)
        self.scaler.update(R[..., :-1])
        adv = normalized_advantage(R, roll.values, self.scaler)
        w = discount_weights(roll.continues, cfg.discount_horizon)
        L_actor, info = actor_loss(self.actor, roll, adv, w, cfg.entropy_scale)
        with torch.no_grad():
            v_slow = self.slow_critic(roll.feats)
        L_critic = critic_loss(self.critic, roll.feats, pad_returns(R, roll.values), v_slow, w)
        C_e = C_s = torch.zeros((), dtype=DTYPE)
        use_constraints = cfg.constraints and energy_model is not None and constraint_batch is not None
        if use_constraints:
            q_window, feats = constraint_batch
            a, _ = self.actor(feats.detach()).rsample(self.constraint_gen)
            C_e = energy_constraint(energy_model, q_window, a, dt)
            C_s = smoothness_constraint(energy_model, q_window, a, dt)
            total = total_objective(L_actor, L_critic, self.dual, C_e, C_s, cfg.alpha_p, cfg.alpha_v)
        else:
            total = cfg.alpha_p * L_actor + cfg.alpha_v * L_critic
        if not torch.isfinite(total):
            raise NumericalError("non-finite actor-critic loss",
                                 {"actor": float(L_actor.detach()), "critic": float(L_critic.detach()), "step": self.steps})
        self.actor_opt.zero_grad()
        self.critic_opt.zero_grad()
        total.backward()
        nn.utils.clip_grad_norm_(self.actor.parameters(), cfg.grad_clip)
        nn.utils.clip_grad_norm_(self.critic.parameters(), cfg.grad_clip)
        self.actor_opt.step()
        self.critic_opt.step()
        self.update_slow()
        if use_constraints:
            self.dual = dual_update(self.dual, float(C_e.detach()), float(C_s.detach()))
        self.steps += 1
        return {
            "return_estimate": float(R[:, 0].mean()),
            "L_actor": float(L_actor.detach()),
            "L_critic": float(L_critic.detach()),
            "C_energy": float(C_e.detach()),
            "C_smooth": float(C_s.detach()),
            "lambda_e": self.dual.lambda_e,
            "lambda_s": self.dual.lambda_s,
            "entropy": float(info["entropy"].detach()),
            "return_scale": self.scaler.scale,
        }

    def calibrate_thresholds(self, energy_model, batches, dt: float):
        """Set eps_e / eps_s to a percentile of the current policy's per-sample values."""
        ce, cs = [], []
        for q_window, feats in batches:
            with torch.no_grad():
                a, _ = self.actor(feats).rsample(self.constraint_gen)
            e, s = constraint_samples(energy_model, q_window, a, dt)
            ce.append(e)
            cs.append(s)
        pct = self.cfg.eps_percentile
        eps_e = float(np.percentile(torch.cat(ce).numpy(), pct)) if self.cfg.eps_e is None else self.cfg.eps_e
        eps_s = float(np.percentile(torch.cat(cs).numpy(), pct)) if self.cfg.eps_s is None else self.cfg.eps_s
        self.dual = DualState(self.dual.lambda_e, self.dual.lambda_s, eps_e, eps_s, self.dual.eta_lambda)
        return eps_e, eps_s

    def act(self, feat, deterministic=False, generator=None):
        with torch.no_grad():
            dist = self.actor(feat)
            return dist.mode() if deterministic else dist.rsample(generator)[0]

    def state_dict(self):
        return {
            "actor": self.actor.state_dict(), "critic": self.critic.state_dict(),
            "slow_critic": self.slow_critic.state_dict(), "actor_opt": self.actor_opt.state_dict(),
            "critic_opt": self.critic_opt.state_dict(), "scaler": self.scaler.state_dict(),
            "dual": dict(self.dual.__dict__), "imag_gen": self.imag_gen.get_state(),
            "constraint_gen": self.constraint_gen.get_state(), "steps": self.steps,
        }

    def load_state_dict(self, d):
        self.actor.load_state_dict(d["actor"])
        self.critic.load_state_dict(d["critic"])
        self.slow_critic.load_state_dict(d["slow_critic"])
        self.actor_opt.load_state_dict(d["actor_opt"])
        self.critic_opt.load_state_dict(d["critic_opt"])
        self.scaler.load_state_dict(d["scaler"])
        # multipliers and thresholds are state; the step size follows the current config
        self.dual = DualState(**{**d["dual"], "eta_lambda": self.cfg.eta_lambda})
        self.imag_gen.set_state(d["imag_gen"])
        self.constraint_gen.set_state(d["constraint_gen"])
        self.steps = int(d["steps"])
