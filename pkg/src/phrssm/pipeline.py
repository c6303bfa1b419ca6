"""Two-stage training and evaluation on the analytic environments.

Stage 1 trains the world model (with the PH curriculum), the actor-critic in
imagination, and finally the energy model on the collected kinematics.
Stage 2 freezes the world and energy models and fine-tunes the policy with
the energy / smoothness constraints and projected dual ascent.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import envsim
from .config import ExperimentConfig
from .constrained_ac import ACConfig, ActorCritic
from .diffnet import DTYPE, derive_seed, load_checkpoint, make_generator, save_checkpoint
from .energymodel import EnergyDataset, EnergyModel, EnergyTrainConfig, evaluate_energy_alignment, train_energy_model
from .errors import VersionError
from .latentproj import log_phase_volume
from .rssm import ReplayBuffer, RSSMConfig, WorldModel

log = logging.getLogger(__name__)

WM_COLUMNS = ["step", "recon", "divergence", "reward_pred", "ph", "lambda_ph", "kl", "total"]
AC_COLUMNS = ["step", "stage", "return_estimate", "L_actor", "L_critic", "C_energy", "C_smooth",
              "lambda_e", "lambda_s", "entropy"]
EP_COLUMNS = ["episode", "stage", "return", "tec", "msj"]


def wrap_unwrap(q: torch.Tensor, periodic) -> torch.Tensor:
    """Unwrap periodic coordinates along the time axis (-2)."""
    out = q.clone()
    for j, per in enumerate(periodic):
        if per:
            d = q[..., 1:, j] - q[..., :-1, j]
            d = torch.remainder(d + math.pi, 2 * math.pi) - math.pi
            out[..., 1:, j] = q[..., :1, j] + torch.cumsum(d, -1)
    return out


def obs_to_q(spec: envsim.EnvSpec, obs: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`envsim.observe` for the coordinate part."""
    cols, i = [], 0
    for per in spec.periodic:
        if per:
            cols.append(torch.atan2(obs[..., i + 1], obs[..., i]))
            i += 2
        else:
            cols.append(obs[..., i])
            i += 1
    return torch.stack(cols, -1)


class Agent:
    """Owns every learned component, the replay and all RNG streams of one run."""

    def __init__(self, cfg: ExperimentConfig, seed: int | None = None):
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else seed
        self.spec = envsim.make_env(cfg.env, **cfg.env_overrides)
        spec, m = self.spec, cfg.model
        total_wm_steps = (cfg.stages.stage1_episodes) * cfg.stages.updates_per_episode
        self.rssm_cfg = RSSMConfig(
            obs_dim=spec.obs_dim, act_dim=spec.d_a, deter=m.deter, stoch=m.stoch, hidden=m.hidden,
            embed=m.embed, phase_dim=m.phase_dim, split_index=m.split_index, ph_hidden=tuple(m.ph_hidden),
            ph_mode=m.ph_mode, ph_enabled=m.ph_enabled, ph_horizon=m.ph_horizon, dt=spec.dt, lr=m.lr,
            ph_lr=m.ph_lr, beta=m.beta, kl_balance=m.kl_balance, free_bits=m.free_bits,
            lambda_max=m.lambda_max, warmup_frac=m.warmup_frac, ramp_frac=m.ramp_frac,
            total_steps=max(1, total_wm_steps),
        )
        self.wm = WorldModel(self.rssm_cfg, self.seed)
        a = cfg.ac
        self.ac_cfg = ACConfig(
            horizon=a.horizon, discount_horizon=a.discount_horizon, return_lambda=a.return_lambda,
            entropy_scale=a.entropy_scale, alpha_p=a.alpha_p, alpha_v=a.alpha_v, actor_lr=a.actor_lr,
            critic_lr=a.critic_lr, slow_decay=a.slow_decay, quantile_decay=a.quantile_decay,
            hidden=tuple(a.hidden), constraints=False, constraint_source=a.constraint_source,
            constraint_batch=a.constraint_batch, lambda_e_init=a.lambda_e_init, lambda_s_init=a.lambda_s_init,
            eps_e=a.eps_e, eps_s=a.eps_s, eta_lambda=a.eta_lambda, eps_percentile=a.eps_percentile,
        )
        self.ac = ActorCritic(self.wm.rssm.feat_dim, spec.d_a, self.ac_cfg, self.seed)
        e = cfg.energy
        self.energy = EnergyModel(spec.d_q, spec.d_a, k=e.k, periodic=spec.periodic, hidden=tuple(e.hidden),
                                  generator=make_generator(self.seed, "energy/init"))
        self.replay = ReplayBuffer(m.replay_capacity)
        self.trajectories: list[envsim.Trajectory] = []
        self.rng = {
            name: np.random.default_rng(derive_seed(self.seed, f"np/{name}"))
            for name in ("env", "explore", "replay", "constraint")
        }
        self.act_gen = make_generator(self.seed, "agent/act")
        self.filter_gen = make_generator(self.seed, "agent/filter")
        self.pool_gen = make_generator(self.seed, "agent/pool")
        self.rows = {"wm": [], "ac": [], "episodes": [], "energy": []}
        self.progress = {"stage": 1, "episodes_done": 0, "stage2_episodes_done": 0, "prefilled": False,
                         "energy_trained": False, "calibrated": False}
        self.constraint_pool: list[tuple[torch.Tensor, torch.Tensor]] = []

    # ----------------------------------------------------------- acting
    def episode_to_replay(self, tr: envsim.Trajectory) -> dict:
        obs = np.stack([envsim.observe(self.spec, q, qd) for q, qd in zip(tr.q, tr.qdot)])
        prev = np.zeros_like(tr.a)
        prev[1:] = tr.a[:-1]
        return {"obs": obs, "prev_action": prev, "reward": tr.r, "q": tr.q}

    def make_policy(self, mode: str, deterministic: bool = False):
        spec = self.spec
        if mode == "random":
            return envsim.random_policy(spec, self.rng["explore"], self.cfg.data.smoothing)
        if mode == "zero":
            return lambda obs, state: np.zeros(spec.d_a)
        rssm = self.wm.rssm
        h, z = rssm.initial(1)
        prev_a = torch.zeros(1, spec.d_a, dtype=DTYPE)
        trace = []

        def act(obs, state):
            nonlocal h, z, prev_a
            with torch.no_grad():
                o = torch.as_tensor(obs, dtype=DTYPE).unsqueeze(0)
                h = rssm.recurrent_step(h, z, prev_a)
                post = rssm.posterior(h, o)
                z = post.mean if deterministic else post.sample(self.filter_gen)
                feat = rssm.features(h, z)
                a = self.ac.act(feat, deterministic, self.act_gen)
                trace.append(h.squeeze(0).clone())
                prev_a = a
            return a.squeeze(0).numpy()

        act.latents = trace
        return act

    def collect(self, mode: str = "policy", deterministic: bool = False, rng=None, store: bool = True):
        policy = self.make_policy(mode, deterministic)
        tr = envsim.run_episode(self.spec, policy, rng or self.rng["env"], self.cfg.data.steps)
        if store:
            self.trajectories.append(tr)
            self.replay.add(self.episode_to_replay(tr))
        return tr, policy

    # --------------------------------------------------------- training
    def _wm_batch(self):
        m = self.cfg.model
        return self.replay.sample(self.rng["replay"], m.batch, m.seq_len)

    def train_step_stage1(self) -> dict:
        b = self._wm_batch()
        loss = self.wm.update(b["obs"], b["prev_action"], b["reward"])
        self.rows["wm"].append([self.wm.step] + [getattr(loss, c) for c in WM_COLUMNS[1:]])
        with torch.no_grad():
            out = self.wm.rssm.observe(b["obs"], b["prev_action"])
        stats = self.ac.update(self.wm.rssm, out["h"].reshape(-1, out["h"].shape[-1]),
                               out["z"].reshape(-1, out["z"].shape[-1]))
        self.rows["ac"].append([self.ac.steps, 1] + [stats[c] for c in AC_COLUMNS[2:]])
        return stats

    def log_episode(self, tr: envsim.Trajectory, stage: int):
        ev = self.cfg.eval
        self.rows["episodes"].append([len(self.rows["episodes"]), stage, tr.episode_return,
                                      envsim.tec_metric(tr, ev.alpha, ev.beta), envsim.msj_metric(tr)])

    def prefill(self):
        if self.progress["prefilled"]:
            return
        for _ in range(self.cfg.stages.prefill_episodes):
            tr, _ = self.collect("random")
            self.log_episode(tr, 0)
        mean, std = self.replay.obs_stats()
        self.wm.rssm.set_obs_stats(mean, std)
        self.progress["prefilled"] = True

    def run_stage1(self, checkpoint_fn=None):
        st = self.cfg.stages
        self.prefill()
        while self.progress["episodes_done"] < st.stage1_episodes:
            tr, _ = self.collect("policy")
            self.log_episode(tr, 1)
            for _ in range(st.updates_per_episode):
                self.train_step_stage1()
            self.progress["episodes_done"] += 1
            if checkpoint_fn and self.progress["episodes_done"] % st.checkpoint_every == 0:
                checkpoint_fn(self)
        if not self.progress["energy_trained"]:
            self.train_energy()
            self.progress["energy_trained"] = True
        self.progress["stage"] = 2

    def energy_dataset(self, trajs=None) -> EnergyDataset:
        spec = self.spec
        fn = (lambda q, qd: envsim.momentum(spec, q, qd)) if self.cfg.energy.use_oracle_momentum else None
        return EnergyDataset.from_trajectories(trajs or self.trajectories, self.cfg.energy.k, fn)

    def train_energy(self, trajs=None):
        e = self.cfg.energy
        data = self.energy_dataset(trajs)
        tc = EnergyTrainConfig(epochs=e.epochs, batch_size=e.batch_size, lr=e.lr, w_energy=e.w_energy,
                               w_next=e.w_next, w_momentum=e.w_momentum if e.use_oracle_momentum else 0.0,
                               seed=derive_seed(self.seed, "energy/train"))
        trace = train_energy_model(self.energy, data, tc)
        for row in trace:
            self.rows["energy"].append([row["epoch"], row["energy"], row["next"], row["momentum"], row["total"]])
        return trace

    # ------------------------------------------------------- stage two
    def freeze_models(self):
        self.wm.freeze()
        for p in self.energy.parameters():
            p.requires_grad_(False)

    def _pool_from_trajectory(self, tr: envsim.Trajectory):
        """Posterior features + coordinate windows for every step of a real episode."""
        ep = self.episode_to_replay(tr)
        k = self.energy.k
        with torch.no_grad():
            obs = torch.as_tensor(ep["obs"], dtype=DTYPE).unsqueeze(0)
            prev = torch.as_tensor(ep["prev_action"], dtype=DTYPE).unsqueeze(0)
            out = self.wm.rssm.observe(obs, prev, generator=self.pool_gen)
            feats = self.wm.rssm.features(out["h"], out["z"])[0]
        q = torch.as_tensor(tr.q, dtype=DTYPE)
        windows = torch.stack([q[t - k : t + 1] for t in range(k, len(tr))])
        return windows, feats[k:]

    def add_to_pool(self, tr):
        self.constraint_pool.append(self._pool_from_trajectory(tr))
        self.constraint_pool = self.constraint_pool[-self.cfg.ac.constraint_recent_episodes :]

    def replay_constraint_batch(self):
        wins = torch.cat([w for w, _ in self.constraint_pool])
        feats = torch.cat([f for _, f in self.constraint_pool])
        idx = self.rng["constraint"].choice(len(wins), size=min(self.cfg.ac.constraint_batch, len(wins)),
                                             replace=False)
        idx = torch.as_tensor(idx)
        return wins[idx], feats[idx]

    def imagined_constraint_batch(self, start_h, start_z):
        """Coordinate windows decoded from an imagined rollout (no real q needed)."""
        rssm, k = self.wm.rssm, self.energy.k
        with torch.no_grad():
            h, z = start_h, start_z
            feats = []
            for _ in range(k + 1):
                feat = rssm.features(h, z)
                feats.append(feat)
                a = self.ac.act(feat, False, self.ac.constraint_gen)
                h, z = rssm.img_step(h, z, a, self.ac.constraint_gen)
            feats = torch.stack(feats, 1)
            q = wrap_unwrap(obs_to_q(self.spec, rssm.decode(feats)), self.spec.periodic)
        n = min(self.cfg.ac.constraint_batch, q.shape[0])
        return q[:n], feats[:n, -1]

    def start_stage2(self):
        self.freeze_models()
        self.ac.cfg.constraints = bool(self.cfg.stages.constrained)
        if self.progress["calibrated"]:
            return
        for tr in self.trajectories[-self.cfg.ac.constraint_recent_episodes :]:
            self.add_to_pool(tr)
        if self.ac.cfg.constraints:
            batches = [self.replay_constraint_batch() for _ in range(self.cfg.ac.calibration_batches)]
            eps_e, eps_s = self.ac.calibrate_thresholds(self.energy, batches, self.spec.dt)
            log.info("calibrated thresholds eps_e=%.3g eps_s=%.3g", eps_e, eps_s)
        self.progress["calibrated"] = True

    def train_step_stage2(self) -> dict:
        b = self._wm_batch()
        with torch.no_grad():
            out = self.wm.rssm.observe(b["obs"], b["prev_action"])
        h = out["h"].reshape(-1, out["h"].shape[-1])
        z = out["z"].reshape(-1, out["z"].shape[-1])
        batch = None
        if self.ac.cfg.constraints:
            if self.cfg.ac.constraint_source == "imagined":
                batch = self.imagined_constraint_batch(h, z)
            else:
                batch = self.replay_constraint_batch()
        stats = self.ac.update(self.wm.rssm, h, z, batch, self.energy, self.spec.dt)
        self.rows["ac"].append([self.ac.steps, 2] + [stats[c] for c in AC_COLUMNS[2:]])
        return stats

    def run_stage2(self, checkpoint_fn=None):
        st = self.cfg.stages
        self.start_stage2()
        while self.progress["stage2_episodes_done"] < st.stage2_episodes:
            tr, _ = self.collect("policy")
            self.log_episode(tr, 2)
            self.add_to_pool(tr)
            for _ in range(st.updates_per_episode):
                self.train_step_stage2()
            self.progress["stage2_episodes_done"] += 1
            if checkpoint_fn and self.progress["stage2_episodes_done"] % st.checkpoint_every == 0:
                checkpoint_fn(self)
        self.progress["stage"] = 3

    # ------------------------------------------------------- evaluation
    def evaluate(self, episodes: int | None = None, seed: int = 12345) -> dict:
        ev = self.cfg.eval
        n = ev.episodes if episodes is None else episodes
        rng = np.random.default_rng(derive_seed(seed, f"eval/{self.cfg.env}"))
        returns, tecs, msjs, latents, trajs = [], [], [], [], []
        for _ in range(n):
            tr, policy = self.collect("policy", deterministic=ev.deterministic, rng=rng, store=False)
            returns.append(tr.episode_return)
            tecs.append(envsim.tec_metric(tr, ev.alpha, ev.beta))
            msjs.append(envsim.msj_metric(tr))
            latents.append(torch.stack(policy.latents))
            trajs.append(tr)
        report = {
            "env": self.cfg.env,
            "seed": self.seed,
            "episodes": n,
            "return_mean": float(np.mean(returns)),
            "return_std": float(np.std(returns)),
            "tec": float(np.mean(tecs)),
            "msj": float(np.mean(msjs)),
            "alpha": ev.alpha,
            "beta": ev.beta,
        }
        if self.wm.shadow is not None:
            with torch.no_grad():
                x = self.wm.shadow.phase(torch.cat(latents))
            report["log_phase_volume"] = log_phase_volume(x, ev.n_components)
            report["n_components"] = ev.n_components or x.shape[-1]
        if self.progress["energy_trained"]:
            data = self.energy_dataset(trajs)
            align = evaluate_energy_alignment(self.energy, data)
            report["energy_corr"] = align["corr_t"]
            report["energy_corr_next"] = align["corr_next"]
            first = data.episode == 0  # per-step trace of the first evaluation episode
            k = self.energy.k
            report["_energy_trace"] = {
                "t": ((np.arange(int(first.sum())) + k) * self.spec.dt).tolist(),
                "H_t": align["H_t"][first].tolist(),
                "H_next": align["H_next"][first].tolist(),
                "E_true": data.E_t.numpy()[first].tolist(),
            }
        return report

    # ------------------------------------------------------ persistence
    def state_dict(self) -> dict:
        return {
            "wm": self.wm.state_dict(),
            "ac": self.ac.state_dict(),
            "ac_constraints": self.ac.cfg.constraints,
            "energy": self.energy.state_dict(),
            "replay": self.replay.state_dict(),
            "trajectories": [tr.records() for tr in self.trajectories],
            "rng": {k: r.bit_generator.state for k, r in self.rng.items()},
            "act_gen": self.act_gen.get_state(),
            "filter_gen": self.filter_gen.get_state(),
            "pool_gen": self.pool_gen.get_state(),
            "rows": self.rows,
            "progress": self.progress,
            "pool": [list(p) for p in self.constraint_pool],
        }

    def load_state_dict(self, d: dict):
        self.wm.load_state_dict(d["wm"])
        self.ac.load_state_dict(d["ac"])
        self.ac.cfg.constraints = d["ac_constraints"]
        self.energy.load_state_dict(d["energy"])
        self.replay.load_state_dict(d["replay"])
        self.trajectories = [
            envsim.Trajectory.from_records(rows, self.spec.dt, self.spec.actuator_map) for rows in d["trajectories"]
        ]
        for k, st in d["rng"].items():
            self.rng[k].bit_generator.state = st
        self.act_gen.set_state(d["act_gen"])
        self.filter_gen.set_state(d["filter_gen"])
        self.pool_gen.set_state(d["pool_gen"])
        self.rows = {k: [list(r) for r in v] for k, v in d["rows"].items()}
        self.progress = dict(d["progress"])
        self.constraint_pool = [tuple(p) for p in d["pool"]]
        if self.progress["calibrated"]:
            self.freeze_models()

    def save(self, path, config_hash: str):
        return save_checkpoint(path, self.state_dict(), {"config_hash": config_hash, "seed": self.seed,
                                                          "env": self.cfg.env})

    def load(self, path, config_hash: str | None = None):
        payload, meta = load_checkpoint(path)
        if meta.get("env") != self.cfg.env:
            raise VersionError(f"checkpoint is for env {meta.get('env')!r}, config says {self.cfg.env!r}")
        if config_hash is not None and meta.get("config_hash") not in (None, config_hash):
            log.warning("checkpoint config hash %s differs from %s", meta.get("config_hash"), config_hash)
        self.load_state_dict(payload)
        return meta
