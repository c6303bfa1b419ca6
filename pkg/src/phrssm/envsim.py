"""Analytic physics testbeds with closed-form energies, plus TEC / MSJ metrics.

Three environments are provided: ``pendulum`` (swing-up, angle measured from
the hanging position), ``mass_spring`` (damped oscillator that must track a
set point) and ``cartpole`` (balance, pole angle measured from upright).
All integrate the equations of motion with semi-implicit Euler substeps.

Trajectory rows follow the dataset convention: row ``t`` holds the state
*before* action ``a_t``, the actuator force applied over ``[t, t+1)``, the
acceleration the equations of motion give for that state and force, the
reward of the state and its mechanical energy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, InsufficientDataError, NumericalError


@dataclass(frozen=True)
class EnvSpec:
    name: str
    d_q: int
    d_a: int
    dt: float
    params: dict
    action_limit: float = 1.0
    gear: tuple = (1.0,)
    actuator_map: tuple = (0,)
    periodic: tuple = (False,)
    substeps: int = 100
    episode_steps: int = 200

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.substeps < 10:
            raise ValueError("need at least 10 substeps per control step")
        if len(self.actuator_map) != self.d_a or any(not 0 <= j < self.d_q for j in self.actuator_map):
            raise ValueError("actuator_map must send each actuator to one DoF")

    @property
    def obs_dim(self) -> int:
        return sum(2 if p else 1 for p in self.periodic) + self.d_q

    def with_params(self, **kw) -> "EnvSpec":
        return replace(self, params={**self.params, **kw})


@dataclass
class SimState:
    q: np.ndarray
    qdot: np.ndarray
    qacc: np.ndarray
    tau: np.ndarray
    t: float = 0.0

    def copy(self) -> "SimState":
        return SimState(self.q.copy(), self.qdot.copy(), self.qacc.copy(), self.tau.copy(), self.t)


# ----------------------------------------------------------------- physics


class _Physics:
    def mass_matrix(self, p, q):
        raise NotImplementedError

    def forces(self, p, q, qd, tau_dof):
        """Generalized forces minus velocity-product terms (right-hand side)."""
        raise NotImplementedError

    def accel(self, p, q, qd, tau_dof):
        return np.linalg.solve(self.mass_matrix(p, q), self.forces(p, q, qd, tau_dof))

    def potential(self, p, q):
        raise NotImplementedError

    def energy(self, p, q, qd):
        M = self.mass_matrix(p, q)
        return 0.5 * float(qd @ M @ qd) + self.potential(p, q)

    def momentum(self, p, q, qd):
        return self.mass_matrix(p, q) @ qd

    def reward(self, p, q, qd):
        raise NotImplementedError

    def initial(self, p, rng):
        raise NotImplementedError

    def integrate(self, p, q, qd, tau_dof, h, n):
        q, qd = q.copy(), qd.copy()
        for _ in range(n):
            qd = qd + h * self.accel(p, q, qd, tau_dof)
            q = q + h * qd
        return q, qd


class _Pendulum(_Physics):
    def mass_matrix(self, p, q):
        return np.array([[p["m"] * p["l"] ** 2]])

    def forces(self, p, q, qd, tau):
        return np.array([tau[0] - p["m"] * p["g"] * p["l"] * math.sin(q[0]) - p["b"] * qd[0]])

    def potential(self, p, q):
        return p["m"] * p["g"] * p["l"] * (1.0 - math.cos(q[0]))

    def reward(self, p, q, qd):
        return 0.5 * (1.0 - math.cos(q[0]))

    def initial(self, p, rng):
        return np.array([rng.uniform(-math.pi, math.pi)]), np.array([rng.normal(0.0, 0.5)])

    def integrate(self, p, q, qd, tau, h, n):
        th, w = float(q[0]), float(qd[0])
        inv = 1.0 / (p["m"] * p["l"] ** 2)
        mgl, b, u = p["m"] * p["g"] * p["l"], p["b"], float(tau[0])
        sin = math.sin
        for _ in range(n):
            w += h * inv * (u - mgl * sin(th) - b * w)
            th += h * w
        return np.array([th]), np.array([w])


class _MassSpring(_Physics):
    def mass_matrix(self, p, q):
        return np.array([[p["m"]]])

    def forces(self, p, q, qd, tau):
        return np.array([tau[0] - p["k"] * q[0] - p["c"] * qd[0]])

    def potential(self, p, q):
        return 0.5 * p["k"] * q[0] ** 2

    def reward(self, p, q, qd):
        return math.exp(-(((q[0] - p["target"]) / p["width"]) ** 2))

    def initial(self, p, rng):
        return np.array([rng.uniform(-1.0, 1.0)]), np.array([rng.normal(0.0, 0.5)])

    def integrate(self, p, q, qd, tau, h, n):
        x, v = float(q[0]), float(qd[0])
        m, k, c, u = p["m"], p["k"], p["c"], float(tau[0])
        for _ in range(n):
            v += h * (u - k * x - c * v) / m
            x += h * v
        return np.array([x]), np.array([v])


class _CartPole(_Physics):
    """Cart of mass M with a point-mass pole (m, l); theta = 0 is upright."""

    def mass_matrix(self, p, q):
        ml = p["m"] * p["l"]
        c = math.cos(q[1])
        return np.array([[p["M"] + p["m"], ml * c], [ml * c, ml * p["l"]]])

    def forces(self, p, q, qd, tau):
        ml = p["m"] * p["l"]
        s = math.sin(q[1])
        return np.array(
            [
                tau[0] + ml * qd[1] ** 2 * s - p["b_x"] * qd[0],
                ml * p["g"] * s - p["b_th"] * qd[1],
            ]
        )

    def potential(self, p, q):
        return p["m"] * p["g"] * p["l"] * math.cos(q[1])

    def reward(self, p, q, qd):
        upright = 0.5 * (1.0 + math.cos(q[1]))
        centered = 0.5 * (1.0 + math.exp(-(q[0] ** 2)))
        return upright * centered

    def initial(self, p, rng):
        q = np.array([rng.uniform(-0.1, 0.1), rng.uniform(-0.2, 0.2)])
        return q, rng.normal(0.0, 0.05, size=2)

    def _accel_scalar(self, p, x, th, v, w, u):
        M, m, l, g = p["M"], p["m"], p["l"], p["g"]
        c, s = math.cos(th), math.sin(th)
        ml = m * l
        a11, a12, a22 = M + m, ml * c, ml * l
        f1 = u + ml * w * w * s - p["b_x"] * v
        f2 = ml * g * s - p["b_th"] * w
        det = a11 * a22 - a12 * a12
        return (a22 * f1 - a12 * f2) / det, (a11 * f2 - a12 * f1) / det

    def accel(self, p, q, qd, tau):
        return np.array(self._accel_scalar(p, q[0], q[1], qd[0], qd[1], tau[0]))

    def integrate(self, p, q, qd, tau, h, n):
        x, th = float(q[0]), float(q[1])
        v, w = float(qd[0]), float(qd[1])
        u = float(tau[0])
        acc = self._accel_scalar
        for _ in range(n):
            ax, aw = acc(p, x, th, v, w, u)
            v += h * ax
            w += h * aw
            x += h * v
            th += h * w
        return np.array([x, th]), np.array([v, w])


_PHYSICS: dict[str, _Physics] = {
    "pendulum": _Pendulum(),
    "mass_spring": _MassSpring(),
    "cartpole": _CartPole(),
}

ENV_NAMES = tuple(_PHYSICS)


def make_env(name: str, **overrides) -> EnvSpec:
    """Default spec for a named environment; keyword overrides replace fields
    or, for unknown field names, physical constants."""
    if name == "pendulum":
        spec = EnvSpec(
            "pendulum", 1, 1, 0.05, {"m": 1.0, "l": 1.0, "g": 9.81, "b": 0.05},
            gear=(4.0,), periodic=(True,),
        )
    elif name == "mass_spring":
        spec = EnvSpec(
            "mass_spring", 1, 1, 0.05,
            {"m": 1.0, "k": 4.0, "c": 0.2, "target": 0.5, "width": 0.25},
            gear=(4.0,), periodic=(False,),
        )
    elif name == "cartpole":
        spec = EnvSpec(
            "cartpole", 2, 1, 0.05,
            {"M": 1.0, "m": 0.1, "l": 0.5, "g": 9.81, "b_x": 0.05, "b_th": 0.005},
            gear=(10.0,), actuator_map=(0,), periodic=(False, True),
        )
    else:
        raise KeyError(f"unknown environment {name!r}; choose from {ENV_NAMES}")
    fields = {f for f in EnvSpec.__dataclass_fields__}
    direct = {k: v for k, v in overrides.items() if k in fields}
    physical = {k: v for k, v in overrides.items() if k not in fields}
    unknown = set(physical) - set(spec.params)
    if unknown:
        raise KeyError(f"unknown parameters for {name}: {sorted(unknown)}")
    return replace(spec, **direct).with_params(**physical)


def _physics(spec: EnvSpec) -> _Physics:
    return _PHYSICS[spec.name]


def actuator_to_dof(spec: EnvSpec, tau: np.ndarray) -> np.ndarray:
    out = np.zeros(spec.d_q)
    for i, j in enumerate(spec.actuator_map):
        out[j] += tau[i]
    return out


def actuator_force(spec: EnvSpec, a) -> np.ndarray:
    a = np.clip(np.asarray(a, dtype=np.float64).reshape(spec.d_a), -spec.action_limit, spec.action_limit)
    return a * np.asarray(spec.gear, dtype=np.float64)


def accel(spec: EnvSpec, q, qdot, tau) -> np.ndarray:
    return _physics(spec).accel(spec.params, np.asarray(q, float), np.asarray(qdot, float), actuator_to_dof(spec, tau))


def make_state(spec: EnvSpec, q, qdot, tau=None, t: float = 0.0) -> SimState:
    q = np.asarray(q, dtype=np.float64).reshape(spec.d_q)
    qdot = np.asarray(qdot, dtype=np.float64).reshape(spec.d_q)
    tau = np.zeros(spec.d_a) if tau is None else np.asarray(tau, dtype=np.float64).reshape(spec.d_a)
    return SimState(q, qdot, accel(spec, q, qdot, tau), tau, t)


def reset(spec: EnvSpec, rng: np.random.Generator) -> SimState:
    q, qd = _physics(spec).initial(spec.params, rng)
    return make_state(spec, q, qd)


def env_step(spec: EnvSpec, state: SimState, a) -> tuple[SimState, float, float]:
    """Advance one control interval with zero-order-hold actuation.

    Returns the new state, the reward of the new state and a continue flag
    (always 1: these tasks have no terminal states).
    """
    tau = actuator_force(spec, a)
    phys = _physics(spec)
    h = spec.dt / spec.substeps
    q, qd = phys.integrate(spec.params, state.q, state.qdot, actuator_to_dof(spec, tau), h, spec.substeps)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
        raise NumericalError(f"{spec.name}: non-finite state", {"q": q, "qdot": qd, "t": state.t})
    new = SimState(q, qd, accel(spec, q, qd, tau), tau, state.t + spec.dt)
    return new, reward(spec, new), 1.0


def reward(spec: EnvSpec, state: SimState) -> float:
    return float(_physics(spec).reward(spec.params, state.q, state.qdot))


def ground_truth_energy(spec: EnvSpec, state: SimState) -> float:
    return float(_physics(spec).energy(spec.params, state.q, state.qdot))


def momentum(spec: EnvSpec, q, qdot) -> np.ndarray:
    return _physics(spec).momentum(spec.params, np.asarray(q, float), np.asarray(qdot, float))


def mass_matrix(spec: EnvSpec, q) -> np.ndarray:
    return _physics(spec).mass_matrix(spec.params, np.asarray(q, float))


def observe(spec: EnvSpec, q, qdot) -> np.ndarray:
    """Proprioceptive observation: periodic angles enter as (cos, sin)."""
    parts = []
    for j, periodic in enumerate(spec.periodic):
        if periodic:
            parts.extend([math.cos(q[j]), math.sin(q[j])])
        else:
            parts.append(q[j])
    return np.asarray([*parts, *qdot], dtype=np.float64)


# -------------------------------------------------------------- trajectories


@dataclass
class Trajectory:
    """Per-step arrays of one episode (row t = state before action t)."""

    q: np.ndarray
    qdot: np.ndarray
    qacc: np.ndarray
    tau: np.ndarray
    a: np.ndarray
    r: np.ndarray
    E_true: np.ndarray
    dt: float
    actuator_map: tuple = (0,)

    def __len__(self):
        return len(self.r)

    @property
    def t(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.r))

    def records(self) -> list[dict]:
        n = len(self)
        return [
            {
                "t": float(i * self.dt),
                "q": self.q[i].tolist(),
                "qdot": self.qdot[i].tolist(),
                "qacc": self.qacc[i].tolist(),
                "tau": self.tau[i].tolist(),
                "a": self.a[i].tolist(),
                "r": float(self.r[i]),
                "done": i == n - 1,
                "E_true": float(self.E_true[i]),
            }
            for i in range(n)
        ]

    @classmethod
    def from_records(cls, rows: Sequence[dict], dt: float | None = None, actuator_map=(0,)) -> "Trajectory":
        if not rows:
            raise InsufficientDataError("empty trajectory")
        if dt is None:
            dt = rows[1]["t"] - rows[0]["t"] if len(rows) > 1 else 1.0
        get = lambda k: np.asarray([row[k] for row in rows], dtype=np.float64)
        return cls(get("q"), get("qdot"), get("qacc"), get("tau"), get("a"), get("r"), get("E_true"),
                   float(dt), tuple(actuator_map))

    def concat(self, other: "Trajectory") -> "Trajectory":
        cat = lambda a, b: np.concatenate([a, b])
        return Trajectory(cat(self.q, other.q), cat(self.qdot, other.qdot), cat(self.qacc, other.qacc),
                          cat(self.tau, other.tau), cat(self.a, other.a), cat(self.r, other.r),
                          cat(self.E_true, other.E_true), self.dt, self.actuator_map)

    def reversed(self) -> "Trajectory":
        rev = lambda a: a[::-1].copy()
        return Trajectory(rev(self.q), rev(self.qdot), rev(self.qacc), rev(self.tau), rev(self.a),
                          rev(self.r), rev(self.E_true), self.dt, self.actuator_map)


def run_episode(
    spec: EnvSpec,
    policy: Callable[[np.ndarray, SimState], np.ndarray],
    rng: np.random.Generator,
    steps: int | None = None,
    state: SimState | None = None,
) -> Trajectory:
    """Roll ``policy(obs, state) -> action`` for ``steps`` control intervals."""
    steps = spec.episode_steps if steps is None else steps
    state = reset(spec, rng) if state is None else state
    cols = {k: [] for k in ("q", "qdot", "qacc", "tau", "a", "r", "E")}
    for _ in range(steps):
        a = np.clip(np.asarray(policy(observe(spec, state.q, state.qdot), state), float).reshape(spec.d_a),
                    -spec.action_limit, spec.action_limit)
        tau = actuator_force(spec, a)
        cols["q"].append(state.q)
        cols["qdot"].append(state.qdot)
        cols["qacc"].append(accel(spec, state.q, state.qdot, tau))
        cols["tau"].append(tau)
        cols["a"].append(a)
        cols["r"].append(reward(spec, state))
        cols["E"].append(ground_truth_energy(spec, state))
        state, _, _ = env_step(spec, state, a)
    arr = {k: np.asarray(v, dtype=np.float64) for k, v in cols.items()}
    return Trajectory(arr["q"], arr["qdot"], arr["qacc"], arr["tau"], arr["a"], arr["r"], arr["E"],
                      spec.dt, spec.actuator_map)


def random_policy(spec: EnvSpec, rng: np.random.Generator, smoothing: float = 0.8):
    """Temporally correlated uniform noise; a stateful closure."""
    prev = np.zeros(spec.d_a)

    def act(obs, state):
        nonlocal prev
        prev = smoothing * prev + (1 - smoothing) * rng.uniform(-1, 1, spec.d_a) * 3.0
        return np.clip(prev, -spec.action_limit, spec.action_limit)

    return act


# ------------------------------------------------------------------ metrics


def tec_metric(traj: Trajectory, alpha: float = 1.0, beta: float = 0.01) -> float:
    """Absolute mechanical work plus weighted squared-torque effort."""
    if len(traj) == 0:
        raise InsufficientDataError("empty trajectory")
    tau = np.asarray(traj.tau, dtype=np.float64).reshape(len(traj), -1)
    qdot = np.asarray(traj.qdot, dtype=np.float64).reshape(len(traj), -1)
    amap = list(traj.actuator_map)
    if tau.shape[1] != len(amap):
        raise DimensionError("tau columns must match the actuator map")
    work = np.abs(tau * qdot[:, amap]).sum() * traj.dt
    effort = (tau**2).sum() * traj.dt
    return float(alpha * work + beta * effort)


def jerk_sum(traj: Trajectory) -> float:
    """Sum of squared finite-difference jerks over all adjacent pairs and DoFs."""
    qacc = np.asarray(traj.qacc, dtype=np.float64).reshape(len(traj), -1)
    if qacc.shape[0] < 2:
        raise InsufficientDataError("jerk needs at least two steps")
    return float((((qacc[1:] - qacc[:-1]) / traj.dt) ** 2).sum())


def msj_metric(traj: Trajectory) -> float:
    qacc = np.asarray(traj.qacc, dtype=np.float64).reshape(len(traj), -1)
    if qacc.shape[0] < 2:
        raise InsufficientDataError("jerk needs at least two steps")
    return jerk_sum(traj) / ((qacc.shape[0] - 1) * qacc.shape[1])


def relative_change(baseline: float, value: float) -> float:
    """Percent change of ``value`` against ``baseline`` (negative = reduction)."""
    if baseline == 0:
        raise ZeroDivisionError("baseline is zero")
    return (value - baseline) / abs(baseline) * 100.0


def aggregate_across_tasks(baseline: dict, ours: dict) -> float:
    """Average of per-task relative changes (never a ratio of averages)."""
    tasks = sorted(baseline)
    if set(tasks) != set(ours):
        raise KeyError("task sets differ")
    return float(np.mean([relative_change(baseline[k], ours[k]) for k in tasks]))
