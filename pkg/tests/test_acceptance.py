"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Criteria 6-8 share cached training runs (session fixtures); the whole file
takes roughly half an hour on one CPU core.
"""

import json
import math
import time

import numpy as np
import pytest
import torch

from phrssm import envsim
from phrssm.config import from_dict
from phrssm.constrained_ac import (
    ACConfig, ActorCritic, DualState, dual_update, energy_constraint, lambda_returns, smoothness_constraint,
)
from phrssm.diffnet import DTYPE, ScalarField, derive_seed, grad_scalar, make_generator
from phrssm.energymodel import EnergyDataset, EnergyModel, EnergyTrainConfig, evaluate_energy_alignment, \
    train_energy_model
from phrssm.latentproj import volume_reduction
from phrssm.phcore import PHStructure, ph_rk4_step, rk4_step
from phrssm.pipeline import Agent
from phrssm.rssm import RSSM, RSSMConfig

ENVS = ("pendulum", "cartpole", "mass_spring")
SEEDS = (0, 1, 2)
STAGES = {"prefill_episodes": 5, "stage1_episodes": 20, "stage2_episodes": 10, "updates_per_episode": 50,
          "checkpoint_every": 1000}
# at the default 60th-percentile thresholds and eta_lambda = 1e-2 the multipliers stay at zero
# for a 10-episode fine-tune; a tighter percentile and faster dual step make the constraints bind
ACCEPT_EPS_PERCENTILE = 40.0
ACCEPT_ETA = 1.0


def rel(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(np.asarray(b)), 1e-300))


def randomize(module, gen, scale):
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * scale)


# ------------------------------------------------------------------ 1


def test_c01_structural_invariants(record_criterion):
    t0 = time.time()
    g = make_generator(0, "acc1")
    worst = {"skew": 0.0, "R": math.inf, "Minv": math.inf, "P_diss": math.inf}
    ph_const = PHStructure(6, 2, hidden=(16,), generator=g)
    ph_state = PHStructure(6, 2, hidden=(16,), mode="state", generator=g)
    em = EnergyModel(3, 2, k=4, hidden=(16, 16), generator=g)
    for i in range(1000):
        scale = float(10 ** torch.empty(1).uniform_(-1, 1, generator=g))
        ph = ph_state if i % 2 else ph_const
        randomize(ph, g, scale)
        x = torch.randn(8, 6, generator=g, dtype=DTYPE) * 3
        J, R, _ = (m.detach() for m in ph.matrices(x))
        worst["skew"] = max(worst["skew"], float((J + J.transpose(-1, -2)).abs().max()))
        worst["R"] = min(worst["R"], float(torch.linalg.eigvalsh(R).min()))
        randomize(em, g, scale)
        q, p, a = (torch.randn(8, d, generator=g, dtype=DTYPE) * 3 for d in (3, 3, 2))
        with torch.no_grad():
            # eig(L L^T) = sigma(L)^2, which avoids round-off from forming the product
            sig = torch.linalg.svdvals(em.cholesky_factor(q))
            worst["Minv"] = min(worst["Minv"], float((sig**2).min()))
            assert torch.equal(em.inverse_mass(q), em.inverse_mass(q).transpose(-1, -2))
            worst["P_diss"] = min(worst["P_diss"], float(em.power_terms(q, p, a)[1].min()))
    elapsed = time.time() - t0
    ok = worst["skew"] == 0 and worst["R"] >= -1e-12 and worst["Minv"] > 0 and worst["P_diss"] >= 0 and elapsed < 60
    record_criterion(1, ok, f"max|J+J^T|={worst['skew']:.1e} min eig R={worst['R']:.2e} "
                            f"min eig Minv={worst['Minv']:.2e} min P_diss={worst['P_diss']:.2e} ({elapsed:.0f}s)")
    assert ok


# ------------------------------------------------------------------ 2


def test_c02_gradient_fidelity(record_criterion):
    t0 = time.time()
    errs = {"grad": [], "action": [], "smooth": []}
    h = 1e-5
    for i in range(100):
        g = make_generator(i, "acc2")
        f = ScalarField(4, widths=(16, 16), generator=g)
        x = torch.randn(4, generator=g, dtype=DTYPE)
        fd = torch.stack([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in torch.eye(4, dtype=DTYPE)]).detach()
        errs["grad"].append(rel(grad_scalar(f, x), fd))

        em = EnergyModel(2, 2, k=4, hidden=(16, 16), generator=g)
        for p in em.parameters():
            p.requires_grad_(False)
        w, a = torch.randn(8, 5, 2, generator=g, dtype=DTYPE), torch.randn(8, 2, generator=g, dtype=DTYPE) * 0.5
        ad = em.energy_action_gradient(w, a, 0.05)
        fd = torch.stack([(em.next_energy(w, a + h * e, 0.05) - em.next_energy(w, a - h * e, 0.05)) / (2 * h)
                          for e in torch.eye(2, dtype=DTYPE)], -1)
        errs["action"].append(rel(ad, fd.detach()))

        cs = float(smoothness_constraint(em, w, a, 0.05, create_graph=False))
        hs = 1e-4
        gd = (em.energy_action_gradient(w, a + hs * a, 0.05) - em.energy_action_gradient(w, a - hs * a, 0.05)) / (2 * hs)
        cs_fd = float((gd * a).sum(-1).mean())
        errs["smooth"].append(abs(cs - cs_fd) / abs(cs_fd))
    elapsed = time.time() - t0
    m = {k: max(v) for k, v in errs.items()}
    ok = m["grad"] < 1e-5 and m["action"] < 1e-5 and m["smooth"] < 1e-3 and elapsed < 120
    record_criterion(2, ok, f"max rel err grad={m['grad']:.1e} dH/da={m['action']:.1e} "
                            f"C_smooth={m['smooth']:.1e} ({elapsed:.0f}s)")
    assert ok


# ------------------------------------------------------------------ 3


def test_c03_integrator_order(record_criterion):
    t0 = time.time()
    dts = [0.1, 0.05, 0.025, 0.0125]
    rot = lambda x, a: torch.stack([x[1], -x[0]])
    errs = []
    for dt in dts:
        x = torch.tensor([1.0, 0.0], dtype=DTYPE)
        for _ in range(int(round(2.0 / dt))):
            x = rk4_step(rot, x, None, dt)
        errs.append(float((x - torch.tensor([math.cos(2.0), -math.sin(2.0)], dtype=DTYPE)).norm()))
    order = np.polyfit(np.log(dts), np.log(errs), 1)[0]

    class Quartic(ScalarField):
        def forward(self, x):
            return 0.5 * x[..., 1] ** 2 + 0.25 * x[..., 0] ** 4 + 0.5 * x[..., 0] ** 2

    s = PHStructure(2, 1, hidden=(4,))
    s.H = Quartic(2)
    with torch.no_grad():
        s.A_raw.copy_(torch.tensor([[0.0, 0.5], [-0.5, 0.0]], dtype=DTYPE))
        s.B_raw.zero_()
        s.d_raw.fill_(-1e3)
        s.G.zero_()
    drifts = []
    for dt in dts:
        x = torch.tensor([[1.3, 0.4]], dtype=DTYPE)
        H0, worst = float(s.energy(x)), 0.0
        for _ in range(int(round(2.0 / dt))):
            x = ph_rk4_step(s, x, torch.zeros(1, 1, dtype=DTYPE), dt).detach()
            worst = max(worst, abs(float(s.energy(x).detach()) - H0))
        drifts.append(worst)
    drift_order = np.polyfit(np.log(dts), np.log(drifts), 1)[0]
    elapsed = time.time() - t0
    ok = order >= 3.8 and abs(drift_order - 4.0) <= 0.5 and elapsed < 60
    record_criterion(3, ok, f"RK4 order={order:.2f} conservative drift order={drift_order:.2f} ({elapsed:.0f}s)")
    assert ok


# ------------------------------------------------------------------ 4


def test_c04_power_balance(record_criterion):
    t0 = time.time()
    worst = 0.0
    for i in range(10):
        g = make_generator(i, "acc4")
        m = EnergyModel(2, 2, k=4, hidden=(16, 16), generator=g)
        q, p, a = (torch.randn(100, 2, generator=g, dtype=DTYPE) for _ in range(3))
        f = m.vector_field(torch.cat([q, p], -1), m.encode_action(a))
        lhs = (m.grad_q_hamiltonian(q, p) * f[:, :2]).sum(-1) + (m.velocity_autodiff(q, p) * f[:, 2:]).sum(-1)
        P_work, P_diss = m.power_terms(q, p, a)
        worst = max(worst, float((lhs - (P_work - P_diss)).abs().max().detach()))
    elapsed = time.time() - t0
    ok = worst <= 1e-9 and elapsed < 60
    record_criterion(4, ok, f"max |dH/dt - (P_work - P_diss)| = {worst:.1e} over 1000 states ({elapsed:.0f}s)")
    assert ok


# ------------------------------------------------------------------ 5


def test_c05_energy_model_fidelity(record_criterion):
    t0 = time.time()
    spec = envsim.make_env("pendulum")
    rng = np.random.default_rng(derive_seed(0, "acc5"))
    episodes = lambda n: [envsim.run_episode(spec, envsim.random_policy(spec, rng), rng) for _ in range(n)]
    oracle = lambda q, qd: envsim.momentum(spec, q, qd)
    train = EnergyDataset.from_trajectories(episodes(200), 4, oracle)
    test = EnergyDataset.from_trajectories(episodes(20), 4, oracle)
    m = EnergyModel(1, 1, k=4, periodic=spec.periodic, generator=make_generator(0, "acc5/init"))
    train_energy_model(m, train, EnergyTrainConfig(epochs=30, batch_size=256, lr=3e-3, seed=0))
    align = evaluate_energy_alignment(m, test)
    elapsed = time.time() - t0
    ok = align["corr_t"] > 0.9 and elapsed < 900
    record_criterion(5, ok, f"held-out Pearson(H_t, E) = {align['corr_t']:.4f}, "
                            f"next-step {align['corr_next']:.4f} ({elapsed:.0f}s)")
    assert ok


# ------------------------------------------------------- shared training runs


def accept_config(env, seed, lambda_max=1.0, constrained=True, eta=ACCEPT_ETA):
    return from_dict({"env": env, "seed": seed, "model": {"lambda_max": lambda_max},
                      "ac": {"eta_lambda": eta, "eps_percentile": ACCEPT_EPS_PERCENTILE}, "stages": dict(STAGES, constrained=constrained)})


@pytest.fixture(scope="session")
def stage1(tmp_path_factory):
    root = tmp_path_factory.mktemp("stage1")
    cache = {}

    def get(env, seed, lambda_max=1.0):
        key = (env, seed, lambda_max)
        if key not in cache:
            agent = Agent(accept_config(env, seed, lambda_max))
            agent.run_stage1()
            path = root / f"{env}_{seed}_{lambda_max}.ckpt.json"
            agent.save(path, agent.cfg.hash())
            cache[key] = (path, agent.evaluate(seed=derive_seed(seed, "eval")))
        return cache[key]

    return get


@pytest.fixture(scope="session")
def stage2(stage1):
    cache = {}

    def get(env, seed, constrained):
        key = (env, seed, constrained)
        if key not in cache:
            path, _ = stage1(env, seed)
            agent = Agent(accept_config(env, seed, constrained=constrained))
            agent.load(path)
            agent.run_stage2()
            cache[key] = (agent.evaluate(seed=derive_seed(seed, "eval")), agent.rows["ac"])
        return cache[key]

    return get


# ------------------------------------------------------------------ 6


def test_c06_phase_volume_direction(record_criterion, stage1):
    t0 = time.time()
    rows = []
    for seed in SEEDS:
        ph = stage1("pendulum", seed, 1.0)[1]["log_phase_volume"]
        base = stage1("pendulum", seed, 0.0)[1]["log_phase_volume"]
        rows.append((seed, ph, base, volume_reduction(base, ph)))
    wins = sum(ph < base for _, ph, base, _ in rows)
    p_sign = 0.5 ** wins if wins == len(rows) else float("nan")
    elapsed = time.time() - t0
    ok = wins == len(rows)
    detail = "; ".join(f"seed {s}: {ph:.2f} vs {b:.2f} ({r:+.1f}%)" for s, ph, b, r in rows)
    record_criterion(6, ok, f"sum log V, PH vs lambda_PH=0: {detail}; {wins}/{len(rows)} lower, "
                            f"one-sided sign-test p={p_sign:.3f} ({elapsed / 60:.0f} min)")
    assert ok


# ------------------------------------------------------------------ 7


def test_c07_constrained_control_direction(record_criterion, stage2):
    t0 = time.time()
    per_env, good = [], 0
    for env in ENVS:
        base, _ = stage2(env, 0, False)
        cons, _ = stage2(env, 0, True)
        d = {k: envsim.relative_change(base[k], cons[k]) for k in ("tec", "msj", "return_mean")}
        success = d["tec"] < 0 and d["msj"] < 0 and d["return_mean"] > -5.0
        good += success
        per_env.append(f"{env}: TEC {d['tec']:+.2f}% MSJ {d['msj']:+.2f}% return {d['return_mean']:+.2f}%")
    elapsed = time.time() - t0
    ok = good >= 2
    record_criterion(7, ok, "; ".join(per_env) + f"; {good}/3 envs meet all three ({elapsed / 60:.0f} min)")
    assert ok


# ------------------------------------------------------------------ 8


def test_c08_lagrangian_mechanics(record_criterion, stage2):
    t0 = time.time()
    # synthetic frozen batch: the learner keeps the batch, the energy model stays fixed
    rcfg = RSSMConfig(obs_dim=3, act_dim=1, deter=8, stoch=4, hidden=8, embed=8, phase_dim=2, ph_hidden=(4,))
    rssm = RSSM(rcfg, 0)
    energy = EnergyModel(1, 1, k=4, hidden=(16,), generator=make_generator(0, "acc8/e"))
    for p in list(rssm.parameters()) + list(energy.parameters()):
        p.requires_grad_(False)
    g = make_generator(0, "acc8/data")
    h, z = torch.randn(16, 8, generator=g, dtype=DTYPE), torch.randn(16, 4, generator=g, dtype=DTYPE)
    batch = (torch.randn(64, 5, 1, generator=g, dtype=DTYPE), torch.randn(64, rssm.feat_dim, generator=g, dtype=DTYPE))
    probe = ActorCritic(rssm.feat_dim, 1, ACConfig(horizon=5, hidden=(16,)), 0)
    # calibrate on sampled actions, as the update measures them; the dual step has units 1/C^2
    with torch.no_grad():
        a0, _ = probe.actor(batch[1]).rsample(make_generator(0, "acc8/probe"))
        C0 = float(energy_constraint(energy, batch[0], a0, 0.05, create_graph=False))
    ac = ActorCritic(rssm.feat_dim, 1, ACConfig(horizon=5, hidden=(16,), constraints=True, eta_lambda=0.05 / C0**2,
                                                eps_e=0.25 * C0, eps_s=1e9, actor_lr=1e-3), 0)
    lam, C = [ac.dual.lambda_e], []
    for _ in range(400):
        out = ac.update(rssm, h, z, batch, energy, 0.05)
        lam.append(out["lambda_e"])
        C.append(out["C_energy"])
        if C[-1] <= ac.dual.eps_e:
            break
    violated = [i for i, c in enumerate(C) if c > ac.dual.eps_e]
    first_ok = next((i for i, c in enumerate(C) if c <= ac.dual.eps_e), None)
    monotone = all(lam[i + 1] > lam[i] for i in violated if first_ok is None or i < first_ok)
    satisfied = first_ok is not None
    # persistently satisfied: the multiplier reaches and stays at zero
    d = DualState(1.0, 1.0, 1.0, 1.0, 0.1)
    trail = []
    for _ in range(50):
        d = dual_update(d, 0.5, 0.5)
        trail.append(d.lambda_e)
    to_zero = trail[-1] == 0.0 and all(b <= a for a, b in zip(trail, trail[1:]))
    # nonnegativity over the full constrained runs of criterion 7
    neg = 0
    for env in ENVS:
        _, rows = stage2(env, 0, True)
        neg += sum(1 for r in rows if r[7] < 0 or r[8] < 0)
    elapsed = time.time() - t0
    ok = monotone and satisfied and to_zero and neg == 0
    record_criterion(8, ok, f"lambda_e rose monotonically over {len(violated)} violated steps to "
                            f"{max(lam):.3g}, satisfied at step {first_ok}; decays to 0: {to_zero}; "
                            f"negative multipliers in full runs: {neg} ({elapsed:.0f}s)")
    assert ok


# ------------------------------------------------------------------ 9


def brute_lambda_return(r, v, c, gamma, lam):
    H = len(v)
    out = np.zeros(H)
    out[-1] = v[-1]
    for t in range(H - 1):
        N = H - 1 - t
        G = []
        for n in range(1, N + 1):
            total, disc = 0.0, 1.0
            for k in range(n):
                total += disc * r[t + k]
                disc *= gamma * c[t + k]
            G.append(total + disc * v[t + n])
        out[t] = (1 - lam) * sum(lam ** (n - 1) * G[n - 1] for n in range(1, N)) + lam ** (N - 1) * G[N - 1]
    return out


def test_c09_lambda_return_oracle(record_criterion):
    t0 = time.time()
    rng = np.random.default_rng(derive_seed(0, "acc9"))
    worst = 0.0
    for _ in range(500):
        H = int(rng.integers(2, 9))
        r, v = rng.normal(size=H), rng.normal(size=H)
        c = (rng.random(H) > 0.2).astype(float)
        gamma, lam = rng.random(), rng.random()
        got = lambda_returns(torch.tensor(r), torch.tensor(v), torch.tensor(c), gamma, lam).numpy()
        worst = max(worst, float(np.abs(got - brute_lambda_return(r, v, c, gamma, lam)).max()))
    elapsed = time.time() - t0
    ok = worst <= 1e-10 and elapsed < 60
    record_criterion(9, ok, f"max |recursion - brute force| = {worst:.1e} over 500 rollouts ({elapsed:.0f}s)")
    assert ok


# ----------------------------------------------------------------- 10

SMALL = {"model": {"deter": 16, "stoch": 4, "hidden": 16, "embed": 16, "phase_dim": 4, "ph_hidden": [16],
                   "batch": 4, "seq_len": 16, "warmup_frac": 0.0, "ramp_frac": 0.5},
         "energy": {"hidden": [16], "epochs": 3},
         "ac": {"hidden": [16], "horizon": 5, "constraint_batch": 16, "calibration_batches": 2},
         "stages": {"prefill_episodes": 2, "stage1_episodes": 3, "stage2_episodes": 3, "updates_per_episode": 4}}


def small_run(**over):
    d = json.loads(json.dumps(SMALL))
    for section, vals in over.items():
        d[section].update(vals)
    agent = Agent(from_dict(d))
    agent.run_stage1()
    agent.run_stage2()
    return agent


def test_c10_additivity_and_determinism(record_criterion):
    t0 = time.time()
    ph0 = small_run(model={"lambda_max": 0.0})
    plain = small_run(model={"ph_enabled": False})
    wm_cols = [0, 1, 2, 3, 6, 7]  # step, recon, divergence, reward_pred, kl, total
    same_wm = [[r[i] for i in wm_cols] for r in ph0.rows["wm"]] == [[r[i] for i in wm_cols] for r in plain.rows["wm"]]
    ph_ok = same_wm and ph0.rows["ac"] == plain.rows["ac"] and ph0.rows["episodes"] == plain.rows["episodes"]

    eta0 = small_run(ac={"eta_lambda": 0.0})
    unc = small_run(stages={"constrained": False})
    ac_cols = [0, 1, 2, 3, 4, 7, 8, 9]  # everything but the constraint values themselves
    eta_ok = (eta0.rows["episodes"] == unc.rows["episodes"] and eta0.rows["wm"] == unc.rows["wm"]
              and [[r[i] for i in ac_cols] for r in eta0.rows["ac"]] == [[r[i] for i in ac_cols] for r in unc.rows["ac"]]
              and any(r[5] > 0 for r in eta0.rows["ac"] if r[1] == 2))

    again = small_run(model={"lambda_max": 0.0})
    det_ok = again.rows == ph0.rows
    elapsed = time.time() - t0
    ok = ph_ok and eta_ok and det_ok
    record_criterion(10, ok, f"lambda_PH=0 identical to plain model: {ph_ok}; eta_lambda=0 identical to "
                             f"unconstrained: {eta_ok}; rerun identical: {det_ok} ({elapsed:.0f}s)")
    assert ok
