import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from phrssm import envsim
from phrssm.diffnet import DTYPE, make_generator
from phrssm.energymodel import (
    EnergyDataset, EnergyModel, EnergyTrainConfig, analytic_pendulum_model, energy_loss_terms,
    evaluate_energy_alignment, train_energy_model,
)
from phrssm.errors import DimensionError, InsufficientDataError


def model(d_q=2, d_a=1, seed=0, **kw):
    return EnergyModel(d_q, d_a, k=4, hidden=(16, 16), generator=make_generator(seed, "em"), **kw)


def rand(*shape, g=None):
    return torch.randn(*shape, generator=g, dtype=DTYPE)


def zero_net(mlp):
    with torch.no_grad():
        for p in mlp.parameters():
            p.zero_()


def pendulum_data(episodes, seed):
    spec = envsim.make_env("pendulum")
    rng = np.random.default_rng(seed)
    trajs = [envsim.run_episode(spec, envsim.random_policy(spec, rng), rng, 200) for _ in range(episodes)]
    return spec, EnergyDataset.from_trajectories(trajs, 4, lambda q, qd: envsim.momentum(spec, q, qd))


def test_inverse_mass_zero_raw():
    m = model(d_q=1)
    zero_net(m.L_net)
    Minv = m.inverse_mass(rand(5, 1))
    assert torch.allclose(Minv, torch.full((5, 1, 1), math.log(2) ** 2, dtype=DTYPE), atol=1e-15)


@given(st.integers(0, 2**31))
def test_structural_properties(seed):
    g = torch.Generator().manual_seed(seed)
    m = model(d_q=3, d_a=2, seed=seed % 7)
    q, p, a = rand(32, 3, g=g) * 3, rand(32, 3, g=g) * 3, rand(32, 2, g=g)
    Minv = m.inverse_mass(q)
    assert torch.allclose(Minv, Minv.transpose(-1, -2), rtol=0, atol=1e-14)
    assert torch.linalg.eigvalsh(Minv).min() > 0
    kin = m.kinetic(q, p)
    assert (kin >= 0).all()
    assert torch.allclose(m.kinetic(q, 2 * p), 4 * kin, rtol=1e-12, atol=1e-12)
    assert torch.allclose(m.hamiltonian(q, torch.zeros_like(p)), m.V(m.embed(q)), atol=1e-14)
    _, P_diss = m.power_terms(q, p, a)
    assert (P_diss >= 0).all()
    assert (m.damping(q, p) > 0).all()


def test_velocity_paths_agree():
    m = model()
    q, p = rand(16, 2), rand(16, 2)
    assert torch.allclose(m.velocity(q, p), m.velocity_autodiff(q, p), rtol=0, atol=1e-10)
    assert torch.equal(m.velocity(q, torch.zeros(16, 2, dtype=DTYPE)), torch.zeros(16, 2, dtype=DTYPE))
    m1 = model(d_q=1)
    zero_net(m1.L_net)
    with torch.no_grad():
        m1.L_net.net[-1].bias.fill_(math.log(math.expm1(math.sqrt(0.5))))
    assert torch.allclose(m1.velocity(rand(1, 1), torch.tensor([[2.0]], dtype=DTYPE)),
                          torch.tensor([[1.0]], dtype=DTYPE), atol=1e-12)


def test_power_terms_zero_cases():
    m = model()
    zero_net(m.action_encoder)
    q, p = rand(8, 2), rand(8, 2)
    P_work, _ = m.power_terms(q, p, torch.zeros(8, 1, dtype=DTYPE))
    assert torch.equal(P_work, torch.zeros(8, dtype=DTYPE))
    W, D = model().power_terms(q, torch.zeros(8, 2, dtype=DTYPE), rand(8, 1))
    assert torch.equal(W, torch.zeros(8, dtype=DTYPE)) and torch.equal(D, torch.zeros(8, dtype=DTYPE))


@given(st.integers(0, 2**31))
def test_power_balance_identity(seed):
    g = torch.Generator().manual_seed(seed)
    m = model(d_q=2, d_a=2, seed=seed % 5)
    q, p, a = rand(16, 2, g=g), rand(16, 2, g=g), rand(16, 2, g=g)
    f = m.vector_field(torch.cat([q, p], -1), m.encode_action(a))
    dHdq = m.grad_q_hamiltonian(q, p)
    dHdp = m.velocity_autodiff(q, p)
    lhs = (dHdq * f[:, :2]).sum(-1) + (dHdp * f[:, 2:]).sum(-1)
    P_work, P_diss = m.power_terms(q, p, a)
    assert torch.allclose(lhs, P_work - P_diss, rtol=0, atol=1e-9)


def test_ph_step_dt_zero_and_conservative_order():
    m = model(d_q=1)
    q, p, a = rand(4, 1), rand(4, 1), rand(4, 1)
    q0, p0 = m.ph_step(q, p, a, 0.0)
    assert torch.equal(q0, q) and torch.equal(p0, p)
    h = m.predict_next_energy(rand(5, 1), rand(1), 0.05, step_dt=0.0)
    assert torch.allclose(h.H_next, h.H_t, rtol=0, atol=0)

    # conservative analytic quadratic H (constant M^-1, quadratic V), D = 0, a = 0
    class Quad(torch.nn.Module):
        def forward(self, e):
            return 0.5 * 4.0 * e[..., 0] ** 2

    m.V = Quad()
    zero_net(m.L_net)
    zero_net(m.G_net)
    with torch.no_grad():
        m.D_net.net[-1].bias.fill_(-200.0)
    q, p = torch.tensor([[1.0]], dtype=DTYPE), torch.tensor([[0.5]], dtype=DTYPE)
    errs = []
    for dt in (0.2, 0.1, 0.05):
        q1, p1 = m.ph_step(q, p, torch.zeros(1, 1, dtype=DTYPE), dt)
        errs.append(abs(float((m.hamiltonian(q1, p1) - m.hamiltonian(q, p)).detach())))
    slope = np.polyfit(np.log([0.2, 0.1, 0.05]), np.log(errs), 1)[0]
    assert slope > 4.5  # local error O(dt^5)


def test_momentum_shapes_and_errors():
    m = model(d_q=2)
    assert m.infer_momentum(rand(5, 2), 0.05).shape == (2,)
    assert m.infer_momentum(rand(3, 5, 2), 0.05).shape == (3, 2)
    with pytest.raises(DimensionError):
        m.infer_momentum(rand(4, 2), 0.05)
    with pytest.raises(DimensionError):
        m.predict_next_energy(rand(5, 2), rand(2), 0.05)


def test_momentum_zero_weights_gives_bias():
    m = model(d_q=1)
    zero_net(m.momentum_net)
    with torch.no_grad():
        m.momentum_net.head.net[-1].bias.fill_(0.3)
    with torch.no_grad():
        assert float(m.infer_momentum(rand(5, 1), 0.05)) == pytest.approx(0.3)


def fd_action_grad(m, w, a, dt, h=1e-5):
    out = torch.zeros_like(a)
    for i in range(a.shape[-1]):
        e = torch.zeros_like(a)
        e[..., i] = h
        with torch.no_grad():
            out[..., i] = (m.next_energy(w, a + e, dt) - m.next_energy(w, a - e, dt)) / (2 * h)
    return out


def test_action_gradient_and_hvp_match_finite_differences():
    for i in range(10):
        g = make_generator(i, "probe")
        m = model(d_q=2, d_a=2, seed=i)
        w, a = rand(5, 2, g=g), rand(2, g=g)
        ad = m.energy_action_gradient(w, a, 0.05)
        assert ad.shape == (2,)
        fd = fd_action_grad(m, w, a, 0.05)
        assert (ad - fd).norm() / ad.norm() < 1e-5
        v = rand(2, g=g)
        hv = m.energy_action_hvp(w, a, v, 0.05)
        h = 1e-4
        fd_hv = (m.energy_action_gradient(w, a + h * v, 0.05) - m.energy_action_gradient(w, a - h * v, 0.05)) / (2 * h)
        assert (hv - fd_hv).norm() / hv.norm() < 1e-4


def test_zero_port_gives_zero_action_gradient():
    m = model()
    zero_net(m.G_net)
    g = m.energy_action_gradient(rand(5, 2), rand(1), 0.05)
    assert torch.equal(g, torch.zeros(1, dtype=DTYPE))


def test_calibration_round_trip():
    m = model()
    m.set_calibration(3.0, 2.0)
    E = rand(10)
    assert torch.allclose(m.to_physical(m.normalize_energy(E)), E, atol=1e-15)
    with pytest.raises(ValueError):
        m.set_calibration(0.0, 0.0)


def test_dataset_and_empty_errors():
    spec, data = pendulum_data(2, 0)
    assert len(data) == 2 * (200 - 4 - 1)
    assert data.q_window.shape == (len(data), 5, 1)
    with pytest.raises(InsufficientDataError):
        train_energy_model(model(d_q=1), data.subset([]))


def test_analytic_oracle_near_zero_loss():
    spec, data = pendulum_data(3, 1)
    E = data.E_t
    m = analytic_pendulum_model(spec, offset=float(E.mean()), scale=float(E.std()))
    terms = energy_loss_terms(m, data)
    assert float(terms["energy"].detach()) < 1e-3
    assert float(terms["next"].detach()) < 1e-3
    align = evaluate_energy_alignment(m, data)
    assert align["corr_t"] > 0.999 and align["corr_next"] > 0.999


def test_training_loss_decreases_on_small_overfit_set():
    spec, data = pendulum_data(1, 2)
    small = data.subset(np.arange(64))
    m = EnergyModel(1, 1, k=4, periodic=(True,), generator=make_generator(0, "fit"))
    trace = train_energy_model(m, small, EnergyTrainConfig(epochs=300, batch_size=64, seed=0))
    totals = [t["total"] for t in trace]
    assert totals[-1] < 0.1 * totals[0]
    # Adam is not monotone step to step; compare block means instead
    blocks = [np.mean(totals[i:i + 50]) for i in range(0, 300, 50)]
    assert all(b < a for a, b in zip(blocks, blocks[1:]))


def test_objective_structure_plain_regression():
    spec, data = pendulum_data(1, 3)
    m = EnergyModel(1, 1, k=4, periodic=(True,), generator=make_generator(0, "w"))
    trace = train_energy_model(m, data, EnergyTrainConfig(epochs=2, w_next=0.0, w_momentum=0.0))
    assert all(abs(t["total"] - t["energy"]) < 1e-12 for t in trace)


def test_trained_momentum_and_alignment():
    spec, train = pendulum_data(30, 4)
    _, test = pendulum_data(5, 5)
    m = EnergyModel(1, 1, k=4, periodic=(True,), generator=make_generator(0, "mom"))
    train_energy_model(m, train, EnergyTrainConfig(epochs=15, seed=0))
    with torch.no_grad():
        p = m.infer_momentum(test.q_window, test.dt) * m.energy_scale  # model momenta are normalized
    rel = float((p - test.p_oracle).norm() / test.p_oracle.norm())
    assert rel < 0.10
    assert evaluate_energy_alignment(m, test)["corr_t"] > 0.9
