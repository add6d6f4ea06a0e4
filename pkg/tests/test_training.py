import numpy as np
import pytest
from feeders import IEEE33, UNBALANCED, balanced_decoupled, random_loads, random_tree, random_tree3

from oldf import load_case
from oldf.lindistflow import Ldf3Params, LdfParams, nominal_h_blocks, nominal_params
from oldf.training import (
    ScenarioSet,
    TrainOptions,
    highload_factors,
    loss,
    loss3,
    loss3_and_gradients,
    loss_and_gradients,
    sample_training_scenarios,
    sample_uniform_scenarios,
    solve_truth,
    train,
)


def central_diff(f, x, rel=1e-5):
    g = np.empty_like(x)
    for i in range(len(x)):
        h = rel * max(1e-3, abs(x[i]))
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def perturbed(rng, net):
    x = nominal_params(net).to_vector()
    x = x * rng.uniform(0.7, 1.3, x.size) + rng.normal(0, 1e-3, x.size)
    return x


def gradient_case(rng):
    n = int(rng.integers(2, 12))  # 3..12 buses including the substation
    net = random_tree(rng, n)
    p, q = random_loads(rng, n, int(rng.integers(1, 6)), 0.1)
    sc = ScenarioSet(p, q)
    vdf = solve_truth(net, sc).v
    x = perturbed(rng, net)
    f = lambda z: loss(net, LdfParams.from_vector(z, n, net.branch_ids), sc, vdf)  # noqa: E731
    _, g = loss_and_gradients(net, LdfParams.from_vector(x, n, net.branch_ids), sc, vdf)
    return rel_err(g, central_diff(f, x))


def gradient_case3(rng):
    net = random_tree3(rng, int(rng.integers(2, 8)))
    p, q = random_loads(rng, net.n_pairs, int(rng.integers(1, 6)), 0.05)
    sc = ScenarioSet(p, q)
    vdf = solve_truth(net, sc).v
    x0 = nominal_h_blocks(net).to_vector()
    x = x0 * rng.uniform(0.7, 1.3, x0.size) + rng.normal(0, 1e-3, x0.size)
    f = lambda z: loss3(net, Ldf3Params.from_vector(z, net), sc, vdf)  # noqa: E731
    _, g = loss3_and_gradients(net, Ldf3Params.from_vector(x, net), sc, vdf)
    return rel_err(g, central_diff(f, x))


@pytest.mark.parametrize("seed", range(10))
def test_single_phase_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    assert max(gradient_case(rng) for _ in range(5)) <= 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_three_phase_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(1000 + seed)
    assert max(gradient_case3(rng) for _ in range(3)) <= 1e-6


def test_loss_matches_definition():
    rng = np.random.default_rng(3)
    net = random_tree(rng, 5)
    p, q = random_loads(rng, 5, 3)
    sc = ScenarioSet(p, q)
    vdf = solve_truth(net, sc).v
    from oldf.lindistflow import ldf_voltages

    assert loss(net, nominal_params(net), sc, vdf) == pytest.approx(np.mean((ldf_voltages(net, p, q) - vdf) ** 2), rel=1e-14)


def test_decoupled_three_phase_gradients_are_block_equal():
    rng = np.random.default_rng(5)
    net = random_tree(rng, 7)
    net3 = balanced_decoupled(net)
    p, q = random_loads(rng, net.n, 4, 0.1)
    sc1 = ScenarioSet(p, q)
    sc3 = ScenarioSet(np.repeat(p, 3, axis=1), np.repeat(q, 3, axis=1))
    v1 = solve_truth(net, sc1).v
    v3 = np.repeat(v1, 3, axis=1)  # per-phase DistFlow equivalence is checked in test_distflow
    n = net.n
    x1 = perturbed(rng, net)
    prm1 = LdfParams.from_vector(x1, n, net.branch_ids)
    # same model in three-phase form: H = -2 D on each phase, demand-side biases
    prm3 = Ldf3Params(
        tuple(np.eye(3) * (-2 * d) for d in prm1.dr),
        tuple(np.eye(3) * (-2 * d) for d in prm1.dx),
        np.repeat(prm1.gamma, 3),
        np.repeat(-prm1.rho, 3),
        np.repeat(-prm1.varrho, 3),
    )
    f1, g1 = loss_and_gradients(net, prm1, sc1, v1)
    f3, g3 = loss3_and_gradients(net3, prm3, sc3, v3)
    assert f3 == pytest.approx(f1, rel=1e-12)
    G1 = LdfParams.from_vector(g1, n)
    G3 = Ldf3Params.from_vector(g3, net3)
    for k in range(n):
        d = np.diag(G3.hp[k])
        np.testing.assert_allclose(d, d[0], rtol=1e-12)
        np.testing.assert_allclose(-2 * 3 * d[0], G1.dr[k], rtol=1e-12)
        np.testing.assert_allclose(-2 * 3 * np.diag(G3.hq[k])[0], G1.dx[k], rtol=1e-12)
    np.testing.assert_allclose(3 * G3.gamma.reshape(n, 3), np.repeat(G1.gamma[:, None], 3, axis=1), rtol=1e-12)
    np.testing.assert_allclose(-3 * G3.rho.reshape(n, 3), np.repeat(G1.rho[:, None], 3, axis=1), rtol=1e-12)
    np.testing.assert_allclose(-3 * G3.varrho.reshape(n, 3), np.repeat(G1.varrho[:, None], 3, axis=1), rtol=1e-12)


def test_sampling_is_seeded_and_shaped():
    c = load_case(IEEE33)
    a = sample_training_scenarios(c.p, c.q, 20, seed=4)
    b = sample_training_scenarios(c.p, c.q, 20, seed=4)
    np.testing.assert_array_equal(a.p, b.p)
    assert a.p.shape == (20, 32)
    # one factor per bus scales p and q together
    np.testing.assert_allclose(a.p / c.p, a.q / c.q)
    u = sample_uniform_scenarios(c.p, c.q, 1000, seed=1)
    f = u.p / c.p
    assert f.min() >= 0 and f.max() <= 1.5
    h = highload_factors()
    assert len(h) == 30 and h.min() == -2 and h.max() == 2
    np.testing.assert_allclose(np.diff(h[15:]), 1 / 14)


def test_training_improves_and_reports():
    c = load_case(IEEE33)
    sc = sample_training_scenarios(c.p, c.q, 20, seed=0)
    prm, rep = train(c.network, sc)
    assert rep.exit_reason == "converged" and rep.iterations <= 100
    assert rep.final_loss < 0.05 * rep.initial_loss
    assert rep.grad_norm <= 1e-6
    assert prm.branch_ids == c.network.branch_ids


def test_training_iteration_cap_and_zero_iterations():
    c = load_case(IEEE33)
    sc = sample_training_scenarios(c.p, c.q, 5, seed=0)
    prm, rep = train(c.network, sc, TrainOptions(max_iter=0))
    assert rep.iterations == 0 and prm == nominal_params(c.network)
    _, rep = train(c.network, sc, TrainOptions(tol=1e-30, max_iter=2))
    assert rep.iterations == 2 and rep.exit_reason == "max_iter" and rep.final_loss <= rep.initial_loss


def test_three_phase_training_improves():
    c = load_case(UNBALANCED)
    sc = sample_training_scenarios(c.p, c.q, 20, seed=0)
    prm, rep = train(c.network, sc)
    assert rep.final_loss < 0.1 * rep.initial_loss
    assert isinstance(prm, Ldf3Params)


def test_training_drops_collapsed_scenarios():
    c = load_case(IEEE33)
    sc = sample_training_scenarios(c.p, c.q, 6, seed=0)
    p = sc.p.copy()
    p[0] *= 40  # far beyond the loadability limit
    truth = solve_truth(c.network, ScenarioSet(p, sc.q * np.where(np.arange(6)[:, None] == 0, 40, 1)))
    assert truth.dropped == 1 and len(truth.scenarios) == 5
