import numpy as np
import pytest
from feeders import IEEE33, UNBALANCED

from oldf import evaluation, load_case, train
from oldf.evaluation import (
    adapt_params,
    compare_models,
    comparison_csv,
    error_metrics,
    model_voltages,
    topology_sweep,
)
from oldf.lindistflow import ldf_voltages, nominal_params
from oldf.network import TopologyConfig, apply_topology
from oldf.training import ScenarioSet, base_scenario, sample_training_scenarios, sample_uniform_scenarios, solve_truth


@pytest.fixture(scope="module")
def ieee33():
    return load_case(IEEE33)


def test_error_metrics_by_hand():
    truth = np.array([[1.0, 0.81], [0.9025, 0.64]])
    approx = np.array([[1.0, 0.8281], [0.9025, 0.6561]])  # magnitudes off by 0.01 and 0.01
    rep = error_metrics(truth, approx)
    assert rep.eps_max == pytest.approx(0.01) and rep.eps_avg == pytest.approx(0.005)
    assert list(rep.worst_bus) == [2, 2]
    sq = error_metrics(truth, approx, space="squared")
    assert sq.eps_max == pytest.approx(0.0181)
    with pytest.raises(ValueError, match="shape"):
        error_metrics(truth, approx[:, :1])
    with pytest.raises(ValueError, match="space"):
        error_metrics(truth, approx, space="angle")
    with pytest.raises(ValueError, match="no scenarios"):
        error_metrics(np.zeros((0, 2)), np.zeros((0, 2)))


def test_base_load_ldf_error_and_oldf_gain(ieee33):
    c = ieee33
    prm, _ = train(c.network, sample_training_scenarios(c.p, c.q, 20, seed=0))
    table = compare_models(c.network, prm, base_scenario(c.p, c.q))
    assert table["LDF"].eps_avg == pytest.approx(0.00198, rel=0.05)
    assert table["OLDF"].eps_avg < 0.15 * table["LDF"].eps_avg
    csv = comparison_csv(table, "ieee33")
    assert csv.splitlines()[0] == "case,model,eps_avg,eps_max,n_used,n_dropped"
    assert len(csv.splitlines()) == 3


def test_model_voltages_dispatch():
    c = load_case(UNBALANCED)
    v = model_voltages(c.network, None, c.p, c.q)
    assert v.shape == (c.network.n_pairs,)


def test_adapt_params_keys_by_branch(ieee33):
    base = ieee33.network
    prm = nominal_params(base)
    prm = type(prm)(prm.dr * 2, prm.dx * 3, prm.gamma + 1e-3, prm.rho, prm.varrho, prm.branch_ids)
    target = apply_topology(base, TopologyConfig({4}, {33}))
    out = adapt_params(prm, base, target)
    out.check(target)
    pos = {b: k for k, b in enumerate(target.branch_ids)}
    tie = target.branch_by_id(33)
    assert out.dr[pos[33]] == tie.r and out.dx[pos[33]] == tie.x  # new branch: nominal
    assert out.dr[pos[7]] == 2 * base.branch_by_id(7).r
    np.testing.assert_array_equal(out.gamma, prm.gamma)
    # identity on the same topology
    assert adapt_params(prm, base, base) == prm


def test_small_topology_sweep(ieee33, monkeypatch):
    c = ieee33
    configs = [TopologyConfig(), TopologyConfig({4}, {33}), TopologyConfig({10}, {34})]
    tr = sample_training_scenarios(c.p, c.q, 20, seed=0)
    te = sample_uniform_scenarios(c.p, c.q, 300, seed=1)
    res = topology_sweep(c.network, configs, tr, te, jobs=1)
    assert res.matrix.shape == (3, 3) and res.diagonal_ok()
    for j, cfg in enumerate(configs):
        net = apply_topology(c.network, cfg)
        ref = error_metrics(solve_truth(net, te).v, ldf_voltages(net, te.p, te.q)).eps_avg
        assert res.baseline[j] == pytest.approx(ref, rel=1e-12)
    lines = res.long_csv().splitlines()
    assert lines[0] == "topology_i,topology_j,eps_avg,ldf_eps_avg,beats_ldf" and len(lines) == 10
    assert res.matrix_csv("dominance").count("\n") == 4
    # parallel workers give the same numbers
    par = topology_sweep(c.network, configs, tr, te, jobs=2)
    np.testing.assert_allclose(par.matrix, res.matrix, rtol=1e-12)

    # a failed training leaves a NaN row and is skipped by the diagonal check
    real = evaluation.train

    def flaky(net, *a, **k):
        if 33 in net.branch_ids:
            raise RuntimeError("boom")
        return real(net, *a, **k)

    monkeypatch.setattr(evaluation, "train", flaky)
    bad = topology_sweep(c.network, configs, tr, te, jobs=1)
    assert bad.failed == [1] and np.isnan(bad.matrix[1]).all() and bad.diagonal_ok()


def test_dropped_scenarios_are_reported(ieee33):
    c = ieee33
    prm = nominal_params(c.network)
    sc = ScenarioSet(np.stack([c.p, 40 * c.p]), np.stack([c.q, 40 * c.q]))
    table = compare_models(c.network, prm, sc)
    assert table["LDF"].n_used == 1 and table["LDF"].n_dropped == 1
