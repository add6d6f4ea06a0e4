import json

import numpy as np
import pytest
from feeders import IEEE33, UNBALANCED, random_tree, random_tree3
from hypothesis import given, settings
from hypothesis import strategies as st

from oldf import load_case, parse_case_json, parse_matpower_subset, read_params, write_params
from oldf.caseio import (
    CaseError,
    CaseFile,
    FingerprintError,
    ParamFile,
    case_to_json,
    fingerprint,
    read_scenarios_csv,
    write_scenarios_csv,
)
from oldf.lindistflow import nominal_h_blocks, nominal_params

MATPOWER = """function mpc = tiny
mpc.version = '2';
mpc.baseMVA = 10;
% bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin
mpc.bus = [
  1 3 0   0   0 0 1 1.02 0 12.66 1 1.1 0.9;
  2 1 1.0 0.5 0 0 1 1 0 12.66 1 1.1 0.9;
  3 1 2.0 1.0 0 0 1 1 0 12.66 1 1.1 0.9;   % end of feeder
];
mpc.gen = [
  1 0 0 10 -10 1.03 10 1 10 -10;
];
% fbus tbus r x b rateA rateB rateC ratio angle status
mpc.branch = [
  2 1 0.01 0.02 0 0 0 0 0 0 1;
  2 3 0.03 0.04 0 0 0 0 0 0 1;
  1 3 0.05 0.05 0 0 0 0 0 0 0;
];
"""


@settings(max_examples=120, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 30), base=st.sampled_from([1.0, 10.0, 100.0]))
def test_json_round_trip(seed, n, base):
    rng = np.random.default_rng(seed)
    net = random_tree(rng, n, v0=float(rng.uniform(0.95, 1.1)) ** 2)  # files store the magnitude
    case = CaseFile(net, -rng.uniform(0, 0.1, n), -rng.uniform(0, 0.05, n), base, "rt", tuple(int(v) for v in rng.permutation(200)[: n + 1] + 1))
    back = parse_case_json(case_to_json(case))
    assert fingerprint(back.network) == fingerprint(net)
    assert back.bus_labels == case.bus_labels
    np.testing.assert_allclose(back.p, case.p, rtol=1e-15, atol=0)
    np.testing.assert_allclose(back.q, case.q, rtol=1e-15, atol=0)
    # a second trip is exact
    assert case_to_json(back) == case_to_json(parse_case_json(case_to_json(back)))


def test_three_phase_round_trip():
    rng = np.random.default_rng(0)
    net = random_tree3(rng, 7)
    case = CaseFile(net, -rng.uniform(0, 0.1, net.n_pairs), -rng.uniform(0, 0.05, net.n_pairs), 1.0, "u", tuple(range(net.n + 1)))
    back = parse_case_json(case_to_json(case))
    assert fingerprint(back.network) == fingerprint(net)
    np.testing.assert_array_equal(back.p, case.p)


def test_packaged_cases_load():
    c = load_case(IEEE33)
    assert c.network.n == 32 and len(c.network.open_branches) == 5
    assert c.network.switchable_ids == frozenset({4, 10, 26, 33, 34, 35, 36, 37})
    # 3715 kW / 2300 kVAr total load
    assert -c.p.sum() * c.base_mva == pytest.approx(3.715, abs=1e-9)
    assert -c.q.sum() * c.base_mva == pytest.approx(2.300, abs=1e-9)
    u = load_case(UNBALANCED)
    assert u.three_phase and u.network.n_pairs == len(u.p) == 22


def test_matpower_subset():
    c = parse_matpower_subset(MATPOWER)
    net = c.network
    assert c.bus_labels == (1, 2, 3)
    assert net.v0 == pytest.approx(1.03**2)  # gen setpoint wins over bus Vm
    assert [(b.parent, b.child) for b in net.branches] == [(0, 1), (1, 2)]
    assert net.open_branches[0].id == 3
    np.testing.assert_allclose(c.p, [-0.1, -0.2])
    np.testing.assert_allclose(c.q, [-0.05, -0.1])


@pytest.mark.parametrize(
    "mutate, where",
    [
        (lambda d: d.pop("base_mva"), "base_mva"),
        (lambda d: d["branches"][0].update(r="x"), "branches[0]"),
        (lambda d: d["branches"][1].update(to=999), "branches[1].to"),
        (lambda d: d.update(substation=999), "substation"),
        (lambda d: d["branches"][3].update(status=0), "branches"),
        (lambda d: d.update(version=99), "version"),
    ],
)
def test_case_errors_name_location(mutate, where):
    doc = json.loads(IEEE33.read_text())
    mutate(doc)
    with pytest.raises(CaseError) as e:
        parse_case_json(json.dumps(doc))
    assert e.value.where.startswith(where)


def test_invalid_json_reports_line():
    with pytest.raises(CaseError, match="line 2"):
        parse_case_json('{\n "a": }')


def test_params_round_trip_and_fingerprint():
    rng = np.random.default_rng(1)
    net = random_tree(rng, 6)
    prm = nominal_params(net)
    prm = type(prm).from_vector(prm.to_vector() + rng.normal(size=30) * 1e-3, net.n, net.branch_ids)
    text = write_params(ParamFile(fingerprint(net), prm, {"seed": 0}))
    assert read_params(text, net).params == prm
    other = random_tree(rng, 6)
    with pytest.raises(FingerprintError):
        read_params(text, other)
    net3 = random_tree3(rng, 5)
    p3 = nominal_h_blocks(net3)
    assert read_params(write_params(ParamFile(fingerprint(net3), p3)), net3).params == p3


def test_params_reject_nonfinite():
    net = random_tree(np.random.default_rng(2), 3)
    prm = nominal_params(net)
    bad = type(prm)(prm.dr, prm.dx, np.array([np.nan, 0, 0]), prm.rho, prm.varrho, prm.branch_ids)
    with pytest.raises(ValueError):
        write_params(ParamFile(fingerprint(net), bad))


def test_scenario_csv_round_trip():
    rng = np.random.default_rng(5)
    p, q = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    p2, q2 = read_scenarios_csv(write_scenarios_csv(p, q), 6)
    np.testing.assert_array_equal(p, p2)
    np.testing.assert_array_equal(q, q2)
    with pytest.raises(CaseError, match="network has 5"):
        read_scenarios_csv(write_scenarios_csv(p, q), 5)
    with pytest.raises(CaseError, match="line 3"):
        read_scenarios_csv("p_1,q_1\n1,2\n3\n")
