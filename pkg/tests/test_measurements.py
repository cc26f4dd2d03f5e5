import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_jacobian, random_state, two_bus
from implicit_dsse.errors import ConfigurationError
from implicit_dsse.grid import Branch, Bus, BusNetwork
from implicit_dsse.measurements import (KINDS, SIGMA_POWER, SIGMA_THETA, SIGMA_V, MeasurementModel,
                                        MeasurementPlan, MeasurementSpec, StateVector, add_noise,
                                        eval_h, eval_jacobian, flat_start, load_plan, make_plan)
from implicit_dsse.powerflow import nominal_demand, solve_power_flow


def all_kinds_specs(network):
    specs = []
    for k in range(1, network.n_bus + 1):
        specs += [MeasurementSpec("V", k, SIGMA_V), MeasurementSpec("PInj", k, 0.01),
                  MeasurementSpec("QInj", k, 0.01)]
        if k > 1:
            specs.append(MeasurementSpec("Theta", k, SIGMA_THETA))
    for br in network.branches:
        for i, j in ((br.from_bus, br.to_bus), (br.to_bus, br.from_bus)):
            specs += [MeasurementSpec("PFlow", (i, j), 0.01), MeasurementSpec("QFlow", (i, j), 0.01)]
    return specs


def test_flat_state_lossless_line_carries_no_flow():
    net = two_bus(r=0.0, x=0.1)
    specs = [MeasurementSpec("PFlow", (1, 2), 0.01), MeasurementSpec("QFlow", (1, 2), 0.01)]
    assert np.array_equal(eval_h(StateVector.flat(2), specs, net), [0.0, 0.0])


def test_voltage_rows_are_identity(ieee33, rng):
    x = random_state(ieee33, rng)
    specs = [MeasurementSpec("V", k, SIGMA_V) for k in (1, 7, 33)]
    assert np.array_equal(eval_h(x, specs, ieee33), x[[0, 6, 32]])
    jac = eval_jacobian(x, specs, ieee33)
    expected = np.zeros_like(jac)
    expected[[0, 1, 2], [0, 6, 32]] = 1.0
    assert np.array_equal(jac, expected)


def test_two_bus_flow_matches_complex_power():
    net = two_bus(r=0.01, x=0.1, p=0.1, q=0.05)
    state = solve_power_flow(net, nominal_demand(net))
    pf = eval_h(state, [MeasurementSpec("PFlow", (1, 2), 0.01), MeasurementSpec("QFlow", (1, 2), 0.01)], net)
    y = net.g_matrix + 1j * net.b_matrix
    vc = state.v * np.exp(1j * state.theta)
    # sending-end branch flow from the series admittance
    ys = -y[0, 1]
    s12 = vc[0] * np.conj(ys * (vc[0] - vc[1]))
    assert abs(pf[0] - s12.real) <= 1e-10
    assert abs(pf[1] - s12.imag) <= 1e-10
    assert pf[0] > 0.1  # load plus series losses


@pytest.mark.parametrize("case", ["ieee33", "ieee30"])
def test_injections_match_complex_power(case, request, rng):
    net = request.getfixturevalue(case)
    nb = net.n_bus
    specs = [MeasurementSpec("PInj", k, 0.01) for k in range(1, nb + 1)] + \
            [MeasurementSpec("QInj", k, 0.01) for k in range(1, nb + 1)]
    x = random_state(net, rng)
    v, th = x[:nb], np.concatenate([[0.0], x[nb:]])
    vc = v * np.exp(1j * th)
    s = vc * np.conj((net.g_matrix + 1j * net.b_matrix) @ vc)
    np.testing.assert_allclose(eval_h(x, specs, net), np.concatenate([s.real, s.imag]), atol=1e-12)


def test_lossless_flow_derivative_closed_form():
    net = two_bus(r=0.0, x=0.1)
    jac = eval_jacobian(StateVector.flat(2), [MeasurementSpec("PFlow", (1, 2), 0.01)], net)
    # columns: V1, V2, theta2
    assert abs(jac[0, 2] - (-10.0)) <= 1e-12


@pytest.mark.parametrize("case", ["ieee33", "ieee30"])
def test_jacobian_matches_finite_differences(case, request, rng):
    net = request.getfixturevalue(case)
    model = MeasurementModel(net, all_kinds_specs(net))
    for _ in range(3):
        x = random_state(net, rng)
        jac = model.jacobian(x)
        fd = fd_jacobian(model, x)
        assert np.max(np.abs(jac - fd)) / np.max(np.abs(jac)) <= 1e-6


def test_batched_evaluation_matches_single(ieee30, rng):
    model = MeasurementModel(ieee30, all_kinds_specs(ieee30))
    xs = np.stack([random_state(ieee30, rng) for _ in range(4)])
    h, jac = model.h_and_jacobian(xs)
    for k in range(4):
        np.testing.assert_allclose(h[k], model.h(xs[k]), rtol=0, atol=1e-13)
        np.testing.assert_allclose(jac[k], model.jacobian(xs[k]), rtol=0, atol=1e-13)


def test_permuting_plan_permutes_rows(ieee33, rng):
    specs = all_kinds_specs(ieee33)[:40]
    perm = rng.permutation(len(specs))
    x = random_state(ieee33, rng)
    h = eval_h(x, specs, ieee33)
    j = eval_jacobian(x, specs, ieee33)
    shuffled = [specs[k] for k in perm]
    assert np.array_equal(eval_h(x, shuffled, ieee33), h[perm])
    assert np.array_equal(eval_jacobian(x, shuffled, ieee33), j[perm])


def test_injection_equals_sum_of_flows_on_lossless_network(rng):
    buses = tuple(Bus(k, "slack" if k == 1 else "load", 0.0, 0.0, 0.0) for k in range(1, 5))
    branches = (Branch(1, 2, 0.0, 0.1, 0.0), Branch(2, 3, 0.0, 0.2, 0.0),
                Branch(3, 4, 0.0, 0.15, 0.0), Branch(4, 1, 0.0, 0.3, 0.0))
    net = BusNetwork(buses, branches, 1.0)
    x = random_state(net, rng)
    for bus in range(1, 5):
        nbrs = [br.to_bus if br.from_bus == bus else br.from_bus for br in branches
                if bus in (br.from_bus, br.to_bus)]
        for kind, flow in (("PInj", "PFlow"), ("QInj", "QFlow")):
            inj = eval_h(x, [MeasurementSpec(kind, bus, 0.01)], net)[0]
            flows = eval_h(x, [MeasurementSpec(flow, (bus, j), 0.01) for j in nbrs], net)
            assert abs(inj - flows.sum()) <= 1e-14


def test_flow_spec_on_missing_branch(ieee33):
    with pytest.raises(KeyError, match="no branch"):
        MeasurementModel(ieee33, [MeasurementSpec("PFlow", (1, 33), 0.01)])


def test_spec_on_missing_bus(ieee33):
    with pytest.raises(KeyError):
        MeasurementModel(ieee33, [MeasurementSpec("V", 34, 0.01)])


def test_slack_angle_cannot_be_measured(ieee33):
    with pytest.raises(ConfigurationError):
        MeasurementModel(ieee33, [MeasurementSpec("Theta", 1, SIGMA_THETA)])


def test_spec_validation():
    with pytest.raises(ConfigurationError, match="sigma"):
        MeasurementSpec("V", 1, 0.0)
    with pytest.raises(ConfigurationError):
        MeasurementSpec("Current", 1, 0.01)


def test_pmu_plan(ieee33):
    plan = make_plan("PMU", ieee33)
    got = [(s.kind, s.location) for s in plan.available]
    assert got == [("V", 1), ("PFlow", (1, 2)), ("QFlow", (1, 2)), ("V", 6), ("Theta", 6)]
    assert plan.m_d == 66
    assert {s.kind for s in plan.delayed} == {"PInj", "QInj"}
    sig = dict(zip([(s.kind, s.location) for s in plan.available], plan.sigma_vector))
    assert sig[("V", 6)] == SIGMA_V
    assert sig[("Theta", 6)] == pytest.approx(np.deg2rad(0.1), rel=1e-15)
    assert sig[("PFlow", (1, 2))] == SIGMA_POWER


def test_bif_and_end_plans(ieee33):
    bif = make_plan("BIF", ieee33)
    extra = [(s.kind, s.location) for s in bif.available[3:]]
    assert extra == [(k, loc) for k in ("PFlow", "QFlow") for loc in ((2, 19), (3, 23), (6, 26))]
    end = make_plan("END", ieee33)
    assert [s.location for s in end.available[3:]] == [18, 22, 25, 33]


def test_ieee30_plans(ieee30):
    hig = make_plan("HIG", ieee30)
    assert hig.m_a == 17
    assert [s.location for s in hig.available if s.kind == "V"] == [1, 2, 5, 6, 8, 13, 19, 22, 28]
    assert make_plan("MED", ieee30).m_a == 11
    low = make_plan("LOW", ieee30)
    assert [(s.kind, s.location) for s in low.available] == [("V", 1), ("V", 12), ("V", 21),
                                                               ("Theta", 12), ("Theta", 21)]
    assert low.m_a == 5 < ieee30.n_state
    assert low.m_d == 2 * 30 + 2 * 41


def test_full_plans_observable_at_flat_start(ieee30, ieee33):
    for net, names in ((ieee30, ("HIG", "MED", "LOW")), (ieee33, ("BIF", "END", "PMU"))):
        for name in names:
            plan = make_plan(name, net)
            jac = eval_jacobian(flat_start(net), plan, net)
            assert np.linalg.matrix_rank(jac) == net.n_state


def test_scenario_network_mismatch(ieee30, ieee33):
    with pytest.raises(ConfigurationError):
        make_plan("PMU", ieee30)
    with pytest.raises(ConfigurationError):
        make_plan("HIG", ieee33)
    with pytest.raises(ConfigurationError):
        make_plan("XYZ", ieee33)


def test_plan_file_round_trip(tmp_path, ieee33):
    plan = make_plan("END", ieee33)
    path = tmp_path / "plan.json"
    path.write_text(json.dumps(plan.to_dict()))
    again = load_plan(path)
    assert again.specs == plan.specs
    assert again.name == "END"


def test_tiny_noise_leaves_input():
    z = np.linspace(-1, 1, 7)
    out = add_noise(z, np.full(7, 1e-12), 0)
    assert np.max(np.abs(out - z)) <= 1e-10


def test_noise_deterministic_per_seed():
    z = np.zeros(5)
    a = add_noise(z, np.full(5, 0.01), 42)
    b = add_noise(z, np.full(5, 0.01), 42)
    assert a.tobytes() == b.tobytes()


def test_noise_std_on_power_channel():
    draws = add_noise(np.zeros((100_000, 1)), np.array([0.01]), 7)
    assert 0.0098 <= draws.std() <= 0.0102


def test_nonpositive_sigma_rejected():
    with pytest.raises(ConfigurationError):
        add_noise(np.zeros(2), np.array([0.01, 0.0]), 0)
    with pytest.raises(ConfigurationError):
        add_noise(np.zeros(2), np.array([0.01]), 0)


def test_state_vector_round_trip(rng):
    x = np.concatenate([rng.uniform(0.9, 1.1, 4), rng.uniform(-0.1, 0.1, 3)])
    s = StateVector.from_array(x)
    assert s.theta[0] == 0.0 and len(s.v) == 4
    assert np.array_equal(s.to_array(), x)
    with pytest.raises(ValueError):
        StateVector(np.ones(3), np.array([0.1, 0.0, 0.0]))


@settings(max_examples=40, deadline=None)
@given(r=st.floats(0.0, 0.2), x=st.floats(0.02, 0.5), bsh=st.floats(0.0, 0.3),
       v2=st.floats(0.85, 1.15), th=st.floats(-0.5, 0.5))
def test_two_bus_jacobian_property(r, x, bsh, v2, th):
    net = two_bus(r=r, x=x, b_shunt=bsh)
    specs = [MeasurementSpec(k, loc, 0.01) for k, loc in
             (("V", 2), ("Theta", 2), ("PInj", 1), ("QInj", 2), ("PFlow", (1, 2)),
              ("QFlow", (2, 1)), ("PFlow", (2, 1)), ("QFlow", (1, 2)))]
    assert {s.kind for s in specs} == set(KINDS)
    model = MeasurementModel(net, specs)
    state = np.array([1.02, v2, th])
    jac = model.jacobian(state)
    fd = fd_jacobian(model, state)
    assert np.max(np.abs(jac - fd)) <= 1e-6 * max(1.0, np.max(np.abs(jac)))
