import numpy as np
import pytest

from kamforge.duffing import (DuffingNetwork, ScaledSystem, Trajectory, integrate,
                              rotation_vector, stability_metrics, to_hamiltonian_spec)
from kamforge.errors import EscapeError
from kamforge.oscillator import ActionAngleMap

TERMS = {
    (1, 1): {1: 2.5e-5, -1: 2.5e-5},
    (2, 0): {0: 5.0e-5},
    (2, 1): {2: 2.5e-5, -2: 2.5e-5},
}


def test_potential_gradient_matches_finite_difference():
    net = DuffingNetwork(2, 1, TERMS)
    rng = np.random.default_rng(0)
    x = rng.uniform(-1.5, 1.5, 2)
    t = 0.7
    g = net.potential_gradient(x, t)
    h = 1e-6
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = (net.potential(x + e, t) - net.potential(x - e, t)) / (2 * h)
        assert g[j] == pytest.approx(fd, abs=1e-9)


def test_coefficient_is_real_trig_polynomial():
    net = DuffingNetwork(2, 1, TERMS)
    t = np.linspace(0, 2 * np.pi, 7)
    c = net.coefficient((1, 1), t)
    np.testing.assert_allclose(c, 2 * 2.5e-5 * np.cos(t), atol=1e-18)


def test_json_roundtrip(tmp_path):
    net = DuffingNetwork(2, 1, TERMS)
    path = tmp_path / "net.json"
    net.save(path)
    back = DuffingNetwork.load(path)
    assert back.m == net.m and back.n == net.n
    assert set(back.terms) == set(net.terms)
    for alpha in net.terms:
        assert back.terms[alpha] == pytest.approx(net.terms[alpha])


def test_scaling_roundtrip_and_exponents():
    net = DuffingNetwork(2, 1, TERMS)
    sys_ = ScaledSystem(net, 10.0)
    assert sys_.eps == pytest.approx(0.1)
    assert (sys_.a, sys_.b) == (1, 0)
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(2, 5, 2))
    X, V = sys_.to_original(x, y)
    xb, yb = sys_.to_scaled(X, V)
    np.testing.assert_allclose(xb, x, rtol=1e-15)
    np.testing.assert_allclose(yb, y, rtol=1e-15)
    with pytest.raises(ValueError):
        ScaledSystem(net, 0.5)


def test_uncoupled_energy_conservation_and_order():
    net = DuffingNetwork(1, 1, {})
    x0, v0 = np.array([1.3]), np.array([0.4])

    def energy_err(h):
        traj = integrate(net, x0, v0, 0.0, 10.0, h, sample_every=int(round(10.0 / h)))
        e = traj.v**2 / 2 + traj.x**4 / 4
        return abs(e[-1, 0] - e[0, 0])

    e1, e2 = energy_err(0.02), energy_err(0.01)
    assert e1 < 1e-9
    # sixth-order splitting: halving the step cuts the defect by about 2^6
    assert 30 < e1 / e2 < 130


def test_batched_integration_matches_single_orbits():
    net = DuffingNetwork(2, 1, TERMS)
    rng = np.random.default_rng(3)
    x0 = rng.uniform(-1, 1, (4, 2))
    v0 = rng.uniform(-1, 1, (4, 2))
    t0 = rng.uniform(0, 2 * np.pi, 4)
    batch = integrate(net, x0, v0, t0, 5.0, 0.01, sample_every=500)
    for i in range(4):
        single = integrate(net, x0[i], v0[i], float(t0[i]), 5.0, 0.01,
                           sample_every=500)
        np.testing.assert_allclose(batch.x[-1, i], single.x[-1], rtol=1e-12)
        np.testing.assert_allclose(batch.v[-1, i], single.v[-1], rtol=1e-12)


def test_escape_raises():
    net = DuffingNetwork(1, 1, {})
    with pytest.raises(EscapeError):
        integrate(net, np.array([0.0]), np.array([1.0]), 0.0, 5.0, 0.01, escape=0.5)


def test_trajectory_csv_layout(tmp_path):
    traj = Trajectory(t=np.array([0.0, 1.0]),
                      x=np.array([[1.0, 2.0], [3.0, 4.0]]),
                      v=np.array([[5.0, 6.0], [7.0, 8.0]]))
    path = tmp_path / "orbit.csv"
    traj.to_csv(path, comment="config deadbeef")
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "# config deadbeef"
    assert lines[1] == "t,x_1,x_2,v_1,v_2"
    assert lines[2].split(",") == ["0", "1", "2", "5", "6"]


def test_uncoupled_orbit_conserves_action():
    net = DuffingNetwork(2, 1, {})
    sys_ = ScaledSystem(net, 10.0)
    aa = ActionAngleMap(1, 2)
    theta0 = np.array([0.3, 1.0])
    I0 = np.array([1.0, 1.3])
    x0, y0 = aa.to_cartesian(theta0, I0)
    X0, V0 = sys_.to_original(x0, y0)
    traj = integrate(net, X0, V0, 0.0, 50.0, 0.005, sample_every=40)
    metrics = stability_metrics(traj, sys_, aa)
    assert metrics["action_variation"] < 1e-8
    assert not metrics["escaped"]
    assert np.isfinite(metrics["sup_norm"])


def test_uncoupled_rotation_matches_frequency_map():
    net = DuffingNetwork(2, 1, {})
    sys_ = ScaledSystem(net, 10.0)
    aa = ActionAngleMap(1, 2)
    I0 = np.array([1.0, 1.3])
    x0, y0 = aa.to_cartesian(np.zeros(2), I0)
    X0, V0 = sys_.to_original(x0, y0)
    traj = integrate(net, X0, V0, 0.0, 50.0, 0.005, sample_every=40)
    rot = rotation_vector(traj, sys_, aa)
    target = sys_.eps ** (-sys_.a) * aa.omega(I0[None, :])[0]
    np.testing.assert_allclose(rot, target, rtol=1e-6)


def test_hamiltonian_spec_reproduces_scaled_forcing():
    net = DuffingNetwork(2, 1, TERMS)
    sys_ = ScaledSystem(net, 10.0)
    aa = ActionAngleMap(1, 2)
    I0 = np.array([1.0, 1.3])
    spec = to_hamiltonian_spec(sys_, aa, I0, 2e-3, n_nodes=5, s0=0.35, K0=16,
                               base_grid=64)
    assert (spec.a, spec.b) == (1, 0)
    rng = np.random.default_rng(4)
    theta = rng.uniform(0, 2 * np.pi, (20, 2))
    t = rng.uniform(0, 2 * np.pi, 20)
    II = I0[None, :] + rng.uniform(-1, 1, (20, 2)) * 1e-3
    got = spec.R.evaluate(theta, t, II)
    A = sys_.A
    n = net.n
    x, _ = aa.to_cartesian(theta, II)
    want = A ** (-(2 * n + 1)) * net.potential(A * x, t)
    np.testing.assert_allclose(got, want, atol=1e-10)
