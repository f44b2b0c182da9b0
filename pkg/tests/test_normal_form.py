import numpy as np
import pytest

from kamforge.diophantine import DiophantineParams
from kamforge.errors import ContractionError, SmallDivisorError
from kamforge.fourier import ActionGrid, FourierField
from kamforge.normal_form import (AveragedResult, HamiltonianSpec,
                                  NormalFormParams, canonical_change,
                                  locate_expansion_point, push_forward,
                                  solve_fixed_point, solve_homological,
                                  split_tail, taylor_split,
                                  time_average_transform, twist_compose)
from kamforge.oscillator import PowerLawH0

GOLDEN = np.array([(1 + np.sqrt(5)) / 2, 1.3247179572447460])


def random_real_field(rng, d, K, s, n_pairs, scale=1.0, vshape=()):
    mapping = {}
    while len(mapping) < 2 * n_pairs:
        mode = tuple(int(x) for x in rng.integers(-K, K + 1, d + 1))
        if sum(abs(x) for x in mode) == 0 or sum(abs(x) for x in mode) > K:
            continue
        if mode in mapping:
            continue
        c = scale * (rng.standard_normal(vshape) + 1j * rng.standard_normal(vshape))
        mapping[mode] = c
        mapping[tuple(-x for x in mode)] = np.conj(c)
    return FourierField.from_modes(d, mapping, s=s, vshape=vshape)


def transport_residual(S, R, unsolved, omega, eps, a, rng, n_pts=60):
    """Max of dS/dt + eps^(-a) <omega, dS/dtheta> + (R - unsolved) at points."""
    d = R.d
    th = rng.uniform(0, 2 * np.pi, (n_pts, d))
    tt = rng.uniform(0, 2 * np.pi, n_pts)
    lhs = S.derive("time").evaluate(th, tt)
    for i in range(d):
        lhs = lhs + eps ** (-a) * omega[i] * S.derive(f"angle_{i}").evaluate(th, tt)
    rhs = R.evaluate(th, tt)
    if unsolved is not None and unsolved.n_modes:
        rhs = rhs - unsolved.evaluate(th, tt)
    return float(np.abs(lhs + rhs).max())


def test_homological_single_mode_closed_form():
    omega = np.array([2.0, np.sqrt(2.0)])
    dc = DiophantineParams(d=2, gamma=1e-3, eps=1.0, a=1.0, K_split=6, K_check=12)
    R = FourierField.from_modes(2, {(1, 0, 1): 0.5, (-1, 0, -1): 0.5}, s=0.3)
    S = solve_homological(R, omega, 1.0, 1.0, dc)
    rng = np.random.default_rng(0)
    th = rng.uniform(0, 2 * np.pi, (40, 2))
    tt = rng.uniform(0, 2 * np.pi, 40)
    # divisor <k, omega> + l = 3, so S = -sin(theta_1 + t) / 3
    np.testing.assert_allclose(S.evaluate(th, tt), -np.sin(th[:, 0] + tt) / 3,
                               atol=1e-14)


@pytest.mark.parametrize("eps,a", [(1.0, 1.0), (0.5, 2.0)])
def test_homological_residual_split_regime(eps, a):
    rng = np.random.default_rng(42)
    R = random_real_field(rng, 2, 6, 0.3, 20, scale=1e-2)
    dc = DiophantineParams(d=2, gamma=1e-4, eps=eps, a=a, K_split=6, K_check=12)
    S = solve_homological(R, GOLDEN, eps, a, dc, regime="split")
    res = transport_residual(S, R, R.angle_average(), GOLDEN, eps, a, rng)
    assert res <= 1e-12 * max(1.0, R.norm())
    # the k = 0 modes stay untouched in the split regime
    assert not np.any(np.abs(S.modes[:, :2]).sum(axis=1) == 0)


def test_homological_residual_full_regime_solves_time_modes():
    rng = np.random.default_rng(7)
    R = random_real_field(rng, 2, 6, 0.3, 20, scale=1e-2)
    R = R + FourierField.from_modes(2, {(0, 0, 1): 5e-3j, (0, 0, -1): -5e-3j},
                                    s=0.3, cutoff=R.cutoff)
    dc = DiophantineParams(d=2, gamma=1e-4, eps=0.5, a=1.0, K_split=6, K_check=12)
    S = solve_homological(R, GOLDEN, 0.5, 1.0, dc, include_k0=True, regime="full")
    unsolved = R.angle_average().time_average()
    res = transport_residual(S, R, unsolved, GOLDEN, 0.5, 1.0, rng)
    assert res <= 1e-12 * max(1.0, R.norm())
    knorm = np.abs(S.modes[:, :2]).sum(axis=1)
    assert np.any((knorm == 0) & (S.modes[:, -1] != 0))


def test_homological_vector_valued_components():
    rng = np.random.default_rng(3)
    R = random_real_field(rng, 2, 5, 0.3, 12, scale=1e-2, vshape=(2,))
    dc = DiophantineParams(d=2, gamma=1e-4, eps=1.0, a=1.0, K_split=5, K_check=10)
    S = solve_homological(R, GOLDEN, 1.0, 1.0, dc, include_k0=True, regime="full")
    th = rng.uniform(0, 2 * np.pi, (50, 2))
    tt = rng.uniform(0, 2 * np.pi, 50)
    lhs = S.derive("time").evaluate(th, tt)
    for i in range(2):
        lhs = lhs + GOLDEN[i] * S.derive(f"angle_{i}").evaluate(th, tt)
    rhs = R.evaluate(th, tt) - R.angle_average().time_average().evaluate(th, tt)
    np.testing.assert_allclose(lhs, -rhs, atol=1e-12 * R.norm())


def test_homological_raises_on_resonance():
    R = FourierField.from_modes(2, {(1, -1, 0): 1e-3, (-1, 1, 0): 1e-3}, s=0.3)
    dc = DiophantineParams(d=2, gamma=1e-3, eps=1.0, a=1.0, K_split=6, K_check=12)
    with pytest.raises(SmallDivisorError) as err:
        solve_homological(R, np.array([1.0, 1.0]), 1.0, 1.0, dc)
    assert err.value.mode in ((1, -1, 0), (-1, 1, 0))
    assert err.value.divisor == pytest.approx(0.0, abs=1e-15)
    assert err.value.floor > 0


def test_solve_fixed_point_rejects_expanding_maps():
    with pytest.raises(ContractionError):
        solve_fixed_point(lambda V: 2.0 * V + 1.0, (4,))


@pytest.fixture(scope="module")
def chain():
    H0 = PowerLawH0(0.5, 2, 2)
    I0 = np.array([1.1378, 1.4142135623730951])
    modes = {
        (1, 0, 1): 1.25e-3, (-1, 0, -1): 1.25e-3,
        (0, 1, -1): 1e-3 + 5e-4j, (0, -1, 1): 1e-3 - 5e-4j,
        (1, 1, 0): 7.5e-4, (-1, -1, 0): 7.5e-4,
        (2, -1, 1): 5e-4j, (-2, 1, -1): -5e-4j,
        (0, 0, 0): 3e-3,
        (0, 0, 2): 1e-3, (0, 0, -2): 1e-3,
    }
    R = FourierField.from_modes(2, modes, s=0.4)
    spec = HamiltonianSpec(d=2, eps=0.5, a=2.0, b=1.0, H0=H0, R=R, I0=I0,
                           s0=0.4, tau0=2e-3)
    dc = DiophantineParams(d=2, gamma=5e-4, eps=0.5, a=2.0, K_split=8, K_check=16)
    params = NormalFormParams(dc=dc, m0=2, K0=4, K_cap=8, n_nodes=5)
    states = [split_tail(spec, params)]
    for _ in range(params.m0):
        S = solve_homological(states[-1].R, spec.omega, spec.eps, spec.a,
                              params.dc, regime="split",
                              floor_scale=params.floor_scale)
        states.append(push_forward(states[-1], S, spec, params))
    avg = time_average_transform(states[-1], spec)
    I_star, resid = locate_expansion_point(avg, spec)
    form = taylor_split(avg, spec, I_star, 2e-4)
    return {"spec": spec, "params": params, "states": states, "avg": avg,
            "I_star": I_star, "resid": resid, "form": form}


def eval_state(state, spec, th, tt, I):
    out = spec.eps_a * spec.H0.value(I)
    for f in (state.h, state.R, state.R_plus):
        if f.n_modes:
            out = out + f.evaluate(th, tt, I)
    return out


def test_split_tail_scales_by_eps_b(chain):
    spec = chain["spec"]
    state0 = chain["states"][0]
    rng = np.random.default_rng(1)
    th = rng.uniform(0, 2 * np.pi, (40, 2))
    tt = rng.uniform(0, 2 * np.pi, 40)
    I = spec.I0 + rng.uniform(-1, 1, (40, 2)) * spec.tau0 * 0.9
    total = state0.R.evaluate(th, tt, I) + state0.R_plus.evaluate(th, tt, I)
    np.testing.assert_allclose(total, spec.eps ** (-spec.b) * spec.R.evaluate(th, tt),
                               rtol=1e-12, atol=1e-15)


def test_push_forward_conjugates_the_hamiltonian(chain):
    spec, params = chain["spec"], chain["params"]
    state0, state1 = chain["states"][0], chain["states"][1]
    ch = state1.changes[-1]
    u, v = canonical_change(ch.S, params.nshape(spec.d))
    rng = np.random.default_rng(5)
    N = 30
    phi = rng.uniform(0, 2 * np.pi, (N, 2))
    tt = rng.uniform(0, 2 * np.pi, N)
    rho = state1.grid.center + rng.uniform(-1, 1, (N, 2)) * state1.grid.tau * 0.9
    th = phi + v.evaluate(phi, tt, rho)
    II = rho + u.evaluate(phi, tt, rho)

    # generating-function equations phi = theta + dS/drho, I = rho + dS/dtheta
    srho = np.stack([ch.S.derive(f"action_{i}").evaluate(th, tt, rho)
                     for i in range(2)], axis=-1)
    sth = np.stack([ch.S.derive(f"angle_{i}").evaluate(th, tt, rho)
                    for i in range(2)], axis=-1)
    np.testing.assert_allclose(phi, th + srho, atol=2e-8)
    np.testing.assert_allclose(II, rho + sth, atol=2e-8)

    # H_new(phi, t, rho) = H_old(theta, t, I) + dS/dt(theta, t, rho)
    lhs = eval_state(state1, spec, phi, tt, rho)
    rhs = (eval_state(state0, spec, th, tt, II)
           + ch.S.derive("time").evaluate(th, tt, rho))
    np.testing.assert_allclose(lhs, rhs, atol=2e-8)


def test_remainder_decays_quadratically(chain):
    rows = chain["states"][-1].diagnostics
    norms = [row["R_norm"] for row in rows]
    assert norms[1] <= 1e-2 * norms[0]
    assert norms[2] <= 1e-3 * norms[1]
    assert [row["j"] for row in rows] == [0, 1, 2]


def test_time_average_removes_oscillation(chain):
    spec = chain["spec"]
    state = chain["states"][-1]
    avg = chain["avg"]
    assert np.all(np.abs(avg.S_tilde.modes[:, :2]).sum(axis=1) == 0)
    assert np.all(avg.S_tilde.modes[:, -1] != 0)
    np.testing.assert_array_equal(avg.h_bar.modes, [[0, 0, 0]])
    rng = np.random.default_rng(9)
    N = 40
    th = rng.uniform(0, 2 * np.pi, (N, 2))
    tt = rng.uniform(0, 2 * np.pi, N)
    I = state.grid.center + rng.uniform(-1, 1, (N, 2)) * state.grid.tau * 0.9
    dst = avg.S_tilde.derive("time").evaluate(th, tt, I)
    osc = state.h.evaluate(th, tt, I) - avg.h_bar.evaluate(th, tt, I)
    np.testing.assert_allclose(dst, osc, atol=1e-13)
    # R_breve is the remainder composed with the angle twist
    R_tilde = (state.R + state.R_plus).prune()
    delta = avg.S_tilde.grad_action().evaluate(th, tt, I)
    np.testing.assert_allclose(avg.R_breve.evaluate(th, tt, I),
                               R_tilde.evaluate(th + delta, tt, I), atol=1e-15)


def test_twist_compose_matches_direct_shift():
    grid = ActionGrid(np.array([1.0, 1.5]), 0.1, 5)
    nodes = grid.node_points()
    g = FourierField.from_modes(
        2, {(1, 0, 0): 0.5, (-1, 0, 0): 0.5, (0, 1, 2): 0.1j, (0, -1, -2): -0.1j},
        s=0.3, grid=grid, cutoff=14)
    z = 0.02 * nodes[..., 0] + 0.01j * nodes[..., 1]
    St = FourierField.from_modes(2, {(0, 0, 1): z, (0, 0, -1): np.conj(z)},
                                 s=0.3, grid=grid)
    delta = St.grad_action()
    shifted = twist_compose(g, delta, tol=1e-13)
    rng = np.random.default_rng(2)
    N = 50
    th = rng.uniform(0, 2 * np.pi, (N, 2))
    tt = rng.uniform(0, 2 * np.pi, N)
    I = grid.center + rng.uniform(-1, 1, (N, 2)) * grid.tau * 0.9
    dv = delta.evaluate(th, tt, I)
    np.testing.assert_allclose(shifted.evaluate(th, tt, I),
                               g.evaluate(th + dv, tt, I), atol=1e-10)


def test_locate_expansion_point_solves_frequency_equation(chain):
    spec = chain["spec"]
    avg = chain["avg"]
    I_star, resid = chain["I_star"], chain["resid"]
    assert float(np.abs(resid).max()) <= 1e-12
    target = spec.omega(spec.I0)
    h = 1.5e-4
    fd = np.zeros(2)
    for i in range(2):
        dI = np.zeros(2)
        dI[i] = h
        fd[i] = (float(avg.h_bar.evaluate(np.zeros(2), 0.0, I_star + dI))
                 - float(avg.h_bar.evaluate(np.zeros(2), 0.0, I_star - dI))) / (2 * h)
    ea = spec.eps ** spec.a
    np.testing.assert_allclose(spec.H0.grad(I_star) + ea * fd, target, atol=1e-8)


def test_locate_expansion_point_pure_power_law(chain):
    spec = chain["spec"]
    avg = chain["avg"]
    z = FourierField.zero(2, avg.s, tau=avg.tau, cutoff=4, grid=avg.grid)
    flat = AveragedResult(h_bar=z, S_tilde=z, R_breve=z, grid=avg.grid,
                          s=avg.s, tau=avg.tau)
    I_star, resid = locate_expansion_point(flat, spec)
    np.testing.assert_allclose(I_star, spec.I0, atol=1e-14)
    np.testing.assert_allclose(resid, 0.0, atol=1e-14)


def test_taylor_split_reproduces_hamiltonian(chain):
    spec = chain["spec"]
    avg = chain["avg"]
    form = chain["form"]
    I_star = chain["I_star"]
    np.testing.assert_array_equal(form.omega, spec.omega(spec.I0))
    np.testing.assert_allclose(form.Omega, form.Omega.T, atol=1e-15)
    rng = np.random.default_rng(4)
    N = 40
    th = rng.uniform(0, 2 * np.pi, (N, 2))
    tt = rng.uniform(0, 2 * np.pi, N)
    rho = rng.uniform(-1, 1, (N, 2)) * form.r0 * 0.9
    I = I_star + rho
    epa = spec.eps ** (-spec.a)
    lhs = (epa * spec.H0.value(I) + avg.h_bar.evaluate(th, tt, I)
           + avg.R_breve.evaluate(th, tt, I))
    quad = epa * (rho @ form.omega + np.einsum("nj,jk,nk->n", rho, form.Omega, rho))
    rhs = (form.const + quad + form.low.evaluate_low(th, tt, rho)
           + form.high.evaluate(th, tt, rho))
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)
    # the sampled tail vanishes to third order at the expansion point
    zero = np.zeros((N, 2))
    np.testing.assert_allclose(form.high.evaluate(th, tt, zero), 0.0, atol=1e-18)


def test_classical_step_count_formula(chain):
    spec = chain["spec"]  # a = 2, b = 1
    assert NormalFormParams.classical_m0(spec, A=3.0) == 6
    assert NormalFormParams.classical_m0(spec) == 2 + int(1.0 + 200.0 * 2 * 3.0)


def test_spec_validation():
    H0 = PowerLawH0(0.5, 2, 2)
    R = FourierField.from_modes(2, {(0, 0, 0): 1e-3}, s=0.3)
    with pytest.raises(ValueError):
        HamiltonianSpec(d=2, eps=0.5, a=1.0, b=1.0, H0=H0, R=R,
                        I0=np.ones(2), s0=0.3, tau0=0.01)
    with pytest.raises(ValueError):
        HamiltonianSpec(d=2, eps=1.5, a=2.0, b=1.0, H0=H0, R=R,
                        I0=np.ones(2), s0=0.3, tau0=0.01)
    degenerate = PowerLawH0(1.0, 1, 2)  # linear H0: zero Hessian
    with pytest.raises(ValueError):
        HamiltonianSpec(d=2, eps=0.5, a=2.0, b=1.0, H0=degenerate, R=R,
                        I0=np.ones(2), s0=0.3, tau0=0.01)
