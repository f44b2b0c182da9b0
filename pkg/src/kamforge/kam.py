"""KAM iteration on a quadratic action jet with superlinear remainder decay.

The stage Hamiltonian has the normal form

    H_m = C + eps^(-a) (<omega, rho> + <Omega rho, rho>)
        + R0(theta, t) + <R1(theta, t), rho> + <R2(theta, t) rho, rho>
        + R_high(theta, t, rho)

with R_high vanishing to third order at rho = 0.  One step solves three
homological equations (for the generating jet S = S0 + <S1, rho>
+ <S2 rho, rho>), shifts the action origin by nu to keep the rotation vector
fixed, updates the twist matrix Omega, and reassembles the remainder, whose
low-order part shrinks superlinearly while the domain radii barely move.  The
composed changes carry an invariant-torus parametrisation back to the original
coordinates.
"""

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ContractionError, DomainError, EscapeError
from .fourier import ActionGrid, ActionJet, FourierField, compose_shifted_grid
from .normal_form import _realify, solve_fixed_point, solve_homological
from .util import fast_len

ZETA2 = np.pi**2 / 6.0


@dataclass
class KamParams:
    """Solver settings: Diophantine data, truncations, and stop rule."""

    dc: object
    tol: float = 1e-12
    max_steps: int = 12
    K_cap: int = 24
    n_nodes: int = 5
    theta_grid: tuple = None
    taylor_tol: float = 1e-13
    floor_scale: float = 0.5
    fd_frac: float = 0.25

    def nshape(self, d):
        if self.theta_grid is not None:
            return tuple(self.theta_grid)
        n = fast_len(2 * self.K_cap + 1)
        return (n,) * (d + 1)

    @staticmethod
    def shrink(m):
        """Domain factor after m steps: radii decrease by harmonic-square bites.

        The factors stay above 0.99, so the analyticity domain never collapses.
        """
        e = sum(1.0 / l**2 for l in range(1, m + 1)) / (100.0 * ZETA2)
        return 1.0 - e


@dataclass
class KamChange:
    """Generating jet of one step plus its action shift."""

    S0: FourierField
    S1: FourierField
    S2: FourierField
    nu: np.ndarray


@dataclass
class KamState:
    m: int
    eps: float
    a: float
    omega: np.ndarray          # unscaled target frequency
    Omega: np.ndarray
    low: ActionJet
    high: FourierField
    const: float
    s: float
    r: float
    grid: ActionGrid
    s0: float
    r0: float
    nu_total: np.ndarray = None
    changes: list = dc_field(default_factory=list)
    diagnostics: list = dc_field(default_factory=list)

    def __post_init__(self):
        if self.nu_total is None:
            self.nu_total = np.zeros(len(self.omega))

    def low_norm(self):
        """Size of the low jet over the current ball: ||R0'|| + r ||R1|| + r^2 ||R2||.

        The constant mode of R0 is excluded; it only shifts the energy.
        """
        r0_osc = self.low.r0 - self.low.r0.time_average().angle_average()
        return (r0_osc.norm() + self.r * self.low.r1.norm()
                + self.r**2 * self.low.r2.norm())


def init_state(form, params):
    """KamState 0 from the output of the averaging stage."""
    d = form.low.r0.d
    state = KamState(
        m=0, eps=form.eps, a=form.a, omega=np.asarray(form.omega, dtype=float),
        Omega=np.asarray(form.Omega, dtype=float), low=form.low, high=form.high,
        const=float(form.const), s=form.s, r=form.r0, grid=form.grid,
        s0=form.s, r0=form.r0,
    )
    state.diagnostics.append(_diag_row(state, 0.0, 0.0, np.zeros(d)))
    return state


def _diag_row(state, taylor_err, proj_res, nu):
    r0_osc = state.low.r0 - state.low.r0.time_average().angle_average()
    return {
        "m": state.m, "R0_norm": r0_osc.norm(), "R1_norm": state.low.r1.norm(),
        "R2_norm": state.low.r2.norm(), "low_norm": state.low_norm(),
        "high_norm": state.high.norm() if state.high is not None else 0.0,
        "nu_inf": float(np.abs(nu).max(initial=0.0)),
        "dOmega": 0.0, "s": state.s, "r": state.r,
        "taylor_err": taylor_err, "projection_residual": proj_res,
        "fp_iters": 0,
    }


def _mode_zero(field):
    """Real (0, ..., 0) coefficient of an action-free field."""
    c = field.mode(*([0] * (field.d + 1)))
    c = np.asarray(c)
    if c.size and np.abs(c.imag).max(initial=0.0) > 1e-10 * max(1.0, np.abs(c).max()):
        raise ContractionError("constant mode of a real field came out complex")
    return c.real if c.ndim else float(np.real(c))


def _matrix_apply(M, f):
    """Field with coefficients M @ f (vector field, contraction over its index)."""
    c = np.einsum("ij,mj->mi", M, f.coeffs)
    return f.replace(coeffs=c, _canonical=True, enforce_reality=False)


def _grad_angle_vector(f):
    """G_ij = d/dtheta_i of component j for a vector field: (M, d, d) coeffs."""
    k = f.modes[:, : f.d].astype(float)
    c = 1j * k[:, :, None] * f.coeffs[:, None, :]
    return f.replace(coeffs=c, vshape=(f.d, f.d), _canonical=True,
                     enforce_reality=False)


def cubic_contraction(high, w_grid, nshape, h, taylor_tol=1e-13):
    """Grids of T3[w]_jk = sum_i d^3 R_high / d rho_i d rho_j d rho_k (0) w_i.

    Third derivatives at the origin are taken by centred finite differences of
    the sampled remainder along coordinate and diagonal directions at radius h
    (the polarisation identity recovers mixed entries), then contracted with
    the vector grid ``w_grid`` of shape (*nshape, d).  Returns (*nshape, d, d).
    """
    d = high.d

    def val(point):
        return high.at_action(np.asarray(point, dtype=float)).to_grid(nshape)

    def T(u):
        u = np.asarray(u, dtype=float)
        return (val(2 * h * u) - 2 * val(h * u) + 2 * val(-h * u) - val(-2 * h * u)) \
            / (2 * h**3)

    Tcache = {}

    def Tdir(u):
        key = tuple(u)
        if key not in Tcache:
            Tcache[key] = T(u)
        return Tcache[key]

    def unit(i, sign=1):
        u = np.zeros(d)
        u[i] = sign
        return u

    D = {}
    for i in range(d):
        D[(i, i, i)] = Tdir(unit(i))
    for i in range(d):
        for j in range(d):
            if i == j:
                continue
            ei, ej = unit(i), unit(j)
            D[tuple(sorted((i, i, j)))] = D.get(
                tuple(sorted((i, i, j))),
                (Tdir(ei + ej) - Tdir(ei - ej) - 2 * Tdir(ej)) / 6.0)
    for i in range(d):
        for j in range(i + 1, d):
            for k in range(j + 1, d):
                ei, ej, ek = unit(i), unit(j), unit(k)
                D[(i, j, k)] = (Tdir(ei + ej + ek) - Tdir(ei + ej - ek)
                                - Tdir(ei - ej + ek) + Tdir(ei - ej - ek)) / 24.0

    out = np.zeros(tuple(nshape) + (d, d), dtype=complex)
    for jj in range(d):
        for kk in range(d):
            acc = 0.0
            for ii in range(d):
                acc = acc + D[tuple(sorted((ii, jj, kk)))] * w_grid[..., ii]
            out[..., jj, kk] = acc
    return out


def kam_step(state, params):
    """One KAM step: solve, shift, retwist, reassemble, and re-split."""
    d = len(state.omega)
    eps, a = state.eps, state.a
    epa = eps ** (-a)
    ea = eps ** a
    m_next = state.m + 1
    s_next = state.s0 * params.shrink(m_next)
    r_next = state.r0 * params.shrink(m_next)
    grid_new = ActionGrid(np.zeros(d), r_next, params.n_nodes)
    nshape = params.nshape(d)
    taylor_errs = [0.0]

    R0, R1, R2 = state.low.r0, state.low.r1, state.low.r2
    omega = state.omega
    Om = state.Omega

    # homological solves ----------------------------------------------------
    S0 = solve_homological(R0, omega, eps, a, params.dc, include_k0=True,
                           regime="full", floor_scale=params.floor_scale)
    A0 = S0.grad_angle()                       # d(theta) S0, vector field
    Rstar = (R1 + _matrix_apply(2.0 * epa * Om, A0)).prune()
    S1 = solve_homological(Rstar, omega, eps, a, params.dc, include_k0=True,
                           regime="full", floor_scale=params.floor_scale)
    nu = -0.5 * ea * np.linalg.solve(Om, _mode_zero(Rstar))
    if np.abs(nu).max(initial=0.0) > 0.25 * r_next:
        raise DomainError(
            f"action shift |nu| = {np.abs(nu).max():.3e} is too large for the "
            f"ball radius {r_next:.3e}")

    G = _grad_angle_vector(S1)                 # G_ij = d(theta_i) S1_j
    OmG = np.einsum("ij,mjk->mik", Om, G.coeffs)
    symOmG = G.replace(coeffs=epa * (OmG + np.swapaxes(OmG, 1, 2)),
                       _canonical=True, enforce_reality=False)

    g0 = np.stack([_realify(A0.component(i).to_grid(nshape)) for i in range(d)],
                  axis=-1)                            # (*nshape, d)
    have_high = state.high is not None and state.high.n_modes > 0
    if have_high:
        T3w = cubic_contraction(state.high, g0, nshape,
                                h=params.fd_frac * state.r)
        T3_field = FourierField.from_grid(
            0.5 * T3w, d, state.s, params.K_cap, vshape=(d, d))
        Rss = (R2 + symOmG + T3_field).prune()
    else:
        T3w = None
        Rss = (R2 + symOmG).prune()
    S2 = solve_homological(Rss, omega, eps, a, params.dc, include_k0=True,
                           regime="full", floor_scale=params.floor_scale)
    S2 = S2.replace(coeffs=0.5 * (S2.coeffs + np.swapaxes(S2.coeffs, 1, 2)),
                    _canonical=True, enforce_reality=False)
    dOm = ea * _mode_zero(Rss)
    dOm = 0.5 * (dOm + dOm.T)
    Om_new = Om + dOm

    # remainder assembly in the old angle variables -------------------------
    rho = grid_new.node_points().reshape(-1, d)      # (P, d)
    P = rho.shape[0]
    base = tuple(nshape) + (P,)

    Ggrid = np.empty(tuple(nshape) + (d, d))
    for i in range(d):
        for j in range(d):
            Ggrid[..., i, j] = _realify(G.component(i, j).to_grid(nshape))
    S2g = np.empty(tuple(nshape) + (d, d))
    for i in range(d):
        for j in range(d):
            S2g[..., i, j] = _realify(S2.component(i, j).to_grid(nshape))
    dS2g = np.empty(tuple(nshape) + (d, d, d))        # d(theta_i) S2_jk
    for i in range(d):
        Si = S2.replace(coeffs=S2.coeffs * (1j * S2.modes[:, i])[:, None, None],
                        _canonical=True, enforce_reality=False)
        for j in range(d):
            for k in range(d):
                dS2g[..., i, j, k] = _realify(Si.component(j, k).to_grid(nshape))

    # d(theta) S at the new nodes: A(theta, t, rho) = g0 + G rho + <dS2 rho, rho>
    A = (g0[..., None, :]
         + np.einsum("...ij,pj->...pi", Ggrid, rho)
         + np.einsum("...ijk,pj,pk->...pi", dS2g, rho, rho))  # (*nshape, P, d)
    Wfull = nu[None, :] + A                               # nu + d(theta) S

    rem = np.zeros(base, dtype=complex)
    # eps^(-a) (<Omega dS, dS> + 2 <Omega nu, dS>)
    rem += epa * (np.einsum("...pi,ij,...pj->...p", A, Om, A)
                  + 2.0 * np.einsum("i,...pi->...p", Om @ nu, A))
    # <R1, nu + dS>
    R1g = np.stack([_realify(R1.component(i).to_grid(nshape)) for i in range(d)],
                   axis=-1)
    rem += np.einsum("...i,...pi->...p", R1g, Wfull)
    # <R2 (nu + dS), nu + dS> + 2 <R2 (nu + dS), rho>
    R2g = np.empty(tuple(nshape) + (d, d))
    for i in range(d):
        for j in range(d):
            R2g[..., i, j] = _realify(R2.component(i, j).to_grid(nshape))
    Q = np.einsum("...ij,...pj->...pi", R2g, Wfull)
    rem += (np.einsum("...pi,...pi->...p", Q, Wfull)
            + 2.0 * np.einsum("...pi,pi->...p", Q, rho))
    # 2 eps^(-a) <Omega rho, <dS2 rho, rho>>  (cubic tail of the twist cross term)
    quad = np.einsum("...ijk,pj,pk->...pi", dS2g, rho, rho)
    rem += 2.0 * epa * np.einsum("pi,ij,...pj->...p", rho, Om, quad)
    # R_high at the shifted action, minus the part absorbed into S2's equation
    if have_high:
        vals, e = compose_shifted_grid(state.high, nshape, drho=Wfull.reshape(
            tuple(nshape) + grid_new.shape + (d,)), out_grid=grid_new,
            tol=params.taylor_tol)
        rem += vals.reshape(base)
        taylor_errs.append(e)
        rem -= 0.5 * np.einsum("pj,...jk,pk->...p", rho, T3w, rho)

    # compose with the implicit angle change theta = phi + v ------------------
    nontrivial = S1.n_modes or S2.n_modes
    if nontrivial:
        s1c = [S1.component(i) for i in range(d)]
        s2c = [[S2.component(i, j) for j in range(d)] for i in range(d)]

        def step_map(V):
            W = np.zeros_like(V)
            for i in range(d):
                v1, _ = compose_shifted_grid(s1c[i], nshape, dtheta=V,
                                             out_grid=grid_new, tol=params.taylor_tol)
                acc = _realify(v1)
                for j in range(d):
                    v2, _ = compose_shifted_grid(s2c[i][j], nshape, dtheta=V,
                                                 out_grid=grid_new,
                                                 tol=params.taylor_tol)
                    acc = acc + 2.0 * _realify(v2) * grid_new.node_points()[..., j]
                W[..., i] = -acc
            return W

        V, fp_iters, _ = solve_fixed_point(
            step_map, tuple(nshape) + grid_new.shape + (d,))
    else:
        V = np.zeros(tuple(nshape) + grid_new.shape + (d,))
        fp_iters = 0

    rem_field = FourierField.from_grid(rem.reshape(tuple(nshape) + grid_new.shape),
                                       d, s_next, params.K_cap, grid=grid_new)
    proj_res = rem_field.projection_residual
    if nontrivial and rem_field.n_modes:
        vals, e = compose_shifted_grid(rem_field, nshape, dtheta=V,
                                       out_grid=grid_new, tol=params.taylor_tol)
        taylor_errs.append(e)
        final = FourierField.from_grid(vals, d, s_next, params.K_cap, grid=grid_new)
        proj_res = max(proj_res, final.projection_residual)
    else:
        final = rem_field

    # split by Taylor order at rho = 0 ---------------------------------------
    c = final.coeffs
    gaxes = list(range(c.ndim - d, c.ndim))
    W0 = grid_new.interp_weights(np.zeros((1, d)))[0]
    c0 = np.tensordot(c, W0, axes=(gaxes, list(range(d))))
    d1 = [final.derive(f"action_{i}") for i in range(d)]
    c1 = np.stack([np.tensordot(f.coeffs, W0, axes=(gaxes, list(range(d))))
                   for f in d1], axis=-1)
    c2 = np.empty(c0.shape + (d, d), dtype=complex)
    for i in range(d):
        for j in range(d):
            fij = d1[i].derive(f"action_{j}")
            c2[..., i, j] = np.tensordot(fij.coeffs, W0, axes=(gaxes, list(range(d))))
    c2 = 0.5 * (c2 + np.swapaxes(c2, -1, -2))

    R0n = final.replace(coeffs=c0, grid=None, tau=0.0, _canonical=True).prune()
    R1n = final.replace(coeffs=np.moveaxis(c1, -1, 1), grid=None, tau=0.0,
                        vshape=(d,), _canonical=True, enforce_reality=False).prune()
    R2n = final.replace(coeffs=np.moveaxis(0.5 * c2, (-2, -1), (1, 2)), grid=None,
                        tau=0.0, vshape=(d, d), _canonical=True,
                        enforce_reality=False).prune()
    quad_nodes = (c0[..., None] + np.tensordot(c1, rho, axes=([-1], [1]))
                  + np.einsum("pj,mjk,pk->mp", rho, 0.5 * c2, rho))
    ch = (c.reshape(c.shape[0], P) - quad_nodes).reshape(c.shape)
    highn = final.replace(coeffs=ch, _canonical=True).prune()

    C_new = (state.const + _mode_zero(R0)
             + epa * (float(omega @ nu) + float(nu @ Om @ nu)))

    new_state = KamState(
        m=m_next, eps=eps, a=a, omega=omega, Omega=Om_new,
        low=ActionJet(r0=R0n, r1=R1n, r2=R2n), high=highn, const=C_new,
        s=s_next, r=r_next, grid=grid_new, s0=state.s0, r0=state.r0,
        nu_total=state.nu_total + nu,
        changes=state.changes + [KamChange(S0=S0, S1=S1, S2=S2, nu=nu)],
        diagnostics=list(state.diagnostics),
    )
    row = _diag_row(new_state, max(taylor_errs), proj_res, nu)
    row["dOmega"] = float(np.abs(dOm).max(initial=0.0))
    row["fp_iters"] = fp_iters
    new_state.diagnostics.append(row)
    return new_state


def kam_iterate(state, params):
    """Iterate kam_step until the low norm is below tol or max_steps is hit."""
    while state.m < params.max_steps and state.low_norm() > params.tol:
        state = kam_step(state, params)
    return state


# -- invariant torus extraction ------------------------------------------------


@dataclass
class TorusEmbedding:
    """Parametrised torus (phi, t) -> (theta, I) in the base action-angle frame.

    The flow on the parameters is linear: phi advances with ``omega`` (already
    carrying the eps^(-a) factor) and t with unit speed.
    """

    theta_dev: FourierField
    action: FourierField
    omega: np.ndarray

    def angles(self, phi, t):
        phi = np.atleast_2d(np.asarray(phi, dtype=float))
        return phi + np.atleast_2d(self.theta_dev.evaluate(phi, t))

    def actions(self, phi, t):
        phi = np.atleast_2d(np.asarray(phi, dtype=float))
        return np.atleast_2d(self.action.evaluate(phi, t))


def _invert_kam_change(ch, phi, t, rho, tol=1e-13, max_iter=80):
    """Old (theta, I) of points given in the new coordinates of one KAM step."""
    d = phi.shape[1]
    theta = phi.copy()
    for _ in range(max_iter):
        s1 = np.atleast_2d(ch.S1.evaluate(theta, t)) if ch.S1.n_modes else np.zeros_like(phi)
        if ch.S2.n_modes:
            s2 = ch.S2.evaluate(theta, t)
            s2 = s2.reshape(len(theta), d, d)
            s1 = s1 + 2.0 * np.einsum("nij,nj->ni", s2, rho)
        new = phi - s1
        delta = np.abs(new - theta).max(initial=0.0)
        theta = new
        if delta < tol:
            break
    else:
        raise ContractionError("angle inversion of a KAM change did not converge")
    grad = np.zeros_like(phi)
    for i in range(d):
        if ch.S0.n_modes:
            grad[:, i] += ch.S0.derive(f"angle_{i}").evaluate(theta, t)
        if ch.S1.n_modes:
            g1 = np.atleast_2d(ch.S1.derive(f"angle_{i}").evaluate(theta, t))
            grad[:, i] += np.einsum("nj,nj->n", g1, rho)
        if ch.S2.n_modes:
            g2 = ch.S2.derive(f"angle_{i}").evaluate(theta, t).reshape(len(theta), d, d)
            grad[:, i] += np.einsum("nj,njk,nk->n", rho, g2, rho)
    return theta, ch.nu[None, :] + rho + grad


def _invert_nf_change(S, phi, t, rho, tol=1e-13, max_iter=80):
    """Old (theta, I) of points given in the new coordinates of one averaging step."""
    d = phi.shape[1]
    theta = phi.copy()
    sr = [S.derive(f"action_{i}") for i in range(d)]
    st = [S.derive(f"angle_{i}") for i in range(d)]
    for _ in range(max_iter):
        shift = np.stack([f.evaluate(theta, t, rho) for f in sr], axis=-1)
        new = phi - shift
        delta = np.abs(new - theta).max(initial=0.0)
        theta = new
        if delta < tol:
            break
    else:
        raise ContractionError("angle inversion of an averaging change did not converge")
    grad = np.stack([f.evaluate(theta, t, rho) for f in st], axis=-1)
    return theta, rho + grad


def extract_torus(kam_state, form, avg, nf_state, n_phi=32, n_t=32, cutoff=None):
    """Pull the persistent torus rho = 0 back to the base action-angle frame.

    Walks the KAM changes innermost-first, recentres at the matched action I*,
    applies the time-average twist, then unwinds the averaging changes.  The
    embedding is projected once onto a Fourier series over the parameters.
    """
    d = len(kam_state.omega)
    axes = [np.linspace(0, 2 * np.pi, n_phi, endpoint=False) for _ in range(d)]
    taxis = np.linspace(0, 2 * np.pi, n_t, endpoint=False)
    mesh = np.meshgrid(*axes, taxis, indexing="ij")
    phi0 = np.stack([g.ravel() for g in mesh[:d]], axis=-1)   # (P, d)
    tt = mesh[d].ravel()

    theta = phi0.copy()
    rho = np.zeros_like(phi0)
    for ch in reversed(kam_state.changes):
        theta, rho = _invert_kam_change(ch, theta, tt, rho)
    II = form.I_star[None, :] + rho
    if avg.S_tilde.n_modes:
        for i in range(d):
            theta[:, i] += avg.S_tilde.derive(f"action_{i}").evaluate(
                np.zeros_like(theta), tt, II)
    for ch in reversed(nf_state.changes):
        theta, II = _invert_nf_change(ch.S, theta, tt, II)

    gshape = (n_phi,) * d + (n_t,)
    dev = (theta - phi0).reshape(gshape + (d,))
    act = II.reshape(gshape + (d,))
    if cutoff is None:
        # widest representable 1-norm ball; the per-axis Nyquist guard in
        # from_grid trims each direction on its own
        cutoff = sum((g - 1) // 2 for g in gshape)
    s_emb = max(kam_state.s, 1e-6)
    theta_dev = FourierField.from_grid(np.moveaxis(dev, -1, d + 1), d, s_emb,
                                       cutoff, vshape=(d,)).prune(1e-14)
    action = FourierField.from_grid(np.moveaxis(act, -1, d + 1), d, s_emb,
                                    cutoff, vshape=(d,)).prune(1e-14)
    omega_sc = kam_state.eps ** (-kam_state.a) * kam_state.omega
    return TorusEmbedding(theta_dev=theta_dev, action=action, omega=omega_sc)


def invariance_defect(torus, flow, chart, T_check, n_samples=8, seed=0):
    """Largest phase-space distance between flowed and rotated torus points.

    ``chart(theta, I) -> states`` maps a batch of action-angle points to the
    comparison coordinates; ``flow(states, t0, T) -> states`` integrates the
    actual system for a batch of states with per-state start times t0.
    Initial parameters are sampled uniformly with the given seed.  An escape
    during the integration counts as an infinite defect.
    """
    rng = np.random.default_rng(seed)
    d = len(torus.omega)
    phi0 = rng.uniform(0, 2 * np.pi, (n_samples, d))
    t0 = rng.uniform(0, 2 * np.pi, n_samples)
    th0 = torus.angles(phi0, t0)
    I0 = torus.actions(phi0, t0)
    try:
        z1 = flow(chart(th0, I0), t0, float(T_check))
    except EscapeError:
        return float("inf")
    phi1 = phi0 + torus.omega[None, :] * T_check
    zt = chart(torus.angles(phi1, t0 + T_check), torus.actions(phi1, t0 + T_check))
    return float(np.abs(z1 - zt).max(initial=0.0))
