"""Iterative averaging of a quasi-periodically forced near-integrable Hamiltonian.

The input is H(theta, t, I) = eps^(-a) H0(I) + eps^(-b) R(theta, t, I) with
a > b >= 0, analytic in a complex angle strip of width s0 and sampled on
Chebyshev nodes in an action ball of radius tau0.  Each averaging step solves

    dS/dt + eps^(-a) <omega(rho), dS/dtheta> = <R>_theta - R

for the oscillating part of the current remainder, applies the time-dependent
canonical change generated by S (I = rho + dS/dtheta, phi = theta + dS/drho),
and absorbs the angle average into an integrable-plus-time part h(t, I).  The
strip and ball shrink by half each step while the truncation order doubles, so
the angle-dependent remainder contracts geometrically until only the averaged
Hamiltonian eps^(-a) H0 + h(t, I) plus a small remainder is left.

A final time average removes the oscillation of h itself, after which
``locate_expansion_point`` and ``taylor_split`` recentre the system at the
action I* whose corrected frequency matches the target and split the remainder
into a quadratic jet plus a cubic tail, the starting data for the KAM stage.
"""

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .diophantine import DiophantineParams
from .errors import ContractionError, DomainError, SmallDivisorError
from .fourier import ActionGrid, ActionJet, FourierField, compose_shifted_grid
from .util import fast_len


def _realify(vals, tol=1e-10):
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    imag = float(np.abs(vals.imag).max(initial=0.0))
    if imag > tol * scale:
        raise ContractionError(f"composition lost reality (imaginary part {imag:.3e})")
    return vals.real.copy()


class NodeFunction:
    """Smooth function of the action known on a Chebyshev node grid.

    Provides values, gradients, and Hessians anywhere in the node box through
    barycentric interpolation and spectral differentiation.
    """

    def __init__(self, grid, values):
        self.grid = grid
        self.values = np.asarray(values, dtype=float)
        if self.values.shape != grid.shape:
            raise ValueError("node values do not match the grid shape")
        dim = grid.dim
        self._d1 = []
        for j in range(dim):
            self._d1.append(self._apply_diff(self.values, j))
        self._d2 = [[None] * dim for _ in range(dim)]
        for i in range(dim):
            for j in range(i, dim):
                self._d2[i][j] = self._d2[j][i] = self._apply_diff(self._d1[i], j)

    def _apply_diff(self, arr, axis):
        D = self.grid.diff1d
        return np.moveaxis(np.tensordot(arr, D, axes=([axis], [1])), -1, axis)

    def _interp(self, arr, I):
        W = self.grid.interp_weights(np.atleast_2d(np.asarray(I, dtype=float)))
        out = np.tensordot(W, arr, axes=(list(range(1, self.grid.dim + 1)),
                                         list(range(self.grid.dim))))
        return out

    def value(self, I):
        return float(self._interp(self.values, I)[0])

    def grad(self, I):
        return np.array([self._interp(g, I)[0] for g in self._d1])

    def hess(self, I):
        dim = self.grid.dim
        H = np.array([[self._interp(self._d2[i][j], I)[0] for j in range(dim)]
                      for i in range(dim)])
        return 0.5 * (H + H.T)


@dataclass
class HamiltonianSpec:
    """Forced near-integrable system eps^(-a) H0(I) + eps^(-b) R(theta, t, I).

    R is stored unscaled; the eps^(-b) factor is applied when the averaging
    iteration starts.  H0 must expose value/grad/hess (and optionally third);
    its Hessian determinant is checked to stay positive on the action box.
    """

    d: int
    eps: float
    a: float
    b: float
    H0: object
    R: FourierField
    I0: np.ndarray
    s0: float
    tau0: float
    c3: float = 0.0

    def __post_init__(self):
        self.I0 = np.asarray(self.I0, dtype=float)
        if not (self.a > self.b >= 0):
            raise ValueError("need a > b >= 0")
        if not 0 < self.eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        if self.R.d != self.d:
            raise ValueError("perturbation angle dimension does not match d")
        if self.I0.shape != (self.d,):
            raise ValueError("I0 must be a length-d action vector")
        lo = self.I0 - self.tau0
        hi = self.I0 + self.tau0
        self.c3 = float(self.H0.min_hess_det((lo, hi)))
        if self.c3 <= 0:
            raise ValueError(
                f"H0 is degenerate on the action box (min Hessian det {self.c3:.3e})")

    @property
    def eps_a(self):
        return self.eps ** (-self.a)

    def omega(self, I):
        return self.H0.grad(I)


@dataclass
class NormalFormParams:
    """Schedules and truncations of the averaging iteration.

    The analyticity strip and action radius halve each step, s_j = s0 / 2^j,
    tau_j = tau0 / 2^j, while the truncation order doubles up to K_cap.  The
    classical schedule constant A (and the step count it implies) is kept for
    reference via ``classical_m0``; in practice far fewer steps with measured
    norms achieve the advertised contraction, so m0 is set directly.
    """

    dc: DiophantineParams
    m0: int = 3
    K0: int = 12
    K_cap: int = 24
    n_nodes: int = 5
    theta_grid: tuple = None
    taylor_tol: float = 1e-13
    floor_scale: float = 0.5
    A: float = 0.0

    def K_j(self, j):
        return int(min(self.K0 * 2**j, self.K_cap))

    @staticmethod
    def classical_m0(spec, A=None):
        """Step count 2 + floor((b + A)/(a - b)) of the classical schedule."""
        if A is None:
            A = 200.0 * spec.d * (spec.a + spec.b)
        return 2 + int(math.floor((spec.b + A) / (spec.a - spec.b)))

    def nshape(self, d):
        if self.theta_grid is not None:
            return tuple(self.theta_grid)
        n = fast_len(2 * self.K_cap + 1)
        return (n,) * (d + 1)


@dataclass
class NfChange:
    """One canonical change of the averaging iteration, kept for pull-backs."""

    S: FourierField
    grid: ActionGrid
    s: float
    tau: float


@dataclass
class NormalFormState:
    j: int
    h: FourierField
    R: FourierField
    R_plus: FourierField
    grid: ActionGrid
    s: float
    tau: float
    K: int
    changes: list = dc_field(default_factory=list)
    diagnostics: list = dc_field(default_factory=list)

    def angle_norm(self):
        """Weighted norm of the angle-dependent part of the remainder."""
        osc = self.R - self.R.angle_average()
        return osc.norm()


def split_tail(spec, params):
    """Initial state: scale by eps^(-b) and split at the first truncation order."""
    grid0 = ActionGrid(spec.I0, spec.tau0, params.n_nodes)
    R = spec.R
    if R.grid is None:
        R = R.broadcast_action(grid0)
    elif not R.grid.same_as(grid0):
        R = R.restrict_action(grid0)
    W = (R * spec.eps ** (-spec.b)).replace(s=spec.s0, _canonical=True)
    K0 = params.K_j(0)
    state = NormalFormState(
        j=0,
        h=FourierField.zero(spec.d, spec.s0, tau=spec.tau0, cutoff=params.K_cap, grid=grid0),
        R=W.truncate(K0).prune(),
        R_plus=W.tail(K0).prune(),
        grid=grid0,
        s=spec.s0,
        tau=spec.tau0,
        K=K0,
    )
    state.diagnostics.append({
        "j": 0, "h_norm": 0.0, "R_norm": state.R.norm(),
        "R_plus_norm": state.R_plus.norm(), "R_angle_norm": state.angle_norm(),
        "K": K0, "s": spec.s0, "tau": spec.tau0,
        "taylor_err": 0.0, "projection_residual": 0.0, "fp_iters": 0,
    })
    return state


def solve_homological(R, omega_fn, eps, a, dc, include_k0=False, regime="split",
                      floor_scale=0.5):
    """Mode-wise solution S of dS/dt + eps^(-a) <omega, dS/dtheta> = -P R.

    P projects onto the solved modes: k != 0 (default) or all (k, l) != 0 when
    ``include_k0`` is set.  Each divisor eps^(-a) <k, omega> + l is checked
    against ``floor_scale`` times the Diophantine bound of the requested
    regime ('split': first-regime bound with the eps^(-a) factor; 'full': the
    classical bound gamma / (1 + |k|)^(d+1)); a violation raises
    SmallDivisorError.  omega_fn is a callable on actions or a fixed vector.
    """
    modes = R.modes
    k = modes[:, : R.d]
    l = modes[:, -1]
    knorm = np.abs(k).sum(axis=1)
    sel = knorm > 0
    if include_k0:
        sel = (knorm > 0) | (l != 0)
    if not np.any(sel):
        return FourierField.zero(R.d, R.s, tau=R.tau, cutoff=R.cutoff, grid=R.grid,
                                 vshape=R.vshape)
    if callable(omega_fn):
        if R.grid is not None:
            om = np.asarray(omega_fn(R.grid.node_points()), dtype=float)
        else:
            raise ValueError("action-free field needs a fixed frequency vector")
    else:
        om = np.asarray(omega_fn, dtype=float)
    if om.ndim == 1:
        dots = k[sel].astype(float) @ om  # (Ms,)
        extra = ()
    else:
        dots = np.tensordot(k[sel].astype(float), om, axes=([1], [-1]))  # (Ms, *gshape)
        extra = om.shape[:-1]
    delta = eps ** (-a) * dots + l[sel].reshape((-1,) + (1,) * len(extra))

    kn = knorm[sel].astype(float)
    if regime == "split":
        floor = np.where(kn > 0,
                         eps ** (-a) * dc.gamma / np.maximum(kn, 1.0) ** (dc.d + 1),
                         dc.gamma)
    elif regime == "full":
        floor = dc.gamma / (1.0 + kn) ** (dc.d + 1)
    else:
        raise ValueError("regime must be 'split' or 'full'")
    floor = floor_scale * floor
    dmin = np.abs(delta).reshape(delta.shape[0], -1).min(axis=1)
    bad = dmin < floor
    if np.any(bad):
        i = int(np.argmax(floor[bad] / np.maximum(dmin[bad], 1e-300)))
        idx = np.flatnonzero(bad)[i]
        mode = tuple(int(x) for x in modes[sel][idx])
        raise SmallDivisorError(
            f"divisor {dmin[idx]:.6e} below floor {floor[idx]:.6e} at mode {mode}",
            mode=mode, divisor=float(dmin[idx]), floor=float(floor[idx]))

    coeffs = np.zeros_like(R.coeffs)
    shape = (delta.shape[0],) + (1,) * len(R.vshape) + extra
    coeffs[sel] = 1j * R.coeffs[sel] / delta.reshape(shape)
    return R.replace(coeffs=coeffs).prune()


def solve_fixed_point(apply_map, shape, tol=1e-13, max_iter=60, lipschitz_max=0.5):
    """Iterate V <- apply_map(V) from zero until the sup-change stalls below tol.

    Raises ContractionError when the observed contraction factor exceeds
    ``lipschitz_max`` while the iteration is still far from its fixed point.
    Returns (V, n_iterations, last_delta).
    """
    V = np.zeros(shape)
    prev = None
    for it in range(1, max_iter + 1):
        W = apply_map(V)
        delta = float(np.abs(W - V).max(initial=0.0))
        V = W
        scale = max(1.0, float(np.abs(V).max(initial=0.0)))
        if delta <= tol * scale:
            return V, it, delta
        if prev is not None and prev > 0:
            L = delta / prev
            if L > lipschitz_max and delta > 100 * tol * scale:
                raise ContractionError(
                    f"implicit change is not a contraction (observed factor {L:.3f})")
        prev = delta
    raise ContractionError(f"implicit change did not converge in {max_iter} iterations "
                           f"(last change {delta:.3e})")


def canonical_change(S, nshape, out_grid=None, taylor_tol=1e-13, residual_tol=1e-10):
    """Solve the implicit transformation generated by S(theta, t, rho).

    New coordinates satisfy phi = theta + dS/drho and I = rho + dS/dtheta.
    Returns (u, v): FourierFields in (phi, t, rho) with I = rho + u(phi, t, rho)
    and theta = phi + v(phi, t, rho).  The implicit-equation residual is
    verified below ``residual_tol`` on the construction grid.
    """
    if out_grid is None:
        out_grid = S.grid
    d = S.d
    gshape = out_grid.shape
    srho = [S.derive(f"action_{i}") for i in range(d)]
    stheta = [S.derive(f"angle_{i}") for i in range(d)]

    def step(V):
        W = np.empty_like(V)
        for i in range(d):
            vals, _ = compose_shifted_grid(srho[i], nshape, dtheta=V,
                                           out_grid=out_grid, tol=taylor_tol)
            W[..., i] = -_realify(vals)
        return W

    V, iters, _ = solve_fixed_point(step, tuple(nshape) + gshape + (d,))
    res = float(np.abs(V - step(V)).max(initial=0.0))
    scale = max(1.0, float(np.abs(V).max(initial=0.0)))
    if res > residual_tol * scale:
        raise ContractionError(f"implicit angle equation residual {res:.3e}")
    U = np.empty_like(V)
    for i in range(d):
        vals, _ = compose_shifted_grid(stheta[i], nshape, dtheta=V,
                                       out_grid=out_grid, tol=taylor_tol)
        U[..., i] = _realify(vals)
    ax = len(nshape)
    cutoff = min(2 * S.cutoff, (min(nshape) - 1) // 2)
    u = FourierField.from_grid(np.moveaxis(U, -1, ax), d, S.s, cutoff,
                               grid=out_grid, vshape=(d,)).prune()
    v = FourierField.from_grid(np.moveaxis(V, -1, ax), d, S.s, cutoff,
                               grid=out_grid, vshape=(d,)).prune()
    u.fp_iters = v.fp_iters = iters
    return u, v


def push_forward(state, S, spec, params):
    """Apply the canonical change generated by S and re-split the remainder.

    The transformed Hamiltonian is assembled in mixed variables on a uniform
    (theta, t) grid crossed with the shrunk action ball, composed with the
    implicit angle change, projected back onto modes, and split into the new
    averaged part h, the truncated remainder R, and the tail R_plus.
    """
    d = spec.d
    j_next = state.j + 1
    s_next = spec.s0 * 0.5 ** j_next
    tau_next = spec.tau0 * 0.5 ** j_next
    grid_new = ActionGrid(spec.I0, tau_next, params.n_nodes)
    nshape = params.nshape(d)
    epa = spec.eps_a
    gshape = grid_new.shape
    taylor_errs = [0.0]

    if S.n_modes:
        srho = [S.derive(f"action_{i}") for i in range(d)]

        def step(V):
            W = np.empty_like(V)
            for i in range(d):
                vals, _ = compose_shifted_grid(srho[i], nshape, dtheta=V,
                                               out_grid=grid_new, tol=params.taylor_tol)
                W[..., i] = -_realify(vals)
            return W

        V, fp_iters, _ = solve_fixed_point(step, tuple(nshape) + gshape + (d,))
        U = np.empty(V.shape)
        for i in range(d):
            vals, e = compose_shifted_grid(S.derive(f"angle_{i}"), nshape, dtheta=V,
                                           out_grid=grid_new, tol=params.taylor_tol)
            U[..., i] = _realify(vals)
            taylor_errs.append(e)
    else:
        V = U = np.zeros(tuple(nshape) + gshape + (d,))
        fp_iters = 0

    tot = np.zeros(tuple(nshape) + gshape, dtype=complex)
    nodes = grid_new.node_points()
    pts = nodes[(None,) * (d + 1)] + U
    tot += epa * spec.H0.value(pts)
    if state.h.n_modes:
        vals, e = compose_shifted_grid(state.h, nshape, drho=U, out_grid=grid_new,
                                       tol=params.taylor_tol)
        tot += vals
        taylor_errs.append(e)
    for piece in (state.R, state.R_plus):
        if piece.n_modes:
            vals, e = compose_shifted_grid(piece, nshape, dtheta=V, drho=U,
                                           out_grid=grid_new, tol=params.taylor_tol)
            tot += vals
            taylor_errs.append(e)
    if S.n_modes:
        vals, e = compose_shifted_grid(S.derive("time"), nshape, dtheta=V,
                                       out_grid=grid_new, tol=params.taylor_tol)
        tot += vals
        taylor_errs.append(e)

    h_next = (state.h + state.R.angle_average().truncate(params.K_cap)) \
        .restrict_action(grid_new).replace(s=s_next, tau=tau_next, _canonical=True).prune()
    tot -= epa * spec.H0.value(nodes)[(None,) * (d + 1)]
    if h_next.n_modes:
        tot -= h_next.to_grid(nshape)

    Rt = FourierField.from_grid(tot, d, s_next, params.K_cap, grid=grid_new,
                                tau=tau_next)
    K_next = params.K_j(j_next)
    new_state = NormalFormState(
        j=j_next,
        h=h_next,
        R=Rt.truncate(K_next).prune(),
        R_plus=Rt.tail(K_next).prune(),
        grid=grid_new,
        s=s_next,
        tau=tau_next,
        K=K_next,
        changes=state.changes + [NfChange(S=S, grid=state.grid, s=state.s, tau=state.tau)],
        diagnostics=list(state.diagnostics),
    )
    new_state.diagnostics.append({
        "j": j_next, "h_norm": h_next.norm(), "R_norm": new_state.R.norm(),
        "R_plus_norm": new_state.R_plus.norm(), "R_angle_norm": new_state.angle_norm(),
        "K": K_next, "s": s_next, "tau": tau_next,
        "taylor_err": max(taylor_errs), "projection_residual": Rt.projection_residual,
        "fp_iters": fp_iters,
    })
    return new_state


def run_normal_form(spec, params):
    """Run m0 averaging steps; returns the final NormalFormState."""
    state = split_tail(spec, params)
    for _ in range(params.m0):
        S = solve_homological(state.R, spec.omega, spec.eps, spec.a, params.dc,
                              include_k0=False, regime="split",
                              floor_scale=params.floor_scale)
        state = push_forward(state, S, spec, params)
    return state


def twist_compose(field, delta_field, tol=1e-12, max_t=4096):
    """Compose a field with a time/action-dependent angle shift, exactly in theta.

    Returns the field of (theta, t, I) -> field(theta + Delta(t, I), t, I)
    where Delta is the vector NodeField ``delta_field`` (k = 0 modes only).
    Angle modes transform individually, c_k(t, I) -> c_k(t, I) e^{i<k, Delta>},
    so only the time axis needs resampling; the grid is doubled until the
    spilled top-band coefficient mass is below ``tol``.
    """
    if field.n_modes == 0:
        return field
    if np.any(delta_field.modes[:, : field.d] != 0):
        raise ValueError("angle shift must be independent of the angles")
    gshape = field.grid.shape if field.grid is not None else ()
    l_ext = int(np.abs(field.modes[:, -1]).max(initial=0))
    dl_ext = int(np.abs(delta_field.modes[:, -1]).max(initial=0)) if delta_field.n_modes else 0
    k_max = int(np.abs(field.modes[:, : field.d]).sum(axis=1).max(initial=0))
    dscale = delta_field.norm() if delta_field.n_modes else 0.0
    T = fast_len(max(16, 2 * (l_ext + dl_ext * (1 + int(k_max * dscale))) + 1))

    kurows, inv = np.unique(field.modes[:, : field.d], axis=0, return_inverse=True)
    while True:
        tgrid = (1,) * field.d + (T,)
        if delta_field.n_modes:
            # to_grid lays out (*nshape, *vshape, *gshape); move the vector
            # axis last so the tensordot below contracts over components
            arr = delta_field.to_grid(tgrid).real.reshape((T, field.d) + gshape)
            dvals = np.moveaxis(arr, 1, -1)
        else:
            dvals = np.zeros((T,) + gshape + (field.d,))
        out = {}
        spill = 0.0
        total = 0.0
        for gi in range(kurows.shape[0]):
            rows = np.flatnonzero(inv == gi)
            kvec = kurows[gi]
            sig = np.zeros((T,) + field.vshape + gshape, dtype=complex)
            ls = field.modes[rows, -1]
            sig[np.mod(ls, T)] = field.coeffs[rows]
            A = np.fft.ifft(sig, axis=0) * T
            phase = np.exp(1j * np.tensordot(dvals, kvec.astype(float), axes=([-1], [0])))
            ph = phase.reshape((T,) + (1,) * len(field.vshape) + gshape)
            B = np.fft.fft(A * ph, axis=0) / T
            mags = np.abs(B).reshape(T, -1).max(axis=1)
            total += float(mags.sum())
            band = T // 4
            lo = np.minimum(np.arange(T), T - np.arange(T))
            spill += float(mags[lo > band].sum())
            out[gi] = B
        if total == 0 or spill / max(total, 1e-300) < tol or T >= max_t:
            if total > 0 and spill / max(total, 1e-300) >= tol:
                from .errors import ModeOverflowError
                raise ModeOverflowError(
                    f"angle twist did not band-limit at {T} time samples",
                    dropped_mass=spill, total_mass=total)
            break
        T = fast_len(2 * T)

    band = T // 4
    modes = []
    coeffs = []
    for gi in range(kurows.shape[0]):
        B = out[gi]
        for idx in range(T):
            l = idx if idx <= T // 2 else idx - T
            if abs(l) > band:
                continue
            c = B[idx]
            if np.abs(c).max(initial=0.0) == 0.0:
                continue
            modes.append(np.concatenate([kurows[gi], [l]]))
            coeffs.append(c)
    modes = np.array(modes, dtype=np.int64).reshape(-1, field.d + 1)
    coeffs = np.array(coeffs, dtype=complex)
    cutoff = max(field.cutoff, int(np.abs(modes).sum(axis=1).max(initial=0)))
    return FourierField(field.d, modes, coeffs, field.s, field.tau, cutoff,
                        grid=field.grid, vshape=field.vshape).prune()


@dataclass
class AveragedResult:
    """Output of the final time average: h split into its mean and a primitive."""

    h_bar: FourierField        # (0, 0) mode: averaged correction of the action part
    S_tilde: FourierField      # zero-mean primitive of <h> - h (k = 0, l != 0 modes)
    R_breve: FourierField      # remainder after the angle twist theta -> theta + dS/dI
    grid: ActionGrid
    s: float
    tau: float

    def h_bar_fn(self):
        if self.h_bar.n_modes == 0:
            return NodeFunction(self.grid, np.zeros(self.grid.shape))
        return NodeFunction(self.grid, np.real(self.h_bar.coeffs[0]))


def time_average_transform(state, spec, tol=1e-12):
    """Remove the oscillating part of h by the exact change theta -> theta + dS/dI.

    S(t, I) is the zero-mean primitive in t of <h> - h; the transformed
    Hamiltonian is eps^(-a) H0(I) + <h>(I) + R_breve(theta, t, I) where
    R_breve(theta, t, I) = R(theta + dS/dI(t, I), t, I): the oscillation of h
    cancels exactly against dS/dt, and the angle shift is computed without
    truncation in theta by twisting each angle mode.
    """
    h = state.h
    hbar = h.time_average()
    osc = h - hbar
    osc = osc.prune()
    if osc.n_modes:
        ls = osc.modes[:, -1]
        if np.any(ls == 0):
            raise AssertionError("oscillating part retained a time average")
        shape = (osc.n_modes,) + (1,) * (osc.coeffs.ndim - 1)
        S_tilde = osc.replace(coeffs=osc.coeffs / (1j * ls.reshape(shape)),
                              _canonical=True)
    else:
        S_tilde = FourierField.zero(spec.d, state.s, tau=state.tau, cutoff=h.cutoff,
                                    grid=state.grid)
    R_tilde = (state.R + state.R_plus).prune()
    if S_tilde.n_modes:
        delta = S_tilde.grad_action()
        R_breve = twist_compose(R_tilde, delta, tol=tol)
    else:
        R_breve = R_tilde
    return AveragedResult(h_bar=hbar, S_tilde=S_tilde, R_breve=R_breve,
                          grid=state.grid, s=state.s, tau=state.tau)


def locate_expansion_point(avg, spec, omega_target=None, tol=1e-12, max_iter=50):
    """Newton-solve grad H0(I) + eps^a grad <h>(I) = omega_target inside the ball.

    Returns (I_star, residual_vector).  DomainError if an iterate leaves the
    node box of the averaged data.
    """
    if omega_target is None:
        omega_target = spec.omega(spec.I0)
    omega_target = np.asarray(omega_target, dtype=float)
    hfn = avg.h_bar_fn()
    ea = spec.eps ** spec.a
    lo = avg.grid.center - avg.grid.tau
    hi = avg.grid.center + avg.grid.tau
    I = spec.I0.astype(float).copy()
    for _ in range(max_iter):
        if np.any(I < lo - 1e-12) or np.any(I > hi + 1e-12):
            raise DomainError(
                f"frequency matching left the averaged action ball at I = {I}")
        g = spec.H0.grad(I) + ea * hfn.grad(I) - omega_target
        if float(np.abs(g).max()) <= tol:
            return I, g
        J = spec.H0.hess(I) + ea * hfn.hess(I)
        I = I - np.linalg.solve(J, g)
    g = spec.H0.grad(I) + ea * hfn.grad(I) - omega_target
    if float(np.abs(g).max()) > tol:
        raise ContractionError(
            f"frequency matching stalled with residual {float(np.abs(g).max()):.3e}")
    return I, g


@dataclass
class AveragedForm:
    """KAM-ready data: quadratic model at I* plus sampled cubic remainder.

    The Hamiltonian equals const + eps^(-a)(<omega, rho> + <Omega rho, rho>)
    + R0 + <R1, rho> + <R2 rho, rho> + high(theta, t, rho) with rho = I - I*,
    exactly (the frequency-matching residual is folded into R1).
    """

    I_star: np.ndarray
    Omega: np.ndarray
    omega: np.ndarray
    const: float
    low: ActionJet
    high: FourierField
    grid: ActionGrid
    s: float
    r0: float
    eps: float
    a: float
    E: float = 0.0


def taylor_split(avg, spec, I_star, r0, omega_target=None, kam_nodes=5, s=None, E=0.0):
    """Expand the averaged Hamiltonian at I* and split off the cubic remainder.

    The remainder field is re-expanded mode by mode: each coefficient c(I) on
    the averaging nodes contributes c(I*) to R0, its node-gradient to R1, half
    its node-Hessian to R2, and c(I* + rho) minus that quadratic jet, sampled
    on a fresh node ball of radius r0 around zero, to the cubic tail.  The
    integrable part contributes its own exact cubic tail on the same nodes.
    """
    d = spec.d
    if omega_target is None:
        omega_target = spec.omega(spec.I0)
    omega_target = np.asarray(omega_target, dtype=float)
    if s is None:
        s = avg.s
    ea = spec.eps ** spec.a
    epa = spec.eps ** (-spec.a)
    hfn = avg.h_bar_fn()
    Omega_full = spec.H0.hess(I_star) + ea * hfn.hess(I_star)
    # quadratic form <Omega rho, rho> must reproduce the Taylor term rho^T H rho / 2
    Omega = 0.25 * (Omega_full + Omega_full.T)
    grad_full = spec.H0.grad(I_star) + ea * hfn.grad(I_star)
    delta = grad_full - omega_target
    const = epa * (spec.H0.value(I_star) + ea * hfn.value(I_star))

    kgrid = ActionGrid(np.zeros(d), r0, kam_nodes)
    rho = kgrid.node_points().reshape(-1, d)  # (N, d)
    N = rho.shape[0]

    R = avg.R_breve
    if R.grid is None:
        R = R.broadcast_action(avg.grid)
    c0 = R.interp_action(I_star[None, :])[..., 0]                    # (M,)
    grads = [R.derive(f"action_{i}") for i in range(d)]
    c1 = np.stack([g.interp_action(I_star[None, :])[..., 0] for g in grads], axis=-1)  # (M, d)
    c2 = np.empty(c0.shape + (d, d), dtype=complex)
    for i in range(d):
        for jj in range(d):
            gij = grads[i].derive(f"action_{jj}")
            c2[..., i, jj] = gij.interp_action(I_star[None, :])[..., 0]
    c2 = 0.5 * (c2 + np.swapaxes(c2, -1, -2))

    R0 = R.replace(coeffs=c0, grid=None, tau=0.0, s=s, _canonical=True).prune()
    R1c = c1 + 0.0j
    R1 = R.replace(coeffs=np.moveaxis(R1c, -1, 1), grid=None, tau=0.0, s=s,
                   vshape=(d,), _canonical=True, enforce_reality=False).prune()
    extra = FourierField.from_modes(d, {(0,) * (d + 1): epa * delta}, s, vshape=(d,))
    R1 = (R1 + extra).prune()
    R2 = R.replace(coeffs=np.moveaxis(0.5 * c2, (-2, -1), (1, 2)), grid=None, tau=0.0,
                   s=s, vshape=(d, d), _canonical=True, enforce_reality=False).prune()

    # cubic tail of the remainder, mode by mode
    cI = R.interp_action(I_star[None, :] + rho)                      # (M, N)
    quad = (c0[..., None] + np.tensordot(c1, rho, axes=([-1], [1]))
            + np.einsum("nj,mjk,nk->mn", rho, 0.5 * c2, rho))
    ch = (cI - quad).reshape(R.coeffs.shape[:1] + kgrid.shape)
    high = FourierField(d, R.modes.copy(), ch, s, kgrid.tau, R.cutoff, grid=kgrid).prune()

    # cubic tail of the integrable part (theta-free)
    pts = I_star[None, :] + rho
    g0 = np.array([epa * (spec.H0.value(p) + ea * hfn.value(p)) for p in pts])
    taylor0 = (const + epa * (rho @ grad_full)
               + epa * np.einsum("nj,jk,nk->n", rho, Omega, rho))
    tail0 = (g0 - taylor0).reshape(kgrid.shape)
    zero_mode = FourierField.from_modes(d, {(0,) * (d + 1): 0.0}, s, grid=kgrid)
    zc = np.zeros((1,) + kgrid.shape, dtype=complex)
    zc[0] = tail0
    high = (high + zero_mode.replace(coeffs=zc, _canonical=True)).prune()

    return AveragedForm(
        I_star=np.asarray(I_star, dtype=float), Omega=Omega, omega=omega_target,
        const=const, low=ActionJet(r0=R0, r1=R1, r2=R2), high=high, grid=kgrid,
        s=s, r0=float(r0), eps=spec.eps, a=spec.a, E=E,
    )
