"""Networks of periodically forced Duffing oscillators and their scaled Hamiltonian form.

The original system is x_j'' + x_j^(2n+1) + dF/dx_j = 0 with a coupling
potential F(x, t) = sum_alpha P_alpha(t) x^alpha, each P_alpha a trigonometric
polynomial with period 2*pi.  Large amplitudes are handled through the scaling
x = X / A, y = X' / A^(n+1), which turns the dynamics into a Hamiltonian
eps^(-a) H0(I) + eps^(-b) R(theta, t, I) with eps = 1/A, a = n, b = n - 1.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EscapeError
from .fourier import ActionGrid, FourierField
from .oscillator import YOSHIDA6, ActionAngleMap
from .util import write_csv


class DuffingNetwork:
    """Coupled Duffing oscillators with a time-periodic polynomial coupling potential.

    Parameters
    ----------
    m : int
        Number of oscillators.
    n : int
        Nonlinearity exponent; the restoring force is x^(2n+1).
    terms : dict
        Maps a degree multi-index alpha (tuple of m non-negative ints with
        |alpha|_1 <= 2n+1) to the coefficient P_alpha(t), given either as a
        {l: complex} mapping of time modes or as a d=0 FourierField.
    """

    def __init__(self, m, n, terms=None):
        self.m = int(m)
        self.n = int(n)
        if self.m < 1 or self.n < 0:
            raise ValueError("need m >= 1 oscillators and n >= 0")
        self.terms = {}
        for alpha, p in (terms or {}).items():
            alpha = tuple(int(a) for a in alpha)
            if len(alpha) != self.m or min(alpha) < 0:
                raise ValueError(f"bad multi-index {alpha}")
            if sum(alpha) > 2 * self.n + 1:
                raise ValueError(f"|alpha| = {sum(alpha)} exceeds 2n+1 = {2 * self.n + 1}")
            if isinstance(p, FourierField):
                p = {int(mode[-1]): complex(c) for mode, c in zip(p.modes, p.coeffs)}
            self.terms[alpha] = {int(l): complex(c) for l, c in p.items()}
        # precomputed arrays for force evaluation
        self._alphas = np.array(sorted(self.terms), dtype=np.int64).reshape(-1, self.m)
        self._pmodes = []
        for alpha in map(tuple, self._alphas):
            items = sorted(self.terms[alpha].items())
            ls = np.array([l for l, _ in items], dtype=float)
            cs = np.array([c for _, c in items], dtype=complex)
            self._pmodes.append((ls, cs))

    def coefficient(self, alpha, t):
        """P_alpha at times t (real part of the stored mode sum)."""
        idx = list(map(tuple, self._alphas)).index(tuple(alpha))
        ls, cs = self._pmodes[idx]
        t = np.asarray(t, dtype=float)
        return (np.exp(1j * np.multiply.outer(t, ls)) @ cs).real

    def potential(self, x, t):
        """F(x, t) for x of shape (..., m) and matching t."""
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        out = np.zeros(np.broadcast_shapes(x.shape[:-1], t.shape))
        for alpha, (ls, cs) in zip(self._alphas, self._pmodes):
            P = (np.exp(1j * np.multiply.outer(t, ls)) @ cs).real
            out = out + P * np.prod(x**alpha, axis=-1)
        return out

    def potential_gradient(self, x, t):
        """dF/dx at x of shape (..., m)."""
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        out = np.zeros(np.broadcast_shapes(x.shape[:-1], t.shape) + (self.m,))
        for alpha, (ls, cs) in zip(self._alphas, self._pmodes):
            P = (np.exp(1j * np.multiply.outer(t, ls)) @ cs).real
            for j in range(self.m):
                if alpha[j] == 0:
                    continue
                ae = alpha.copy()
                ae[j] -= 1
                out[..., j] += P * alpha[j] * np.prod(x**ae, axis=-1)
        return out

    def to_json_dict(self):
        from .util import fmt_float
        terms = []
        for alpha in sorted(self.terms):
            modes = [
                {"l": l, "re": fmt_float(c.real), "im": fmt_float(c.imag)}
                for l, c in sorted(self.terms[alpha].items())
            ]
            terms.append({"alpha": list(alpha), "modes": modes})
        return {"m": self.m, "n": self.n, "terms": terms}

    @classmethod
    def from_json_dict(cls, obj):
        terms = {}
        for trm in obj["terms"]:
            terms[tuple(trm["alpha"])] = {
                int(md["l"]): float(md["re"]) + 1j * float(md["im"]) for md in trm["modes"]
            }
        return cls(int(obj["m"]), int(obj["n"]), terms)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


@dataclass
class ScaledSystem:
    """A Duffing network viewed at amplitude scale A > 1.

    eps = 1/A, and the scaled Hamiltonian is eps^(-a) H0(I) + eps^(-b) R with
    a = n and b = n - 1; the reduction needs n >= 1 (n = 0 has no twist).
    """

    net: DuffingNetwork
    A: float

    def __post_init__(self):
        if self.A <= 1:
            raise ValueError("amplitude scale A must exceed 1")
        if self.net.n < 1:
            raise ValueError("the scaled reduction requires n >= 1")

    @property
    def eps(self):
        return 1.0 / self.A

    @property
    def a(self):
        return self.net.n

    @property
    def b(self):
        return self.net.n - 1

    def to_original(self, x_scaled, y_scaled):
        """Map scaled phase-space points to original (X, X')."""
        n = self.net.n
        return self.A * np.asarray(x_scaled), self.A ** (n + 1) * np.asarray(y_scaled)

    def to_scaled(self, X, V):
        n = self.net.n
        return np.asarray(X) / self.A, np.asarray(V) / self.A ** (n + 1)


def vector_field(net, state, t):
    """First-order right-hand side in original coordinates; state = (x, x')."""
    state = np.asarray(state, dtype=float)
    m = net.m
    x, v = state[:m], state[m:]
    acc = -x ** (2 * net.n + 1) - net.potential_gradient(x, t)
    return np.concatenate([v, acc])


@dataclass
class Trajectory:
    """Sampled trajectory in original coordinates."""

    t: np.ndarray
    x: np.ndarray
    v: np.ndarray
    escaped: bool = False

    def to_csv(self, path, comment=None):
        m = self.x.shape[1]
        cols = ["t"] + [f"x_{j + 1}" for j in range(m)] + [f"v_{j + 1}" for j in range(m)]
        rows = [
            [self.t[i]] + list(self.x[i]) + list(self.v[i]) for i in range(self.t.size)
        ]
        write_csv(path, cols, rows, comment=comment)


def integrate(net, x0, v0, t0, T, h, sample_every=1, escape=1e8):
    """Integrate the original network with a 6th-order time-extended splitting.

    The kinetic/potential split alternates drifts (x += h v, t += h) and kicks
    (v += h * force(x, t)) with Yoshida-6 weights; kicks of adjacent stages are
    merged.  Raises EscapeError when |x|_inf exceeds ``escape``.

    Batches are supported: x0 and v0 may have shape (..., m) with t0 scalar or
    shaped like the leading dimensions, in which case every orbit advances in
    lockstep and the sampled arrays keep the batch axes.
    """
    m = net.m
    x = np.array(x0, dtype=float).copy()
    v = np.array(v0, dtype=float).copy()
    t = np.array(t0, dtype=float)
    if t.shape not in (x.shape[:-1], ()):
        raise ValueError("t0 must be scalar or match the batch shape")
    nsteps = int(round(T / h))
    p = 2 * net.n + 1
    has_coupling = len(net.terms) > 0
    # merged kick weights: leading half-stage, interior sums, trailing half-stage
    kick_w = np.empty(len(YOSHIDA6) + 1)
    kick_w[0] = 0.5 * YOSHIDA6[0]
    kick_w[1:-1] = 0.5 * (YOSHIDA6[:-1] + YOSHIDA6[1:])
    kick_w[-1] = 0.5 * YOSHIDA6[-1]
    drift_w = YOSHIDA6

    n_samples = nsteps // sample_every + 1
    ts = np.empty((n_samples,) + t.shape)
    xs = np.empty((n_samples,) + x.shape)
    vs = np.empty((n_samples,) + v.shape)
    ts[0], xs[0], vs[0] = t, x, v
    ptr = 1

    def force(x, t):
        f = -(x**p)
        if has_coupling:
            f -= net.potential_gradient(x, t)
        return f

    for step in range(nsteps):
        v += (kick_w[0] * h) * force(x, t)
        for i in range(len(drift_w)):
            dt = drift_w[i] * h
            x += dt * v
            t += dt
            v += (kick_w[i + 1] * h) * force(x, t)
        if np.abs(x).max() > escape:
            raise EscapeError(f"trajectory escaped at t = {np.max(t):.6g}")
        if (step + 1) % sample_every == 0:
            ts[ptr], xs[ptr], vs[ptr] = t, x, v
            ptr += 1
    return Trajectory(ts[:ptr], xs[:ptr], vs[:ptr])


def to_hamiltonian_spec(sys, aa_map, center, tau0, n_nodes=5, s0=0.4, K0=24,
                        base_grid=64, alias_tol=1e-10):
    """Project the scaled perturbation onto a Fourier field over action nodes.

    Returns a HamiltonianSpec for H = eps^(-a) H0(I) + eps^(-b) R(theta, t, I)
    with R = A^(-(2n+1)) F(A x(theta, I), t) sampled on a (theta, t) grid times
    a Chebyshev action grid centered at ``center`` with radius ``tau0``.  The
    grid is doubled until the estimated aliasing mass falls below ``alias_tol``.
    """
    from .normal_form import HamiltonianSpec

    net, A = sys.net, sys.A
    m, n = net.m, net.n
    grid = ActionGrid(center, tau0, n=n_nodes)
    nodes = grid.node_points().reshape(-1, m)
    scale = A ** (-(2 * n + 1))

    N = int(base_grid)
    while True:
        nshape = (N,) * m + (N,)
        th1 = 2.0 * np.pi * np.arange(N) / N
        tgrid = 2.0 * np.pi * np.arange(N) / N
        u_th, _ = aa_map.orbit.eval_angle(th1)  # (N,)
        vals = np.empty(nshape + (nodes.shape[0],))
        xfac = (aa_map.c * nodes) ** aa_map.alpha  # (n_nodes^m, m)
        for c_idx in range(nodes.shape[0]):
            # x_j(theta_j) on the angle grid, for this action node
            xs = [A * xfac[c_idx, j] * u_th for j in range(m)]
            acc = np.zeros(nshape)
            for alpha, (ls, cs) in zip(net._alphas, net._pmodes):
                P = (np.exp(1j * np.multiply.outer(tgrid, ls)) @ cs).real  # (N,)
                mono = np.ones((N,) * m)
                for j in range(m):
                    shape = [1] * m
                    shape[j] = N
                    mono = mono * (xs[j] ** alpha[j]).reshape(shape)
                acc += mono[..., None] * P
            vals[..., c_idx] = acc * scale
        R = FourierField.from_grid(
            vals.reshape(nshape + grid.shape), m, s0, min(K0, (N - 1) // 2),
            grid=grid, tau=tau0)
        # aliasing proxy: relative coefficient mass in the top octave of the grid
        if R.n_modes:
            top = np.abs(R.modes).max(axis=1) > N // 4
            mass = np.abs(R.coeffs).reshape(R.n_modes, -1).max(axis=1)
            alias = float(mass[top].sum() / mass.sum()) if mass.sum() > 0 else 0.0
        else:
            alias = 0.0
        if alias <= alias_tol or N >= 8 * base_grid:
            break
        N *= 2

    h0 = aa_map.h0()
    return HamiltonianSpec(
        d=m, eps=sys.eps, a=float(sys.a), b=float(sys.b), H0=h0, R=R,
        I0=np.asarray(center, dtype=float), s0=float(s0), tau0=float(tau0))


def stability_metrics(traj, sys, aa_map):
    """Sup norm, per-oscillator action variation, and escape flag for a trajectory."""
    sup = float((np.abs(traj.x).sum(axis=1) + np.abs(traj.v).sum(axis=1)).max())
    xs, ys = sys.to_scaled(traj.x, traj.v)
    N = xs.shape[0]
    I_all = np.empty_like(xs)
    chunk = 4096
    for lo in range(0, N, chunk):
        hi = min(N, lo + chunk)
        _, I_all[lo:hi] = aa_map.from_cartesian(xs[lo:hi], ys[lo:hi])
    dev = float(np.abs(I_all - I_all[0]).max())
    return {
        "sup_norm": sup,
        "action_variation": dev,
        "escaped": bool(traj.escaped),
        "actions_first": I_all[0],
        "actions": I_all,
    }


def rotation_vector(traj, sys, aa_map):
    """Average angular velocities of the chart angles along a trajectory.

    Unwraps theta_j(t) in the scaled chart and fits a line; for F = 0 this
    recovers eps^(-a) * dH0/dI at the orbit's actions.
    """
    xs, ys = sys.to_scaled(traj.x, traj.v)
    N = xs.shape[0]
    th_all = np.empty_like(xs)
    chunk = 4096
    for lo in range(0, N, chunk):
        hi = min(N, lo + chunk)
        th_all[lo:hi], _ = aa_map.from_cartesian(xs[lo:hi], ys[lo:hi])
    th_un = np.unwrap(th_all, axis=0)
    slopes = np.polyfit(traj.t, th_un, 1)[0]
    return np.atleast_1d(slopes)
