"""Sparse Fourier fields on the (angle, time) torus with sampled action dependence.

A field f(theta, t, I) is stored as a sparse collection of modes (k, l),
k in Z^d, l in Z, with coefficients that are either plain complex numbers
(action-independent) or arrays of values on a Chebyshev tensor grid over an
action box.  The basis is exp(i(<k, theta> + l t)); angles and time are both
2*pi-periodic.  Fields representing real functions keep conjugate symmetry
f_hat(-k,-l) = conj(f_hat(k,l)) enforced at construction.
"""

import functools
import json
from dataclasses import dataclass

import numpy as np

from .errors import ModeOverflowError, RealityError
from .util import fast_len, fftn, fmt_float, ifftn

# Relative drift scales like roundoff times the cancellation ratio of the
# assembled grid values, so small remainders extracted from O(1) sums sit
# well above machine epsilon; genuine symmetry bugs show up at O(1).
REALITY_TOL = 1e-8
PRUNE_TOL = 1e-15


@functools.lru_cache(maxsize=64)
def ball_modes(d, K):
    """All modes (k_1..k_d, l) with |k|_1 + |l| <= K, in canonical order."""
    rng = np.arange(-K, K + 1)
    grids = np.meshgrid(*([rng] * (d + 1)), indexing="ij")
    modes = np.stack([g.ravel() for g in grids], axis=1)
    modes = modes[np.abs(modes).sum(axis=1) <= K]
    order = np.lexsort(modes.T[::-1])
    out = modes[order]
    out.setflags(write=False)
    return out


def _canonical_order(modes):
    return np.lexsort(modes.T[::-1])


class ActionGrid:
    """Chebyshev-Gauss-Lobatto tensor grid on the box {|I - center|_inf <= tau}.

    Per-mode coefficient arrays carry one trailing axis of length ``n`` per
    action dimension; evaluation between nodes uses barycentric interpolation
    and derivatives use the spectral differentiation matrix.
    """

    def __init__(self, center, tau, n=5):
        self.center = np.atleast_1d(np.asarray(center, dtype=float)).copy()
        self.center.setflags(write=False)
        self.dim = self.center.size
        self.tau = float(tau)
        self.n = int(n)
        if self.n < 2:
            raise ValueError("need at least 2 nodes per axis")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        j = np.arange(self.n)
        self._xi = -np.cos(np.pi * j / (self.n - 1))  # ascending on [-1, 1]
        self.shape = (self.n,) * self.dim

    def nodes1d(self, axis):
        return self.center[axis] + self.tau * self._xi

    def node_points(self):
        """All tensor nodes as an array of shape (*grid.shape, dim)."""
        axes = [self.nodes1d(j) for j in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def same_as(self, other):
        return (
            other is not None
            and self.dim == other.dim
            and self.n == other.n
            and abs(self.tau - other.tau) <= 1e-15 * max(1.0, abs(self.tau))
            and np.allclose(self.center, other.center, rtol=0, atol=1e-15)
        )

    @functools.cached_property
    def diff1d(self):
        """Differentiation matrix for values at the 1-d nodes (already scaled by 1/tau)."""
        n, xi = self.n, self._xi
        c = np.ones(n)
        c[0] = c[-1] = 2.0
        sign = (-1.0) ** np.arange(n)
        cs = c * sign
        dx = xi[:, None] - xi[None, :]
        np.fill_diagonal(dx, 1.0)
        D = (cs[:, None] / cs[None, :]) / dx
        np.fill_diagonal(D, 0.0)
        np.fill_diagonal(D, -D.sum(axis=1))
        return D / self.tau

    def interp_matrix(self, pts, axis):
        """Barycentric interpolation matrix: rows map node values to values at pts."""
        x = np.atleast_1d(np.asarray(pts, dtype=float))
        xn = self.nodes1d(axis)
        n = self.n
        w = (-1.0) ** np.arange(n)
        w[0] *= 0.5
        w[-1] *= 0.5
        diff = x[:, None] - xn[None, :]
        exact = np.abs(diff) < 1e-14 * max(self.tau, 1.0)
        diff_safe = np.where(exact, 1.0, diff)
        terms = w[None, :] / diff_safe
        W = terms / terms.sum(axis=1, keepdims=True)
        hit = exact.any(axis=1)
        if np.any(hit):
            W[hit] = 0.0
            W[exact] = 1.0
        return W

    def interp_weights(self, points):
        """Tensor interpolation weights for points (N, dim) -> (N, *grid.shape)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        WW = self.interp_matrix(pts[:, 0], 0)
        for j in range(1, self.dim):
            Wj = self.interp_matrix(pts[:, j], j)
            WW = WW[..., None] * Wj.reshape(Wj.shape[0], *([1] * j), self.n)
        return WW

    def resample_matrix(self, other, axis):
        """Interpolation matrix from this grid's nodes to another grid's nodes on one axis."""
        return self.interp_matrix(other.nodes1d(axis), axis)

    def to_json_dict(self):
        return {
            "center": [fmt_float(c) for c in self.center],
            "tau": fmt_float(self.tau),
            "n": self.n,
        }

    @classmethod
    def from_json_dict(cls, obj):
        return cls([float(c) for c in obj["center"]], float(obj["tau"]), int(obj["n"]))


def _encode_reim(arr):
    a = np.asarray(arr)
    if a.ndim == 0:
        return fmt_float(a)
    return [_encode_reim(x) for x in a]


def _decode_reim(obj):
    if isinstance(obj, list):
        return np.array([_decode_reim(x) for x in obj], dtype=float)
    return float(obj)


class FourierField:
    """Truncated Fourier series on T^{d+1} with optional action-node coefficients.

    Parameters
    ----------
    d : int
        Number of angle variables (time adds one more circle).
    modes : (M, d+1) int array
        Rows (k_1, ..., k_d, l).
    coeffs : (M, *vshape, *gridshape) complex array
        One coefficient per mode; ``vshape`` is () for scalar fields, (d,) for
        vector fields, (d, d) for matrix fields.  When ``grid`` is given each
        coefficient is a Chebyshev node array over the action box.
    s : float
        Angle-strip width used as the default weight in :meth:`norm`.
    tau : float
        Action-ball radius of validity (0 for action-independent fields).
    cutoff : int
        Truncation order: all stored modes satisfy |k|_1 + |l| <= cutoff.
    grid : ActionGrid, optional
    vshape : tuple, optional

    Fields are immutable; every operation returns a new instance.
    """

    def __init__(self, d, modes, coeffs, s, tau, cutoff, grid=None, vshape=(),
                 enforce_reality=True, _canonical=False):
        self.d = int(d)
        self.s = float(s)
        self.tau = float(tau)
        self.cutoff = int(cutoff)
        self.grid = grid
        self.vshape = tuple(vshape)
        modes = np.asarray(modes, dtype=np.int64).reshape(-1, self.d + 1)
        gshape = grid.shape if grid is not None else ()
        coeffs = np.asarray(coeffs, dtype=complex).reshape(
            modes.shape[0], *self.vshape, *gshape)
        if modes.shape[0] and np.abs(modes).sum(axis=1).max(initial=0) > self.cutoff:
            raise ValueError("a stored mode exceeds the declared cutoff")
        if not _canonical:
            modes, coeffs = self._merge_sorted(modes, coeffs)
        self._modes = modes
        self._coeffs = coeffs
        self.reality_drift = 0.0
        if enforce_reality:
            self._symmetrize()
        self._modes.setflags(write=False)
        self._coeffs.setflags(write=False)
        self._index = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _merge_sorted(modes, coeffs):
        if modes.shape[0] == 0:
            return modes, coeffs
        order = _canonical_order(modes)
        modes, coeffs = modes[order], coeffs[order]
        keep = np.ones(modes.shape[0], dtype=bool)
        dup = np.all(modes[1:] == modes[:-1], axis=1)
        if np.any(dup):
            coeffs = coeffs.copy()
            for i in np.nonzero(dup)[0]:
                coeffs[i + 1] += coeffs[i]
                keep[i] = False
            modes, coeffs = modes[keep], coeffs[keep]
        return modes, coeffs

    def _symmetrize(self):
        """Average with the conjugate-negated partner; record the relative drift."""
        if self._modes.shape[0] == 0:
            return
        idx = {tuple(m): i for i, m in enumerate(self._modes)}
        neg = np.empty(self._modes.shape[0], dtype=np.int64)
        missing = []
        for i, m in enumerate(self._modes):
            j = idx.get(tuple(-m))
            if j is None:
                missing.append(i)
                neg[i] = -1
            else:
                neg[i] = j
        if missing:
            extra_modes = -self._modes[missing]
            extra_coeffs = np.zeros((len(missing),) + self._coeffs.shape[1:], dtype=complex)
            modes = np.concatenate([self._modes, extra_modes], axis=0)
            coeffs = np.concatenate([self._coeffs, extra_coeffs], axis=0)
            order = _canonical_order(modes)
            self._modes, self._coeffs = modes[order], coeffs[order]
            idx = {tuple(m): i for i, m in enumerate(self._modes)}
            neg = np.array([idx[tuple(-m)] for m in self._modes], dtype=np.int64)
        scale = np.abs(self._coeffs).max(initial=0.0)
        sym = 0.5 * (self._coeffs + np.conj(self._coeffs[neg]))
        if scale > 0:
            self.reality_drift = float(np.abs(self._coeffs - sym).max() / scale)
            if self.reality_drift > REALITY_TOL:
                raise RealityError(
                    f"conjugate-symmetry drift {self.reality_drift:.3e} exceeds {REALITY_TOL:.1e}")
        self._coeffs = sym

    @classmethod
    def from_modes(cls, d, mapping, s, tau=0.0, cutoff=None, grid=None, vshape=(),
                   enforce_reality=True):
        """Build from a {(k_1, ..., k_d, l): coefficient} mapping."""
        items = sorted(mapping.items())
        if cutoff is None:
            cutoff = max((sum(abs(x) for x in m) for m, _ in items), default=0)
        modes = np.array([m for m, _ in items], dtype=np.int64).reshape(-1, d + 1)
        gshape = grid.shape if grid is not None else ()
        coeffs = np.array([np.broadcast_to(np.asarray(v, dtype=complex), vshape + gshape)
                           for _, v in items], dtype=complex)
        return cls(d, modes, coeffs, s, tau, cutoff, grid=grid, vshape=vshape,
                   enforce_reality=enforce_reality)

    @classmethod
    def zero(cls, d, s, tau=0.0, cutoff=0, grid=None, vshape=()):
        gshape = grid.shape if grid is not None else ()
        return cls(d, np.zeros((0, d + 1), dtype=np.int64),
                   np.zeros((0, *vshape, *gshape), dtype=complex),
                   s, tau, cutoff, grid=grid, vshape=vshape)

    def replace(self, modes=None, coeffs=None, s=None, tau=None, cutoff=None,
                grid="keep", vshape=None, enforce_reality=True, _canonical=False):
        return FourierField(
            self.d,
            self._modes if modes is None else modes,
            self._coeffs if coeffs is None else coeffs,
            self.s if s is None else s,
            self.tau if tau is None else tau,
            self.cutoff if cutoff is None else cutoff,
            grid=self.grid if grid == "keep" else grid,
            vshape=self.vshape if vshape is None else vshape,
            enforce_reality=enforce_reality,
            _canonical=_canonical,
        )

    # -- basic access ----------------------------------------------------------

    @property
    def modes(self):
        return self._modes

    @property
    def coeffs(self):
        return self._coeffs

    @property
    def n_modes(self):
        return self._modes.shape[0]

    def _mode_index(self):
        if self._index is None:
            self._index = {tuple(m): i for i, m in enumerate(self._modes)}
        return self._index

    def mode(self, *mode):
        """Coefficient of one mode (k_1, ..., k_d, l); zero if absent."""
        if len(mode) == 1 and isinstance(mode[0], (tuple, list, np.ndarray)):
            mode = tuple(int(x) for x in mode[0])
        i = self._mode_index().get(tuple(int(x) for x in mode))
        gshape = self.grid.shape if self.grid is not None else ()
        if i is None:
            return np.zeros(self.vshape + gshape, dtype=complex) if (self.vshape or gshape) else 0j
        c = self._coeffs[i]
        return c if (self.vshape or gshape) else complex(c)

    def orders(self):
        return np.abs(self._modes).sum(axis=1)

    # -- arithmetic ------------------------------------------------------------

    def _compatible(self, other):
        if self.d != other.d or self.vshape != other.vshape:
            raise ValueError("field shapes do not match")
        if (self.grid is None) != (other.grid is None):
            raise ValueError("cannot combine action-sampled and action-free fields directly")
        if self.grid is not None and not self.grid.same_as(other.grid):
            raise ValueError("action grids do not match")

    def __add__(self, other):
        if np.isscalar(other):
            other = self._scalar_field(other)
        self._compatible(other)
        modes = np.concatenate([self._modes, other._modes], axis=0)
        coeffs = np.concatenate([self._coeffs, other._coeffs], axis=0)
        return FourierField(self.d, modes, coeffs, min(self.s, other.s),
                            max(self.tau, other.tau), max(self.cutoff, other.cutoff),
                            grid=self.grid, vshape=self.vshape)

    def __sub__(self, other):
        return self.__add__(other * (-1.0))

    def __mul__(self, scalar):
        if not np.isscalar(scalar):
            raise TypeError("use multiply() for field products")
        return self.replace(coeffs=self._coeffs * scalar, _canonical=True,
                            enforce_reality=not np.iscomplexobj(np.asarray(scalar)))

    __rmul__ = __mul__

    def _scalar_field(self, value):
        gshape = self.grid.shape if self.grid is not None else ()
        zero_mode = np.zeros((1, self.d + 1), dtype=np.int64)
        c = np.full((1, *self.vshape, *gshape), complex(value))
        return FourierField(self.d, zero_mode, c, self.s, self.tau, self.cutoff,
                            grid=self.grid, vshape=self.vshape, _canonical=True)

    # -- spec operations -------------------------------------------------------

    def truncate(self, K):
        """Keep modes with |k|_1 + |l| <= K (the projection Gamma_K)."""
        keep = self.orders() <= K
        return self.replace(modes=self._modes[keep], coeffs=self._coeffs[keep],
                            cutoff=int(K), _canonical=True)

    def tail(self, K):
        """Complementary projection: modes with |k|_1 + |l| > K."""
        keep = self.orders() > K
        return self.replace(modes=self._modes[keep], coeffs=self._coeffs[keep], _canonical=True)

    def prune(self, rel_tol=PRUNE_TOL):
        """Drop modes whose coefficient magnitude is below rel_tol times the maximum."""
        if self.n_modes == 0:
            return self
        mags = np.abs(self._coeffs).reshape(self.n_modes, -1).max(axis=1)
        top = mags.max()
        if top == 0.0:
            return self.replace(modes=self._modes[:0], coeffs=self._coeffs[:0], _canonical=True)
        keep = mags >= rel_tol * top
        return self.replace(modes=self._modes[keep], coeffs=self._coeffs[keep], _canonical=True)

    def norm(self, s=None, tau=None):
        """Weighted-l1 analytic norm: sum over modes of sup-node |coef| * e^{s(|k|+|l|)}.

        Vector and matrix values contribute their largest component magnitude.
        When ``tau`` is given and smaller than the stored grid radius, node
        values are first restricted to the sub-box of that radius.
        """
        if self.n_modes == 0:
            return 0.0
        s = self.s if s is None else float(s)
        f = self
        if tau is not None and self.grid is not None and tau < self.grid.tau * (1 - 1e-12):
            f = self.restrict_action(ActionGrid(self.grid.center, tau, self.grid.n))
        mags = np.abs(f._coeffs).reshape(f.n_modes, -1).max(axis=1)
        return float(np.sum(mags * np.exp(s * f.orders())))

    def derive(self, which):
        """Directional derivative: which is 'angle_j', 'time', or 'action_j'."""
        if which == "time":
            factor = 1j * self._modes[:, -1]
            shape = (self.n_modes,) + (1,) * (self._coeffs.ndim - 1)
            return self.replace(coeffs=self._coeffs * factor.reshape(shape),
                                _canonical=True, enforce_reality=False)
        kind, _, num = which.partition("_")
        j = int(num)
        if kind == "angle":
            if not 0 <= j < self.d:
                raise ValueError(f"angle index {j} out of range")
            factor = 1j * self._modes[:, j]
            shape = (self.n_modes,) + (1,) * (self._coeffs.ndim - 1)
            return self.replace(coeffs=self._coeffs * factor.reshape(shape),
                                _canonical=True, enforce_reality=False)
        if kind == "action":
            if self.grid is None:
                raise ValueError("field has no action dependence to differentiate")
            if not 0 <= j < self.grid.dim:
                raise ValueError(f"action index {j} out of range")
            axis = self._coeffs.ndim - self.grid.dim + j
            D = self.grid.diff1d
            c = np.moveaxis(np.tensordot(self._coeffs, D, axes=([axis], [1])), -1, axis)
            return self.replace(coeffs=c, _canonical=True, enforce_reality=False)
        raise ValueError(f"unknown derivative direction {which!r}")

    def grad_angle(self):
        """Vector field of angle derivatives, shape (d,) + existing value shape."""
        if self.vshape != ():
            raise ValueError("grad_angle expects a scalar field")
        k = self._modes[:, : self.d].T  # (d, M)
        shape = (self.d, self.n_modes) + (1,) * (self._coeffs.ndim - 1)
        c = (1j * k).reshape(shape) * self._coeffs[None]
        c = np.moveaxis(c, 0, 1)
        return self.replace(coeffs=c, vshape=(self.d,), _canonical=True,
                            enforce_reality=False)

    def grad_action(self):
        """Vector field of action-node derivatives."""
        if self.vshape != () or self.grid is None:
            raise ValueError("grad_action expects a scalar field with action nodes")
        parts = [self.derive(f"action_{j}")._coeffs for j in range(self.grid.dim)]
        c = np.stack(parts, axis=1)
        return self.replace(coeffs=c, vshape=(self.grid.dim,), _canonical=True,
                            enforce_reality=False)

    def angle_average(self):
        """Projection onto k = 0: the time-dependent, angle-free part."""
        keep = np.all(self._modes[:, : self.d] == 0, axis=1)
        return self.replace(modes=self._modes[keep], coeffs=self._coeffs[keep], _canonical=True)

    def time_average(self):
        """Projection onto the (k, l) = (0, 0) mode (as a function of action)."""
        keep = np.all(self._modes == 0, axis=1)
        return self.replace(modes=self._modes[keep], coeffs=self._coeffs[keep], _canonical=True)

    def component(self, *idx):
        """Scalar field for one component of a vector or matrix field."""
        if len(idx) != len(self.vshape):
            raise ValueError("component index rank does not match value shape")
        sl = (slice(None),) + idx
        return self.replace(coeffs=self._coeffs[sl], vshape=(), _canonical=True,
                            enforce_reality=False)

    # -- action-node manipulation ----------------------------------------------

    def restrict_action(self, new_grid):
        """Re-sample node coefficients onto another (enclosed) ActionGrid."""
        if self.grid is None:
            raise ValueError("field has no action grid")
        c = self._coeffs
        base = self._coeffs.ndim - self.grid.dim
        for j in range(self.grid.dim):
            M = self.grid.interp_matrix(new_grid.nodes1d(j), j)
            c = np.moveaxis(np.tensordot(c, M, axes=([base + j], [1])), -1, base + j)
        return self.replace(coeffs=c, grid=new_grid, tau=new_grid.tau, _canonical=True,
                            enforce_reality=False)

    def broadcast_action(self, grid):
        """Give an action-independent field constant values on an ActionGrid."""
        if self.grid is not None:
            raise ValueError("field already has an action grid")
        c = np.broadcast_to(self._coeffs[(...,) + (None,) * grid.dim],
                            self._coeffs.shape + grid.shape).copy()
        return self.replace(coeffs=c, grid=grid, tau=grid.tau, _canonical=True,
                            enforce_reality=False)

    def interp_action(self, points):
        """Mode coefficients interpolated at action points (N, dim) -> (M, *vshape, N)."""
        if self.grid is None:
            pts = np.atleast_2d(points)
            return np.broadcast_to(self._coeffs[..., None],
                                   self._coeffs.shape + (pts.shape[0],))
        WW = self.grid.interp_weights(points)  # (N, *gshape)
        gaxes = list(range(self._coeffs.ndim - self.grid.dim, self._coeffs.ndim))
        return np.tensordot(self._coeffs, WW, axes=(gaxes, list(range(1, self.grid.dim + 1))))

    def at_action(self, point):
        """Action-independent field: coefficients frozen at one action point."""
        c = self.interp_action(np.atleast_2d(point))[..., 0]
        return self.replace(coeffs=c, grid=None, tau=0.0, _canonical=True,
                            enforce_reality=False)

    # -- evaluation and grids ----------------------------------------------------

    def evaluate(self, theta, t, I=None, chunk=4096, return_complex=False):
        """Evaluate at points; returns real values (imaginary residue checked).

        theta: (N, d) or (d,); t: (N,) or scalar; I: (N, dim), (dim,), or None.
        """
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        single = theta.shape[0] == 1 and np.ndim(t) == 0
        N = theta.shape[0]
        t_arr = np.broadcast_to(np.asarray(t, dtype=float), (N,))
        if self.grid is not None:
            if I is None:
                raise ValueError("field has action dependence; provide I")
            I_arr = np.atleast_2d(np.asarray(I, dtype=float))
            if I_arr.shape[0] == 1:
                I_arr = np.broadcast_to(I_arr, (N, I_arr.shape[1]))
        out = np.zeros((N,) + self.vshape, dtype=complex)
        if self.n_modes:
            K = self._modes[:, : self.d]
            L = self._modes[:, -1]
            for lo in range(0, N, chunk):
                hi = min(N, lo + chunk)
                phase = theta[lo:hi] @ K.T + np.outer(t_arr[lo:hi], L)
                E = np.exp(1j * phase)  # (n, M)
                if self.grid is not None:
                    cpts = self.interp_action(I_arr[lo:hi])  # (M, *vshape, n)
                    out[lo:hi] = np.einsum("nm,m...n->n...", E, cpts)
                else:
                    out[lo:hi] = np.tensordot(E, self._coeffs, axes=(1, 0))
        if return_complex:
            return out[0] if single else out
        scale = max(1.0, float(np.abs(out).max(initial=0.0)))
        imag = float(np.abs(out.imag).max(initial=0.0))
        if imag > 1e-12 * scale:
            raise RealityError(f"imaginary residue {imag:.3e} on evaluation of a real field")
        res = out.real
        return res[0] if single else res

    def grid_shape_for(self, other=None, pad=0):
        """FFT grid shape large enough for this field (optionally a product with other)."""
        ext = np.abs(self._modes).max(axis=0, initial=0)
        if other is not None:
            ext = ext + np.abs(other._modes).max(axis=0, initial=0)
        return tuple(fast_len(2 * int(e + pad) + 1) for e in ext)

    def to_grid(self, nshape):
        """Values on the uniform (theta, t) grid, shape (*nshape, *vshape, *gridshape)."""
        nshape = tuple(int(n) for n in nshape)
        if len(nshape) != self.d + 1:
            raise ValueError("grid shape must have d+1 entries")
        gshape = self.grid.shape if self.grid is not None else ()
        C = np.zeros(nshape + self.vshape + gshape, dtype=complex)
        if self.n_modes:
            for j, n in enumerate(nshape):
                if 2 * np.abs(self._modes[:, j]).max(initial=0) + 1 > n:
                    raise ValueError("grid too small for stored modes (aliasing collision)")
            idx = tuple(np.mod(self._modes[:, j], nshape[j]) for j in range(self.d + 1))
            C[idx] = self._coeffs
        vals = ifftn(C, axes=tuple(range(self.d + 1))) * np.prod(nshape)
        return vals

    @classmethod
    def from_grid(cls, values, d, s, cutoff, grid=None, vshape=(), tau=None,
                  prune_tol=PRUNE_TOL, enforce_reality=True):
        """Project uniform (theta, t)-grid values onto modes with |k|+|l| <= cutoff.

        The relative coefficient mass outside the retained ball is stored on the
        result as ``projection_residual``.
        """
        values = np.asarray(values, dtype=complex)
        nshape = values.shape[: d + 1]
        C = fftn(values, axes=tuple(range(d + 1))) / np.prod(nshape)
        half = tuple((n - 1) // 2 for n in nshape)
        all_modes = ball_modes(d, int(min(cutoff, sum(half))))
        keep = np.ones(all_modes.shape[0], dtype=bool)
        for j in range(d + 1):
            keep &= np.abs(all_modes[:, j]) <= half[j]
        modes = all_modes[keep]
        idx = tuple(np.mod(modes[:, j], nshape[j]) for j in range(d + 1))
        coeffs = C[idx]
        total = float(np.abs(C).sum())
        kept = float(np.abs(coeffs).sum())
        residual = 0.0 if total == 0 else max(0.0, (total - kept) / total)
        f = cls(d, modes, coeffs, s, grid.tau if (grid and tau is None) else (tau or 0.0),
                int(cutoff), grid=grid, vshape=vshape, enforce_reality=enforce_reality)
        f = f.prune(prune_tol)
        f.projection_residual = residual
        return f

    def multiply(self, other, cap=None, overflow_tol=1e-9, on_overflow="raise"):
        """Dealiased product of two scalar fields via oversampled grid transform.

        The grid is sized so every product mode is represented exactly; modes
        beyond ``cap`` (default: sum of the cutoffs) are dropped and their mass
        is compared against ``overflow_tol`` times the total.
        """
        if np.isscalar(other):
            return self * other
        self._compatible(other)
        if self.vshape != ():
            raise ValueError("multiply is defined for scalar fields")
        full = self.cutoff + other.cutoff
        target = full if cap is None else int(min(cap, full))
        if self.n_modes == 0 or other.n_modes == 0:
            return self.zero(self.d, min(self.s, other.s), self.tau, target,
                             grid=self.grid, vshape=())
        nshape = self.grid_shape_for(other)
        va = self.to_grid(nshape)
        vb = other.to_grid(nshape)
        prod = va * vb
        f = FourierField.from_grid(prod, self.d, min(self.s, other.s), full,
                                   grid=self.grid, vshape=(),
                                   tau=max(self.tau, other.tau))
        if target < full:
            dropped = f.tail(target)
            dm = float(np.abs(dropped._coeffs).sum())
            tm = float(np.abs(f._coeffs).sum())
            f = f.truncate(target)
            if tm > 0 and dm > overflow_tol * tm and on_overflow == "raise":
                raise ModeOverflowError(
                    f"product dropped relative mass {dm / tm:.3e} past cap {target}",
                    dropped_mass=dm, total_mass=tm)
        return f

    # -- serialization ----------------------------------------------------------

    def to_json_dict(self):
        out = {
            "d": self.d,
            "s": fmt_float(self.s),
            "tau": fmt_float(self.tau),
            "cutoff": self.cutoff,
            "vshape": list(self.vshape),
            "modes": [
                {
                    "k": [int(x) for x in m[: self.d]],
                    "l": int(m[-1]),
                    "re": _encode_reim(c.real),
                    "im": _encode_reim(c.imag),
                }
                for m, c in zip(self._modes, self._coeffs)
            ],
        }
        if self.grid is not None:
            out["grid"] = self.grid.to_json_dict()
        return out

    @classmethod
    def from_json_dict(cls, obj):
        d = int(obj["d"])
        grid = ActionGrid.from_json_dict(obj["grid"]) if "grid" in obj else None
        vshape = tuple(obj.get("vshape", []))
        modes = np.array([list(m["k"]) + [m["l"]] for m in obj["modes"]],
                         dtype=np.int64).reshape(-1, d + 1)
        gshape = grid.shape if grid is not None else ()
        coeffs = np.array(
            [_decode_reim(m["re"]) + 1j * _decode_reim(m["im"]) for m in obj["modes"]],
            dtype=complex).reshape(-1, *vshape, *gshape)
        return cls(d, modes, coeffs, float(obj["s"]), float(obj["tau"]),
                   int(obj["cutoff"]), grid=grid, vshape=vshape)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def _graded_multi_indices(nvars, order):
    """All exponent tuples of the given total order, lexicographically sorted."""
    if nvars == 0:
        return [()] if order == 0 else []
    out = []

    def rec(prefix, remaining, slots):
        if slots == 1:
            out.append(prefix + (remaining,))
            return
        for v in range(remaining + 1):
            rec(prefix + (v,), remaining - v, slots - 1)

    rec((), order, nvars)
    return sorted(out)


def compose_shifted_grid(field, nshape, dtheta=None, drho=None, out_grid=None,
                         max_order=12, tol=1e-13):
    """Grid values of field(theta + dtheta, t, rho_c + drho) by Taylor expansion.

    The composition is evaluated on the uniform (theta, t) grid of shape
    ``nshape`` crossed with the nodes of ``out_grid``; angle derivatives come
    from mode factors and action derivatives from node differentiation, so the
    result is exact for the stored representation up to the Taylor truncation,
    which is driven below ``tol`` (relative) adaptively.

    Parameters
    ----------
    dtheta : array or None
        Angle shift, broadcastable to (*nshape, *out_grid.shape, d).
    drho : array or None
        Action shift, broadcastable to (*nshape, *out_grid.shape, dim).

    Returns
    -------
    values : complex array of shape (*nshape, *out_grid.shape)
    err : float
        Magnitude of the last Taylor order retained (truncation estimate).
    """
    import math

    if field.vshape != ():
        raise ValueError("compose_shifted_grid expects a scalar field")
    if out_grid is None:
        out_grid = field.grid
    gshape = out_grid.shape if out_grid is not None else ()
    base_shape = tuple(nshape) + gshape
    d_ang = field.d if dtheta is not None else 0
    d_act = 0
    if drho is not None:
        if field.grid is None:
            d_act = 0  # no action dependence: shift is irrelevant
        else:
            d_act = field.grid.dim
    if dtheta is not None:
        dtheta = np.broadcast_to(np.asarray(dtheta), base_shape + (field.d,))
    if drho is not None and d_act:
        drho = np.broadcast_to(np.asarray(drho), base_shape + (d_act,))

    def grid_values(f):
        if out_grid is not None:
            if f.grid is None:
                f = f.broadcast_action(out_grid)
            elif not f.grid.same_as(out_grid):
                f = f.restrict_action(out_grid)
        return f.to_grid(nshape)

    deriv_cache = {((0,) * d_ang, (0,) * d_act): field}

    def derivative_field(alpha, beta):
        key = (alpha, beta)
        if key in deriv_cache:
            return deriv_cache[key]
        for j in range(d_ang):
            if alpha[j] > 0:
                parent = derivative_field(
                    alpha[:j] + (alpha[j] - 1,) + alpha[j + 1:], beta)
                deriv_cache[key] = parent.derive(f"angle_{j}")
                return deriv_cache[key]
        for j in range(d_act):
            if beta[j] > 0:
                parent = derivative_field(
                    alpha, beta[:j] + (beta[j] - 1,) + beta[j + 1:])
                deriv_cache[key] = parent.derive(f"action_{j}")
                return deriv_cache[key]
        raise AssertionError

    pw_theta = [{0: None} for _ in range(d_ang)]
    pw_rho = [{0: None} for _ in range(d_act)]

    def power(cache, arr, j, p):
        if p not in cache[j]:
            cache[j][p] = arr[..., j] ** p
        return cache[j][p]

    accum = np.zeros(base_shape, dtype=complex)
    last = np.inf
    err = 0.0
    for order in range(max_order + 1):
        contrib = np.zeros(base_shape, dtype=complex)
        indices = []
        for a_ord in range(order + 1):
            for alpha in _graded_multi_indices(d_ang, a_ord):
                for beta in _graded_multi_indices(d_act, order - a_ord):
                    indices.append((alpha, beta))
        if not indices:
            break
        for alpha, beta in indices:
            f_ab = derivative_field(alpha, beta)
            term = grid_values(f_ab)
            fac = 1.0
            for j, p in enumerate(alpha):
                if p:
                    term = term * power(pw_theta, dtheta, j, p)
                    fac *= math.factorial(p)
            for j, p in enumerate(beta):
                if p:
                    term = term * power(pw_rho, drho, j, p)
                    fac *= math.factorial(p)
            contrib = contrib + term / fac
        accum += contrib
        size = float(np.abs(contrib).max(initial=0.0))
        scale = max(float(np.abs(accum).max(initial=0.0)), 1e-300)
        err = size / scale
        if order >= 1 and err < tol and last < tol:
            break
        last = err
    else:
        if err > 100 * tol:
            from .errors import ContractionError
            raise ContractionError(
                f"shift-composition Taylor series stalled at relative size {err:.3e}")
    return accum, err


@dataclass
class ActionJet:
    """Quadratic jet in the action around a point, with an optional cubic tail.

    r0, r1, r2 are scalar-, vector-, and matrix-valued FourierFields in
    (theta, t); ``high`` (when present) is a sampled remainder vanishing to
    third order at the expansion point.
    """

    r0: FourierField
    r1: FourierField
    r2: FourierField
    high: object = None

    def __post_init__(self):
        sym_defect = 0.0
        if self.r2.n_modes:
            c = self.r2.coeffs
            sym_defect = float(np.abs(c - np.swapaxes(c, 1, 2)).max())
            scale = max(1.0, float(np.abs(c).max()))
            if sym_defect > 1e-10 * scale:
                raise ValueError(f"quadratic jet matrix is not symmetric (defect {sym_defect:.3e})")

    def evaluate_low(self, theta, t, rho):
        """r0 + <r1, rho> + <rho, r2 rho> at the given points."""
        rho = np.asarray(rho, dtype=float)
        v0 = self.r0.evaluate(theta, t)
        v1 = self.r1.evaluate(theta, t)
        v2 = self.r2.evaluate(theta, t)
        if rho.ndim == 1:
            return v0 + v1 @ rho + rho @ v2 @ rho
        return (v0 + np.einsum("nj,nj->n", v1, rho)
                + np.einsum("nj,njk,nk->n", rho, v2, rho))

    def max_norm(self, s=None):
        return max(self.r0.norm(s), self.r1.norm(s), self.r2.norm(s))
