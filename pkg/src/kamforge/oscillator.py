"""Reference orbit and action-angle chart for the unperturbed oscillator x'' + x^(2n+1) = 0.

The chart sends (theta, I) with 2*pi-periodic theta to one oscillator's
Cartesian coordinates through the scaling family of the energy-one reference
orbit.  With the normalization c = 2*pi / (alpha * T0) the chart is exactly
symplectic and pulls the oscillator energy back to kappa * I**(2*beta).
"""

import numpy as np
import scipy.integrate

from .errors import DomainError
from .fourier import FourierField
from .util import fftn

# Yoshida's 6th-order composition (solution A): symmetric 7-stage weights.
_W1 = -0.117767998417887e1
_W2 = 0.235573213359357e0
_W3 = 0.784513610477560e0
_W0 = 1.0 - 2.0 * (_W1 + _W2 + _W3)
YOSHIDA6 = np.array([_W3, _W2, _W1, _W0, _W1, _W2, _W3])

ORIGIN_ENERGY_FLOOR = 1e-12


def compute_period(n, rtol=1e-12):
    """Period T0 of the energy-one reference orbit of x'' + x^(2n+1) = 0.

    The quarter-period integral is regularized by the substitution
    x = sin(t**(n+1))**(1/(n+1)), which leaves a smooth integrand; the
    quadrature error estimate is checked against ``rtol``.
    """
    n = int(n)
    if n < 0:
        raise ValueError("n must be a non-negative integer")
    if n == 0:
        return 2.0 * np.pi
    p = n / (n + 1.0)

    def g(t):
        u = t ** (n + 1)
        # (u / sin u)**p, smooth through u = 0
        ratio = np.where(u < 1e-8, 1.0 + u**2 / 6.0, u / np.sin(np.where(u < 1e-8, 1.0, u)))
        return ratio**p

    b = (np.pi / 2.0) ** (1.0 / (n + 1))
    val, err = scipy.integrate.quad(g, 0.0, b, epsabs=1e-14, epsrel=1e-13, limit=200)
    T0 = 4.0 * np.sqrt(n + 1.0) * val
    if err * 4.0 * np.sqrt(n + 1.0) > rtol * T0:
        raise RuntimeError(f"period quadrature error {err:.3e} above tolerance")
    return T0


def _integrate_reference(n, t_grid, substeps):
    """Sample the reference orbit (u0, v0) from (1, 0) at the given times."""
    u, v = 1.0, 0.0
    out = np.empty((t_grid.size, 2))
    out[0] = (u, v)
    t_prev = 0.0
    p = 2 * n + 1
    for i in range(1, t_grid.size):
        h = (t_grid[i] - t_prev) / substeps
        for _ in range(substeps):
            for w in YOSHIDA6:
                hh = w * h
                v -= 0.5 * hh * u**p
                u += hh * v
                v -= 0.5 * hh * u**p
        t_prev = t_grid[i]
        out[i] = (u, v)
    return out


class ReferenceOrbit:
    """Energy-one orbit of x'' + x^(2n+1) = 0 from (1, 0), sampled and spectral.

    Attributes
    ----------
    n : int
    period : float
    samples : (N, 2) array of (u0, v0) at phases 2*pi*j/N.
    u_fourier, v_fourier : FourierField
        d=1 fields (modes (q, 0)) representing u0 and v0 as functions of the
        2*pi-periodic angle.
    """

    def __init__(self, n, period, samples):
        self.n = int(n)
        self.period = float(period)
        self.samples = np.asarray(samples, dtype=float)
        N = self.samples.shape[0]
        cu = fftn(self.samples[:, 0].astype(complex)) / N
        cv = fftn(self.samples[:, 1].astype(complex)) / N
        qmax = N // 2 - 1
        qs = np.concatenate([np.arange(0, qmax + 1), np.arange(-qmax, 0)])
        modes = np.stack([qs, np.zeros_like(qs)], axis=1)
        idx = np.mod(qs, N)
        self.u_fourier = FourierField(1, modes, cu[idx], s=1.0, tau=0.0,
                                      cutoff=qmax).prune(1e-15)
        self.v_fourier = FourierField(1, modes, cv[idx], s=1.0, tau=0.0,
                                      cutoff=qmax).prune(1e-15)
        self._uq = self.u_fourier.modes[:, 0].copy()
        self._uc = self.u_fourier.coeffs.copy()
        self._vq = self.v_fourier.modes[:, 0].copy()
        self._vc = self.v_fourier.coeffs.copy()

    def eval_angle(self, theta):
        """(u0, v0) at 2*pi-periodic angles theta (any shape)."""
        th = np.asarray(theta, dtype=float)
        eu = np.exp(1j * np.multiply.outer(th, self._uq))
        ev = np.exp(1j * np.multiply.outer(th, self._vq))
        return (eu @ self._uc).real, (ev @ self._vc).real

    def energy_defect(self):
        """Max deviation of (n+1) v0^2 + u0^(2n+2) from 1 over the samples."""
        u, v = self.samples[:, 0], self.samples[:, 1]
        return float(np.abs((self.n + 1) * v**2 + u ** (2 * self.n + 2) - 1.0).max())


def reference_solution(n, N=1024, substeps=16):
    """Integrate the reference orbit and return a ReferenceOrbit with N samples.

    N must be a power of two, at least 64.  The per-sample integration uses
    ``substeps`` Yoshida-6 steps, keeping the energy drift below 1e-10.
    """
    N = int(N)
    if N < 64 or (N & (N - 1)) != 0:
        raise ValueError("N must be a power of two, at least 64")
    T0 = compute_period(n)
    t_grid = T0 * np.arange(N) / N
    samples = _integrate_reference(n, t_grid, substeps)
    orbit = ReferenceOrbit(n, T0, samples)
    defect = orbit.energy_defect()
    if defect > 1e-10:
        raise RuntimeError(f"reference orbit energy drift {defect:.3e} exceeds 1e-10")
    return orbit


class PowerLawH0:
    """Integrable Hamiltonian H0(I) = kappa * sum_j I_j^p with closed-form derivatives."""

    def __init__(self, kappa, p, m):
        self.kappa = float(kappa)
        self.p = float(p)
        self.m = int(m)

    def value(self, I):
        I = np.asarray(I, dtype=float)
        return self.kappa * np.sum(I**self.p, axis=-1)

    def grad(self, I):
        I = np.asarray(I, dtype=float)
        return self.kappa * self.p * I ** (self.p - 1)

    def hess(self, I):
        I = np.asarray(I, dtype=float)
        d = self.kappa * self.p * (self.p - 1) * I ** (self.p - 2)
        return np.apply_along_axis(np.diag, -1, d) if I.ndim > 1 else np.diag(d)

    def third(self, I):
        I = np.asarray(I, dtype=float)
        c = self.kappa * self.p * (self.p - 1) * (self.p - 2)
        T = np.zeros((self.m,) * 3)
        for j in range(self.m):
            T[j, j, j] = c * I[j] ** (self.p - 3)
        return T

    def min_hess_det(self, box, grid=9):
        """Minimum Hessian determinant over a grid on the action box."""
        lo, hi = box
        axes = [np.linspace(lo[j], hi[j], grid) for j in range(self.m)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.m)
        dets = [np.linalg.det(self.hess(I)) for I in mesh]
        return float(np.min(dets))


class ActionAngleMap:
    """Per-oscillator action-angle chart for a network of m identical oscillators.

    Parameters
    ----------
    n : int
        Nonlinearity exponent (restoring force x^(2n+1)).
    m : int
        Number of oscillators.
    orbit : ReferenceOrbit, optional
        Reference orbit to use; computed on demand otherwise.

    Attributes
    ----------
    alpha = 1/(n+2), beta = (n+1)/(n+2), c = 2*pi/(alpha*T0), and
    kappa = c**(2*beta) / (2*(n+1)) so the pulled-back oscillator energy is
    kappa * I**(2*beta).
    """

    def __init__(self, n, m, orbit=None, N=1024):
        self.n = int(n)
        self.m = int(m)
        self.orbit = orbit if orbit is not None else reference_solution(n, N=N)
        self.alpha = 1.0 / (self.n + 2)
        self.beta = (self.n + 1.0) / (self.n + 2)
        self.c = 2.0 * np.pi / (self.alpha * self.orbit.period)
        self.kappa = self.c ** (2 * self.beta) / (2.0 * (self.n + 1))

    def h0(self):
        """PowerLawH0 for the pulled-back integrable part, kappa * sum I^(2*beta)."""
        return PowerLawH0(self.kappa, 2.0 * self.beta, self.m)

    def omega(self, I):
        return self.h0().grad(I)

    def to_cartesian(self, theta, I):
        """(x, y) for angle/action arrays of shape (..., m)."""
        theta = np.asarray(theta, dtype=float)
        I = np.asarray(I, dtype=float)
        if np.any(I <= 0):
            raise DomainError("actions must be positive")
        u, v = self.orbit.eval_angle(theta)
        x = (self.c * I) ** self.alpha * u
        y = (self.c * I) ** self.beta * v
        return x, y

    def from_cartesian(self, x, y, newton_steps=4):
        """(theta, I) for Cartesian arrays of shape (..., m); rejects near-origin points."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        y = np.atleast_1d(np.asarray(y, dtype=float))
        shape = x.shape
        n = self.n
        e = 0.5 * y**2 + x ** (2 * n + 2) / (2.0 * (n + 1))
        if np.any(e < ORIGIN_ENERGY_FLOOR):
            raise DomainError("point too close to the origin for the action-angle chart")
        I = (2.0 * (n + 1) * e) ** (1.0 / (2 * self.beta)) / self.c
        xhat = (x / (self.c * I) ** self.alpha).ravel()
        yhat = (y / (self.c * I) ** self.beta).ravel()
        samples = self.orbit.samples
        N = samples.shape[0]
        d2 = (samples[None, :, 0] - xhat[:, None]) ** 2 + (samples[None, :, 1] - yhat[:, None]) ** 2
        theta = 2.0 * np.pi * np.argmin(d2, axis=1) / N
        for _ in range(newton_steps):
            u, v = self.orbit.eval_angle(theta)
            # derivative of (u, v) w.r.t. the angle
            du = (self.orbit.period / (2 * np.pi)) * v
            dv = -(self.orbit.period / (2 * np.pi)) * u ** (2 * n + 1)
            g = (u - xhat) * du + (v - yhat) * dv
            gp = du**2 + dv**2 + (u - xhat) * (
                (self.orbit.period / (2 * np.pi)) * dv
            ) + (v - yhat) * (-(self.orbit.period / (2 * np.pi)) * (2 * n + 1) * u ** (2 * n) * du)
            theta = theta - g / gp
        return np.mod(theta, 2.0 * np.pi).reshape(shape), I
