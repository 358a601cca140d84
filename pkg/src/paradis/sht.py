"""Naive spherical harmonic analysis and synthesis on equiangular grids.

The longitude direction uses the discrete Fourier transform (exact on a
uniform periodic grid). The latitude direction projects onto associated
Legendre functions evaluated at the grid rows, re-orthonormalized against
the discrete area-weighted inner product: per order m we form the Gram
matrix of the sampled, normalized Legendre functions and absorb its inverse
square root into the basis. The resulting discrete basis

* deviates from the continuum harmonics only at quadrature order,
* is exactly orthonormal under the grid's cell-area weights, hence
  analysis o synthesis is the identity on band-limited fields and the
  discrete Parseval identity holds to rounding.

Complex coefficients are stored densely as ``a[l, m]`` for 0 <= m <= l <=
l_max (entries with m > l are zero); negative orders follow from the real
field symmetry a[l,-m] = (-1)^m conj(a[l,m]).

Cost is O(l_max^2 * H * W); intended for verification and desk-scale
training, not production transforms.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, make_op
from .sphere import cell_solid_angles

SQRT4PI = math.sqrt(4.0 * math.pi)


def legendre_table(l_max, x):
    """Fully normalized associated Legendre functions at points ``x``.

    Returns ``P[l, m, i]`` with the Condon-Shortley phase, normalized so the
    spherical harmonics N*P*exp(im lambda) are orthonormal over the sphere:
    integral |Y_lm|^2 dOmega = 1.
    """
    x = np.asarray(x, dtype=np.float64)
    s = np.sqrt(np.maximum(0.0, 1.0 - x * x))
    p = np.zeros((l_max + 1, l_max + 1, x.size))
    p[0, 0] = 1.0 / SQRT4PI
    for m in range(1, l_max + 1):
        p[m, m] = -math.sqrt((2 * m + 1) / (2.0 * m)) * s * p[m - 1, m - 1]
    for m in range(l_max):
        p[m + 1, m] = math.sqrt(2 * m + 3) * x * p[m, m]
    for m in range(l_max + 1):
        for l in range(m + 2, l_max + 1):
            a = math.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = math.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
            p[l, m] = a * (x * p[l - 1, m] - b * p[l - 2, m])
    return p


class SphericalTransform:
    """Plans analysis/synthesis for one grid and truncation ``l_max``."""

    def __init__(self, grid, l_max):
        h, w = grid.shape
        cap = min(h - 1, w // 2 - 1)
        if not (0 <= l_max <= cap):
            raise ValueError(f"l_max={l_max} exceeds grid limit {cap}")
        self.grid = grid
        self.l_max = l_max
        self.omega = cell_solid_angles(grid)  # per-row cell solid angle
        x = np.sin(grid.lat_rad)
        table = legendre_table(l_max, x)

        # per-order orthonormalization against the discrete weighted metric;
        # ascending Cholesky keeps each degree unmixed with higher ones, so
        # e.g. a constant field stays purely an l=0 coefficient
        self._basis = []     # B_m: (n_l, H), discrete-orthonormal rows
        self._analysis = []  # B_m * diag(omega) * W factor folded in
        for m in range(l_max + 1):
            lm = table[m:, m, :]  # rows l = m..l_max
            gram = w * ((lm * self.omega) @ lm.T)
            try:
                chol = np.linalg.cholesky(gram)
            except np.linalg.LinAlgError as exc:
                raise ValueError(
                    f"degenerate latitude basis at m={m}; lower l_max") from exc
            basis = np.linalg.solve(chol, lm)
            self._basis.append(basis)
            self._analysis.append(basis * self.omega)

    # -- plain numpy interface ---------------------------------------------

    def analyze(self, field):
        """Forward transform of ``field[..., H, W]`` to ``a[..., L+1, L+1]``."""
        field = np.asarray(field, dtype=np.float64)
        h, w = self.grid.shape
        if field.shape[-2:] != (h, w):
            raise ValueError(f"field shape {field.shape} does not match grid")
        fm = np.fft.rfft(field, axis=-1)  # sum_j f exp(-i m lambda_j)
        lmax = self.l_max
        out = np.zeros(field.shape[:-2] + (lmax + 1, lmax + 1), dtype=complex)
        for m in range(lmax + 1):
            # a[l,m] = sum_i omega_i B_lm(i) F_m(i)
            out[..., m:, m] = fm[..., m] @ self._analysis[m].T
        return out

    def synthesize(self, coeffs):
        """Inverse transform of ``a[..., L+1, L+1]`` back to a real field."""
        coeffs = np.asarray(coeffs, dtype=complex)
        lmax = self.l_max
        if coeffs.shape[-2:] != (lmax + 1, lmax + 1):
            raise ValueError(f"coefficient shape {coeffs.shape} unexpected")
        h, w = self.grid.shape
        spec = np.zeros(coeffs.shape[:-2] + (h, w // 2 + 1), dtype=complex)
        for m in range(lmax + 1):
            spec[..., m] = coeffs[..., m:, m] @ self._basis[m]
        # real synthesis: a[l,0] B + 2 Re sum_{m>0} a[l,m] B exp(im lambda),
        # which is exactly what irfft reconstructs from one-sided bins
        spec[..., 0] = spec[..., 0].real
        return np.fft.irfft(spec * w, n=w, axis=-1)

    # -- coefficient utilities ---------------------------------------------

    def degree_multiplicity(self):
        """Coefficient multiplicity per (l, m) cell: 1 for m=0, else 2."""
        mult = np.full((self.l_max + 1, self.l_max + 1), 2.0)
        mult[:, 0] = 1.0
        return np.tril(mult)

    def power_per_degree(self, coeffs):
        """Total power per degree l, counting both signs of m."""
        mult = self.degree_multiplicity()
        return (mult * np.abs(coeffs) ** 2).sum(axis=-1)

    def cross_power_per_degree(self, fc, oc):
        """Re <F_l, O_l> per degree, counting both signs of m."""
        mult = self.degree_multiplicity()
        return (mult * (fc * np.conj(oc)).real).sum(axis=-1)

    # -- differentiable interface ------------------------------------------

    def analyze_tensor(self, x):
        """Differentiable analysis of ``x[C,H,W]`` (or [H,W]).

        Returns a Tensor shaped [..., 2, L+1, L+1] carrying the real and
        imaginary coefficient parts; the backward rule is the exact adjoint
        of the linear analysis map.
        """
        squeeze = x.ndim == 2
        data = x.data[None] if squeeze else x.data
        if data.ndim != 3:
            raise ValueError("analyze_tensor expects [C,H,W] or [H,W]")
        coeffs = self.analyze(data)
        out = np.stack([coeffs.real, coeffs.imag], axis=1)  # [C,2,L+1,L+1]
        if squeeze:
            out = out[0]

        h, w = self.grid.shape
        lmax = self.l_max

        def back(g):
            gc = g[None] if squeeze else g
            c = gc[:, 0] + 1j * gc[:, 1]  # [C, L+1, L+1]
            spec = np.zeros((gc.shape[0], h, w // 2 + 1), dtype=complex)
            for m in range(lmax + 1):
                spec[..., m] = c[..., m:, m] @ self._analysis[m]
            spec[..., 0] = spec[..., 0].real
            spec[..., 1:] *= 0.5
            gx = np.fft.irfft(spec * w, n=w, axis=-1)
            return (gx[0] if squeeze else gx,)

        return make_op("sht-analyze", (x,), out, back)
