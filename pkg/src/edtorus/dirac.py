"""Flat-torus Dirac operator, spin-shifted Fourier action, quaternionic structure.

Clifford convention: Pauli matrices, D = -i * sum_a sigma_a d_a, so the symbol
on the plane wave exp(i kappa.x) is sigma . kappa with kappa = (2*pi/L)(k + delta).
The binding contracts are self-adjointness and the symbol eigenvalues +-|kappa|,
not any external sign convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .fields import (
    SpinorField,
    SpinStructure,
    TorusGrid,
    TWO_PI,
    _integer_modes,
    spinor_momentum,
)

SIGMA1 = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=np.complex128)
SIGMA2 = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=np.complex128)
SIGMA3 = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=np.complex128)


@dataclass(frozen=True)
class CliffordFrame:
    """The three constant 2x2 hermitian matrices giving Clifford multiplication."""

    sigma: tuple = field(default=(SIGMA1, SIGMA2, SIGMA3))

    def anticommutator_defect(self) -> float:
        """max |sigma_a sigma_b + sigma_b sigma_a - 2 delta_ab I| over all a, b."""
        worst = 0.0
        for a in range(3):
            for b in range(3):
                acom = self.sigma[a] @ self.sigma[b] + self.sigma[b] @ self.sigma[a]
                target = 2.0 * np.eye(2) if a == b else np.zeros((2, 2))
                worst = max(worst, float(np.abs(acom - target).max()))
        return worst

    def hermiticity_defect(self) -> float:
        return max(float(np.abs(s - s.conj().T).max()) for s in self.sigma)

    def trace_defect(self) -> float:
        return max(float(abs(np.trace(s))) for s in self.sigma)


def _apply_symbol(k1, k2, k3, comp0, comp1):
    """Apply the 2x2 matrix sigma.kappa pointwise over mode arrays."""
    out0 = k3 * comp0 + (k1 - 1j * k2) * comp1
    out1 = (k1 + 1j * k2) * comp0 - k3 * comp1
    return out0, out1


def apply_dirac(psi: SpinorField) -> SpinorField:
    """Spectral Dirac action; hermitian in the unweighted L^2 spinor product."""
    k1, k2, k3 = spinor_momentum(psi.grid.n, psi.grid.length, psi.spin.shift)
    hat = np.fft.fftn(psi.values, axes=(0, 1, 2))
    out = np.empty_like(hat)
    out[..., 0], out[..., 1] = _apply_symbol(k1, k2, k3, hat[..., 0], hat[..., 1])
    return SpinorField(psi.grid, psi.spin, np.fft.ifftn(out, axes=(0, 1, 2)))


def flat_spectrum_oracle(grid: TorusGrid, spin: SpinStructure, window):
    """Closed-form flat spectrum: +-|kappa| over the shifted mode lattice.

    Returns [(lambda, complex multiplicity)] restricted to the (bounded)
    window, eigenvalues grouped to 1e-12 relative and sorted ascending.
    Each nonzero mode contributes one +|kappa| and one -|kappa| eigenvector;
    a zero mode (trivial shift only) contributes the 2-dimensional kernel.
    """
    lo, hi = window
    k1, k2, k3 = _integer_modes(grid.n)
    scale = TWO_PI / grid.length
    kap = scale * np.sqrt(
        (k1 + spin.shift[0]) ** 2 + (k2 + spin.shift[1]) ** 2 + (k3 + spin.shift[2]) ** 2
    )
    kap = kap.ravel()
    eigs = np.concatenate([kap[kap > 0], -kap[kap > 0], np.zeros(2 * int(np.sum(kap == 0)))])
    eigs = np.sort(eigs[(eigs >= lo) & (eigs <= hi)])
    out = []
    for lam in eigs:
        if out and abs(lam - out[-1][0]) <= 1e-12 * (1.0 + abs(lam)):
            out[-1][1] += 1
        else:
            out.append([float(lam), 1])
    return [(lam, mult) for lam, mult in out]


@lru_cache(maxsize=None)
def _j_phase(n: int, length: float, shift: tuple):
    """Periodic phase exp(-i*(2*pi/L)*(2*delta).x) relating J to the stored gauge."""
    grid = TorusGrid(n, length)
    x1, x2, x3 = grid.coords()
    theta = (TWO_PI / length) * (shift[0] * x1 + shift[1] * x2 + shift[2] * x3)
    phase = np.exp(-2j * theta)
    phase.setflags(write=False)
    return phase


def j_values(grid: TorusGrid, spin: SpinStructure, values: np.ndarray) -> np.ndarray:
    """Raw-array form of the quaternionic structure (no field wrapping)."""
    phase = _j_phase(grid.n, grid.length, spin.shift)
    v = np.conjugate(values)
    out = np.empty_like(v)
    out[..., 0] = phase * (-1j) * v[..., 1]
    out[..., 1] = phase * (1j) * v[..., 0]
    return out


def quaternionic_j(psi: SpinorField) -> SpinorField:
    """Antilinear J with J^2 = -1, commuting with D and with real multiplication.

    On physical sections J(psi) = sigma_2 conj(psi); in the stored gauge this
    picks up the periodic phase exp(-2i theta), theta = (2*pi/L) delta.x.
    """
    return SpinorField(psi.grid, psi.spin,
                       j_values(psi.grid, psi.spin, psi.values))
