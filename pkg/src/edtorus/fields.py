"""Grid, fields and Fourier plumbing for the flat 3-torus [0, L)^3.

Scalar fields are real arrays of shape (n, n, n) in x-major storage (the
third axis fastest), spinor fields are complex arrays of shape (n, n, n, 2).
Spinors are stored in the trivialized periodic gauge: the physical section
psi(x) = exp(i*(2*pi/L)*delta.x) * stored(x), where delta is the spin-structure
shift, so every stored array is periodic and one FFT kernel serves both field
kinds.  All momenta below are angular: kappa = (2*pi/L)*(k + delta).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .errors import NonPositiveConformalFactor

TWO_PI = 2.0 * np.pi

DEFAULT_SHIFT = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class TorusGrid:
    """Uniform periodic grid on [0, L)^3 with n points per axis (n even, >= 4)."""

    n: int
    length: float = TWO_PI

    def __post_init__(self):
        if self.n < 4 or self.n % 2 != 0:
            raise ValueError(f"grid size must be an even integer >= 4, got {self.n}")
        if not self.length > 0:
            raise ValueError(f"side length must be positive, got {self.length}")

    @property
    def h(self) -> float:
        return self.length / self.n

    @property
    def cell_volume(self) -> float:
        """Quadrature weight h^3 of one grid cell."""
        return self.h ** 3

    @property
    def shape(self):
        return (self.n, self.n, self.n)

    @property
    def num_points(self) -> int:
        return self.n ** 3

    def axis(self) -> np.ndarray:
        return np.arange(self.n) * self.h

    def coords(self):
        """Meshgrid coordinate arrays (x1, x2, x3), each of shape (n, n, n)."""
        return np.meshgrid(self.axis(), self.axis(), self.axis(), indexing="ij")


@dataclass(frozen=True)
class ExponentTable:
    """All conformal exponents of dimension m in one place.

    p1 = 2/(m-2) is the pencil weight exponent, p3 = (m+2)/(m-2) the critical
    Sobolev exponent, c_m = 4(m-1)/(m-2) the conformal-Laplacian coefficient.
    Values are exact rationals evaluated to float; all are integers at m = 3.
    """

    m: int = 3

    def __post_init__(self):
        if self.m < 3:
            raise ValueError("dimension must be at least 3")

    def _q(self, num, den=None) -> float:
        return float(Fraction(num, self.m - 2 if den is None else den))

    @property
    def p1(self) -> float:
        return self._q(2)

    @property
    def p2(self) -> float:
        return self._q(4 - self.m)

    @property
    def p3(self) -> float:
        return self._q(self.m + 2)

    @property
    def p4(self) -> float:
        return self._q(4)

    @property
    def p5(self) -> float:
        return self._q(2 * self.m)

    @property
    def p6(self) -> float:
        return self._q(self.m)

    @property
    def p7(self) -> float:
        return self._q(2 * (self.m - 1))

    @property
    def c_m(self) -> float:
        return self._q(4 * (self.m - 1))


@dataclass(frozen=True)
class SpinStructure:
    """One of the 8 spin structures of T^3, encoded by a half-integer shift."""

    shift: tuple = DEFAULT_SHIFT

    def __post_init__(self):
        if len(self.shift) != 3 or any(s not in (0, 0.5) for s in self.shift):
            raise ValueError(f"spin shift components must be 0 or 0.5, got {self.shift}")
        object.__setattr__(self, "shift", tuple(float(s) for s in self.shift))

    @property
    def trivial(self) -> bool:
        return all(s == 0.0 for s in self.shift)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScalarField:
    grid: TorusGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != self.grid.shape:
            raise ValueError(f"scalar values must have shape {self.grid.shape}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("scalar field contains non-finite values")
        object.__setattr__(self, "values", _freeze(v))

    def min(self) -> float:
        return float(self.values.min())

    def max(self) -> float:
        return float(self.values.max())


@dataclass(frozen=True)
class SpinorField:
    grid: TorusGrid
    spin: SpinStructure
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.complex128)
        if v.shape != self.grid.shape + (2,):
            raise ValueError(f"spinor values must have shape {self.grid.shape + (2,)}, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("spinor field contains non-finite values")
        object.__setattr__(self, "values", _freeze(v))


def scalar_field(grid: TorusGrid, values) -> ScalarField:
    return ScalarField(grid, np.broadcast_to(np.asarray(values, dtype=np.float64), grid.shape).copy())


def constant_field(grid: TorusGrid, value: float) -> ScalarField:
    return scalar_field(grid, np.full(grid.shape, float(value)))


def field_from_function(grid: TorusGrid, fn) -> ScalarField:
    x1, x2, x3 = grid.coords()
    return scalar_field(grid, fn(x1, x2, x3))


def spinor_field(grid: TorusGrid, spin: SpinStructure, values) -> SpinorField:
    return SpinorField(grid, spin, values)


def constant_spinor(grid: TorusGrid, spin: SpinStructure, fiber) -> SpinorField:
    v = np.zeros(grid.shape + (2,), dtype=np.complex128)
    v[..., 0] = fiber[0]
    v[..., 1] = fiber[1]
    return SpinorField(grid, spin, v)


# ---------------------------------------------------------------------------
# Fourier plumbing.
#
# Convention: fourier_transform returns coefficients c(k) with
#   f(x) = sum_k c(k) exp(i*(2*pi/L)*k.x),   k integer modes in [-n/2, n/2)^3,
# i.e. the constant field has c(0) = 1.  numpy's fftn/(n^3) realizes this.
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _integer_modes(n: int):
    k = np.fft.fftfreq(n, d=1.0 / n)  # exact integers [0..n/2-1, -n/2..-1]
    kx, ky, kz = np.meshgrid(k, k, k, indexing="ij")
    return _freeze(kx), _freeze(ky), _freeze(kz)


@lru_cache(maxsize=None)
def scalar_momentum(n: int, length: float):
    """Angular wavevector components (2*pi/L)*k for scalar fields."""
    scale = TWO_PI / length
    return tuple(_freeze(scale * k) for k in _integer_modes(n))


@lru_cache(maxsize=None)
def spinor_momentum(n: int, length: float, shift: tuple):
    """Shifted angular wavevector components (2*pi/L)*(k + delta) for spinors."""
    scale = TWO_PI / length
    return tuple(
        _freeze(scale * (k + d)) for k, d in zip(_integer_modes(n), shift)
    )


def fourier_transform(f):
    """Normalized forward DFT of a ScalarField or SpinorField (per component)."""
    if isinstance(f, ScalarField):
        return np.fft.fftn(f.values) / f.grid.num_points
    if isinstance(f, SpinorField):
        return np.fft.fftn(f.values, axes=(0, 1, 2)) / f.grid.num_points
    raise TypeError(f"expected a field, got {type(f)!r}")


def inverse_fourier_scalar(grid: TorusGrid, coeffs: np.ndarray) -> ScalarField:
    return scalar_field(grid, np.fft.ifftn(coeffs * grid.num_points).real)


def inverse_fourier_spinor(grid: TorusGrid, spin: SpinStructure, coeffs: np.ndarray) -> SpinorField:
    return SpinorField(grid, spin, np.fft.ifftn(coeffs * grid.num_points, axes=(0, 1, 2)))


# ---------------------------------------------------------------------------
# Quadrature and inner products.  np.sum uses pairwise reduction on
# contiguous arrays, which keeps every reduction bit-reproducible.
# ---------------------------------------------------------------------------

def integrate_values(grid: TorusGrid, values: np.ndarray) -> float:
    return grid.cell_volume * float(np.sum(values))


def quadrature(f: ScalarField) -> float:
    """h^3 * sum of values: exact for band-limited integrands below Nyquist."""
    return integrate_values(f.grid, f.values)


def scalar_l2_norm(f: ScalarField) -> float:
    return float(np.sqrt(f.grid.cell_volume * np.sum(f.values ** 2)))


def pointwise_norm_sq(psi: SpinorField) -> np.ndarray:
    """|psi(x)|^2, gauge independent (the trivializing phase cancels)."""
    v = psi.values
    return (v.real ** 2 + v.imag ** 2).sum(axis=-1)


def spinor_l2_inner(psi: SpinorField, phi: SpinorField) -> complex:
    """Unweighted L^2 hermitian product, conjugate-linear in the first slot."""
    return psi.grid.cell_volume * complex(np.vdot(psi.values, phi.values))


def spinor_l2_norm(psi: SpinorField) -> float:
    return float(np.sqrt(psi.grid.cell_volume * np.sum(np.abs(psi.values) ** 2)))


def require_positive(u: ScalarField, what: str = "conformal factor") -> None:
    if u.min() <= 0.0:
        raise NonPositiveConformalFactor(f"{what} must be positive, min = {u.min():.3e}")


def weighted_spinor_inner_c(u: ScalarField, psi: SpinorField, phi: SpinorField,
                            exps: ExponentTable) -> complex:
    """Complex u-weighted pairing int u^p1 (psi, phi) dvol (no real part taken)."""
    require_positive(u)
    w = u.values ** exps.p1
    s = np.sum(w[..., None] * np.conjugate(psi.values) * phi.values)
    return u.grid.cell_volume * complex(s)


def weighted_spinor_inner(u: ScalarField, psi: SpinorField, phi: SpinorField,
                          exps: ExponentTable) -> float:
    """The weighted inner product Re int u^{2/(m-2)} (psi, phi) dvol."""
    return weighted_spinor_inner_c(u, psi, phi, exps).real


def weighted_spinor_norm(u: ScalarField, psi: SpinorField, exps: ExponentTable) -> float:
    return float(np.sqrt(max(weighted_spinor_inner(u, psi, psi, exps), 0.0)))


# ---------------------------------------------------------------------------
# Field snapshot binary format "EDF1":
#   magic "EDF1" | u32 n | u32 kind (0 scalar, 1 spinor) | u32 reserved |
#   little-endian float64 payload in storage order; spinor payload is
#   interleaved re/im, component-major within each grid point.
# ---------------------------------------------------------------------------

_MAGIC = b"EDF1"


def write_snapshot(path, f) -> None:
    if isinstance(f, ScalarField):
        kind, payload = 0, np.ascontiguousarray(f.values, dtype="<f8")
    elif isinstance(f, SpinorField):
        kind = 1
        payload = np.ascontiguousarray(f.values).view(np.float64).astype("<f8", copy=False)
    else:
        raise TypeError(f"expected a field, got {type(f)!r}")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", f.grid.n, kind, 0))
        fh.write(payload.tobytes())


def read_snapshot(path, length: float = TWO_PI, spin: SpinStructure | None = None):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"bad snapshot magic {magic!r}")
        n, kind, _reserved = struct.unpack("<III", fh.read(12))
        raw = np.frombuffer(fh.read(), dtype="<f8")
    grid = TorusGrid(n, length)
    if kind == 0:
        if raw.size != grid.num_points:
            raise ValueError("scalar snapshot payload has wrong size")
        return scalar_field(grid, raw.reshape(grid.shape))
    if kind == 1:
        if raw.size != 4 * grid.num_points:
            raise ValueError("spinor snapshot payload has wrong size")
        cplx = raw.astype(np.float64).view(np.complex128).reshape(grid.shape + (2,))
        return SpinorField(grid, spin or SpinStructure(), cplx)
    raise ValueError(f"unknown snapshot kind {kind}")
