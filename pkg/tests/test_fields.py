import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edtorus.errors import NonPositiveConformalFactor
from edtorus.fields import (
    ExponentTable,
    ScalarField,
    SpinorField,
    SpinStructure,
    TorusGrid,
    constant_field,
    constant_spinor,
    field_from_function,
    fourier_transform,
    inverse_fourier_scalar,
    inverse_fourier_spinor,
    quadrature,
    read_snapshot,
    scalar_field,
    weighted_spinor_inner,
    weighted_spinor_inner_c,
    write_snapshot,
)

VOL = (2 * np.pi) ** 3


def random_spinor(grid, spin, rng):
    v = rng.standard_normal(grid.shape + (2,)) + 1j * rng.standard_normal(grid.shape + (2,))
    return SpinorField(grid, spin, v)


class TestGridAndTypes:
    def test_grid_invariants(self):
        g = TorusGrid(8)
        assert g.h == pytest.approx(2 * np.pi / 8)
        assert g.cell_volume == pytest.approx(g.h ** 3)
        with pytest.raises(ValueError):
            TorusGrid(7)
        with pytest.raises(ValueError):
            TorusGrid(2)
        with pytest.raises(ValueError):
            TorusGrid(8, -1.0)

    def test_storage_order_third_axis_fastest(self):
        g = TorusGrid(4)
        f = field_from_function(g, lambda x, y, z: x + 10 * y + 100 * z)
        flat = f.values.reshape(-1)
        # lexicographic (i, j, k): consecutive entries step the third axis
        assert flat[1] - flat[0] == pytest.approx(100 * g.h)
        assert flat[g.n] - flat[0] == pytest.approx(10 * g.h)

    def test_spin_structure_validation(self):
        assert SpinStructure().shift == (0.5, 0.5, 0.5)
        assert SpinStructure((0, 0, 0)).trivial
        with pytest.raises(ValueError):
            SpinStructure((0.3, 0, 0))

    def test_field_validation(self):
        g = TorusGrid(4)
        with pytest.raises(ValueError):
            scalar_field(g, np.full(g.shape, np.nan))
        with pytest.raises(ValueError):
            ScalarField(g, np.zeros((4, 4)))

    def test_fields_are_frozen(self):
        g = TorusGrid(4)
        f = constant_field(g, 1.0)
        with pytest.raises(ValueError):
            f.values[0, 0, 0] = 2.0


class TestExponents:
    def test_values_at_m3(self):
        e = ExponentTable(3)
        assert (e.p1, e.p2, e.p3, e.p4, e.p5, e.p6, e.p7, e.c_m) == \
            (2, 1, 5, 4, 6, 3, 4, 8)

    @given(st.integers(min_value=3, max_value=14))
    @settings(max_examples=12, deadline=None)
    def test_exponent_identities(self, m):
        e = ExponentTable(m)
        assert e.p3 - e.p4 == pytest.approx(1.0)
        assert e.p5 == pytest.approx(e.p3 + 1.0)
        assert e.p1 + e.p2 == pytest.approx(e.p4 - 1.0)
        assert e.p6 == pytest.approx(e.p1 + 1.0)


class TestFourier:
    def test_constant_mode(self, grid8):
        c = fourier_transform(constant_field(grid8, 1.0))
        assert c[0, 0, 0] == pytest.approx(1.0)
        c[0, 0, 0] = 0
        assert np.abs(c).max() < 1e-14

    def test_cosine_coefficients(self, grid8):
        f = field_from_function(grid8, lambda x, y, z: np.cos(x))
        c = fourier_transform(f)
        assert c[1, 0, 0] == pytest.approx(0.5, abs=1e-14)
        assert c[-1, 0, 0] == pytest.approx(0.5, abs=1e-14)

    def test_scalar_round_trip(self, grid8, rng):
        f = scalar_field(grid8, rng.standard_normal(grid8.shape))
        back = inverse_fourier_scalar(grid8, fourier_transform(f))
        assert np.abs(back.values - f.values).max() <= 1e-12 * np.abs(f.values).max()

    def test_spinor_round_trip(self, grid8, spin, rng):
        psi = random_spinor(grid8, spin, rng)
        back = inverse_fourier_spinor(grid8, spin, fourier_transform(psi))
        assert np.abs(back.values - psi.values).max() <= 1e-12 * np.abs(psi.values).max()

    def test_parseval(self, grid8, rng):
        # band-limited random field: h^3 sum f^2 = L^3 sum |fhat|^2
        coeffs = np.zeros(grid8.shape, dtype=complex)
        for _ in range(12):
            k = tuple(rng.integers(-2, 3, size=3))
            a = rng.standard_normal() + 1j * rng.standard_normal()
            coeffs[k] += a
            coeffs[tuple(-np.array(k))] += np.conj(a)
        f = inverse_fourier_scalar(grid8, coeffs)
        lhs = quadrature(scalar_field(grid8, f.values ** 2))
        fh = fourier_transform(f)
        rhs = grid8.length ** 3 * np.sum(np.abs(fh) ** 2)
        assert lhs == pytest.approx(rhs, rel=1e-10)


class TestQuadrature:
    def test_volume(self, grid8):
        assert quadrature(constant_field(grid8, 1.0)) == pytest.approx(VOL)

    def test_mean_zero_mode(self, grid8):
        f = field_from_function(grid8, lambda x, y, z: np.cos(x))
        assert quadrature(f) == pytest.approx(0.0, abs=1e-12)

    def test_half_power(self, grid8):
        f = field_from_function(grid8, lambda x, y, z: np.cos(x) ** 2)
        assert quadrature(f) == pytest.approx(VOL / 2)

    def test_bit_reproducible(self, grid8, rng):
        f = scalar_field(grid8, rng.standard_normal(grid8.shape))
        vals = {quadrature(f) for _ in range(5)}
        assert len(vals) == 1


class TestWeightedInner:
    def test_unit_weight(self, exps):
        g = TorusGrid(8)
        sp = SpinStructure((0, 0, 0))
        psi = constant_spinor(g, sp, (1.0, 0.0))
        u = constant_field(g, 1.0)
        assert weighted_spinor_inner(u, psi, psi, exps) == pytest.approx(VOL)

    def test_u_squared_weight(self, exps):
        g = TorusGrid(8)
        sp = SpinStructure((0, 0, 0))
        psi = constant_spinor(g, sp, (1.0, 0.0))
        u = constant_field(g, 2.0)
        assert weighted_spinor_inner(u, psi, psi, exps) == pytest.approx(4 * VOL)

    def test_mode_orthogonality(self, exps, grid8, spin):
        x1 = grid8.coords()[0]
        a = np.zeros(grid8.shape + (2,), dtype=complex)
        a[..., 0] = np.exp(1j * x1)
        b = np.zeros_like(a)
        b[..., 0] = np.exp(2j * x1)
        inner = weighted_spinor_inner_c(constant_field(grid8, 1.0),
                                        SpinorField(grid8, spin, a),
                                        SpinorField(grid8, spin, b), exps)
        assert abs(inner) < 1e-12 * VOL

    def test_positive_definite(self, exps, grid8, spin, rng):
        u = scalar_field(grid8, 1.0 + 0.4 * rng.uniform(-1, 1, grid8.shape))
        for _ in range(5):
            psi = random_spinor(grid8, spin, rng)
            assert weighted_spinor_inner(u, psi, psi, exps) > 0

    def test_symmetry(self, exps, grid8, spin, rng):
        u = scalar_field(grid8, 1.0 + 0.4 * rng.uniform(-1, 1, grid8.shape))
        a, b = random_spinor(grid8, spin, rng), random_spinor(grid8, spin, rng)
        assert weighted_spinor_inner(u, a, b, exps) == pytest.approx(
            weighted_spinor_inner(u, b, a, exps), rel=1e-12)

    def test_rejects_nonpositive_weight(self, exps, grid8, spin, rng):
        u = scalar_field(grid8, np.zeros(grid8.shape))
        psi = random_spinor(grid8, spin, rng)
        with pytest.raises(NonPositiveConformalFactor):
            weighted_spinor_inner(u, psi, psi, exps)


class TestSnapshotFormat:
    def test_scalar_round_trip(self, tmp_path, grid8, rng):
        f = scalar_field(grid8, rng.standard_normal(grid8.shape))
        path = tmp_path / "f.edf"
        write_snapshot(path, f)
        g = read_snapshot(path)
        assert g.grid.n == grid8.n
        assert np.array_equal(g.values, f.values)

    def test_spinor_round_trip(self, tmp_path, grid8, spin, rng):
        psi = random_spinor(grid8, spin, rng)
        path = tmp_path / "psi.edf"
        write_snapshot(path, psi)
        back = read_snapshot(path)
        assert np.array_equal(back.values, psi.values)

    def test_header_layout(self, tmp_path, grid8):
        path = tmp_path / "one.edf"
        write_snapshot(path, constant_field(grid8, 1.0))
        raw = path.read_bytes()
        assert raw[:4] == b"EDF1"
        n = int.from_bytes(raw[4:8], "little")
        kind = int.from_bytes(raw[8:12], "little")
        assert (n, kind) == (grid8.n, 0)
        assert len(raw) == 16 + 8 * grid8.num_points
