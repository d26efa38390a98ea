"""Generalized eigenvalue pencil D psi = lambda u^{2/(m-2)} psi on the torus.

The pencil is symmetrized to C = B^{-1/2} D B^{-1/2} with B = multiplication
by u^{2/(m-2)}: B is a positive diagonal in physical space and D is diagonal
in Fourier space, so C stays fully matrix-free.  Eigenvectors chi of C map to
pencil eigenspinors psi = B^{-1/2} chi, and L^2-orthonormality of the chi's
is exactly u-weighted orthonormality of the psi's.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import qr as pivoted_qr
from scipy.sparse.linalg import LinearOperator, minres

from .errors import ConvergenceFailure, GridTooLarge, NonPositiveConformalFactor, WindowTooNarrow
from .fields import (
    ExponentTable,
    ScalarField,
    SpinorField,
    SpinStructure,
    require_positive,
    spinor_momentum,
    weighted_spinor_inner,
)

#: eigenvalues closer than this (relative) are treated as one cluster
CLUSTER_REL_TOL = 1e-6

#: default exterior gap below which a cluster is not called simple
DEFAULT_GAP_TOL = 1e-3


class Pencil:
    """Matrix-free symmetrized pencil operator acting on packed spinor vectors."""

    def __init__(self, u: ScalarField, spin: SpinStructure, exps: ExponentTable):
        require_positive(u)
        self.u = u
        self.spin = spin
        self.exps = exps
        self.grid = u.grid
        self.weight = u.values ** exps.p1
        self.b_half = u.values ** (0.5 * exps.p1)
        self.dim = 2 * self.grid.num_points
        self._kappa = spinor_momentum(self.grid.n, self.grid.length, spin.shift)

    # -- raw array plumbing ------------------------------------------------

    def _dirac_raw(self, values: np.ndarray) -> np.ndarray:
        """sigma.kappa in Fourier space; values has shape (..., n, n, n, 2)."""
        k1, k2, k3 = self._kappa
        hat = np.fft.fftn(values, axes=(-4, -3, -2))
        out = np.empty_like(hat)
        out[..., 0] = k3 * hat[..., 0] + (k1 - 1j * k2) * hat[..., 1]
        out[..., 1] = (k1 + 1j * k2) * hat[..., 0] - k3 * hat[..., 1]
        return np.fft.ifftn(out, axes=(-4, -3, -2))

    def _c_raw(self, values: np.ndarray) -> np.ndarray:
        scaled = values / self.b_half[..., None]
        return self._dirac_raw(scaled) / self.b_half[..., None]

    # -- packed vector interface --------------------------------------------

    def unpack(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(self.grid.shape + (2,))

    def pack(self, values: np.ndarray) -> np.ndarray:
        return values.reshape(-1)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.pack(self._c_raw(self.unpack(x)))

    def apply_block(self, X: np.ndarray) -> np.ndarray:
        """Apply C to all columns of X (dim, k) in one vectorized FFT pass."""
        k = X.shape[1]
        vals = X.T.reshape((k,) + self.grid.shape + (2,))
        return self._c_raw(vals).reshape(k, self.dim).T

    def to_spinor(self, x: np.ndarray) -> SpinorField:
        """Map an L^2-normalized chi vector to the u-weighted-normalized psi."""
        h3 = self.grid.cell_volume
        chi = self.unpack(x) / np.sqrt(h3 * np.sum(np.abs(x) ** 2))
        return SpinorField(self.grid, self.spin, chi / self.b_half[..., None])

    def from_spinor(self, psi: SpinorField) -> np.ndarray:
        return self.pack(psi.values * self.b_half[..., None])


# ---------------------------------------------------------------------------
# Hermitian MINRES on the doubled real form.  scipy's minres is real-only;
# a complex hermitian system maps to a real symmetric one of twice the size.
# ---------------------------------------------------------------------------

def minres_hermitian(apply_c, b: np.ndarray, precond=None, rtol: float = 1e-11,
                     maxiter: int = 600, x0: Optional[np.ndarray] = None):
    n = b.size

    def to_real(z):
        return np.concatenate([z.real, z.imag])

    def to_complex(zr):
        return zr[:n] + 1j * zr[n:]

    def mv(zr):
        return to_real(apply_c(to_complex(zr)))

    A = LinearOperator((2 * n, 2 * n), matvec=mv, dtype=np.float64)
    M = None
    if precond is not None:
        M = LinearOperator((2 * n, 2 * n), matvec=lambda zr: to_real(precond(to_complex(zr))),
                           dtype=np.float64)
    x0r = to_real(x0) if x0 is not None else None
    sol, info = minres(A, to_real(b), x0=x0r, rtol=rtol, maxiter=maxiter, M=M)
    return to_complex(sol), info


class ShiftedDiagonalPreconditioner:
    """Positive-definite Fourier-diagonal approximation of |C - sigma|^{-1}.

    Built from the mean of u: the symbol of C is approximately
    wbar^{-1} sigma.kappa, so per mode the eigenvalues of C - sigma are
    e_pm = wbar^{-1} (+-|kappa|) - sigma.  The inverse absolute values are
    floored to keep the preconditioner bounded near resonant modes.
    """

    def __init__(self, pencil: Pencil, sigma: float, floor_rel: float = 1e-2):
        wbar = float(np.mean(pencil.weight))
        k1, k2, k3 = pencil._kappa
        kn = np.sqrt(k1 ** 2 + k2 ** 2 + k3 ** 2)
        floor = floor_rel * (1.0 + abs(sigma))
        d_plus = 1.0 / np.maximum(np.abs(kn / wbar - sigma), floor)
        d_minus = 1.0 / np.maximum(np.abs(-kn / wbar - sigma), floor)
        self.diag = 0.5 * (d_plus + d_minus)
        half_diff = 0.5 * (d_plus - d_minus)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(kn > 0, half_diff / np.where(kn > 0, kn, 1.0), 0.0)
        self.bk = (unit * k1, unit * k2, unit * k3)
        self.pencil = pencil

    def __call__(self, x: np.ndarray) -> np.ndarray:
        p = self.pencil
        hat = np.fft.fftn(p.unpack(x), axes=(0, 1, 2))
        b1, b2, b3 = self.bk
        out = np.empty_like(hat)
        out[..., 0] = self.diag * hat[..., 0] + b3 * hat[..., 0] + (b1 - 1j * b2) * hat[..., 1]
        out[..., 1] = self.diag * hat[..., 1] + (b1 + 1j * b2) * hat[..., 0] - b3 * hat[..., 1]
        return p.pack(np.fft.ifftn(out, axes=(0, 1, 2)))


# ---------------------------------------------------------------------------
# Eigenpair containers.
# ---------------------------------------------------------------------------

@dataclass
class EigenPair:
    """(lambda, psi) with psi normalized in the u-weighted inner product."""

    lam: float
    psi: SpinorField

    def constraint_residual(self, u: ScalarField, exps: ExponentTable) -> float:
        from .dirac import apply_dirac

        d = apply_dirac(self.psi).values
        w = u.values ** exps.p1
        resid = d - self.lam * w[..., None] * self.psi.values
        num = np.sqrt(np.sum(np.abs(resid) ** 2))
        den = np.sqrt(np.sum(np.abs(self.psi.values) ** 2))
        return float(num / den)

    def normalization_error(self, u: ScalarField, exps: ExponentTable) -> float:
        return abs(weighted_spinor_inner(u, self.psi, self.psi, exps) - 1.0)


@dataclass
class SpectrumWindow:
    """A batch of eigenpairs of one pencil sorted by eigenvalue."""

    target: float
    count: int
    pairs: list
    u: ScalarField = field(repr=False)
    exps: ExponentTable = field(repr=False)

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.array([p.lam for p in self.pairs])

    def clusters(self, rel_tol: float = CLUSTER_REL_TOL):
        """Indices grouped so consecutive eigenvalues within rel_tol cluster."""
        lams = self.eigenvalues
        groups = []
        for i in range(len(lams)):
            if groups and lams[i] - lams[groups[-1][-1]] <= rel_tol * (1.0 + abs(lams[i])):
                groups[-1].append(i)
            else:
                groups.append([i])
        return groups

    def cluster_containing(self, lam: float, rel_tol: float = CLUSTER_REL_TOL):
        lams = self.eigenvalues
        if len(lams) == 0:
            raise WindowTooNarrow("empty window")
        nearest = int(np.argmin(np.abs(lams - lam)))
        for group in self.clusters(rel_tol):
            if nearest in group:
                return group
        raise WindowTooNarrow("no cluster found")  # pragma: no cover


@dataclass
class SimplicityReport:
    kind: str  # quaternionic_simple | multiple | indeterminate
    cluster_size: int
    cluster_width: float
    exterior_gap: float
    gap_certified: bool


def simplicity_gap(window: SpectrumWindow, lam: float,
                   gap_tol: float = DEFAULT_GAP_TOL) -> SimplicityReport:
    """Classify the cluster at lam: at m = 3 'simple' means complex dimension 2."""
    group = window.cluster_containing(lam)
    lams = window.eigenvalues
    inside = lams[group]
    outside = np.delete(lams, group)
    if outside.size == 0:
        raise WindowTooNarrow("window holds a single cluster; no exterior gap measurable")
    gap = float(min(np.min(np.abs(outside - inside.min())),
                    np.min(np.abs(outside - inside.max()))))
    certified = 0 < group[0] and group[-1] < len(lams) - 1
    width = float(inside.max() - inside.min())
    if gap < gap_tol:
        kind = "indeterminate"
    elif len(group) == 2:
        kind = "quaternionic_simple" if certified else "indeterminate"
    else:
        kind = "multiple"
    return SimplicityReport(kind, len(group), width, gap, certified)


# ---------------------------------------------------------------------------
# Dense oracle: explicit hermitian matrix + complete eigendecomposition.
# ---------------------------------------------------------------------------

@dataclass
class DenseSpectrum:
    pencil: Pencil
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # columns, plain l2-orthonormal chi vectors

    def pair(self, index: int) -> EigenPair:
        psi = self.pencil.to_spinor(self.eigenvectors[:, index])
        return EigenPair(float(self.eigenvalues[index]), psi)

    def nearest_indices(self, target: float, count: int) -> np.ndarray:
        order = np.argsort(np.abs(self.eigenvalues - target), kind="stable")
        sel = np.sort(order[:count])
        return sel

    def window(self, target: float, count: int) -> SpectrumWindow:
        sel = self.nearest_indices(target, count)
        pairs = [self.pair(i) for i in sel]
        return SpectrumWindow(target, count, pairs, self.pencil.u, self.pencil.exps)


DENSE_GRID_LIMIT = 6


def dense_oracle(u: ScalarField, spin: SpinStructure | None = None,
                 exps: ExponentTable | None = None) -> DenseSpectrum:
    """Assemble the symmetrized pencil as an explicit matrix and diagonalize.

    Cross-validation path for the matrix-free solver; limited to n <= 6
    (matrix dimension 2 n^3 <= 432).
    """
    spin = spin or SpinStructure()
    exps = exps or ExponentTable(3)
    if u.grid.n > DENSE_GRID_LIMIT:
        raise GridTooLarge(f"dense path limited to n <= {DENSE_GRID_LIMIT}, got {u.grid.n}")
    pencil = Pencil(u, spin, exps)
    mat = pencil.apply_block(np.eye(pencil.dim, dtype=np.complex128))
    mat = 0.5 * (mat + mat.conj().T)
    evals, evecs = np.linalg.eigh(mat)
    return DenseSpectrum(pencil, evals, evecs)


# ---------------------------------------------------------------------------
# Matrix-free window solver: shift-invert block subspace iteration with
# Rayleigh-Ritz extraction on the true operator.
# ---------------------------------------------------------------------------

def _fix_gauge(x: np.ndarray) -> np.ndarray:
    """Rotate a chi vector so its first significant entry is real positive."""
    mags = np.abs(x)
    idx = int(np.argmax(mags > 1e-8 * mags.max()))
    phase = x[idx] / abs(x[idx])
    return x * np.conjugate(phase)


def _flat_guess(pencil: Pencil, sigma: float, count: int) -> np.ndarray:
    """Plane-wave symbol eigenvectors nearest sigma (after mean-weight scaling):
    a cheap analytic warm start for cold window solves."""
    from .fields import _integer_modes

    grid = pencil.grid
    wbar = float(np.mean(pencil.weight))
    k1, k2, k3 = pencil._kappa
    kn = np.sqrt(k1 ** 2 + k2 ** 2 + k3 ** 2)
    flat = np.concatenate([(kn / wbar).ravel(), (-kn / wbar).ravel()])
    order = np.argsort(np.abs(flat - sigma), kind="stable")[:count]
    npts = grid.num_points
    i1, i2, i3 = (m.ravel() for m in _integer_modes(grid.n))
    x1, x2, x3 = grid.coords()
    scale = 2.0 * np.pi / grid.length
    cols = np.empty((pencil.dim, len(order)), dtype=np.complex128)
    for c, idx in enumerate(order):
        sign = 1.0 if idx < npts else -1.0
        j = idx % npts
        kap = np.array([k1.ravel()[j], k2.ravel()[j], k3.ravel()[j]])
        norm = np.linalg.norm(kap)
        if norm == 0:
            vec = np.array([1.0, 0.0], dtype=np.complex128)
        else:
            symbol = np.array([[kap[2], kap[0] - 1j * kap[1]],
                               [kap[0] + 1j * kap[1], -kap[2]]]) / norm
            _w, v = np.linalg.eigh(symbol)
            vec = v[:, 1] if sign > 0 else v[:, 0]
        phase = np.exp(1j * scale * (i1[j] * x1 + i2[j] * x2 + i3[j] * x3))
        vals = phase[..., None] * vec
        cols[:, c] = (vals * pencil.b_half[..., None]).reshape(-1)
    return cols


def solve_window(u: ScalarField, target: float, count: int,
                 spin: SpinStructure | None = None,
                 exps: ExponentTable | None = None,
                 tol: float = 1e-9, inner_rtol: float = 1e-12,
                 max_outer: int = 80, seed: int = 7261,
                 block_extra: int = 8,
                 warm_start: np.ndarray | None = None) -> SpectrumWindow:
    """Compute `count` eigenpairs of the pencil nearest `target`.

    Folded shift-invert subspace iteration: each sweep applies (C - sigma)^{-2}
    to the block (two preconditioned MINRES solves per column) and extracts
    Ritz pairs of the folded operator, whose smallest eigenvalues are exactly
    the squared distances to sigma.  Folding keeps partially-resolved far
    clusters out of the window (their folded Rayleigh quotients cannot alias
    into it), so degenerate near clusters converge cleanly.  Signed
    eigenvalues are recovered by a final Rayleigh-Ritz of C on the converged
    subspace, and only directly verified constraint residuals are accepted.
    """
    spin = spin or SpinStructure()
    exps = exps or ExponentTable(3)
    pencil = Pencil(u, spin, exps)
    if not 1 <= count <= pencil.dim - 2:
        raise ValueError(f"count must be within the dimension budget, got {count}")

    rng = np.random.default_rng(seed)
    block = min(count + block_extra, pencil.dim)
    X = 1e-3 * (rng.standard_normal((pencil.dim, block))
                + 1j * rng.standard_normal((pencil.dim, block)))
    if warm_start is not None:
        # seed the subspace with known approximate eigenvectors (continuation)
        k = min(warm_start.shape[1], block)
        X[:, :k] += warm_start[:, :k]
    else:
        # cold start: plane-wave symbol eigenvectors nearest the shift
        X += _flat_guess(pencil, float(target), block)
    X, _ = np.linalg.qr(X)

    # chi-residuals overestimate the psi-form constraint residual by at most
    # max(u^p1), so tighten the Ritz threshold accordingly
    eff_tol = tol / max(1.0, float(pencil.weight.max()))

    sigma = float(target)
    shifts_tried = 0
    prec = ShiftedDiagonalPreconditioner(pencil, sigma)

    def shifted(z):
        return pencil.apply(z) - sigma * z

    def shifted_block(Z):
        return pencil.apply_block(Z) - sigma * Z

    def solve_to(b, rel_target):
        """Shifted solve with refinement passes: scipy's minres stops on a
        recursive estimate that can sit orders above the true residual."""
        y = np.zeros_like(b)
        res = b
        bnorm = np.linalg.norm(b)
        for _ in range(4):
            dy, info = minres_hermitian(shifted, res, precond=prec,
                                        rtol=max(inner_rtol, 1e-2 * rel_target))
            if info != 0:
                return y, False
            y = y + dy
            res = b - shifted(y)
            if np.linalg.norm(res) <= rel_target * bnorm:
                return y, True
        return y, np.linalg.norm(res) <= 1e3 * rel_target * bnorm

    last_resid = np.inf
    lock_tol = max(0.02 * eff_tol, 1e-13)
    col_resid = np.full(X.shape[1], np.inf)
    stalls = 0
    for outer in range(1, max_outer + 1):
        # early sweeps only need solves slightly tighter than the current
        # subspace accuracy; final sweeps go to the floor.  Columns whose
        # folded residual already sits below the lock threshold skip their
        # solves; their directions stay in the basis through X.
        rel_target = float(np.clip(1e-2 * last_resid, 1e-12, 3e-5))
        active = [j for j in range(X.shape[1]) if col_resid[j] > lock_tol]
        y_cols = []
        solve_ok = True
        for j in active:
            y1, ok1 = solve_to(X[:, j], rel_target)
            y2, ok2 = solve_to(y1, rel_target)
            if not (ok1 and ok2):
                solve_ok = False
                break
            y_cols.append(y2)
        if not solve_ok:
            # resonant shift (sigma on or next to an eigenvalue): nudge hard
            # enough that the shifted systems become Krylov-tractable
            if shifts_tried >= 2:
                raise ConvergenceFailure(
                    f"inner shift solves failed at sigma={sigma}", iterations=outer)
            shifts_tried += 1
            sigma += 2e-3 * (1.0 + abs(sigma)) * (1 if shifts_tried == 1 else -2)
            prec = ShiftedDiagonalPreconditioner(pencil, sigma)
            continue

        # Augmenting the trial space with the previous block (Rayleigh-Ritz
        # over span[Y, X]) roughly squares the per-sweep convergence factor,
        # but near convergence Y is almost parallel to X and the stacked QR
        # extracts new directions from cancelling differences, flooring the
        # attainable residual at roundoff * |(C-sigma)^2|.  Run plain sweeps
        # (Y plus only the locked columns) once the subspace is close.
        locked_cols = [j for j in range(X.shape[1]) if col_resid[j] <= lock_tol]
        pieces = []
        if y_cols:
            pieces.append(np.column_stack(y_cols))
        if last_resid > 1e-4:
            pieces.append(X)
        elif locked_cols:
            pieces.append(X[:, locked_cols])
        stacked = np.hstack(pieces) if pieces else X
        basis, R, _ = pivoted_qr(stacked, mode="economic", pivoting=True)
        rdiag = np.abs(np.diag(R))
        keep = rdiag > 1e-10 * rdiag[0]
        Q = basis[:, keep]
        FQ = shifted_block(shifted_block(Q))
        Hf = Q.conj().T @ FQ
        Hf = 0.5 * (Hf + Hf.conj().T)
        mu, V = np.linalg.eigh(Hf)  # ascending squared distances to sigma
        take = min(block, Q.shape[1])
        X = Q @ V[:, :take]
        FX = FQ @ V[:, :take]
        col_resid = np.linalg.norm(FX - X * mu[:take], axis=0)
        last_resid = float(col_resid[:count].max())
        if last_resid > 50.0 * eff_tol:
            continue

        # attempt signed recovery on the (near-)invariant subspace; accept
        # only on directly verified residuals of C itself
        S = X[:, :count]
        CS = pencil.apply_block(S)
        Hc = S.conj().T @ CS
        Hc = 0.5 * (Hc + Hc.conj().T)
        theta, W = np.linalg.eigh(Hc)
        Z = S @ W
        CZ = CS @ W
        c_resid = np.linalg.norm(CZ - Z * theta, axis=0)
        if float(c_resid.max()) <= eff_tol:
            pairs = []
            for i in range(count):
                chi = _fix_gauge(Z[:, i])
                pairs.append(EigenPair(float(theta[i]), pencil.to_spinor(chi)))
            pairs.sort(key=lambda p: p.lam)
            return SpectrumWindow(float(target), count, pairs, u, exps)
        stalls += 1
        if stalls >= 8 and not active:
            raise ConvergenceFailure(
                "folded subspace converged but signed extraction failed "
                "(window may split a symmetric cluster)", residual=float(c_resid.max()))

    raise ConvergenceFailure("window iteration did not converge",
                             iterations=max_outer, residual=last_resid)


def refine_pair(u: ScalarField, pair: EigenPair, exps: ExponentTable,
                tol: float = 1e-9, max_steps: int = 6,
                inner_rtol: float = 1e-9) -> EigenPair:
    """Newton-style correction refreshing one tracked quaternionic pair.

    Each sweep solves the correction equation Q (C - lam) Q t = -Q r with Q
    the deflation off span{chi, J chi} (the same well-conditioned system the
    projected resolvent uses; raw shifted solves at the nearly singular
    Rayleigh shift are unreliable with Krylov inner solves).  Quadratically
    convergent; the caller is responsible for the cluster staying simple.
    """
    from .dirac import j_values

    pencil = Pencil(u, pair.psi.spin, exps)
    eff_tol = tol / max(1.0, float(pencil.weight.max()))

    chi = pencil.from_spinor(pair.psi)
    chi = chi / np.linalg.norm(chi)
    lam = float(np.vdot(chi, pencil.apply(chi)).real)
    best = (np.inf, chi, lam)
    for _ in range(max_steps):
        resid_vec = pencil.apply(chi) - lam * chi
        resid = float(np.linalg.norm(resid_vec))
        if resid < best[0]:
            best = (resid, chi, lam)
        if resid <= eff_tol:
            break

        jchi = pencil.pack(j_values(u.grid, pair.psi.spin, pencil.unpack(chi)))
        jchi = jchi / np.linalg.norm(jchi)

        def deflate(z, _c=chi, _j=jchi):
            z = z - _c * np.vdot(_c, z)
            return z - _j * np.vdot(_j, z)

        def op(z, _lam=lam, _d=deflate):
            w = _d(z)
            return _d(pencil.apply(w) - _lam * w)

        prec = ShiftedDiagonalPreconditioner(pencil, lam)
        b = -deflate(resid_vec)
        t = np.zeros_like(b)
        res = b
        for _pass in range(3):
            dt_vec, _info = minres_hermitian(op, res, precond=prec,
                                             rtol=inner_rtol, maxiter=400)
            t = deflate(t + dt_vec)
            res = b - op(t)
            if np.linalg.norm(res) <= 0.05 * eff_tol:
                break
        chi_new = chi + t
        chi = chi_new / np.linalg.norm(chi_new)
        lam = float(np.vdot(chi, pencil.apply(chi)).real)
    resid, chi, lam = best
    if resid > eff_tol:
        raise ConvergenceFailure("pair refinement stalled", residual=resid)
    return EigenPair(lam, pencil.to_spinor(chi))


# ---------------------------------------------------------------------------
# Probes.
# ---------------------------------------------------------------------------

@dataclass
class SplittingReport:
    eps: np.ndarray
    branches: np.ndarray       # shape (len(eps), cluster_size), sorted rows
    separations: np.ndarray    # max pairwise separation per eps
    splits: bool               # separations strictly increasing


def splitting_probe(u: ScalarField, lam: float, v: ScalarField, eps_list,
                    spin: SpinStructure | None = None,
                    exps: ExponentTable | None = None,
                    cluster_size: int | None = None) -> SplittingReport:
    """Track the eigenvalue branches of the pencil at u + eps*v.

    Follows the descendants of the multiple eigenvalue lam and reports
    whether their maximal pairwise separation grows with eps.
    """
    spin = spin or SpinStructure()
    exps = exps or ExponentTable(3)
    eps_arr = np.asarray(list(eps_list), dtype=float)

    def eigenvalues_at(w: ScalarField, center: float, k: int) -> np.ndarray:
        if w.grid.n <= DENSE_GRID_LIMIT:
            dense = dense_oracle(w, spin, exps)
            sel = dense.nearest_indices(center, k)
            return np.sort(dense.eigenvalues[sel])
        win = solve_window(w, center, k, spin, exps)
        return win.eigenvalues

    if cluster_size is None:
        base = eigenvalues_at(u, lam, min(16, 2 * u.grid.num_points))
        cluster_size = int(np.sum(np.abs(base - lam) <= CLUSTER_REL_TOL * (1.0 + abs(lam))))
        cluster_size = max(cluster_size, 2)

    branches = np.empty((eps_arr.size, cluster_size))
    center = lam
    for i, eps in enumerate(eps_arr):
        w = ScalarField(u.grid, u.values + eps * v.values)
        if w.min() <= 0:
            raise NonPositiveConformalFactor(f"u + {eps} v loses positivity")
        branches[i] = eigenvalues_at(w, center, cluster_size)
        center = float(branches[i].mean())
    seps = branches.max(axis=1) - branches.min(axis=1)
    splits = bool(np.all(np.diff(seps) > 0))
    return SplittingReport(eps_arr, branches, seps, splits)


def rigidity_probe(window: SpectrumWindow, lam: float, n_random: int = 8,
                   seed: int = 20_21) -> float:
    """Spread of pointwise spinor norms across a normalized eigenvalue cluster.

    Evaluates an orthonormal cluster basis plus random unit combinations and
    returns sup_x (max_j |phi_j(x)| - min_j |phi_j(x)|).  Zero spread is the
    rigidity property; a quaternionic pair has it automatically.
    """
    group = window.cluster_containing(lam)
    if len(group) < 2:
        raise ValueError("rigidity probe needs a cluster of complex dimension >= 2")
    basis = [window.pairs[i].psi.values for i in group]
    rng = np.random.default_rng(seed)
    candidates = list(basis)
    for _ in range(n_random):
        c = rng.standard_normal(len(basis)) + 1j * rng.standard_normal(len(basis))
        c /= np.linalg.norm(c)
        candidates.append(sum(ci * bi for ci, bi in zip(c, basis)))
    norms = np.stack([
        np.sqrt((v.real ** 2 + v.imag ** 2).sum(axis=-1)) for v in candidates
    ])
    return float((norms.max(axis=0) - norms.min(axis=0)).max())
