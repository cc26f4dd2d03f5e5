"""Gauss-Newton WLS state estimation and its implicit-differentiation backward pass.

The forward solve iterates ``(J^T W J) dx = J^T W (z - h(x))``.  The backward
pass treats the converged estimate as an implicit function of ``z`` and uses
the Gauss-Newton gain matrix only:

    dx/dz = (J^T W J)^-1 J^T W

so a vector-Jacobian product costs one SPD solve and one mat-vec, whatever
the number of forward iterations.  Everything works on stacked batches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.linalg import lapack

from .errors import DivergenceError, ObservabilityError
from .measurements import MeasurementModel, StateVector

# smallest admissible pivot of the unit-diagonal gain matrix
RANK_TOL = 1e-13


@dataclass(frozen=True)
class WlsOptions:
    max_iters: int = 30
    step_tol: float = 1e-9
    opt_tol: float = 1e-6


TRAIN_OPTIONS = WlsOptions(max_iters=10)
EVAL_OPTIONS = WlsOptions(max_iters=30)


def weights_from_sigma(sigma) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    if np.any(~(sigma > 0)):
        raise ValueError("sigma entries must be positive")
    return sigma ** -2.0


def spd_solve(a, rhs):
    """Solve stacked SPD systems ``a x = rhs`` by equilibrated Cholesky.

    ``a`` is (B, n, n); ``rhs`` is (B, n) or (B, n, k).  Returns (x, ok);
    samples whose scaled gain is not positive definite or has a pivot below
    ``RANK_TOL`` get ``ok = False`` and NaN entries.
    """
    a = np.asarray(a, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    diag = np.diagonal(a, axis1=-2, axis2=-1)
    ok = np.all(diag > 0, axis=-1) & np.all(np.isfinite(a), axis=(-2, -1)) & np.all(
        np.isfinite(rhs), axis=tuple(range(1, rhs.ndim)))
    d = np.where(diag > 0, diag, 1.0) ** -0.5
    scaled = a * (d[:, :, None] * d[:, None, :])
    srhs = rhs * (d if rhs.ndim == 2 else d[:, :, None])
    x = np.full_like(srhs, np.nan)
    piv = np.zeros(a.shape[:2])
    posv = lapack.dposv
    for k in np.flatnonzero(ok):
        chol, sol, info = posv(scaled[k], srhs[k], lower=1)
        if info == 0:
            piv[k] = chol.diagonal()
            x[k] = sol
    ok &= np.min(piv, axis=1) ** 2 > RANK_TOL
    x[~ok] = np.nan
    x *= d if rhs.ndim == 2 else d[:, :, None]
    return x, ok


class GainAssembler:
    """J^T W J restricted to a fixed Jacobian sparsity pattern.

    Only products of entries sharing a row are formed, upper triangle only,
    and summed into the dense gain through a sparse scatter matrix.
    """

    def __init__(self, pattern):
        pattern = np.asarray(pattern, dtype=bool)
        m, n = pattern.shape
        self.m, self.n = m, n
        self.flat = np.flatnonzero(pattern.ravel())
        rows, cols = np.divmod(self.flat, n)
        self.rows = rows
        p1, p2 = [], []
        for r in range(m):
            e = np.flatnonzero(rows == r)
            a, b = np.triu_indices(len(e))
            p1.append(e[a])
            p2.append(e[b])
        self.p1 = np.concatenate(p1) if p1 else np.zeros(0, dtype=int)
        self.p2 = np.concatenate(p2) if p2 else np.zeros(0, dtype=int)
        c1, c2 = cols[self.p1], cols[self.p2]
        lo, hi = np.minimum(c1, c2), np.maximum(c1, c2)
        self.scatter = sparse.csr_matrix((np.ones(len(lo)), (lo * n + hi, np.arange(len(lo)))),
                                         shape=(n * n, len(lo)))
        self.diag = np.arange(n) * (n + 1)

    def __call__(self, jac, w):
        bsz = jac.shape[0]
        jv = np.take(jac.reshape(bsz, -1), self.flat, axis=1).T  # (nnz, B)
        w = np.asarray(w, dtype=float)
        jw = jv * (w[self.rows][:, None] if w.ndim == 1 else w[:, self.rows].T)
        upper = (self.scatter @ (jw[self.p1] * jv[self.p2])).T.reshape(bsz, self.n, self.n)
        gain = upper + np.swapaxes(upper, -1, -2)
        gain.reshape(bsz, -1)[:, self.diag] *= 0.5
        return gain


def gain_matrix(jac, w):
    """J^T W J for stacked Jacobians (B, m, n) and weights (m,) or (B, m)."""
    w = np.asarray(w)
    wj = jac * (w[..., :, None] if w.ndim == 2 else w[:, None])
    return np.swapaxes(jac, -1, -2) @ wj


@dataclass(frozen=True)
class WlsSolution:
    """Converged estimate plus everything the backward pass needs."""

    x_hat: np.ndarray
    jacobian_at_solution: np.ndarray
    residual: np.ndarray
    iterations: int
    converged: bool
    final_step_norm: float
    optimality: float

    @property
    def state(self) -> StateVector:
        return StateVector.from_array(self.x_hat)


@dataclass(frozen=True)
class WlsBatch:
    """Stacked results of :func:`wls_solve_batch`.

    ``ok`` is False where the gain matrix was rank deficient or the
    iterate became non-finite; those rows hold NaN.
    """

    x_hat: np.ndarray
    jacobian: np.ndarray
    residual: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    step_norm: np.ndarray
    optimality: np.ndarray
    ok: np.ndarray
    observable: np.ndarray

    def __len__(self):
        return self.x_hat.shape[0]

    def solution(self, k: int) -> WlsSolution:
        return WlsSolution(self.x_hat[k], self.jacobian[k], self.residual[k],
                           int(self.iterations[k]), bool(self.converged[k]),
                           float(self.step_norm[k]), float(self.optimality[k]))


def wls_solve_batch(z, model: MeasurementModel, w, x0=None, opts: WlsOptions = EVAL_OPTIONS) -> WlsBatch:
    """Gauss-Newton WLS for a stack of measurement vectors ``z`` (B, m).

    Each sample stops at ``opts.max_iters`` iterations or as soon as its step
    satisfies ``max|dx| <= opts.step_tol``.  No damping or line search.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    bsz = z.shape[0]
    w = np.asarray(w, dtype=float)
    if x0 is None:
        x = np.tile(np.concatenate([np.ones(model.n_bus), np.zeros(model.n_bus - 1)]), (bsz, 1))
    else:
        x = np.array(np.broadcast_to(x0, (bsz, model.n)), dtype=float)
    w_rows = np.broadcast_to(w, z.shape)
    assemble = GainAssembler(model.jacobian_pattern)

    active = np.ones(bsz, dtype=bool)
    observable = np.ones(bsz, dtype=bool)
    finite = np.ones(bsz, dtype=bool)
    iters = np.zeros(bsz, dtype=int)
    step = np.full(bsz, np.inf)
    if model.m < model.n:
        observable[:] = False
        active[:] = False

    for _ in range(opts.max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xa = x[idx]
        hx, jac = model.h_and_jacobian(xa)
        wa = w_rows[idx]
        r = z[idx] - hx
        rhs = np.einsum("bmn,bm->bn", jac, wa * r)
        dx, ok = spd_solve(assemble(jac, wa), rhs)
        observable[idx[~ok]] = False
        dx[~ok] = 0.0
        x[idx] = xa + dx
        iters[idx] += 1
        s = np.max(np.abs(dx), axis=1)
        step[idx] = np.where(ok, s, np.inf)
        bad = ~np.all(np.isfinite(x[idx]), axis=1)
        finite[idx[bad]] = False
        active[idx] = ok & ~bad & (s > opts.step_tol)

    ok = observable & finite
    jac = np.full((bsz, model.m, model.n), np.nan)
    resid = np.full((bsz, model.m), np.nan)
    opt = np.full(bsz, np.inf)
    if ok.any():
        xs = x[ok]
        hx, jac[ok] = model.h_and_jacobian(xs)
        resid[ok] = z[ok] - hx
        grad = np.einsum("bmn,bm->bn", jac[ok], w_rows[ok] * resid[ok])
        opt[ok] = np.max(np.abs(grad), axis=1)
    x[~ok] = np.nan
    converged = ok & (step <= opts.step_tol) & (opt <= opts.opt_tol)
    return WlsBatch(x, jac, resid, iters, converged, step, opt, ok, observable)


def wls_solve(z, model: MeasurementModel, w, x0=None, opts: WlsOptions = EVAL_OPTIONS) -> WlsSolution:
    """Single-sample WLS estimate; raises on unobservable or divergent input."""
    x0a = x0.to_array() if isinstance(x0, StateVector) else x0
    batch = wls_solve_batch(np.asarray(z, dtype=float)[None, :], model, w, x0a, opts)
    if not batch.observable[0]:
        raise ObservabilityError("gain matrix J^T W J is rank deficient; the plan is not observable")
    if not batch.ok[0]:
        raise DivergenceError("WLS iterate became non-finite")
    return batch.solution(0)


def _as_batch(sol):
    if isinstance(sol, WlsSolution):
        return sol.jacobian_at_solution[None], True
    if isinstance(sol, WlsBatch):
        return sol.jacobian, False
    jac = np.asarray(sol)
    return (jac[None], True) if jac.ndim == 2 else (jac, False)


def wls_sensitivity(sol, w) -> np.ndarray:
    """Sensitivity dx_hat/dz = (J^T W J)^-1 J^T W at the cached Jacobian."""
    jac, single = _as_batch(sol)
    w = np.asarray(w, dtype=float)
    wb = np.broadcast_to(w, jac.shape[:2])
    sens, ok = spd_solve(gain_matrix(jac, wb), np.swapaxes(jac * wb[:, :, None], -1, -2))
    if not ok.all():
        raise ObservabilityError("gain matrix J^T W J is rank deficient")
    return sens[0] if single else sens


def wls_adjoint(sol, w, grad_x, *, strict: bool = True):
    """Vector-Jacobian product (dx_hat/dz)^T grad_x via the adjoint system.

    Solves ``(J^T W J) lam = grad_x`` and returns ``W J lam``.  With
    ``strict=False`` a batch call returns ``(grad_z, ok)`` instead of
    raising on rank-deficient samples.
    """
    jac, single = _as_batch(sol)
    w = np.asarray(w, dtype=float)
    wb = np.broadcast_to(w, jac.shape[:2])
    g = np.atleast_2d(np.asarray(grad_x, dtype=float))
    lam, ok = spd_solve(gain_matrix(jac, wb), g)
    if strict and not ok.all():
        raise ObservabilityError("gain matrix J^T W J is rank deficient")
    grad_z = wb * np.einsum("bmn,bn->bm", jac, lam)
    if single:
        return grad_z[0]
    return grad_z if strict else (grad_z, ok)


def objective(z, model: MeasurementModel, w, x) -> np.ndarray:
    r = np.atleast_2d(z) - model.h(np.atleast_2d(x))
    return np.sum(np.asarray(w) * r ** 2, axis=-1)
