"""Warm-startable SQP solver with a damped-BFGS Hessian model.

Consumes `NlpProblem` instances (smooth objective, smooth equality
constraints, box bounds, constant linear inequality rows) in two modes:

  * REFINE: line-searched iterations until the KKT residual drops below the
    tolerance.  Used once to prepare the first warm start.
  * REAL_TIME: a fixed, small number of iterations (default one) taking the
    full step.  The stream of solves converges across control periods rather
    than within a call, so stopping at the iteration cap is a normal,
    non-error outcome.

Each iteration linearizes the constraints and minimizes the BFGS quadratic
model subject to them.  The inner QP is solved by a primal-dual active-set
iteration on the Schur-complement KKT system, warm started from the active
set of the previous call; the BFGS inverse is maintained next to the matrix
so a KKT solve costs one small Cholesky factorization.  The damped update
keeps the model positive definite, and an update is rejected outright if it
would push the smallest eigenvalue below the configured floor.

Everything is deterministic: no randomized pivoting, no time-dependent
branches, so identical inputs produce bit-identical outputs.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg as sla

try:
    # the KKT systems are small; BLAS thread fan-out costs far more than it
    # saves and destroys the uniform per-iteration times the loop needs
    from threadpoolctl import threadpool_limits

    _BLAS_LIMIT = threadpool_limits(limits=1)
except ImportError:  # pragma: no cover
    _BLAS_LIMIT = None

from .errors import InvalidArgumentError
from .se2 import Pose
from .transcription import NlpProblem

__all__ = [
    "SolverMode",
    "SolverStatus",
    "SolverSettings",
    "SolverState",
    "KktResidual",
    "solve",
    "warm_start_shift",
    "kkt_residual",
]

# asymmetric working-set tolerances: a constraint joins on a violation well
# above the level the drop test reacts to, which breaks add/drop chatter on
# degenerate (redundant) sets
_PRIMAL_TOL = 1e-8
_DUAL_TOL = 1e-7
_BFGS_RESYNC_EVERY = 4096


class SolverMode(enum.Enum):
    REFINE = "refine"
    REAL_TIME = "real_time"


class SolverStatus(enum.Enum):
    CONVERGED = "converged"
    ITERATION_LIMIT = "iteration_limit"
    NUMERIC_FAILURE = "numeric_failure"


@dataclass(frozen=True)
class SolverSettings:
    tolerance: float = 1e-6
    max_iterations: int | None = None
    mode: SolverMode = SolverMode.REFINE
    regularization: float = 1e-8
    # inner active-set budget per QP; real-time mode prefers a bounded,
    # slightly conservative step over an exact one that arrives late
    qp_iteration_limit: int | None = None

    def __post_init__(self):
        if not (self.tolerance > 0.0):
            raise InvalidArgumentError(f"tolerance must be positive, got {self.tolerance}")
        if self.max_iterations is None:
            default = 1 if self.mode is SolverMode.REAL_TIME else 200
            object.__setattr__(self, "max_iterations", default)
        if self.max_iterations < 1:
            raise InvalidArgumentError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.mode is SolverMode.REAL_TIME and self.max_iterations > 10:
            raise InvalidArgumentError(
                "real-time mode keeps the iteration budget small (<= 10); "
                f"got {self.max_iterations}"
            )
        if self.qp_iteration_limit is None and self.mode is SolverMode.REAL_TIME:
            # the working set carries across calls, so discovery of a large
            # set simply spreads over a few control periods
            object.__setattr__(self, "qp_iteration_limit", 15)
        if self.qp_iteration_limit is not None and self.qp_iteration_limit < 1:
            raise InvalidArgumentError("qp_iteration_limit must be >= 1")
        if not (self.regularization > 0.0):
            raise InvalidArgumentError(f"regularization floor must be positive, got {self.regularization}")


class KktResidual(NamedTuple):
    stationarity: float
    feasibility: float
    complementarity: float

    @property
    def max(self) -> float:
        return max(self.stationarity, self.feasibility, self.complementarity)

    def converged(self, tolerance: float) -> bool:
        return self.max < tolerance


@dataclass
class SolverState:
    """Mutable solver memory, exclusively owned by one control loop."""

    primal: np.ndarray
    dual_eq: np.ndarray
    dual_ineq: np.ndarray
    dual_box: np.ndarray
    bfgs: np.ndarray
    bfgs_inv: np.ndarray
    active_ineq: np.ndarray
    active_box: np.ndarray
    last_kkt: KktResidual = KktResidual(np.inf, np.inf, np.inf)
    merit_penalty: float = 1.0
    iterations_used: int = 0
    bfgs_updates: int = 0
    bfgs_rejections: int = 0
    qp_degraded: int = 0
    # pending secant pair: completed by the next evaluation of the gradient,
    # which in the streaming real-time mode happens on the next call
    pending_step: np.ndarray | None = None
    pending_grad_lag: np.ndarray | None = None
    # scratch matrices for the rank-two updates (allocated on first use)
    _scratch_a: np.ndarray | None = None
    _scratch_b: np.ndarray | None = None

    @staticmethod
    def new(problem: NlpProblem, primal=None, hessian_diag=1.0) -> "SolverState":
        n = problem.n
        z = np.zeros(n) if primal is None else np.asarray(primal, dtype=float).copy()
        if z.shape != (n,):
            raise InvalidArgumentError(f"primal must have length {n}, got {z.shape}")
        diag = np.broadcast_to(np.asarray(hessian_diag, dtype=float), (n,))
        if np.any(diag <= 0.0):
            raise InvalidArgumentError("initial Hessian diagonal must be positive")
        return SolverState(
            primal=z,
            dual_eq=np.zeros(problem.m_eq),
            dual_ineq=np.zeros(problem.m_ineq),
            dual_box=np.zeros(n),
            bfgs=np.diag(diag),
            bfgs_inv=np.diag(1.0 / diag),
            active_ineq=np.zeros(problem.m_ineq, dtype=np.int8),
            active_box=np.zeros(n, dtype=np.int8),
        )


# ---------------------------------------------------------------------------
# KKT residual


def _kkt_terms(problem, z, g, c, lam_eq, lam_ineq, lam_box, eq_jac=None):
    stat = g.copy()
    if problem.m_eq:
        jac = problem.eq_jacobian(z) if eq_jac is None else eq_jac
        stat += jac.T @ lam_eq
    gz = None
    if problem.m_ineq:
        gz = problem.ineq_matrix @ z
        stat += problem.ineq_matrix.T @ lam_ineq
    stat += lam_box
    stationarity = float(np.max(np.abs(stat))) if stat.size else 0.0

    feas = float(np.max(np.abs(c))) if c.size else 0.0
    if problem.m_ineq:
        feas = max(feas, float(np.max(np.maximum(gz - problem.ineq_hi, 0.0), initial=0.0)))
        feas = max(feas, float(np.max(np.maximum(problem.ineq_lo - gz, 0.0), initial=0.0)))
    feas = max(feas, float(np.max(np.maximum(z - problem.ub, 0.0), initial=0.0)))
    feas = max(feas, float(np.max(np.maximum(problem.lb - z, 0.0), initial=0.0)))

    comp = 0.0
    if problem.m_ineq:
        comp = max(comp, _complementarity(lam_ineq, gz, problem.ineq_lo, problem.ineq_hi))
    comp = max(comp, _complementarity(lam_box, z, problem.lb, problem.ub))
    return KktResidual(stationarity, feas, comp)


def _complementarity(lam, value, lo, hi) -> float:
    if lam.size == 0:
        return 0.0
    slack_hi = hi - value
    slack_lo = value - lo
    out = np.zeros_like(lam)
    pos = lam > 0.0
    neg = lam < 0.0
    out[pos] = lam[pos] * np.where(np.isfinite(slack_hi[pos]), np.abs(slack_hi[pos]), 0.0)
    out[neg] = -lam[neg] * np.where(np.isfinite(slack_lo[neg]), np.abs(slack_lo[neg]), 0.0)
    return float(np.max(np.abs(out), initial=0.0))


def kkt_residual(problem: NlpProblem, state: SolverState) -> KktResidual:
    """Stationarity / feasibility / complementarity norms at the state."""
    z = state.primal
    g = problem.cost_gradient(z)
    c = problem.eq_residual(z)
    return _kkt_terms(problem, z, g, c, state.dual_eq, state.dual_ineq, state.dual_box)


# ---------------------------------------------------------------------------
# inner QP: primal-dual active set on the Schur KKT system


class _QpResult(NamedTuple):
    p: np.ndarray
    lam_eq: np.ndarray
    lam_ineq: np.ndarray
    lam_box: np.ndarray
    act_rows: np.ndarray
    act_box: np.ndarray
    ok: bool
    iterations: int


def _solve_qp(h_inv, g, a_eq, b_eq, g_rows, row_lo, row_hi, box_lo, box_hi,
              act_rows, act_box, iteration_limit: int | None = None,
              p_start=None) -> _QpResult:
    """Strictly convex QP by a primal active-set path.

    The iterate starts at p = 0, which satisfies every row and box because
    the caller's current point does, and moves toward the minimizer over
    the working set; the move stops at the first blocking constraint,
    which then joins the set.  After an unblocked step the most
    wrong-signed multiplier, if any, leaves the set.  Equality residuals
    shrink along the path and are met exactly at any unblocked step.  The
    working-set minimizer comes from a Schur complement on the inverse
    Hessian whose equality block is fixed per call; a tiny ridge keeps
    degenerate sets solvable.  Hitting the iteration budget returns the
    current feasible iterate flagged as degraded: a bounded, slightly
    conservative step beats an exact one that arrives late.
    """
    n = g.size
    m_eq = a_eq.shape[0]
    m_in = g_rows.shape[0]
    act_rows = act_rows.copy()
    act_box = act_box.copy()
    # an active side must have a finite bound to pin against
    act_box[(act_box > 0) & ~np.isfinite(box_hi)] = 0
    act_box[(act_box < 0) & ~np.isfinite(box_lo)] = 0
    if m_in:
        act_rows[(act_rows > 0) & ~np.isfinite(row_hi)] = 0
        act_rows[(act_rows < 0) & ~np.isfinite(row_lo)] = 0

    hg = h_inv @ g
    # equality block of the Schur system is fixed for the whole call
    if m_eq:
        h_eq = h_inv @ a_eq.T              # (n, m_eq)
        s_eq = a_eq @ h_eq                 # (m_eq, m_eq)
        r_eq = -(a_eq @ hg) - b_eq
    max_iter = iteration_limit if iteration_limit is not None else 2 * (n + m_in) + 10
    if p_start is not None:
        # an equality-exact start keeps the whole path on the manifold, so
        # moves only encounter genuinely blocking inequality constraints
        p_cur = p_start.copy()
        gp_cur = g_rows @ p_cur if m_in else np.zeros(0)
    else:
        p_cur = np.zeros(n)
        gp_cur = np.zeros(m_in)
    lam_eq = np.zeros(m_eq)
    lam_rows = np.zeros(m_in)
    lam_box = np.zeros(n)

    for it in range(1, max_iter + 1):
        rows_idx = np.nonzero(act_rows)[0]
        box_idx = np.nonzero(act_box)[0]
        n_rows = rows_idx.size
        n_box = box_idx.size
        n_ex = n_rows + n_box
        m_act = m_eq + n_ex
        if m_act:
            # columns of H against the working set: G rows need a product,
            # active boxes are plain columns of H
            if n_ex:
                h_ex = np.empty((n, n_ex))
                t_ex = np.empty(n_ex)
                if n_rows:
                    g_act = g_rows[rows_idx]
                    np.matmul(h_inv, g_act.T, out=h_ex[:, :n_rows])
                    t_ex[:n_rows] = np.where(
                        act_rows[rows_idx] > 0, row_hi[rows_idx], row_lo[rows_idx]
                    )
                if n_box:
                    h_ex[:, n_rows:] = h_inv[:, box_idx]
                    t_ex[n_rows:] = np.where(act_box[box_idx] > 0, box_hi[box_idx], box_lo[box_idx])
            big = np.empty((m_act, m_act))
            rhs = np.empty(m_act)
            if m_eq:
                big[:m_eq, :m_eq] = s_eq
                rhs[:m_eq] = r_eq
            if n_ex:
                if m_eq:
                    cross = np.empty((n_ex, m_eq))
                    if n_rows:
                        np.matmul(g_act, h_eq, out=cross[:n_rows])
                    if n_box:
                        cross[n_rows:] = h_eq[box_idx, :]
                    big[m_eq:, :m_eq] = cross
                    big[:m_eq, m_eq:] = cross.T
                corner = np.empty((n_ex, n_ex))
                if n_rows:
                    np.matmul(g_act, h_ex, out=corner[:n_rows])
                if n_box:
                    corner[n_rows:] = h_ex[box_idx, :]
                big[m_eq:, m_eq:] = corner
                ghg = np.empty(n_ex)
                if n_rows:
                    ghg[:n_rows] = g_act @ hg
                if n_box:
                    ghg[n_rows:] = hg[box_idx]
                rhs[m_eq:] = -ghg - t_ex
            diag = np.einsum("ii->i", big)
            ridge = 1e-12 * max(float(diag.max(initial=1.0)), 1.0)
            diag += ridge
            try:
                lam = sla.cho_solve(
                    sla.cho_factor(big, lower=True, check_finite=False), rhs, check_finite=False
                )
            except np.linalg.LinAlgError:
                diag += 1e-6
                lam = sla.cho_solve(
                    sla.cho_factor(big, lower=True, check_finite=False), rhs, check_finite=False
                )
            p_w = -hg.copy()
            if m_eq:
                p_w -= h_eq @ lam[:m_eq]
            if n_ex:
                p_w -= h_ex @ lam[m_eq:]
            lam_eq = lam[:m_eq]
            lam_rows = np.zeros(m_in)
            lam_rows[rows_idx] = lam[m_eq : m_eq + n_rows]
            lam_box = np.zeros(n)
            lam_box[box_idx] = lam[m_eq + n_rows :]
        else:
            p_w = -hg
            lam_eq = np.zeros(m_eq)
            lam_rows = np.zeros(m_in)
            lam_box = np.zeros(n)

        if not np.all(np.isfinite(p_w)):
            return _QpResult(p_cur, lam_eq, lam_rows, lam_box, act_rows, act_box, False, it)

        d = p_w - p_cur
        if float(np.max(np.abs(d), initial=0.0)) > 1e-13:
            # ratio test: how far toward the working-set minimizer before an
            # inactive constraint blocks
            alpha = 1.0
            blocker = None  # (kind, index, side)
            free_box = act_box == 0
            pos = free_box & (d > 1e-13) & np.isfinite(box_hi)
            if pos.any():
                ratios = (box_hi[pos] - p_cur[pos]) / d[pos]
                j = int(np.argmin(ratios))
                if ratios[j] < alpha:
                    alpha = max(float(ratios[j]), 0.0)
                    blocker = ("box", int(np.nonzero(pos)[0][j]), 1)
            neg = free_box & (d < -1e-13) & np.isfinite(box_lo)
            if neg.any():
                ratios = (box_lo[neg] - p_cur[neg]) / d[neg]
                j = int(np.argmin(ratios))
                if ratios[j] < alpha:
                    alpha = max(float(ratios[j]), 0.0)
                    blocker = ("box", int(np.nonzero(neg)[0][j]), -1)
            if m_in:
                gd = g_rows @ d
                free_row = act_rows == 0
                pos = free_row & (gd > 1e-13) & np.isfinite(row_hi)
                if pos.any():
                    ratios = (row_hi[pos] - gp_cur[pos]) / gd[pos]
                    j = int(np.argmin(ratios))
                    if ratios[j] < alpha:
                        alpha = max(float(ratios[j]), 0.0)
                        blocker = ("row", int(np.nonzero(pos)[0][j]), 1)
                neg = free_row & (gd < -1e-13) & np.isfinite(row_lo)
                if neg.any():
                    ratios = (row_lo[neg] - gp_cur[neg]) / gd[neg]
                    j = int(np.argmin(ratios))
                    if ratios[j] < alpha:
                        alpha = max(float(ratios[j]), 0.0)
                        blocker = ("row", int(np.nonzero(neg)[0][j]), -1)
            if blocker is not None:
                p_cur += alpha * d
                if m_in:
                    gp_cur += alpha * gd
                kind, idx, side = blocker
                if kind == "row":
                    act_rows[idx] = side
                else:
                    act_box[idx] = side
                continue
            p_cur = p_w
            gp_cur = gp_cur + gd if m_in else gp_cur
        else:
            p_cur = p_w

        # unblocked minimizer reached: release the most wrong multiplier
        worst = _DUAL_TOL
        worst_kind = None
        worst_idx = -1
        if n_rows:
            vals = np.where(act_rows[rows_idx] > 0, -lam_rows[rows_idx], lam_rows[rows_idx])
            j = int(np.argmax(vals))
            if vals[j] > worst:
                worst = float(vals[j])
                worst_kind = "row"
                worst_idx = int(rows_idx[j])
        if n_box:
            vals = np.where(act_box[box_idx] > 0, -lam_box[box_idx], lam_box[box_idx])
            j = int(np.argmax(vals))
            if vals[j] > worst:
                worst = float(vals[j])
                worst_kind = "box"
                worst_idx = int(box_idx[j])
        if worst_kind is None:
            return _QpResult(p_cur, lam_eq, lam_rows, lam_box, act_rows, act_box, True, it)
        if worst_kind == "row":
            act_rows[worst_idx] = 0
        else:
            act_box[worst_idx] = 0

    return _QpResult(p_cur, lam_eq, lam_rows, lam_box, act_rows, act_box, False, max_iter)


def _solve_qp_bounds(h_inv, g, g_rows, row_lo, row_hi, box_lo, box_hi,
                     act_rows, act_box, iteration_limit: int | None = None) -> _QpResult:
    """Path-following active set for bounds plus linear rows (no equalities).

    Same scheme as _solve_qp, with the working-set Schur data grown one
    column at a time, so activating a constraint costs one matrix-vector
    product instead of a rebuild.
    """
    n = g.size
    m_in = g_rows.shape[0]
    act_rows = act_rows.copy()
    act_box = act_box.copy()
    act_box[(act_box > 0) & ~np.isfinite(box_hi)] = 0
    act_box[(act_box < 0) & ~np.isfinite(box_lo)] = 0
    if m_in:
        act_rows[(act_rows > 0) & ~np.isfinite(row_hi)] = 0
        act_rows[(act_rows < 0) & ~np.isfinite(row_lo)] = 0

    hg = h_inv @ g
    max_iter = iteration_limit if iteration_limit is not None else 2 * (n + m_in) + 10
    cap = m_in + n + 2
    h_act = np.empty((n, cap))      # h_inv against active constraint rows
    s_act = np.empty((cap, cap))    # Schur matrix of the working set
    t_act = np.empty(cap)           # active-side targets
    mhg = np.empty(cap)             # active rows against hg
    is_row = np.empty(cap, dtype=bool)
    member = np.empty(cap, dtype=np.int64)

    # bulk-seed from the warm-start masks
    rows_idx = np.nonzero(act_rows)[0]
    box_idx = np.nonzero(act_box)[0]
    nr, nb = rows_idx.size, box_idx.size
    k = nr + nb
    if nr:
        g_seed = g_rows[rows_idx]
        np.matmul(h_inv, g_seed.T, out=h_act[:, :nr])
        t_act[:nr] = np.where(act_rows[rows_idx] > 0, row_hi[rows_idx], row_lo[rows_idx])
        mhg[:nr] = g_seed @ hg
        is_row[:nr] = True
        member[:nr] = rows_idx
    if nb:
        h_act[:, nr:k] = h_inv[:, box_idx]
        t_act[nr:k] = np.where(act_box[box_idx] > 0, box_hi[box_idx], box_lo[box_idx])
        mhg[nr:k] = hg[box_idx]
        is_row[nr:k] = False
        member[nr:k] = box_idx
    if k:
        if nr:
            np.matmul(g_seed, h_act[:, :k], out=s_act[:nr, :k])
        if nb:
            s_act[nr:k, :k] = h_act[box_idx, :k]

    def cross_terms(col, kk):
        out = np.empty(kk)
        rmask = is_row[:kk]
        if rmask.any():
            out[rmask] = g_rows[member[:kk][rmask]] @ col
        bmask = ~rmask
        if bmask.any():
            out[bmask] = col[member[:kk][bmask]]
        return out

    def append(kind_is_row: bool, idx: int, side: int) -> None:
        nonlocal k
        if k >= cap:
            return
        if kind_is_row:
            row = g_rows[idx]
            col = h_inv @ row
            t_act[k] = row_hi[idx] if side > 0 else row_lo[idx]
            mhg[k] = row @ hg
            act_rows[idx] = side
        else:
            col = h_inv[:, idx]
            t_act[k] = box_hi[idx] if side > 0 else box_lo[idx]
            mhg[k] = hg[idx]
            act_box[idx] = side
        h_act[:, k] = col
        if k:
            cr = cross_terms(col, k)
            s_act[k, :k] = cr
            s_act[:k, k] = cr
        s_act[k, k] = (row @ col) if kind_is_row else col[idx]
        is_row[k] = kind_is_row
        member[k] = idx
        k += 1

    def remove(pos: int) -> None:
        nonlocal k
        if is_row[pos]:
            act_rows[member[pos]] = 0
        else:
            act_box[member[pos]] = 0
        last = k - 1
        if pos != last:
            # swap the last member into the hole; the Schur matrix is
            # symmetric so one row and one column move
            h_act[:, pos] = h_act[:, last]
            t_act[pos] = t_act[last]
            mhg[pos] = mhg[last]
            is_row[pos] = is_row[last]
            member[pos] = member[last]
            s_act[pos, :k] = s_act[last, :k]
            s_act[:k, pos] = s_act[:k, last]
            s_act[pos, pos] = s_act[last, last]
        k = last

    p_cur = np.zeros(n)
    gp_cur = np.zeros(m_in)
    lam_rows = np.zeros(m_in)
    lam_box = np.zeros(n)

    for it in range(1, max_iter + 1):
        if k:
            big = s_act[:k, :k].copy()
            diag = np.einsum("ii->i", big)
            diag += 1e-12 * max(float(diag.max(initial=1.0)), 1.0)
            rhs = -mhg[:k] - t_act[:k]
            try:
                lam = sla.cho_solve(
                    sla.cho_factor(big, lower=True, overwrite_a=True, check_finite=False),
                    rhs, check_finite=False,
                )
            except np.linalg.LinAlgError:
                big = s_act[:k, :k] + 1e-6 * np.eye(k)
                lam = sla.cho_solve(
                    sla.cho_factor(big, lower=True, overwrite_a=True, check_finite=False),
                    rhs, check_finite=False,
                )
            p_w = -hg - h_act[:, :k] @ lam
            lam_rows = np.zeros(m_in)
            lam_box = np.zeros(n)
            rmask = is_row[:k]
            lam_rows[member[:k][rmask]] = lam[rmask]
            lam_box[member[:k][~rmask]] = lam[~rmask]
        else:
            p_w = -hg
            lam_rows = np.zeros(m_in)
            lam_box = np.zeros(n)

        if not np.all(np.isfinite(p_w)):
            return _QpResult(p_cur, np.zeros(0), lam_rows, lam_box, act_rows, act_box, False, it)

        d = p_w - p_cur
        if float(np.max(np.abs(d), initial=0.0)) > 1e-13:
            alpha = 1.0
            blocker = None
            free_box = act_box == 0
            pos = free_box & (d > 1e-13) & np.isfinite(box_hi)
            if pos.any():
                ratios = (box_hi[pos] - p_cur[pos]) / d[pos]
                j = int(np.argmin(ratios))
                if ratios[j] < alpha:
                    alpha = max(float(ratios[j]), 0.0)
                    blocker = (False, int(np.nonzero(pos)[0][j]), 1)
            neg = free_box & (d < -1e-13) & np.isfinite(box_lo)
            if neg.any():
                ratios = (box_lo[neg] - p_cur[neg]) / d[neg]
                j = int(np.argmin(ratios))
                if ratios[j] < alpha:
                    alpha = max(float(ratios[j]), 0.0)
                    blocker = (False, int(np.nonzero(neg)[0][j]), -1)
            if m_in:
                gd = g_rows @ d
                free_row = act_rows == 0
                pos = free_row & (gd > 1e-13) & np.isfinite(row_hi)
                if pos.any():
                    ratios = (row_hi[pos] - gp_cur[pos]) / gd[pos]
                    j = int(np.argmin(ratios))
                    if ratios[j] < alpha:
                        alpha = max(float(ratios[j]), 0.0)
                        blocker = (True, int(np.nonzero(pos)[0][j]), 1)
                neg = free_row & (gd < -1e-13) & np.isfinite(row_lo)
                if neg.any():
                    ratios = (row_lo[neg] - gp_cur[neg]) / gd[neg]
                    j = int(np.argmin(ratios))
                    if ratios[j] < alpha:
                        alpha = max(float(ratios[j]), 0.0)
                        blocker = (True, int(np.nonzero(neg)[0][j]), -1)
            if blocker is not None:
                p_cur += alpha * d
                if m_in:
                    gp_cur += alpha * gd
                append(blocker[0], blocker[1], blocker[2])
                continue
            p_cur = p_w
            if m_in:
                gp_cur = gp_cur + gd
        else:
            p_cur = p_w

        # unblocked minimizer reached: release the most wrong multiplier
        if k:
            rmask = is_row[:k]
            mem = member[:k]
            lam_here = np.empty(k)
            sides = np.empty(k, dtype=np.int8)
            if rmask.any():
                lam_here[rmask] = lam_rows[mem[rmask]]
                sides[rmask] = act_rows[mem[rmask]]
            bmask = ~rmask
            if bmask.any():
                lam_here[bmask] = lam_box[mem[bmask]]
                sides[bmask] = act_box[mem[bmask]]
            wrong = np.where(sides > 0, -lam_here, lam_here)
            pos_w = int(np.argmax(wrong))
            if wrong[pos_w] > _DUAL_TOL:
                remove(pos_w)
                continue
        return _QpResult(p_cur, np.zeros(0), lam_rows, lam_box, act_rows, act_box, True, it)

    return _QpResult(p_cur, np.zeros(0), lam_rows, lam_box, act_rows, act_box, False, max_iter)


def _solve_qp_reduced(problem, red, state: SolverState, z, grad, gz, settings) -> _QpResult:
    """QP in the control space after closed-form equality elimination.

    The particular step absorbs the measurement correction, the null-space
    basis maps the free controls to the states they reach, and the boxes
    and slew rows live directly on the reduced coordinates, so the inner
    active-set problem is small, always starts feasible, and every iterate
    satisfies the linearized equalities exactly.
    """
    n = problem.n
    n_red = red.basis.shape[1]
    b = state.bfgs
    bp = b @ red.p_part + grad
    m_in = problem.m_ineq

    if n_red:
        bz = b @ red.basis
        h_red = red.basis.T @ bz
        h_red = 0.5 * (h_red + h_red.T)
        g_red = red.basis.T @ bp
        g_q = problem.ineq_matrix[:, red.free_idx] if m_in else np.zeros((0, n_red))
        shift = gz + (problem.ineq_matrix @ red.p_part if m_in else 0.0)
        inner = _solve_qp_bounds(
            _spd_inverse(h_red),
            g_red,
            g_q,
            problem.ineq_lo - shift,
            problem.ineq_hi - shift,
            problem.lb[red.free_idx] - z[red.free_idx],
            problem.ub[red.free_idx] - z[red.free_idx],
            state.active_ineq,
            state.active_box[red.free_idx],
            iteration_limit=settings.qp_iteration_limit,
        )
        p = red.p_part + red.basis @ inner.p
        lam_rows = inner.lam_ineq
        lam_box = np.zeros(n)
        lam_box[red.free_idx] = inner.lam_box
        act_rows = inner.act_rows
        act_box = np.zeros(n, dtype=np.int8)
        act_box[red.free_idx] = inner.act_box
        ok, iterations = inner.ok, inner.iterations
    else:
        p = red.p_part
        lam_rows = np.zeros(m_in)
        lam_box = np.zeros(n)
        act_rows = np.zeros(m_in, dtype=np.int8)
        act_box = np.zeros(n, dtype=np.int8)
        ok, iterations = True, 1

    residual = b @ p + grad
    if m_in:
        residual = residual + problem.ineq_matrix.T @ lam_rows
    residual = residual + lam_box
    lam_eq = red.recover_equality_duals(residual)
    return _QpResult(p, lam_eq, lam_rows, lam_box, act_rows, act_box, ok, iterations)


def _spd_inverse(matrix: np.ndarray) -> np.ndarray:
    eye = np.eye(matrix.shape[0])
    try:
        cf = sla.cho_factor(matrix, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        bumped = matrix + (1e-10 * max(float(np.trace(matrix)), 1.0)) * eye
        cf = sla.cho_factor(bumped, lower=True, check_finite=False)
    return sla.cho_solve(cf, eye, check_finite=False)


# ---------------------------------------------------------------------------
# damped BFGS with an eigenvalue floor


def _bfgs_update(state: SolverState, s: np.ndarray, y: np.ndarray, floor: float) -> None:
    step_norm = float(np.linalg.norm(s))
    if step_norm < 1e-14 or not np.all(np.isfinite(y)):
        return
    b = state.bfgs
    bs = b @ s
    s_bs = float(s @ bs)
    if not (s_bs > 0.0) or not math.isfinite(s_bs):
        return
    s_y = float(s @ y)
    if s_y >= 0.2 * s_bs:
        r = y
    else:
        theta = 0.8 * s_bs / (s_bs - s_y)
        r = theta * y + (1.0 - theta) * bs
    s_r = float(s @ r)
    if s_r <= 1e-14 * step_norm * float(np.linalg.norm(r)):
        return
    n = s.size
    if state._scratch_a is None or state._scratch_a.shape[0] != n:
        state._scratch_a = np.empty((n, n))
        state._scratch_b = np.empty((n, n))
    cand = state._scratch_a
    work = state._scratch_b
    np.multiply.outer(r, r, out=cand)
    cand *= 1.0 / s_r
    np.multiply.outer(bs, bs, out=work)
    work *= -1.0 / s_bs
    cand += work
    cand += b
    np.copyto(work, cand)
    work.flat[:: n + 1] -= floor
    try:
        sla.cho_factor(work, lower=True, overwrite_a=True, check_finite=False)
    except Exception:
        state.bfgs_rejections += 1
        return
    np.copyto(b, cand)
    rho = 1.0 / s_r
    h = state.bfgs_inv
    hr = h @ r
    r_hr = float(r @ hr)
    np.multiply.outer(s, hr, out=cand)
    np.multiply.outer(hr, s, out=work)
    cand += work
    cand *= -rho
    h += cand
    np.multiply.outer(s, s, out=cand)
    cand *= rho * rho * r_hr + rho
    h += cand
    state.bfgs_updates += 1
    if state.bfgs_updates % _BFGS_RESYNC_EVERY == 0:
        # bound the drift between the pair of rank-two recursions
        state.bfgs_inv = np.linalg.inv(state.bfgs)


def _reset_bfgs(state: SolverState, scale: float = 1.0) -> None:
    n = state.primal.size
    state.bfgs = np.eye(n) * scale
    state.bfgs_inv = np.eye(n) / scale


# ---------------------------------------------------------------------------
# merit function for the refine-mode line search


def _merit(problem, z, mu, obj=None, c=None) -> float:
    if obj is None:
        obj = problem.objective(z)
    if c is None:
        c = problem.eq_residual(z)
    phi = obj + mu * float(np.sum(np.abs(c)))
    if problem.m_ineq:
        gz = problem.ineq_matrix @ z
        phi += mu * float(np.sum(np.maximum(gz - problem.ineq_hi, 0.0)))
        phi += mu * float(np.sum(np.maximum(problem.ineq_lo - gz, 0.0)))
    phi += mu * float(np.sum(np.maximum(z - problem.ub, 0.0)[np.isfinite(problem.ub)], initial=0.0))
    phi += mu * float(np.sum(np.maximum(problem.lb - z, 0.0)[np.isfinite(problem.lb)], initial=0.0))
    return phi


def _constraint_l1(problem, z, c) -> float:
    total = float(np.sum(np.abs(c)))
    if problem.m_ineq:
        gz = problem.ineq_matrix @ z
        total += float(np.sum(np.maximum(gz - problem.ineq_hi, 0.0)))
        total += float(np.sum(np.maximum(problem.ineq_lo - gz, 0.0)))
    total += float(np.sum(np.maximum(z - problem.ub, 0.0)[np.isfinite(problem.ub)], initial=0.0))
    total += float(np.sum(np.maximum(problem.lb - z, 0.0)[np.isfinite(problem.lb)], initial=0.0))
    return total


# ---------------------------------------------------------------------------
# the SQP driver


def solve(problem: NlpProblem, state: SolverState, settings: SolverSettings):
    """Run up to settings.max_iterations SQP iterations on the problem.

    Mutates and returns the state; the second element is the status.  In
    REAL_TIME mode an ITERATION_LIMIT outcome is expected operation.
    """
    z = state.primal
    if z.shape != (problem.n,):
        raise InvalidArgumentError(
            f"state primal has length {z.shape}, problem expects ({problem.n},)"
        )
    tol = settings.tolerance
    state.iterations_used = 0

    obj, grad, c, jac = problem.eval_all(z)
    if not _all_finite(obj, grad, c, jac):
        state.pending_step = None
        _reset_bfgs(state)
        state.last_kkt = KktResidual(np.inf, np.inf, np.inf)
        return state, SolverStatus.NUMERIC_FAILURE

    if state.pending_step is not None:
        # complete the secant pair left by the previous call's step
        _consume_pending(state, problem, grad, jac, settings.regularization)

    status = SolverStatus.ITERATION_LIMIT
    for it in range(settings.max_iterations):
        kkt = _kkt_terms(problem, z, grad, c, state.dual_eq, state.dual_ineq, state.dual_box, eq_jac=jac)
        state.last_kkt = kkt
        if kkt.converged(tol):
            return state, SolverStatus.CONVERGED

        gz = problem.ineq_matrix @ z if problem.m_ineq else np.zeros(0)
        red = problem.reduction(z, c, jac) if problem.m_eq else None
        if red is not None:
            qp = _solve_qp_reduced(problem, red, state, z, grad, gz, settings)
        else:
            p_start = problem.equality_feasible_step(z, c, jac) if problem.m_eq else None
            qp = _solve_qp(
                state.bfgs_inv,
                grad,
                jac if problem.m_eq else np.zeros((0, problem.n)),
                -c,
                problem.ineq_matrix,
                problem.ineq_lo - gz,
                problem.ineq_hi - gz,
                problem.lb - z,
                problem.ub - z,
                state.active_ineq,
                state.active_box,
                iteration_limit=settings.qp_iteration_limit,
                p_start=p_start,
            )
        state.iterations_used += 1
        if not qp.ok:
            state.qp_degraded += 1
        if not np.all(np.isfinite(qp.p)):
            state.pending_step = None
            _reset_bfgs(state)
            return state, SolverStatus.NUMERIC_FAILURE

        lam_inf = max(
            float(np.max(np.abs(qp.lam_eq), initial=0.0)),
            float(np.max(np.abs(qp.lam_ineq), initial=0.0)),
            float(np.max(np.abs(qp.lam_box), initial=0.0)),
        )
        state.merit_penalty = max(state.merit_penalty, 1.5 * lam_inf + 0.1)

        # multipliers are accepted regardless of the primal step length; a
        # vanishing step with fresh multipliers is how convergence is detected.
        # the working set carries over even from a budget-capped solve, so a
        # later call resumes the path instead of rediscovering it
        state.dual_eq = qp.lam_eq
        state.dual_ineq = qp.lam_ineq
        state.dual_box = qp.lam_box
        state.active_ineq = qp.act_rows
        state.active_box = qp.act_box

        alpha = 1.0
        if settings.mode is SolverMode.REFINE:
            alpha = _line_search(problem, z, qp.p, obj, c, grad, state.merit_penalty)

        step_size = alpha * float(np.max(np.abs(qp.p), initial=0.0))
        if step_size < 1e-12:
            # multiplier-only progress; evaluations stay valid as-is
            continue

        grad_lag = grad.copy()
        if problem.m_eq:
            grad_lag += jac.T @ qp.lam_eq
        if problem.m_ineq:
            grad_lag += problem.ineq_matrix.T @ qp.lam_ineq
        grad_lag += qp.lam_box
        state.pending_step = alpha * qp.p
        state.pending_grad_lag = grad_lag

        backup = z.copy()
        z += alpha * qp.p

        if it + 1 < settings.max_iterations or settings.mode is SolverMode.REFINE:
            obj, grad, c, jac = problem.eval_all(z)
            if not _all_finite(obj, grad, c, jac):
                z[:] = backup
                state.pending_step = None
                _reset_bfgs(state)
                return state, SolverStatus.NUMERIC_FAILURE
            _consume_pending(state, problem, grad, jac, settings.regularization)
        else:
            # streaming mode: the next call re-evaluates at the stepped point
            # anyway and completes the pair then
            return state, SolverStatus.ITERATION_LIMIT

    kkt = _kkt_terms(problem, z, grad, c, state.dual_eq, state.dual_ineq, state.dual_box, eq_jac=jac)
    state.last_kkt = kkt
    if kkt.converged(tol):
        status = SolverStatus.CONVERGED
    return state, status


def _consume_pending(state: SolverState, problem, grad, jac, floor: float) -> None:
    grad_l_new = grad.copy()
    if problem.m_eq:
        grad_l_new += jac.T @ state.dual_eq
    if problem.m_ineq:
        grad_l_new += problem.ineq_matrix.T @ state.dual_ineq
    grad_l_new += state.dual_box
    _bfgs_update(state, state.pending_step, grad_l_new - state.pending_grad_lag, floor)
    state.pending_step = None
    state.pending_grad_lag = None


def _line_search(problem, z, p, obj, c, grad, mu):
    """Backtracking Armijo search on the l1 merit; returns the step length.

    A direction along which no backtracked step decreases the merit yields
    a zero step; the caller then makes multiplier-only progress.
    """
    viol0 = _constraint_l1(problem, z, c)
    phi0 = obj + mu * viol0
    deriv = min(float(grad @ p) - mu * viol0, -1e-16)
    alpha = 1.0
    for _ in range(30):
        trial = z + alpha * p
        phi = _merit(problem, trial, mu)
        if phi <= phi0 + 1e-4 * alpha * deriv:
            return alpha
        alpha *= 0.5
    return 0.0


def _all_finite(*values) -> bool:
    for v in values:
        if v is None:
            continue
        if isinstance(v, np.ndarray):
            if not np.all(np.isfinite(v)):
                return False
        elif not math.isfinite(v):
            return False
    return True


# ---------------------------------------------------------------------------
# warm starting


def warm_start_shift(state: SolverState, new_tail_reference: Pose | None = None) -> SolverState:
    """Shift the solution one period earlier for the next receding solve.

    States and controls move one index down; the freed terminal control
    repeats the previous last entry and the freed terminal state takes the
    new reference tail when given (repeating otherwise).  Multipliers and
    the active set shift the same way; the BFGS model is retained.
    """
    n_vars = state.primal.size
    if (n_vars - 3) % 5 != 0:
        raise InvalidArgumentError(f"primal length {n_vars} is not of the form 5N+3")
    n = (n_vars - 3) // 5
    state.pending_step = None  # the stored secant no longer matches the primal
    state.pending_grad_lag = None
    z = state.primal
    if n > 1:
        z[: 5 * (n - 1)] = z[5 : 5 * n]
    # old terminal state becomes node N-1; last control repeats
    z[5 * (n - 1) : 5 * (n - 1) + 3] = z[5 * n :]
    if n >= 2:
        z[5 * (n - 1) + 3 : 5 * (n - 1) + 5] = z[5 * (n - 2) + 3 : 5 * (n - 2) + 5]
    if new_tail_reference is not None:
        z[5 * n :] = new_tail_reference.as_vector()

    if state.dual_eq.size == 3 * n + 5:
        defects = state.dual_eq[5:].reshape(n, 3)
        if n > 1:
            defects[:-1] = defects[1:]
    _shift_pairs(state.dual_ineq, 2)
    _shift_pairs(state.active_ineq, 2)
    _shift_nodes(state.dual_box, n)
    _shift_nodes(state.active_box, n)
    return state


def _shift_pairs(arr, width: int) -> None:
    rows = arr.size // width
    if rows > 1:
        view = arr.reshape(rows, width)
        view[:-1] = view[1:]


def _shift_nodes(arr, n: int) -> None:
    if arr.size != 5 * n + 3:
        return
    states = arr[_node_state_idx(n)].reshape(n + 1, 3)
    controls = arr[_node_ctrl_idx(n)].reshape(n, 2)
    states[:-1] = states[1:]
    if n > 1:
        controls[:-1] = controls[1:]
    arr[_node_state_idx(n)] = states.ravel()
    arr[_node_ctrl_idx(n)] = controls.ravel()


def _node_state_idx(n: int) -> np.ndarray:
    return (5 * np.arange(n + 1)[:, None] + np.arange(3)).ravel()


def _node_ctrl_idx(n: int) -> np.ndarray:
    return (5 * np.arange(n)[:, None] + 3 + np.arange(2)).ravel()
