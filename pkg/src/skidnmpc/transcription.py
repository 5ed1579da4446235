"""Multiple-shooting transcription of the tracking problem.

The continuous tracking problem is discretized on an N-step grid with step
dt.  States at every grid node and controls at the first N nodes are stacked
into one decision vector

    z = [x_0, u_0, x_1, u_1, ..., x_{N-1}, u_{N-1}, x_N]   (length 5N + 3)

and the transcription produces, in solver-ready form:

  * objective J(z) = 1/2 * sum_{k=1}^{N-1} L_k + L_N, where the running term
    penalizes pose error, model-rate error and control effort with diagonal
    weights, and the terminal term penalizes pose and rate error.  The model
    rate at node k is expanded through the kinematics as a function of
    (x_k, u_k) instead of adding rate variables, which keeps the stated
    5N + 3 dimension.  The terminal rate reuses the last control u_{N-1}.
  * equality constraints: the first state and control pinned to the current
    measurements (5 rows), and one shooting defect per interval
    x_{k+1} - integrate(x_k, u_k, dt) = 0 (3N rows).
  * box bounds on every state and control, and linear two-sided rows
    bounding the discrete control slew (u_{k+1} - u_k) / dt.
  * exact first derivatives of all of the above; `gradient_check` compares
    them against central finite differences.

The node-0 box and the first slew row are widened just enough to contain the
measured control, so a measurement outside the operating range (e.g. wheels
at rest while the lower rate bound is positive) cannot make the constraint
set empty; the pinning equalities still hold exactly.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError, InvalidArgumentError
from .model import Integrator, PlatformParams, WheelRates, smooth_gate
from .se2 import Pose

__all__ = [
    "HorizonConfig",
    "Weights",
    "Bounds",
    "DecisionVector",
    "NlpProblem",
    "build_nlp",
    "shooting_defect",
    "acceleration_rows",
    "gradient_check",
]


def _as_tuple(value, length: int, name: str) -> tuple[float, ...]:
    out = tuple(float(v) for v in np.atleast_1d(np.asarray(value, dtype=float)))
    if len(out) == 1:
        out = out * length
    if len(out) != length:
        raise InvalidArgumentError(f"{name} must have {length} entries, got {len(out)}")
    return out


@dataclass(frozen=True)
class HorizonConfig:
    n: int = 30
    dt: float = 0.1
    integrator: Integrator = Integrator.EULER
    deadzone_in_model: bool = True

    def __post_init__(self):
        if self.n < 1:
            raise InvalidArgumentError(f"horizon length must be >= 1, got {self.n}")
        if not (self.dt > 0.0):
            raise InvalidArgumentError(f"horizon step must be positive, got {self.dt}")

    @property
    def n_vars(self) -> int:
        return 5 * self.n + 3


@dataclass(frozen=True)
class Weights:
    """Diagonal cost weights: pose and rate tracking, control effort."""

    q_x: tuple = (20.0, 20.0, 12.0)
    q_xdot: tuple = (1.0, 1.0, 1.0)
    r: tuple = (0.2, 0.2)
    q_x_terminal: tuple = (20.0, 20.0, 12.0)
    q_xdot_terminal: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "q_x", _as_tuple(self.q_x, 3, "q_x"))
        object.__setattr__(self, "q_xdot", _as_tuple(self.q_xdot, 3, "q_xdot"))
        object.__setattr__(self, "r", _as_tuple(self.r, 2, "r"))
        object.__setattr__(self, "q_x_terminal", _as_tuple(self.q_x_terminal, 3, "q_x_terminal"))
        object.__setattr__(self, "q_xdot_terminal", _as_tuple(self.q_xdot_terminal, 3, "q_xdot_terminal"))
        for name in ("q_x", "q_xdot", "r", "q_x_terminal", "q_xdot_terminal"):
            if any(v < 0.0 for v in getattr(self, name)):
                raise InvalidArgumentError(f"weight {name} must be nonnegative")


_INF3 = (math.inf, math.inf, math.inf)


@dataclass(frozen=True)
class Bounds:
    x_min: tuple = tuple(-v for v in _INF3)
    x_max: tuple = _INF3
    rate_min: tuple = (0.1, 0.1)
    rate_max: tuple = (0.8, 0.8)
    accel_min: tuple = (-0.2, -0.2)
    accel_max: tuple = (0.2, 0.2)

    def __post_init__(self):
        object.__setattr__(self, "x_min", _as_tuple(self.x_min, 3, "x_min"))
        object.__setattr__(self, "x_max", _as_tuple(self.x_max, 3, "x_max"))
        object.__setattr__(self, "rate_min", _as_tuple(self.rate_min, 2, "rate_min"))
        object.__setattr__(self, "rate_max", _as_tuple(self.rate_max, 2, "rate_max"))
        object.__setattr__(self, "accel_min", _as_tuple(self.accel_min, 2, "accel_min"))
        object.__setattr__(self, "accel_max", _as_tuple(self.accel_max, 2, "accel_max"))
        for lo_name, hi_name in (("x_min", "x_max"), ("rate_min", "rate_max"), ("accel_min", "accel_max")):
            lo, hi = getattr(self, lo_name), getattr(self, hi_name)
            if any(a > b for a, b in zip(lo, hi)):
                raise InvalidArgumentError(f"{lo_name} must be <= {hi_name} componentwise")


class DecisionVector:
    """Flat decision vector with bounds-checked node accessors."""

    __slots__ = ("z", "n")

    def __init__(self, z, n: int):
        z = np.asarray(z, dtype=float)
        if z.shape != (5 * n + 3,):
            raise InvalidArgumentError(
                f"decision vector for horizon {n} must have length {5 * n + 3}, got {z.shape}"
            )
        self.z = z
        self.n = n

    def __len__(self) -> int:
        return self.z.size

    def _check_state(self, k: int) -> None:
        if not 0 <= k <= self.n:
            raise IndexError(f"state index {k} outside 0..{self.n}")

    def _check_control(self, k: int) -> None:
        if not 0 <= k < self.n:
            raise IndexError(f"control index {k} outside 0..{self.n - 1}")

    def state(self, k: int) -> np.ndarray:
        self._check_state(k)
        return self.z[5 * k : 5 * k + 3].copy()

    def control(self, k: int) -> np.ndarray:
        self._check_control(k)
        return self.z[5 * k + 3 : 5 * k + 5].copy()

    def set_state(self, k: int, value) -> None:
        self._check_state(k)
        self.z[5 * k : 5 * k + 3] = value

    def set_control(self, k: int, value) -> None:
        self._check_control(k)
        self.z[5 * k + 3 : 5 * k + 5] = value

    def states(self) -> np.ndarray:
        """All states as an (N+1, 3) array (copy)."""
        return self.z[_state_flat_indices(self.n)].reshape(self.n + 1, 3)

    def controls(self) -> np.ndarray:
        """All controls as an (N, 2) array (copy)."""
        return self.z[_control_flat_indices(self.n)].reshape(self.n, 2)

    def copy(self) -> "DecisionVector":
        return DecisionVector(self.z.copy(), self.n)

    @staticmethod
    def from_rollout(
        config: HorizonConfig,
        params: PlatformParams,
        start: Pose,
        controls,
    ) -> "DecisionVector":
        """Assemble a dynamically consistent vector by forward simulation."""
        controls = np.asarray(controls, dtype=float)
        if controls.shape != (config.n, 2):
            raise InvalidArgumentError(f"expected ({config.n}, 2) controls, got {controls.shape}")
        z = np.empty(config.n_vars)
        x = start.as_vector()
        for k in range(config.n):
            z[5 * k : 5 * k + 3] = x
            z[5 * k + 3 : 5 * k + 5] = controls[k]
            x = _propagate(config, params, x[None, :], controls[k][None, :])[0][0]
        z[5 * config.n :] = x
        return DecisionVector(z, config.n)


@functools.lru_cache(maxsize=32)
def _state_flat_indices(n: int) -> np.ndarray:
    return (5 * np.arange(n + 1)[:, None] + np.arange(3)).ravel()


@functools.lru_cache(maxsize=32)
def _control_flat_indices(n: int) -> np.ndarray:
    return (5 * np.arange(n)[:, None] + 3 + np.arange(2)).ravel()


class NlpProblem:
    """A smooth NLP with equality constraints, box bounds and linear rows.

    Immutable after construction; every evaluation method is pure, so one
    instance may be evaluated from several threads at once.
    """

    def __init__(
        self,
        n: int,
        objective,
        cost_gradient,
        eq_residual=None,
        eq_jacobian=None,
        m_eq: int = 0,
        lb=None,
        ub=None,
        ineq_matrix=None,
        ineq_lo=None,
        ineq_hi=None,
    ):
        self.n = int(n)
        self.m_eq = int(m_eq)
        self._objective = objective
        self._cost_gradient = cost_gradient
        self._eq_residual = eq_residual
        self._eq_jacobian = eq_jacobian
        self.lb = np.full(self.n, -np.inf) if lb is None else np.asarray(lb, dtype=float)
        self.ub = np.full(self.n, np.inf) if ub is None else np.asarray(ub, dtype=float)
        if ineq_matrix is None:
            self.ineq_matrix = np.zeros((0, self.n))
            self.ineq_lo = np.zeros(0)
            self.ineq_hi = np.zeros(0)
        else:
            self.ineq_matrix = np.asarray(ineq_matrix, dtype=float)
            self.ineq_lo = np.asarray(ineq_lo, dtype=float)
            self.ineq_hi = np.asarray(ineq_hi, dtype=float)
        if self.lb.shape != (self.n,) or self.ub.shape != (self.n,):
            raise InvalidArgumentError("bound arrays must match the problem dimension")

    @property
    def m_ineq(self) -> int:
        return self.ineq_matrix.shape[0]

    def objective(self, z) -> float:
        return float(self._objective(np.asarray(z, dtype=float)))

    def cost_gradient(self, z) -> np.ndarray:
        return np.asarray(self._cost_gradient(np.asarray(z, dtype=float)), dtype=float)

    def eval_objective_gradient(self, z) -> tuple[float, np.ndarray]:
        z = np.asarray(z, dtype=float)
        return self.objective(z), self.cost_gradient(z)

    def eq_residual(self, z) -> np.ndarray:
        if self._eq_residual is None:
            return np.zeros(0)
        return np.asarray(self._eq_residual(np.asarray(z, dtype=float)), dtype=float)

    def eq_jacobian(self, z) -> np.ndarray:
        if self._eq_jacobian is None:
            return np.zeros((0, self.n))
        return np.asarray(self._eq_jacobian(np.asarray(z, dtype=float)), dtype=float)

    def eval_eq(self, z) -> tuple[np.ndarray, np.ndarray]:
        z = np.asarray(z, dtype=float)
        return self.eq_residual(z), self.eq_jacobian(z)

    def eval_all(self, z):
        """(objective, gradient, eq residual, eq Jacobian) in one call."""
        z = np.asarray(z, dtype=float)
        obj, grad = self.eval_objective_gradient(z)
        c, jac = self.eval_eq(z)
        return obj, grad, c, jac

    def equality_feasible_step(self, z, c, jac):
        """A step p with jac @ p = -c that keeps inequalities feasible, or
        None when the problem has no structure to exploit."""
        return None

    def reduction(self, z, c, jac):
        """Closed-form equality elimination, when the structure allows it."""
        return None


# ---------------------------------------------------------------------------
# model evaluation over the horizon


def _node_terms(trans: "_Transcriber", z: np.ndarray):
    """Per-node model rates and their partials at the current iterate."""
    n = trans.config.n
    x = z[trans.state_flat].reshape(n + 1, 3)
    u = z[trans.ctrl_flat].reshape(n, 2)
    return x, u, _rates_and_partials(trans, x[:, 2], u)


def _rates_and_partials(trans: "_Transcriber", alpha: np.ndarray, u: np.ndarray):
    """Model rate f(alpha, u) at nodes 0..N (node N reuses u_{N-1}).

    Returns (F, dF_dalpha, dF_du) with shapes (N+1, 3), (N+1, 3), (N+1, 3, 2)
    where row k of dF_du differentiates against the control feeding node k.
    """
    params = trans.params
    if trans.config.deadzone_in_model:
        su, dsu = smooth_gate(u, params.deadzone_delta, params.deadzone_kappa)
    else:
        su, dsu = u, np.ones_like(u)
    half_r = 0.5 * params.r
    v = half_r * (su[:, 0] + su[:, 1])
    w = (half_r / params.c) * (su[:, 0] - su[:, 1])
    v_ext = np.concatenate([v, v[-1:]])
    w_ext = np.concatenate([w, w[-1:]])
    dsu_ext = np.concatenate([dsu, dsu[-1:]], axis=0)
    sin_a, cos_a = np.sin(alpha), np.cos(alpha)
    f = np.stack([cos_a * v_ext, sin_a * v_ext, w_ext], axis=-1)
    df_dalpha = np.stack([-sin_a * v_ext, cos_a * v_ext, np.zeros_like(w_ext)], axis=-1)
    dv = half_r * dsu_ext
    dw = (half_r / params.c) * dsu_ext * np.array([1.0, -1.0])
    df_du = np.empty((alpha.size, 3, 2))
    df_du[:, 0, :] = cos_a[:, None] * dv
    df_du[:, 1, :] = sin_a[:, None] * dv
    df_du[:, 2, :] = dw
    return f, df_dalpha, df_du


def _stage_rates(trans: "_Transcriber", x: np.ndarray, u_gated):
    """f and its partials at intermediate integrator stages (batched)."""
    su, dsu = u_gated
    params = trans.params
    half_r = 0.5 * params.r
    v = half_r * (su[:, 0] + su[:, 1])
    w = (half_r / params.c) * (su[:, 0] - su[:, 1])
    sin_a, cos_a = np.sin(x[:, 2]), np.cos(x[:, 2])
    f = np.stack([cos_a * v, sin_a * v, w], axis=-1)
    dfdx = np.zeros((x.shape[0], 3, 3))
    dfdx[:, 0, 2] = -sin_a * v
    dfdx[:, 1, 2] = cos_a * v
    dv = half_r * dsu
    dw = (half_r / params.c) * dsu * np.array([1.0, -1.0])
    dfdu = np.empty((x.shape[0], 3, 2))
    dfdu[:, 0, :] = cos_a[:, None] * dv
    dfdu[:, 1, :] = sin_a[:, None] * dv
    dfdu[:, 2, :] = dw
    return f, dfdx, dfdu


def _propagate(config: HorizonConfig, params: PlatformParams, x: np.ndarray, u: np.ndarray):
    """Integrate each (x_k, u_k) pair one step; returns (x_next, dPhi_dx, dPhi_du)."""
    trans_like = _StageContext(config, params)
    if config.deadzone_in_model:
        gated = smooth_gate(u, params.deadzone_delta, params.deadzone_kappa)
    else:
        gated = (u, np.ones_like(u))
    dt = config.dt
    m = x.shape[0]
    eye = np.broadcast_to(np.eye(3), (m, 3, 3))
    if config.integrator is Integrator.EULER:
        f1, a1, b1 = _stage_rates(trans_like, x, gated)
        x_next = x + dt * f1
        dphi_dx = eye + dt * a1
        dphi_du = dt * b1
        return x_next, dphi_dx, dphi_du
    # classical RK4 with the control held over the step
    f1, a1, b1 = _stage_rates(trans_like, x, gated)
    x2 = x + 0.5 * dt * f1
    f2, a2, b2 = _stage_rates(trans_like, x2, gated)
    x3 = x + 0.5 * dt * f2
    f3, a3, b3 = _stage_rates(trans_like, x3, gated)
    x4 = x + dt * f3
    f4, a4, b4 = _stage_rates(trans_like, x4, gated)
    x_next = x + (dt / 6.0) * (f1 + 2.0 * f2 + 2.0 * f3 + f4)

    dk1_dx, dk1_du = a1, b1
    dk2_dx = np.einsum("kij,kjl->kil", a2, eye + 0.5 * dt * dk1_dx)
    dk2_du = np.einsum("kij,kjl->kil", a2, 0.5 * dt * dk1_du) + b2
    dk3_dx = np.einsum("kij,kjl->kil", a3, eye + 0.5 * dt * dk2_dx)
    dk3_du = np.einsum("kij,kjl->kil", a3, 0.5 * dt * dk2_du) + b3
    dk4_dx = np.einsum("kij,kjl->kil", a4, eye + dt * dk3_dx)
    dk4_du = np.einsum("kij,kjl->kil", a4, dt * dk3_du) + b4
    dphi_dx = eye + (dt / 6.0) * (dk1_dx + 2.0 * dk2_dx + 2.0 * dk3_dx + dk4_dx)
    dphi_du = (dt / 6.0) * (dk1_du + 2.0 * dk2_du + 2.0 * dk3_du + dk4_du)
    return x_next, dphi_dx, dphi_du


class _StageContext:
    """Minimal (config, params) carrier for the stage evaluators."""

    __slots__ = ("config", "params")

    def __init__(self, config, params):
        self.config = config
        self.params = params


# ---------------------------------------------------------------------------
# transcriber: all index bookkeeping precomputed once per configuration


class _Transcriber:
    def __init__(self, config, weights, bounds, params):
        self.config = config
        self.params = params
        n = config.n
        nv = config.n_vars
        self.n_vars = nv
        self.m_eq = 3 * n + 5
        self.state_flat = _state_flat_indices(n)
        self.ctrl_flat = _control_flat_indices(n)

        self.qx = np.asarray(weights.q_x)
        self.qv = np.asarray(weights.q_xdot)
        self.qr = np.asarray(weights.r)
        self.qxN = np.asarray(weights.q_x_terminal)
        self.qvN = np.asarray(weights.q_xdot_terminal)

        # flat write positions inside the dense (m_eq, n_vars) Jacobian
        rows_pin = np.arange(5)
        self.pin_flat = rows_pin * nv + rows_pin  # identity block at columns 0..4
        k = np.arange(n)
        row0 = 5 + 3 * k  # first row of defect block k
        eye_rows = (row0[:, None] + np.arange(3)).ravel()
        eye_cols = (5 * (k + 1)[:, None] + np.arange(3)).ravel()
        self.eye_flat = eye_rows * nv + eye_cols
        blk_rows = np.repeat(row0[:, None] + np.arange(3), 3, axis=-1).reshape(n, 3, 3)
        blk_cols = np.broadcast_to((5 * k)[:, None, None] + np.arange(3), (n, 3, 3))
        self.jx_flat = (blk_rows * nv + blk_cols).ravel()
        ju_rows = np.repeat(row0[:, None] + np.arange(3), 2, axis=-1).reshape(n, 3, 2)
        ju_cols = np.broadcast_to((5 * k + 3)[:, None, None] + np.arange(2), (n, 3, 2))
        self.ju_flat = (ju_rows * nv + ju_cols).ravel()

        # constant slew rows: (u_{k+1} - u_k) / dt for k = 0..N-2
        m_in = 2 * (n - 1)
        g = np.zeros((m_in, nv))
        inv_dt = 1.0 / config.dt
        for kk in range(n - 1):
            for j in range(2):
                r_ = 2 * kk + j
                g[r_, 5 * kk + 3 + j] = -inv_dt
                g[r_, 5 * (kk + 1) + 3 + j] = inv_dt
        self.ineq_matrix = g
        self.ineq_lo_base = np.tile(np.asarray(bounds.accel_min), n - 1) if n > 1 else np.zeros(0)
        self.ineq_hi_base = np.tile(np.asarray(bounds.accel_max), n - 1) if n > 1 else np.zeros(0)

        lb = np.empty(nv)
        ub = np.empty(nv)
        lb[self.state_flat] = np.tile(np.asarray(bounds.x_min), n + 1)
        ub[self.state_flat] = np.tile(np.asarray(bounds.x_max), n + 1)
        lb[self.ctrl_flat] = np.tile(np.asarray(bounds.rate_min), n)
        ub[self.ctrl_flat] = np.tile(np.asarray(bounds.rate_max), n)
        self.lb_base = lb
        self.ub_base = ub
        self.rate_min = np.asarray(bounds.rate_min)
        self.rate_max = np.asarray(bounds.rate_max)
        self.state_bounds_infinite = not (
            np.any(np.isfinite(bounds.x_min)) or np.any(np.isfinite(bounds.x_max))
        )

        # static scaffolding of the closed-form equality elimination
        if n >= 2:
            ks = np.arange(1, n)
            js = np.arange(n + 1)
            self.red_free_idx = (5 * ks[:, None] + 3 + np.arange(2)).ravel()
            self.red_reach = (js[:, None] >= (ks + 1)[None, :]).astype(float)
            self.red_ks = ks
        else:
            self.red_free_idx = np.zeros(0, dtype=int)
            self.red_reach = np.zeros((n + 1, 0))
            self.red_ks = np.zeros(0, dtype=int)


@functools.lru_cache(maxsize=16)
def _transcriber(config, weights, bounds, params) -> _Transcriber:
    return _Transcriber(config, weights, bounds, params)


class TranscribedProblem(NlpProblem):
    """The multiple-shooting NLP for one (references, measurement) instance."""

    def __init__(self, trans: _Transcriber, ref_poses, ref_rates, meas_pose, meas_rates):
        self._trans = trans
        self.ref_poses = ref_poses
        self.ref_rates = ref_rates
        self.meas_pose = meas_pose
        self.meas_rates = meas_rates
        n = trans.config.n
        dt = trans.config.dt

        lb = trans.lb_base.copy()
        ub = trans.ub_base.copy()
        # widen the node-0 boxes to contain the pinned measurement
        lb[0:3] = np.minimum(lb[0:3], meas_pose)
        ub[0:3] = np.maximum(ub[0:3], meas_pose)
        lb[3:5] = np.minimum(lb[3:5], meas_rates)
        ub[3:5] = np.maximum(ub[3:5], meas_rates)

        ineq_lo = trans.ineq_lo_base.copy()
        ineq_hi = trans.ineq_hi_base.copy()
        if n > 1:
            # keep the first slew row consistent with the pinned u_0: the step
            # from the measurement into the admissible rate box must exist
            ineq_hi[0:2] = np.maximum(ineq_hi[0:2], (trans.rate_min - meas_rates) / dt)
            ineq_lo[0:2] = np.minimum(ineq_lo[0:2], (trans.rate_max - meas_rates) / dt)

        super().__init__(
            n=trans.n_vars,
            objective=None,
            cost_gradient=None,
            m_eq=trans.m_eq,
            lb=lb,
            ub=ub,
            ineq_matrix=trans.ineq_matrix,
            ineq_lo=ineq_lo,
            ineq_hi=ineq_hi,
        )

    # -- objective ---------------------------------------------------------

    def objective(self, z) -> float:
        return self._cost(np.asarray(z, dtype=float), with_gradient=False)[0]

    def cost_gradient(self, z) -> np.ndarray:
        return self._cost(np.asarray(z, dtype=float), with_gradient=True)[1]

    def eval_objective_gradient(self, z):
        return self._cost(np.asarray(z, dtype=float), with_gradient=True)

    def _cost(self, z, with_gradient: bool):
        trans = self._trans
        n = trans.config.n
        x, u, (f, df_da, df_du) = _node_terms(trans, z)
        if with_gradient:
            return self._cost_from_terms(n, x, u, f, df_da, df_du)
        ex = x - self.ref_poses
        ev = f - self.ref_rates
        j = 0.0
        if n > 1:
            j += 0.5 * (
                np.einsum("ki,i,ki->", ex[1:n], trans.qx, ex[1:n])
                + np.einsum("ki,i,ki->", ev[1:n], trans.qv, ev[1:n])
                + np.einsum("ki,i,ki->", u[1:n], trans.qr, u[1:n])
            )
        j += ex[n] @ (trans.qxN * ex[n]) + ev[n] @ (trans.qvN * ev[n])
        return j, None

    def _cost_from_terms(self, n, x, u, f, df_da, df_du):
        trans = self._trans
        ex = x - self.ref_poses
        ev = f - self.ref_rates
        j = 0.0
        gs = np.zeros((n + 1, 3))
        gu = np.zeros((n, 2))
        if n > 1:
            j += 0.5 * (
                np.einsum("ki,i,ki->", ex[1:n], trans.qx, ex[1:n])
                + np.einsum("ki,i,ki->", ev[1:n], trans.qv, ev[1:n])
                + np.einsum("ki,i,ki->", u[1:n], trans.qr, u[1:n])
            )
            qv_ev = trans.qv * ev[1:n]
            gs[1:n] = trans.qx * ex[1:n]
            gs[1:n, 2] += np.einsum("ki,ki->k", df_da[1:n], qv_ev)
            gu[1:n] = trans.qr * u[1:n] + np.einsum("kij,ki->kj", df_du[1:n], qv_ev)
        j += ex[n] @ (trans.qxN * ex[n]) + ev[n] @ (trans.qvN * ev[n])
        qvN_ev = trans.qvN * ev[n]
        gs[n] = 2.0 * trans.qxN * ex[n]
        gs[n, 2] += 2.0 * (df_da[n] @ qvN_ev)
        gu[n - 1] += 2.0 * (df_du[n].T @ qvN_ev)

        grad = np.empty(trans.n_vars)
        grad[trans.state_flat] = gs.ravel()
        grad[trans.ctrl_flat] = gu.ravel()
        return j, grad

    # -- equality constraints ----------------------------------------------

    def eq_residual(self, z) -> np.ndarray:
        return self._equalities(np.asarray(z, dtype=float), with_jacobian=False)[0]

    def eq_jacobian(self, z) -> np.ndarray:
        return self._equalities(np.asarray(z, dtype=float), with_jacobian=True)[1]

    def eval_eq(self, z):
        return self._equalities(np.asarray(z, dtype=float), with_jacobian=True)

    def _equalities(self, z, with_jacobian: bool):
        trans = self._trans
        n = trans.config.n
        x = z[trans.state_flat].reshape(n + 1, 3)
        u = z[trans.ctrl_flat].reshape(n, 2)
        x_next, dphi_dx, dphi_du = _propagate(trans.config, trans.params, x[:n], u)
        c = np.empty(trans.m_eq)
        c[0:3] = x[0] - self.meas_pose
        c[3:5] = u[0] - self.meas_rates
        c[5:] = (x[1:] - x_next).ravel()
        if not with_jacobian:
            return c, None
        return c, self._assemble_jacobian(dphi_dx, dphi_du)

    def _assemble_jacobian(self, dphi_dx, dphi_du) -> np.ndarray:
        trans = self._trans
        a = np.zeros((trans.m_eq, trans.n_vars))
        flat = a.reshape(-1)
        flat[trans.pin_flat] = 1.0
        flat[trans.eye_flat] = 1.0
        flat[trans.jx_flat] = -dphi_dx.ravel()
        flat[trans.ju_flat] = -dphi_du.ravel()
        return a

    def eval_all(self, z):
        """Fused evaluation sharing one pass of the node trigonometry.

        For the Euler transcription the defect Jacobian blocks are built
        directly from the node rates; RK4 falls back to staged propagation.
        """
        z = np.asarray(z, dtype=float)
        trans = self._trans
        n = trans.config.n
        dt = trans.config.dt
        x, u, (f, df_da, df_du) = _node_terms(trans, z)
        obj, grad = self._cost_from_terms(n, x, u, f, df_da, df_du)

        c = np.empty(trans.m_eq)
        c[0:3] = x[0] - self.meas_pose
        c[3:5] = u[0] - self.meas_rates
        if trans.config.integrator is Integrator.EULER:
            c[5:] = (x[1:] - x[:n] - dt * f[:n]).ravel()
            dphi_dx = np.zeros((n, 3, 3))
            dphi_dx[:, 0, 0] = dphi_dx[:, 1, 1] = dphi_dx[:, 2, 2] = 1.0
            dphi_dx[:, 0, 2] = dt * df_da[:n, 0]
            dphi_dx[:, 1, 2] = dt * df_da[:n, 1]
            dphi_du = dt * df_du[:n]
        else:
            x_next, dphi_dx, dphi_du = _propagate(trans.config, trans.params, x[:n], u)
            c[5:] = (x[1:] - x_next).ravel()
        return obj, grad, c, self._assemble_jacobian(dphi_dx, dphi_du)

    def equality_feasible_step(self, z, c, jac):
        """Hold the controls and propagate the measurement correction.

        The shooting structure makes the linearized equalities a staircase:
        fixing the node-0 state and control to the pinned residual and
        marching the defect recursion yields a step that satisfies every
        equality row exactly while moving no control except the pinned one,
        so box and slew feasibility of the current iterate is preserved
        (the node-0 box and first slew row are widened for exactly this).
        """
        red = self.reduction(z, c, jac)
        if red is not None:
            return red.p_part
        trans = self._trans
        n = trans.config.n
        p = np.zeros(trans.n_vars)
        p[0:3] = -c[0:3]
        p[3:5] = -c[3:5]
        px = p[0:3]
        for k in range(n):
            rows = slice(5 + 3 * k, 8 + 3 * k)
            cols_x = slice(5 * k, 5 * k + 3)
            cols_u = slice(5 * k + 3, 5 * k + 5)
            phi_x = -jac[rows, cols_x]
            phi_u = -jac[rows, cols_u]
            px = phi_x @ px + phi_u @ p[cols_u] - c[5 + 3 * k : 8 + 3 * k]
            p[5 * (k + 1) : 5 * (k + 1) + 3] = px
        return p

    def reduction(self, z, c, jac):
        """Eliminate the shooting equalities in closed form.

        The state-transition blocks have the shape [[1,0,a],[0,1,b],[0,0,1]]
        (translation responds to heading only), so chained transitions are
        plain sums of the a and b entries and the whole null-space basis of
        the equality Jacobian follows from cumulative sums.  Returns None
        when a finite state bound prevents moving the boxes into the
        reduced control space.
        """
        trans = self._trans
        if not trans.state_bounds_infinite:
            return None
        n = trans.config.n
        nv = trans.n_vars

        # transition entries from the assembled Jacobian (stored negated)
        blocks_x = -jac.reshape(-1)[trans.jx_flat].reshape(n, 3, 3)
        blocks_u = -jac.reshape(-1)[trans.ju_flat].reshape(n, 3, 2)
        a = blocks_x[:, 0, 2]
        b = blocks_x[:, 1, 2]

        # particular step: node-0 pinned to the measurement residual, other
        # controls held; closed-form forward recursion
        c_def = c[5:].reshape(n, 3)
        drive = -c_def.copy()
        drive[0] += blocks_u[0] @ (-c[3:5])
        px2 = np.concatenate([[-c[2]], -c[2] + np.cumsum(drive[:, 2])])
        px0 = np.concatenate([[-c[0]], -c[0] + np.cumsum(drive[:, 0] + a * px2[:-1])])
        px1 = np.concatenate([[-c[1]], -c[1] + np.cumsum(drive[:, 1] + b * px2[:-1])])
        p_part = np.zeros(nv)
        p_part[trans.state_flat] = np.stack([px0, px1, px2], axis=-1).ravel()
        p_part[3:5] = -c[3:5]

        if n < 2:
            return _ShootingReduction(p_part, np.zeros((nv, 0)), np.zeros(0, dtype=int), a, b, blocks_u[0])

        # null-space basis: response of each state to each free control
        ks = trans.red_ks
        reach = trans.red_reach
        a_pre = np.concatenate([[0.0], np.cumsum(a)])  # prefix sums, node index
        b_pre = np.concatenate([[0.0], np.cumsum(b)])
        da = (a_pre[:, None] - a_pre[ks + 1][None, :]) * reach
        db = (b_pre[:, None] - b_pre[ks + 1][None, :]) * reach
        phi_u = blocks_u[ks]                            # (n-1, 3, 2)
        cells = np.empty((n + 1, 3, n - 1, 2))
        cells[:, 0] = (phi_u[None, :, 0, :] + da[:, :, None] * phi_u[None, :, 2, :]) * reach[:, :, None]
        cells[:, 1] = (phi_u[None, :, 1, :] + db[:, :, None] * phi_u[None, :, 2, :]) * reach[:, :, None]
        cells[:, 2] = phi_u[None, :, 2, :] * reach[:, :, None]

        basis = np.zeros((nv, 2 * (n - 1)))
        basis[trans.state_flat] = cells.reshape(3 * (n + 1), 2 * (n - 1))
        free_idx = trans.red_free_idx
        basis[free_idx, np.arange(2 * (n - 1))] = 1.0
        return _ShootingReduction(p_part, basis, free_idx, a, b, blocks_u[0])


class _ShootingReduction:
    """Null-space data for one linearized shooting problem."""

    __slots__ = ("p_part", "basis", "free_idx", "a", "b", "phi_u0")

    def __init__(self, p_part, basis, free_idx, a, b, phi_u0):
        self.p_part = p_part
        self.basis = basis
        self.free_idx = free_idx
        self.a = a
        self.b = b
        self.phi_u0 = phi_u0

    def recover_equality_duals(self, residual: np.ndarray) -> np.ndarray:
        """Multipliers of pins and defects from the stationarity residual.

        Solves A^T lam = -residual on the state and pinned coordinates by
        the closed-form backward recursion of the staircase transpose.
        """
        n = self.a.size
        r = residual.reshape(-1)[_state_flat_indices(n)].reshape(n + 1, 3)
        # suffix sums over nodes k+1..N
        s0 = np.cumsum(r[::-1, 0])[::-1]
        s1 = np.cumsum(r[::-1, 1])[::-1]
        s2 = np.cumsum(r[::-1, 2])[::-1]
        mu = np.empty((n, 3))
        mu[:, 0] = -s0[1:]
        mu[:, 1] = -s1[1:]
        # heading component accumulates the chained translation pull
        extra = np.zeros(n)
        if n > 1:
            terms = self.a[1:] * mu[1:, 0] + self.b[1:] * mu[1:, 1]
            extra[:-1] = np.cumsum(terms[::-1])[::-1]
        mu[:, 2] = -s2[1:] + extra
        lam = np.empty(3 * n + 5)
        lam[0] = mu[0, 0] - r[0, 0]
        lam[1] = mu[0, 1] - r[0, 1]
        lam[2] = self.a[0] * mu[0, 0] + self.b[0] * mu[0, 1] + mu[0, 2] - r[0, 2]
        lam[3:5] = self.phi_u0.T @ mu[0] - residual[3:5]
        lam[5:] = mu.ravel()
        return lam


def build_nlp(
    config: HorizonConfig,
    weights: Weights,
    bounds: Bounds,
    params: PlatformParams,
    refs: tuple[np.ndarray, np.ndarray],
    measured_pose: Pose,
    measured_rates: WheelRates,
) -> TranscribedProblem:
    """Assemble the solver-ready NLP for one control instant."""
    ref_poses = np.asarray(refs[0], dtype=float)
    ref_rates = np.asarray(refs[1], dtype=float)
    expect = (config.n + 1, 3)
    if ref_poses.shape != expect or ref_rates.shape != expect:
        raise ContractViolationError(
            f"references must both have shape {expect}, got {ref_poses.shape} and {ref_rates.shape}"
        )
    trans = _transcriber(config, weights, bounds, params)
    return TranscribedProblem(
        trans,
        ref_poses,
        ref_rates,
        measured_pose.as_vector(),
        measured_rates.as_array(),
    )


def shooting_defect(
    config: HorizonConfig,
    params: PlatformParams,
    x_k: Pose,
    rates_k: WheelRates,
    x_k1: Pose,
) -> np.ndarray:
    """Defect x_{k+1} - integrate(x_k, u_k, dt) for one interval."""
    x_next, _, _ = _propagate(config, params, x_k.as_vector()[None, :], rates_k.as_array()[None, :])
    return x_k1.as_vector() - x_next[0]


def acceleration_rows(config: HorizonConfig, z: DecisionVector | np.ndarray) -> np.ndarray:
    """Discrete control slew (u_{k+1} - u_k) / dt, shape (N-1, 2)."""
    if config.n < 2:
        raise ContractViolationError("slew rows need a horizon of at least 2 steps")
    arr = z.z if isinstance(z, DecisionVector) else np.asarray(z, dtype=float)
    if arr.shape != (config.n_vars,):
        raise ContractViolationError(f"expected decision vector of length {config.n_vars}")
    u = arr[_control_flat_indices(config.n)].reshape(config.n, 2)
    return (u[1:] - u[:-1]) / config.dt


def gradient_check(problem: NlpProblem, z, step: float = 1e-6) -> float:
    """Worst relative mismatch between analytic derivatives and central FD."""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise InvalidArgumentError("gradient check point must be finite")
    worst = 0.0

    grad = problem.cost_gradient(z)
    fd_grad = np.empty_like(grad)
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = step
        fd_grad[i] = (problem.objective(z + e) - problem.objective(z - e)) / (2.0 * step)
    scale = np.maximum(1.0, np.maximum(np.abs(grad), np.abs(fd_grad)))
    worst = max(worst, float(np.max(np.abs(grad - fd_grad) / scale)))

    if problem.m_eq:
        jac = problem.eq_jacobian(z)
        fd_jac = np.empty_like(jac)
        for i in range(z.size):
            e = np.zeros_like(z)
            e[i] = step
            fd_jac[:, i] = (problem.eq_residual(z + e) - problem.eq_residual(z - e)) / (2.0 * step)
        scale = np.maximum(1.0, np.maximum(np.abs(jac), np.abs(fd_jac)))
        worst = max(worst, float(np.max(np.abs(jac - fd_jac) / scale)))

    if problem.m_ineq:
        g = problem.ineq_matrix
        fd_g = np.empty_like(g)
        for i in range(z.size):
            e = np.zeros_like(z)
            e[i] = step
            fd_g[:, i] = (g @ (z + e) - g @ (z - e)) / (2.0 * step)
        scale = np.maximum(1.0, np.maximum(np.abs(g), np.abs(fd_g)))
        worst = max(worst, float(np.max(np.abs(g - fd_g) / scale)))

    return worst
