"""Iterated network Tikhonov reconstruction and the NETT, SIT and ART baselines.

Data misfit is measured in the normalized norm ``||y||_Y = ||y||_2 / sqrt(M)``
with exponent 2, so the duality map is ``y / M`` and each outer step solves

    min_x  (1/2M) ||F x - y||^2 + alpha_n * B(x, x_prev)

where ``B`` is the Bregman distance of the regularizer at ``x_prev`` in the
direction ``xi_prev``. The subgradient is then updated by
``xi_n = xi_prev - (1/alpha_n) (1/M) F^T (F x_n - y)``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional

import numpy as np

from . import tomo
from .core import GradTape, grad, total, value_of
from .network import NetworkSpec, ParamSet, Regularizer, forward
from .tomo import ProjectionOperator

log = logging.getLogger(__name__)


class DivergenceError(ArithmeticError):
    """An iterate became non-finite."""

    def __init__(self, message, inner_step):
        self.inner_step = inner_step
        super().__init__(f"{message} (inner step {inner_step})")


class ConvergenceError(ArithmeticError):
    """A linear solve did not reach its tolerance."""


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class InnerGDConfig:
    step: float = 1.0
    max_iter: int = 200
    tol: float = 1e-6
    max_halvings: int = 40


@dataclass(frozen=True)
class GeometricSchedule:
    """``alpha_n = alpha1 * ratio**(n-1)``; the default gives ``2**-n``."""

    alpha1: float = 0.5
    ratio: float = 0.5

    def __post_init__(self):
        if self.alpha1 <= 0:
            raise ValueError("alpha1 must be positive")
        if not 0 < self.ratio < 1:
            raise ValueError("ratio must lie in (0, 1) so that sum 1/alpha_n diverges")

    def __call__(self, n: int) -> float:
        return self.alpha1 * self.ratio ** (n - 1)

    @property
    def growth_constant(self) -> float:
        """``c`` with ``alpha_n <= c * alpha_{n+1}``."""
        return 1.0 / self.ratio

    def inverse_sum(self, count: int) -> float:
        """``sum_{n <= count} 1 / alpha_n`` in closed form."""
        r = 1.0 / self.ratio
        return (r**count - 1.0) / (r - 1.0) / self.alpha1


@dataclass(frozen=True)
class StoppingRule:
    tau: float = 1.01
    delta: float = 0.0
    n_max: int = 30

    def __post_init__(self):
        if self.tau <= 1:
            raise ValueError(f"tau must exceed 1, got {self.tau}")
        if self.delta < 0:
            raise ValueError(f"delta must be nonnegative, got {self.delta}")

    @property
    def threshold(self) -> float:
        return self.tau * self.delta

    def fires(self, residual: float, previous: float) -> bool:
        return residual <= self.threshold < previous


@dataclass
class InettState:
    n: int
    x: np.ndarray
    xi: np.ndarray
    alpha: float
    residual: float


@dataclass
class SolveResult:
    x: np.ndarray
    n_delta: Optional[int]
    converged: bool
    status: str
    history: List[dict] = field(default_factory=list)


# ---------------------------------------------------------------- building blocks


class SquaredNorm:
    """``R(x) = a ||x||_2^2`` with the regularizer interface."""

    def __init__(self, a: float = 1.0):
        self.a = a

    def value(self, x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return float(self.a * np.sum(x * x))

    __call__ = value

    def value_and_grad(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.value(x), 2.0 * self.a * x

    def subgrad(self, x):
        return self.value_and_grad(x)[1]


def bregman(R, xi, x, xhat) -> float:
    """``R(x) - R(xhat) - <xi, x - xhat>`` for ``xi`` a subgradient at ``xhat``."""
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    return float(R(x) - R(xhat) - np.sum(np.asarray(xi) * (x - xhat)))


def duality_J2(y) -> np.ndarray:
    """Gradient of ``y -> ||y||_Y^2 / 2`` for the normalized norm: ``y / M``."""
    y = np.asarray(y, dtype=np.float64)
    return y / y.size


def _misfit(op, x, y):
    r = tomo.apply(op, x) - y
    return r, 0.5 * float(np.sum(r * r)) / op.M


def gradient_descent(x0, value_grad: Callable, cfg: InnerGDConfig):
    """Fixed-step descent that halves the step whenever the objective would rise.

    Returns ``(x, f, g, iterations, status, trace)`` where ``trace`` lists the
    accepted objective values.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = value_grad(x)
    s = cfg.step
    trace = [f]
    halvings = 0
    status = "max_iter"
    it = 0
    while True:
        if np.linalg.norm(g) <= cfg.tol * (1.0 + np.linalg.norm(x)):
            status = "converged"
            break
        if it >= cfg.max_iter:
            break
        while True:
            xt = x - s * g
            ft, gt = value_grad(xt)
            if not (np.isfinite(ft) and np.all(np.isfinite(xt))):
                raise DivergenceError("non-finite iterate", it + 1)
            if ft <= f:
                break
            s *= 0.5
            halvings += 1
            if halvings > cfg.max_halvings:
                return x, f, g, it, "stalled", trace
        x, f, g = xt, ft, gt
        trace.append(f)
        it += 1
    return x, f, g, it, status, trace


# ---------------------------------------------------------------- iNETT


def inett_step(state: InettState, R, op: ProjectionOperator, y_delta, inner: InnerGDConfig = InnerGDConfig(),
               schedule: GeometricSchedule = GeometricSchedule()):
    """Advance one outer iteration; returns ``(next_state, info)``."""
    n = state.n + 1
    alpha = schedule(n)
    x_prev, xi_prev = state.x, state.xi
    r_prev = R.value(x_prev)
    y = np.asarray(y_delta, dtype=np.float64)
    M = op.M

    def value_grad(x):
        res, fit = _misfit(op, x, y)
        rv, rg = R.value_and_grad(x)
        obj = fit + alpha * (rv - r_prev - float(np.sum(xi_prev * (x - x_prev))))
        return obj, tomo.apply_adjoint(op, res) / M + alpha * (rg - xi_prev)

    x, f, g, iters, status, trace = gradient_descent(x_prev, value_grad, inner)
    res = tomo.apply(op, x) - y
    xi = xi_prev - tomo.apply_adjoint(op, duality_J2(res)) / alpha
    info = {
        "n": n,
        "alpha": alpha,
        "inner_iters": iters,
        "inner_status": status,
        "objective": trace,
        "stationarity": float(np.linalg.norm(g)),
        "bregman_step": bregman(R, xi_prev, x, x_prev),
        "R_value": R.value(x),
        # exact inner minimization gives xi = grad R(x)
        "xi_gap": float(np.linalg.norm(g) / alpha),
    }
    return InettState(n, x, xi, alpha, tomo.norm_Y(res)), info


def _constant_start(op):
    return np.full((op.n, op.n), 1.0 / op.N)


def inett_solve(R, op: ProjectionOperator, y_delta, delta: float, x0=None, tau: float = 1.01,
                schedule: GeometricSchedule = GeometricSchedule(), n_max: int = 30,
                inner: InnerGDConfig = InnerGDConfig()) -> SolveResult:
    """Run iNETT until the discrepancy principle fires or ``n_max`` steps pass."""
    rule = StoppingRule(tau, delta, n_max)
    x = _constant_start(op) if x0 is None else np.array(x0, dtype=np.float64).reshape(op.n, op.n)
    y = np.asarray(y_delta, dtype=np.float64)
    residual = tomo.norm_Y(tomo.apply(op, x) - y)
    state = InettState(0, x, R.subgrad(x), math.nan, residual)
    history = [{"n": 0, "alpha": math.nan, "residual": residual, "R_value": R.value(x),
                "inner_iters": 0, "bregman_step": 0.0}]
    if residual <= rule.threshold:
        return SolveResult(x, 0, True, "initial guess within tolerance", history)
    while state.n < rule.n_max:
        previous = state.residual
        state, info = inett_step(state, R, op, y, inner, schedule)
        history.append({"n": state.n, "alpha": state.alpha, "residual": state.residual,
                        "R_value": info["R_value"], "inner_iters": info["inner_iters"],
                        "bregman_step": info["bregman_step"]})
        log.debug("iNETT n=%d alpha=%.3g residual=%.6g inner=%d", state.n, state.alpha,
                  state.residual, info["inner_iters"])
        if rule.fires(state.residual, previous):
            return SolveResult(state.x, state.n, True, "discrepancy", history)
    log.warning("iNETT reached n_max=%d without meeting the discrepancy principle", rule.n_max)
    return SolveResult(state.x, None, False, "n_max reached", history)


# ---------------------------------------------------------------- NETT


def nett_solve(net: NetworkSpec, params: ParamSet, op: ProjectionOperator, y_delta, alpha: float,
               gd: InnerGDConfig = InnerGDConfig(max_iter=500), x0=None) -> SolveResult:
    """Gradient descent on ``(1/2M)||Fx - y||^2 + alpha ||net(x)||_2^2`` for fixed ``alpha``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    y = np.asarray(y_delta, dtype=np.float64)
    shape = tuple(net.input_shape)

    def penalty(x):
        tape = GradTape()
        out = forward(net, params, x.reshape(shape), "infer", tape=tape, watch=())
        sq = total(out * out)
        return float(value_of(sq)), grad(tape, sq, wrt=["x"])["x"].reshape(x.shape)

    def value_grad(x):
        res, fit = _misfit(op, x, y)
        pv, pg = penalty(x)
        return fit + alpha * pv, tomo.apply_adjoint(op, res) / op.M + alpha * pg

    start = _constant_start(op) if x0 is None else np.array(x0, dtype=np.float64).reshape(op.n, op.n)
    x, f, g, iters, status, trace = gradient_descent(start, value_grad, gd)
    pv, _ = penalty(x)
    history = [{"iters": iters, "objective": f, "penalty": pv, "stationarity": float(np.linalg.norm(g)),
                "residual": tomo.norm_Y(tomo.apply(op, x) - y)}]
    return SolveResult(x, None, status == "converged", status, history)


# ---------------------------------------------------------------- SIT


def conjugate_gradient(apply_A: Callable, b, rtol: float = 1e-10, max_iter: Optional[int] = None, x0=None):
    """CG for a symmetric positive definite operator; returns ``(x, iterations)``."""
    b = np.asarray(b, dtype=np.float64)
    max_iter = 10 * b.size if max_iter is None else max_iter
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - apply_A(x)
    p = r.copy()
    rs = float(np.sum(r * r))
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros_like(b), 0
    for k in range(max_iter + 1):
        if math.sqrt(rs) <= rtol * bnorm:
            return x, k
        if k == max_iter:
            break
        Ap = apply_A(p)
        step = rs / float(np.sum(p * Ap))
        x += step * p
        r -= step * Ap
        rs_new = float(np.sum(r * r))
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise ConvergenceError(f"CG did not reach rtol={rtol} in {max_iter} iterations")


def sit_step(op: ProjectionOperator, x, y_delta, alpha_hat: float, rtol: float = 1e-10):
    """``x - (F^T F + alpha_hat I)^{-1} F^T (F x - y)``; returns ``(x_next, cg_iterations)``."""
    r = tomo.apply(op, x) - np.asarray(y_delta, dtype=np.float64)
    rhs = tomo.apply_adjoint(op, r)

    def normal(v):
        return tomo.apply_adjoint(op, tomo.apply(op, v)) + alpha_hat * v

    v, iters = conjugate_gradient(normal, rhs, rtol=rtol, max_iter=10 * op.N)
    return np.asarray(x) - v, iters


def sit_solve(op: ProjectionOperator, y_delta, delta: float, x0=None, tau: float = 1.01,
              schedule: GeometricSchedule = GeometricSchedule(), n_max: int = 30) -> SolveResult:
    """Standard iterated Tikhonov with ``alpha_hat_n = 2 M alpha_n`` and the same stopping rule."""
    rule = StoppingRule(tau, delta, n_max)
    y = np.asarray(y_delta, dtype=np.float64)
    x = _constant_start(op) if x0 is None else np.array(x0, dtype=np.float64).reshape(op.n, op.n)
    residual = tomo.norm_Y(tomo.apply(op, x) - y)
    history = [{"n": 0, "alpha": math.nan, "residual": residual, "cg_iters": 0}]
    if residual <= rule.threshold:
        return SolveResult(x, 0, True, "initial guess within tolerance", history)
    for n in range(1, rule.n_max + 1):
        alpha = schedule(n)
        x, iters = sit_step(op, x, y, 2 * op.M * alpha)
        previous, residual = residual, tomo.norm_Y(tomo.apply(op, x) - y)
        history.append({"n": n, "alpha": alpha, "residual": residual, "cg_iters": iters})
        if rule.fires(residual, previous):
            return SolveResult(x, n, True, "discrepancy", history)
    log.warning("SIT reached n_max=%d without meeting the discrepancy principle", rule.n_max)
    return SolveResult(x, None, False, "n_max reached", history)


def art_solve(op: ProjectionOperator, y_delta, rounds: int = 5) -> np.ndarray:
    return tomo.pseudo_inverse(op, y_delta, rounds)
