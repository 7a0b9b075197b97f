"""Momentum tuner with curvature-normalized steps and box-feasible gains.

Two step rules share one update skeleton.  The baseline rule (``ht1``) applies
the full normalized gradient step to both the parameter ``theta`` and the
auxiliary iterate ``nu``; it ignores the box entirely and may leave it.  The
safeguarded rule (``ht2``) scales each of the two gradient applications by a
per-iteration gain chosen so that every iterate - parameter, auxiliary, and
the intermediate averaged point - stays inside the feasible box at all times.

Each iteration computes the normalizing signal ``N_k = 1 + H_k`` once, where
``H_k`` is the largest Hessian eigenvalue of the loss at ``theta_k``, and
divides both gradient evaluations of the iteration by it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diagnostics import Trace, TraceRecord, lyapunov
from .numerics import Vector, as_vector
from .problem import Box, ReducedProblem

__all__ = [
    "TunerConfig",
    "TunerState",
    "ConfigurationError",
    "DivergenceError",
    "BoxViolationError",
    "gain_bound",
    "validate_config",
    "initial_state",
    "compute_gain_a",
    "compute_gain_b",
    "step_ht1",
    "step_ht2",
    "solve",
]

#: The boundary exception fires when the binding coordinate sits within this
#: absolute distance of its bound; floating point never lands exactly on it.
BOUNDARY_ATOL = 1e-12

#: Iterates may overshoot a bound by a few ulps when a gain binds exactly;
#: overshoot within this many machine epsilons of the bound scale is snapped
#: back onto the bound, anything larger is a genuine invariant violation.
_SNAP_ULPS = 32.0


class ConfigurationError(ValueError):
    """A gain or tolerance setting violates its admissible range."""


class DivergenceError(RuntimeError):
    """The loss or gradient became non-finite at an iterate."""

    def __init__(self, message: str, iterate=None):
        super().__init__(message)
        self.iterate = iterate


class BoxViolationError(RuntimeError):
    """A safeguarded step left the box; indicates a gain-logic bug."""


def gain_bound(beta: float) -> float:
    """Upper bound on gamma for a given beta: ``beta * (2 - beta) / (8 + beta)``."""
    return beta * (2.0 - beta) / (8.0 + beta)


@dataclass(frozen=True)
class TunerConfig:
    """Gains, algorithm selector, and stopping rule for a run."""

    gamma: float
    beta: float
    epsilon: float = 1e-3
    algorithm: str = "ht2"
    max_iters: int = 100_000
    grad_tol: float = 1e-8


def validate_config(cfg: TunerConfig) -> None:
    """Accept the configuration or raise naming the violated inequality."""
    if not 0.0 < cfg.beta <= 1.0:
        raise ConfigurationError(
            f"beta must satisfy 0 < beta <= 1; got beta={cfg.beta}"
        )
    bound = gain_bound(cfg.beta)
    if not 0.0 < cfg.gamma < bound:
        raise ConfigurationError(
            "gamma must satisfy 0 < gamma < beta*(2-beta)/(8+beta) = "
            f"{bound:.6g} for beta={cfg.beta}; got gamma={cfg.gamma}"
        )
    if not 0.0 < cfg.epsilon < 1.0:
        raise ConfigurationError(
            f"epsilon must satisfy 0 < epsilon < 1; got epsilon={cfg.epsilon}"
        )
    if cfg.algorithm not in ("ht1", "ht2"):
        raise ConfigurationError(
            f"algorithm must be 'ht1' or 'ht2'; got {cfg.algorithm!r}"
        )
    if cfg.max_iters <= 0:
        raise ConfigurationError(f"max_iters must be positive; got {cfg.max_iters}")
    if cfg.grad_tol < 0.0:
        raise ConfigurationError(f"grad_tol must be nonnegative; got {cfg.grad_tol}")


@dataclass(frozen=True, eq=False)
class TunerState:
    """Iteration counter plus the iterate triple and the last step's gains."""

    k: int
    theta: Vector
    nu: Vector
    theta_bar: Vector
    last_a: float = math.nan
    last_b: float = math.nan
    last_N: float = math.nan


def initial_state(theta0, nu0) -> TunerState:
    theta0 = as_vector(theta0)
    nu0 = as_vector(nu0)
    if theta0.size != nu0.size:
        raise ValueError("theta0 and nu0 must have the same dimension")
    return TunerState(k=0, theta=theta0.copy(), nu=nu0.copy(), theta_bar=theta0.copy())


def _gain_and_exception(position, grad, n_k, scale, box: Box, epsilon):
    """Largest admissible multiplier for one gradient application.

    ``scale`` is the prefactor multiplying ``grad / n_k`` in the update.  For
    each coordinate whose gradient pushes toward a bound, the quotient
    ``distance_to_bound * n_k / (scale * |grad_i|)`` caps the multiplier;
    coordinates with zero gradient impose no cap.  The result is the smallest
    cap, itself capped at 1.

    When the binding coordinate already sits on its bound (within
    BOUNDARY_ATOL) the cap would vanish, so a fixed boundary exception of
    magnitude ``epsilon`` replaces it: ``-epsilon`` at an upper bound,
    ``+epsilon`` at a lower bound.  The second return value flags that case;
    the caller applies exception gains as an inward nudge.
    """
    best = math.inf
    best_upper = False
    best_dist = math.inf
    for i in range(len(position)):
        g = float(grad[i])
        if g < 0.0:
            dist = float(box.upper[i]) - float(position[i])
            upper = True
        elif g > 0.0:
            dist = float(position[i]) - float(box.lower[i])
            upper = False
        else:
            continue
        quotient = dist * n_k / (scale * abs(g))
        if quotient < best:
            best = quotient
            best_upper = upper
            best_dist = dist
    if best is math.inf:
        return 1.0, False
    if best_dist <= BOUNDARY_ATOL:
        return (-epsilon if best_upper else epsilon), True
    return min(1.0, best), False


def compute_gain_a(state: TunerState, cfg: TunerConfig, grad_theta, n_k: float, box: Box) -> float:
    """Gain applied to the averaged-iterate update at ``theta_k``."""
    if not box.contains(state.theta):
        raise ValueError("state.theta lies outside the box")
    grad_theta = np.asarray(grad_theta, dtype=float)
    return _gain_and_exception(
        state.theta, grad_theta, float(n_k), cfg.gamma * cfg.beta, box, cfg.epsilon
    )[0]


def compute_gain_b(state: TunerState, cfg: TunerConfig, grad_theta_next, n_k: float, box: Box) -> float:
    """Gain applied to the auxiliary-iterate update at ``theta_{k+1}``."""
    if not box.contains(state.nu):
        raise ValueError("state.nu lies outside the box")
    grad_theta_next = np.asarray(grad_theta_next, dtype=float)
    return _gain_and_exception(
        state.nu, grad_theta_next, float(n_k), cfg.gamma, box, cfg.epsilon
    )[0]


def _snap_into_box(v: Vector, box: Box) -> Vector:
    """Correct ulp-scale overshoot past a bound; raise on anything larger."""
    over = v - box.upper
    under = box.lower - v
    if not (np.any(over > 0.0) or np.any(under > 0.0)):
        return v
    eps = np.finfo(float).eps
    tol = _SNAP_ULPS * eps * np.maximum(
        1.0, np.maximum(np.abs(box.lower), np.abs(box.upper))
    )
    if np.any(over > tol) or np.any(under > tol):
        raise BoxViolationError(
            f"safeguarded step left the box: iterate {v.tolist()} vs bounds "
            f"[{box.lower.tolist()}, {box.upper.tolist()}]"
        )
    return np.minimum(np.maximum(v, box.lower), box.upper)


def _check_finite(vec: Vector, what: str, iterate):
    if not np.all(np.isfinite(vec)):
        raise DivergenceError(f"non-finite {what} at iterate {iterate!r}", iterate=iterate)


def _advance(
    state: TunerState,
    cfg: TunerConfig,
    prob: ReducedProblem,
    constrained: bool,
    grad_theta: Vector | None = None,
) -> TunerState:
    """Shared update skeleton for both step rules.

    With ``constrained=False`` the gains are fixed at 1 and the box is
    ignored.  The arithmetic is arranged so that a safeguarded step whose
    gains both evaluate to 1 reproduces the baseline step bit for bit.
    """
    theta = state.theta
    nu = state.nu
    if grad_theta is None:
        grad_theta = np.asarray(prob.grad(theta), dtype=float)
    _check_finite(grad_theta, "gradient", theta)

    spectrum = float(prob.hessian_spectrum(theta))
    if not np.isfinite(spectrum):
        raise DivergenceError(f"non-finite Hessian spectrum at {theta!r}", iterate=theta)
    n_k = 1.0 + spectrum

    if constrained:
        a, exc_a = _gain_and_exception(
            theta, grad_theta, n_k, cfg.gamma * cfg.beta, prob.box, cfg.epsilon
        )
        if exc_a:
            # Boundary exception: nudge strictly inward, scaled by |grad|.
            theta_bar = theta + (cfg.gamma * cfg.beta * a) * np.abs(grad_theta) / n_k
        else:
            theta_bar = theta - (cfg.gamma * cfg.beta * a) * grad_theta / n_k
        theta_bar = _snap_into_box(theta_bar, prob.box)
    else:
        a = 1.0
        theta_bar = theta - (cfg.gamma * cfg.beta) * grad_theta / n_k

    theta_next = theta_bar - cfg.beta * (theta_bar - nu)
    if constrained:
        theta_next = _snap_into_box(theta_next, prob.box)
    _check_finite(theta_next, "iterate", theta_next)

    grad_next = np.asarray(prob.grad(theta_next), dtype=float)
    _check_finite(grad_next, "gradient", theta_next)

    if constrained:
        b, exc_b = _gain_and_exception(
            nu, grad_next, n_k, cfg.gamma, prob.box, cfg.epsilon
        )
        if exc_b:
            nu_next = nu + (cfg.gamma * b) * np.abs(grad_next) / n_k
        else:
            nu_next = nu - (cfg.gamma * b) * grad_next / n_k
        nu_next = _snap_into_box(nu_next, prob.box)
    else:
        b = 1.0
        nu_next = nu - cfg.gamma * grad_next / n_k

    return TunerState(
        k=state.k + 1,
        theta=theta_next,
        nu=nu_next,
        theta_bar=theta_bar,
        last_a=a,
        last_b=b,
        last_N=n_k,
    )


def step_ht1(state: TunerState, cfg: TunerConfig, prob: ReducedProblem) -> TunerState:
    """One baseline step; iterates are free to leave the box.

    Raises DivergenceError when the gradient turns non-finite at the new
    parameter (for example past the domain of a square root).
    """
    validate_config(cfg)
    return _advance(state, cfg, prob, constrained=False)


def step_ht2(state: TunerState, cfg: TunerConfig, prob: ReducedProblem) -> TunerState:
    """One safeguarded step; every produced iterate stays inside the box."""
    validate_config(cfg)
    if not prob.box.contains(state.theta):
        raise ValueError("state.theta must lie inside the box")
    if not prob.box.contains(state.nu):
        raise ValueError("state.nu must lie inside the box")
    return _advance(state, cfg, prob, constrained=True)


def _make_record(k, theta, nu, theta_bar, loss, grad_norm, a, b, n_k, theta_star, gamma, box):
    v = None
    if theta_star is not None:
        v = lyapunov(theta, nu, theta_star, gamma)
    feasible = box.contains(theta) and box.contains(nu) and box.contains(theta_bar)
    return TraceRecord(
        k=k,
        theta=theta.copy(),
        nu=nu.copy(),
        theta_bar=theta_bar.copy(),
        loss=loss,
        grad_norm=grad_norm,
        a_k=a,
        b_k=b,
        N_k=n_k,
        V=v,
        feasible=feasible,
    )


def solve(
    prob: ReducedProblem,
    cfg: TunerConfig,
    theta0,
    nu0,
    theta_star=None,
    problem_name: str | None = None,
) -> Trace:
    """Iterate the configured step rule until the gradient norm drops below
    ``grad_tol`` or ``max_iters`` steps have been taken.

    Returns the full trace; the outcome field records which stopping
    criterion fired.  A baseline run that diverges (non-finite loss or
    gradient) is captured in the trace as outcome ``diverged`` rather than
    raised.  The energy column is filled only when ``theta_star`` is given.
    """
    validate_config(cfg)
    theta0 = as_vector(theta0)
    nu0 = as_vector(nu0)
    if theta0.size != prob.m or nu0.size != prob.m:
        raise ValueError("initial iterates must match the problem dimension")
    constrained = cfg.algorithm == "ht2"
    if constrained:
        if not prob.box.contains(theta0):
            raise ValueError("theta0 must lie inside the box for the safeguarded rule")
        if not prob.box.contains(nu0):
            raise ValueError("nu0 must lie inside the box for the safeguarded rule")
    if theta_star is not None:
        theta_star = as_vector(theta_star)

    state = initial_state(theta0, nu0)
    records: list[TraceRecord] = []
    outcome = "max-iters"

    def terminal(loss, grad_norm):
        return _make_record(
            state.k, state.theta, state.nu, state.theta_bar, loss, grad_norm,
            math.nan, math.nan, math.nan, theta_star, cfg.gamma, prob.box,
        )

    while True:
        try:
            loss_k = float(prob.loss(state.theta))
        except Exception:
            loss_k = math.nan
        try:
            grad_k = np.asarray(prob.grad(state.theta), dtype=float)
            grad_finite = bool(np.all(np.isfinite(grad_k)))
        except Exception:
            grad_k = np.full(prob.m, math.nan)
            grad_finite = False

        if not (np.isfinite(loss_k) and grad_finite):
            records.append(terminal(loss_k, math.nan))
            outcome = "diverged"
            break
        grad_norm = float(np.linalg.norm(grad_k))
        if grad_norm <= cfg.grad_tol:
            records.append(terminal(loss_k, grad_norm))
            outcome = "converged"
            break
        if state.k >= cfg.max_iters:
            records.append(terminal(loss_k, grad_norm))
            outcome = "max-iters"
            break

        try:
            new_state = _advance(state, cfg, prob, constrained, grad_theta=grad_k)
        except DivergenceError:
            records.append(terminal(loss_k, grad_norm))
            outcome = "diverged"
            break

        records.append(
            _make_record(
                state.k, state.theta, state.nu, new_state.theta_bar, loss_k,
                grad_norm, new_state.last_a, new_state.last_b, new_state.last_N,
                theta_star, cfg.gamma, prob.box,
            )
        )
        state = new_state

    return Trace(
        records=records,
        outcome=outcome,
        problem_name=prob.name if problem_name is None else problem_name,
        config={
            "algorithm": cfg.algorithm,
            "gamma": cfg.gamma,
            "beta": cfg.beta,
            "epsilon": cfg.epsilon,
            "max_iters": cfg.max_iters,
            "grad_tol": cfg.grad_tol,
        },
    )
