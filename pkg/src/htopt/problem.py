"""Equality-constrained problems, variable reduction, and convexity certificates.

A full problem minimizes ``f(x)`` subject to ``h(x) = 0`` with ``x`` split into
independent coordinates ``theta`` (the first ``m``) and dependent coordinates
``z`` (the remaining ``n - m``).  Eliminating ``z = p(theta)`` - either from a
closed form or by a damped Newton solve of ``h = 0`` - turns the constrained
problem into an unconstrained reduced loss over ``theta``, optionally augmented
with a quadratic constraint-violation penalty.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import (
    ScalarFn,
    Vector,
    as_vector,
    fd_gradient,
    fd_hessian_matvec,
    max_eigenvalue_sym,
)

__all__ = [
    "Box",
    "FullProblem",
    "ReducedProblem",
    "ConvexityReport",
    "ReductionError",
    "ImplicitSolveError",
    "reduce",
    "implicit_solve_p",
    "check_convexity",
    "load_problem",
    "load_problem_file",
]

#: Sign checks of the convexity certificate treat |value| below this as zero;
#: strictness is not machine-verifiable by sampling.
SIGN_TOL = 1e-9


class ReductionError(RuntimeError):
    """Variable reduction could not be constructed."""


class ImplicitSolveError(RuntimeError):
    """The damped Newton solve for the dependent coordinates failed."""


def _readonly(v: np.ndarray) -> np.ndarray:
    v = v.copy()
    v.setflags(write=False)
    return v


@dataclass(frozen=True, eq=False)
class Box:
    """Cartesian product of closed, bounded intervals, one per coordinate."""

    lower: Vector
    upper: Vector

    def __post_init__(self):
        lo = _readonly(as_vector(self.lower))
        hi = _readonly(as_vector(self.upper))
        if lo.size != hi.size:
            raise ValueError("lower and upper bounds must have the same dimension")
        if not np.all(lo < hi):
            raise ValueError("box bounds must satisfy lower < upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    def contains(self, x) -> bool:
        """Exact componentwise containment check (no tolerance)."""
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def center(self) -> Vector:
        return 0.5 * (self.lower + self.upper)


@dataclass(frozen=True, eq=False)
class FullProblem:
    """Objective, equality constraints, and an optional dependent-variable map.

    ``f`` maps R^n to R and ``h`` maps R^n to R^(n-m).  ``grad_f`` and
    ``jac_h`` are optional analytic derivatives; finite differences fill in
    when they are absent.  ``p`` maps theta to the dependent coordinates on
    the constraint manifold; when it is supplied the penalty weight
    ``lambda_h`` must be zero, and when it is absent the penalty must be
    positive so constraint violation is discouraged during the implicit solve.
    """

    n: int
    m: int
    f: ScalarFn
    h: Callable | None = None
    grad_f: Callable | None = None
    jac_h: Callable | None = None
    p: Callable | None = None
    lambda_h: float = 0.0

    def __post_init__(self):
        if not (1 <= self.m <= self.n):
            raise ValueError("dimensions must satisfy 1 <= m <= n")
        if self.lambda_h < 0.0:
            raise ValueError("lambda_h must be nonnegative")
        if self.n > self.m:
            if self.h is None:
                raise ValueError("h is required when n > m")
            if self.p is not None and self.lambda_h != 0.0:
                raise ValueError("lambda_h must be 0 when p is supplied in closed form")
            if self.p is None and self.lambda_h <= 0.0:
                raise ValueError("lambda_h must be positive when p is not supplied")

    def constraint(self, x) -> Vector:
        return np.atleast_1d(np.asarray(self.h(np.asarray(x, dtype=float)), dtype=float))

    def penalized_loss(self, x) -> float:
        x = np.asarray(x, dtype=float)
        value = float(self.f(x))
        if self.h is not None and self.lambda_h != 0.0:
            r = self.constraint(x)
            value += self.lambda_h * float(r @ r)
        return value

    def penalized_grad(self, x) -> Vector:
        x = np.asarray(x, dtype=float)
        if self.grad_f is not None:
            g = np.asarray(self.grad_f(x), dtype=float).copy()
        else:
            g = fd_gradient(self.f, x)
        if self.h is not None and self.lambda_h != 0.0:
            r = self.constraint(x)
            if self.jac_h is not None:
                jac = np.atleast_2d(np.asarray(self.jac_h(x), dtype=float))
                g = g + 2.0 * self.lambda_h * (jac.T @ r)
            else:
                def sq_violation(y):
                    ry = self.constraint(y)
                    return float(ry @ ry)

                g = g + self.lambda_h * fd_gradient(sq_violation, x)
        return g


@dataclass(frozen=True, eq=False)
class ReducedProblem:
    """Unconstrained loss over the independent coordinates, plus its box.

    ``hessian_spectrum`` returns the largest eigenvalue of the loss Hessian at
    a point; the tuner turns it into the normalizing signal ``1 + spectrum``.
    ``smoothness_bound`` is an optional global Lipschitz constant for the
    gradient.
    """

    m: int
    loss: ScalarFn
    grad: Callable[[Vector], Vector]
    hessian_spectrum: Callable[[Vector], float]
    box: Box
    smoothness_bound: float | None = None
    name: str = ""

    def __post_init__(self):
        if self.box.dim != self.m:
            raise ValueError("box dimension must match the reduced dimension")


@dataclass(frozen=True, eq=False)
class ConvexityReport:
    """Sampled certificate for convexity of the reduced loss on a region.

    ``condition_matched`` is one of ``h-linear``,
    ``grad-L-nonneg-and-p-convex``, ``grad-L-nonpos-and-p-concave`` or
    ``none``.  ``grad_p_h_sign`` summarizes the sign of the constraint
    Jacobian with respect to the dependent coordinates over the sampled grid.
    This is a certificate over samples, not a proof.
    """

    condition_matched: str
    grad_p_h_sign: str
    samples_tested: int
    violations: list = field(default_factory=list)


def implicit_solve_p(
    full: FullProblem,
    theta,
    z0,
    tol: float = 1e-10,
    max_iters: int = 100,
    max_halvings: int = 8,
) -> Vector:
    """Solve ``h([theta, z]) = 0`` for the dependent coordinates ``z``.

    Damped Newton iteration from ``z0`` with step halving (at most
    ``max_halvings`` per iteration).  The starting point selects the branch
    when the constraint admits several solutions.  Raises ImplicitSolveError
    on a singular Jacobian, a stalled line search, or iteration exhaustion.
    """
    theta = as_vector(theta)
    z = as_vector(z0).copy()
    if theta.size != full.m or z.size != full.n - full.m:
        raise ValueError("theta/z0 dimensions do not match the problem")

    def residual(zz):
        return full.constraint(np.concatenate([theta, zz]))

    r = residual(z)
    r_norm = float(np.linalg.norm(r))
    for _ in range(max_iters):
        if r_norm <= tol:
            return z
        jac_z = _constraint_jac_z(full, theta, z)
        try:
            dz = np.linalg.solve(jac_z, -r)
        except np.linalg.LinAlgError as exc:
            raise ImplicitSolveError(
                f"singular constraint Jacobian at z={z.tolist()}"
            ) from exc
        step = 1.0
        for _ in range(max_halvings + 1):
            z_new = z + step * dz
            r_new = residual(z_new)
            r_new_norm = float(np.linalg.norm(r_new))
            if np.isfinite(r_new_norm) and r_new_norm < r_norm:
                break
            step *= 0.5
        else:
            raise ImplicitSolveError(
                f"damped Newton stalled at residual {r_norm:.3e} (z={z.tolist()})"
            )
        z, r, r_norm = z_new, r_new, r_new_norm
    if r_norm <= tol:
        return z
    raise ImplicitSolveError(
        f"no convergence within {max_iters} iterations (residual {r_norm:.3e})"
    )


def _constraint_jac_z(full: FullProblem, theta: Vector, z: Vector) -> np.ndarray:
    """Jacobian of h with respect to the dependent coordinates at (theta, z)."""
    x = np.concatenate([theta, z])
    if full.jac_h is not None:
        jac = np.atleast_2d(np.asarray(full.jac_h(x), dtype=float))
        return jac[:, full.m :]
    k = full.n - full.m
    jac = np.empty((k, k))
    for j in range(k):
        h_step = DEFAULT_Z_STEP * (1.0 + abs(float(z[j])))
        zp = z.copy()
        zp[j] += h_step
        zm = z.copy()
        zm[j] -= h_step
        rp = full.constraint(np.concatenate([theta, zp]))
        rm = full.constraint(np.concatenate([theta, zm]))
        jac[:, j] = (rp - rm) / (2.0 * h_step)
    return jac


DEFAULT_Z_STEP = 1e-6


def reduce(
    full: FullProblem,
    box: Box,
    z0=None,
    newton_tol: float = 1e-10,
    spectrum_tol: float = 1e-8,
    name: str = "",
) -> ReducedProblem:
    """Build the reduced loss over ``theta`` by eliminating ``z = p(theta)``.

    Uses the closed-form ``p`` when the problem carries one; otherwise anchors
    a damped Newton solve at the box center (``z0`` selects the branch) and
    reuses that anchor for every evaluation, keeping the reduction pure.

    The reduced gradient composes the full gradient with the Jacobian of
    ``p``, obtained from the implicit function theorem when the constraint
    Jacobian is analytic and from central differences on ``p`` otherwise.
    The Hessian spectrum is estimated by power iteration over
    finite-difference Hessian-vector products (no analytic Hessian input
    exists on FullProblem).
    """
    if box.dim != full.m:
        raise ValueError("box dimension must match the number of independent variables")

    if full.n == full.m:
        def p_fn(theta):
            return np.empty(0)
    elif full.p is not None:
        def p_fn(theta):
            return np.atleast_1d(np.asarray(full.p(np.asarray(theta, dtype=float)), dtype=float))
    else:
        anchor0 = np.zeros(full.n - full.m) if z0 is None else as_vector(z0)
        try:
            anchor = implicit_solve_p(full, box.center(), anchor0, tol=newton_tol)
        except ImplicitSolveError as exc:
            raise ReductionError(
                f"implicit solve failed at the box center: {exc}"
            ) from exc
        anchor = _readonly(anchor)

        def p_fn(theta):
            return implicit_solve_p(full, theta, anchor, tol=newton_tol)

    def loss(theta):
        theta = np.asarray(theta, dtype=float)
        return full.penalized_loss(np.concatenate([theta, p_fn(theta)]))

    def grad(theta):
        theta = np.asarray(theta, dtype=float)
        z = p_fn(theta)
        x = np.concatenate([theta, z])
        g_full = full.penalized_grad(x)
        if full.n == full.m:
            return g_full
        jac_p = _p_jacobian(full, theta, z, p_fn)
        return g_full[: full.m] + jac_p.T @ g_full[full.m :]

    def hessian_spectrum(theta):
        theta = np.asarray(theta, dtype=float)
        return max_eigenvalue_sym(
            lambda v: fd_hessian_matvec(loss, theta, v),
            dim=full.m,
            tol=spectrum_tol,
            max_iters=200,
        )

    return ReducedProblem(
        m=full.m,
        loss=loss,
        grad=grad,
        hessian_spectrum=hessian_spectrum,
        box=box,
        name=name,
    )


def _p_jacobian(full: FullProblem, theta: Vector, z: Vector, p_fn) -> np.ndarray:
    """Jacobian of the dependent-variable map at theta."""
    if full.jac_h is not None:
        x = np.concatenate([theta, z])
        jac = np.atleast_2d(np.asarray(full.jac_h(x), dtype=float))
        jac_theta = jac[:, : full.m]
        jac_z = jac[:, full.m :]
        try:
            return np.linalg.solve(jac_z, -jac_theta)
        except np.linalg.LinAlgError as exc:
            raise ReductionError(
                "constraint Jacobian is singular in the dependent block; "
                "cannot differentiate the reduction"
            ) from exc
    k = full.n - full.m
    jac_p = np.empty((k, full.m))
    for j in range(full.m):
        h_step = 1e-5 * (1.0 + abs(float(theta[j])))
        tp = theta.copy()
        tp[j] += h_step
        tm = theta.copy()
        tm[j] -= h_step
        jac_p[:, j] = (p_fn(tp) - p_fn(tm)) / (2.0 * h_step)
    return jac_p


def check_convexity(full: FullProblem, region: Box, grid_per_dim: int) -> ConvexityReport:
    """Certify, by sampling, which convexity condition the problem satisfies.

    Evaluates on a regular grid over ``region`` (a box in the full space):

    * linearity of ``h`` via pure and mixed second differences on the lattice,
    * the sign of every component of the penalized-loss gradient,
    * the sign of the constraint Jacobian with respect to the dependent
      coordinates.

    Classifies the first condition that holds over all samples:
    linear constraints certify convexity outright; otherwise a nonnegative
    loss gradient combined with an everywhere-negative dependent-block
    Jacobian (which makes the dependent map convex), or the mirrored
    nonpositive/positive pair (dependent map concave), does.  Evaluation
    failures are recorded per point and disqualify any match.
    """
    if grid_per_dim < 3:
        raise ValueError("grid_per_dim must be at least 3")
    if region.dim != full.n:
        raise ValueError("region must span the full ambient space")

    n = full.n
    shape = (grid_per_dim,) * n
    axes = [
        np.linspace(float(region.lower[d]), float(region.upper[d]), grid_per_dim)
        for d in range(n)
    ]

    n_constraints = full.n - full.m
    h_vals = np.full((n_constraints,) + shape if n_constraints else (0,) + shape, np.nan)
    ok = np.zeros(shape, dtype=bool)
    failures = []
    grad_min = np.inf
    grad_max = -np.inf
    zjac_min = np.inf
    zjac_max = -np.inf

    for idx in itertools.product(range(grid_per_dim), repeat=n):
        x = np.array([axes[d][idx[d]] for d in range(n)])
        try:
            g = full.penalized_grad(x)
            if n_constraints:
                hv = full.constraint(x)
                zj = _constraint_jac_z(full, x[: full.m], x[full.m :])
            else:
                hv = np.empty(0)
                zj = np.empty((0, 0))
            if not (np.all(np.isfinite(g)) and np.all(np.isfinite(hv)) and np.all(np.isfinite(zj))):
                raise ArithmeticError("non-finite evaluation")
        except Exception:
            failures.append((tuple(float(c) for c in x), "evaluation-failed"))
            continue
        ok[idx] = True
        if n_constraints:
            h_vals[(slice(None),) + idx] = hv
            zjac_min = min(zjac_min, float(np.min(zj)))
            zjac_max = max(zjac_max, float(np.max(zj)))
        grad_min = min(grad_min, float(np.min(g)))
        grad_max = max(grad_max, float(np.max(g)))

    samples = int(np.prod(shape))
    h_linear = _constraint_is_linear(h_vals, ok, n, grid_per_dim) if n_constraints else True

    if zjac_min > SIGN_TOL:
        sign = "positive"
    elif zjac_max < -SIGN_TOL:
        sign = "negative"
    else:
        sign = "mixed"

    grad_nonneg = grad_min >= -SIGN_TOL
    grad_nonpos = grad_max <= SIGN_TOL

    violations = list(failures)
    if not failures:
        if h_linear:
            return ConvexityReport("h-linear", sign, samples, [])
        if grad_nonneg and sign == "negative":
            return ConvexityReport("grad-L-nonneg-and-p-convex", sign, samples, [])
        if grad_nonpos and sign == "positive":
            return ConvexityReport("grad-L-nonpos-and-p-concave", sign, samples, [])

    violations.extend(
        _condition_violations(full, axes, ok, sign, grad_nonneg, grad_nonpos)
    )
    return ConvexityReport("none", sign, samples, violations)


def _constraint_is_linear(h_vals, ok, n, grid_per_dim) -> bool:
    """Are all pure and mixed second differences of h negligible on the lattice?"""
    finite = h_vals[:, ok] if h_vals.size else np.empty(0)
    scale = 1.0 + (float(np.max(np.abs(finite))) if finite.size else 0.0)
    tol = 1e-8 * scale
    for d in range(n):
        fwd = np.roll(h_vals, -1, axis=1 + d)
        bwd = np.roll(h_vals, 1, axis=1 + d)
        second = fwd - 2.0 * h_vals + bwd
        interior = [slice(None)] + [slice(None)] * n
        interior[1 + d] = slice(1, grid_per_dim - 1)
        window = second[tuple(interior)]
        if window.size and np.nanmax(np.abs(window)) > tol:
            return False
    for d1 in range(n):
        for d2 in range(d1 + 1, n):
            a = np.roll(np.roll(h_vals, -1, axis=1 + d1), -1, axis=1 + d2)
            b = np.roll(h_vals, -1, axis=1 + d1)
            c = np.roll(h_vals, -1, axis=1 + d2)
            mixed = a - b - c + h_vals
            sel = [slice(None)] + [slice(None)] * n
            sel[1 + d1] = slice(0, grid_per_dim - 1)
            sel[1 + d2] = slice(0, grid_per_dim - 1)
            window = mixed[tuple(sel)]
            if window.size and np.nanmax(np.abs(window)) > tol:
                return False
    return True


def _condition_violations(full, axes, ok, sign, grad_nonneg, grad_nonpos):
    """Points breaking the closest candidate condition, for the report."""
    n = full.n
    grid_per_dim = len(axes[0])
    out = []
    for idx in itertools.product(range(grid_per_dim), repeat=n):
        if not ok[idx]:
            continue
        x = np.array([axes[d][idx[d]] for d in range(n)])
        g = full.penalized_grad(x)
        zj = (
            _constraint_jac_z(full, x[: full.m], x[full.m :])
            if full.n > full.m
            else np.empty((0, 0))
        )
        point = tuple(float(c) for c in x)
        if sign == "negative" or (sign == "mixed" and grad_nonneg):
            if float(np.min(g)) < -SIGN_TOL:
                out.append((point, "grad-L-negative-component"))
            if zj.size and float(np.max(zj)) > SIGN_TOL:
                out.append((point, "grad-p-h-sign-flip"))
        elif sign == "positive":
            if float(np.max(g)) > SIGN_TOL:
                out.append((point, "grad-L-positive-component"))
            if zj.size and float(np.min(zj)) < -SIGN_TOL:
                out.append((point, "grad-p-h-sign-flip"))
        else:
            if zj.size and float(np.max(zj)) > SIGN_TOL and float(np.min(zj)) < -SIGN_TOL:
                out.append((point, "grad-p-h-sign-flip"))
    return out


_BUILTIN_NAMES = ("academic", "academic-upper", "nesterov")


def load_problem(doc: dict) -> ReducedProblem:
    """Build a reduced problem from a JSON-style document.

    Expected shape::

        {"name": ..., "kind": "builtin" | "quadratic",
         "params": {...}, "box": {"lower": [...], "upper": [...]},
         "lambda_h": number}

    Builtin names are ``academic``, ``academic-upper`` and ``nesterov``;
    their constructors fix the penalty weight themselves, so ``lambda_h`` is
    validated but not applied to them.  The quadratic kind is
    ``0.5 * theta' Q theta + c' theta`` with a symmetric PSD ``Q``.
    """
    if not isinstance(doc, dict):
        raise ValueError("problem document must be a JSON object")
    kind = doc.get("kind")
    name = doc.get("name", "")
    params = doc.get("params", {}) or {}
    lambda_h = doc.get("lambda_h", 0.0)
    if not isinstance(lambda_h, (int, float)) or lambda_h < 0:
        raise ValueError("lambda_h must be a nonnegative number")
    box = None
    if "box" in doc and doc["box"] is not None:
        box = Box(np.asarray(doc["box"]["lower"], dtype=float),
                  np.asarray(doc["box"]["upper"], dtype=float))

    if kind == "builtin":
        from . import bench

        builtin = name or params.get("name", "")
        if builtin not in _BUILTIN_NAMES:
            raise ValueError(
                f"unknown builtin problem {builtin!r}; expected one of {_BUILTIN_NAMES}"
            )
        return bench.builtin_reduced(builtin, params=params, box=box)

    if kind == "quadratic":
        q = np.atleast_2d(np.asarray(params["Q"], dtype=float))
        c = as_vector(params["c"])
        if q.shape[0] != q.shape[1] or q.shape[0] != c.size:
            raise ValueError("Q must be square and compatible with c")
        if not np.allclose(q, q.T, atol=1e-12):
            raise ValueError("Q must be symmetric")
        if box is None:
            raise ValueError("quadratic problems require an explicit box")
        if box.dim != c.size:
            raise ValueError("box dimension must match the problem dimension")
        top = max_eigenvalue_sym(lambda v: q @ v, dim=c.size, tol=1e-12)
        if float(np.min(np.linalg.eigvalsh(q))) < -1e-9 * max(1.0, top):
            raise ValueError("Q must be positive semidefinite")

        def loss(theta):
            theta = np.asarray(theta, dtype=float)
            return 0.5 * float(theta @ (q @ theta)) + float(c @ theta)

        def grad(theta):
            theta = np.asarray(theta, dtype=float)
            return q @ theta + c

        return ReducedProblem(
            m=c.size,
            loss=loss,
            grad=grad,
            hessian_spectrum=lambda theta: top,
            box=box,
            smoothness_bound=top,
            name=name or "quadratic",
        )

    raise ValueError(f"unknown problem kind {kind!r}")


def load_problem_file(path) -> ReducedProblem:
    with open(path, "r", encoding="utf-8") as fh:
        return load_problem(json.load(fh))
