"""Run traces, Lyapunov monitoring, feasibility audits, and CSV serialization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Vector, as_vector
from .problem import Box

__all__ = [
    "TraceRecord",
    "Trace",
    "lyapunov",
    "check_lyapunov_decrease",
    "check_feasibility",
    "oscillation_amplitude",
    "write_trace_csv",
    "read_trace_records",
    "LyapunovReport",
    "FeasibilityReport",
]


@dataclass(frozen=True, eq=False)
class TraceRecord:
    """Per-iteration snapshot of a tuner run.

    ``theta_bar`` is the averaged iterate computed during the step; terminal
    records carry the last one computed.  ``V`` is present only when the run
    was given a reference optimum.  ``a_k``, ``b_k`` and ``N_k`` are NaN on
    records where no step was taken.
    """

    k: int
    theta: Vector
    nu: Vector
    theta_bar: Vector
    loss: float
    grad_norm: float
    a_k: float
    b_k: float
    N_k: float
    V: float | None
    feasible: bool


@dataclass(eq=False)
class Trace:
    """Ordered run records plus the stopping outcome and a config snapshot."""

    records: list
    outcome: str  # 'converged' | 'max-iters' | 'diverged'
    problem_name: str = ""
    config: dict = field(default_factory=dict)


@dataclass(frozen=True)
class LyapunovReport:
    violations: list  # (k, delta_V, allowed) triples
    worst_k: int | None
    worst_delta: float
    checked: int


@dataclass(frozen=True)
class FeasibilityReport:
    violations: list  # (k, field, coordinate, value, bound) tuples
    checked: int


def lyapunov(theta, nu, theta_star, gamma: float) -> float:
    """Energy of the iterate pair: squared distances of the auxiliary iterate
    to the optimum and to the parameter, both scaled by ``1/gamma``."""
    if gamma <= 0.0:
        raise ValueError("gamma must be positive")
    theta = np.asarray(theta, dtype=float)
    nu = np.asarray(nu, dtype=float)
    theta_star = np.asarray(theta_star, dtype=float)
    d_star = nu - theta_star
    d_theta = nu - theta
    return (float(d_star @ d_star) + float(d_theta @ d_theta)) / gamma


def _records(trace) -> list:
    return trace.records if isinstance(trace, Trace) else list(trace)


def check_lyapunov_decrease(trace, theta_star, gamma: float, tol: float) -> LyapunovReport:
    """Report every step whose energy increase exceeds ``tol * max(1, V_k)``.

    Recomputes the energy from the recorded iterates rather than trusting
    stored values.  The tolerance is relative because the energy spans orders
    of magnitude along a run; the underlying decrease property is exact.
    """
    if tol < 0.0:
        raise ValueError("tol must be nonnegative")
    records = _records(trace)
    theta_star = as_vector(theta_star)
    violations = []
    worst_k = None
    worst_delta = -np.inf
    for prev, cur in zip(records, records[1:]):
        v_prev = lyapunov(prev.theta, prev.nu, theta_star, gamma)
        v_cur = lyapunov(cur.theta, cur.nu, theta_star, gamma)
        delta = v_cur - v_prev
        if delta > worst_delta:
            worst_delta = delta
            worst_k = prev.k
        allowed = tol * max(1.0, v_prev)
        if delta > allowed:
            violations.append((prev.k, delta, allowed))
    checked = max(len(records) - 1, 0)
    if checked == 0:
        worst_delta = 0.0
    return LyapunovReport(violations, worst_k, worst_delta, checked)


def check_feasibility(trace, box: Box) -> FeasibilityReport:
    """List every recorded coordinate lying outside the box (exact comparison)."""
    records = _records(trace)
    violations = []
    for rec in records:
        for label, vec in (("theta", rec.theta), ("nu", rec.nu), ("theta_bar", rec.theta_bar)):
            vec = np.asarray(vec, dtype=float)
            for i in range(vec.size):
                value = float(vec[i])
                if not value >= float(box.lower[i]):
                    violations.append((rec.k, label, i, value, float(box.lower[i])))
                elif not value <= float(box.upper[i]):
                    violations.append((rec.k, label, i, value, float(box.upper[i])))
    return FeasibilityReport(violations, len(records))


def oscillation_amplitude(trace, theta_star) -> float:
    """Largest componentwise deviation from the optimum over the tail half.

    The leading half of the trace is dropped so the initial transient does not
    dominate the comparison; a single-record trace is its own tail.
    """
    records = _records(trace)
    if not records:
        return 0.0
    theta_star = as_vector(theta_star)
    tail = records[len(records) // 2 :]
    amp = 0.0
    for rec in tail:
        dev = float(np.max(np.abs(np.asarray(rec.theta, dtype=float) - theta_star)))
        amp = max(amp, dev)
    return amp


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_trace_csv(trace, path) -> None:
    """Write one row per record; floats carry 17 significant digits so a
    read-back reproduces them bit for bit."""
    records = _records(trace)
    m = records[0].theta.size if records else 1
    header = (
        ["k"]
        + [f"theta_{i}" for i in range(m)]
        + [f"nu_{i}" for i in range(m)]
        + [f"thetabar_{i}" for i in range(m)]
        + ["loss", "grad_norm", "a_k", "b_k", "N_k", "V", "feasible"]
    )
    lines = [",".join(header)]
    for rec in records:
        row = [str(rec.k)]
        row += [_fmt(float(v)) for v in rec.theta]
        row += [_fmt(float(v)) for v in rec.nu]
        row += [_fmt(float(v)) for v in rec.theta_bar]
        row += [
            _fmt(rec.loss),
            _fmt(rec.grad_norm),
            _fmt(rec.a_k),
            _fmt(rec.b_k),
            _fmt(rec.N_k),
            "" if rec.V is None else _fmt(rec.V),
            "true" if rec.feasible else "false",
        ]
        lines.append(",".join(row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trace_records(path) -> list:
    """Read records written by :func:`write_trace_csv`."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines:
        return []
    header = lines[0].split(",")
    m = sum(1 for name in header if name.startswith("theta_"))
    records = []
    for line in lines[1:]:
        parts = line.split(",")
        k = int(parts[0])
        theta = np.array([float(v) for v in parts[1 : 1 + m]])
        nu = np.array([float(v) for v in parts[1 + m : 1 + 2 * m]])
        theta_bar = np.array([float(v) for v in parts[1 + 2 * m : 1 + 3 * m]])
        base = 1 + 3 * m
        loss, grad_norm, a_k, b_k, n_k = (float(parts[base + j]) for j in range(5))
        v_raw = parts[base + 5]
        records.append(
            TraceRecord(
                k=k,
                theta=theta,
                nu=nu,
                theta_bar=theta_bar,
                loss=loss,
                grad_norm=grad_norm,
                a_k=a_k,
                b_k=b_k,
                N_k=n_k,
                V=None if v_raw == "" else float(v_raw),
                feasible=parts[base + 6] == "true",
            )
        )
    return records
