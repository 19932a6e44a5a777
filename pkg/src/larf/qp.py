"""Constrained least squares over simplex-like polytopes.

Every feasible set used by the attention models (unit simplex, slab simplex,
blocks of slab simplices, coordinate boxes) admits an exact Euclidean
projection, so problems are solved by accelerated projected gradient with
function-value restarts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from larf.errors import DimensionMismatch, EmptyInput, InvalidBounds, LengthMismatch

DEFAULT_SLAB_LOWER = 1e-3
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 10_000

# Slack used when deciding that a point already lies on a constraint surface.
_FEASIBLE_SLACK = 1e-12


def _project_simplex_rows(V: np.ndarray, radius: np.ndarray) -> np.ndarray:
    """Project each row of ``V`` onto ``{u >= 0, sum(u) = radius[row]}``."""
    p = V.shape[1]
    U = -np.sort(-V, axis=1)
    css = np.cumsum(U, axis=1) - radius[:, None]
    ind = np.arange(1, p + 1)
    cond = U - css / ind > 0
    # Index of the last True entry per row; the first entry is always True.
    rho = p - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(V.shape[0]), rho] / (rho + 1)
    return np.maximum(V - theta[:, None], 0.0)


def _on_simplex(v: np.ndarray, radius: float) -> bool:
    return bool(np.all(v >= 0.0)) and abs(v.sum() - radius) <= _FEASIBLE_SLACK * max(1.0, radius)


def project_simplex(v, radius: float = 1.0) -> np.ndarray:
    """Euclidean projection onto ``{u >= 0, sum(u) = radius}`` by sort and threshold."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise EmptyInput("cannot project an empty vector")
    if not radius > 0:
        raise InvalidBounds(f"simplex radius must be positive, got {radius}")
    if _on_simplex(v, radius):
        return v.copy()
    return _project_simplex_rows(v[None, :], np.array([float(radius)]))[0]


def _project_slab_rows(V: np.ndarray, lo: float, hi: float) -> np.ndarray:
    pos = np.maximum(V, 0.0)
    sums = pos.sum(axis=1)
    slack = _FEASIBLE_SLACK * max(1.0, hi)
    low = sums < lo - slack
    high = sums > hi + slack
    out = pos
    if low.any() or high.any():
        out = pos.copy()
        bad = low | high
        radius = np.where(low, lo, hi)[bad]
        out[bad] = _project_simplex_rows(V[bad], radius)
    return out


def project_slab_simplex(v, lo: float, hi: float = 1.0) -> np.ndarray:
    """Euclidean projection onto ``{u >= 0, lo <= sum(u) <= hi}``.

    The orthant projection is optimal when its sum already lies in the slab;
    otherwise the sum constraint is active at whichever bound was violated.
    """
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise EmptyInput("cannot project an empty vector")
    if not (0 < lo <= hi):
        raise InvalidBounds(f"slab bounds must satisfy 0 < lo <= hi, got ({lo}, {hi})")
    return _project_slab_rows(v[None, :], lo, hi)[0]


# ---------------------------------------------------------------------------
# Feasible sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UnitSimplex:
    size: int

    @property
    def n_variables(self) -> int:
        return self.size

    def project(self, v: np.ndarray) -> np.ndarray:
        return project_simplex(v, 1.0)

    def center(self) -> np.ndarray:
        return np.full(self.size, 1.0 / self.size)

    def violation(self, v: np.ndarray) -> float:
        return max(float(np.max(-v, initial=0.0)), abs(float(v.sum()) - 1.0))


@dataclass(frozen=True)
class SlabSimplex:
    size: int
    lo: float = DEFAULT_SLAB_LOWER
    hi: float = 1.0

    def __post_init__(self):
        if not (0 < self.lo <= self.hi):
            raise InvalidBounds(f"slab bounds must satisfy 0 < lo <= hi, got ({self.lo}, {self.hi})")

    @property
    def n_variables(self) -> int:
        return self.size

    def project(self, v: np.ndarray) -> np.ndarray:
        return project_slab_simplex(v, self.lo, self.hi)

    def center(self) -> np.ndarray:
        return np.full(self.size, 0.5 * (self.lo + self.hi) / self.size)

    def violation(self, v: np.ndarray) -> float:
        s = float(v.sum())
        return max(float(np.max(-v, initial=0.0)), self.lo - s, s - self.hi, 0.0)


@dataclass(frozen=True)
class BlockSlabSimplex:
    """``n_blocks`` independent slab simplices of ``block_size`` variables each.

    Variables are laid out block-major: entry ``j * block_size + k``.
    """

    n_blocks: int
    block_size: int
    lo: float = DEFAULT_SLAB_LOWER
    hi: float = 1.0

    def __post_init__(self):
        if not (0 < self.lo <= self.hi):
            raise InvalidBounds(f"slab bounds must satisfy 0 < lo <= hi, got ({self.lo}, {self.hi})")

    @property
    def n_variables(self) -> int:
        return self.n_blocks * self.block_size

    def project(self, v: np.ndarray) -> np.ndarray:
        V = np.asarray(v, dtype=float).reshape(self.n_blocks, self.block_size)
        return _project_slab_rows(V, self.lo, self.hi).ravel()

    def center(self) -> np.ndarray:
        return np.full(self.n_variables, 0.5 * (self.lo + self.hi) / self.block_size)

    def violation(self, v: np.ndarray) -> float:
        sums = v.reshape(self.n_blocks, self.block_size).sum(axis=1)
        return max(
            float(np.max(-v, initial=0.0)),
            float(np.max(self.lo - sums)),
            float(np.max(sums - self.hi)),
            0.0,
        )


@dataclass(frozen=True)
class BoxScalar:
    """Each of ``size`` variables independently confined to ``[lo, hi]``."""

    size: int
    lo: float = DEFAULT_SLAB_LOWER
    hi: float = 1.0

    def __post_init__(self):
        if not (self.lo <= self.hi):
            raise InvalidBounds(f"box bounds must satisfy lo <= hi, got ({self.lo}, {self.hi})")

    @property
    def n_variables(self) -> int:
        return self.size

    def project(self, v: np.ndarray) -> np.ndarray:
        return np.clip(v, self.lo, self.hi)

    def center(self) -> np.ndarray:
        return np.full(self.size, 0.5 * (self.lo + self.hi))

    def violation(self, v: np.ndarray) -> float:
        return max(float(np.max(self.lo - v)), float(np.max(v - self.hi)), 0.0)


Constraint = Union[UnitSimplex, SlabSimplex, BlockSlabSimplex, BoxScalar]


@dataclass(frozen=True)
class QuadraticProblem:
    """Minimize ``||residual_offset - design @ theta||^2`` over ``constraint``."""

    residual_offset: np.ndarray
    design: np.ndarray
    constraint: Constraint

    def __post_init__(self):
        r = np.asarray(self.residual_offset, dtype=float)
        D = np.asarray(self.design, dtype=float)
        if D.ndim != 2 or r.ndim != 1:
            raise DimensionMismatch("design must be 2-D and residual_offset 1-D")
        if D.shape[0] != r.shape[0]:
            raise DimensionMismatch(
                f"design has {D.shape[0]} rows but residual_offset has length {r.shape[0]}"
            )
        if D.shape[1] != self.constraint.n_variables:
            raise DimensionMismatch(
                f"design has {D.shape[1]} columns but the constraint has "
                f"{self.constraint.n_variables} variables"
            )
        object.__setattr__(self, "residual_offset", r)
        object.__setattr__(self, "design", D)

    def objective(self, theta: np.ndarray) -> float:
        res = self.residual_offset - self.design @ theta
        return float(res @ res)


@dataclass(frozen=True)
class QpSolution:
    variables: np.ndarray
    objective: float
    iterations: int
    kkt_residual: float
    converged: bool


def _largest_eigenvalue(D: np.ndarray, n_iter: int = 500, rtol: float = 1e-10) -> float:
    """Power iteration for the top eigenvalue of ``D.T @ D``."""
    p = D.shape[1]
    v = np.ones(p) / np.sqrt(p)
    lam = 0.0
    for _ in range(n_iter):
        w = D.T @ (D @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v_next = w / norm
        lam_next = float(v_next @ (D.T @ (D @ v_next)))
        if abs(lam_next - lam) <= rtol * lam_next:
            return lam_next
        v, lam = v_next, lam_next
    return lam


def solve(
    problem: QuadraticProblem,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> QpSolution:
    """Accelerated projected gradient starting from the feasible center.

    Stops when the gradient-mapping norm ``L * ||x - P(x - grad/L)||`` drops
    to ``tol``. On hitting ``max_iter`` the best iterate seen is returned with
    ``converged=False``.
    """
    D = problem.design
    r = problem.residual_offset
    project = problem.constraint.project

    x = project(problem.constraint.center())
    Dx = D @ x
    fx = float((r - Dx) @ (r - Dx))

    # The 2% margin absorbs power-iteration underestimates.
    L = 2.0 * _largest_eigenvalue(D) * 1.02
    if L <= 0.0:
        return QpSolution(x, fx, 0, 0.0, True)

    def mapping_norm(point: np.ndarray, D_point: np.ndarray) -> float:
        grad = 2.0 * (D.T @ (D_point - r))
        return L * float(np.linalg.norm(point - project(point - grad / L)))

    rr = float(r @ r)
    y, Dy = x, Dx
    t = 1.0
    best_x, best_f = x, fx
    kkt = np.inf
    it = 0
    while it < max_iter:
        it += 1
        grad = 2.0 * (D.T @ (Dy - r))
        x_new = project(y - grad / L)
        step = L * float(np.linalg.norm(y - x_new))
        Dx_new = D @ x_new
        f_new = float((r - Dx_new) @ (r - Dx_new))
        # Changes below the rounding error of f are not treated as increases.
        slack = 8.0 * np.finfo(float).eps * (rr + float(Dx_new @ Dx_new))
        if f_new > fx + slack:
            # Momentum overshot: restart from the last accepted point.
            if t == 1.0:
                # A plain step with this L cannot raise f; this is the numerical floor.
                kkt = mapping_norm(x, Dx)
                break
            y, Dy, t = x, Dx, 1.0
            continue
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_new
        y = x_new + beta * (x_new - x)
        Dy = Dx_new + beta * (Dx_new - Dx)
        x, Dx, fx, t = x_new, Dx_new, f_new, t_new
        if fx <= best_f:
            best_x, best_f = x, fx
        if step <= tol:
            kkt = mapping_norm(x, Dx)
            if kkt <= tol:
                # Prefer the certified point unless the best one is better beyond rounding.
                if fx <= best_f + slack:
                    best_x, best_f = x, fx
                break

    if best_x is not x or not np.isfinite(kkt):
        kkt = mapping_norm(best_x, D @ best_x)
    return QpSolution(best_x, best_f, it, kkt, kkt <= tol)


def solve_scalar_epsilon(c_sum, d_sum, y, lower: float = DEFAULT_SLAB_LOWER) -> tuple[float, float]:
    """Closed-form minimizer of ``sum((y - (1-e) c - e d)^2)`` over ``e in [lower, 1]``."""
    c = np.asarray(c_sum, dtype=float)
    d = np.asarray(d_sum, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (c.shape == d.shape == y.shape):
        raise LengthMismatch(f"length mismatch: {c.shape}, {d.shape}, {y.shape}")
    diff = d - c
    denom = float(diff @ diff)
    if denom < 1e-15:
        eps = lower
    else:
        eps = float(np.clip(diff @ (y - c) / denom, lower, 1.0))
    res = y - (1.0 - eps) * c - eps * d
    return eps, float(res @ res)
