"""Discrete 1D optimal transport on an integer grid.

Distributions live on the implicit support ``0..n-1`` (one point per
coordinate), with ground cost ``|i - j|**p`` for ``p`` in {1, 2}.

Two routes are provided for every quantity:

- closed-form solvers that exploit the ordered line (quantile-function
  algebra), fast enough for supports of ~2e5 points, and
- exact linear-program oracles (`solve_ot_lp`, `barycenter_lp`) for small
  instances, used to cross-check the closed forms in tests.

Quantile convention: right-continuous generalized inverse CDF,
``F^{-1}(q) = min{i : F(i) >= q}``, ties broken toward the lower index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import DimensionError, DomainError, SizeLimitError

__all__ = [
    "DiscreteDistribution",
    "TransportPlan",
    "GroundCost",
    "BarycenterWeights",
    "wasserstein_distance",
    "solve_ot_lp",
    "barycenter_quantile",
    "barycenter_quantile_atoms",
    "barycenter_lp",
]

SUM_TOL = 1e-9          # tolerance on sum-to-one before rejection
NEG_TOL = 1e-12         # magnitude of negative float noise clipped to zero
LP_MAX_POINTS = 64      # solve_ot_lp size limit
LP_BARY_MAX_POINTS = 16
LP_BARY_MAX_INPUTS = 4

_LP_OPTIONS = {"presolve": True}


def _as_prob_vector(values, what: str) -> np.ndarray:
    """Validate/renormalize a probability vector, clipping float noise."""
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.size < 1:
        raise DomainError(f"{what} must be a non-empty 1-D vector")
    if not np.all(np.isfinite(vec)):
        raise DomainError(f"{what} contains non-finite entries")
    if vec.min() < -NEG_TOL:
        raise DomainError(f"{what} has negative entries (min={vec.min()!r})")
    vec = np.maximum(vec, 0.0)
    total = vec.sum()
    if abs(total - 1.0) > SUM_TOL:
        raise DomainError(f"{what} sums to {total!r}, not 1 within {SUM_TOL}")
    if total != 1.0:
        vec = vec / total
    return vec


@dataclass(frozen=True)
class DiscreteDistribution:
    """Probability vector over the integer grid ``0..n-1``."""

    mass: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mass", _as_prob_vector(self.mass, "mass"))

    def __len__(self) -> int:
        return self.mass.size

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.mass)


@dataclass(frozen=True)
class TransportPlan:
    """Coupling matrix; rows marginalize to the source, columns to the target."""

    plan: np.ndarray

    def __post_init__(self):
        plan = np.asarray(self.plan, dtype=np.float64)
        if plan.ndim != 2:
            raise DomainError("plan must be a 2-D matrix")
        if plan.min() < -NEG_TOL:
            raise DomainError("plan has negative entries")
        object.__setattr__(self, "plan", np.maximum(plan, 0.0))

    def check_feasible(self, a: DiscreteDistribution, b: DiscreteDistribution,
                       tol: float = SUM_TOL) -> None:
        """Raise DomainError unless rows sum to ``a`` and columns to ``b``."""
        row_err = np.abs(self.plan.sum(axis=1) - a.mass).max()
        col_err = np.abs(self.plan.sum(axis=0) - b.mass).max()
        if row_err > tol or col_err > tol:
            raise DomainError(
                f"plan infeasible: row error {row_err:.3e}, column error {col_err:.3e}"
            )


@dataclass(frozen=True)
class GroundCost:
    """Ground cost ``|i - j|**p`` between grid points, p in {1, 2}."""

    p: int = 2

    def __post_init__(self):
        if self.p not in (1, 2):
            raise DomainError(f"cost exponent must be 1 or 2, got {self.p!r}")

    def matrix(self, n: int, m: int) -> np.ndarray:
        diff = np.abs(np.arange(n, dtype=np.float64)[:, None] - np.arange(m))
        return diff if self.p == 1 else diff * diff


@dataclass(frozen=True)
class BarycenterWeights:
    """Non-negative weights over the input distributions, summing to 1."""

    lam: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lam", _as_prob_vector(self.lam, "lambda"))

    def __len__(self) -> int:
        return self.lam.size

    @staticmethod
    def uniform(count: int) -> "BarycenterWeights":
        if count < 1:
            raise DomainError("need at least one weight")
        return BarycenterWeights(np.full(count, 1.0 / count))


# ---------------------------------------------------------------------------
# Quantile-function machinery
# ---------------------------------------------------------------------------


def _quantile_segments(cdfs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Common refinement of the quantile axis for a set of CDFs.

    Returns ``(widths, indices)`` where segment k covers a quantile interval
    of length ``widths[k]`` and ``indices[s, k]`` is the s-th input's
    (constant) quantile on that interval.
    """
    interior = [c[:-1] for c in cdfs]
    edges = np.unique(np.concatenate(interior + [np.array([0.0, 1.0])]))
    edges = edges[(edges >= 0.0) & (edges <= 1.0)]
    if edges[0] != 0.0:
        edges = np.concatenate([[0.0], edges])
    if edges[-1] != 1.0:
        edges = np.concatenate([edges, [1.0]])
    hi = edges[1:]
    widths = np.diff(edges)
    indices = np.empty((len(cdfs), hi.size), dtype=np.int64)
    for s, c in enumerate(cdfs):
        indices[s] = np.minimum(np.searchsorted(c, hi, side="left"), c.size - 1)
    return widths, indices


def wasserstein_distance(a: DiscreteDistribution, b: DiscreteDistribution,
                         cost: GroundCost = GroundCost()) -> float:
    """p-Wasserstein distance between grid distributions, via the 1D closed form.

    Integrates ``|F_a^{-1} - F_b^{-1}|**p`` over quantiles, which solves the
    transport problem exactly on an ordered line, and returns the p-th root.
    """
    if len(a) != len(b):
        raise DimensionError(f"length mismatch: {len(a)} vs {len(b)}")
    widths, idx = _quantile_segments([a.cdf(), b.cdf()])
    gaps = np.abs(idx[0] - idx[1]).astype(np.float64)
    transport = float(np.dot(widths, gaps if cost.p == 1 else gaps * gaps))
    return transport ** (1.0 / cost.p)


# ---------------------------------------------------------------------------
# Exact LP oracles (small instances)
# ---------------------------------------------------------------------------


def solve_ot_lp(a: DiscreteDistribution, b: DiscreteDistribution,
                cost: GroundCost = GroundCost()) -> tuple[TransportPlan, float]:
    """Exact transport plan and objective by linear programming.

    Minimizes ``<C, P>`` over couplings of ``a`` and ``b``. Small-instance
    oracle: supports up to 64 points per side.
    """
    n, m = len(a), len(b)
    if n > LP_MAX_POINTS or m > LP_MAX_POINTS:
        raise SizeLimitError(f"LP oracle limited to {LP_MAX_POINTS} points, got {n}x{m}")
    c = cost.matrix(n, m).ravel()
    # Row-sum constraints then column-sum constraints on vec(P).
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([a.mass, b.mass])
    res = linprog(c, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs",
                  options=_LP_OPTIONS)
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    plan = TransportPlan(res.x.reshape(n, m))
    plan.check_feasible(a, b)
    return plan, float(res.fun)


def barycenter_lp(inputs: list[DiscreteDistribution], weights: BarycenterWeights,
                  cost: GroundCost = GroundCost()) -> DiscreteDistribution:
    """Exact fixed-support barycenter by one joint LP over S coupled plans.

    Minimizes ``sum_s lam_s <C, P_s>`` over a grid distribution ``a`` and
    plans ``P_s`` coupling ``a`` with each input. Small-instance test oracle:
    n <= 16 points, S <= 4 inputs.
    """
    _check_barycenter_args(inputs, weights)
    n, s_count = len(inputs[0]), len(inputs)
    if n > LP_BARY_MAX_POINTS:
        raise SizeLimitError(f"barycenter LP limited to {LP_BARY_MAX_POINTS} points, got {n}")
    if s_count > LP_BARY_MAX_INPUTS:
        raise SizeLimitError(f"barycenter LP limited to {LP_BARY_MAX_INPUTS} inputs, got {s_count}")

    # Variables: vec(P_1) .. vec(P_S), then a. P_s rows marginalize to a,
    # columns to input s.
    nn = n * n
    n_var = s_count * nn + n
    cost_mat = cost.matrix(n, n).ravel()
    obj = np.concatenate([w * cost_mat for w in weights.lam] + [np.zeros(n)])
    rows: list[np.ndarray] = []
    rhs: list[float] = []
    for s, dist in enumerate(inputs):
        base = s * nn
        for j in range(n):  # column sums -> input mass
            row = np.zeros(n_var)
            row[base + j:base + nn:n] = 1.0
            rows.append(row)
            rhs.append(dist.mass[j])
        for i in range(n):  # row sums - a_i = 0
            row = np.zeros(n_var)
            row[base + i * n:base + (i + 1) * n] = 1.0
            row[s_count * nn + i] = -1.0
            rows.append(row)
            rhs.append(0.0)
    total = np.zeros(n_var)
    total[s_count * nn:] = 1.0
    rows.append(total)
    rhs.append(1.0)
    res = linprog(obj, A_eq=np.array(rows), b_eq=np.array(rhs), bounds=(0, None),
                  method="highs", options=_LP_OPTIONS)
    if not res.success:
        raise RuntimeError(f"barycenter LP failed: {res.message}")
    return DiscreteDistribution(np.maximum(res.x[s_count * nn:], 0.0))


# ---------------------------------------------------------------------------
# Quantile-averaging barycenter
# ---------------------------------------------------------------------------


def _check_barycenter_args(inputs: list[DiscreteDistribution],
                           weights: BarycenterWeights) -> None:
    if not inputs:
        raise DomainError("need at least one input distribution")
    n = len(inputs[0])
    if any(len(d) != n for d in inputs):
        raise DimensionError("input distributions must share one length")
    if len(weights) != len(inputs):
        raise DimensionError(
            f"{len(weights)} weights for {len(inputs)} distributions")


def _weighted_median(values: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Lower weighted median along axis 0 of a (S, K) array."""
    order = np.argsort(values, axis=0, kind="stable")
    sorted_vals = np.take_along_axis(values, order, axis=0)
    sorted_lam = lam[order]
    cum = np.cumsum(sorted_lam, axis=0)
    pick = np.argmax(cum >= 0.5, axis=0)
    return sorted_vals[pick, np.arange(values.shape[1])]


def barycenter_quantile_atoms(inputs: list[DiscreteDistribution],
                              weights: BarycenterWeights,
                              cost: GroundCost = GroundCost(),
                              ) -> tuple[np.ndarray, np.ndarray]:
    """Free-support barycenter as atoms ``(positions, masses)``.

    For p=2 the barycenter's quantile function is the weighted mean of the
    inputs' quantile functions; for p=1 it is their (lower) weighted median.
    Positions are reals in ``[0, n-1]``; masses are quantile-segment widths.
    """
    _check_barycenter_args(inputs, weights)
    widths, idx = _quantile_segments([d.cdf() for d in inputs])
    if cost.p == 2:
        positions = weights.lam @ idx
    else:
        positions = _weighted_median(idx, weights.lam).astype(np.float64)
    return positions, widths


def barycenter_quantile(inputs: list[DiscreteDistribution],
                        weights: BarycenterWeights,
                        cost: GroundCost = GroundCost(),
                        projection: str = "round") -> DiscreteDistribution:
    """Barycenter of grid distributions by quantile-function averaging.

    The free-support barycenter (see `barycenter_quantile_atoms`) is pushed
    back onto the integer grid. ``projection="round"`` sends each atom to its
    nearest grid point (exact grid-constrained minimizer for p=2; ties round
    up); ``"interp"`` splits each atom between its two neighbours with linear
    weights (mass-preserving smoothing, not the exact grid minimizer).
    """
    positions, masses = barycenter_quantile_atoms(inputs, weights, cost)
    n = len(inputs[0])
    out = np.zeros(n)
    if projection == "round":
        grid = np.clip(np.floor(positions + 0.5).astype(np.int64), 0, n - 1)
        np.add.at(out, grid, masses)
    elif projection == "interp":
        lo = np.clip(np.floor(positions).astype(np.int64), 0, n - 1)
        frac = np.clip(positions - lo, 0.0, 1.0)
        np.add.at(out, lo, masses * (1.0 - frac))
        np.add.at(out, np.minimum(lo + 1, n - 1), masses * frac)
    else:
        raise DomainError(f"unknown projection {projection!r}")
    return DiscreteDistribution(out)
