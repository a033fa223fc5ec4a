"""Decreasing step-size schedules and their numeric audits.

A schedule is the sequence eta_1, eta_2, ... driving the recursion
theta_{k+1} = theta_k + eta_{k+1} b(theta_k) + sqrt(eta_{k+1}) sigma xi_{k+1}.
This module materializes prefix arrays

    t_k = eta_1 + ... + eta_k        (chain clock)
    T_k = 1/eta_1 + ... + 1/eta_k    (normalization clock)

with extended-precision accumulation, computes the scaling number n/sqrt(T_n)
and the empirical time change T_[nt]/T_n, and audits the standing conditions
on {eta_k} with finite-range trend verdicts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ScheduleInvalidError

_CHUNK = 1 << 20

VERDICT_SATISFIED = "satisfied-on-range"
VERDICT_VIOLATED = "violated-at-k"
VERDICT_INCONCLUSIVE = "inconclusive"

# Least-squares slope thresholds for trend calls on log-log axes. A sequence
# is only called decreasing/increasing when the fitted slope clears the dead
# band; anything inside it is reported as inconclusive rather than guessed.
_SLOPE_DEAD_BAND = 0.01


def _seq_cumsum(values: np.ndarray) -> np.ndarray:
    """Sequential cumulative sum accumulated in 80-bit extended precision.

    Chunking only partitions the same sequential order, so the result is
    independent of chunk size. Worst-case relative error is about
    n * 5.4e-20, well inside the 1e-12 prefix tolerance at n = 1e7.
    """
    out = np.empty(values.shape[0], dtype=np.float64)
    carry = np.longdouble(0.0)
    for start in range(0, values.shape[0], _CHUNK):
        chunk = np.cumsum(values[start:start + _CHUNK].astype(np.longdouble))
        chunk += carry
        out[start:start + _CHUNK] = chunk.astype(np.float64)
        carry = chunk[-1]
    return out


@dataclass(frozen=True)
class StepSchedule:
    """A named decreasing step-size rule, evaluated lazily by index.

    kind is one of "power" (c0 * k^-beta with c0=1), "log-over-k"
    (log(k+1)/(k+1)), "harmonic" (1/k), "constant-times-power" (c0 * k^-beta)
    or "table" (explicit values, extended past the end by the last entry).
    """

    kind: str
    beta: float = 0.0
    c0: float = 1.0
    values: tuple = ()
    description: str = ""

    def eta(self, k):
        """Vectorized eta_k for 1-based indices k (int array or scalar)."""
        k = np.asarray(k, dtype=np.float64)
        if self.kind == "power":
            return k ** (-self.beta)
        if self.kind == "harmonic":
            return 1.0 / k
        if self.kind == "log-over-k":
            return np.log(k + 1.0) / (k + 1.0)
        if self.kind == "constant-times-power":
            return self.c0 * k ** (-self.beta)
        if self.kind == "table":
            vals = np.asarray(self.values, dtype=np.float64)
            idx = np.minimum(k.astype(np.int64) - 1, len(vals) - 1)
            return vals[idx]
        raise ScheduleInvalidError(f"unknown schedule kind {self.kind!r}")

    @property
    def name(self) -> str:
        if self.kind == "power":
            return f"power({self.beta:g})"
        if self.kind == "constant-times-power":
            return f"{self.c0:g}*power({self.beta:g})"
        if self.kind == "table":
            return f"table[{len(self.values)}]"
        return self.kind


def power(beta: float) -> StepSchedule:
    if not 0.0 < beta <= 1.0:
        raise ScheduleInvalidError(f"power exponent must lie in (0, 1], got {beta}")
    return StepSchedule(kind="power", beta=float(beta))


def log_over_k() -> StepSchedule:
    return StepSchedule(kind="log-over-k")


def harmonic() -> StepSchedule:
    return StepSchedule(kind="harmonic")


def constant_times_power(c0: float, beta: float) -> StepSchedule:
    if c0 <= 0.0:
        raise ScheduleInvalidError(f"leading constant must be positive, got {c0}")
    if not 0.0 < beta <= 1.0:
        raise ScheduleInvalidError(f"power exponent must lie in (0, 1], got {beta}")
    return StepSchedule(kind="constant-times-power", beta=float(beta), c0=float(c0))


def table(values) -> StepSchedule:
    vals = tuple(float(v) for v in values)
    if not vals:
        raise ScheduleInvalidError("table schedule needs at least one value")
    for i, v in enumerate(vals):
        if not v > 0.0:
            raise ScheduleInvalidError(f"table schedule value at k={i + 1} is not positive: {v}")
    return StepSchedule(kind="table", values=vals)


def from_config(kind: str, beta: float | None = None, c0: float | None = None,
                values=None) -> StepSchedule:
    """Build a schedule from flat-config fields (schedule.kind etc.)."""
    kind = kind.strip().lower()
    if kind == "power":
        if beta is None:
            raise ScheduleInvalidError("power schedule needs schedule.beta")
        return power(beta)
    if kind in ("log-over-k", "logoverk"):
        return log_over_k()
    if kind == "harmonic":
        return harmonic()
    if kind in ("constant-times-power", "ctp"):
        if beta is None or c0 is None:
            raise ScheduleInvalidError("constant-times-power needs schedule.beta and schedule.c0")
        return constant_times_power(c0, beta)
    if kind == "table":
        if not values:
            raise ScheduleInvalidError("table schedule needs schedule.values")
        return table(values)
    raise ScheduleInvalidError(f"unknown schedule kind {kind!r}")


@dataclass(frozen=True)
class SchedulePrefix:
    """Materialized eta_1..eta_n with prefix sums t and T (same 1-based indexing:
    t[k-1] = t_k)."""

    schedule: StepSchedule
    n_max: int
    eta: np.ndarray
    t: np.ndarray
    T: np.ndarray

    def t_at(self, k: int) -> float:
        """t_k with t_0 = 0."""
        if k == 0:
            return 0.0
        return float(self.t[k - 1])

    def T_at(self, k: int) -> float:
        """T_k with T_0 = 0."""
        if k == 0:
            return 0.0
        return float(self.T[k - 1])


def build_prefix(schedule: StepSchedule, n_max: int) -> SchedulePrefix:
    if n_max < 1:
        raise ScheduleInvalidError(f"n_max must be >= 1, got {n_max}")
    ks = np.arange(1, n_max + 1, dtype=np.int64)
    eta = np.asarray(schedule.eta(ks), dtype=np.float64)
    bad = np.nonzero(~(eta > 0.0) | ~np.isfinite(eta))[0]
    if bad.size:
        k = int(bad[0]) + 1
        raise ScheduleInvalidError(
            f"schedule {schedule.name} yields nonpositive step at k={k}: {eta[bad[0]]}")
    return SchedulePrefix(schedule=schedule, n_max=n_max, eta=eta,
                          t=_seq_cumsum(eta), T=_seq_cumsum(1.0 / eta))


def scaling_number(prefix: SchedulePrefix, n: int) -> float:
    """The normalization n / sqrt(T_n) multiplying the empirical-average error."""
    if not 1 <= n <= prefix.n_max:
        raise IndexError(f"n={n} outside prefix range [1, {prefix.n_max}]")
    return n / math.sqrt(prefix.T_at(n))


def time_change(prefix: SchedulePrefix, n: int, t_grid) -> np.ndarray:
    """Empirical time change a_n(t) = T_[nt] / T_n on a sorted grid in [0,1]."""
    if not 1 <= n <= prefix.n_max:
        raise IndexError(f"n={n} outside prefix range [1, {prefix.n_max}]")
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_grid.size and (np.any(np.diff(t_grid) < 0) or t_grid[0] < 0.0 or t_grid[-1] > 1.0):
        raise ValueError("t_grid must be sorted within [0, 1]")
    # floor with a tiny guard so exact products like 0.25 * n do not round down
    idx = np.floor(t_grid * n + 1e-9).astype(np.int64)
    T_n = prefix.T_at(n)
    out = np.empty(t_grid.shape, dtype=np.float64)
    for i, m in enumerate(idx):
        out[i] = prefix.T_at(int(m)) / T_n
    return out


@dataclass(frozen=True)
class Verdict:
    status: str
    witness: int | None = None
    detail: str = ""

    @property
    def violated(self) -> bool:
        return self.status == VERDICT_VIOLATED


@dataclass(frozen=True)
class AssumptionReport:
    """Finite-range audit of the standing step-size conditions.

    Conditions audited (keys of ``verdicts``):
      monotone            eta non-increasing over the range
      open-unit-range     eta_k in (0,1) from some k0 on (k0 reported)
      step-sum-divergence sum eta_k = infinity (trend only, never "satisfied")
      increment-ratio     eta_{k-1} - eta_k <= c * eta_k^2 for a stable c
      tail-summability    sum eta_k^(2-eps) < infinity (dyadic-block trend)
      critical-vanishing  sqrt(log n) / (eta_n sqrt(T_n)) -> 0 (trend)
    """

    schedule: StepSchedule
    n_max: int
    epsilon: float
    checkpoints: np.ndarray
    monotone_ok: bool
    monotone_from: int
    k0: int | None
    eta_first: float
    divergence_trend: float
    t_growth_ratio: float
    c_fit: float
    tail_sums: np.ndarray
    cauchy_tail: float
    block_ratios: np.ndarray
    critical_sequence: np.ndarray
    critical_raw: np.ndarray
    verdicts: dict = field(default_factory=dict)

    @property
    def any_violation(self) -> bool:
        return any(v.violated for v in self.verdicts.values())


def _log_slope(xs: np.ndarray, ys: np.ndarray) -> float:
    """Least-squares slope of log(ys) vs log(xs); 0.0 when degenerate."""
    mask = (ys > 0) & (xs > 0)
    if mask.sum() < 2:
        return 0.0
    return float(np.polyfit(np.log(xs[mask]), np.log(ys[mask]), 1)[0])


def _checkpoints(n_max: int, count: int = 48) -> np.ndarray:
    lo = min(10, n_max)
    cps = np.unique(np.geomspace(lo, n_max, count).astype(np.int64))
    extra = np.array([max(1, n_max // 100), max(1, n_max // 10),
                      max(1, n_max // 2), n_max], dtype=np.int64)
    return np.unique(np.concatenate([cps, extra]))


def audit_assumptions(schedule: StepSchedule, n_max: int, epsilon: float) -> AssumptionReport:
    """Audit the step-size conditions over k <= n_max.

    Divergence of sum(eta) is never declared satisfied outright: a finite audit
    can only report a growth trend. Violations always carry a witness index.
    """
    if n_max < 100:
        raise ScheduleInvalidError(f"audit needs n_max >= 100, got {n_max}")
    if not 0.0 < epsilon < 1.0:
        raise ScheduleInvalidError(f"epsilon must lie in (0, 1), got {epsilon}")
    prefix = build_prefix(schedule, n_max)
    eta, t, T = prefix.eta, prefix.t, prefix.T
    cps = _checkpoints(n_max)
    verdicts: dict[str, Verdict] = {}

    # monotone: a short initial transient is tolerated (the theory only uses
    # the tail behavior, and log(k+1)/(k+1) peaks at k=2 before decreasing)
    increases = np.nonzero(eta[1:] > eta[:-1])[0]
    monotone_ok = increases.size == 0
    monotone_from = 1 if monotone_ok else int(increases[-1]) + 2
    if monotone_ok:
        verdicts["monotone"] = Verdict(VERDICT_SATISFIED, witness=1,
                                       detail="eta non-increasing on range")
    elif monotone_from <= 10:
        verdicts["monotone"] = Verdict(
            VERDICT_SATISFIED, witness=monotone_from,
            detail=f"eta non-increasing from k={monotone_from} on "
                   f"(initial transient of {monotone_from - 1} steps)")
    else:
        verdicts["monotone"] = Verdict(
            VERDICT_VIOLATED, witness=monotone_from,
            detail=f"eta still increasing at k={monotone_from}")

    # open unit range: last time eta leaves (0,1) determines the onset k0
    ge1 = np.nonzero(eta >= 1.0)[0]
    k0 = int(ge1[-1]) + 2 if ge1.size else 1
    if k0 <= n_max:
        verdicts["open-unit-range"] = Verdict(VERDICT_SATISFIED, witness=k0,
                                              detail=f"eta_k < 1 from k0={k0} on")
    else:
        k0 = None
        verdicts["open-unit-range"] = Verdict(VERDICT_VIOLATED, witness=n_max,
                                              detail="eta never drops below 1 on range")

    # divergence trend of t_n (log-log slope over the last two decades)
    window = cps[cps >= max(10, n_max // 100)]
    slope_t = _log_slope(window.astype(np.float64), t[window - 1])
    growth = float(t[n_max - 1] / t[n_max // 2 - 1])
    if slope_t > _SLOPE_DEAD_BAND and growth > 1.005:
        verdicts["step-sum-divergence"] = Verdict(
            VERDICT_INCONCLUSIVE,
            detail=f"divergence trend observed (slope {slope_t:.3f}, "
                   f"t(n)/t(n/2) = {growth:.4f}); finite audit cannot prove divergence")
    else:
        verdicts["step-sum-divergence"] = Verdict(
            VERDICT_INCONCLUSIVE,
            detail=f"no clear growth (slope {slope_t:.3f}, ratio {growth:.4f})")

    # increment ratio (eta_{k-1} - eta_k) / eta_k^2, k >= 2
    diffs = eta[:-1] - eta[1:]
    ratios = diffs / eta[1:] ** 2
    c_fit = float(np.max(ratios)) if ratios.size else 0.0
    argmax_k = int(np.argmax(ratios)) + 2 if ratios.size else 0
    half = n_max // 2
    first_half_max = float(np.max(ratios[: max(1, half - 1)])) if ratios.size else 0.0
    if ratios.size and argmax_k > half and c_fit > 1.2 * max(first_half_max, 1e-300):
        verdicts["increment-ratio"] = Verdict(
            VERDICT_VIOLATED, witness=argmax_k,
            detail=f"increment ratio still growing: {c_fit:.3g} at k={argmax_k}")
    else:
        verdicts["increment-ratio"] = Verdict(
            VERDICT_SATISFIED, witness=argmax_k or None,
            detail=f"c_fit = {c_fit:.6g} attained at k={argmax_k}")

    # tail summability of eta^(2-eps): dyadic block sums must decay
    s = eta ** (2.0 - epsilon)
    s_prefix = _seq_cumsum(s)
    tail_sums = s_prefix[cps - 1]
    j_max = int(math.floor(math.log2(n_max)))
    block_sums = []
    for j in range(4, j_max):
        lo_k, hi_k = 1 << j, min(1 << (j + 1), n_max)
        if hi_k <= lo_k:
            break
        block_sums.append(s_prefix[hi_k - 1] - s_prefix[lo_k - 1])
    block_sums = np.asarray(block_sums)
    block_ratios = block_sums[1:] / block_sums[:-1] if block_sums.size > 1 else np.empty(0)
    last_ratios = block_ratios[-4:]
    if last_ratios.size >= 2 and np.all(last_ratios <= 0.95):
        r = float(np.mean(last_ratios))
        cauchy_tail = float(block_sums[-1] * r / (1.0 - r))
        verdicts["tail-summability"] = Verdict(
            VERDICT_SATISFIED,
            detail=f"dyadic blocks decay geometrically (ratio ~ {r:.3f}), "
                   f"extrapolated tail ~ {cauchy_tail:.3g}")
    elif last_ratios.size >= 2 and np.all(last_ratios >= 1.0):
        cauchy_tail = math.inf
        verdicts["tail-summability"] = Verdict(
            VERDICT_VIOLATED, witness=1 << (j_max - 1),
            detail="dyadic block sums non-decreasing; partial sums keep growing")
    else:
        r = float(np.mean(last_ratios)) if last_ratios.size else 1.0
        cauchy_tail = math.inf if r >= 1.0 else float(block_sums[-1] * r / (1.0 - r))
        verdicts["tail-summability"] = Verdict(
            VERDICT_INCONCLUSIVE, detail="dyadic block trend mixed on range")

    # critical sequence sqrt(log n) / (eta_n sqrt(T_n))
    crit_raw = 1.0 / (eta[cps - 1] * np.sqrt(T[cps - 1]))
    crit_log = np.sqrt(np.log(cps)) * crit_raw
    wmask = cps >= max(10, n_max // 100)
    slope_crit = _log_slope(cps[wmask].astype(np.float64), crit_log[wmask])
    if slope_crit <= -_SLOPE_DEAD_BAND:
        verdicts["critical-vanishing"] = Verdict(
            VERDICT_SATISFIED,
            detail=f"critical sequence decreasing (log-log slope {slope_crit:.4f})")
    elif slope_crit >= _SLOPE_DEAD_BAND:
        verdicts["critical-vanishing"] = Verdict(
            VERDICT_VIOLATED, witness=n_max,
            detail=f"critical sequence growing (log-log slope {slope_crit:.4f}); "
                   f"1/(eta_n sqrt(T_n)) = {crit_raw[-1]:.6f} at n={n_max}")
    else:
        verdicts["critical-vanishing"] = Verdict(
            VERDICT_INCONCLUSIVE,
            detail=f"critical sequence flat on range (slope {slope_crit:.4f}, "
                   f"last value {crit_log[-1]:.4f})")

    return AssumptionReport(
        schedule=schedule, n_max=n_max, epsilon=epsilon, checkpoints=cps,
        monotone_ok=monotone_ok, monotone_from=monotone_from, k0=k0,
        eta_first=float(eta[0]),
        divergence_trend=slope_t, t_growth_ratio=growth, c_fit=c_fit,
        tail_sums=tail_sums, cauchy_tail=cauchy_tail, block_ratios=block_ratios,
        critical_sequence=crit_log, critical_raw=crit_raw, verdicts=verdicts)


def audit_a_condition(a, T_horizon: float, C: float, delta_grid) -> dict:
    """Audit the time-change regularity condition for a candidate a(t).

    For each delta computes tau(delta) = sup_m sqrt(a((m+1)delta) - a(m delta))
    over m < T/delta and the quantity (tau/delta) * exp(-C / tau^2); verdict is
    "vanishing-trend" when that sequence drops by at least 10x over the grid.
    """
    delta_grid = np.asarray(delta_grid, dtype=np.float64)
    if delta_grid.size and np.any(np.diff(delta_grid) > 0):
        raise ValueError("delta_grid must be decreasing")
    taus, values = [], []
    for delta in delta_grid:
        m_count = int(math.floor(T_horizon / delta))
        edges = np.arange(m_count + 1, dtype=np.float64) * delta
        a_vals = np.asarray([a(e) for e in edges], dtype=np.float64)
        inc = np.diff(a_vals)
        if np.any(inc < -1e-13):
            raise ValueError("a(t) is not monotone on the audited grid")
        tau = math.sqrt(max(float(np.max(inc)), 0.0)) if inc.size else 0.0
        taus.append(tau)
        if tau == 0.0:
            values.append(0.0)
        else:
            values.append((tau / delta) * math.exp(-C / tau ** 2))
    values = np.asarray(values)
    if values.size < 2:
        verdict = VERDICT_INCONCLUSIVE
    elif values[0] > 0 and (values[-1] == 0.0 or values[0] / max(values[-1], 5e-324) >= 10.0):
        verdict = "vanishing-trend"
    else:
        verdict = VERDICT_INCONCLUSIVE
    return {"delta": delta_grid, "tau": np.asarray(taus), "value": values,
            "verdict": verdict}
