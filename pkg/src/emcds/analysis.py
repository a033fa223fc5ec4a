"""Statistics on ensemble outputs: the normalized statistic, KS tests,
path-level covariance tests, decomposition tallies, martingale-condition
diagnostics, and exact 1D empirical Wasserstein-2.

Conventions. The normalized statistic is S_n = (sum_h - n pi_h)/sqrt(T_n)
per chain. The decomposition splits S_n into a martingale part M_n/sqrt(T_n)
plus remainder terms R0 + R1 - R2 - R3, where R3 is defined as the exact
residual, so recombination is an identity. pi_h always comes from
quadrature, never from the chains being tested, to avoid self-centering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import kstest


# ------------------------------------------------------------ CLT statistic

def clt_statistic(sum_h, n: int, T_n: float, pi_h: float):
    """Normalized fluctuation (sum_h - n pi_h)/sqrt(T_n), vectorized."""
    if T_n <= 0.0:
        raise ValueError("T_n must be positive")
    return (np.asarray(sum_h, dtype=np.float64) - n * pi_h) / math.sqrt(T_n)


@dataclass
class CLTReport:
    n: int
    T_n: float
    v: float
    samples: np.ndarray
    n_chains: int
    n_diverged: int
    ks_statistic: float
    ks_pvalue: float
    sample_mean: float
    sample_variance: float


def clt_report(sum_h, n: int, T_n: float, pi_h: float, v: float) -> CLTReport:
    """Assemble the one-dimensional CLT evidence for an ensemble.

    Chains that diverged carry NaN sums; they are dropped and counted, so
    the sample count is always chains minus diverged.
    """
    raw = clt_statistic(sum_h, n, T_n, pi_h)
    finite = np.isfinite(raw)
    samples = raw[finite]
    d, p = ks_test_normal(samples, v)
    return CLTReport(
        n=n, T_n=T_n, v=v, samples=samples,
        n_chains=int(raw.size), n_diverged=int(raw.size - samples.size),
        ks_statistic=d, ks_pvalue=p,
        sample_mean=float(samples.mean()),
        sample_variance=float(samples.var(ddof=1)))


def ks_test_normal(samples, v: float):
    """One-sample KS distance and asymptotic p-value against N(0, v).

    Degenerate target (v <= 0) is accepted only when the samples are a
    point mass, in which case the comparison is against the unit step
    at zero.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < 30:
        raise ValueError(f"need at least 30 samples, got {samples.size}")
    if v <= 0.0:
        if not np.all(samples == samples.flat[0]):
            raise ValueError("nonpositive target variance with nonconstant "
                             "samples")
        hit = samples.flat[0] == 0.0
        return (0.0, 1.0) if hit else (1.0, 0.0)
    res = kstest(samples, "norm", args=(0.0, math.sqrt(v)), method="asymp")
    return float(res.statistic), float(res.pvalue)


# --------------------------------------------------------------- FCLT paths

@dataclass
class FCLTReport:
    t_grid: np.ndarray
    a_values: np.ndarray
    v: float
    T_n: float
    paths: np.ndarray
    emp_cov: np.ndarray
    target_cov: np.ndarray
    se: np.ndarray
    deviations: np.ndarray
    marginal_ks_pvalues: np.ndarray
    max_abs_deviation: float
    n_chains: int
    n_diverged: int
    psd_ok: bool
    passed: bool


def _jackknife_cov_se(x: np.ndarray, y: np.ndarray) -> float:
    """Leave-one-out standard error of the (ddof=1) covariance of x and y."""
    n = x.size
    sx, sy, sxy = x.sum(), y.sum(), float(x @ y)
    loo = (sxy - x * y - (sx - x) * (sy - y) / (n - 1)) / (n - 2)
    return math.sqrt((n - 1) / n * float(((loo - loo.mean()) ** 2).sum()))


def fclt_covariance_test(snapshots, snapshot_indices, t_grid, a_values,
                         v: float, T_n: float, pi_h: float) -> FCLTReport:
    """Compare path covariances against the time-changed Brownian target.

    snapshots holds per-chain raw partial sums of h at the given indices;
    paths are centered by index*pi_h and scaled by sqrt(T_n). The target is
    v*min(a(s), a(t)); deviations are in jackknife standard-error units and
    the verdict passes when the largest is at most 4.
    """
    snaps = np.atleast_2d(np.asarray(snapshots, dtype=np.float64))
    indices = np.asarray(snapshot_indices, dtype=np.int64)
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=np.float64))
    a_vals = np.atleast_1d(np.asarray(a_values, dtype=np.float64))
    g = t_grid.size
    if g < 1:
        raise ValueError("need at least one grid point")
    if not (indices.size == g and a_vals.size == g and snaps.shape[1] == g):
        raise ValueError("grid, indices, a-values and snapshot columns must "
                         "align")
    if np.unique(indices).size != g:
        raise ValueError("singular grid: distinct times collapse onto the "
                         "same step index")
    finite = np.all(np.isfinite(snaps), axis=1)
    paths = (snaps[finite] - indices[None, :] * pi_h) / math.sqrt(T_n)
    n_chains = snaps.shape[0]
    n = paths.shape[0]
    if n < 100:
        raise ValueError(f"need at least 100 surviving chains, got {n}")

    centered = paths - paths.mean(axis=0, keepdims=True)
    emp = (centered.T @ centered) / (n - 1)
    target = v * np.minimum.outer(a_vals, a_vals)
    se = np.empty((g, g))
    for i in range(g):
        for j in range(i, g):
            se[i, j] = se[j, i] = _jackknife_cov_se(paths[:, i], paths[:, j])
    gap = np.abs(emp - target)
    with np.errstate(divide="ignore", invalid="ignore"):
        dev = np.where(se > 0.0, gap / se, np.where(gap < 1e-12, 0.0, np.inf))

    marginal_p = np.empty(g)
    for i in range(g):
        marginal_p[i] = ks_test_normal(paths[:, i], v * a_vals[i])[1]

    eigs = np.linalg.eigvalsh(emp)
    psd_ok = bool(eigs.min() >= -1e-10 * max(1.0, eigs.max()))
    max_dev = float(np.max(dev))
    return FCLTReport(
        t_grid=t_grid, a_values=a_vals, v=v, T_n=T_n, paths=paths,
        emp_cov=emp, target_cov=target, se=se, deviations=dev,
        marginal_ks_pvalues=marginal_p, max_abs_deviation=max_dev,
        n_chains=n_chains, n_diverged=n_chains - n, psd_ok=psd_ok,
        passed=max_dev <= 4.0)


# ------------------------------------------------------------ decomposition

_DIAG_KEYS = ("m_sum", "r0_sum", "r1_sum", "r2_sum", "diag_sum_h")


@dataclass
class DecompositionDiag:
    statistic: np.ndarray
    martingale: np.ndarray
    r0: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    r3: np.ndarray
    recombination_error: float
    term_means: dict
    term_variances: dict
    n_chains: int
    n_diverged: int


def decomposition_diagnostics(records: dict, n: int, T_n: float,
                              pi_h: float) -> DecompositionDiag:
    """Split the normalized statistic into martingale and remainder terms.

    The last remainder is the exact residual statistic - M/sqrt(T) - R0
    - R1 + R2 taken with the orientation that makes
    statistic = M/sqrt(T) + R0 + R1 - R2 - R3 an identity.
    """
    missing = [k for k in _DIAG_KEYS if k not in records]
    if missing:
        raise ValueError("missing trajectory hooks: " + ", ".join(missing))
    s_t = math.sqrt(T_n)
    statistic = (records["diag_sum_h"] - n * pi_h) / s_t
    mart = records["m_sum"] / s_t
    r0 = records["r0_sum"] / s_t
    r1 = records["r1_sum"] / s_t
    r2 = records["r2_sum"] / s_t
    r3 = mart + r0 + r1 - r2 - statistic
    finite = np.isfinite(statistic)
    recombined = mart + r0 + r1 - r2 - r3
    scale = max(1.0, float(np.max(np.abs(statistic[finite]), initial=0.0)))
    rec_err = float(np.max(np.abs(recombined[finite] - statistic[finite]),
                           initial=0.0)) / scale
    terms = {"statistic": statistic, "martingale": mart, "r0": r0, "r1": r1,
             "r2": r2, "r3": r3}
    means = {k: float(np.mean(a[finite])) for k, a in terms.items()}
    variances = {k: float(np.var(a[finite], ddof=1)) if finite.sum() > 1
                 else 0.0 for k, a in terms.items()}
    return DecompositionDiag(
        statistic=statistic[finite], martingale=mart[finite], r0=r0[finite],
        r1=r1[finite], r2=r2[finite], r3=r3[finite],
        recombination_error=rec_err, term_means=means,
        term_variances=variances, n_chains=int(statistic.size),
        n_diverged=int(statistic.size - finite.sum()))


# --------------------------------------------------------- martingale terms

@dataclass
class MartingaleDiag:
    max_z_over_sqrt_T: np.ndarray
    sum_z2_over_T: np.ndarray
    v: float
    mean_max_z: float
    mean_sum_z2: float
    deviation_from_v: float
    n_chains: int
    n_diverged: int


def martingale_conditions(records: dict, T_n: float, v: float) -> MartingaleDiag:
    """Per-chain largest normalized increment and normalized quadratic
    variation of the martingale part, with the ensemble deviation from v."""
    missing = [k for k in ("max_abs_z", "sum_z2") if k not in records]
    if missing:
        raise ValueError("missing trajectory hooks: " + ", ".join(missing))
    max_ratio = records["max_abs_z"] / math.sqrt(T_n)
    sum_ratio = records["sum_z2"] / T_n
    finite = np.isfinite(max_ratio) & np.isfinite(sum_ratio)
    mr, sr = max_ratio[finite], sum_ratio[finite]
    return MartingaleDiag(
        max_z_over_sqrt_T=mr, sum_z2_over_T=sr, v=v,
        mean_max_z=float(mr.mean()), mean_sum_z2=float(sr.mean()),
        deviation_from_v=float(sr.mean() - v),
        n_chains=int(max_ratio.size),
        n_diverged=int(max_ratio.size - mr.size))


# -------------------------------------------------------------- 1D W2

def w2_empirical_1d(samples_a, samples_b) -> float:
    """Exact W2 between two equal-size empirical laws via order statistics."""
    a = np.sort(np.asarray(samples_a, dtype=np.float64))
    b = np.sort(np.asarray(samples_b, dtype=np.float64))
    if a.ndim != 1 or b.ndim != 1 or a.size != b.size:
        raise ValueError("need two one-dimensional samples of equal size")
    if a.size == 0:
        raise ValueError("need at least one point per sample")
    return float(np.sqrt(np.mean((a - b) ** 2)))
