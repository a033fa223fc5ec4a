"""Distance machinery and reflection coupling for contraction studies.

The curve construction follows the concave-distance recipe: a comparison
rate kappa(r) = min(-K1 + K2/r^2, L), radii R0 and R1 located by bisection,
an exponential weight phi_e with primitive Phi, a decreasing correction g,
and the concave distance f with f' = phi_e * g. Constants c1 and c2 are
normalization integrals over [0, R1] chosen so g(R1) = 1/2 exactly.

The coupled pair advances one EM interval at a time: the first component
runs the SDE in fine substeps with live drift, the second freezes its drift
at the interval start (so at interval ends it is exactly an EM chain), and
the second component's Brownian increments are the reflected image of the
first's while the gap is at least delta_stick, identical below it. In d=1
the reflection matrix is the scalar -1. Pairs whose gap falls under
delta_stick are snapped together exactly; re-separation through drift
mismatch is allowed and re-reflects (policy flagged on reports).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_simpson, simpson

from .engine import em_step
from .errors import ChainDivergedError, ConstructionError
from .model import SDEModel, kappa
from .schedules import StepSchedule, build_prefix

DEFAULT_CURVE_POINTS = 4097
DEFAULT_STICK = 1e-6
RESEPARATION_POLICY = "re-reflect"


# ------------------------------------------------------------------- curve

@dataclass(frozen=True)
class CouplingCurve:
    K1: float
    K2: float
    K3: float
    L: float
    r_grid: np.ndarray
    kappa_values: np.ndarray
    phi_e: np.ndarray
    Phi: np.ndarray
    g: np.ndarray
    f: np.ndarray
    f_prime: np.ndarray
    f_double_prime: np.ndarray
    R0: float
    R1: float
    c1: float
    c2: float
    c1_prime: float
    phi_e_tail: float  # phi_e is constant beyond R0; also the tail slope x2

    def f_at(self, r):
        """Evaluate f anywhere: interpolation on the grid, exact linear
        continuation beyond it (f' = phi_e_tail/2 past R1)."""
        r = np.asarray(r, dtype=np.float64)
        end = self.r_grid[-1]
        inside = np.interp(np.minimum(r, end), self.r_grid, self.f)
        tail = np.maximum(r - end, 0.0) * (self.phi_e_tail / 2.0)
        return inside + tail


def _bisect_decreasing(fn, lo: float, hi: float, tol: float = 1e-13,
                       max_iter: int = 200) -> float:
    """Smallest root of a continuous non-increasing fn with fn(lo) >= 0 >=
    fn(hi), by bisection."""
    flo = fn(lo)
    if flo <= 0.0:
        return lo
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if fn(mid) <= 0.0:
            hi = mid
        else:
            lo = mid
        if hi - lo <= tol * max(1.0, hi):
            break
    return hi


def build_curve(model: SDEModel, r_max: float = None,
                n_points: int = DEFAULT_CURVE_POINTS) -> CouplingCurve:
    """Construct the concave comparison distance and its constants.

    The quantified conditions defining R0 and R1 reduce to conditions at
    the left endpoint because kappa is non-increasing once below its cap:
    kappa(r) <= kappa(s) for r >= s, so s(s-R0)kappa(s) <= -8 forces the
    same bound for every larger r. Both radii therefore come from bisection
    on one-point conditions.
    """
    K1, K2, K3, L = model.K1, model.K2, model.K3, model.L

    if K2 == 0.0:
        r0 = 0.0
    else:
        hi = math.sqrt(K2 / K1) * 2.0 + 1.0
        r0 = _bisect_decreasing(lambda s: float(kappa(model, s)), 1e-300, hi)

    def r1_condition(s):
        # want s(s-R0) kappa(s) <= -8; expressed as value + 8 <= 0
        return s * (s - r0) * float(kappa(model, max(s, 1e-300))) + 8.0

    hi = max(r0, 1.0)
    for _ in range(200):
        if r1_condition(hi) <= 0.0:
            break
        hi *= 2.0
    else:
        raise ConstructionError(
            f"could not locate R1: s(s-R0)kappa(s) stayed above -8 out to "
            f"s={hi:.3g} (K1={K1}, K2={K2}, L={L})")
    r1 = _bisect_decreasing(r1_condition, r0, hi)

    if n_points < 33 or n_points % 2 == 0:
        raise ValueError("n_points must be odd and at least 33")
    if r_max is None:
        r_max = max(2.0 * r1, r1 + 1.0)
    if r_max <= r1:
        raise ValueError("r_max must exceed R1")

    # place R1 exactly on the grid so the [0, R1] quadratures are clean
    n_in = max(32, int(round((n_points - 1) * r1 / r_max)) & ~1)
    grid_in = np.linspace(0.0, r1, n_in + 1)
    n_out = max(32, (n_points - 1 - n_in) & ~1)
    grid_out = np.linspace(r1, r_max, n_out + 1)
    grid = np.concatenate([grid_in, grid_out[1:]])

    kap = kappa(model, np.maximum(grid, 1e-300))
    kap_pos = np.maximum(kap, 0.0)
    phi_e = np.exp(-(K3 / 2.0)
                   * cumulative_simpson(grid * kap_pos, x=grid, initial=0.0))
    big_phi = cumulative_simpson(phi_e, x=grid, initial=0.0)

    inv_phi = 1.0 / phi_e
    in_r1 = slice(0, n_in + 1)
    int_phi_over = cumulative_simpson(big_phi[in_r1] * inv_phi[in_r1],
                                      x=grid[in_r1], initial=0.0)
    int_inv = cumulative_simpson(inv_phi[in_r1], x=grid[in_r1], initial=0.0)
    c1 = 1.0 / (2.0 * K3 * int_phi_over[-1])
    c2 = 1.0 / (4.0 * K3 * int_inv[-1])

    g = np.full(grid.shape, 0.5)
    g[in_r1] = 1.0 - (c1 * K3 / 2.0) * int_phi_over - c2 * K3 * int_inv

    f_prime = phi_e * g
    f = cumulative_simpson(f_prime, x=grid, initial=0.0)

    # analytic second derivative (a.e.): phi' g + phi g', with g' the
    # integrand of g inside R1 and zero outside
    dphi = -(K3 / 2.0) * grid * kap_pos * phi_e
    dg = np.zeros_like(grid)
    dg[in_r1] = -(c1 * K3 / 2.0) * big_phi[in_r1] * inv_phi[in_r1] \
        - c2 * K3 * inv_phi[in_r1]
    f_double = dphi * g + phi_e * dg

    with np.errstate(divide="ignore", invalid="ignore"):
        lhs = f_double / K3 + 0.5 * grid * kap * f_prime
        ratio = np.where(f > 0.0, -2.0 * lhs / np.maximum(f, 1e-300), np.inf)
    c1_prime = float(np.min(ratio[1:]))

    return CouplingCurve(
        K1=K1, K2=K2, K3=K3, L=L, r_grid=grid, kappa_values=kap,
        phi_e=phi_e, Phi=big_phi, g=g, f=f, f_prime=f_prime,
        f_double_prime=f_double, R0=r0, R1=r1, c1=c1, c2=c2,
        c1_prime=c1_prime, phi_e_tail=float(phi_e[-1]))


# -------------------------------------------------------------------- rho1

@dataclass(frozen=True)
class Rho1Params:
    curve: CouplingCurve
    epsilon: float = None

    def __post_init__(self):
        if self.epsilon is None:
            object.__setattr__(self, "epsilon", self.curve.c2)
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")


def rho1(params: Rho1Params, x, y):
    """Coupling distance: 0 at equality, else f(|x-y|) plus the scaled
    quadratic Lyapunov weights of both points."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    v_x = 1.0 + x * x
    v_y = 1.0 + y * y
    val = params.curve.f_at(np.abs(x - y)) + params.epsilon * (v_x + v_y)
    return np.where(x == y, 0.0, val)


# ----------------------------------------------------------- coupled pairs

@dataclass
class CoupledPair:
    x: np.ndarray                 # runs the SDE finely, live drift
    y: np.ndarray                 # runs the frozen-drift interpolation
    coalesced: np.ndarray         # currently snapped together
    ever_coalesced: np.ndarray
    reseparations: np.ndarray     # per-pair count of gap reopenings


def make_pairs(z, n_pairs: int) -> CoupledPair:
    x = np.full(n_pairs, float(z))
    return CoupledPair(x=x, y=x.copy(),
                       coalesced=np.ones(n_pairs, dtype=bool),
                       ever_coalesced=np.ones(n_pairs, dtype=bool),
                       reseparations=np.zeros(n_pairs, dtype=np.int64))


def coupled_step(pair: CoupledPair, model: SDEModel, t_start: float,
                 t_end: float, m: int = 50, delta_stick: float = DEFAULT_STICK,
                 rng=None) -> CoupledPair:
    """Advance both components over one EM interval with shared noise.

    The second component's increments are the reflection (scalar -1 in
    d=1) of the first's while |x - y| >= delta_stick and identical below;
    a pair ending a substep closer than delta_stick is snapped together.
    """
    if m < 1:
        raise ValueError("substep count must be >= 1")
    if t_end <= t_start:
        raise ValueError("t_end must exceed t_start")
    if rng is None:
        raise ValueError("coupled_step needs an rng for the shared noise")
    dt = (t_end - t_start) / m
    x = pair.x.copy()
    y = pair.y.copy()
    coalesced = pair.coalesced.copy()
    ever = pair.ever_coalesced.copy()
    reseps = pair.reseparations.copy()
    frozen_b = np.asarray(model.drift(y), dtype=np.float64)
    sigma = model.sigma
    sq = math.sqrt(dt)
    for _ in range(m):
        db1 = sq * rng.standard_normal(x.shape[0])
        separated = np.abs(x - y) >= delta_stick
        db2 = np.where(separated, -db1, db1)
        x = x + dt * model.drift(x) + sigma * db1
        y = y + dt * frozen_b + sigma * db2
        close = np.abs(x - y) < delta_stick
        snap = close & ~coalesced
        reopen = ~close & coalesced
        y[close] = x[close]
        reseps[reopen] += 1
        coalesced = close
        ever |= close
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ChainDivergedError("coupled pair diverged")
    return CoupledPair(x=x, y=y, coalesced=coalesced, ever_coalesced=ever,
                       reseparations=reseps)


# ------------------------------------------------------------ contraction

@dataclass
class ContractionReport:
    checkpoints: np.ndarray
    t_values: np.ndarray
    eta_values: np.ndarray
    mean_rho1: np.ndarray
    bound_proxy: np.ndarray
    ratio: np.ndarray
    coalesced_fraction: np.ndarray
    c: float
    epsilon: float
    n_pairs: int
    reseparation_policy: str
    reseparation_total: int
    verdict: str


def bound_proxy(prefix, n: int, c: float) -> float:
    """Discrete convolution sum_{k<=n} e^{-c (t_n - t_k)} eta_k^{3/2}."""
    t_n = prefix.t_at(n)
    etas = prefix.eta[:n]
    t_ks = prefix.t[:n]
    return float(np.sum(np.exp(-c * (t_n - t_ks)) * etas ** 1.5))


def contraction_study(model: SDEModel, schedule: StepSchedule, z: float,
                      n_end: int, n_pairs: int, params: Rho1Params,
                      c: float = None, substeps: int = 50,
                      delta_stick: float = DEFAULT_STICK, seed: int = 0,
                      checkpoints=None) -> ContractionReport:
    """Track the mean coupling distance along the schedule against the
    exponential-sum proxy; verdict 'bounded' when the ratio trend over the
    last half of checkpoints is non-increasing."""
    if c is None:
        c = params.curve.c1 / 2.0
    if c <= 0.0:
        raise ValueError("decay constant c must be positive")
    prefix = build_prefix(schedule, n_end)
    if checkpoints is None:
        checkpoints = np.unique(np.geomspace(10, n_end, 12).astype(np.int64))
    else:
        checkpoints = np.unique(np.asarray(checkpoints, dtype=np.int64))
        if checkpoints[0] < 1 or checkpoints[-1] > n_end:
            raise ValueError("checkpoints must lie in [1, n_end]")
    rng = np.random.default_rng(seed)
    pair = make_pairs(z, n_pairs)
    rows_rho, rows_proxy, rows_frac = [], [], []
    pos = 0
    for k in range(1, n_end + 1):
        pair = coupled_step(pair, model, prefix.t_at(k - 1), prefix.t_at(k),
                            m=substeps, delta_stick=delta_stick, rng=rng)
        if pos < len(checkpoints) and k == checkpoints[pos]:
            rows_rho.append(float(np.mean(rho1(params, pair.x, pair.y))))
            rows_proxy.append(bound_proxy(prefix, k, c))
            rows_frac.append(float(np.mean(pair.coalesced)))
            pos += 1
    mean_rho = np.asarray(rows_rho)
    proxy = np.asarray(rows_proxy)
    ratio = mean_rho / proxy
    half = len(checkpoints) // 2
    tail = ratio[half:]
    if len(tail) >= 2 and np.all(np.isfinite(tail)):
        slope = np.polyfit(np.log(checkpoints[half:].astype(float)),
                           np.log(np.maximum(tail, 1e-300)), 1)[0]
        verdict = "bounded" if slope <= 0.01 else "unbounded-trend"
    else:
        verdict = "inconclusive"
    return ContractionReport(
        checkpoints=checkpoints, t_values=prefix.t[checkpoints - 1] + 0.0,
        eta_values=prefix.eta[checkpoints - 1],
        mean_rho1=mean_rho, bound_proxy=proxy, ratio=ratio,
        coalesced_fraction=np.asarray(rows_frac), c=c, epsilon=params.epsilon,
        n_pairs=n_pairs, reseparation_policy=RESEPARATION_POLICY,
        reseparation_total=int(pair.reseparations.sum()), verdict=verdict)


# ---------------------------------------------------------------- W2 rate

@dataclass
class W2RateReport:
    checkpoints: np.ndarray
    t_values: np.ndarray
    eta_values: np.ndarray
    w2: np.ndarray
    ratio: np.ndarray            # w2 / eta^{1/4}
    slope: float                 # fitted d log w2 / d log eta
    n_pairs: int
    substeps: int
    verdict: str


def w2_rate_study(model: SDEModel, schedule: StepSchedule, z: float,
                  checkpoints, n_pairs: int, substeps: int = 16,
                  seed: int = 0) -> W2RateReport:
    """Empirical W2 between the chain and a bridge-consistent fine solution
    sample at each checkpoint, with the quarter-power step-size ratio.

    Both samples ride the same coarse Brownian increments; the fine side
    refines each increment by bridge conditioning. The verdict is
    'consistent' when the ratio column stays bounded: its maximum over the
    last half of checkpoints at most twice the column median.
    """
    if model.d != 1:
        raise NotImplementedError("exact empirical W2 needs d=1")
    checkpoints = np.asarray(checkpoints, dtype=np.int64)
    if checkpoints.size < 1 or np.any(np.diff(checkpoints) <= 0):
        raise ValueError("checkpoints must be strictly increasing")
    if checkpoints[0] < 1:
        raise ValueError("checkpoints start at 1")
    from .analysis import w2_empirical_1d
    from .engine import fine_reference

    n_end = int(checkpoints[-1])
    prefix = build_prefix(schedule, n_end)
    rng = np.random.default_rng(seed)
    theta = np.full(n_pairs, float(z))
    x_ref = theta.copy()
    sigma = model.sigma
    w2_rows = []
    pos = 0
    for k in range(1, n_end + 1):
        eta = prefix.eta[k - 1]
        xi = rng.standard_normal(n_pairs)
        db = math.sqrt(eta) * xi
        theta = theta + eta * model.drift(theta) + sigma * db
        x_ref = fine_reference(model, prefix.t_at(k - 1), x_ref,
                               prefix.t_at(k), m=substeps, noise=db, rng=rng)
        if pos < checkpoints.size and k == checkpoints[pos]:
            w2_rows.append(w2_empirical_1d(theta, x_ref))
            pos += 1
    w2 = np.asarray(w2_rows)
    etas = prefix.eta[checkpoints - 1]
    ratio = w2 / etas ** 0.25
    if checkpoints.size >= 2 and np.all(w2 > 0.0):
        slope = float(np.polyfit(np.log(etas), np.log(w2), 1)[0])
    else:
        slope = float("nan")
    half = checkpoints.size // 2
    bounded = (np.max(ratio[half:]) <= 2.0 * np.median(ratio)
               if np.all(np.isfinite(ratio)) else False)
    return W2RateReport(
        checkpoints=checkpoints, t_values=prefix.t[checkpoints - 1] + 0.0,
        eta_values=etas, w2=w2, ratio=ratio, slope=slope, n_pairs=n_pairs,
        substeps=substeps,
        verdict="consistent" if bounded else "unbounded-trend")
