"""SDE models, test functions, and the generator.

A model is the pair (drift b, diffusion sigma) together with the constants
the analysis relies on: a Lipschitz bound L for b, partial-dissipation
constants (K1, K2) with

    <b(x) - b(y), x - y>  <=  -K1 |x-y|^2 + K2,

and a condition bound K3 > 1 for sigma. Declared constants are trusted at
construction and audited empirically by dissipativity_probe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UnsupportedDimensionError


def _shifted_sine_drift(x):
    return -x + np.sin(x)


def _ou_drift(x):
    return -x


@dataclass(frozen=True)
class SDEModel:
    """Additive-noise SDE dX = b(X) dt + sigma dB with declared constants.

    drift must act elementwise on arrays for d=1 models (all built-ins do);
    for d > 1 it maps batches of shape (..., d) to the same shape. sigma is
    a scalar when d=1 and a d x d matrix otherwise.
    """

    d: int
    drift: callable
    sigma: float
    L: float
    K1: float
    K2: float
    K3: float
    name: str = "custom"

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"dimension must be >= 1, got {self.d}")
        if self.d == 1:
            if self.sigma == 0.0:
                raise ValueError("sigma must be invertible (nonzero in d=1)")
        else:
            mat = np.asarray(self.sigma, dtype=np.float64)
            if mat.shape != (self.d, self.d):
                raise ValueError(f"sigma must be {self.d}x{self.d}")
            if abs(np.linalg.det(mat)) < 1e-300:
                raise ValueError("sigma must be invertible")
        if self.L <= 0.0:
            raise ValueError("Lipschitz bound L must be positive")
        if self.K1 <= 0.0:
            raise ValueError("dissipation rate K1 must be positive")
        if self.K2 < 0.0:
            raise ValueError("dissipation offset K2 must be nonnegative")
        if self.K3 <= 1.0:
            raise ValueError("condition bound K3 must exceed 1")

    @property
    def sigma_squared(self) -> float:
        """sigma^2 for scalar-noise models."""
        if self.d != 1:
            raise UnsupportedDimensionError("scalar sigma^2 only defined for d=1")
        return float(self.sigma) ** 2


def shifted_sine() -> SDEModel:
    """d=1 model with drift b(x) = -x + sin x and unit noise.

    The dissipation pair (1/2, 2) follows from
    <b(x)-b(y), x-y> = -|x-y|^2 + (sin x - sin y)(x-y)
                    <= -|x-y|^2 + min(|x-y|^2, 2|x-y|)
    and min(r^2, 2r) <= r^2/2 + 2 for all r >= 0.
    """
    return SDEModel(d=1, drift=_shifted_sine_drift, sigma=1.0,
                    L=2.0, K1=0.5, K2=2.0, K3=1.01, name="shifted-sine")


def ornstein_uhlenbeck(sigma: float = 1.0) -> SDEModel:
    """d=1 linear model b(x) = -x; exact transition law available."""
    s2 = float(sigma) ** 2
    k3 = 1.01 * max(s2, 1.0 / s2)
    return SDEModel(d=1, drift=_ou_drift, sigma=float(sigma),
                    L=1.0, K1=1.0, K2=0.0, K3=k3, name=f"ou({sigma:g})")


def builtin_model(name: str, sigma: float | None = None) -> SDEModel:
    key = name.strip().lower().replace("_", "-")
    if key in ("shifted-sine", "shiftedsine"):
        return shifted_sine()
    if key in ("ou", "ornstein-uhlenbeck", "ornsteinuhlenbeck"):
        return ornstein_uhlenbeck(1.0 if sigma is None else sigma)
    raise ValueError(f"unknown model name {name!r}")


@dataclass(frozen=True)
class TestFunction:
    """Scalar observable with a declared Lipschitz bound."""

    h: callable
    lipschitz_bound: float
    name: str


def _witch(x):
    return 1.0 / (1.0 + np.square(x))


# max |d/dx 1/(1+x^2)| = 2|x|/(1+x^2)^2 attained at x = 1/sqrt(3)
_WITCH_LIP = 3.0 * np.sqrt(3.0) / 8.0


def builtin_testfn(name: str) -> TestFunction:
    key = name.strip().lower()
    if key == "witch":
        return TestFunction(h=_witch, lipschitz_bound=float(_WITCH_LIP), name="witch")
    if key == "sine":
        return TestFunction(h=np.sin, lipschitz_bound=1.0, name="sine")
    if key == "identity":
        return TestFunction(h=np.positive, lipschitz_bound=1.0, name="identity")
    raise ValueError(f"unknown test function {name!r}")


def generator_apply(model: SDEModel, phi_val, grad, hess, x):
    """Apply the generator <b(x), grad> + (1/2) <sigma sigma^T, hess>_HS.

    phi_val is accepted for evaluator-triple uniformity; the generator has no
    zero-order term so it never enters the value. In d=1 all arguments may be
    arrays of matching shape and the result is elementwise.
    """
    if model.d == 1:
        x = np.asarray(x, dtype=np.float64)
        grad = np.asarray(grad, dtype=np.float64)
        hess = np.asarray(hess, dtype=np.float64)
        if grad.shape != x.shape or hess.shape != x.shape:
            raise ValueError("grad and hess must match x in shape for d=1")
        return model.drift(x) * grad + 0.5 * model.sigma_squared * hess
    grad = np.asarray(grad, dtype=np.float64)
    hess = np.asarray(hess, dtype=np.float64)
    if grad.shape != (model.d,):
        raise ValueError(f"grad must have shape ({model.d},)")
    if hess.shape != (model.d, model.d):
        raise ValueError(f"hess must have shape ({model.d},{model.d})")
    if not np.allclose(hess, hess.T, atol=1e-10):
        raise ValueError("hess must be symmetric")
    mat = np.asarray(model.sigma, dtype=np.float64)
    return float(np.dot(model.drift(np.asarray(x)), grad)
                 + 0.5 * np.sum((mat @ mat.T) * hess))


@dataclass(frozen=True)
class ProbeReport:
    """Empirical audit of declared model constants over sampled pairs."""

    n_pairs: int
    radius: float
    seed: int
    max_violation: float
    argmax_pair: tuple
    lipschitz_ratio: float
    verdict: str


def dissipativity_probe(model: SDEModel, n_pairs: int, radius: float,
                        seed: int) -> ProbeReport:
    """Check <b(x)-b(y), x-y> + K1 |x-y|^2 - K2 <= 0 on random pairs.

    Deterministic given the seed. A nonpositive max violation is consistent
    with the declared constants; n_pairs = 0 yields an inconclusive report.
    """
    if n_pairs < 0:
        raise ValueError("n_pairs must be >= 0")
    if n_pairs == 0:
        nan = float("nan")
        return ProbeReport(0, radius, seed, nan, (), nan, "inconclusive")
    rng = np.random.default_rng(seed)
    shape = (n_pairs,) if model.d == 1 else (n_pairs, model.d)
    x = rng.uniform(-radius, radius, size=shape)
    y = rng.uniform(-radius, radius, size=shape)
    diff = x - y
    bdiff = model.drift(x) - model.drift(y)
    if model.d == 1:
        inner = bdiff * diff
        dist2 = diff * diff
        bnorm = np.abs(bdiff)
    else:
        inner = np.sum(bdiff * diff, axis=-1)
        dist2 = np.sum(diff * diff, axis=-1)
        bnorm = np.sqrt(np.sum(bdiff * bdiff, axis=-1))
    violation = inner + model.K1 * dist2 - model.K2
    worst = int(np.argmax(violation))
    dist = np.sqrt(dist2)
    mask = dist > 1e-12
    ratio = float(np.max(bnorm[mask] / dist[mask])) if np.any(mask) else 0.0
    ok = violation[worst] <= 0.0 and ratio <= model.L * (1.0 + 1e-9)
    if model.d == 1:
        pair = (float(x[worst]), float(y[worst]))
    else:
        pair = (x[worst].tolist(), y[worst].tolist())
    return ProbeReport(n_pairs=n_pairs, radius=radius, seed=seed,
                       max_violation=float(violation[worst]), argmax_pair=pair,
                       lipschitz_ratio=ratio,
                       verdict="consistent" if ok else "violated")


def lipschitz_probe(fn, bound: float, n_pairs: int, radius: float, seed: int) -> float:
    """Max of |fn(x)-fn(y)| / |x-y| over sampled scalar pairs."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-radius, radius, size=n_pairs)
    y = rng.uniform(-radius, radius, size=n_pairs)
    mask = np.abs(x - y) > 1e-12
    return float(np.max(np.abs(fn(x[mask]) - fn(y[mask])) / np.abs(x[mask] - y[mask])))


def sigma_condition_check(model: SDEModel, n_vectors: int = 64, seed: int = 0) -> float:
    """Max violation of K3^{-1}|y|^2 <= |sigma^{-1} y|^2 <= K3 |y|^2 on random y."""
    rng = np.random.default_rng(seed)
    if model.d == 1:
        y = rng.standard_normal((n_vectors, 1))
        s = y / model.sigma
    else:
        y = rng.standard_normal((n_vectors, model.d))
        s = np.linalg.solve(np.asarray(model.sigma, dtype=np.float64), y.T).T
    y2 = np.sum(y * y, axis=1)
    s2 = np.sum(s * s, axis=1)
    lower = y2 / model.K3 - s2
    upper = s2 - model.K3 * y2
    return float(max(np.max(lower), np.max(upper)))


def kappa(model: SDEModel, r):
    """Contractivity profile min(-K1 + K2 / r^2, L); vectorized over r > 0."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r <= 0.0):
        raise ValueError("kappa requires r > 0")
    out = np.minimum(-model.K1 + model.K2 / (r * r), model.L)
    return float(out) if out.ndim == 0 else out
