"""Ensemble simulation of theta_{k+1} = theta_k + eta b(theta_k) + sqrt(eta) sigma xi.

Chains are advanced in lockstep as one vectorized state array. Each chain
owns a counter-based RNG stream keyed by (seed, chain_id), and streams are
consumed identically no matter how chains are partitioned across workers,
so results are bit-identical for any worker count. Noise is drawn in blocks
per chain; the generator's output sequence does not depend on the block
split, which also makes checkpoint-aligned draws safe.
"""

from __future__ import annotations

import hashlib
import os
import pickle
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ChainDivergedError, ResourceLimitError
from .model import SDEModel, TestFunction
from .schedules import StepSchedule, SchedulePrefix, build_prefix

DIVERGENCE_RADIUS = 1e12
DEFAULT_BUDGET = 2 * 10 ** 10
CHECKPOINT_MAGIC = b"EMCDSCK1"
CHECKPOINT_VERSION = 1

# cross-chain reductions accumulate per canonical chunk of this many chains
# and fold once after merging, so the addition tree (and hence the rounding)
# is identical for every worker split
_CHUNK = 16


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class Fixed:
    value: float = 0.0


@dataclass(frozen=True)
class UniformOver:
    choices: tuple = (-8.0, 2.0, 12.0)


@dataclass(frozen=True)
class Custom:
    values: tuple = ()


@dataclass(frozen=True)
class RunningSumH:
    testfn: TestFunction


@dataclass(frozen=True)
class PathSnapshots:
    testfn: TestFunction
    t_grid: tuple


@dataclass(frozen=True)
class Moments:
    powers: tuple = (2, 4, 6)


@dataclass(frozen=True)
class TerminalState:
    pass


@dataclass(frozen=True)
class PhiDiagnostics:
    """Trajectory hooks for the martingale-plus-remainder bookkeeping.

    phi, dphi, d2phi are any consistent evaluator triple (quadrature splines
    or closed forms); the recombination identity downstream is exact for any
    choice because the last remainder is defined as the exact residual.
    """
    testfn: TestFunction
    phi: object
    dphi: object
    d2phi: object


@dataclass(frozen=True)
class EnsembleConfig:
    model: SDEModel
    schedule: StepSchedule
    n_chains: int
    n_steps: int
    seed: int
    init: object = field(default_factory=Fixed)
    recorders: tuple = ()
    burn_in: int = 0
    budget: int = DEFAULT_BUDGET

    def __post_init__(self):
        if self.n_chains < 1 or self.n_steps < 1:
            raise ValueError("n_chains and n_steps must be >= 1")
        if self.burn_in < 0 or self.burn_in >= self.n_steps:
            raise ValueError("burn_in must lie in [0, n_steps)")
        if self.model.d != 1:
            raise NotImplementedError("ensemble engine currently runs d=1 models")
        if self.burn_in and any(isinstance(r, PathSnapshots) for r in self.recorders):
            raise ValueError("burn_in is incompatible with path snapshots")
        if isinstance(self.init, Custom) and len(self.init.values) != self.n_chains:
            raise ValueError("custom init needs one value per chain")

    def fingerprint(self) -> str:
        """Stable identity of everything but n_steps (checkpoints may resume
        into a longer run)."""
        parts = [
            self.model.name, repr(self.model.sigma), self.schedule.name,
            repr(self.n_chains), repr(self.seed), repr(self.init),
            repr(self.burn_in),
            ",".join(type(r).__name__ for r in self.recorders),
        ]
        for r in self.recorders:
            if isinstance(r, (RunningSumH, PathSnapshots, PhiDiagnostics)):
                parts.append(r.testfn.name)
            if isinstance(r, PathSnapshots):
                parts.append(repr(r.t_grid))
            if isinstance(r, Moments):
                parts.append(repr(r.powers))
        return hashlib.sha256("|".join(parts).encode()).hexdigest()


@dataclass
class EnsembleResult:
    n_chains: int
    n_steps: int
    seed: int
    burn_in: int
    t_n: float
    T_n: float
    records: dict
    diverged_ids: tuple
    diverged_steps: tuple
    fingerprint: str


# ------------------------------------------------------------------- steps

def em_step(theta, model: SDEModel, eta: float, xi):
    """One update theta + eta b(theta) + sqrt(eta) sigma xi (d=1, vectorized)."""
    if eta <= 0.0:
        raise ValueError("step size must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise ChainDivergedError("non-finite state entering em_step")
    return theta + eta * model.drift(theta) + np.sqrt(eta) * model.sigma * np.asarray(xi)


def _chain_generators(seed: int, chain_ids) -> list:
    return [np.random.Generator(np.random.Philox(key=np.array([seed, cid],
                                                              dtype=np.uint64)))
            for cid in chain_ids]


def _draw_initial(config: EnsembleConfig, gens, chain_ids) -> np.ndarray:
    init = config.init
    n = len(chain_ids)
    if isinstance(init, Fixed):
        return np.full(n, float(init.value))
    if isinstance(init, UniformOver):
        choices = np.asarray(init.choices, dtype=np.float64)
        # one integer draw per chain, taken before any normal draws so the
        # stream layout is fixed
        idx = np.array([g.integers(0, len(choices)) for g in gens])
        return choices[idx]
    if isinstance(init, Custom):
        return np.asarray(init.values, dtype=np.float64)[np.asarray(chain_ids)]
    raise TypeError(f"unknown init spec {init!r}")


# ------------------------------------------------------------ accumulators

class _BlockState:
    """All per-chain accumulators for one contiguous block of chains."""

    def __init__(self, config: EnsembleConfig, prefix: SchedulePrefix, chain_ids):
        self.config = config
        self.prefix = prefix
        self.chain_ids = np.asarray(chain_ids, dtype=np.int64)
        self.gens = _chain_generators(config.seed, chain_ids)
        self.theta = _draw_initial(config, self.gens, chain_ids)
        n_local = self.theta.shape[0]
        self.alive = np.ones(n_local, dtype=bool)
        self.first_bad = np.full(n_local, -1, dtype=np.int64)
        self.k = 0  # states observed so far / steps taken

        self.sum_fn = None
        self.snap_fn = None
        self.phi_rec = None
        self._phi_prev = None
        self.want_terminal = any(isinstance(r, TerminalState)
                                 for r in config.recorders)
        self.acc = {}
        n_total = config.n_steps
        for rec in config.recorders:
            if isinstance(rec, RunningSumH):
                self.sum_fn = rec.testfn.h
                self.acc["sum_h"] = np.zeros(n_local)
            elif isinstance(rec, PathSnapshots):
                self.snap_fn = rec.testfn.h
                self.snap_grid = np.asarray(rec.t_grid, dtype=np.float64)
                idx = np.floor(self.snap_grid * n_total + 1e-9).astype(np.int64)
                self.snap_indices = idx
                self.snap_lookup = {}
                for pos, m in enumerate(idx):
                    self.snap_lookup.setdefault(int(m), []).append(pos)
                self.acc["snap_sum_h"] = np.zeros(n_local)
                self.acc["snapshots"] = np.zeros((n_local, idx.shape[0]))
            elif isinstance(rec, Moments):
                self.powers = tuple(rec.powers)
                lo = int(self.chain_ids[0])
                hi = lo + n_local
                starts = range(lo - lo % _CHUNK, hi, _CHUNK)
                self.chunk_slices = [
                    slice(max(s, lo) - lo, min(s + _CHUNK, hi) - lo)
                    for s in starts]
                n_chunks = len(self.chunk_slices)
                # per-step, per-chunk sums; the fold over chunks happens
                # after merging so it is partition independent
                self.acc["moment_sums"] = np.zeros((n_total + 1, n_chunks,
                                                    len(self.powers)))
                self.acc["moment_alive"] = np.zeros((n_total + 1, n_chunks),
                                                    dtype=np.int64)
            elif isinstance(rec, PhiDiagnostics):
                self.phi_rec = rec
                self.acc["m_sum"] = np.zeros(n_local)
                self.acc["max_abs_z"] = np.zeros(n_local)
                self.acc["sum_z2"] = np.zeros(n_local)
                self.acc["r0_sum"] = np.zeros(n_local)
                self.acc["r1_sum"] = np.zeros(n_local)
                self.acc["r2_sum"] = np.zeros(n_local)
                self.acc["diag_sum_h"] = np.zeros(n_local)

    def observe(self):
        """Record everything attached to the current state index k."""
        k, theta = self.k, self.theta
        if self.snap_fn is not None:
            for pos in self.snap_lookup.get(k, ()):
                self.acc["snapshots"][:, pos] = self.acc["snap_sum_h"]
            if k < self.config.n_steps:
                self.acc["snap_sum_h"] += self.snap_fn(theta)
        if self.sum_fn is not None and self.config.burn_in <= k < self.config.n_steps:
            self.acc["sum_h"] += self.sum_fn(theta)
        if self.phi_rec is not None and k < self.config.n_steps:
            self.acc["diag_sum_h"] += self.phi_rec.testfn.h(theta)
        if "moment_sums" in self.acc:
            for c, sl in enumerate(self.chunk_slices):
                vals = theta[sl][self.alive[sl]]
                absx = np.abs(vals)
                for i, p in enumerate(self.powers):
                    self.acc["moment_sums"][k, c, i] = np.sum(absx ** p)
                self.acc["moment_alive"][k, c] = absx.size

    def advance_block(self, steps: int, noise_hook=None):
        """Take `steps` EM updates, observing each pre-step state."""
        cfg, prefix = self.config, self.prefix
        n_local = self.theta.shape[0]
        noise = np.empty((n_local, steps))
        if noise_hook is None:
            for i, g in enumerate(self.gens):
                noise[i] = g.standard_normal(steps)
        else:
            for j in range(steps):
                noise[:, j] = noise_hook(self.k + j, n_local)
        sigma = cfg.model.sigma
        drift = cfg.model.drift
        rec = self.phi_rec
        if rec is not None and self._phi_prev is None:
            self._phi_prev = np.asarray(rec.phi(self.theta), dtype=np.float64)
        for j in range(steps):
            self.observe()
            k = self.k
            eta = prefix.eta[k]
            xi = noise[:, j]
            theta = self.theta
            b = drift(theta)
            theta_next = theta + eta * b + np.sqrt(eta) * sigma * xi
            if rec is not None:
                z = -(eta ** -0.5) * np.asarray(rec.dphi(theta)) * (sigma * xi)
                self.acc["m_sum"] += z
                np.maximum(self.acc["max_abs_z"], np.abs(z),
                           out=self.acc["max_abs_z"])
                self.acc["sum_z2"] += z * z
                phi_next = np.asarray(rec.phi(theta_next), dtype=np.float64)
                self.acc["r0_sum"] += (phi_next - self._phi_prev) / eta
                d2 = np.asarray(rec.d2phi(theta), dtype=np.float64)
                s2 = sigma * sigma
                sxi = sigma * xi
                # second-order terms from expanding phi along the update;
                # the noise-drift cross term carries a minus so that the
                # recombination identity closes exactly
                self.acc["r1_sum"] += 0.5 * d2 * (s2 - sxi * sxi) \
                    - np.sqrt(eta) * d2 * b * sxi
                self.acc["r2_sum"] += 0.5 * eta * d2 * b * b
                self._phi_prev = phi_next
            bad = self.alive & (~np.isfinite(theta_next)
                                | (np.abs(theta_next) > DIVERGENCE_RADIUS))
            if np.any(bad):
                self.first_bad[bad] = k + 1
                self.alive &= ~bad
                theta_next[bad] = np.nan
                if rec is not None:
                    self._phi_prev[bad] = np.nan
            self.theta = theta_next
            self.k = k + 1

    def finalize(self) -> dict:
        self.observe()  # state index n: terminal snapshot / moments
        out = {}
        for key in ("sum_h", "m_sum", "max_abs_z", "sum_z2",
                    "r0_sum", "r1_sum", "r2_sum", "diag_sum_h"):
            if key in self.acc:
                out[key] = self.acc[key]
        if "snapshots" in self.acc:
            out["snapshots"] = self.acc["snapshots"]
            out["snapshot_t_grid"] = self.snap_grid
            out["snapshot_indices"] = self.snap_indices
        if "moment_sums" in self.acc:
            out["moment_sums"] = self.acc["moment_sums"]
            out["moment_alive"] = self.acc["moment_alive"]
            out["moment_powers"] = np.asarray(self.powers)
        if self.want_terminal:
            out["terminal"] = self.theta.copy()
        out["_alive"] = self.alive
        out["_first_bad"] = self.first_bad
        return out


# -------------------------------------------------------------- checkpoints

def _write_checkpoint(path: str, state: _BlockState):
    payload = {
        "fingerprint": state.config.fingerprint(),
        "k": state.k,
        "theta": state.theta,
        "alive": state.alive,
        "first_bad": state.first_bad,
        "rng_states": [g.bit_generator.state for g in state.gens],
        "acc": state.acc,
        "phi_prev": state._phi_prev,
    }
    blob = pickle.dumps(payload, protocol=4)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
    os.replace(tmp, path)


def _read_checkpoint(path: str) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (size,) = struct.unpack("<Q", fh.read(8))
        return pickle.loads(fh.read(size))


def _restore_block(state: _BlockState, payload: dict):
    state.k = payload["k"]
    state.theta = payload["theta"]
    state.alive = payload["alive"]
    state.first_bad = payload["first_bad"]
    for g, s in zip(state.gens, payload["rng_states"]):
        g.bit_generator.state = s
    state.acc = payload["acc"]
    state._phi_prev = payload["phi_prev"]


# -------------------------------------------------------------------- runs

def _run_block(config: EnsembleConfig, lo: int, hi: int, noise_hook=None,
               checkpoint_path=None, checkpoint_every=10 ** 6) -> dict:
    prefix = build_prefix(config.schedule, config.n_steps)
    state = _BlockState(config, prefix, list(range(lo, hi)))
    if checkpoint_path and os.path.exists(checkpoint_path):
        payload = _read_checkpoint(checkpoint_path)
        if payload["fingerprint"] != config.fingerprint():
            raise ValueError("checkpoint does not match this configuration")
        if payload["k"] > config.n_steps:
            raise ValueError("checkpoint is ahead of the requested run")
        _restore_block(state, payload)
    block = 4096 if config.n_chains <= 1000 else max(256, 4_000_000 // config.n_chains)
    while state.k < config.n_steps:
        steps = min(block, config.n_steps - state.k)
        if checkpoint_path:
            to_ckpt = checkpoint_every - state.k % checkpoint_every
            steps = min(steps, to_ckpt)
        state.advance_block(steps, noise_hook=noise_hook)
        if checkpoint_path and state.k % checkpoint_every == 0:
            _write_checkpoint(checkpoint_path, state)
    out = state.finalize()
    if checkpoint_path:
        _write_checkpoint(checkpoint_path, state)
    return out


def _merge_blocks(blocks: list) -> dict:
    merged = {}
    sample = blocks[0]
    for key in sample:
        if key in ("snapshot_t_grid", "snapshot_indices", "moment_powers"):
            merged[key] = sample[key]
        elif key in ("moment_sums", "moment_alive"):
            merged[key] = np.concatenate([b[key] for b in blocks], axis=1)
        else:
            merged[key] = np.concatenate([b[key] for b in blocks])
    if "moment_sums" in merged:
        counts = np.maximum(merged["moment_alive"].sum(axis=1), 1)[:, None]
        series = merged["moment_sums"].sum(axis=1) / counts
        powers = [int(p) for p in merged.pop("moment_powers")]
        n = series.shape[0] - 1
        cps = np.unique(np.concatenate([
            np.geomspace(1, n, 64).astype(np.int64), [0, max(1, n // 10), n]]))
        merged["moment_max"] = {p: float(series[:, i].max())
                                for i, p in enumerate(powers)}
        merged["moment_at_n10"] = {p: float(series[max(1, n // 10), i])
                                   for i, p in enumerate(powers)}
        merged["moment_series"] = {
            p: np.column_stack([cps, series[cps, i]])
            for i, p in enumerate(powers)}
        merged["moment_full"] = {p: series[:, i] for i, p in enumerate(powers)}
        del merged["moment_sums"], merged["moment_alive"]
    return merged


def run_ensemble(config: EnsembleConfig, workers: int = 1, noise_hook=None,
                 checkpoint_path=None, checkpoint_every=10 ** 6) -> EnsembleResult:
    """Run the ensemble and collect recorder outputs.

    Diverged chains are reported, not fatal: their rows come back NaN and
    their ids/steps are listed on the result. Identical config and seed give
    bit-identical results for every worker count, because chain streams are
    keyed by chain id and blocks merge in chain order.
    """
    total = config.n_chains * config.n_steps
    if total > config.budget:
        raise ResourceLimitError(
            f"run needs {total} chain-steps, over the budget of {config.budget}; "
            f"raise the budget or scale the run down")
    if checkpoint_path and workers != 1:
        raise ValueError("checkpointed runs are single-worker")
    if checkpoint_path and noise_hook is not None:
        raise ValueError("checkpointed runs cannot use a noise hook")

    if workers <= 1 or config.n_chains == 1:
        blocks = [_run_block(config, 0, config.n_chains, noise_hook,
                             checkpoint_path, checkpoint_every)]
    else:
        bounds = np.linspace(0, config.n_chains, workers + 1).astype(int)
        # interior boundaries snap to the canonical chunk size so chunked
        # reductions see the same chunks under any split
        bounds[1:-1] = -(-bounds[1:-1] // _CHUNK) * _CHUNK
        bounds = np.minimum(bounds, config.n_chains)
        spans = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        if noise_hook is not None:
            # hooks may be closures; keep them in-process
            blocks = [_run_block(config, a, b, noise_hook) for a, b in spans]
        else:
            with ProcessPoolExecutor(max_workers=len(spans)) as pool:
                futs = [pool.submit(_run_block, config, a, b) for a, b in spans]
                blocks = [f.result() for f in futs]
    merged = _merge_blocks(blocks)
    alive = merged.pop("_alive")
    first_bad = merged.pop("_first_bad")
    dead = np.nonzero(~alive)[0]
    prefix_tail = build_prefix(config.schedule, config.n_steps)
    return EnsembleResult(
        n_chains=config.n_chains, n_steps=config.n_steps, seed=config.seed,
        burn_in=config.burn_in, t_n=prefix_tail.t_at(config.n_steps),
        T_n=prefix_tail.T_at(config.n_steps), records=merged,
        diverged_ids=tuple(int(i) for i in dead),
        diverged_steps=tuple(int(first_bad[i]) for i in dead),
        fingerprint=config.fingerprint())


# ---------------------------------------------------------- fine reference

def fine_reference(model: SDEModel, t_start: float, x_start, t_end: float,
                   m: int = 50, noise=None, rng=None):
    """Advance a refined EM over [t_start, t_end] with m uniform substeps.

    noise, when given, is the coarse Brownian increment over the whole
    interval (scalar or one per chain); it is refined into m sub-increments
    by sequential bridge conditioning whose sum reproduces the coarse
    increment exactly. With noise=None the sub-increments are drawn fresh.
    rng supplies the bridge (or fresh) normals.
    """
    if m < 1:
        raise ValueError("substep count must be >= 1")
    if t_end <= t_start:
        raise ValueError("t_end must exceed t_start")
    x = np.atleast_1d(np.asarray(x_start, dtype=np.float64)).copy()
    scalar_in = np.isscalar(x_start) or np.asarray(x_start).ndim == 0
    span = t_end - t_start
    dt = span / m
    if noise is None:
        if rng is None:
            raise ValueError("need an rng when no coarse increment is given")
        deltas = rng.standard_normal((m, x.shape[0])) * np.sqrt(dt)
    else:
        rem = np.broadcast_to(np.asarray(noise, dtype=np.float64),
                              x.shape).astype(np.float64).copy()
        deltas = np.empty((m, x.shape[0]))
        if m > 1:
            if rng is None:
                raise ValueError("bridge refinement needs an rng for m > 1")
            normals = rng.standard_normal((m - 1, x.shape[0]))
            trem = span
            for j in range(m - 1):
                mean = rem * (dt / trem)
                sd = np.sqrt(dt * (trem - dt) / trem)
                deltas[j] = mean + sd * normals[j]
                rem = rem - deltas[j]
                trem -= dt
        # the last sub-increment is the remainder, so the sum telescopes to
        # the coarse increment with no rounding gap
        deltas[m - 1] = rem
    for j in range(m):
        x = x + dt * model.drift(x) + model.sigma * deltas[j]
    if not np.all(np.isfinite(x)):
        raise ChainDivergedError("fine reference diverged")
    return float(x[0]) if scalar_in else x
