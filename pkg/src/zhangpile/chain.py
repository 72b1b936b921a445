"""The (N,[a,b]) discrete-time Markov process.

Each step adds a uniform [a,b] amount to a uniformly chosen site of a stable
chain and relaxes the result.  Because every step starts from a stable
configuration plus one addition, topplings are abelian and the relaxation
order does not matter; leftmost-first is used internally.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import (
    DEFAULT_TOPPLE_CAP,
    InvariantViolation,
    TopplingLog,
    TopplingPolicy,
    _relax_leftmost,
    _relax_sequential,
    is_stable,
)

_CHUNK = 4096


@dataclass(frozen=True)
class AdditionEvent:
    t: int
    site: int       # 1-based
    amount: float


def is_heavy(amount: float, a: float, b: float) -> bool:
    """A heavy addition carries at least the mean amount (a+b)/2."""
    return amount >= 0.5 * (a + b)


class ChainProcess:
    """Mutable state of one (N,[a,b]) run.

    The state space is the stable configurations [0,1)^N; the process is
    undefined for a >= b (the degenerate fixed-amount model is out of scope).
    """

    def __init__(self, n: int, a: float, b: float, heights=None,
                 seed: int | None = None, rng: np.random.Generator | None = None,
                 cap: int = DEFAULT_TOPPLE_CAP):
        if n < 1:
            raise ValueError("n must be >= 1")
        if not (0.0 <= a < b <= 1.0):
            raise ValueError(f"need 0 <= a < b <= 1, got a={a}, b={b}")
        self.n = n
        self.a = a
        self.b = b
        self.cap = cap
        if heights is None:
            self.heights = [0.0] * n
        else:
            hs = [float(v) for v in heights]
            if len(hs) != n:
                raise ValueError(f"heights length {len(hs)} != n={n}")
            if not is_stable(hs):
                raise ValueError("initial configuration must be stable (all heights < 1)")
            if min(hs) < 0:
                raise ValueError("heights must be nonnegative")
            self.heights = hs
        self.t = 0
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        # With a >= 1/2 an addition to a full site must topple; checked per step.
        self._check_heavy = a >= 0.5
        self._sites: list = []
        self._amts: list = []
        self._bufpos = 0

    @property
    def config(self) -> np.ndarray:
        return np.array(self.heights)

    def _refill(self) -> None:
        self._sites = self.rng.integers(0, self.n, _CHUNK).tolist()
        self._amts = self.rng.uniform(self.a, self.b, _CHUNK).tolist()
        self._bufpos = 0

    def _draw(self) -> tuple[int, float]:
        i = self._bufpos
        if i >= len(self._sites):
            self._refill()
            i = 0
        self._bufpos = i + 1
        return self._sites[i], self._amts[i]

    def step_fast(self) -> tuple[int, float, int]:
        """One step without building a log; returns (site0, amount, topplings)."""
        x, u = self._draw()
        h = self.heights
        was_full = h[x] >= 0.5
        h[x] += u
        ntop = _relax_leftmost(h, x, self.cap) if h[x] >= 1.0 else 0
        self.t += 1
        if self._check_heavy and was_full and ntop == 0:
            raise InvariantViolation(
                f"a={self.a} >= 1/2: addition to a full site must topple (t={self.t})")
        return x, u, ntop

    def step(self) -> tuple[AdditionEvent, TopplingLog]:
        """One step with a full toppling log."""
        x, u = self._draw()
        return self._apply(x + 1, u)

    def apply_addition(self, site: int, amount: float) -> tuple[AdditionEvent, TopplingLog]:
        """Apply a forced addition (1-based site); bypasses the RNG."""
        if not 1 <= site <= self.n:
            raise ValueError(f"site {site} out of range 1..{self.n}")
        return self._apply(site, float(amount))

    def _apply(self, site: int, amount: float) -> tuple[AdditionEvent, TopplingLog]:
        h = self.heights
        i = site - 1
        was_full = h[i] >= 0.5
        h[i] += amount
        counts = np.zeros(self.n, dtype=np.int64)
        log = TopplingLog(counts=counts)
        if h[i] >= 1.0:
            _relax_sequential(h, TopplingPolicy.LEFTMOST, None, self.cap,
                              counts, log.sequence)
        self.t += 1
        if self._check_heavy and was_full and log.total == 0:
            raise InvariantViolation(
                f"a={self.a} >= 1/2: addition to a full site must topple (t={self.t})")
        return AdditionEvent(t=self.t, site=site, amount=amount), log


def scripted_run(proc: ChainProcess, script) -> tuple[list[np.ndarray], list[TopplingLog]]:
    """Replay a fixed list of (site, amount) additions.

    Amounts must lie in [a,b].  Returns the trajectory of stable
    configurations, starting with the initial one, plus the logs.
    """
    configs = [proc.config]
    logs: list[TopplingLog] = []
    for site, amount in script:
        if not proc.a <= amount <= proc.b:
            raise ValueError(f"scripted amount {amount} outside [{proc.a}, {proc.b}]")
        _, log = proc.apply_addition(site, amount)
        configs.append(proc.config)
        logs.append(log)
    return configs, logs


class MarginalStats:
    """Per-site running mean, second moment and histogram over [0,1)."""

    def __init__(self, n_sites: int, bins: int = 256):
        if n_sites < 1 or bins < 1:
            raise ValueError("n_sites and bins must be positive")
        self.n_sites = n_sites
        self.bins = bins
        self.count = 0
        self._sum = np.zeros(n_sites)
        self._sumsq = np.zeros(n_sites)
        self.hist = np.zeros((n_sites, bins), dtype=np.int64)
        self._offsets = np.arange(n_sites, dtype=np.int64) * bins

    def add_batch(self, block: np.ndarray) -> None:
        """Accumulate a (samples, n_sites) block of stable configurations."""
        block = np.asarray(block, dtype=float)
        if block.ndim != 2 or block.shape[1] != self.n_sites:
            raise ValueError("block must have shape (samples, n_sites)")
        self.count += block.shape[0]
        self._sum += block.sum(axis=0)
        self._sumsq += (block * block).sum(axis=0)
        idx = (block * self.bins).astype(np.int64)
        np.clip(idx, 0, self.bins - 1, out=idx)
        flat = (idx + self._offsets).ravel()
        self.hist += np.bincount(flat, minlength=self.n_sites * self.bins) \
                       .reshape(self.n_sites, self.bins)

    def add(self, heights) -> None:
        self.add_batch(np.asarray(heights, dtype=float)[None, :])

    @property
    def mean(self) -> np.ndarray:
        if self.count == 0:
            return np.full(self.n_sites, np.nan)
        return self._sum / self.count

    @property
    def second_moment(self) -> np.ndarray:
        if self.count == 0:
            return np.full(self.n_sites, np.nan)
        return self._sumsq / self.count

    @property
    def var(self) -> np.ndarray:
        return self.second_moment - self.mean ** 2


def drive(proc: ChainProcess, steps: int, stats: MarginalStats | None = None,
          event_sink=None) -> None:
    """Advance ``steps`` steps, optionally accumulating statistics and/or
    passing one JSON-ready event record per step to ``event_sink``."""
    buf: list[list[float]] = []
    for _ in range(steps):
        x, u, ntop = proc.step_fast()
        if event_sink is not None:
            event_sink({"t": proc.t, "site": x + 1, "amount": u,
                        "avalanche_size": ntop})
        if stats is not None:
            buf.append(proc.heights.copy())
            if len(buf) >= 2048:
                stats.add_batch(np.array(buf))
                buf.clear()
    if stats is not None and buf:
        stats.add_batch(np.array(buf))


def run_stationary(proc: ChainProcess, burn_in: int, samples: int,
                   bins: int = 256) -> MarginalStats:
    """Advance ``burn_in`` steps, then record the configuration for ``samples`` steps."""
    if burn_in < 0 or samples < 0:
        raise ValueError("burn_in and samples must be >= 0")
    drive(proc, burn_in)
    stats = MarginalStats(proc.n, bins=bins)
    drive(proc, samples, stats=stats)
    return stats


def empirical_tv_distance(stats1: MarginalStats, stats2: MarginalStats, site: int) -> float:
    """Half L1 distance between the per-site empirical height histograms.

    ``site`` is 1-based.  Both statistics must use the same binning and hold
    at least one sample each.
    """
    if stats1.bins != stats2.bins or stats1.n_sites != stats2.n_sites:
        raise ValueError("histogram binning mismatch")
    if not 1 <= site <= stats1.n_sites:
        raise ValueError(f"site {site} out of range 1..{stats1.n_sites}")
    if stats1.count == 0 or stats2.count == 0:
        raise ValueError("empirical TV distance needs at least one sample on each side")
    p = stats1.hist[site - 1] / stats1.count
    q = stats2.hist[site - 1] / stats2.count
    return 0.5 * float(np.abs(p - q).sum())


def run_events(proc: ChainProcess, steps: int) -> list[dict]:
    """Run ``steps`` steps and return JSON-ready event records."""
    records: list[dict] = []
    drive(proc, steps, event_sink=records.append)
    return records


def write_events_jsonl(fobj, records) -> None:
    for rec in records:
        fobj.write(json.dumps(rec, sort_keys=True) + "\n")
