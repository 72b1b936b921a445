"""Finite d-dimensional proxies for the infinite-volume Zhang model.

A configuration lives on a torus (mass-conserving, closest to the
infinite-volume conservation identities) or on a dissipative box (open
boundary, mass leaks when edge sites topple).  Toppling sends 1/(2d) of the
site's height to each existing neighbour.

Dynamics: every site carries an independent rate-1 Poisson clock; at a ring
the site topples if unstable, else nothing happens.  The engine simulates
the superposition directly: the next ring arrives after an Exp(#sites) wait
at a uniformly chosen site, and an exact set of unstable sites detects
stabilization without scanning.  A finite run can only collect evidence
about stabilizability: ``active-at-cutoff`` is evidence, never proof.

Per-site toppling counts M and emitted mass L feed the exact bookkeeping
identity  eta(t) = eta(0) - L + (1/2d) * sum of neighbour L,  checked both
directly and through the toppling matrix (diagonal -1, neighbours 1/(2d)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from multiprocessing import Pool

import numpy as np
import scipy.sparse as sp

TORUS = "torus"
BOX = "dissipative-box"

_BOUNDARY_ALIASES = {"torus": TORUS, "box": BOX, "dissipative-box": BOX,
                     "dissipative": BOX}

_CHUNK = 8192


def parse_boundary(name: str) -> str:
    try:
        return _BOUNDARY_ALIASES[str(name).lower()]
    except KeyError:
        raise ValueError(f"unknown boundary mode: {name!r}") from None


@dataclass
class LatticeConfig:
    """d-dimensional height array plus boundary mode."""

    heights: np.ndarray
    boundary: str = TORUS

    def __post_init__(self):
        self.heights = np.array(self.heights, dtype=float)
        self.boundary = parse_boundary(self.boundary)
        if self.heights.ndim < 1:
            raise ValueError("heights must be at least 1-dimensional")
        if (self.heights < 0).any():
            raise ValueError("heights must be nonnegative")
        if self.boundary == TORUS and any(s < 2 for s in self.heights.shape):
            raise ValueError("torus sides must be >= 2")

    @property
    def dim(self) -> int:
        return self.heights.ndim

    @property
    def sides(self) -> tuple[int, ...]:
        return self.heights.shape

    @property
    def n_sites(self) -> int:
        return self.heights.size

    def copy(self) -> "LatticeConfig":
        return LatticeConfig(self.heights.copy(), self.boundary)

    def is_stable(self) -> bool:
        return bool((self.heights < 1.0).all())

    def total_mass(self) -> float:
        return float(self.heights.sum())


@lru_cache(maxsize=32)
def _neighbor_table(shape: tuple, boundary: str):
    """Flat neighbour ids per site plus the count of missing (off-box) ones."""
    idx = np.arange(int(np.prod(shape))).reshape(shape)
    d = len(shape)
    cols = []
    valid = []
    for ax in range(d):
        for off in (1, -1):
            cols.append(np.roll(idx, off, axis=ax).ravel())
            if boundary == TORUS:
                valid.append(np.ones(idx.size, dtype=bool))
            else:
                keep = np.ones(shape, dtype=bool)
                sl = [slice(None)] * d
                sl[ax] = 0 if off == 1 else shape[ax] - 1
                keep[tuple(sl)] = False
                valid.append(keep.ravel())
    cols = np.stack(cols, axis=1)
    valid = np.stack(valid, axis=1)
    neighbors = tuple(tuple(int(c) for c, ok in zip(row, vrow) if ok)
                      for row, vrow in zip(cols, valid))
    missing = tuple(int((~vrow).sum()) for vrow in valid)
    return neighbors, missing


class MassLedger:
    """Per-site toppling counts M, emitted mass L, and dissipated mass.

    L is accumulated with compensated summation so the conservation
    identities stay far below the 1e-9 tolerance over long runs.
    """

    def __init__(self, shape):
        self.shape = tuple(int(s) for s in shape)
        n = int(np.prod(self.shape))
        self._m = [0] * n
        self._lv = [0.0] * n
        self._lc = [0.0] * n
        self._diss = 0.0
        self._diss_c = 0.0
        self.t = 0.0
        self.events = 0

    @property
    def M(self) -> np.ndarray:
        return np.array(self._m, dtype=np.int64).reshape(self.shape)

    @property
    def L(self) -> np.ndarray:
        return np.array(self._lv).reshape(self.shape)

    @property
    def dissipated(self) -> float:
        return self._diss

    def copy(self) -> "MassLedger":
        out = MassLedger(self.shape)
        out._m = list(self._m)
        out._lv = list(self._lv)
        out._lc = list(self._lc)
        out._diss = self._diss
        out._diss_c = self._diss_c
        out.t = self.t
        out.events = self.events
        return out


def topple_lattice(config: LatticeConfig, x, ledger: MassLedger | None = None
                   ) -> tuple[LatticeConfig, MassLedger]:
    """Topple one site (no-op if stable); returns updated copies.

    ``x`` is a coordinate tuple (an int works in one dimension).
    """
    if isinstance(x, (int, np.integer)):
        x = (int(x),)
    x = tuple(int(c) for c in x)
    if len(x) != config.dim or any(not 0 <= c < s for c, s in zip(x, config.sides)):
        raise ValueError(f"site {x} outside lattice of shape {config.sides}")
    out = config.copy()
    led = ledger.copy() if ledger is not None else MassLedger(config.sides)
    if led.shape != config.sides:
        raise ValueError("ledger geometry does not match the configuration")
    flat = int(np.ravel_multi_index(x, config.sides))
    h = out.heights.ravel()
    hx = float(h[flat])
    if hx < 1.0:
        return out, led
    neighbors, missing = _neighbor_table(config.sides, config.boundary)
    share = hx / (2 * config.dim)
    h[flat] = 0.0
    for nb in neighbors[flat]:
        h[nb] += share
    led._m[flat] += 1
    led._lv[flat] += hx
    led._diss += share * missing[flat]
    return out, led


# ---------------------------------------------------------------------------
# Markov toppling engine
# ---------------------------------------------------------------------------

@dataclass
class Snapshot:
    t: float
    total_mass: float
    n_unstable: int
    frac_unstable: float
    min_m: int
    max_m: int
    dissipated: float


@dataclass
class StabilizabilityVerdict:
    outcome: str                # "stabilized" | "active-at-cutoff"
    t_stab: float | None
    t_end: float
    events: int
    min_m: int
    max_m: int
    dissipated: float
    evidence_strong: bool       # active verdicts: min M reached the threshold
    snapshots: list = field(default_factory=list)


class MarkovToppling:
    """Resumable Poisson-clock toppling run on one lattice configuration."""

    def __init__(self, config: LatticeConfig, seed: int | None = None,
                 rng: np.random.Generator | None = None,
                 min_m_threshold: int = 10, record_ring_site=None):
        self.boundary = config.boundary
        self.shape = config.sides
        self.d = config.dim
        self.n = config.n_sites
        self.h = config.heights.ravel().tolist()
        self.initial = config.heights.copy()
        nbrs, missing = _neighbor_table(self.shape, self.boundary)
        self._nbrs = [list(row) for row in nbrs]
        self._missing = list(missing)
        self.ledger = MassLedger(self.shape)
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.unstable = {i for i, v in enumerate(self.h) if v >= 1.0}
        self.t = 0.0
        self.events = 0
        self.t_stab: float | None = 0.0 if not self.unstable else None
        self.min_m_threshold = min_m_threshold
        self.snapshots: list[Snapshot] = []
        if record_ring_site is not None and not isinstance(record_ring_site, (int, np.integer)):
            record_ring_site = int(np.ravel_multi_index(tuple(record_ring_site), self.shape))
        self._ring_site = record_ring_site
        self.ring_times: list[float] = []
        self._wait_buf: list = []
        self._site_buf: list = []
        self._bufpos = _CHUNK

    def _snapshot(self, t: float) -> None:
        m = self.ledger._m
        self.snapshots.append(Snapshot(
            t=t, total_mass=math.fsum(self.h), n_unstable=len(self.unstable),
            frac_unstable=len(self.unstable) / self.n,
            min_m=min(m), max_m=max(m), dissipated=self.ledger._diss))

    def run(self, t_max: float = math.inf, max_events: int | None = None,
            snapshot_every: float | None = None) -> None:
        """Advance until stabilized, ``t_max``, or ``max_events`` further rings."""
        if not self.unstable:
            return
        h = self.h
        nbrs = self._nbrs
        missing = self._missing
        unstable = self.unstable
        led = self.ledger
        m = led._m
        lv = led._lv
        lc = led._lc
        diss = led._diss
        diss_c = led._diss_c
        twod = 2 * self.d
        n = self.n
        rng = self.rng
        scale = 1.0 / n
        box = self.boundary == BOX
        t = self.t
        ring_site = self._ring_site
        events_left = math.inf if max_events is None else max_events
        next_snap = None
        if snapshot_every is not None:
            next_snap = (math.floor(t / snapshot_every) + 1) * snapshot_every
        waits, sites, pos = self._wait_buf, self._site_buf, self._bufpos
        while events_left > 0:
            if pos >= len(waits):
                waits = rng.exponential(scale, _CHUNK).tolist()
                sites = rng.integers(0, n, _CHUNK).tolist()
                pos = 0
            te = t + waits[pos]
            while next_snap is not None and next_snap < te:
                if next_snap > t_max:
                    next_snap = None
                    break
                self.t = t
                self._snapshot(next_snap)
                next_snap += snapshot_every
            if te > t_max:
                # discard the crossing draw: by memorylessness a resumed run
                # correctly starts from a fresh exponential wait at t_max
                pos += 1
                t = t_max
                break
            s = sites[pos]
            pos += 1
            t = te
            self.events += 1
            events_left -= 1
            if ring_site is not None and s == ring_site:
                self.ring_times.append(t)
            hx = h[s]
            if hx < 1.0:
                continue
            h[s] = 0.0
            m[s] += 1
            # compensated: L[s] += hx
            y = hx - lc[s]
            tt = lv[s] + y
            lc[s] = (tt - lv[s]) - y
            lv[s] = tt
            share = hx / twod
            for nb in nbrs[s]:
                v = h[nb] + share
                h[nb] = v
                if v >= 1.0:
                    unstable.add(nb)
            unstable.discard(s)
            if box and missing[s]:
                y = share * missing[s] - diss_c
                tt = diss + y
                diss_c = (tt - diss) - y
                diss = tt
            if not unstable:
                self.t_stab = t
                break
        self._wait_buf, self._site_buf, self._bufpos = waits, sites, pos
        self.t = t
        led.t = t
        led.events = self.events
        led._diss = diss
        led._diss_c = diss_c

    def config(self) -> LatticeConfig:
        return LatticeConfig(np.array(self.h).reshape(self.shape), self.boundary)

    def verdict(self) -> StabilizabilityVerdict:
        m = self.ledger._m
        stabilized = not self.unstable
        min_m = min(m)
        return StabilizabilityVerdict(
            outcome="stabilized" if stabilized else "active-at-cutoff",
            t_stab=self.t_stab if stabilized else None,
            t_end=self.t, events=self.events,
            min_m=min_m, max_m=max(m), dissipated=self.ledger._diss,
            evidence_strong=(not stabilized) and min_m >= self.min_m_threshold,
            snapshots=list(self.snapshots))


def markov_run(config: LatticeConfig, t_max: float, seed: int | None = None,
               rng: np.random.Generator | None = None,
               snapshot_every: float | None = 1.0,
               max_events: int | None = None, min_m_threshold: int = 10
               ) -> tuple[StabilizabilityVerdict, LatticeConfig, MassLedger]:
    """One-shot Markov toppling run; returns (verdict, final config, ledger)."""
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    eng = MarkovToppling(config, seed=seed, rng=rng, min_m_threshold=min_m_threshold)
    eng.run(t_max=t_max, max_events=max_events, snapshot_every=snapshot_every)
    return eng.verdict(), eng.config(), eng.ledger


def min_m_slope(snapshots) -> float | None:
    """Least-squares slope of min per-site toppling count against time."""
    pts = [(s.t, s.min_m) for s in snapshots]
    if len(pts) < 2:
        return None
    t = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts], dtype=float)
    if np.ptp(t) == 0:
        return None
    return float(np.polyfit(t, y, 1)[0])


# ---------------------------------------------------------------------------
# parallel rounds
# ---------------------------------------------------------------------------

def _shifted(arr: np.ndarray, ax: int, off: int, torus: bool) -> np.ndarray:
    if torus:
        return np.roll(arr, off, axis=ax)
    out = np.zeros_like(arr)
    src = [slice(None)] * arr.ndim
    dst = [slice(None)] * arr.ndim
    if off == 1:
        src[ax] = slice(0, -1)
        dst[ax] = slice(1, None)
    else:
        src[ax] = slice(1, None)
        dst[ax] = slice(0, -1)
    out[tuple(dst)] = arr[tuple(src)]
    return out


def parallel_round(config: LatticeConfig) -> LatticeConfig:
    """Topple every currently unstable site simultaneously (round-start heights).

    Neighbour contributions are paired per axis before the single division by
    2d, so uniform patterns (e.g. checkerboards) are mapped exactly in floating
    point for d <= 2.
    """
    h = config.heights
    unstable = h >= 1.0
    if not unstable.any():
        return config.copy()
    torus = config.boundary == TORUS
    contrib = np.where(unstable, h, 0.0)
    received = None
    for ax in range(config.dim):
        pair = _shifted(contrib, ax, 1, torus) + _shifted(contrib, ax, -1, torus)
        received = pair if received is None else received + pair
    new = np.where(unstable, 0.0, h) + received / (2 * config.dim)
    return LatticeConfig(new, config.boundary)


# ---------------------------------------------------------------------------
# conservation identities
# ---------------------------------------------------------------------------

def _neighbor_sum(arr: np.ndarray, boundary: str) -> np.ndarray:
    torus = boundary == TORUS
    out = np.zeros_like(arr)
    for ax in range(arr.ndim):
        out += _shifted(arr, ax, 1, torus) + _shifted(arr, ax, -1, torus)
    return out


def delta_matrix(shape, boundary: str = TORUS) -> sp.csr_matrix:
    """Toppling matrix: -1 on the diagonal, 1/(2d) for each neighbour bond."""
    shape = tuple(int(s) for s in shape)
    boundary = parse_boundary(boundary)
    neighbors, _ = _neighbor_table(shape, boundary)
    n = int(np.prod(shape))
    d = len(shape)
    rows = []
    cols = []
    vals = []
    w = 1.0 / (2 * d)
    for x, nbs in enumerate(neighbors):
        rows.append(x)
        cols.append(x)
        vals.append(-1.0)
        for y in nbs:
            rows.append(y)
            cols.append(x)
            vals.append(w)
    # entry (y, x): toppling x credits y; duplicate (row, col) pairs sum
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def mass_identity_check(initial: LatticeConfig, current: LatticeConfig,
                        ledger: MassLedger) -> float:
    """Max residual of eta(t) = eta(0) - L + (1/2d) sum_nbr L, both routes.

    Route one evaluates the neighbour sum directly; route two applies the
    explicit toppling matrix.  Returns the worse of the two max residuals.
    """
    if initial.sides != current.sides or initial.boundary != current.boundary:
        raise ValueError("initial and current geometries differ")
    if ledger.shape != initial.sides:
        raise ValueError("ledger geometry does not match the configurations")
    L = ledger.L
    d = initial.dim
    pred = initial.heights - L + _neighbor_sum(L, initial.boundary) / (2 * d)
    r1 = float(np.abs(current.heights - pred).max())
    dl = delta_matrix(initial.sides, initial.boundary) @ L.ravel()
    pred2 = initial.heights.ravel() + dl
    r2 = float(np.abs(current.heights.ravel() - pred2).max())
    return max(r1, r2)


# ---------------------------------------------------------------------------
# internal bonds
# ---------------------------------------------------------------------------

def _region_flat(region, shape) -> set[int]:
    """Region sites as flat indices; accepts a bool mask, coordinate tuples,
    or bare ints (already-flat indices)."""
    shape = tuple(int(s) for s in shape)
    n = int(np.prod(shape))
    if isinstance(region, np.ndarray) and region.dtype == bool:
        if region.shape != shape:
            raise ValueError("region mask shape does not match the lattice")
        return {int(i) for i in np.flatnonzero(region.ravel())}
    flat = set()
    for x in region:
        if isinstance(x, (int, np.integer)):
            i = int(x)
            if not 0 <= i < n:
                raise ValueError(f"flat site index {i} outside lattice of size {n}")
            flat.add(i)
        else:
            flat.add(int(np.ravel_multi_index(tuple(int(c) for c in x), shape)))
    return flat


def count_internal_bonds(region, shape, boundary: str = TORUS) -> int:
    """Number of lattice bonds with both endpoints inside the region."""
    boundary = parse_boundary(boundary)
    flat = _region_flat(region, shape)
    neighbors, _ = _neighbor_table(tuple(int(s) for s in shape), boundary)
    twice = sum(1 for x in flat for y in neighbors[x] if y in flat)
    return twice // 2


@dataclass
class BondBoundReport:
    precondition_met: bool      # every region site toppled at least once
    holds: bool | None          # inequality verdict; None when precondition fails
    region_mass: float
    bound: float
    beta: int


def bond_bound_check(config: LatticeConfig, region, ledger: MassLedger) -> BondBoundReport:
    """Check region mass >= (internal bonds)/(2d) once every region site toppled."""
    if ledger.shape != config.sides:
        raise ValueError("ledger geometry does not match the configuration")
    flat = _region_flat(region, config.sides)
    if not flat:
        raise ValueError("region is empty")
    beta = count_internal_bonds(flat, config.sides, config.boundary)
    h = config.heights.ravel()
    mass = float(sum(h[i] for i in flat))
    bound = beta / (2 * config.dim)
    pre = all(ledger._m[i] >= 1 for i in flat)
    return BondBoundReport(precondition_met=pre,
                           holds=(mass >= bound) if pre else None,
                           region_mass=mass, bound=bound, beta=beta)


# ---------------------------------------------------------------------------
# initial-density generators
# ---------------------------------------------------------------------------

_KIND_ALIASES = {"iid": "iid-uniform", "iid-uniform": "iid-uniform",
                 "constant": "constant", "checkerboard": "checkerboard",
                 "near-full": "near-full", "near_full": "near-full",
                 "nearfull": "near-full"}


def near_full_bands(rho: float, d: int) -> dict:
    """Parameters of the near-full generator at density rho in dimension d.

    The base construction draws iid uniform heights on the symmetric interval
    [1 - 1/(2d), 2 rho - 1 + 1/(2d)], which contains unstable values only for
    rho > 1 - 1/(4d).  For (2d-1)/(2d) < rho <= 1 - 1/(4d) that interval shuts
    out unstable sites entirely, so a two-band mixture is used instead: a thin
    band at the floor 1 - 1/(2d) plus a thin unstable band starting at 1, with
    the mixture weight chosen so the mean is exactly rho.  Every variant keeps
    all heights >= 1 - 1/(2d) and places unstable sites with positive density.
    """
    lo = 1.0 - 1.0 / (2 * d)
    hi = 2.0 * rho - 1.0 + 1.0 / (2 * d)
    if hi > 1.0:
        return {"form": "interval", "low": lo, "high": hi}
    floor_gap = rho - (2 * d - 1) / (2 * d)
    if floor_gap <= 0:
        raise ValueError(
            f"near-full needs rho > {(2 * d - 1) / (2 * d)} in dimension {d}, got {rho}")
    s = min(0.05, floor_gap)
    p = 2 * d * (rho - lo - 0.5 * s)
    if not 0.0 < p <= 1.0:
        raise ValueError(f"near-full band weight out of range for rho={rho}, d={d}")
    return {"form": "two-band", "low": lo, "band_width": s, "p_unstable": p}


@dataclass
class DensitySpec:
    """Initial-measure generator: kind plus target density rho."""

    kind: str
    rho: float

    def __post_init__(self):
        try:
            self.kind = _KIND_ALIASES[str(self.kind).lower()]
        except KeyError:
            raise ValueError(f"unknown generator kind: {self.kind!r}") from None
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")

    def describe(self, d: int | None = None) -> dict:
        out = {"kind": self.kind, "rho": self.rho}
        if self.kind == "near-full" and d is not None:
            out.update(near_full_bands(self.rho, d))
        return out


def generate(spec: DensitySpec, sides, boundary: str = TORUS,
             rng: np.random.Generator | None = None,
             seed: int | None = None) -> LatticeConfig:
    """Draw an initial configuration of the requested density."""
    sides = tuple(int(s) for s in sides)
    boundary = parse_boundary(boundary)
    d = len(sides)
    if rng is None:
        rng = np.random.default_rng(seed)
    rho = spec.rho
    if spec.kind == "constant":
        h = np.full(sides, rho)
    elif spec.kind == "iid-uniform":
        h = rng.uniform(0.0, 2.0 * rho, sides)
    elif spec.kind == "checkerboard":
        if boundary == TORUS and any(s % 2 for s in sides):
            raise ValueError("checkerboard on a torus needs even side lengths")
        parity = int(rng.integers(2))
        grids = np.indices(sides).sum(axis=0)
        h = np.where((grids + parity) % 2 == 0, 2.0 * rho, 0.0)
    elif spec.kind == "near-full":
        bands = near_full_bands(rho, d)
        if bands["form"] == "interval":
            h = rng.uniform(bands["low"], bands["high"], sides)
        else:
            lo = bands["low"]
            s = bands["band_width"]
            pick = rng.random(sides) < bands["p_unstable"]
            h = np.where(pick, rng.uniform(1.0, 1.0 + s, sides),
                         rng.uniform(lo, lo + s, sides))
    else:  # unreachable, kinds normalized in DensitySpec
        raise ValueError(spec.kind)
    return LatticeConfig(h, boundary)


# ---------------------------------------------------------------------------
# stabilizability experiments
# ---------------------------------------------------------------------------

@dataclass
class ExperimentSummary:
    rows: list
    fraction_stabilized: float
    median_t_stab: float
    mean_min_m_slope: float


def _replica_worker(args) -> dict:
    kind, rho, sides, boundary, t_max, entropy, spawn_key, snapshot_every, \
        min_m_threshold, max_events = args
    # identical to np.random.SeedSequence(seed).spawn(k)[i] (nested for sweeps)
    child = np.random.SeedSequence(entropy=entropy, spawn_key=spawn_key)
    rng = np.random.default_rng(child)
    spec = DensitySpec(kind, rho)
    config = generate(spec, sides, boundary, rng=rng)
    total0 = config.total_mass()
    verdict, final, ledger = markov_run(config, t_max=t_max, rng=rng,
                                        snapshot_every=snapshot_every,
                                        max_events=max_events,
                                        min_m_threshold=min_m_threshold)
    residual = mass_identity_check(config, final, ledger)
    drift = abs(final.total_mass() - (total0 - ledger.dissipated))
    return {
        "outcome": verdict.outcome,
        "t_stab": verdict.t_stab,
        "t_end": verdict.t_end,
        "events": verdict.events,
        "min_m": verdict.min_m,
        "max_m": verdict.max_m,
        "dissipated": verdict.dissipated,
        "evidence_strong": verdict.evidence_strong,
        "min_m_slope": min_m_slope(verdict.snapshots),
        "mass_residual": residual,
        "mass_drift": drift,
    }


def stabilizability_experiment(spec: DensitySpec, sides, boundary: str,
                               t_max: float, replicas: int,
                               seed: int | None = None,
                               snapshot_every: float | None = 1.0,
                               min_m_threshold: int = 10,
                               max_events: int | None = None,
                               workers: int = 1,
                               _spawn_prefix: tuple = ()) -> ExperimentSummary:
    """Replicated Markov runs from one density spec; replicas use split seeds."""
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    entropy = np.random.SeedSequence(seed).entropy
    jobs = [(spec.kind, spec.rho, tuple(sides), parse_boundary(boundary), t_max,
             entropy, _spawn_prefix + (i,), snapshot_every, min_m_threshold,
             max_events)
            for i in range(replicas)]
    if workers > 1 and replicas > 1:
        with Pool(workers) as pool:
            rows = pool.map(_replica_worker, jobs)
    else:
        rows = [_replica_worker(j) for j in jobs]
    for i, row in enumerate(rows):
        row["replica"] = i
    stabilized = [r for r in rows if r["outcome"] == "stabilized"]
    frac = len(stabilized) / replicas
    med = float(np.median([r["t_stab"] for r in stabilized])) if stabilized else math.nan
    active_slopes = [r["min_m_slope"] for r in rows
                     if r["outcome"] != "stabilized" and r["min_m_slope"] is not None]
    slope = float(np.mean(active_slopes)) if active_slopes else math.nan
    return ExperimentSummary(rows=rows, fraction_stabilized=frac,
                             median_t_stab=med, mean_min_m_slope=slope)
