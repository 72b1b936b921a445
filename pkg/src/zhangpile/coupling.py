"""Three-phase coupling of two (N,[a,b]) chains.

Two copies of the process are driven so that they become identical after an
almost-surely finite time (a successful coupling, which is what pins down
the stationary distribution and total-variation convergence):

1. independent phase: both chains evolve on their own streams until they sit
   in a boundary-empty-all-full configuration simultaneously, on the same
   side; by reflection symmetry both are then treated as empty at site N.
2. contraction phase: both receive the same site and amount.  The driving
   event is heavy additions aimed at the empty boundary, alternating sides
   after each full-sweep avalanche; after each avalanche the dependence on
   the initial heights shrinks geometrically.
3. merging phase: additions go to site 1 with amounts from a narrow
   schedule; at each avalanche chain B's amount is offset by a correction D_k
   that forces exact equality at one more site.  After N-1 avalanches the
   chains agree everywhere.

Any draw that violates the running phase's requirements sends the coupling
back to phase 1 (the chains keep their current configurations).  In every
phase each chain's marginal stream of (site, amount) pairs is exactly that
of the unconditioned process, so the construction is a genuine coupling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from multiprocessing import Pool

import numpy as np

from .core import DEFAULT_TOPPLE_CAP, InvariantViolation, _relax_leftmost, is_stable
from .seeding import substreams

PHASE_INDEPENDENT = "independent"
PHASE_CONTRACTION = "contraction"
PHASE_MERGING = "merging"
PHASE_MERGED = "merged"

_CHUNK = 8192
_EQ_TOL = 1e-9      # float slack on mathematically exact equalities


# ---------------------------------------------------------------------------
# closed-form constants
# ---------------------------------------------------------------------------

def _validate_abn(a: float, b: float, n: int) -> None:
    if n < 2:
        raise ValueError("coupling constants need n >= 2")
    if not (0.0 <= a < b <= 1.0):
        raise ValueError(f"need 0 <= a < b <= 1, got a={a}, b={b}")


def epsilon_abn(a: float, b: float, n: int) -> float:
    """Merge-phase entry tolerance: (b-a) / (6 + 16 * prod_{l=1}^{n-1} (1 + 2^(n-2-l)))."""
    _validate_abn(a, b, n)
    prod = 1.0
    for l in range(1, n):
        prod *= 1.0 + 2.0 ** (n - 2 - l)
    return (b - a) / (6.0 + 16.0 * prod)


def epsilon_schedule(a: float, b: float, n: int) -> list[float]:
    """eps_1..eps_n with eps_{k+1} = (1 + 2^(n-k-2)) eps_k, eps_1 = epsilon_abn."""
    eps = [epsilon_abn(a, b, n)]
    for k in range(1, n):
        eps.append((1.0 + 2.0 ** (n - k - 2)) * eps[-1])
    return eps


def d_bounds(a: float, b: float, n: int) -> list[float]:
    """Bounds d_1..d_{n-1} on the merge corrections: d_k = 2^(n-k) eps_k."""
    eps = epsilon_schedule(a, b, n)
    return [2.0 ** (n - k) * eps[k - 1] for k in range(1, n)]


def contraction_base(n: int) -> float:
    """Per-avalanche geometric factor 1 - 2^(-ceil(3n/2))."""
    return 1.0 - 2.0 ** (-math.ceil(1.5 * n))


def t_epsilon(a: float, b: float, n: int, eps: float) -> int:
    """Forced-contraction step budget to shrink the max height gap below eps."""
    _validate_abn(a, b, n)
    ratio = 2.0 * eps / n
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"need 0 < 2*eps/n < 1, got {ratio}")
    inner = math.ceil(math.log(ratio) / math.log(contraction_base(n)))
    return 2 * math.ceil(2.0 / (a + b)) * inner


def k_epsilon(n: int, eps: float) -> int:
    """Even number of forced avalanches after which the gap is below eps."""
    ratio = 2.0 * eps / n
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"need 0 < 2*eps/n < 1, got {ratio}")
    return 2 * math.ceil(math.log(ratio) / math.log(contraction_base(n)))


@dataclass(frozen=True)
class CouplingConstants:
    a: float
    b: float
    n: int
    eps1: float
    eps_schedule: list[float]
    t_eps: int
    d_bounds: list[float]


def coupling_constants(a: float, b: float, n: int) -> CouplingConstants:
    eps = epsilon_schedule(a, b, n)
    return CouplingConstants(a=a, b=b, n=n, eps1=eps[0], eps_schedule=eps,
                             t_eps=t_epsilon(a, b, n, eps[0]),
                             d_bounds=d_bounds(a, b, n))


def correction_D(diff, k: int, n: int) -> float:
    """Merge correction D_k = sum_{y=1}^{n-k} 2^(y-1) * diff[y-1].

    ``diff`` holds per-site height differences (chain A minus chain B) from
    site 1 upward; only the first n-k entries enter.
    """
    if not 1 <= k <= n - 1:
        raise ValueError(f"avalanche index k={k} out of range 1..{n - 1}")
    if len(diff) < n - k:
        raise ValueError(f"need at least {n - k} difference entries, got {len(diff)}")
    total = 0.0
    w = 1.0
    for y in range(n - k):
        total += w * float(diff[y])
        w *= 2.0
    return total


def coupled_amount(u_eta: float, D: float, a: float, b: float) -> float:
    """Chain B's addition a + (u_eta + D - a) mod (b-a); uniform in, uniform out."""
    return a + (u_eta + D - a) % (b - a)


# ---------------------------------------------------------------------------
# linear shadow of the contraction dynamics
# ---------------------------------------------------------------------------

class CoefficientTracker:
    """Exact linear bookkeeping of full-sweep avalanches.

    After k avalanches the height vector equals A(k)^T S + B(k)^T eta(0)
    where S collects the per-avalanche boundary addition totals.  The columns
    of ``coef`` are [eta_1..eta_n | S_1..S_k].
    """

    def __init__(self, n: int):
        if n < 2:
            raise ValueError("tracker needs n >= 2")
        self.n = n
        self.coef = np.eye(n)

    @property
    def n_avalanches(self) -> int:
        return self.coef.shape[1] - self.n

    @property
    def B(self) -> np.ndarray:
        return self.coef[:, :self.n].copy()

    @property
    def A(self) -> np.ndarray:
        return self.coef[:, self.n:].T.copy()

    @property
    def max_b(self) -> float:
        return float(np.abs(self.coef[:, :self.n]).max())

    def apply_avalanche(self, side: str) -> None:
        """Compose one full sweep: side 'N' sweeps N->1, side '1' sweeps 1->N."""
        n = self.n
        m = np.hstack([self.coef, np.zeros((n, 1))])
        h = np.empty_like(m)
        new = np.zeros_like(m)
        if side == "N":
            h[n - 1] = m[n - 1]
            h[n - 1, -1] += 1.0
            for j in range(n - 2, -1, -1):
                h[j] = m[j] + 0.5 * h[j + 1]
            for j in range(1, n):
                new[j] = 0.5 * h[j - 1]
        elif side == "1":
            h[0] = m[0]
            h[0, -1] += 1.0
            for j in range(1, n):
                h[j] = m[j] + 0.5 * h[j - 1]
            for j in range(n - 1):
                new[j] = 0.5 * h[j + 1]
        else:
            raise ValueError(f"side must be 'N' or '1', got {side!r}")
        self.coef = new

    def predict(self, eta0, s_values) -> np.ndarray:
        if len(s_values) != self.n_avalanches:
            raise ValueError("need one S value per tracked avalanche")
        vec = np.concatenate([np.asarray(eta0, dtype=float),
                              np.asarray(s_values, dtype=float)])
        return self.coef @ vec


# ---------------------------------------------------------------------------
# the coupling engine
# ---------------------------------------------------------------------------

def _e_class_0(h: list) -> int | None:
    """0-based empty site if the list is in some E_x, else None."""
    empty = -1
    for i, v in enumerate(h):
        if v == 0.0:
            if empty >= 0:
                return None
            empty = i
        elif not 0.5 <= v < 1.0:
            return None
    return empty if empty >= 0 else None


def _eb_side(h: list) -> int | None:
    """0-based empty boundary site if the list is in E_b, else None."""
    e = _e_class_0(h)
    if e is None or (e != 0 and e != len(h) - 1):
        return None
    return e


@dataclass
class CouplingResult:
    seed: int | None
    merged: bool
    merge_time: int | None
    restarts: int
    phase_times: list[int]      # steps spent in [independent, contraction, merging]
    steps: int
    final_merging_steps: int | None = None   # length of the successful merge attempt
    post_merge_identical: bool | None = None

    def to_record(self) -> dict:
        return {"seed": self.seed, "merged": self.merged,
                "merge_time": self.merge_time, "restarts": self.restarts,
                "phase_times": self.phase_times}


class Coupling:
    """Coupled pair of (N,[a,b]) chains plus the three-phase bookkeeping."""

    def __init__(self, eta_a, eta_b, a: float, b: float, seed: int | None = None,
                 record_streams: bool = False, cap: int = DEFAULT_TOPPLE_CAP,
                 _streams=None):
        eta_a = [float(v) for v in eta_a]
        eta_b = [float(v) for v in eta_b]
        n = len(eta_a)
        if len(eta_b) != n:
            raise ValueError("the two configurations must have equal length")
        _validate_abn(a, b, n)
        if not (is_stable(eta_a) and is_stable(eta_b)):
            raise ValueError("both initial configurations must be stable")
        self.n = n
        self.a = a
        self.b = b
        self.cap = cap
        self.hA = eta_a
        self.hB = eta_b
        if _streams is not None:
            self._gA, self._gB, self._gC = _streams
        else:
            # children 0 and 1 are reserved for initial-configuration draws
            # (see coupling_sweep) so seed layouts match across entry points
            self._gA, self._gB, self._gC = substreams(seed, 5)[2:]
        # per-stream prefetch buffers: (sites, amounts, position)
        self._sitesA: list = []
        self._amtsA: list = []
        self._posA = 0
        self._sitesB: list = []
        self._amtsB: list = []
        self._posB = 0
        self._sitesC: list = []
        self._amtsC: list = []
        self._posC = 0
        consts = coupling_constants(a, b, n)
        self.constants = consts
        self.eps1 = consts.eps1
        self._half = 0.5 * (a + b)
        self._a2 = self._half
        self.t = 0
        self.restarts = 0
        self.merge_time: int | None = None
        self.phase_steps = {PHASE_INDEPENDENT: 0, PHASE_CONTRACTION: 0,
                            PHASE_MERGING: 0, PHASE_MERGED: 0}
        self.flip = False
        self.final_merging_steps: int | None = None
        self.record_streams = record_streams
        self.streamA: list[tuple[int, float]] = []
        self.streamB: list[tuple[int, float]] = []
        self._ebA = _eb_side(self.hA)
        self._ebB = _eb_side(self.hB)
        if self.hA == self.hB:
            self.phase = PHASE_MERGED
            self.merge_time = 0
        else:
            self.phase = PHASE_INDEPENDENT
            self._maybe_enter_coupled()

    # -- draws ------------------------------------------------------------

    def _draw_a(self) -> tuple[int, float]:
        i = self._posA
        if i >= len(self._sitesA):
            self._sitesA = self._gA.integers(0, self.n, _CHUNK).tolist()
            self._amtsA = self._gA.uniform(self.a, self.b, _CHUNK).tolist()
            i = 0
        self._posA = i + 1
        return self._sitesA[i], self._amtsA[i]

    def _draw_b(self) -> tuple[int, float]:
        i = self._posB
        if i >= len(self._sitesB):
            self._sitesB = self._gB.integers(0, self.n, _CHUNK).tolist()
            self._amtsB = self._gB.uniform(self.a, self.b, _CHUNK).tolist()
            i = 0
        self._posB = i + 1
        return self._sitesB[i], self._amtsB[i]

    def _draw_c(self) -> tuple[int, float]:
        i = self._posC
        if i >= len(self._sitesC):
            self._sitesC = self._gC.integers(0, self.n, _CHUNK).tolist()
            self._amtsC = self._gC.uniform(self.a, self.b, _CHUNK).tolist()
            i = 0
        self._posC = i + 1
        return self._sitesC[i], self._amtsC[i]

    # -- geometry helpers ---------------------------------------------------

    def _phys(self, s: int) -> int:
        """Physical 0-based index of 1-based logical site s."""
        return self.n - s if self.flip else s - 1

    def _apply(self, h: list, x: int, u: float) -> int:
        h[x] += u
        if h[x] >= 1.0:
            return _relax_leftmost(h, x, self.cap)
        return 0

    def _maxdiff(self) -> float:
        hA = self.hA
        hB = self.hB
        return max(abs(hA[i] - hB[i]) for i in range(self.n))

    # -- phase transitions ----------------------------------------------------

    def _maybe_enter_coupled(self) -> None:
        if self._ebA is not None and self._ebA == self._ebB:
            # shared frame flip so the empty boundary reads as logical site N
            self.flip = self._ebA == 0
            if self._maxdiff() < self.eps1:
                self._enter_merging()
            else:
                self.phase = PHASE_CONTRACTION
                self._k_aval = 0
                self._targetL = self.n

    def _enter_merging(self) -> None:
        self.phase = PHASE_MERGING
        self._mk = 1
        self._merging_steps = 0
        self._stage_init()

    def _stage_init(self) -> None:
        k = self._mk
        n = self.n
        eps_k = self.constants.eps_schedule[k - 1]
        a2 = self._a2
        ap = a2 + 3.0 * eps_k
        if not (ap < self.b and a2 + 2.0 * eps_k <= self.b):
            raise InvariantViolation("merge-phase addition intervals are ill-formed")
        self._between_hi = a2 + 2.0 * eps_k
        q = 0.25 * (self.b - ap)
        self._av_lo = ap + q
        self._av_hi = self.b - q
        self._thresh = 1.0 - a2 - 2.0 * eps_k
        diff = [self.hA[self._phys(y)] - self.hB[self._phys(y)] for y in range(1, n - k + 1)]
        D = correction_D(diff, k, n)
        dk = self.constants.d_bounds[k - 1]
        if abs(D) > dk + _EQ_TOL:
            raise InvariantViolation(f"|D_{k}|={abs(D):.3e} exceeds its bound {dk:.3e}")
        self._Dk = D

    def _restart(self, x: int, u: float, applied: bool = False) -> None:
        # a draw broke the running phase's requirements: both chains still
        # take the (equal) step, then everything returns to phase 1
        if not applied:
            self._apply(self.hA, x, u)
            self._apply(self.hB, x, u)
            if self.record_streams:
                self.streamA.append((x, u))
                self.streamB.append((x, u))
        self._ebA = _eb_side(self.hA)
        self._ebB = _eb_side(self.hB)
        self.restarts += 1
        self.phase = PHASE_INDEPENDENT
        self._maybe_enter_coupled()

    # -- stepping ------------------------------------------------------------

    def step(self) -> None:
        """Advance the coupled pair by one time step."""
        phase = self.phase
        if phase == PHASE_INDEPENDENT:
            self._step_independent()
        elif phase == PHASE_CONTRACTION:
            self._step_contraction()
        elif phase == PHASE_MERGING:
            self._step_merging()
        else:
            self._step_merged()
        self.phase_steps[phase] += 1
        self.t += 1
        if self.phase == PHASE_MERGED and self.merge_time is None:
            self.merge_time = self.t

    def _step_independent(self) -> None:
        xA, uA = self._draw_a()
        if self._apply(self.hA, xA, uA):
            self._ebA = _eb_side(self.hA)
        elif xA == self._ebA:
            self._ebA = None
        xB, uB = self._draw_b()
        if self._apply(self.hB, xB, uB):
            self._ebB = _eb_side(self.hB)
        elif xB == self._ebB:
            self._ebB = None
        if self.record_streams:
            self.streamA.append((xA, uA))
            self.streamB.append((xB, uB))
        self._maybe_enter_coupled()

    def _step_contraction(self) -> None:
        x, u = self._draw_c()
        if x != self._phys(self._targetL) or u < self._half:
            self._restart(x, u)
            return
        nA = self._apply(self.hA, x, u)
        nB = self._apply(self.hB, x, u)
        if self.record_streams:
            self.streamA.append((x, u))
            self.streamB.append((x, u))
        if (nA > 0) != (nB > 0):
            raise InvariantViolation("contraction avalanches desynchronized")
        if nA:
            self._k_aval += 1
            self._targetL = 1 if self._targetL == self.n else self.n
            if self._k_aval % 2 == 0:
                # after an even number of full sweeps both sit in logical E_N
                pN = self._phys(self.n)
                if _e_class_0(self.hA) != pN or _e_class_0(self.hB) != pN:
                    raise InvariantViolation("contraction avalanche did not land in E_N")
                if self._maxdiff() < self.eps1:
                    self._enter_merging()

    def _step_merging(self) -> None:
        x, u = self._draw_c()
        self._merging_steps += 1
        p1 = self._phys(1)
        leader = max(self.hA[p1], self.hB[p1])
        if leader > self._thresh:
            # this draw must trigger avalanche number _mk in both chains
            if x != p1 or not self._av_lo <= u <= self._av_hi:
                self._restart(x, u)
                return
            uB = coupled_amount(u, self._Dk, self.a, self.b)
            nA = self._apply(self.hA, x, u)
            nB = self._apply(self.hB, x, uB)
            if self.record_streams:
                self.streamA.append((x, u))
                self.streamB.append((x, uB))
            if nA == 0 or nB == 0:
                raise InvariantViolation("scheduled merge avalanche failed to fire")
            k = self._mk
            if k > self.n - 1:
                raise InvariantViolation("merge avalanche count exceeded n-1")
            for s in range(self.n - k + 1, self.n + 1):
                p = self._phys(s)
                if abs(self.hA[p] - self.hB[p]) > _EQ_TOL:
                    raise InvariantViolation(
                        f"merge avalanche {k} left site {s} unequal")
            self._mk += 1
            if self._mk > self.n - 1:
                if self._maxdiff() > _EQ_TOL:
                    raise InvariantViolation("merge completed with unequal configurations")
                # mathematically exact equality; drop the float dust so the
                # merged pair is bitwise identical from here on
                self.hB = self.hA.copy()
                self.final_merging_steps = self._merging_steps
                self.phase = PHASE_MERGED
            else:
                self._stage_init()
        else:
            if x != p1 or not self._a2 <= u <= self._between_hi:
                self._restart(x, u)
                return
            nA = self._apply(self.hA, x, u)
            nB = self._apply(self.hB, x, u)
            if self.record_streams:
                self.streamA.append((x, u))
                self.streamB.append((x, u))
            if nA or nB:
                # sub-threshold addition toppled (exact-boundary edge); retry
                self._restart(x, u, applied=True)

    def _step_merged(self) -> None:
        x, u = self._draw_c()
        self._apply(self.hA, x, u)
        self._apply(self.hB, x, u)
        if self.record_streams:
            self.streamA.append((x, u))
            self.streamB.append((x, u))

    # -- driving ---------------------------------------------------------------

    def run(self, max_steps: int) -> None:
        """Step until merged or ``max_steps`` total steps."""
        while self.t < max_steps and self.phase != PHASE_MERGED:
            if self.phase == PHASE_INDEPENDENT and not self.record_streams:
                self._run_independent_fast(max_steps)
            else:
                self.step()

    def _run_independent_fast(self, max_steps: int) -> None:
        # hot loop: the independent phase dominates every run, so buffers and
        # state live in locals; fall back to step() on any phase change
        hA = self.hA
        hB = self.hB
        n = self.n
        a = self.a
        b = self.b
        cap = self.cap
        gA = self._gA
        gB = self._gB
        sitesA, amtsA, pA = self._sitesA, self._amtsA, self._posA
        sitesB, amtsB, pB = self._sitesB, self._amtsB, self._posB
        lenA = len(sitesA)
        lenB = len(sitesB)
        ebA = self._ebA
        ebB = self._ebB
        steps = 0
        budget = max_steps - self.t
        relax = _relax_leftmost
        eb_side = _eb_side
        while steps < budget:
            if pA >= lenA:
                sitesA = gA.integers(0, n, _CHUNK).tolist()
                amtsA = gA.uniform(a, b, _CHUNK).tolist()
                pA = 0
                lenA = _CHUNK
            xA = sitesA[pA]
            v = hA[xA] + amtsA[pA]
            pA += 1
            hA[xA] = v
            if v >= 1.0:
                relax(hA, xA, cap)
                ebA = eb_side(hA)
            elif xA == ebA:
                ebA = None
            if pB >= lenB:
                sitesB = gB.integers(0, n, _CHUNK).tolist()
                amtsB = gB.uniform(a, b, _CHUNK).tolist()
                pB = 0
                lenB = _CHUNK
            xB = sitesB[pB]
            v = hB[xB] + amtsB[pB]
            pB += 1
            hB[xB] = v
            if v >= 1.0:
                relax(hB, xB, cap)
                ebB = eb_side(hB)
            elif xB == ebB:
                ebB = None
            steps += 1
            if ebA is not None and ebA == ebB:
                break
        self._sitesA, self._amtsA, self._posA = sitesA, amtsA, pA
        self._sitesB, self._amtsB, self._posB = sitesB, amtsB, pB
        self.t += steps
        self.phase_steps[PHASE_INDEPENDENT] += steps
        self._ebA = ebA
        self._ebB = ebB
        self._maybe_enter_coupled()

    def run_steps(self, steps: int, require_equal: bool = False) -> bool:
        """Advance a fixed number of steps; optionally assert A == B throughout."""
        ok = True
        for _ in range(steps):
            self.step()
            if require_equal and self.hA != self.hB:
                ok = False
        return ok

    def result(self, seed: int | None = None,
               post_merge_identical: bool | None = None) -> CouplingResult:
        return CouplingResult(
            seed=seed,
            merged=self.phase == PHASE_MERGED,
            merge_time=self.merge_time,
            restarts=self.restarts,
            phase_times=[self.phase_steps[PHASE_INDEPENDENT],
                         self.phase_steps[PHASE_CONTRACTION],
                         self.phase_steps[PHASE_MERGING]],
            steps=self.t,
            final_merging_steps=self.final_merging_steps,
            post_merge_identical=post_merge_identical,
        )


def run_coupling(eta_a, eta_b, a: float, b: float, seed: int | None = None,
                 max_steps: int = 1_000_000) -> CouplingResult:
    """Couple two stable configurations until merged or cut off."""
    c = Coupling(eta_a, eta_b, a, b, seed=seed)
    c.run(max_steps)
    return c.result(seed)


# ---------------------------------------------------------------------------
# seed sweeps
# ---------------------------------------------------------------------------

def _init_config(mode, n: int, gen: np.random.Generator) -> list:
    if isinstance(mode, str):
        if mode == "zeros":
            return [0.0] * n
        if mode == "random":
            return gen.uniform(0.0, 1.0, n).tolist()
        raise ValueError(f"unknown init mode {mode!r}")
    vals = [float(v) for v in mode]
    if len(vals) != n:
        raise ValueError(f"literal init has length {len(vals)}, expected {n}")
    return vals


def _sweep_one(args) -> CouplingResult:
    n, a, b, seed, max_steps, init_a, init_b, cap, post_merge_steps = args
    gens = substreams(seed, 5)
    eta_a = _init_config(init_a, n, gens[0])
    eta_b = _init_config(init_b, n, gens[1])
    c = Coupling(eta_a, eta_b, a, b, cap=cap, _streams=gens[2:])
    c.run(max_steps)
    post_ok = None
    if post_merge_steps and c.phase == PHASE_MERGED:
        post_ok = c.run_steps(post_merge_steps, require_equal=True)
    return c.result(seed, post_merge_identical=post_ok)


def coupling_sweep(n: int, a: float, b: float, seeds, max_steps: int,
                   init_a="random", init_b="random", workers: int = 1,
                   cap: int = DEFAULT_TOPPLE_CAP,
                   post_merge_steps: int = 0) -> list[CouplingResult]:
    """One coupling run per seed; results in seed order regardless of workers.

    With ``post_merge_steps`` > 0, merged pairs are driven that many further
    steps while checking that they stay identical.
    """
    jobs = [(n, a, b, int(s), max_steps, init_a, init_b, cap, post_merge_steps)
            for s in seeds]
    if workers > 1 and len(jobs) > 1:
        with Pool(workers) as pool:
            return pool.map(_sweep_one, jobs, chunksize=max(1, len(jobs) // (4 * workers)))
    return [_sweep_one(j) for j in jobs]


# ---------------------------------------------------------------------------
# forced-contraction verification
# ---------------------------------------------------------------------------

@dataclass
class ContractionReport:
    n: int
    k_max: int
    base: float
    max_residual: float
    max_b_per_avalanche: list[float]
    b_bounds: list[float]
    max_diff_per_avalanche: list[float]
    diff_bounds: list[float]
    max_gap_steps: int
    gap_bound: int
    ok: bool


def verify_contraction(n: int, k_max: int, rng: np.random.Generator,
                       a: float = 0.0, b: float = 1.0,
                       tol: float = 1e-9) -> ContractionReport:
    """Run the forced contraction dynamics against the linear shadow.

    Two random boundary-empty-all-full chains receive identical heavy
    additions aimed at the empty boundary.  At every avalanche the tracked
    coefficient matrix must obey the geometric bound and reproduce the
    simulated heights to ``tol``; the height gap must obey the matching
    (n/2) * base^k bound.  Violations raise, since they falsify either the
    implementation or the bookkeeping.
    """
    if n < 2:
        raise ValueError("verify_contraction needs n >= 2")
    _validate_abn(a, b, n)
    base = contraction_base(n)
    half = 0.5 * (a + b)
    eta_a0 = rng.uniform(0.5, 1.0, n)
    eta_b0 = rng.uniform(0.5, 1.0, n)
    eta_a0[n - 1] = 0.0
    eta_b0[n - 1] = 0.0
    hA = eta_a0.tolist()
    hB = eta_b0.tolist()
    tracker = CoefficientTracker(n)
    s_values: list[float] = []
    side = "N"
    max_resid = 0.0
    max_gap = 0
    gap_bound = math.ceil(2.0 / (a + b))
    max_bs, b_bnds, max_diffs, diff_bnds = [], [], [], []
    for k in range(1, k_max + 1):
        target = n - 1 if side == "N" else 0
        adds = 0
        while hA[target] < 1.0:
            u = float(rng.uniform(half, b))
            hA[target] += u
            hB[target] += u
            adds += 1
        max_gap = max(max_gap, adds)
        if adds > gap_bound:
            raise InvariantViolation(
                f"avalanche {k} needed {adds} heavy additions (> {gap_bound})")
        s_k = hA[target]
        if hB[target] != s_k:
            raise InvariantViolation("boundary accumulations diverged")
        nA = _relax_leftmost(hA, target)
        nB = _relax_leftmost(hB, target)
        if nA != n or nB != n:
            raise InvariantViolation("contraction avalanche was not a full sweep")
        tracker.apply_avalanche(side)
        s_values.append(s_k)
        for h, eta0 in ((hA, eta_a0), (hB, eta_b0)):
            resid = float(np.abs(np.array(h) - tracker.predict(eta0, s_values)).max())
            max_resid = max(max_resid, resid)
            if resid > tol:
                raise InvariantViolation(
                    f"linear shadow residual {resid:.3e} > {tol} at avalanche {k}")
        bound = base ** k
        max_bs.append(tracker.max_b)
        b_bnds.append(bound)
        if tracker.max_b > bound + 1e-12:
            raise InvariantViolation(
                f"B entry {tracker.max_b:.6f} exceeds bound {bound:.6f} at avalanche {k}")
        diff = max(abs(x - y) for x, y in zip(hA, hB))
        dbound = 0.5 * n * bound
        max_diffs.append(diff)
        diff_bnds.append(dbound)
        if diff > dbound + tol:
            raise InvariantViolation(
                f"height gap {diff:.6f} exceeds bound {dbound:.6f} at avalanche {k}")
        side = "1" if side == "N" else "N"
    return ContractionReport(n=n, k_max=k_max, base=base, max_residual=max_resid,
                             max_b_per_avalanche=max_bs, b_bounds=b_bnds,
                             max_diff_per_avalanche=max_diffs, diff_bounds=diff_bnds,
                             max_gap_steps=max_gap, gap_bound=gap_bound, ok=True)
