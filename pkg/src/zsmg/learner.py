"""Stage-based optimistic/pessimistic Nash Q-learning with min-gap
reference-advantage decomposition, and a Hoeffding-only baseline.

Indexing follows :mod:`zsmg.game`: steps are 0-based, so a step ``h``
here has horizon-to-go ``H - h`` and that is the initial optimistic value.
Value tables carry an extra row ``h = H`` that is identically zero; the
reference tables keep their initial values there (``H`` and ``0``).
"""

from __future__ import annotations

import bisect
import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import rng as rng_mod
from .exact import ExactSolution
from .game import ContractViolation, MarkovGame
from .lp import cce_solve
from .rng import SeededRng

FULL = "full"
BASELINE = "baseline"
SANDWICH_TOL = 1e-9


class InvariantViolation(AssertionError):
    pass


@dataclass
class Hyperparams:
    delta: float = 0.01
    iota: float | None = None
    iota_mode: str = "delta"  # "delta": log(2/delta); "union": log(2 S A B K H / delta)
    beta: float | None = None
    beta_mode: str = "sqrt"  # "sqrt": 1/sqrt(H); "linear": 1/H
    N0: int | None = None
    n0_mode: str = "explicit"  # or "theory"
    c1: float = 2.0
    c2: float = 2.0
    c3: float = 5.0
    c4: float = 1.0
    clamp: bool = True
    cce_objective: str = "max_gap"

    def validate(self) -> None:
        if not 0 < self.delta < 1:
            raise ContractViolation(f"delta must lie in (0, 1), got {self.delta}")
        for name in ("c1", "c2", "c3", "c4"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")
        if self.iota is not None and self.iota <= 0:
            raise ContractViolation("iota must be positive")
        if self.beta is not None and self.beta <= 0:
            raise ContractViolation("beta must be positive")
        if self.iota_mode not in ("delta", "union"):
            raise ContractViolation(f"unknown iota_mode {self.iota_mode!r}")
        if self.beta_mode not in ("sqrt", "linear"):
            raise ContractViolation(f"unknown beta_mode {self.beta_mode!r}")
        if self.n0_mode not in ("explicit", "theory"):
            raise ContractViolation(f"unknown n0_mode {self.n0_mode!r}")
        if self.N0 is not None and (int(self.N0) != self.N0 or self.N0 < 1):
            raise ContractViolation("N0 must be a positive integer")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Resolved:
    """Numeric constants a run actually uses."""

    iota: float
    beta: float
    N0: int
    c1: float
    c2: float
    c3: float
    clamp: bool
    cce_objective: str


def resolve(hp: Hyperparams, game: MarkovGame, K: int | None = None) -> Resolved:
    hp.validate()
    H, S, A, B = game.H, game.S, game.A, game.B
    if hp.iota is not None:
        iota = float(hp.iota)
    elif hp.iota_mode == "union":
        iota = math.log(2 * S * A * B * max(K or 1, 1) * H / hp.delta)
    else:
        iota = math.log(2 / hp.delta)
    if hp.beta is not None:
        beta = float(hp.beta)
    else:
        beta = 1 / math.sqrt(H) if hp.beta_mode == "sqrt" else 1 / H
    if hp.n0_mode == "theory":
        N0 = math.ceil(hp.c4 * S * A * B * H ** 5 * iota / beta ** 2)
    else:
        N0 = int(hp.N0) if hp.N0 is not None else 20 * A * B * H
    return Resolved(iota, beta, N0, hp.c1, hp.c2, hp.c3, hp.clamp, hp.cce_objective)


class StageSchedule:
    """Stage lengths ``e_1 = H``, ``e_{i+1} = floor((1 + 1/H) e_i)`` and their
    running sums, extended on demand."""

    def __init__(self, H: int):
        if H < 1:
            raise ContractViolation("H must be >= 1")
        self.H = H
        self.lengths = [H]
        self.ends = [H]
        self._end_set = {H}

    def _extend_to(self, n: int) -> None:
        while self.ends[-1] < n:
            e = self.lengths[-1]
            e = e + e // self.H  # exact floor((1 + 1/H) * e) for integers
            self.lengths.append(e)
            self.ends.append(self.ends[-1] + e)
            self._end_set.add(self.ends[-1])

    def is_stage_end(self, n: int) -> bool:
        if n < 1:
            return False
        if n > self.ends[-1]:
            self._extend_to(n)
        return n in self._end_set

    def last_end(self, n: int) -> int:
        """Largest stage end ``<= n`` (0 if the first stage is still open)."""
        self._extend_to(n)
        i = bisect.bisect_right(self.ends, n)
        return self.ends[i - 1] if i else 0

    def prev_end(self, end: int) -> int:
        """Stage end immediately before ``end`` (0 for the first)."""
        i = self.ends.index(end)
        return self.ends[i - 1] if i else 0

    def prefix(self, upto: int) -> list[int]:
        self._extend_to(upto)
        return [x for x in self.ends if x <= upto]


@dataclass
class LearnerState:
    H: int
    S: int
    A: int
    B: int
    params: Resolved
    variant: str
    Qbar: np.ndarray
    Qlow: np.ndarray
    N: np.ndarray
    Ncheck: np.ndarray
    vbar_c: np.ndarray
    vlow_c: np.ndarray
    mubar_c: np.ndarray
    mulow_c: np.ndarray
    sigbar_c: np.ndarray
    siglow_c: np.ndarray
    muref_bar: np.ndarray
    muref_low: np.ndarray
    sigref_bar: np.ndarray
    sigref_low: np.ndarray
    Vbar: np.ndarray  # (H + 1, S)
    Vlow: np.ndarray
    Vref_bar: np.ndarray
    Vref_low: np.ndarray
    min_gap: np.ndarray  # (H, S)
    Vt_bar: np.ndarray
    Vt_low: np.ndarray
    ref_done: np.ndarray
    state_visits: np.ndarray
    pi: np.ndarray  # (H, S, A, B)
    schedule: StageSchedule
    episode: int = 0  # episodes completed

    def snapshot(self) -> dict:
        out = {}
        for name in (
            "Qbar", "Qlow", "N", "Ncheck", "Vbar", "Vlow", "Vref_bar", "Vref_low",
            "min_gap", "Vt_bar", "Vt_low", "ref_done", "state_visits", "pi",
        ):
            out[name] = getattr(self, name)
        return out


def init_learner(game: MarkovGame, hp: Hyperparams, K: int | None = None, variant: str = FULL) -> LearnerState:
    H, S, A, B = game.H, game.S, game.A, game.B
    params = resolve(hp, game, K)
    togo = (H - np.arange(H)).astype(np.float64)  # H - h + 1 in 1-based steps
    shape = (H, S, A, B)
    z = lambda: np.zeros(shape)  # noqa: E731
    Vbar = np.zeros((H + 1, S))
    Vbar[:H] = togo[:, None]
    return LearnerState(
        H, S, A, B, params, variant,
        Qbar=np.broadcast_to(togo[:, None, None, None], shape).copy(),
        Qlow=z(),
        N=np.zeros(shape, dtype=np.int64),
        Ncheck=np.zeros(shape, dtype=np.int64),
        vbar_c=z(), vlow_c=z(), mubar_c=z(), mulow_c=z(), sigbar_c=z(), siglow_c=z(),
        muref_bar=z(), muref_low=z(), sigref_bar=z(), sigref_low=z(),
        Vbar=Vbar,
        Vlow=np.zeros((H + 1, S)),
        Vref_bar=np.full((H + 1, S), float(H)),
        Vref_low=np.zeros((H + 1, S)),
        min_gap=np.full((H, S), float(H)),
        Vt_bar=np.full((H, S), float(H)),
        Vt_low=np.zeros((H, S)),
        ref_done=np.zeros((H, S), dtype=bool),
        state_visits=np.zeros((H, S), dtype=np.int64),
        pi=np.full((H, S, A, B), 1.0 / (A * B)),
        schedule=StageSchedule(H),
    )


def _check_index(st: LearnerState, h, s, a=0, b=0, s_next=0) -> None:
    if not (0 <= h < st.H and 0 <= s < st.S and 0 <= a < st.A and 0 <= b < st.B and 0 <= s_next < st.S):
        raise ContractViolation(f"index out of range: h={h} s={s} a={a} b={b} s'={s_next}")


def observe_transition(st: LearnerState, h: int, s: int, a: int, b: int, r: float, s_next: int) -> None:
    """Count the visit and add the next-state values to all accumulators."""
    _check_index(st, h, s, a, b, s_next)
    i = (h, s, a, b)
    st.N[i] += 1
    st.Ncheck[i] += 1
    st.state_visits[h, s] += 1
    vb = st.Vbar[h + 1, s_next]
    vl = st.Vlow[h + 1, s_next]
    rb = st.Vref_bar[h + 1, s_next]
    rl = st.Vref_low[h + 1, s_next]
    st.vbar_c[i] += vb
    st.vlow_c[i] += vl
    st.mubar_c[i] += vb - rb
    st.mulow_c[i] += vl - rl
    st.sigbar_c[i] += (vb - rb) ** 2
    st.siglow_c[i] += (vl - rl) ** 2
    st.muref_bar[i] += rb
    st.muref_low[i] += rl
    st.sigref_bar[i] += rb * rb
    st.sigref_low[i] += rl * rl


def bonus_terms(H, iota, c1, c2, c3, n, nc, sig_ref, mu_ref, sig_c, mu_c) -> float:
    """One advantage bonus from raw accumulator sums."""
    nu_ref = max(sig_ref / n - (mu_ref / n) ** 2, 0.0)
    nu_c = max(sig_c / nc - (mu_c / nc) ** 2, 0.0)
    i34 = iota ** 0.75
    return (
        c1 * math.sqrt(nu_ref * iota / n)
        + c2 * math.sqrt(nu_c * iota / nc)
        + c3 * (H * iota / n + H * iota / nc + H * i34 / n ** 0.75 + H * i34 / nc ** 0.75)
    )


def compute_bonuses(st: LearnerState, h: int, s: int, a: int, b: int, hp: Resolved | None = None):
    """Return ``(gamma, beta_bar, beta_low)`` for the tuple's current accumulators."""
    p = hp or st.params
    i = (h, s, a, b)
    n = int(st.N[i])
    nc = int(st.Ncheck[i])
    if nc < 1 or n < 1:
        raise ContractViolation(f"bonuses need at least one visit in the current stage at {i}")
    H = st.H
    gamma = 2.0 * math.sqrt(H * H * p.iota / nc)
    bb = bonus_terms(H, p.iota, p.c1, p.c2, p.c3, n, nc,
                     st.sigref_bar[i], st.muref_bar[i], st.sigbar_c[i], st.mubar_c[i])
    bl = bonus_terms(H, p.iota, p.c1, p.c2, p.c3, n, nc,
                     st.sigref_low[i], st.muref_low[i], st.siglow_c[i], st.mulow_c[i])
    return gamma, bb, bl


@dataclass
class StageEvent:
    k: int
    h: int
    s: int
    a: int
    b: int
    n: int
    n_check: int
    qbar_before: float
    qbar_after: float
    qlow_before: float
    qlow_after: float
    vbar: float
    vlow: float
    min_gap_after: float


def stage_update(
    st: LearnerState,
    h: int,
    s: int,
    a: int,
    b: int,
    r: float,
    hp: Resolved | None = None,
    cce: Callable | None = None,
    k: int = 0,
) -> StageEvent:
    """End-of-stage update of one tuple, the CCE policy at (h, s), and the min-gap pair."""
    p = hp or st.params
    i = (h, s, a, b)
    n = int(st.N[i])
    nc = int(st.Ncheck[i])
    gamma, bb, bl = compute_bonuses(st, h, s, a, b, p)
    qbar_old = float(st.Qbar[i])
    qlow_old = float(st.Qlow[i])
    qb = r + st.vbar_c[i] / nc + gamma
    ql = r + st.vlow_c[i] / nc - gamma
    if st.variant == FULL:
        qb = min(qb, r + st.muref_bar[i] / n + st.mubar_c[i] / nc + bb)
        ql = max(ql, r + st.muref_low[i] / n + st.mulow_c[i] / nc - bl)
    qb = min(qb, qbar_old)
    ql = max(ql, qlow_old)
    if p.clamp:
        top = float(st.H - h)
        qb = min(max(qb, 0.0), top)
        ql = min(max(ql, 0.0), top)
    st.Qbar[i] = qb
    st.Qlow[i] = ql

    solver = cce or (lambda qbar, qlow: cce_solve(qbar, qlow, p.cce_objective))
    try:
        pi = solver(st.Qbar[h, s], st.Qlow[h, s])
    except Exception as exc:
        raise type(exc)(f"CCE failed at h={h} s={s}: {exc}") from exc
    st.pi[h, s] = pi
    vbar = float((pi * st.Qbar[h, s]).sum())
    vlow = float((pi * st.Qlow[h, s]).sum())
    if p.clamp:
        # rounding in the expectation can push a hair outside [0, H - h]
        vbar = min(max(vbar, 0.0), float(st.H - h))
        vlow = min(max(vlow, 0.0), float(st.H - h))
    st.Vbar[h, s] = vbar
    st.Vlow[h, s] = vlow

    for arr in (st.vbar_c, st.vlow_c, st.mubar_c, st.mulow_c, st.sigbar_c, st.siglow_c):
        arr[i] = 0.0
    st.Ncheck[i] = 0

    if vbar - vlow < st.min_gap[h, s]:
        st.min_gap[h, s] = vbar - vlow
        st.Vt_bar[h, s] = vbar
        st.Vt_low[h, s] = vlow
    return StageEvent(k, h, s, a, b, n, nc, qbar_old, qb, qlow_old, ql, vbar, vlow, float(st.min_gap[h, s]))


def maybe_update_reference(st: LearnerState, h: int, s: int, hp: Resolved | None = None) -> bool:
    """Latch the min-gap pair into the reference once (h, s) has N0 visits."""
    p = hp or st.params
    if st.variant != FULL or st.ref_done[h, s] or st.state_visits[h, s] < p.N0:
        return False
    st.Vref_bar[h, s] = st.Vt_bar[h, s]
    st.Vref_low[h, s] = st.Vt_low[h, s]
    st.ref_done[h, s] = True
    return True


@dataclass
class RefEvent:
    k: int
    h: int
    s: int
    vref_bar: float
    vref_low: float
    min_gap: float


@dataclass
class EpisodeLog:
    """Everything needed to rebuild the certified output policies."""

    H: int
    S: int
    A: int
    B: int
    K: int
    states: np.ndarray  # (K, H) state at each step
    actions_a: np.ndarray  # (K, H)
    actions_b: np.ndarray  # (K, H)
    next_states: np.ndarray  # (K, H)
    # (h, s, k_effective, joint pi): pi is used from episode k_effective on
    policy_events: list = field(default_factory=list)
    stage_events: list = field(default_factory=list)
    ref_events: list = field(default_factory=list)

    def save(self, path) -> None:
        ev = self.policy_events
        np.savez_compressed(
            path,
            dims=np.array([self.H, self.S, self.A, self.B, self.K]),
            states=self.states,
            actions_a=self.actions_a,
            actions_b=self.actions_b,
            next_states=self.next_states,
            pe_index=np.array([(h, s, k) for h, s, k, _ in ev], dtype=np.int64).reshape(-1, 3),
            pe_pi=np.array([p for *_, p in ev]).reshape(-1, self.A, self.B),
        )

    @classmethod
    def load(cls, path) -> "EpisodeLog":
        with np.load(path) as z:
            H, S, A, B, K = (int(x) for x in z["dims"])
            events = [(int(h), int(s), int(k), p) for (h, s, k), p in zip(z["pe_index"], z["pe_pi"])]
            return cls(H, S, A, B, K, z["states"], z["actions_a"], z["actions_b"], z["next_states"], events)


@dataclass
class MetricsStream:
    vbar1: np.ndarray
    vlow1: np.ndarray
    sandwich_violations: np.ndarray | None  # (K,) count of (h, s) per episode
    largegap: np.ndarray  # (K, H, len(eps_grid)) bool
    eps_grid: tuple
    H: int
    S: int
    stride: int = 1
    negative_gaps: int = 0

    @property
    def K(self) -> int:
        return len(self.vbar1)

    @property
    def gap(self) -> np.ndarray:
        return self.vbar1 - self.vlow1

    @property
    def T(self) -> int:
        return self.K * self.H

    def prefix(self, K: int) -> "MetricsStream":
        sw = None if self.sandwich_violations is None else self.sandwich_violations[:K]
        return MetricsStream(self.vbar1[:K], self.vlow1[:K], sw, self.largegap[:K], self.eps_grid,
                             self.H, self.S, self.stride)

    def header(self) -> list[str]:
        return ["k", "vbar1", "vlow1", "gap", "sandwich_violations"] + [
            f"largegap_eps_{eps:g}" for eps in self.eps_grid
        ]

    def write_csv(self, path, stride: int | None = None) -> None:
        stride = stride or self.stride
        counts = self.largegap.sum(axis=1)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.header())
            for k in range(0, self.K, stride):
                sw = "" if self.sandwich_violations is None else int(self.sandwich_violations[k])
                w.writerow([k + 1, repr(float(self.vbar1[k])), repr(float(self.vlow1[k])),
                            repr(float(self.gap[k])), sw, *(int(c) for c in counts[k])])

    @classmethod
    def read_csv(cls, path, H: int, S: int) -> "MetricsStream":
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        head, body = rows[0], rows[1:]
        eps = tuple(float(col.removeprefix("largegap_eps_")) for col in head[5:])
        ks = np.array([int(r[0]) for r in body])
        stride = int(ks[1] - ks[0]) if len(ks) > 1 else 1
        vbar = np.array([float(r[1]) for r in body])
        vlow = np.array([float(r[2]) for r in body])
        sw = None if not body or body[0][4] == "" else np.array([int(r[4]) for r in body])
        # per-h detail is not in the CSV; keep counts in the first h slot
        lg = np.zeros((len(body), H, len(eps)), dtype=bool)
        return cls(vbar, vlow, sw, lg, eps, H, S, stride)


@dataclass
class RunResult:
    state: LearnerState
    metrics: MetricsStream
    log: EpisodeLog

    def __iter__(self):
        return iter((self.state, self.metrics, self.log))


def _run(game: MarkovGame, hp: Hyperparams, K: int, rng: SeededRng, exact: ExactSolution | None,
         eps_grid: Sequence[float], variant: str, strict: bool, cce: Callable | None) -> RunResult:
    if K < 0:
        raise ContractViolation("K must be >= 0")
    st = init_learner(game, hp, K, variant)
    H, S, A, B = game.H, game.S, game.A, game.B
    p = st.params
    eps_arr = np.asarray(eps_grid, dtype=np.float64)
    states = np.zeros((K, H), dtype=np.int64)
    acts_a = np.zeros((K, H), dtype=np.int64)
    acts_b = np.zeros((K, H), dtype=np.int64)
    nexts = np.zeros((K, H), dtype=np.int64)
    vbar1 = np.zeros(K)
    vlow1 = np.zeros(K)
    largegap = np.zeros((K, H, eps_arr.size), dtype=bool)
    sandwich = np.zeros(K, dtype=np.int64) if exact is not None else None
    if exact is not None:
        vstar = exact.Vstar[:H]
    log = EpisodeLog(H, S, A, B, K, states, acts_a, acts_b, nexts)
    cum_pi = np.cumsum(st.pi.reshape(H, S, A * B), axis=-1)
    rewards = game.rewards
    schedule = st.schedule
    s1 = game.initial_state
    negative = 0
    for k in range(1, K + 1):
        row = k - 1
        vbar1[row] = st.Vbar[0, s1]
        vlow1[row] = st.Vlow[0, s1]
        if sandwich is not None:
            bad = (st.Vlow[:H] > vstar + SANDWICH_TOL) | (st.Vbar[:H] < vstar - SANDWICH_TOL)
            sandwich[row] = int(bad.sum())
        ua = rng.uniforms(k, rng_mod.ACTION, H)
        us = rng.uniforms(k, rng_mod.TRANSITION, H)
        s = s1
        for h in range(H):
            largegap[row, h] = (st.Vbar[h, s] - st.Vlow[h, s]) >= eps_arr
            cp = cum_pi[h, s]
            j = min(int(np.searchsorted(cp, ua[h] * cp[-1], side="right")), A * B - 1)
            a, b = divmod(j, B)
            r = float(rewards[h, s, a, b])
            s_next = game.sample_next(h, s, a, b, us[h])
            states[row, h] = s
            acts_a[row, h] = a
            acts_b[row, h] = b
            nexts[row, h] = s_next
            observe_transition(st, h, s, a, b, r, s_next)
            if schedule.is_stage_end(int(st.N[h, s, a, b])):
                ev = stage_update(st, h, s, a, b, r, p, cce, k)
                log.stage_events.append(ev)
                log.policy_events.append((h, s, k + 1, st.pi[h, s].copy()))
                cum_pi[h, s] = np.cumsum(st.pi[h, s].ravel())
                if ev.vbar - ev.vlow < -SANDWICH_TOL:
                    negative += 1
                    if strict:
                        raise InvariantViolation(f"negative value gap {ev.vbar - ev.vlow} at h={h} s={s} k={k}")
            if maybe_update_reference(st, h, s, p):
                log.ref_events.append(RefEvent(k, h, s, float(st.Vref_bar[h, s]), float(st.Vref_low[h, s]),
                                               float(st.min_gap[h, s])))
            s = s_next
        st.episode = k
    metrics = MetricsStream(vbar1, vlow1, sandwich, largegap, tuple(float(e) for e in eps_arr), H, S,
                            negative_gaps=negative)
    return RunResult(st, metrics, log)


DEFAULT_EPS = (0.1, 0.5, 1.0)


def run_training(game: MarkovGame, hp: Hyperparams, K: int, rng: SeededRng, exact: ExactSolution | None = None,
                 eps_grid: Sequence[float] = DEFAULT_EPS, strict: bool = True, cce: Callable | None = None) -> RunResult:
    """Play ``K`` episodes of the full min-gap algorithm."""
    return _run(game, hp, K, rng, exact, eps_grid, FULL, strict, cce)


def run_baseline_hoeffding(game: MarkovGame, hp: Hyperparams, K: int, rng: SeededRng,
                           exact: ExactSolution | None = None, eps_grid: Sequence[float] = DEFAULT_EPS,
                           strict: bool = True, cce: Callable | None = None) -> RunResult:
    """Same loop with the advantage candidate and reference updates switched off."""
    return _run(game, hp, K, rng, exact, eps_grid, BASELINE, strict, cce)
