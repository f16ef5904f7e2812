"""Certified output policies rebuilt from a training log, and their evaluation.

The certified max-player policy draws an episode index ``k`` uniformly from
``1..K``, plays the marginal of that episode's joint policy, and after each
step jumps ``k`` to a uniformly chosen visit from the previous completed
stage of the tuple just played.  If that tuple is still in its first stage
the index stays where it is.  The min-player version is symmetric.

Evaluation uses dynamic programming over augmented states ``(h, s, k)``.  An
adversary that sees ``k`` is at least as strong as one that does not, so the
resulting exploitability is an upper bound on the true one.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import rng as rng_mod
from .exact import MAX, MIN, ExactSolution, _check_policy
from .game import ContractViolation, MarkovGame, sample_index
from .learner import EpisodeLog, MetricsStream, StageSchedule
from .rng import SeededRng

DEFAULT_BUDGET = 500_000_000


class ReplayError(ValueError):
    pass


class BudgetExceeded(RuntimeError):
    pass


class ReplayStore:
    """Per-tuple visit lists and per-state policy history of one run."""

    def __init__(self, H, S, A, B, K, visits, events):
        self.H, self.S, self.A, self.B, self.K = H, S, A, B, K
        self.schedule = StageSchedule(H)
        self._visits = visits  # (h, s, a, b) -> sorted int array of episodes
        self._events = events  # (h, s) -> (stamps array, pis array (m, A, B))
        self._empty = np.zeros(0, dtype=np.int64)
        self._tables: dict = {}

    def visits(self, h, s, a, b) -> np.ndarray:
        return self._visits.get((h, s, a, b), self._empty)

    def count(self, h, s, a, b, k: int | None = None) -> int:
        """Visits of the tuple before episode ``k`` (all visits if ``k`` is None)."""
        v = self.visits(h, s, a, b)
        return len(v) if k is None else int(np.searchsorted(v, k, side="left"))

    def stage_ends(self, h, s, a, b) -> list[int]:
        return self.schedule.prefix(len(self.visits(h, s, a, b)))

    def previous_stage(self, h, s, a, b, k) -> np.ndarray:
        """Episodes of the last completed stage of (h, s, a, b) before episode ``k``."""
        v = self.visits(h, s, a, b)
        n = int(np.searchsorted(v, k, side="left"))
        end = self.schedule.last_end(n)
        if end == 0:
            return self._empty
        return v[self.schedule.prev_end(end):end]

    def joint(self, h, s, k) -> np.ndarray:
        """Joint policy in force at (h, s) during episode ``k``."""
        ev = self._events.get((h, s))
        if ev is not None:
            stamps, pis = ev
            i = int(np.searchsorted(stamps, k, side="right")) - 1
            if i >= 0:
                return pis[i]
        return np.full((self.A, self.B), 1.0 / (self.A * self.B))

    def marginal(self, h, s, k, side: str) -> np.ndarray:
        p = self.joint(h, s, k)
        return p.sum(axis=1) if side == MAX else p.sum(axis=0)

    def marginal_table(self, h: int, side: str) -> np.ndarray:
        """(S, K, n_actions) marginals for episodes 1..K."""
        key = (h, side)
        if key not in self._tables:
            n_act = self.A if side == MAX else self.B
            axis = 1 if side == MAX else 0
            out = np.full((self.S, self.K, n_act), 1.0 / n_act)
            ks = np.arange(1, self.K + 1)
            for s in range(self.S):
                ev = self._events.get((h, s))
                if ev is None:
                    continue
                stamps, pis = ev
                idx = np.searchsorted(stamps, ks, side="right") - 1
                marg = pis.sum(axis=axis + 1)
                has = idx >= 0
                out[s, has] = marg[idx[has]]
            self._tables[key] = out
        return self._tables[key]

    def policy_changes(self) -> int:
        return sum(len(st) for st, _ in self._events.values())


def build_replay(log: EpisodeLog) -> ReplayStore:
    H, S, A, B, K = log.H, log.S, log.A, log.B, log.K
    arrays = {"states": log.states, "actions_a": log.actions_a, "actions_b": log.actions_b,
              "next_states": log.next_states}
    for name, arr in arrays.items():
        if arr.shape != (K, H):
            raise ReplayError(f"{name} has shape {arr.shape}, expected {(K, H)}")
    for name, hi in (("states", S), ("actions_a", A), ("actions_b", B), ("next_states", S)):
        arr = arrays[name]
        bad = np.argwhere((arr < 0) | (arr >= hi))
        if bad.size:
            k, h = bad[0]
            raise ReplayError(f"{name}[{k + 1}, {h}] = {arr[k, h]} out of range")
    if H > 1:
        bad = np.argwhere(log.states[:, 1:] != log.next_states[:, :-1])
        if bad.size:
            k, h = bad[0]
            raise ReplayError(f"episode {k + 1}: state at step {h + 1} does not follow step {h}")

    flat = ((np.arange(H)[None, :] * S + log.states) * A + log.actions_a) * B + log.actions_b
    ep = np.broadcast_to(np.arange(1, K + 1)[:, None], (K, H))
    order = np.lexsort((ep.ravel(), flat.ravel()))
    keys = flat.ravel()[order]
    eps = ep.ravel()[order].astype(np.int64)
    visits = {}
    if keys.size:
        cuts = np.nonzero(np.diff(keys))[0] + 1
        for chunk_keys, chunk in zip(np.split(keys, cuts), np.split(eps, cuts)):
            key = int(chunk_keys[0])
            key, b = divmod(key, B)
            key, a = divmod(key, A)
            h, s = divmod(key, S)
            visits[(h, s, a, b)] = chunk

    grouped: dict = {}
    for rec in log.policy_events:
        h, s, k, pi = rec
        pi = np.asarray(pi, dtype=np.float64)
        if not (0 <= h < H and 0 <= s < S) or pi.shape != (A, B):
            raise ReplayError(f"malformed policy event {rec!r}")
        if not 1 <= k <= K + 1:
            raise ReplayError(f"policy event stamp {k} outside 1..{K + 1}")
        if (pi < -1e-12).any() or abs(pi.sum() - 1.0) > 1e-9:
            raise ReplayError(f"policy event at h={h} s={s} k={k} is not a distribution")
        lst = grouped.setdefault((h, s), [])
        if lst and lst[-1][0] >= k:
            raise ReplayError(f"policy events at h={h} s={s} not strictly increasing at k={k}")
        lst.append((k, pi))
    events = {key: (np.array([k for k, _ in lst], dtype=np.int64), np.array([p for _, p in lst]))
              for key, lst in grouped.items()}
    return ReplayStore(H, S, A, B, K, visits, events)


@dataclass(frozen=True)
class CertifiedPolicyCursor:
    k: int
    side: str
    h: int = 0


def start_cursor(store: ReplayStore, side: str, u: float) -> CertifiedPolicyCursor:
    if side not in (MAX, MIN):
        raise ContractViolation(f"side must be 'max' or 'min', got {side!r}")
    k = min(int(u * store.K), store.K - 1) + 1
    return CertifiedPolicyCursor(k, side, 0)


def certified_step(
    store: ReplayStore,
    cursor: CertifiedPolicyCursor,
    s: int,
    opponent: Callable[[int, int, int], int],
    u_action: float,
    u_jump: float,
) -> tuple[int, int, CertifiedPolicyCursor]:
    """Act at state ``s``, observe the opponent, and move the episode cursor.

    ``opponent(h, s, k)`` returns the opponent's action; it is handed the
    cursor so that cursor-observing adversaries can be simulated.
    Returns ``(own action, opponent action, next cursor)``.
    """
    if not 1 <= cursor.k <= store.K:
        raise ContractViolation(f"cursor episode {cursor.k} outside 1..{store.K}")
    h = cursor.h
    marg = store.marginal(h, s, cursor.k, cursor.side)
    own = sample_index(np.cumsum(marg), u_action)
    other = int(opponent(h, s, cursor.k))
    a, b = (own, other) if cursor.side == MAX else (other, own)
    prev = store.previous_stage(h, s, a, b, cursor.k)
    k = cursor.k
    if prev.size:
        k = int(prev[min(int(u_jump * prev.size), prev.size - 1)])
    return own, other, replace(cursor, k=k, h=h + 1)


def gap_bound(metrics: MetricsStream) -> float:
    """Mean start-of-episode gap at the initial state, over all recorded episodes."""
    if metrics.K == 0:
        raise ContractViolation("gap_bound needs at least one episode")
    if metrics.stride != 1:
        raise ContractViolation("gap_bound needs the full metrics stream (stride 1)")
    return float(np.mean(metrics.gap))


def _jump_average(store: ReplayStore, h: int, s: int, a: int, b: int, W_next: np.ndarray) -> np.ndarray:
    """For every episode k, the expected next-step table W_next[:, k'] over the cursor jump.

    ``W_next`` has shape (S, K) indexed by episode - 1; the result too.
    """
    K = store.K
    v = store.visits(h, s, a, b)
    if v.size == 0:
        return W_next
    sched = store.schedule
    n_k = np.searchsorted(v, np.arange(1, K + 1), side="left")
    ends = np.array([0] + sched.prefix(v.size), dtype=np.int64)
    # stage index of the last completed stage for each prefix length
    pos = np.searchsorted(ends, n_k, side="right") - 1
    last = ends[pos]
    prev = ends[np.maximum(pos - 1, 0)]
    C = np.zeros((W_next.shape[0], v.size + 1))
    np.cumsum(W_next[:, v - 1], axis=1, out=C[:, 1:])
    out = W_next.copy()
    has = last > 0
    if has.any():
        out[:, has] = (C[:, last[has]] - C[:, prev[has]]) / (last[has] - prev[has])
    return out


def _check_budget(game: MarkovGame, store: ReplayStore, budget: int) -> None:
    cost = game.H * game.S * game.A * game.B * game.S * store.K
    if cost > budget:
        raise BudgetExceeded(
            f"augmented DP needs ~{cost:.3g} operations (budget {budget:.3g}); "
            "evaluate a log with fewer episodes (subsample K)")


def certified_value_dp(
    game: MarkovGame,
    store: ReplayStore,
    side: str,
    opponent: np.ndarray | None = None,
    budget: int = DEFAULT_BUDGET,
    return_policy: bool = False,
):
    """Value of the certified ``side`` policy at the initial state.

    With ``opponent=None`` the opponent is the best responder that observes
    the cursor; otherwise it is the fixed Markov ``opponent`` policy.  With
    ``return_policy`` the responder's (H, S, K) action table is also returned.
    """
    if side not in (MAX, MIN):
        raise ContractViolation(f"side must be 'max' or 'min', got {side!r}")
    if (game.H, game.S, game.A, game.B) != (store.H, store.S, store.A, store.B):
        raise ContractViolation("game and replay dimensions differ")
    _check_budget(game, store, budget)
    H, S, A, B, K = game.H, game.S, game.A, game.B, store.K
    if opponent is not None:
        opponent = _check_policy(opponent, (H, S, B if side == MAX else A), "opponent")
    W = np.zeros((S, K))
    resp = np.zeros((H, S, K), dtype=np.int64) if return_policy else None
    for h in range(H - 1, -1, -1):
        own = store.marginal_table(h, side)  # (S, K, n_own)
        Wn = np.zeros((S, K))
        for s in range(S):
            Qk = np.empty((A, B, K))
            for a in range(A):
                for b in range(B):
                    J = _jump_average(store, h, s, a, b, W)
                    Qk[a, b] = game.rewards[h, s, a, b] + game.transitions[h, s, a, b] @ J
            if side == MAX:
                vals = np.einsum("ka,abk->bk", own[s], Qk)  # per opponent action b
            else:
                vals = np.einsum("kb,abk->ak", own[s], Qk)  # per opponent action a
            if opponent is None:
                pick = vals.argmin(axis=0) if side == MAX else vals.argmax(axis=0)
                Wn[s] = vals[pick, np.arange(K)]
                if resp is not None:
                    resp[h, s] = pick
            else:
                Wn[s] = opponent[h, s] @ vals
        W = Wn
    value = float(W[game.initial_state].mean())
    return (value, resp) if return_policy else value


def exploitability_upper(
    game: MarkovGame,
    store: ReplayStore,
    side: str,
    exact: ExactSolution,
    budget: int = DEFAULT_BUDGET,
) -> float:
    """How much a cursor-observing best responder gains against the certified ``side`` policy."""
    v = certified_value_dp(game, store, side, None, budget)
    vstar = exact.value(game)
    return vstar - v if side == MAX else v - vstar


def monte_carlo_value(
    game: MarkovGame,
    store: ReplayStore,
    opponent,
    side: str,
    episodes: int,
    rng: SeededRng,
) -> tuple[float, float]:
    """Mean and standard error of the return of the certified ``side`` policy.

    ``opponent`` is either a Markov policy array or an (H, S, K) integer
    table of cursor-dependent actions such as the one produced by
    :func:`certified_value_dp`.
    """
    if episodes < 1:
        raise ContractViolation("monte_carlo_value needs at least one episode")
    H, S = game.H, game.S
    n_opp = game.B if side == MAX else game.A
    opp = np.asarray(opponent)
    if opp.ndim == 3 and opp.shape == (H, S, store.K) and np.issubdtype(opp.dtype, np.integer):
        def pick(h, s, k, u):
            return int(opp[h, s, k - 1])
    else:
        opp = _check_policy(opp, (H, S, n_opp), "opponent")
        cum = np.cumsum(opp, axis=-1)

        def pick(h, s, k, u):
            return sample_index(cum[h, s], u)

    returns = np.zeros(episodes)
    for e in range(episodes):
        u_start = rng.uniform(e, rng_mod.CURSOR_START, 0)
        ua = rng.uniforms(e, rng_mod.ACTION, H)
        uo = rng.uniforms(e, rng_mod.OPPONENT, H)
        uj = rng.uniforms(e, rng_mod.CURSOR, H)
        us = rng.uniforms(e, rng_mod.TRANSITION, H)
        cur = start_cursor(store, side, u_start)
        s = game.initial_state
        total = 0.0
        for h in range(H):
            own, other, cur = certified_step(store, cur, s, lambda hh, ss, kk: pick(hh, ss, kk, uo[h]),
                                             ua[h], uj[h])
            a, b = (own, other) if side == MAX else (other, own)
            total += game.rewards[h, s, a, b]
            s = game.sample_next(h, s, a, b, us[h])
        returns[e] = total
    stderr = float(returns.std(ddof=1) / np.sqrt(episodes)) if episodes > 1 else float("inf")
    return float(returns.mean()), stderr
