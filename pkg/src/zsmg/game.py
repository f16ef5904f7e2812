"""Tabular episodic two-player zero-sum Markov games.

Steps are 0-based in code: ``h = 0 .. H-1``.  The max-player picks ``a`` in
``range(A)``, the min-player picks ``b`` in ``range(B)``, and both act
simultaneously.  Rewards are deterministic and lie in [0, 1].
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import rng as rng_mod
from .rng import SeededRng

ROW_TOL = 1e-12
JOINT_TOL = 1e-9


class ContractViolation(ValueError):
    """An input broke a documented precondition."""


@dataclass(frozen=True)
class Violation:
    index: tuple
    rule: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.rule} at {self.index}: {self.detail}"


@dataclass(frozen=True, eq=False)
class MarkovGame:
    H: int
    S: int
    A: int
    B: int
    transitions: np.ndarray  # (H, S, A, B, S)
    rewards: np.ndarray  # (H, S, A, B)
    initial_state: int = 0
    _cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        P = np.array(self.transitions, dtype=np.float64)
        R = np.array(self.rewards, dtype=np.float64)
        if P.shape != (self.H, self.S, self.A, self.B, self.S):
            raise ContractViolation(f"transitions shape {P.shape} != {(self.H, self.S, self.A, self.B, self.S)}")
        if R.shape != (self.H, self.S, self.A, self.B):
            raise ContractViolation(f"rewards shape {R.shape} != {(self.H, self.S, self.A, self.B)}")
        P.flags.writeable = False
        R.flags.writeable = False
        cum = np.cumsum(P, axis=-1)
        cum.flags.writeable = False
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "rewards", R)
        object.__setattr__(self, "_cum", cum)

    def sample_next(self, h: int, s: int, a: int, b: int, u: float) -> int:
        row = self._cum[h, s, a, b]
        idx = int(np.searchsorted(row, u * row[-1], side="right"))
        return min(idx, self.S - 1)

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "H": self.H,
            "S": self.S,
            "A": self.A,
            "B": self.B,
            "initial_state": self.initial_state,
            "transitions": self.transitions.ravel().tolist(),
            "rewards": self.rewards.ravel().tolist(),
        }

    def to_json(self) -> str:
        return dumps_17g(self.to_dict())

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "MarkovGame":
        if d.get("version") != 1:
            raise ContractViolation(f"unsupported game file version {d.get('version')!r}")
        H, S, A, B = (int(d[key]) for key in ("H", "S", "A", "B"))
        P = np.asarray(d["transitions"], dtype=np.float64).reshape(H, S, A, B, S)
        R = np.asarray(d["rewards"], dtype=np.float64).reshape(H, S, A, B)
        return cls(H, S, A, B, P, R, int(d["initial_state"]))

    @classmethod
    def from_json(cls, text: str) -> "MarkovGame":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "MarkovGame":
        return cls.from_json(Path(path).read_text())


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not math.isfinite(x):
            raise ValueError(f"non-finite float {x} cannot be serialized")
        text = f"{x:.17g}"
        if "e" not in text and "." not in text:
            text += ".0"
        return text
    if x is None:
        return "null"
    if isinstance(x, str):
        return json.dumps(x)
    if isinstance(x, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_fmt(v)}" for k, v in x.items()) + "}"
    if isinstance(x, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt(v) for v in x) + "]"
    raise TypeError(f"cannot serialize {type(x).__name__}")


def dumps_17g(obj) -> str:
    """JSON text with every float written at 17 significant digits."""
    return _fmt(obj) + "\n"


def validate_game(game: MarkovGame) -> list[Violation]:
    """Return all invariant violations; an empty list means the game is valid."""
    out: list[Violation] = []
    P, R = game.transitions, game.rewards
    for idx in zip(*np.nonzero(~np.isfinite(P).all(axis=-1))):
        out.append(Violation(tuple(int(i) for i in idx), "transition_not_finite"))
    finite_rows = np.isfinite(P).all(axis=-1)
    for idx in zip(*np.nonzero(finite_rows & (P < 0).any(axis=-1))):
        out.append(Violation(tuple(int(i) for i in idx), "transition_negative"))
    sums = np.where(finite_rows, P.sum(axis=-1), 1.0)
    for idx in zip(*np.nonzero(np.abs(sums - 1.0) > ROW_TOL)):
        out.append(Violation(tuple(int(i) for i in idx), "transition_row_sum", f"sum={sums[idx]!r}"))
    for idx in zip(*np.nonzero(~np.isfinite(R))):
        out.append(Violation(tuple(int(i) for i in idx), "reward_not_finite"))
    with np.errstate(invalid="ignore"):
        bad = np.isfinite(R) & ((R < 0) | (R > 1))
    for idx in zip(*np.nonzero(bad)):
        out.append(Violation(tuple(int(i) for i in idx), "reward_range", f"r={R[idx]!r}"))
    if not 0 <= game.initial_state < game.S:
        out.append(Violation((game.initial_state,), "initial_state_range"))
    return out


def check_joint(probs, A: int, B: int, where=None) -> np.ndarray:
    """Validate a joint A x B action distribution, returning it as an array."""
    p = np.asarray(probs, dtype=np.float64)
    if p.shape != (A, B) or not np.isfinite(p).all() or (p < 0).any() or abs(p.sum() - 1.0) > JOINT_TOL:
        raise ContractViolation(f"invalid joint distribution at {where}: {p!r}")
    return p


class Step(NamedTuple):
    h: int
    s: int
    a: int
    b: int
    r: float
    s_next: int


@dataclass
class Trajectory:
    k: int
    steps: list[Step]


def sample_index(cum: np.ndarray, u: float) -> int:
    idx = int(np.searchsorted(cum, u * cum[-1], side="right"))
    return min(idx, len(cum) - 1)


def play_episode(
    game: MarkovGame,
    policy_provider: Callable[[int, int], np.ndarray],
    rng: SeededRng,
    k: int,
) -> Trajectory:
    """Roll one episode, sampling joint actions from ``policy_provider(h, s)``."""
    ua = rng.uniforms(k, rng_mod.ACTION, game.H)
    us = rng.uniforms(k, rng_mod.TRANSITION, game.H)
    s = game.initial_state
    steps = []
    for h in range(game.H):
        pi = check_joint(policy_provider(h, s), game.A, game.B, where=(h, s))
        j = sample_index(np.cumsum(pi.ravel()), ua[h])
        a, b = divmod(j, game.B)
        s_next = game.sample_next(h, s, a, b, us[h])
        steps.append(Step(h, s, a, b, float(game.rewards[h, s, a, b]), s_next))
        s = s_next
    return Trajectory(k, steps)


def generate_random_game(seed: int, S: int, A: int, B: int, H: int, reward_density: float = 1.0) -> MarkovGame:
    """Dirichlet(1) transition rows and sparse uniform rewards, deterministic in ``seed``."""
    if min(S, A, B, H) < 1:
        raise ContractViolation(f"S, A, B, H must be >= 1, got {(S, A, B, H)}")
    if not 0 < reward_density <= 1:
        raise ContractViolation(f"reward_density must lie in (0, 1], got {reward_density}")
    g = np.random.default_rng(seed)
    P = g.dirichlet(np.ones(S), size=(H, S, A, B))
    # renormalize so every row sums to 1 to machine precision
    P = P / P.sum(axis=-1, keepdims=True)
    R = g.uniform(0.0, 1.0, size=(H, S, A, B))
    mask = g.uniform(0.0, 1.0, size=(H, S, A, B)) < reward_density
    R = np.where(mask, R, 0.0)
    return MarkovGame(H, S, A, B, P, R, 0)


def single_state_matrix(M: Sequence[Sequence[float]]) -> MarkovGame:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ContractViolation("payoff matrix must be 2-d")
    A, B = M.shape
    return MarkovGame(1, 1, A, B, np.ones((1, 1, A, B, 1)), M.reshape(1, 1, A, B), 0)


def matching_pennies() -> MarkovGame:
    return single_state_matrix([[1.0, 0.0], [0.0, 1.0]])


def matching_pennies_chain(H: int) -> MarkovGame:
    """H rounds of matching pennies; state ``h`` moves deterministically to ``h+1``."""
    if H < 1:
        raise ContractViolation("H must be >= 1")
    S = H
    P = np.zeros((H, S, 2, 2, S))
    for h in range(H):
        for s in range(S):
            P[h, s, :, :, min(s + 1, S - 1)] = 1.0
    R = np.broadcast_to(np.eye(2), (H, S, 2, 2)).copy()
    return MarkovGame(H, S, 2, 2, P, R, 0)


_CALL = re.compile(r"^\s*(\w+)\s*(?:\((.*)\))?\s*$")


def builtin_game(name: str, *args) -> MarkovGame:
    """Look up a builtin by name; ``"matching_pennies_chain(3)"`` style strings work too."""
    m = _CALL.match(name)
    if m is None:
        raise ContractViolation(f"unknown builtin game {name!r}")
    base, argtext = m.group(1), m.group(2)
    if argtext:
        args = (json.loads(f"[{argtext}]")[0],) if base == "single_state_matrix" else tuple(
            json.loads(f"[{argtext}]"))
    if base == "matching_pennies":
        return matching_pennies()
    if base == "matching_pennies_chain":
        return matching_pennies_chain(int(args[0]) if args else 3)
    if base == "single_state_matrix":
        if not args:
            raise ContractViolation("single_state_matrix needs a payoff matrix")
        return single_state_matrix(args[0])
    raise ContractViolation(f"unknown builtin game {name!r}")
