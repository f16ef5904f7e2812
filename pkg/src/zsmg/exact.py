"""Backward induction for Nash values and best responses to Markov policies."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .game import ContractViolation, MarkovGame, dumps_17g
from .lp import matrix_game_solve

MAX = "max"
MIN = "min"


@dataclass
class ExactSolution:
    Qstar: np.ndarray  # (H, S, A, B)
    Vstar: np.ndarray  # (H + 1, S); last row is zero
    ne_max: np.ndarray  # (H, S, A)
    ne_min: np.ndarray  # (H, S, B)

    def value(self, game: MarkovGame) -> float:
        return float(self.Vstar[0, game.initial_state])

    def to_dict(self) -> dict:
        H, S, A, B = self.Qstar.shape
        return {
            "version": 1,
            "H": H,
            "S": S,
            "A": A,
            "B": B,
            "Qstar": self.Qstar.ravel().tolist(),
            "Vstar": self.Vstar[:H].ravel().tolist(),
            "ne_max": self.ne_max.ravel().tolist(),
            "ne_min": self.ne_min.ravel().tolist(),
        }

    def save(self, path) -> None:
        Path(path).write_text(dumps_17g(self.to_dict()))


def _check_policy(policy: np.ndarray, shape: tuple, what: str) -> np.ndarray:
    p = np.asarray(policy, dtype=np.float64)
    if p.shape != shape:
        raise ContractViolation(f"{what} policy has shape {p.shape}, expected {shape}")
    if (p < -1e-12).any() or np.abs(p.sum(axis=-1) - 1.0).max() > 1e-9:
        raise ContractViolation(f"{what} policy rows must be probability vectors")
    return p


def nash_backward_induction(game: MarkovGame) -> ExactSolution:
    H, S, A, B = game.H, game.S, game.A, game.B
    Q = np.zeros((H, S, A, B))
    V = np.zeros((H + 1, S))
    mu = np.zeros((H, S, A))
    nu = np.zeros((H, S, B))
    for h in range(H - 1, -1, -1):
        Q[h] = game.rewards[h] + game.transitions[h] @ V[h + 1]
        for s in range(S):
            V[h, s], mu[h, s], nu[h, s] = matrix_game_solve(Q[h, s])
    return ExactSolution(Q, V, mu, nu)


def evaluate_markov(game: MarkovGame, mu: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """V^{mu,nu} for product Markov policies, shape (H + 1, S)."""
    mu = _check_policy(mu, (game.H, game.S, game.A), "max-player")
    nu = _check_policy(nu, (game.H, game.S, game.B), "min-player")
    V = np.zeros((game.H + 1, game.S))
    for h in range(game.H - 1, -1, -1):
        Qh = game.rewards[h] + game.transitions[h] @ V[h + 1]
        V[h] = np.einsum("sa,sab,sb->s", mu[h], Qh, nu[h])
    return V


def best_response_markov(game: MarkovGame, opponent: np.ndarray, side: str) -> tuple[float, np.ndarray]:
    """Best response of ``side`` against a fixed Markov ``opponent``.

    ``side="min"`` means the min-player responds to a max-player policy of
    shape (H, S, A); ``side="max"`` responds to a min-player policy of shape
    (H, S, B).  Returns the value at the initial state and a deterministic
    responder policy (one-hot rows, lowest index on ties).
    """
    H, S, A, B = game.H, game.S, game.A, game.B
    if side == MIN:
        opp = _check_policy(opponent, (H, S, A), "max-player")
        resp = np.zeros((H, S, B))
    elif side == MAX:
        opp = _check_policy(opponent, (H, S, B), "min-player")
        resp = np.zeros((H, S, A))
    else:
        raise ContractViolation(f"side must be 'max' or 'min', got {side!r}")
    V = np.zeros((H + 1, S))
    for h in range(H - 1, -1, -1):
        Qh = game.rewards[h] + game.transitions[h] @ V[h + 1]
        if side == MIN:
            vals = np.einsum("sa,sab->sb", opp[h], Qh)
            best = vals.argmin(axis=1)
        else:
            vals = np.einsum("sab,sb->sa", Qh, opp[h])
            best = vals.argmax(axis=1)
        V[h] = vals[np.arange(S), best]
        resp[h, np.arange(S), best] = 1.0
    return float(V[0, game.initial_state]), resp


def exploitability(game: MarkovGame, mu: np.ndarray, nu: np.ndarray) -> float:
    """V^{dagger,nu}(s1) - V^{mu,dagger}(s1)."""
    upper, _ = best_response_markov(game, nu, MAX)
    lower, _ = best_response_markov(game, mu, MIN)
    return upper - lower
