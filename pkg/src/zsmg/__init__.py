"""Min-gap reference-advantage Q-learning for two-player zero-sum Markov games."""

from .game import MarkovGame, builtin_game, generate_random_game, validate_game
from .learner import Hyperparams, run_baseline_hoeffding, run_training
from .rng import SeededRng

__version__ = "0.1.0"

__all__ = [
    "MarkovGame", "builtin_game", "generate_random_game", "validate_game",
    "Hyperparams", "run_training", "run_baseline_hoeffding", "SeededRng",
]
