import numpy as np
import pytest

from zsmg.bench import naive_stage_ends
from zsmg.certified import (
    BudgetExceeded,
    ReplayError,
    build_replay,
    certified_step,
    certified_value_dp,
    exploitability_upper,
    gap_bound,
    monte_carlo_value,
    start_cursor,
)
from zsmg.exact import MAX, MIN, best_response_markov, evaluate_markov, nash_backward_induction
from zsmg.game import ContractViolation, generate_random_game, matching_pennies
from zsmg.learner import EpisodeLog, Hyperparams, MetricsStream, run_training
from zsmg.rng import SeededRng

# chi-square 0.999 quantile with 9 degrees of freedom
CHI2_9_999 = 27.877


def bench_game():
    return generate_random_game(7, 3, 2, 2, 3)


@pytest.fixture(scope="module")
def trained():
    g = bench_game()
    res = run_training(g, Hyperparams(delta=0.5), 400, SeededRng(8), nash_backward_induction(g))
    return g, res, build_replay(res.log)


def test_k1_has_no_previous_stage():
    for H in (1, 2, 3):
        g = generate_random_game(H, 2, 2, 2, H)
        store = build_replay(run_training(g, Hyperparams(), 1, SeededRng(0)).log)
        for idx in np.ndindex(H, 2, 2, 2):
            assert store.previous_stage(*idx, 1).size == 0


def test_counts_equal_tallies(trained):
    g, res, store = trained
    tally = np.zeros((g.H, g.S, g.A, g.B), dtype=int)
    for k in range(res.log.K):
        for h in range(g.H):
            tally[h, res.log.states[k, h], res.log.actions_a[k, h], res.log.actions_b[k, h]] += 1
    for idx in np.ndindex(tally.shape):
        assert store.count(*idx) == tally[idx] == res.state.N[idx]


def test_previous_stage_against_rescan(trained):
    g, res, store = trained
    log = res.log
    rng = np.random.default_rng(0)
    for _ in range(300):
        h, s, a, b = (int(rng.integers(n)) for n in (g.H, g.S, g.A, g.B))
        k = int(rng.integers(1, log.K + 1))
        hits = [kk + 1 for kk in range(log.K)
                if (log.states[kk, h], log.actions_a[kk, h], log.actions_b[kk, h]) == (s, a, b)]
        before = [x for x in hits if x < k]
        ends = naive_stage_ends(g.H, len(before))
        expected = before[(ends[-2] if len(ends) > 1 else 0):ends[-1]] if ends else []
        assert store.previous_stage(h, s, a, b, k).tolist() == expected


def test_uniform_when_no_stage_completed():
    g = bench_game()
    res = run_training(g, Hyperparams(), 2, SeededRng(1))
    assert not res.log.policy_events
    store = build_replay(res.log)
    for k in (1, 2):
        np.testing.assert_array_equal(store.marginal(1, 0, k, MAX), [0.5, 0.5])
    u = np.full((g.H, g.S, 2), 0.5)
    nu = np.random.default_rng(2).dirichlet([1, 1], size=(g.H, g.S))
    assert certified_value_dp(g, store, MAX, nu) == pytest.approx(evaluate_markov(g, u, nu)[0, 0], abs=1e-12)


def test_k1_cursor_stays_pinned():
    g = bench_game()
    store = build_replay(run_training(g, Hyperparams(), 1, SeededRng(1)).log)
    cur = start_cursor(store, MIN, 0.73)
    s = g.initial_state
    for h in range(g.H):
        own, other, cur = certified_step(store, cur, s, lambda h, s, k: 1, 0.4, 0.9)
        assert cur.k == 1 and cur.h == h + 1
        s = g.sample_next(h, s, other, own, 0.5)


def test_start_cursor_uniform(trained):
    g = bench_game()
    store = build_replay(run_training(g, Hyperparams(), 10, SeededRng(3)).log)
    u = SeededRng(77).generator(0, 0).random(100_000)
    counts = np.bincount([start_cursor(store, MAX, x).k for x in u], minlength=11)[1:]
    expected = len(u) / 10
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < CHI2_9_999


def test_jump_lands_in_previous_stage(trained):
    g, res, store = trained
    rng = np.random.default_rng(5)
    for _ in range(200):
        k = int(rng.integers(1, store.K + 1))
        cur = start_cursor(store, MAX, (k - 0.5) / store.K)
        assert cur.k == k
        s = int(res.log.states[k - 1, 0])
        own, other, nxt = certified_step(store, cur, s, lambda h, s, k: 0, rng.random(), rng.random())
        prev = store.previous_stage(0, s, own, other, k)
        assert (nxt.k in prev.tolist()) if prev.size else nxt.k == k
        assert nxt.k <= k


def test_gap_bound_arithmetic():
    m = MetricsStream(np.array([3.0, 1.0]), np.zeros(2), None, np.zeros((2, 1, 1), bool), (1.0,), 1, 1)
    assert gap_bound(m) == 2.0
    g = bench_game()
    _, m, _ = run_training(g, Hyperparams(), 5, SeededRng(0))
    assert gap_bound(m) == 3.0
    with pytest.raises(ContractViolation):
        gap_bound(m.prefix(0))


def test_uniform_pennies_unexploitable():
    g = matching_pennies()
    store = build_replay(run_training(g, Hyperparams(), 1, SeededRng(0)).log)
    ex = nash_backward_induction(g)
    assert exploitability_upper(g, store, MAX, ex) == pytest.approx(0.0, abs=1e-12)
    assert exploitability_upper(g, store, MIN, ex) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_k1_reduces_to_markov(seed):
    g = generate_random_game(60 + seed, 2, 2, 3, 2)
    ex = nash_backward_induction(g)
    store = build_replay(run_training(g, Hyperparams(), 1, SeededRng(seed)).log)
    mu = np.full((2, 2, 2), 1 / 2)
    nu = np.full((2, 2, 3), 1 / 3)
    assert exploitability_upper(g, store, MAX, ex) == pytest.approx(
        ex.value(g) - best_response_markov(g, mu, MIN)[0], abs=1e-12)
    assert exploitability_upper(g, store, MIN, ex) == pytest.approx(
        best_response_markov(g, nu, MAX)[0] - ex.value(g), abs=1e-12)


def test_dp_adversary_matches_monte_carlo(trained):
    g, res, store = trained
    value, adversary = certified_value_dp(g, store, MAX, return_policy=True)
    mean, se = monte_carlo_value(g, store, adversary, MAX, 100_000, SeededRng(123))
    assert abs(mean - value) <= 3 * se
    # the adversary cannot do better than a fixed Nash min-player against the certified max-player
    ex = nash_backward_induction(g)
    assert value <= certified_value_dp(g, store, MAX, ex.ne_min) + 1e-12


def test_fixed_opponent_monte_carlo(trained):
    g, res, store = trained
    rng = np.random.default_rng(9)
    mu = rng.dirichlet([1, 1], size=(g.H, g.S))
    nu = rng.dirichlet([1, 1], size=(g.H, g.S))
    for side, opp, seed in ((MIN, mu, 5), (MAX, nu, 6)):
        dp = certified_value_dp(g, store, side, opp)
        mean, se = monte_carlo_value(g, store, opp, side, 40_000, SeededRng(seed))
        assert abs(mean - dp) <= 3 * se


def test_nash_opponent_in_pennies():
    g = matching_pennies()
    store = build_replay(run_training(g, Hyperparams(), 50, SeededRng(0)).log)
    ne = nash_backward_induction(g)
    mean, se = monte_carlo_value(g, store, ne.ne_min, MAX, 20_000, SeededRng(2))
    assert abs(mean - 0.5) <= 3 * se
    with pytest.raises(ContractViolation):
        monte_carlo_value(g, store, ne.ne_min, MAX, 0, SeededRng(2))


def test_exploitability_upper_is_nonnegative(trained):
    g, res, store = trained
    ex = nash_backward_induction(g)
    for side in (MAX, MIN):
        assert exploitability_upper(g, store, side, ex) >= -1e-12


def _log(**over):
    z = np.zeros((2, 2), dtype=np.int64)
    kw = dict(H=2, S=2, A=2, B=2, K=2, states=z.copy(), actions_a=z.copy(), actions_b=z.copy(),
              next_states=z.copy())
    kw.update(over)
    return EpisodeLog(**kw)


def test_replay_validation():
    build_replay(_log())
    with pytest.raises(ReplayError):
        build_replay(_log(states=np.zeros((3, 2), dtype=np.int64)))
    with pytest.raises(ReplayError):
        build_replay(_log(actions_a=np.full((2, 2), 5)))
    with pytest.raises(ReplayError):
        build_replay(_log(next_states=np.array([[1, 0], [0, 0]])))
    with pytest.raises(ReplayError):
        build_replay(_log(policy_events=[(0, 0, 9, np.full((2, 2), 0.25))]))
    with pytest.raises(ReplayError):
        build_replay(_log(policy_events=[(0, 0, 2, np.full((2, 2), 0.3))]))


def test_budget_guard(trained):
    g, res, store = trained
    with pytest.raises(BudgetExceeded):
        certified_value_dp(g, store, MAX, budget=1000)
    with pytest.raises(ContractViolation):
        certified_value_dp(g, store, "left")
