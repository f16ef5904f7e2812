"""Every primary acceptance criterion at its stated tolerance.

Runs share cached training runs, so the order below matters for the
runtime limits: the structural check pays for the 20k-episode runs and
the convergence check for the 50k-episode runs.
"""

import pytest

from zsmg import bench

from .conftest import ACCEPTANCE_LINES


def _check(name):
    res = bench.SUITE[name]()
    limit = bench.RUNTIME_LIMITS.get(name)
    line = res.line()
    if limit is not None:
        line += f" [limit {limit:.0f}s]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert res.passed, res.detail
    if limit is not None:
        assert res.seconds < limit, f"{name} took {res.seconds:.1f}s"
    return res


def test_oracle_exactness():
    _check("oracles")


def test_structural_invariants():
    _check("structural")


def test_sandwich_property():
    _check("sandwich")


def test_cce_feasibility():
    res = _check("cce")
    assert res.numbers["calls"] >= 100_000


def test_convergence_trend():
    _check("convergence")


def test_certified_soundness():
    _check("certified")


def test_large_gap_plateau():
    _check("plateau")


def test_reference_accuracy():
    _check("reference")


def test_variance_reduction():
    _check("variance")


def test_smoke_benchmark_runtime():
    res = bench.check_smoke()
    ACCEPTANCE_LINES.append(res.line())
    assert res.passed
