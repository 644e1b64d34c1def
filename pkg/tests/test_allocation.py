import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moeprune import (
    BudgetSpec,
    FeasibilityError,
    Parity,
    SizeLimitError,
    ValidationError,
    count_feasible,
    enumerate_feasible,
    is_feasible,
    patterned_allocations,
    random_allocation,
    uniform_allocation,
)


def test_is_feasible_examples():
    budget = BudgetSpec(budget=3, caps=(3, 3))
    assert is_feasible((1, 2), budget)
    assert not is_feasible((4, -1), budget)
    even = BudgetSpec(budget=4, caps=(3, 3), parity=Parity.EVEN)
    assert not is_feasible((1, 3), even)
    assert is_feasible((2, 2), even)


def test_is_feasible_rejects_wrong_length_or_sum():
    budget = BudgetSpec(budget=3, caps=(3, 3))
    assert not is_feasible((3,), budget)
    assert not is_feasible((1, 1), budget)


def test_uniform_divides_evenly():
    assert uniform_allocation(BudgetSpec(budget=8, caps=(8, 8, 8, 8))) == (2, 2, 2, 2)


def test_uniform_remainder_to_low_indices():
    assert uniform_allocation(BudgetSpec(budget=10, caps=(8, 8, 8, 8))) == (3, 3, 2, 2)


def test_uniform_even_lattice_remainder():
    budget = BudgetSpec(budget=10, caps=(8, 8, 8, 8), parity=Parity.EVEN)
    assert uniform_allocation(budget) == (4, 2, 2, 2)


def test_uniform_respects_caps():
    # remainder keeps cycling the layers with spare cap, lowest index first
    assert uniform_allocation(BudgetSpec(budget=6, caps=(1, 4, 1, 4))) == (1, 2, 1, 2)


def test_patterned_early_heavy_packs_front():
    seeds = patterned_allocations(BudgetSpec(budget=4, caps=(2, 2, 2, 2)))
    assert seeds[0] == (2, 2, 0, 0)


def test_patterned_zero_budget():
    seeds = patterned_allocations(BudgetSpec(budget=0, caps=(2, 2, 2)))
    assert seeds == [(0, 0, 0), (0, 0, 0), (0, 0, 0)]


def test_patterned_collapse_without_slack():
    uniform = uniform_allocation(BudgetSpec(budget=4, caps=(1, 1, 1, 1)))
    for seed in patterned_allocations(BudgetSpec(budget=4, caps=(1, 1, 1, 1))):
        assert seed == uniform


def test_random_allocation_member_of_feasible_set():
    budget = BudgetSpec(budget=3, caps=(3, 3))
    rng = np.random.default_rng(0)
    feasible = {(0, 3), (1, 2), (2, 1), (3, 0)}
    for _ in range(50):
        assert random_allocation(budget, rng) in feasible


def test_random_allocation_forced_point():
    budget = BudgetSpec(budget=6, caps=(3, 3))
    assert random_allocation(budget, np.random.default_rng(1)) == (3, 3)


def test_random_allocation_is_uniform():
    budget = BudgetSpec(budget=3, caps=(3, 3))
    rng = np.random.default_rng(7)
    counts = {}
    draws = 10_000
    for _ in range(draws):
        a = random_allocation(budget, rng)
        counts[a] = counts.get(a, 0) + 1
    assert len(counts) == 4
    for c in counts.values():
        assert abs(c / draws - 0.25) <= 0.02


def test_enumerate_lexicographic():
    budget = BudgetSpec(budget=3, caps=(3, 3))
    assert enumerate_feasible(budget, limit=10) == [(0, 3), (1, 2), (2, 1), (3, 0)]


def test_enumerate_even_lattice():
    budget = BudgetSpec(budget=2, caps=(2, 2, 2), parity=Parity.EVEN)
    assert enumerate_feasible(budget, limit=10) == [(0, 0, 2), (0, 2, 0), (2, 0, 0)]


def test_enumeration_matches_brute_force_count():
    budget = BudgetSpec(budget=3, caps=(2, 2, 2))
    got = enumerate_feasible(budget, limit=100)
    brute = [
        r for r in itertools.product(range(3), repeat=3) if sum(r) == 3
    ]
    assert len(got) == len(brute) == 7
    assert sorted(got) == sorted(brute)


def test_enumerate_limit_reports_count():
    budget = BudgetSpec(budget=3, caps=(3, 3))
    with pytest.raises(SizeLimitError, match="4"):
        enumerate_feasible(budget, limit=3)


def test_count_feasible_exact():
    assert count_feasible(BudgetSpec(budget=3, caps=(3, 3))) == 4
    assert count_feasible(BudgetSpec(budget=2, caps=(2, 2, 2), parity=Parity.EVEN)) == 3


def test_budget_spec_validation():
    with pytest.raises(ValidationError, match="odd"):
        BudgetSpec(budget=3, caps=(4, 4), parity=Parity.EVEN)
    with pytest.raises(FeasibilityError, match="capacity"):
        BudgetSpec(budget=9, caps=(4, 4))
    with pytest.raises(ValidationError, match="non-negative"):
        BudgetSpec(budget=-1, caps=(4, 4))
    with pytest.raises(ValidationError):
        BudgetSpec(budget=0, caps=())
    # even parity counts capacity on the even sublattice: caps (3, 3) hold only 2 + 2
    with pytest.raises(FeasibilityError, match="capacity"):
        BudgetSpec(budget=6, caps=(3, 3), parity=Parity.EVEN)


def test_budget_json_round_trip():
    budget = BudgetSpec(budget=4, caps=(2, 4, 2), parity=Parity.EVEN)
    assert BudgetSpec.from_json(budget.to_json()) == budget


@st.composite
def budget_specs(draw):
    layers = draw(st.integers(1, 5))
    caps = tuple(draw(st.lists(st.integers(0, 5), min_size=layers, max_size=layers)))
    parity = draw(st.sampled_from([Parity.ANY, Parity.EVEN]))
    unit = 2 if parity is Parity.EVEN else 1
    top = sum((c // unit) * unit for c in caps)
    budget = draw(st.integers(0, top // unit)) * unit
    return BudgetSpec(budget=budget, caps=caps, parity=parity)


@given(budget=budget_specs())
def test_constructors_are_feasible(budget):
    assert is_feasible(uniform_allocation(budget), budget)
    for seed in patterned_allocations(budget):
        assert is_feasible(seed, budget)
    assert is_feasible(random_allocation(budget, np.random.default_rng(0)), budget)


@settings(max_examples=30)
@given(budget=budget_specs())
def test_enumeration_contains_constructors(budget):
    feasible = set(enumerate_feasible(budget, limit=100_000))
    assert len(feasible) == count_feasible(budget)
    assert uniform_allocation(budget) in feasible
    for seed in patterned_allocations(budget):
        assert seed in feasible


@settings(max_examples=30)
@given(budget=budget_specs())
def test_count_matches_product_scan(budget):
    brute = 0
    for r in itertools.product(*[range(c + 1) for c in budget.caps]):
        brute += is_feasible(r, budget)
    assert count_feasible(budget) == brute
