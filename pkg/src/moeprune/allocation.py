"""Feasible layer-wise pruning allocations under a global budget.

An allocation is a plain tuple of per-layer removal counts.  It is feasible
for a budget when it sums to the global budget, every entry stays within
its layer's cap (experts minus fanout), and, under even parity, every entry
lies on the even lattice.  Even parity keeps allocations compatible with
expert-parallel sharding; it is modeled as a constraint on the values
themselves so that construction and mutation stay closed under it.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import FeasibilityError, SizeLimitError, ValidationError

Allocation = tuple[int, ...]


class Parity(str, Enum):
    ANY = "any"
    EVEN = "even"


@dataclass(frozen=True)
class BudgetSpec:
    """Global budget, per-layer caps, and the parity lattice."""

    budget: int
    caps: tuple[int, ...]
    parity: Parity = Parity.ANY

    def __post_init__(self):
        object.__setattr__(self, "caps", tuple(int(c) for c in self.caps))
        object.__setattr__(self, "parity", Parity(self.parity))
        if not self.caps:
            raise ValidationError("caps: at least one layer is required")
        if any(c < 0 for c in self.caps):
            raise ValidationError(f"caps: entries must be non-negative, got {self.caps}")
        if self.budget < 0:
            raise ValidationError(f"budget: must be non-negative, got {self.budget}")
        if self.parity is Parity.EVEN and self.budget % 2 != 0:
            raise ValidationError(f"budget: {self.budget} is odd but parity is even")
        if self.budget > sum(self.effective_caps):
            raise FeasibilityError(
                f"budget {self.budget} exceeds total capacity {sum(self.effective_caps)}"
                f" (parity={self.parity.value})"
            )

    @property
    def num_layers(self) -> int:
        return len(self.caps)

    @property
    def unit(self) -> int:
        return 2 if self.parity is Parity.EVEN else 1

    @property
    def effective_caps(self) -> tuple[int, ...]:
        u = self.unit
        return tuple((c // u) * u for c in self.caps)

    @classmethod
    def from_model_spec(cls, spec, budget: int, parity: Parity = Parity.ANY) -> "BudgetSpec":
        caps = tuple(n - k for n, k in zip(spec.experts_per_layer, spec.fanout))
        return cls(budget=budget, caps=caps, parity=parity)

    def to_json(self) -> dict:
        return {"budget": self.budget, "parity": self.parity.value, "caps": list(self.caps)}

    @classmethod
    def from_json(cls, obj: dict) -> "BudgetSpec":
        try:
            return cls(budget=int(obj["budget"]), caps=obj["caps"], parity=Parity(obj["parity"]))
        except KeyError as exc:
            raise ValidationError(f"budget spec missing field: {exc}") from exc


def _check_layers(budget: BudgetSpec, num_layers: int | None) -> int:
    if num_layers is not None and num_layers != budget.num_layers:
        raise ValidationError(f"num_layers {num_layers} disagrees with caps length {budget.num_layers}")
    return budget.num_layers


def is_feasible(alloc, budget: BudgetSpec) -> bool:
    if len(alloc) != budget.num_layers:
        return False
    if any(int(r) != r for r in alloc):
        return False
    total = 0
    for r, cap in zip(alloc, budget.caps):
        if r < 0 or r > cap:
            return False
        if budget.parity is Parity.EVEN and r % 2 != 0:
            return False
        total += r
    return total == budget.budget


def uniform_allocation(budget: BudgetSpec, num_layers: int | None = None) -> Allocation:
    """Near-uniform allocation: floor(B/L) per layer plus the remainder
    pushed one parity-unit at a time onto the lowest-index layers with
    spare cap."""
    layers = _check_layers(budget, num_layers)
    unit = budget.unit
    caps = budget.effective_caps
    r = [0] * layers
    remaining = budget.budget
    while remaining > 0:
        placed = False
        for i in range(layers):
            if remaining == 0:
                break
            if r[i] + unit <= caps[i]:
                r[i] += unit
                remaining -= unit
                placed = True
        if not placed:
            raise FeasibilityError(f"no feasible near-uniform allocation for budget {budget.budget}")
    return tuple(r)


def _pack(budget: BudgetSpec, fill_order) -> Allocation:
    caps = budget.effective_caps
    unit = budget.unit
    r = [0] * budget.num_layers
    remaining = budget.budget
    for i in fill_order:
        take = min(caps[i], remaining)
        take -= take % unit
        r[i] = take
        remaining -= take
        if remaining == 0:
            break
    if remaining:
        raise FeasibilityError(f"cannot pack budget {budget.budget} within caps {budget.caps}")
    return tuple(r)


def patterned_allocations(budget: BudgetSpec, num_layers: int | None = None) -> list[Allocation]:
    """Early-, middle-, and late-heavy seeds: the budget packed greedily
    into one third of the layer stack, spilling to the nearest layers."""
    layers = _check_layers(budget, num_layers)
    span = -(-layers // 3)  # ceil
    regions = [(0, span), ((layers - span) // 2, (layers - span) // 2 + span), (layers - span, layers)]
    seeds = []
    for start, stop in regions:
        def distance(i, start=start, stop=stop):
            if start <= i < stop:
                return 0
            return start - i if i < start else i - stop + 1

        fill_order = sorted(range(layers), key=lambda i: (distance(i), i))
        seeds.append(_pack(budget, fill_order))
    return seeds


def _suffix_counts(budget: BudgetSpec) -> list[list[int]]:
    # counts[l][b]: feasible ways to spend b lattice units on layers l..L-1
    unit = budget.unit
    caps_u = [c // unit for c in budget.caps]
    total_u = budget.budget // unit
    layers = budget.num_layers
    counts = [[0] * (total_u + 1) for _ in range(layers + 1)]
    counts[layers][0] = 1
    for l in range(layers - 1, -1, -1):
        for b in range(total_u + 1):
            acc = 0
            for x in range(min(caps_u[l], b) + 1):
                acc += counts[l + 1][b - x]
            counts[l][b] = acc
    return counts


def count_feasible(budget: BudgetSpec) -> int:
    """Exact size of the feasible set."""
    return _suffix_counts(budget)[0][budget.budget // budget.unit]


def _randint_below(rng: np.random.Generator, n: int) -> int:
    if n <= 0:
        raise ValidationError("cannot sample from an empty range")
    if n <= 2**63:
        return int(rng.integers(n))
    bits = n.bit_length()
    while True:
        value = 0
        for bit in rng.integers(0, 2, size=bits):
            value = (value << 1) | int(bit)
        if value < n:
            return value


def random_allocation(budget: BudgetSpec, rng: np.random.Generator, num_layers: int | None = None) -> Allocation:
    """Exactly uniform draw from the feasible set, by sampling each layer's
    value proportionally to the count of feasible completions."""
    _check_layers(budget, num_layers)
    counts = _suffix_counts(budget)
    unit = budget.unit
    caps_u = [c // unit for c in budget.caps]
    b = budget.budget // unit
    if counts[0][b] == 0:
        raise FeasibilityError("feasible set is empty")
    r = []
    for l in range(budget.num_layers):
        t = _randint_below(rng, counts[l][b])
        cum = 0
        for x in range(min(caps_u[l], b) + 1):
            cum += counts[l + 1][b - x]
            if t < cum:
                r.append(x * unit)
                b -= x
                break
    return tuple(r)


def enumerate_feasible(budget: BudgetSpec, limit: int, num_layers: int | None = None) -> list[Allocation]:
    """Complete feasible set in lexicographic order; fails fast when its
    exact size exceeds ``limit``."""
    _check_layers(budget, num_layers)
    counts = _suffix_counts(budget)
    total = counts[0][budget.budget // budget.unit]
    if total > limit:
        raise SizeLimitError(f"feasible set has {total} allocations, over the limit of {limit}")
    unit = budget.unit
    caps_u = [c // unit for c in budget.caps]
    layers = budget.num_layers
    out: list[Allocation] = []
    prefix: list[int] = []

    def rec(l: int, b: int):
        if l == layers:
            out.append(tuple(prefix))
            return
        for x in range(min(caps_u[l], b) + 1):
            if counts[l + 1][b - x] > 0:
                prefix.append(x * unit)
                rec(l + 1, b - x)
                prefix.pop()

    rec(0, budget.budget // unit)
    return out
