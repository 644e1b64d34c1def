import hypothesis
import numpy as np
import pytest

from moeprune import (
    BudgetSpec,
    CalibrationSet,
    Criterion,
    ModelSpec,
    SearchSample,
    build_cache,
    build_model,
    calibrate,
    make_order,
)

hypothesis.settings.register_profile("workbench", deadline=None, max_examples=50)
hypothesis.settings.load_profile("workbench")


def make_samples(vocab_size, count, seed, prompt_len=5, answer_len=5):
    rng = np.random.default_rng(seed)
    return [
        SearchSample(
            prompt=tuple(int(t) for t in rng.integers(vocab_size, size=prompt_len)),
            answer=tuple(int(t) for t in rng.integers(vocab_size, size=answer_len)),
        )
        for _ in range(count)
    ]


@pytest.fixture(scope="session")
def tiny_spec():
    return ModelSpec(
        layers=2,
        experts_per_layer=4,
        fanout=2,
        hidden_dim=8,
        expert_hidden_dim=16,
        vocab_size=32,
        max_seq_len=16,
        weight_seed=7,
        weight_scale=0.5,
    )


@pytest.fixture(scope="session")
def tiny_model(tiny_spec):
    return build_model(tiny_spec)


@pytest.fixture(scope="session")
def search_setup():
    """A shared small search instance: model, order, budget, dataset, cache."""
    spec = ModelSpec(
        layers=3,
        experts_per_layer=6,
        fanout=2,
        hidden_dim=16,
        expert_hidden_dim=24,
        vocab_size=24,
        max_seq_len=16,
        weight_seed=11,
        weight_scale=0.5,
    )
    model = build_model(spec)
    samples = make_samples(spec.vocab_size, 16, seed=0)
    calib = CalibrationSet(sequences=tuple(s.tokens for s in samples))
    order = make_order(calibrate(model, calib, Criterion.REAP))
    budget = BudgetSpec.from_model_spec(spec, budget=6)
    cache = build_cache(model, samples)
    return spec, model, order, budget, samples, cache


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            if getattr(rep, "when", "call") != "call":
                continue
            if "test_acceptance.py::" in rep.nodeid:
                rows.append((rep.nodeid.split("::")[-1], status == "passed"))
    if rows:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name, ok in sorted(rows):
            terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}")
