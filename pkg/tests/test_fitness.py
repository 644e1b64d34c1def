import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moeprune import (
    CoverageError,
    DataError,
    FitnessKind,
    FitnessValue,
    SearchSample,
    StalenessError,
    ValidationError,
    acceptance_prob,
    answer_contexts,
    apply_allocation,
    build_cache,
    dataset_fitness,
    esap_at_context,
    load_cache,
    sap_at_context,
    save_cache,
    teacher_forced_distributions,
    tv_distance,
)
from moeprune.fitness import sap_draws

from conftest import make_samples


def random_distribution(rng, size):
    raw = rng.random(size) + 1e-9
    return raw / raw.sum()


def test_answer_contexts_examples():
    assert answer_contexts(SearchSample(prompt=(1, 2, 3), answer=(4, 5))) == (2, 3)
    assert answer_contexts(SearchSample(prompt=(1,), answer=(2,))) == (0,)


@given(
    prompt=st.lists(st.integers(0, 9), min_size=1, max_size=6),
    answer=st.lists(st.integers(0, 9), min_size=1, max_size=6),
)
def test_answer_contexts_cover_every_answer_token(prompt, answer):
    sample = SearchSample(prompt=tuple(prompt), answer=tuple(answer))
    contexts = answer_contexts(sample)
    assert len(contexts) == len(answer)
    assert list(contexts) == sorted(contexts)
    assert contexts[0] == len(prompt) - 1


def test_empty_answer_rejected():
    with pytest.raises(DataError):
        SearchSample(prompt=(1,), answer=())


def test_acceptance_prob_examples():
    assert acceptance_prob(0.3, 0.3) == 1.0
    assert acceptance_prob(0.2, 0.4) == 0.5
    assert acceptance_prob(0.9, 0.1) == 1.0
    with pytest.raises(ValidationError):
        acceptance_prob(0.2, 0.0)


def test_esap_examples():
    assert esap_at_context([0.5, 0.5], [0.5, 0.5]) == 1.0
    assert esap_at_context([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert esap_at_context([0.5, 0.5], [1.0, 0.0]) == 0.5
    with pytest.raises(ValidationError, match="shape"):
        esap_at_context([0.5, 0.5], [1.0, 0.0, 0.0])


def test_tv_examples():
    assert tv_distance([0.25, 0.75], [0.25, 0.75]) == 0.0
    assert tv_distance([1.0, 0.0], [0.0, 1.0]) == 1.0


def test_tv_identity_on_seeded_pairs():
    rng = np.random.default_rng(123)
    for _ in range(500):
        p = random_distribution(rng, 32)
        q = random_distribution(rng, 32)
        assert abs(esap_at_context(p, q) + tv_distance(p, q) - 1.0) <= 1e-12


@given(seed=st.integers(0, 2**32 - 1), size=st.integers(2, 64))
def test_tv_identity_property(seed, size):
    rng = np.random.default_rng(seed)
    p = random_distribution(rng, size)
    q = random_distribution(rng, size)
    assert abs(esap_at_context(p, q) + tv_distance(p, q) - 1.0) <= 1e-12
    assert esap_at_context(p, q) == esap_at_context(q, p)
    assert 0.0 <= esap_at_context(p, q) <= 1.0


def test_sap_point_mass_is_target_mass():
    p = np.array([0.2, 0.5, 0.3])
    q = np.array([0.0, 1.0, 0.0])
    rng = np.random.default_rng(0)
    assert sap_at_context(p, q, rng) == 0.5


def test_sap_equal_distributions_always_accept():
    p = np.array([0.25, 0.25, 0.5])
    rng = np.random.default_rng(3)
    assert all(sap_at_context(p, p, rng) == 1.0 for _ in range(20))


def test_sap_rejects_non_distribution():
    with pytest.raises(ValidationError):
        sap_at_context(np.array([0.5, 0.5]), np.array([0.5, 0.4]), np.random.default_rng(0))


def test_sap_mean_converges_to_esap():
    rng = np.random.default_rng(11)
    p = random_distribution(rng, 32)
    q = random_distribution(rng, 32)
    draws = np.array([sap_at_context(p, q, rng) for _ in range(20_000)])
    se = draws.std(ddof=1) / math.sqrt(len(draws))
    assert abs(draws.mean() - esap_at_context(p, q)) <= 3 * se


def test_sap_draws_matches_single_draw_path():
    rng = np.random.default_rng(5)
    p = random_distribution(rng, 16)
    q = random_distribution(rng, 16)
    single = sap_at_context(p, q, np.random.default_rng(42))
    batch = sap_draws(p, q, np.random.default_rng(42), 1)
    assert batch[0] == single


def test_fitness_value_bounds():
    FitnessValue(0.5, FitnessKind.ESAP)
    with pytest.raises(ValidationError):
        FitnessValue(1.5, FitnessKind.ESAP)
    with pytest.raises(ValidationError):
        FitnessValue(0.5, FitnessKind.KL)  # stored negated, must be <= 0
    with pytest.raises(ValidationError):
        FitnessValue(float("nan"), FitnessKind.ESAP)


def test_full_model_self_score_is_one(search_setup):
    _, model, _, _, samples, cache = search_setup
    value = dataset_fitness(cache, model, samples, FitnessKind.ESAP)
    assert value.value == pytest.approx(1.0, abs=1e-9)


def test_nll_matches_independent_recomputation(search_setup):
    _, model, _, _, samples, cache = search_setup
    got = dataset_fitness(cache, model, samples, FitnessKind.NLL).value

    sample_means = []
    for sample in samples:
        probs = teacher_forced_distributions(model, sample.tokens)
        nlls = []
        for offset, token in enumerate(sample.answer):
            context = len(sample.prompt) - 1 + offset
            nlls.append(-math.log(probs[context][token]))
        sample_means.append(sum(nlls) / len(nlls))
    expected = -sum(sample_means) / len(sample_means)
    assert got == pytest.approx(expected, abs=1e-12)


def test_single_context_dataset_equals_context_score(search_setup):
    _, model, order, _, _, _ = search_setup
    sample = SearchSample(prompt=(1, 2, 3), answer=(4,))
    cache = build_cache(model, [sample])
    candidate = apply_allocation(model, order, (2, 0, 1))
    got = dataset_fitness(cache, candidate, [sample], FitnessKind.ESAP).value
    p = cache.rows[0][0]
    q = teacher_forced_distributions(candidate, sample.tokens)[2]
    assert got == esap_at_context(p, q)


def test_dataset_esap_invariant_to_sample_order(search_setup):
    _, model, order, _, samples, _ = search_setup
    candidate = apply_allocation(model, order, (2, 2, 2))
    forward = dataset_fitness(build_cache(model, samples), candidate, samples, FitnessKind.ESAP).value
    shuffled = list(reversed(samples))
    backward = dataset_fitness(build_cache(model, shuffled), candidate, shuffled, FitnessKind.ESAP).value
    assert forward == pytest.approx(backward, abs=1e-12)


def test_dataset_esap_is_mean_of_per_sample_means(search_setup):
    _, model, order, _, samples, cache = search_setup
    candidate = apply_allocation(model, order, (1, 2, 3))
    whole = dataset_fitness(cache, candidate, samples, FitnessKind.ESAP).value
    parts = [
        dataset_fitness(build_cache(model, [s]), candidate, [s], FitnessKind.ESAP).value for s in samples
    ]
    assert whole == pytest.approx(sum(parts) / len(parts), abs=1e-12)


def test_bounds_for_pruned_candidates(search_setup):
    _, model, order, _, samples, cache = search_setup
    for alloc in ((4, 0, 0), (0, 4, 2), (2, 2, 2)):
        candidate = apply_allocation(model, order, alloc)
        for kind in (FitnessKind.ESAP, FitnessKind.SAP):
            value = dataset_fitness(cache, candidate, samples, kind, rng=np.random.default_rng(0)).value
            assert 0.0 <= value <= 1.0
        for kind in (FitnessKind.KL, FitnessKind.NLL):
            assert dataset_fitness(cache, candidate, samples, kind).value <= 0.0


def test_stale_cache_rejected(search_setup, tiny_model):
    _, model, _, _, samples, cache = search_setup
    with pytest.raises(StalenessError, match="model spec"):
        dataset_fitness(cache, tiny_model, samples, FitnessKind.ESAP)
    other = make_samples(model.spec.vocab_size, 4, seed=99)
    with pytest.raises(StalenessError, match="dataset"):
        dataset_fitness(cache, model, other, FitnessKind.ESAP)


def test_cache_coverage_checked(search_setup):
    import dataclasses

    _, model, _, _, samples, cache = search_setup
    missing_block = dataclasses.replace(cache, rows=cache.rows[:-1])
    with pytest.raises(CoverageError):
        dataset_fitness(missing_block, model, samples, FitnessKind.ESAP)
    short_rows = dataclasses.replace(cache, rows=(cache.rows[0][:-1],) + cache.rows[1:])
    with pytest.raises(CoverageError):
        dataset_fitness(short_rows, model, samples, FitnessKind.ESAP)


def test_specdec_kind_rejected_by_dataset_fitness(search_setup):
    _, model, _, _, samples, cache = search_setup
    with pytest.raises(ValidationError):
        dataset_fitness(cache, model, samples, FitnessKind.SPEC_DEC)


def test_cache_round_trip(tmp_path, search_setup):
    _, model, _, _, samples, cache = search_setup
    path = tmp_path / "logits.cache"
    save_cache(cache, path)
    loaded = load_cache(path)
    assert loaded.model_spec_hash == cache.model_spec_hash
    assert loaded.dataset_hash == cache.dataset_hash
    assert loaded.vocab_size == cache.vocab_size
    assert len(loaded.rows) == len(cache.rows)
    for a, b in zip(loaded.rows, cache.rows):
        assert np.array_equal(a, b)
    assert all(abs(r.sum() - 1.0) <= 1e-9 for block in loaded.rows for r in block)


def test_cache_load_rejects_garbage(tmp_path):
    path = tmp_path / "bogus.cache"
    path.write_bytes(b"not a cache")
    with pytest.raises(ValidationError, match="cache"):
        load_cache(path)


def test_cache_load_rejects_truncation(tmp_path, search_setup):
    _, model, _, _, samples, cache = search_setup
    path = tmp_path / "trunc.cache"
    save_cache(cache, path)
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(ValidationError, match="payload"):
        load_cache(path)
