"""Command-line front end: gen-model, calibrate, cache-logits, search,
evaluate, brute-force.

Exit codes: 0 success, 2 validation, 3 staleness, 4 size/limit, 5 I/O.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .allocation import BudgetSpec, Parity, is_feasible, uniform_allocation
from .criteria import CalibrationSet, Criterion, calibrate, make_order
from .errors import SizeLimitError, StalenessError, ValidationError
from .fitness import (
    FitnessKind,
    build_cache,
    dataset_content_hash,
    dataset_fitness,
    load_cache,
    save_cache,
)
from .hashing import file_sha256
from .model import apply_allocation, build_model, spec_hash
from .search import SearchConfig, brute_force_table, run_search
from .specdec import SpecDecConfig, specdec_fitness
from . import io


def _load_model(path):
    spec = io.load_model_spec(path)
    return spec, build_model(spec)


def cmd_gen_model(args) -> int:
    spec = io.load_model_spec(args.spec_file)
    io.write_model_spec(spec, args.out)
    print(f"model spec hash {spec_hash(spec)}")
    print(f"wrote {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    spec, model = _load_model(args.model_spec)
    samples = io.load_dataset(args.dataset)
    data = CalibrationSet(sequences=tuple(s.tokens for s in samples), name=str(args.dataset))
    scores = calibrate(model, data, Criterion(args.criterion))
    order = make_order(scores)
    provenance = {
        "model_spec_hash": spec_hash(spec),
        "dataset_hash": dataset_content_hash(samples),
        "criterion": scores.criterion.value,
    }
    with io.output_lock(args.out) as out:
        scores_path = out / f"scores_{scores.criterion.value}.json"
        order_path = out / f"order_{scores.criterion.value}.json"
        io.write_scores_artifact(scores, provenance, scores_path)
        io.write_order_artifact(order, provenance, order_path)
    print(f"wrote {scores_path}")
    print(f"wrote {order_path}")
    return 0


def cmd_cache_logits(args) -> int:
    spec, model = _load_model(args.model_spec)
    samples = io.load_dataset(args.dataset)
    for i, s in enumerate(samples):
        if len(s.tokens) > spec.max_seq_len:
            raise ValidationError(
                f"{args.dataset}: line {i + 1}: combined length {len(s.tokens)}"
                f" exceeds max_seq_len {spec.max_seq_len}"
            )
    cache = build_cache(model, samples)
    save_cache(cache, args.out)
    print(f"wrote {args.out} ({len(cache.rows)} sample blocks, vocab {cache.vocab_size})")
    return 0


def _density_rows(spec, alloc):
    rows = []
    for layer, r in enumerate(alloc):
        n = spec.experts_per_layer[layer]
        rows.append((layer, n, r, 1.0 - r / n))
    return rows


def _print_density(spec, alloc) -> None:
    print(f"{'layer':>5} {'experts':>8} {'removed':>8} {'density':>8}")
    for layer, n, r, density in _density_rows(spec, alloc):
        print(f"{layer:>5} {n:>8} {r:>8} {density:>8.4f}")


def _load_run_inputs(manifest):
    spec = io.load_model_spec(manifest.path("model_spec"))
    model = build_model(spec)
    samples = io.load_dataset(manifest.path("dataset"))
    order, _ = io.load_order_artifact(manifest.path("order"))
    budget = io.load_budget(manifest.path("budget"), spec)
    config = io.load_search_config(manifest.path("search"))
    if manifest.has("cache"):
        cache = load_cache(manifest.path("cache"))
    else:
        cache = build_cache(model, samples)
    return spec, model, samples, order, budget, config, cache


def cmd_search(args) -> int:
    manifest = io.load_manifest(args.manifest)
    spec, model, samples, order, budget, config, cache = _load_run_inputs(manifest)
    specdec_config = None
    if config.fitness is FitnessKind.SPEC_DEC:
        specdec_config = SpecDecConfig(prompts=tuple(s.prompt for s in samples), seed=config.seed)
    run = run_search(model, order, budget, samples, cache, config, specdec_config=specdec_config)
    with io.output_lock(manifest.out_dir) as out:
        obj = run.to_json()
        obj["provenance"] = {
            "model_spec_hash": spec_hash(spec),
            "dataset_hash": dataset_content_hash(samples),
            "manifest": io.manifest_entry(args.manifest, base=out),
        }
        io.write_json(obj, out / "run.json")
        io.write_allocation(run.best_allocation, out / "best_allocation.json")
        with open(out / "generations.jsonl", "w", encoding="utf-8") as fh:
            for g in run.history:
                fh.write(
                    '{"generation": %d, "best": %s, "mean": %s, "best_allocation": %s}\n'
                    % (g.generation, repr(g.best), repr(g.mean), list(g.best_allocation))
                )
        with open(out / "density.csv", "w", encoding="utf-8") as fh:
            fh.write("layer,experts,removed,density\n")
            for layer, n, r, density in _density_rows(spec, run.best_allocation):
                fh.write(f"{layer},{n},{r},{density!r}\n")
    print(f"best {run.best_fitness.kind.value} fitness {run.best_fitness.value:.6f}")
    print(f"best allocation {list(run.best_allocation)}")
    print(f"evaluations {run.evaluations}")
    _print_density(spec, run.best_allocation)
    print(f"wrote {manifest.out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    spec, model = _load_model(args.model_spec)
    samples = io.load_dataset(args.dataset)
    order, _ = io.load_order_artifact(args.order)
    alloc = io.load_allocation(args.allocation)
    budget = BudgetSpec.from_model_spec(spec, budget=sum(alloc), parity=Parity(args.parity))
    if not is_feasible(alloc, budget):
        raise ValidationError(f"allocation {list(alloc)} is not feasible for this model")
    uniform = uniform_allocation(budget)
    kinds = [FitnessKind(k) for k in (args.fitness or ["esap"])]
    cache = build_cache(model, samples)
    rows = []
    for label, allocation in (("given", alloc), ("uniform", uniform)):
        candidate = apply_allocation(model, order, allocation)
        scores = {}
        for kind in kinds:
            if kind is FitnessKind.SPEC_DEC:
                sd = SpecDecConfig(prompts=tuple(s.prompt for s in samples), seed=args.seed)
                scores[kind.value] = specdec_fitness(model, candidate, sd).value
            else:
                rng = np.random.default_rng(args.seed)
                scores[kind.value] = dataset_fitness(cache, candidate, samples, kind, rng=rng).value
        rows.append({"label": label, "allocation": list(allocation), "scores": scores})

    header = f"{'allocation':>12}" + "".join(f" {k.value:>12}" for k in kinds)
    print(header)
    for row in rows:
        cells = "".join(f" {row['scores'][k.value]:>12.6f}" for k in kinds)
        print(f"{row['label']:>12}{cells}")
    if args.out:
        io.write_json(
            {
                "rows": rows,
                "provenance": {
                    "model_spec_hash": spec_hash(spec),
                    "dataset_hash": dataset_content_hash(samples),
                    "order_file_sha256": file_sha256(args.order),
                },
            },
            args.out,
        )
        print(f"wrote {args.out}")
    return 0


def cmd_brute_force(args) -> int:
    manifest = io.load_manifest(args.manifest)
    spec, model, samples, order, budget, config, cache = _load_run_inputs(manifest)
    table = brute_force_table(model, order, budget, samples, cache, args.limit, kind=config.fitness)
    best_alloc, best_value = table[0]
    for alloc, value in table[1:]:
        if value.value > best_value.value:
            best_alloc, best_value = alloc, value
    with io.output_lock(manifest.out_dir) as out:
        io.write_json(
            {
                "fitness": config.fitness.value,
                "table": [{"allocation": list(a), "value": v.value} for a, v in table],
                "best_allocation": list(best_alloc),
                "best_value": best_value.value,
                "provenance": {
                    "model_spec_hash": spec_hash(spec),
                    "dataset_hash": dataset_content_hash(samples),
                },
            },
            out / "brute_force.json",
        )
    print(f"feasible allocations {len(table)}")
    print(f"best {config.fitness.value} fitness {best_value.value:.6f} at {list(best_alloc)}")
    print(f"wrote {manifest.out_dir / 'brute_force.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moeprune", description="Expert-pruning workbench for toy sparse-MoE models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="validate a model spec and write the canonical artifact")
    p.add_argument("spec_file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("calibrate", help="compute importance scores and the pruning order")
    p.add_argument("--model-spec", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--criterion", required=True, choices=[c.value for c in Criterion])
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("cache-logits", help="cache full-model distributions at answer positions")
    p.add_argument("--model-spec", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cache_logits)

    p = sub.add_parser("search", help="evolutionary allocation search from a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("evaluate", help="score an allocation against the uniform baseline")
    p.add_argument("--model-spec", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--order", required=True)
    p.add_argument("--allocation", required=True)
    p.add_argument("--fitness", action="append", choices=[k.value for k in FitnessKind])
    p.add_argument("--parity", default="any", choices=[p.value for p in Parity])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("brute-force", help="exhaustive fitness table over the feasible set")
    p.add_argument("manifest")
    p.add_argument("--limit", type=int, default=10000)
    p.set_defaults(func=cmd_brute_force)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StalenessError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except SizeLimitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
