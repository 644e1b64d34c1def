"""File formats and artifact plumbing for the CLI pipeline.

Datasets are JSON lines of pre-tokenized ids: {"prompt": [...], "answer":
[...]}.  JSON artifacts are written with sorted keys and a trailing
newline, so identical inputs reproduce byte-identical files.  Artifacts
carry the content hashes of the inputs that produced them, and manifests
pin the raw file hashes of everything a run consumes.
"""

from __future__ import annotations

import json
import os
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

from .allocation import BudgetSpec
from .criteria import ImportanceScores, PruningOrder
from .errors import DataError, StalenessError, ValidationError
from .fitness import SearchSample
from .hashing import file_sha256
from .model import ModelSpec
from .search import SearchConfig

_MANIFEST_INPUTS = ("model_spec", "dataset", "order", "budget", "search")
_MANIFEST_OPTIONAL = ("scores", "cache")


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_json(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc


def load_dataset(path) -> list[SearchSample]:
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                samples.append(SearchSample(prompt=tuple(obj["prompt"]), answer=tuple(obj["answer"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from exc
            except ValidationError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from exc
    if not samples:
        raise DataError(f"{path}: dataset is empty")
    return samples


def save_dataset(samples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({"prompt": list(s.prompt), "answer": list(s.answer)}) + "\n")


def load_model_spec(path) -> ModelSpec:
    obj = read_json(path)
    if isinstance(obj, dict) and "spec" in obj and "layers" not in obj:
        obj = obj["spec"]
    return ModelSpec.from_json(obj)


def write_model_spec(spec: ModelSpec, path) -> None:
    write_json(spec.to_json(), path)


def write_scores_artifact(scores: ImportanceScores, provenance: dict, path) -> None:
    obj = scores.to_json()
    obj["provenance"] = provenance
    write_json(obj, path)


def load_scores_artifact(path) -> tuple[ImportanceScores, dict]:
    obj = read_json(path)
    provenance = obj.pop("provenance", {})
    return ImportanceScores.from_json(obj), provenance


def write_order_artifact(order: PruningOrder, provenance: dict, path) -> None:
    obj = order.to_json()
    obj["provenance"] = provenance
    write_json(obj, path)


def load_order_artifact(path) -> tuple[PruningOrder, dict]:
    obj = read_json(path)
    provenance = obj.pop("provenance", {})
    return PruningOrder.from_json(obj), provenance


def load_budget(path, spec: ModelSpec | None = None) -> BudgetSpec:
    obj = read_json(path)
    if "caps" not in obj and spec is not None:
        obj = dict(obj)
        obj["caps"] = [n - k for n, k in zip(spec.experts_per_layer, spec.fanout)]
    budget = BudgetSpec.from_json(obj)
    if spec is not None:
        expected = tuple(n - k for n, k in zip(spec.experts_per_layer, spec.fanout))
        if budget.caps != expected:
            raise ValidationError(f"budget caps {budget.caps} disagree with the model's {expected}")
    return budget


def load_search_config(path) -> SearchConfig:
    return SearchConfig.from_json(read_json(path))


def load_allocation(path) -> tuple[int, ...]:
    obj = read_json(path)
    if not isinstance(obj, list) or not all(isinstance(x, int) for x in obj):
        raise ValidationError(f"{path}: allocation must be a JSON array of integers")
    return tuple(obj)


def write_allocation(alloc, path) -> None:
    write_json(list(int(r) for r in alloc), path)


@dataclass(frozen=True)
class Manifest:
    """Pinned inputs of a search or brute-force run."""

    paths: dict
    out_dir: Path

    def path(self, key: str) -> Path:
        return self.paths[key]

    def has(self, key: str) -> bool:
        return key in self.paths


def load_manifest(path) -> Manifest:
    obj = read_json(path)
    base = Path(path).resolve().parent
    missing = [k for k in _MANIFEST_INPUTS if k not in obj]
    if missing:
        raise ValidationError(f"manifest missing entries: {', '.join(missing)}")
    if "out_dir" not in obj:
        raise ValidationError("manifest missing entries: out_dir")
    paths = {}
    for key in _MANIFEST_INPUTS + _MANIFEST_OPTIONAL:
        if key not in obj:
            continue
        entry = obj[key]
        if not isinstance(entry, dict) or "path" not in entry or "sha256" not in entry:
            raise ValidationError(f"manifest entry '{key}' needs 'path' and 'sha256'")
        file_path = (base / entry["path"]).resolve()
        if not file_path.exists():
            raise FileNotFoundError(f"manifest entry '{key}': no such file {file_path}")
        actual = file_sha256(file_path)
        if actual != entry["sha256"]:
            raise StalenessError(
                f"manifest entry '{key}': file hash {actual[:12]}... does not match recorded {str(entry['sha256'])[:12]}..."
            )
        paths[key] = file_path
    return Manifest(paths=paths, out_dir=(base / obj["out_dir"]).resolve())


def manifest_entry(path, base: Path | None = None) -> dict:
    p = Path(path)
    rel = os.path.relpath(p, base) if base is not None else str(p)
    return {"path": rel, "sha256": file_sha256(p)}


@contextmanager
def output_lock(out_dir):
    """Guard against concurrent writers to one output directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OSError(f"{out}: another run holds the lock ({lock}); remove it if stale") from None
    os.close(fd)
    try:
        yield out
    finally:
        lock.unlink(missing_ok=True)
