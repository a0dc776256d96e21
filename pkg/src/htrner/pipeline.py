"""Glue between data, network, codec and metric used by the CLI and experiments."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from htrner.data import (
    SPLITS,
    Sample,
    load_image,
    save_image,
)
from htrner.metrics import RecordScore, Track, score_dataset
from htrner.net import NetworkConfig, ParamStore
from htrner.tags import AnnotatedRecord, AnnotatedWord, SymbolTable, TagScheme, build_symbol_table, decode
from htrner.train import predict


def corpus_table(samples: Iterable[Sample], scheme: TagScheme | str, closed_world: bool = False) -> SymbolTable:
    """Symbol table over the annotations of every split."""
    return build_symbol_table([s.record for s in samples], scheme, closed_world)


def encode_all(samples: Iterable[Sample], scheme: TagScheme | str, table: SymbolTable) -> None:
    for s in samples:
        s.encode(scheme, table)


def by_split(samples: Iterable[Sample]) -> dict[str, list[Sample]]:
    out: dict[str, list[Sample]] = {sp: [] for sp in SPLITS}
    for s in samples:
        out[s.split].append(s)
    return out


def decode_predictions(
    params: ParamStore,
    net_config: NetworkConfig,
    table: SymbolTable,
    scheme: TagScheme | str,
    images: Sequence[np.ndarray],
) -> list[AnnotatedRecord]:
    """Best-path decode each image and parse it with the repairing codec."""
    hyps = predict(params, net_config, images, blank=table.blank_index)
    return [decode(h, scheme, table) for h in hyps]


def group_by_record(samples: Sequence[Sample], predictions: Sequence[AnnotatedRecord]) -> dict[str, list[AnnotatedWord]]:
    """Concatenate per-sample predictions into record-level word lists, in sample order."""
    out: dict[str, list[AnnotatedWord]] = {}
    for s, p in zip(samples, predictions):
        out.setdefault(s.record_id, []).extend(p.words)
    return out


def evaluate_records(
    gt: dict[str, AnnotatedRecord],
    predicted: dict[str, Sequence[AnnotatedWord]],
    track: Track | str,
    all_words: bool = False,
    one_to_one: bool = True,
    matching: str = "optimal",
) -> tuple[float, list[RecordScore]]:
    """Dataset score; records without a prediction are scored against an empty one."""
    pairs = [(rec, list(predicted.get(rid, []))) for rid, rec in gt.items()]
    return score_dataset(pairs, track, all_words, one_to_one, matching)


def score_samples(
    params: ParamStore,
    net_config: NetworkConfig,
    table: SymbolTable,
    scheme: TagScheme | str,
    samples: Sequence[Sample],
    gt: dict[str, AnnotatedRecord],
) -> dict[str, float]:
    """Basic and complete track scores of ``samples`` against record ground truth."""
    preds = decode_predictions(params, net_config, table, scheme, [s.image for s in samples])
    grouped = group_by_record(samples, preds)
    wanted = {s.record_id for s in samples}
    gt = {k: v for k, v in gt.items() if k in wanted}
    return {t.value: evaluate_records(gt, grouped, t)[0] for t in Track}


# Prepared sample store ----------------------------------------------------------


@dataclass
class PreparedData:
    root: Path
    options: dict
    samples: list[Sample]


def write_prepared(
    samples: Sequence[Sample],
    out_dir: str | Path,
    options: dict,
    table: SymbolTable | None = None,
    scheme: TagScheme | str | None = None,
) -> Path:
    """Store samples as PNGs, annotation JSON lines and optional target text files."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    index = []
    for s in samples:
        rel = Path("images") / s.split / f"{s.sample_id}.png"
        (root / rel).parent.mkdir(parents=True, exist_ok=True)
        save_image(s.image, root / rel)
        entry = {
            "id": s.sample_id,
            "record_id": s.record_id,
            "split": s.split,
            "line_ids": list(s.line_ids),
            "image": rel.as_posix(),
            "words": [w.to_json() for w in s.record.words],
        }
        if table is not None and scheme is not None:
            trel = Path("targets") / s.split / f"{s.sample_id}.txt"
            (root / trel).parent.mkdir(parents=True, exist_ok=True)
            surface = table.to_surface(s.encode(scheme, table).target)
            (root / trel).write_text(" ".join(surface) + "\n", encoding="utf-8")
            entry["target"] = trel.as_posix()
        index.append(json.dumps(entry, ensure_ascii=False, sort_keys=True))
    (root / "samples.jsonl").write_text("\n".join(index) + "\n", encoding="utf-8")
    if table is not None:
        table.save(root / "symbols.txt")
    (root / "prepare.json").write_text(json.dumps(options, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return root


def read_prepared(root: str | Path, splits: Iterable[str] = SPLITS) -> PreparedData:
    root = Path(root)
    index_path = root / "samples.jsonl"
    if not index_path.exists():
        raise FileNotFoundError(f"{root} is not a prepared data directory (no samples.jsonl)")
    options = json.loads((root / "prepare.json").read_text(encoding="utf-8")) if (root / "prepare.json").exists() else {}
    wanted = set(splits)
    samples = []
    for n, line in enumerate(index_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            e = json.loads(line)
            if e["split"] not in wanted:
                continue
            words = tuple(AnnotatedWord.from_json(w) for w in e["words"])
            rec = AnnotatedRecord(words, e["record_id"])
            img = load_image(root / e["image"])
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"{index_path}:{n}: {exc}") from None
        samples.append(Sample(img, rec, e["id"], e["record_id"], e["split"], tuple(e.get("line_ids", ()))))
    return PreparedData(root, options, samples)

