"""``htrner`` command line: synth, prepare, train, decode, evaluate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import sys
from pathlib import Path
from typing import Sequence

from htrner import __version__
from htrner.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from htrner.data import (
    EXTRACTION_METHODS,
    ManifestError,
    build_samples,
    ground_truth_records,
    load_image,
    load_manifest,
    normalize_height,
)
from htrner.metrics import Track, scores_csv
from htrner.net import DEFAULT_BLOCKS, ConvBlock, NetworkConfig, init_params
from htrner.pipeline import (
    by_split,
    corpus_table,
    decode_predictions,
    encode_all,
    evaluate_records,
    read_prepared,
    write_prepared,
)
from htrner.synth import SynthConfig, synth_generate
from htrner.tags import AnnotatedWord, CodecError, SymbolTable, TagScheme, table_matches_scheme
from htrner.train import (
    OPTIMIZERS,
    NumericError,
    PhaseData,
    PhaseMismatchError,
    TrainConfig,
    TransferError,
    run_curriculum,
    transfer_init,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_run_manifest(path: Path, command: str, argv: Sequence[str], config: dict, seed, inputs, outputs, **extra) -> dict:
    """Snapshot of everything needed to rerun a command; rewritten with ``ended`` on completion."""
    doc = {
        "tool": "htrner",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "started": _now(),
        "ended": None,
    }
    doc.update(extra)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return doc


def finish_run_manifest(path: Path, doc: dict) -> None:
    doc["ended"] = _now()
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# synth ---------------------------------------------------------------------


def cmd_synth(args, argv) -> int:
    cfg = SynthConfig(n_records=args.records, oov_rate=args.oov_rate, grammar=args.grammar,
                      records_per_page=args.records_per_page)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out_dir)
    ds = synth_generate(args.seed, cfg)
    manifest = ds.write(out)
    doc = write_run_manifest(out / "run_manifest.json", "synth", argv, cfg.to_json(), args.seed, [], [manifest])
    doc.pop("started"), doc.pop("ended")
    # timestamps would break byte-identical reruns of the generated tree
    (out / "run_manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(ds.pages)} pages, {len(ds.records)} records to {out} (test OOV {100 * ds.oov_fraction('test'):.2f}%)")
    return EXIT_OK


# prepare -------------------------------------------------------------------


def cmd_prepare(args, argv) -> int:
    manifest_path = Path(args.manifest)
    try:
        pages = load_manifest(manifest_path)
    except FileNotFoundError:
        raise DataError(f"manifest not found: {manifest_path}") from None
    images = []
    for page in pages:
        p = manifest_path.parent / page.image
        try:
            images.append(load_image(p))
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read page image {p}: {exc}") from None
    try:
        samples = build_samples(pages, images, args.level, args.extraction, args.height)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    table = corpus_table(samples, args.scheme, args.closed_world)
    options = {
        "manifest": str(manifest_path), "level": args.level, "extraction": args.extraction,
        "height": args.height, "scheme": args.scheme, "closed_world": args.closed_world,
    }
    write_prepared(samples, args.out_dir, options, table, args.scheme)
    counts = {k: len(v) for k, v in by_split(samples).items()}
    print(f"prepared {len(samples)} {args.level} samples {counts} in {args.out_dir}")
    return EXIT_OK


# train ---------------------------------------------------------------------


def _net_config(args, num_classes: int, height: int, base: NetworkConfig | None = None) -> NetworkConfig:
    """Network from the architecture flags; unset flags fall back to ``base`` or the defaults."""
    blocks = base.conv_blocks if base else DEFAULT_BLOCKS
    if args.filters:
        filters = [int(f) for f in args.filters.split(",")]
        if len(filters) != len(blocks):
            raise UsageError(f"--filters needs {len(blocks)} comma-separated counts")
        blocks = tuple(ConvBlock(f, b.kernel, b.pool) for f, b in zip(filters, blocks))

    def pick(flag, name, default):
        if flag is not None:
            return flag
        return getattr(base, name) if base else default

    try:
        return NetworkConfig(
            num_classes, height, blocks,
            pick(args.lstm_layers, "lstm_layers", 3),
            pick(args.hidden, "lstm_hidden", 256),
            leaky_threshold=pick(args.leaky_threshold, "leaky_threshold", 0.0),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_phase(path: str) -> tuple[dict, list]:
    try:
        prep = read_prepared(path)
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(str(exc)) from None
    return prep.options, prep.samples


def cmd_train(args, argv) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        config = TrainConfig(
            lr0=args.lr, lr_decay=args.lr_decay, batch_size=args.batch, adv_weight=args.adv_weight,
            adv_epsilon=args.adv_epsilon, max_epochs=args.max_epochs, scheme=args.scheme,
            level=args.level, curriculum="lines_then_records" if args.curriculum else "off", seed=args.seed,
            early_stop_patience=args.patience, optimizer=args.optimizer,
            clip_norm=None if args.no_clip else args.clip_norm, record_max_epochs=args.record_epochs,
            log_wall_time=args.log_wall_time,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    sources = {config.level: args.data_dir}
    if args.curriculum:
        if not args.record_data:
            raise UsageError("--curriculum needs --record-data with record-level samples")
        sources = {"line": args.data_dir, "record": args.record_data}
    loaded = {lvl: _load_phase(p) for lvl, p in sources.items()}
    heights = {opts.get("height", s[0].image.shape[0] if s else None) for opts, s in loaded.values()}
    if len(heights) != 1:
        raise DataError(f"prepared data sets have different heights: {sorted(heights)}")
    height = heights.pop()
    every = [s for _, samples in loaded.values() for s in samples]
    if not every:
        raise DataError("no samples found")

    resume = load_checkpoint(args.resume) if args.resume else None
    provenance: dict = {}
    if resume is not None:
        table = resume.table
        net_config = resume.net_config
        params = resume.params
        config = resume.train_config or config
    else:
        table = corpus_table(every, config.scheme, args.closed_world)
        if args.transfer_from:
            src = load_checkpoint(args.transfer_from)
            target = _net_config(args, len(table), height, src.net_config)
            try:
                params, net_config = transfer_init(src.params, src.net_config, table, config.seed, target)
            except TransferError as exc:
                raise DataError(f"--transfer-from {args.transfer_from}: {exc}") from None
            provenance = {"transfer_from": str(args.transfer_from), "source_digest": src.params.digest(False)}
        else:
            net_config = _net_config(args, len(table), height)
            params = init_params(net_config, config.seed)
    try:
        encode_all(every, config.scheme, table)
    except CodecError as exc:
        raise DataError(f"cannot encode targets with the checkpoint's symbol table: {exc}") from None
    data = {}
    for lvl, (_, samples) in loaded.items():
        sp = by_split(samples)
        data[lvl] = PhaseData(sp["train"], sp["valid"])
    table.save(out / "symbols.txt")

    manifest_path = out / "run_manifest.json"
    doc = write_run_manifest(
        manifest_path, "train", argv,
        {"train": config.to_json(), "network": net_config.to_json()},
        config.seed, list(sources.values()) + ([args.transfer_from] if args.transfer_from else []),
        [out / "last.ckpt", out / "best.ckpt", out / "metrics.csv"],
        provenance=provenance,
    )

    def snapshot(res, which: str) -> Checkpoint:
        p = res.params if which == "last" else res.best_params
        return Checkpoint(net_config, table, p, config, res.state, dict(res.optimizer.slots),
                          res.optimizer.step_count, provenance, res.log.to_csv())

    def on_epoch(res, stats, improved):
        res.log.write(out / "metrics.csv")
        save_checkpoint(snapshot(res, "last"), out / "last.ckpt")
        if improved:
            save_checkpoint(snapshot(res, "best"), out / "best.ckpt")
        if stats is not None and not args.quiet:
            r = res.log.rows[-1]
            print(f"epoch {r['epoch']} [{r['phase']}] loss {r['train_loss']:.4f} train CER {r['train_cer']:.2f}% "
                  f"valid CER {r['valid_cer']:.2f}%", flush=True)

    kwargs = {}
    if resume is not None:
        kwargs = dict(state=resume.state, optimizer=resume.optimizer(), log=resume.metrics_log())
        best_path = out / "best.ckpt"
        if best_path.exists():
            kwargs["best_params"] = load_checkpoint(best_path).params
    try:
        res = run_curriculum(net_config, config, params, data, {k: table for k in data}, on_epoch=on_epoch,
                             stop_after=args.stop_after, **kwargs)
    except PhaseMismatchError as exc:
        raise DataError(str(exc)) from None
    res.log.write(out / "metrics.csv")
    save_checkpoint(snapshot(res, "last"), out / "last.ckpt")
    if not (out / "best.ckpt").exists():
        save_checkpoint(snapshot(res, "best"), out / "best.ckpt")
    finish_run_manifest(manifest_path, doc)
    print(f"trained {res.state.epoch} epochs; best valid CER {res.state.best_valid_cer:.2f}%; outputs in {out}")
    return EXIT_OK


# decode --------------------------------------------------------------------


def _check_scheme(table: SymbolTable, scheme: str) -> None:
    if not table_matches_scheme(table, scheme):
        raise DataError(f"checkpoint symbol table does not belong to the {scheme} scheme")


def _decode_inputs(paths: Sequence[str], split: str | None) -> list[tuple[str, str | None, Path]]:
    """(id, record id, image path) for image files, directories of PNGs, or prepared data dirs."""
    items = []
    for p in map(Path, paths):
        if p.is_dir() and (p / "samples.jsonl").exists():
            for line in (p / "samples.jsonl").read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                e = json.loads(line)
                if split is None or e["split"] == split:
                    items.append((e["id"], e["record_id"], p / e["image"]))
        elif p.is_dir():
            items.extend((f.stem, None, f) for f in sorted(p.glob("*.png")))
        elif p.exists():
            items.append((p.stem, None, p))
        else:
            raise DataError(f"no such image or directory: {p}")
    return items


def cmd_decode(args, argv) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    scheme = args.scheme or (ckpt.train_config.scheme if ckpt.train_config else None)
    if scheme is None:
        raise UsageError("--scheme is required for checkpoints without a training configuration")
    _check_scheme(ckpt.table, scheme)
    items = _decode_inputs(args.inputs, args.split)
    H = ckpt.net_config.input_height
    images = []
    for _, _, path in items:
        try:
            img = load_image(path)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read image {path}: {exc}") from None
        images.append(img if img.shape[0] == H else normalize_height(img, H))
    preds = decode_predictions(ckpt.params, ckpt.net_config, ckpt.table, scheme, images) if images else []
    lines = []
    for (sid, rid, _), rec in zip(items, preds):
        entry = {"id": sid, "words": [w.to_json() for w in rec.words]}
        if rid is not None:
            entry["record_id"] = rid
        lines.append(json.dumps(entry, ensure_ascii=False, sort_keys=True))
    text = "".join(line + "\n" for line in lines)
    if args.output and args.output != "-":
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# evaluate ------------------------------------------------------------------


def read_predictions(path: str | Path) -> dict[str, list[AnnotatedWord]]:
    """Record id -> predicted words; lines of one record are concatenated in file order."""
    out: dict[str, list[AnnotatedWord]] = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            e = json.loads(line)
            rid = e.get("record_id", e["id"])
            words = [AnnotatedWord.from_json(w) for w in e["words"]]
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{path}:{n}: bad prediction line: {exc}") from None
        out.setdefault(str(rid), []).extend(words)
    return out


def cmd_evaluate(args, argv) -> int:
    try:
        pages = load_manifest(args.gt_manifest)
    except FileNotFoundError:
        raise DataError(f"manifest not found: {args.gt_manifest}") from None
    splits = [args.split] if args.split != "all" else ["train", "valid", "test"]
    gt = ground_truth_records(pages, splits)
    if not gt:
        raise DataError(f"no ground-truth records in split {args.split!r}")
    try:
        preds = read_predictions(args.predictions)
    except FileNotFoundError:
        raise DataError(f"predictions not found: {args.predictions}") from None
    missing = [rid for rid in gt if rid not in preds]
    if missing:
        print(f"warning: {len(missing)} record(s) have no prediction and score 0: "
              f"{', '.join(missing[:10])}{' ...' if len(missing) > 10 else ''}", file=sys.stderr)
    tracks = [Track(args.track)] if args.track != "both" else list(Track)
    report = []
    for t in tracks:
        try:
            mean, scores = evaluate_records(gt, preds, t, args.score_all_words, not args.many_to_one, args.matching)
        except ValueError as exc:
            raise DataError(str(exc)) from None
        report.append(scores_csv(scores) if not report else scores_csv(scores).split("\n", 1)[1])
        print(f"{t.value}: {mean:.2f}")
    if args.output:
        Path(args.output).write_text("".join(report), encoding="utf-8")
    return EXIT_OK


# parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="htrner", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"htrner {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    schemes = [s.value for s in TagScheme]

    s = sub.add_parser("synth", help="generate a synthetic annotated page corpus")
    s.add_argument("out_dir")
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--records", type=int, default=500)
    s.add_argument("--oov-rate", type=float, default=0.0557)
    s.add_argument("--grammar", choices=["marriage", "plain"], default="marriage")
    s.add_argument("--records-per-page", type=int, default=4)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="cut pages into normalised line or record samples")
    s.add_argument("manifest")
    s.add_argument("out_dir")
    s.add_argument("--level", choices=["line", "record"], default="line")
    s.add_argument("--extraction", choices=EXTRACTION_METHODS, default="bbox_union")
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--scheme", choices=schemes, default=TagScheme.COMBINED.value,
                   help="scheme used for the target text files")
    s.add_argument("--closed-world", action="store_true", help="combined scheme: include every category/person pair")
    s.set_defaults(func=cmd_prepare)

    d = TrainConfig()
    s = sub.add_parser("train", help="train a model on prepared samples")
    s.add_argument("data_dir")
    s.add_argument("out_dir")
    s.add_argument("--scheme", choices=schemes, default=d.scheme)
    s.add_argument("--level", choices=["line", "record"], default=d.level)
    s.add_argument("--curriculum", action="store_true", help="train on lines, then continue on records")
    s.add_argument("--record-data", help="prepared record-level samples for the curriculum's second phase")
    s.add_argument("--transfer-from", help="checkpoint whose non-output layers initialise the network")
    s.add_argument("--resume", help="continue a run from its last checkpoint")
    s.add_argument("--lr", type=float, default=d.lr0)
    s.add_argument("--lr-decay", type=float, default=d.lr_decay)
    s.add_argument("--batch", type=int, default=d.batch_size)
    s.add_argument("--adv-weight", type=float, default=d.adv_weight)
    s.add_argument("--adv-epsilon", type=float, default=d.adv_epsilon)
    s.add_argument("--seed", type=int, default=d.seed)
    s.add_argument("--max-epochs", type=int, default=d.max_epochs)
    s.add_argument("--record-epochs", type=int, help="epoch budget of the curriculum's record phase")
    s.add_argument("--patience", type=int, default=d.early_stop_patience)
    s.add_argument("--optimizer", choices=OPTIMIZERS, default=d.optimizer)
    s.add_argument("--clip-norm", type=float, default=d.clip_norm)
    s.add_argument("--no-clip", action="store_true")
    s.add_argument("--closed-world", action="store_true")
    s.add_argument("--filters", help="comma-separated filter counts of the four conv blocks")
    s.add_argument("--hidden", type=int, help="LSTM units per direction (default 256)")
    s.add_argument("--lstm-layers", type=int, help="stacked BLSTM layers (default 3)")
    s.add_argument("--leaky-threshold", type=float, help="leaky ReLU threshold (default 0)")
    s.add_argument("--stop-after", type=int, help="stop after this many epochs (resume later)")
    s.add_argument("--log-wall-time", action="store_true", help="fill the seconds column of metrics.csv")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("decode", help="transcribe and tag images with a trained checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("inputs", nargs="+", help="PNG files, directories of PNGs, or prepared data directories")
    s.add_argument("--scheme", choices=schemes)
    s.add_argument("--split", choices=["train", "valid", "test"], help="only this split of prepared inputs")
    s.add_argument("-o", "--output", help="JSON-lines output file (default stdout)")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("evaluate", help="score predictions against a ground-truth manifest")
    s.add_argument("gt_manifest")
    s.add_argument("predictions")
    s.add_argument("--track", choices=["basic", "complete", "both"], default="both")
    s.add_argument("--split", choices=["train", "valid", "test", "all"], default="test")
    s.add_argument("--score-all-words", action="store_true", help="also count words tagged 'other'")
    s.add_argument("--many-to-one", action="store_true", help="let one prediction match several ground-truth words")
    s.add_argument("--matching", choices=("optimal", "greedy"), default="optimal",
                   help="one-to-one assignment: maximum total credit, or greedy in reading order")
    s.add_argument("-o", "--output", help="per-record CSV report")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"htrner {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ManifestError, CheckpointError, CodecError, TransferError, PhaseMismatchError) as exc:
        print(f"htrner {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"htrner {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
