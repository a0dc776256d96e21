"""Synthetic end-to-end experiments: task setup, train-until-threshold runs and fixed-budget comparisons."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from htrner.data import Sample, build_samples, ground_truth_records
from htrner.net import ConvBlock, NetworkConfig, ParamStore, init_params
from htrner.pipeline import by_split, corpus_table, encode_all, score_samples
from htrner.synth import SynthDataset
from htrner.tags import AnnotatedRecord, SymbolTable
from htrner.train import PhaseData, RunResult, TrainConfig, run_curriculum

COMPACT_BLOCKS = (
    ConvBlock(8, (3, 3), (2, 2)),
    ConvBlock(16, (3, 3), (2, 2)),
    ConvBlock(24, (3, 3), (2, 1)),
    ConvBlock(32, (3, 3), (2, 1)),
)


def compact_network(num_classes: int, height: int = 32, hidden: int = 64) -> NetworkConfig:
    """The default layout (four conv blocks, three BLSTM layers) at a desk-friendly width."""
    return NetworkConfig(num_classes, height, COMPACT_BLOCKS, 3, hidden)


@dataclass
class SynthTask:
    """Encoded samples of one synthetic corpus under one tag scheme."""

    scheme: str
    table: SymbolTable
    samples: dict[str, dict[str, list[Sample]]]  # level -> split -> samples
    ground_truth: dict[str, AnnotatedRecord]  # test records

    def phase_data(self, level: str) -> PhaseData:
        return PhaseData(self.samples[level]["train"], self.samples[level]["valid"])

    def all_phases(self) -> dict[str, PhaseData]:
        return {level: self.phase_data(level) for level in self.samples}

    def test_scores(self, params: ParamStore, net_config: NetworkConfig, level: str = "line") -> dict[str, float]:
        return score_samples(params, net_config, self.table, self.scheme, self.samples[level]["test"], self.ground_truth)


def synth_task(
    dataset: SynthDataset,
    scheme: str,
    height: int = 32,
    levels: Iterable[str] = ("line",),
    extraction: str = "bbox_union",
) -> SynthTask:
    """Cut ``dataset`` into samples at each level and encode them with one shared table."""
    per_level = {lvl: build_samples(dataset.pages, dataset.images, lvl, extraction, height) for lvl in levels}
    every = [s for samples in per_level.values() for s in samples]
    table = corpus_table(every, scheme)
    encode_all(every, scheme, table)
    return SynthTask(
        scheme, table, {lvl: by_split(s) for lvl, s in per_level.items()},
        ground_truth_records(dataset.pages, ["test"]),
    )


@dataclass
class ThresholdRun:
    history: list[dict] = field(default_factory=list)  # epoch, basic, complete, valid_cer, seconds
    reached_at: int | None = None
    reached_seconds: float | None = None
    seconds: float = 0.0
    result: RunResult | None = None


def run_until(
    task: SynthTask,
    net_config: NetworkConfig,
    params: ParamStore,
    config: TrainConfig,
    basic: float,
    complete: float,
    level: str = "line",
    max_seconds: float = math.inf,
    log=None,
    train_through: int = 0,
) -> ThresholdRun:
    """Train one epoch at a time until both test-track scores reach their thresholds.

    Stops early when the epoch budget or early stopping ends the run, or
    when ``max_seconds`` of wall time have passed.  With ``train_through``
    the run keeps going to at least that epoch after the thresholds are met.
    """
    run = ThresholdRun()
    start = time.perf_counter()
    res = None
    data = {level: task.phase_data(level)}
    while True:
        kw = {} if res is None else dict(state=res.state, optimizer=res.optimizer, log=res.log, best_params=res.best_params)
        before = 0 if res is None else res.state.epoch
        res = run_curriculum(net_config, config, params if res is None else res.params, data, stop_after=1, **kw)
        if res.state.epoch == before:
            break
        scores = task.test_scores(res.params, net_config, level)
        elapsed = time.perf_counter() - start
        row = {"epoch": res.state.epoch, **scores, "valid_cer": res.log.rows[-1]["valid_cer"], "seconds": elapsed}
        run.history.append(row)
        if log:
            log(row)
        if run.reached_at is None and scores["basic"] >= basic and scores["complete"] >= complete:
            run.reached_at, run.reached_seconds = res.state.epoch, elapsed
        if run.reached_at is not None and res.state.epoch >= train_through:
            break
        if res.state.finished or elapsed > max_seconds:
            break
    run.seconds = time.perf_counter() - start
    run.result = res
    return run


def fixed_budget(
    task: SynthTask,
    net_config: NetworkConfig,
    config: TrainConfig,
    params: ParamStore | None = None,
) -> dict[str, float]:
    """Train with ``config`` to completion; test scores of the best-on-validation parameters."""
    params = params or init_params(net_config, config.seed)
    phases = config.phases()
    res = run_curriculum(net_config, config, params, {ph: task.phase_data(ph) for ph in phases},
                         {ph: task.table for ph in phases})
    return task.test_scores(res.best_params, net_config, phases[-1])


def track_mean(scores: dict[str, float]) -> float:
    return (scores["basic"] + scores["complete"]) / 2


def median_epochs(runs: Sequence[ThresholdRun]) -> float:
    """Median epochs to threshold; runs that never got there count as infinite."""
    return statistics.median(r.reached_at if r.reached_at is not None else math.inf for r in runs)
