"""Mini-batch training with CTC, a fast-gradient-sign regulariser, curriculum phases and transfer."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from htrner import ctc
from htrner.data import Sample
from htrner.metrics import edit_distance
from htrner.net import NetworkConfig, ParamStore, backward, forward_batch, replace_output_layer, update_running_stats
from htrner.tags import SymbolTable, TagScheme

OPTIMIZERS = ("sgd", "momentum", "rmsprop", "adam")
CURRICULA = ("off", "lines_then_records")


class NumericError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class TransferError(ValueError):
    """Source network cannot be adapted to the target configuration."""


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 5e-4
    lr_decay: float = 0.99
    batch_size: int = 6
    adv_weight: float = 0.5
    adv_epsilon: float = 0.05
    max_epochs: int = 150
    scheme: str = TagScheme.COMBINED.value
    level: str = "line"
    curriculum: str = "off"
    seed: int = 0
    early_stop_patience: int = 20
    optimizer: str = "sgd"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    rms_decay: float = 0.99
    opt_eps: float = 1e-8
    clip_norm: float | None = 5.0
    record_max_epochs: int | None = None  # phase-2 budget; max_epochs when unset
    log_wall_time: bool = False

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.adv_weight < 0 or self.adv_epsilon < 0:
            raise ValueError("adversarial weight and epsilon must be non-negative")
        if self.max_epochs < 0 or self.early_stop_patience < 1:
            raise ValueError("max_epochs must be >= 0 and early_stop_patience >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.curriculum not in CURRICULA:
            raise ValueError(f"curriculum must be one of {CURRICULA}")
        if self.level not in ("line", "record"):
            raise ValueError("level must be 'line' or 'record'")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or None")
        TagScheme(self.scheme)

    def lr(self, epoch_index: int) -> float:
        return self.lr0 * self.lr_decay**epoch_index

    def phases(self) -> list[str]:
        if self.curriculum == "lines_then_records":
            return ["line", "record"]
        return [self.level]

    def phase_budget(self, phase: str) -> int:
        if phase == "record" and self.curriculum == "lines_then_records" and self.record_max_epochs is not None:
            return self.record_max_epochs
        return self.max_epochs

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in known})


# Optimisers ------------------------------------------------------------------


class Optimizer:
    """Per-parameter first-order update rules with explicit, serialisable state."""

    def __init__(self, config: TrainConfig, params: ParamStore):
        self.kind = config.optimizer
        self.config = config
        self.step_count = 0
        self.slots: dict[str, np.ndarray] = {}
        names = {"momentum": ["v"], "rmsprop": ["s"], "adam": ["m", "v"]}.get(self.kind, [])
        for name, arr in params.params.items():
            for slot in names:
                self.slots[f"{slot}:{name}"] = np.zeros_like(arr)

    def step(self, params: ParamStore, grads: dict[str, np.ndarray], lr: float) -> None:
        c = self.config
        self.step_count += 1
        t = self.step_count
        for name, g in grads.items():
            p = params.params[name]
            if self.kind == "sgd":
                p -= lr * g
            elif self.kind == "momentum":
                v = self.slots[f"v:{name}"]
                v *= c.momentum
                v += g
                p -= lr * v
            elif self.kind == "rmsprop":
                s = self.slots[f"s:{name}"]
                s *= c.rms_decay
                s += (1 - c.rms_decay) * g * g
                p -= lr * g / (np.sqrt(s) + c.opt_eps)
            else:
                m, v = self.slots[f"m:{name}"], self.slots[f"v:{name}"]
                m *= c.beta1
                m += (1 - c.beta1) * g
                v *= c.beta2
                v += (1 - c.beta2) * g * g
                mhat = m / (1 - c.beta1**t)
                vhat = v / (1 - c.beta2**t)
                p -= lr * mhat / (np.sqrt(vhat) + c.opt_eps)

    def reset(self) -> None:
        self.step_count = 0
        for v in self.slots.values():
            v[...] = 0.0


def global_norm(grads: dict[str, np.ndarray]) -> float:
    # fixed summation order so the result does not depend on dict insertion order
    return math.sqrt(sum(float(np.vdot(grads[k], grads[k])) for k in sorted(grads)))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    """Scale ``grads`` in place to global norm ``max_norm``; returns the norm before clipping."""
    norm = global_norm(grads)
    if max_norm is not None and norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


# Objective -----------------------------------------------------------------


@dataclass
class Objective:
    loss: float  # clean + adv_weight * adversarial, averaged over items
    clean_loss: float
    adv_loss: float
    grads: dict[str, np.ndarray]
    log_probs: list[np.ndarray]
    perturbed: list[np.ndarray] | None
    cache: object
    adv_cache: object = None


def fgsm(images: Sequence[np.ndarray], input_grads: Sequence[np.ndarray], epsilon: float) -> list[np.ndarray]:
    """``clip(x + epsilon * sign(dL/dx), 0, 1)`` per image."""
    return [np.clip(x + epsilon * np.sign(g), 0.0, 1.0) for x, g in zip(images, input_grads)]


def _ctc_batch(log_probs: Sequence[np.ndarray], targets: Sequence[Sequence[int]], blank: int):
    n = len(targets)
    total, grads = 0.0, []
    for lp, tgt in zip(log_probs, targets):
        r = ctc.ctc_loss(lp, tgt, blank)
        total += r.loss
        grads.append(r.grad / n)
    return total / n, grads


def batch_objective(
    params: ParamStore,
    config: NetworkConfig,
    images: Sequence[np.ndarray],
    targets: Sequence[Sequence[int]],
    adv_weight: float = 0.0,
    adv_epsilon: float = 0.05,
    mode: str = "train",
    perturbed: Sequence[np.ndarray] | None = None,
    blank: int = 0,
) -> Objective:
    """Mean CTC loss plus ``adv_weight`` times the loss on sign-gradient perturbed inputs.

    The perturbation is a constant with respect to the parameters.  Passing
    ``perturbed`` reuses fixed adversarial images instead of building them
    from the clean input gradient.
    """
    log_probs, cache = forward_batch(params, config, images, mode)
    clean, g = _ctc_batch(log_probs, targets, blank)
    use_adv = adv_weight > 0
    grads, dx = backward(g, cache, params, config, need_input_grad=use_adv and perturbed is None)
    adv, cache2 = 0.0, None
    if use_adv:
        if perturbed is None:
            perturbed = fgsm(images, dx, adv_epsilon)
        lp2, cache2 = forward_batch(params, config, perturbed, mode)
        adv, g2 = _ctc_batch(lp2, targets, blank)
        grads2, _ = backward(g2, cache2, params, config)
        for k in grads:
            grads[k] += adv_weight * grads2[k]
    return Objective(
        clean + adv_weight * adv, clean, adv, grads, log_probs, list(perturbed) if use_adv else None, cache, cache2
    )


# Epochs --------------------------------------------------------------------


@dataclass
class EpochStats:
    loss: float
    cer: float  # percent, symbol level
    skipped: int
    batches: int
    seconds: float


def feasible(sample: Sample, config: NetworkConfig) -> bool:
    return len(sample.target) > 0 and config.frames_for_width(sample.image.shape[1]) >= ctc.min_frames(sample.target)


def train_epoch(
    params: ParamStore,
    samples: Sequence[Sample],
    net_config: NetworkConfig,
    config: TrainConfig,
    epoch_index: int,
    rng: np.random.Generator,
    optimizer: Optimizer,
    blank: int = 0,
) -> EpochStats:
    """One shuffled pass over ``samples``; updates ``params`` in place.

    Samples whose target cannot fit their frame count are skipped and counted.
    """
    if not samples:
        raise ValueError("empty training set")
    start = time.perf_counter()
    lr = config.lr(epoch_index)
    order = rng.permutation(len(samples))
    usable = [int(i) for i in order if feasible(samples[i], net_config)]
    skipped = len(samples) - len(usable)
    if not usable:
        raise ValueError("no training sample has a feasible target")
    loss_sum, errors, ref_len, batches = 0.0, 0, 0, 0
    for b0 in range(0, len(usable), config.batch_size):
        batch = [samples[i] for i in usable[b0 : b0 + config.batch_size]]
        images = [s.image for s in batch]
        targets = [s.target for s in batch]
        ids = ", ".join(s.sample_id for s in batch)
        try:
            obj = batch_objective(params, net_config, images, targets, config.adv_weight, config.adv_epsilon, "train", blank=blank)
        except ctc.CTCInfeasibleError as exc:
            # feasibility was checked above, so this means non-finite outputs
            raise NumericError(f"non-finite network output at epoch {epoch_index}, batch {batches} ({ids}): {exc}") from None
        if not math.isfinite(obj.loss):
            raise NumericError(f"non-finite loss {obj.loss} at epoch {epoch_index}, batch {batches} ({ids})")
        norm = clip_gradients(obj.grads, config.clip_norm)
        if not math.isfinite(norm):
            raise NumericError(f"non-finite gradient norm at epoch {epoch_index}, batch {batches}")
        update_running_stats(params, obj.cache, net_config)
        optimizer.step(params, obj.grads, lr)
        loss_sum += obj.clean_loss * len(batch)
        for lp, tgt in zip(obj.log_probs, targets):
            errors += edit_distance(ctc.best_path_decode(lp, blank), tgt)
            ref_len += len(tgt)
        batches += 1
    return EpochStats(loss_sum / len(usable), 100.0 * errors / ref_len, skipped, batches, time.perf_counter() - start)


def predict(
    params: ParamStore,
    net_config: NetworkConfig,
    images: Sequence[np.ndarray],
    batch_size: int = 8,
    blank: int = 0,
) -> list[list[int]]:
    """Best-path symbol indices per image (eval mode)."""
    out = []
    order = sorted(range(len(images)), key=lambda i: images[i].shape[1])
    decoded: dict[int, list[int]] = {}
    for b0 in range(0, len(order), batch_size):
        idx = order[b0 : b0 + batch_size]
        lps, _ = forward_batch(params, net_config, [images[i] for i in idx], "eval")
        for i, lp in zip(idx, lps):
            decoded[i] = ctc.best_path_decode(lp, blank)
    for i in range(len(images)):
        out.append(decoded[i])
    return out


def symbol_cer(params: ParamStore, net_config: NetworkConfig, samples: Sequence[Sample], blank: int = 0) -> float:
    """Corpus symbol error rate in percent (eval mode, best path)."""
    if not samples:
        return float("nan")
    hyps = predict(params, net_config, [s.image for s in samples], blank=blank)
    errors = sum(edit_distance(h, s.target) for h, s in zip(hyps, samples))
    return 100.0 * errors / max(1, sum(len(s.target) for s in samples))


# Metrics log -----------------------------------------------------------------

LOG_COLUMNS = ("epoch", "phase", "lr", "train_cer", "valid_cer", "train_loss", "seconds")


@dataclass
class MetricsLog:
    """Append-only per-epoch rows; ``seconds`` is blank unless wall time logging is on."""

    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append({k: row.get(k, "") for k in LOG_COLUMNS})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[k]) for k in LOG_COLUMNS])
        return buf.getvalue()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def from_csv(cls, text: str) -> "MetricsLog":
        reader = csv.DictReader(io.StringIO(text))
        return cls([dict(r) for r in reader])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


# Curriculum ----------------------------------------------------------------


@dataclass
class TrainState:
    """Everything beyond the parameters needed to continue a run exactly."""

    phase_index: int = 0
    phase_epoch: int = 0
    epoch: int = 0
    best_valid_cer: float = math.inf
    bad_epochs: int = 0
    phase_done: bool = False
    finished: bool = False
    rng_state: dict | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        d["best_valid_cer"] = None if math.isinf(self.best_valid_cer) else self.best_valid_cer
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainState":
        obj = dict(obj)
        if obj.get("best_valid_cer") is None:
            obj["best_valid_cer"] = math.inf
        return cls(**obj)


@dataclass
class PhaseData:
    train: list[Sample]
    valid: list[Sample] = field(default_factory=list)


class PhaseMismatchError(ValueError):
    """Curriculum phases use different symbol tables or schemes."""


@dataclass
class RunResult:
    params: ParamStore
    best_params: ParamStore
    state: TrainState
    optimizer: Optimizer
    log: MetricsLog
    phase_start_digests: dict[str, str] = field(default_factory=dict)


EpochCallback = Callable[["RunResult", EpochStats | None, bool], None]


def run_curriculum(
    net_config: NetworkConfig,
    config: TrainConfig,
    params: ParamStore,
    data: dict[str, PhaseData],
    tables: dict[str, SymbolTable] | None = None,
    state: TrainState | None = None,
    optimizer: Optimizer | None = None,
    log: MetricsLog | None = None,
    best_params: ParamStore | None = None,
    on_epoch: EpochCallback | None = None,
    stop_after: int | None = None,
) -> RunResult:
    """Train through the configured phases, early-stopping each on validation CER.

    ``data`` maps phase level (``line``/``record``) to its samples.  The
    second curriculum phase starts from the parameters the first ended with
    and restarts the learning-rate schedule and optimiser moments.  Passing
    a saved ``state``/``optimizer``/``log`` resumes a run; ``stop_after``
    halts after that many epochs in this call (for checkpointed runs).
    """
    phases = config.phases()
    for ph in phases:
        if ph not in data or not data[ph].train:
            raise ValueError(f"no training samples for phase {ph!r}")
    if tables is not None and len(phases) > 1:
        t0 = tables.get(phases[0])
        for ph in phases[1:]:
            if tables.get(ph) != t0:
                raise PhaseMismatchError(f"phases {phases[0]!r} and {ph!r} use different symbol tables")
    blank = 0 if tables is None else next(iter(tables.values())).blank_index
    state = state or TrainState()
    rng = np.random.default_rng(config.seed)
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    optimizer = optimizer or Optimizer(config, params)
    log = log or MetricsLog()
    best_params = best_params or params.copy()
    result = RunResult(params, best_params, state, optimizer, log)
    run_epochs = 0

    while not state.finished:
        phase = phases[state.phase_index]
        pdata = data[phase]
        if state.phase_done:
            if state.phase_index + 1 >= len(phases):
                state.finished = True
                break
            # phase switch: record where the next phase starts from
            state.phase_index += 1
            state.phase_epoch = 0
            state.best_valid_cer = math.inf
            state.bad_epochs = 0
            state.phase_done = False
            optimizer.reset()
            nxt = phases[state.phase_index]
            result.phase_start_digests[nxt] = params.digest()
            vcer = symbol_cer(params, net_config, data[nxt].valid, blank) if data[nxt].valid else ""
            log.append(epoch=state.epoch, phase=f"{phase}->{nxt}", lr=config.lr(0), valid_cer=vcer)
            if on_epoch:
                on_epoch(result, None, True)
            continue
        if state.phase_epoch >= config.phase_budget(phase):
            state.phase_done = True
            continue
        if state.phase_epoch == 0 and phase not in result.phase_start_digests:
            result.phase_start_digests[phase] = params.digest()
        stats = train_epoch(params, pdata.train, net_config, config, state.phase_epoch, rng, optimizer, blank)
        lr = config.lr(state.phase_epoch)
        valid = pdata.valid
        vcer = symbol_cer(params, net_config, valid, blank) if valid else stats.cer
        state.epoch += 1
        state.phase_epoch += 1
        if vcer < state.best_valid_cer:
            state.best_valid_cer = vcer
            state.bad_epochs = 0
            result.best_params = params.copy()
            improved = True
        else:
            state.bad_epochs += 1
            improved = False
        if state.bad_epochs >= config.early_stop_patience:
            state.phase_done = True
        state.rng_state = rng.bit_generator.state
        log.append(
            epoch=state.epoch, phase=phase, lr=lr, train_cer=stats.cer, valid_cer=vcer, train_loss=stats.loss,
            seconds=round(stats.seconds, 3) if config.log_wall_time else "",
        )
        if on_epoch:
            on_epoch(result, stats, improved)
        run_epochs += 1
        if stop_after is not None and run_epochs >= stop_after:
            break
    state.rng_state = rng.bit_generator.state
    return result


# Transfer ------------------------------------------------------------------


def transfer_init(
    source_params: ParamStore,
    source_config: NetworkConfig,
    new_table: SymbolTable,
    seed: int,
    target_config: NetworkConfig | None = None,
) -> tuple[ParamStore, NetworkConfig]:
    """Reuse every layer of a trained network except the output layer.

    ``target_config`` (if given) must agree with the source on everything
    but the class count; the output layer is redrawn for ``len(new_table)``.
    """
    new_config = source_config.with_classes(len(new_table))
    if target_config is not None and target_config.with_classes(len(new_table)) != new_config:
        diffs = [
            k for k, v in target_config.to_json().items()
            if k != "num_classes" and source_config.to_json()[k] != v
        ]
        raise TransferError(f"source network differs from the target in: {', '.join(diffs)}")
    return replace_output_layer(source_params, len(new_table), seed), new_config
