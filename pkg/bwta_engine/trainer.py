"""
Smooth multi-stage training.

Activations start on a wide Levelwise(L0) grid and degrade stage by stage to ternary.
At every stage boundary each degradable scale is re-initialized (projection factor,
mean or kept as is) and the optimizer is rebuilt. Weights are binary throughout.
"""

import copy
import csv
import math
import os
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
import structlog
import torch
import torch.nn.functional as F
from torch.optim.lr_scheduler import LambdaLR

from . import qat
from .diagnostics import zero_fraction
from .errors import DomainError, ScheduleError, ShapeMismatchError, TrainingDivergedError
from .models import SCALE_FLOOR, EpochRecord, QuantMode, QuantState, Schedule, Strategy, TrainConfig
from .quant import activation_scale_init, quantize
from .tensor import as_int

logger = structlog.get_logger(__name__)


class SyntheticSequenceTask:
    """
    Gaussian token sequences whose class is the closest of `n_classes` fixed directions
    to the mean token. A margin is planted along the class direction so the task is
    linearly separable; the last `val_frac` of the samples form the validation split.
    """

    def __init__(
        self,
        n_samples: int = 2000,
        seq_len: int = 8,
        dim: int = 16,
        seed: int = 0,
        n_classes: int = 2,
        margin: float = 1.0,
        val_frac: float = 0.2,
    ):
        if n_samples < 2 or seq_len < 1 or dim < 1 or n_classes < 2:
            raise DomainError(
                f"invalid task geometry: n_samples={n_samples}, seq_len={seq_len}, dim={dim}, n_classes={n_classes}"
            )
        rng = np.random.default_rng(seed)
        directions = rng.standard_normal((n_classes, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        planted = rng.integers(0, n_classes, size=n_samples)
        x = rng.standard_normal((n_samples, seq_len, dim)) + margin * directions[planted][:, None, :]
        labels = (x.mean(axis=1) @ directions.T).argmax(axis=1)

        self.seq_len = seq_len
        self.dim = dim
        self.n_classes = n_classes
        self.directions = directions.astype(np.float32)
        n_val = max(1, int(round(n_samples * val_frac)))
        x = x.astype(np.float32)
        self.train_x = torch.from_numpy(x[:-n_val])
        self.train_y = torch.from_numpy(labels[:-n_val].astype(np.int64))
        self.val_x = torch.from_numpy(x[-n_val:])
        self.val_y = torch.from_numpy(labels[-n_val:].astype(np.int64))

    def __len__(self) -> int:
        return len(self.train_y)

    def batches(self, batch_size: int, generator: torch.Generator) -> Iterator[Tuple[torch.Tensor, torch.Tensor]]:
        order = torch.randperm(len(self.train_y), generator=generator)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            yield self.train_x[idx], self.train_y[idx]

    def calibration_batch(self, size: int) -> torch.Tensor:
        return self.train_x[:size]


@dataclass
class TrainState:
    model: qat.ToyClassifier
    config: TrainConfig
    schedule: Schedule
    stage_index: int = 0
    history: List[EpochRecord] = field(default_factory=list)
    warmup_history: List[EpochRecord] = field(default_factory=list)
    transitions: List[Dict] = field(default_factory=list)
    optimizer: Optional[torch.optim.Optimizer] = None
    lr_scheduler: Optional[LambdaLR] = None
    global_step: int = 0
    steps_per_epoch: int = 1

    @property
    def current_L(self) -> int:
        return self.schedule.stages[self.stage_index].L

    @property
    def is_final_stage(self) -> bool:
        return self.stage_index == len(self.schedule.stages) - 1


def build_model(config: TrainConfig) -> qat.ToyClassifier:
    torch.manual_seed(config.seed)
    return qat.ToyClassifier(config.d_in, config.dim, config.heads, config.ffn_dim, config.n_classes, config.grad_scale)


def build_task(config: TrainConfig) -> SyntheticSequenceTask:
    return SyntheticSequenceTask(config.n_samples, config.seq_len, config.d_in, config.seed, config.n_classes)


def projection_factor(a_prev, a_cur) -> float:
    """p = sum|A_prev| / sum|A_cur| over integer activations of adjacent stages."""
    a_prev = as_int(a_prev, "A_prev")
    a_cur = as_int(a_cur, "A_cur")
    if a_prev.shape != a_cur.shape:
        raise ShapeMismatchError("projection_factor", a_prev.shape, a_cur.shape)
    denominator = int(np.abs(a_cur).sum(dtype=np.int64))
    if denominator == 0:
        raise DomainError("current-stage activations are all zero; projection factor is undefined")
    return int(np.abs(a_prev).sum(dtype=np.int64)) / denominator


def transition_scale(calib, scale: float, old_L: int, new_L: int, strategy: Strategy) -> float:
    """New scale of one Levelwise quantizer moving from old_L to new_L."""
    if strategy in (Strategy.NONE, Strategy.SEARCH_OFF):
        return scale
    try:
        if strategy is Strategy.MEAN:
            return activation_scale_init(calib)
        a_prev = quantize(calib, QuantState(scale, QuantMode.levelwise(old_L)))
        a_cur = quantize(calib, QuantState(scale, QuantMode.levelwise(new_L)))
        return scale * projection_factor(a_prev, a_cur)
    except DomainError as e:
        logger.warning("keeping previous scale at transition", reason=str(e))
        return scale


def _lr_lambda(state: TrainState, offset: int):
    config = state.config
    warmup = max(config.warmup_epochs * state.steps_per_epoch, 0)
    total = max(state.schedule.total_epochs * state.steps_per_epoch, 1)

    def factor(local_step: int) -> float:
        step = offset + local_step
        if warmup and step < warmup:
            return (step + 1) / warmup
        progress = min((step - warmup) / max(total - warmup, 1), 1.0)
        return 0.5 * (1.0 + math.cos(math.pi * progress))

    return factor


def make_optimizer(state: TrainState, lr_weight: Optional[float] = None, constant_lr: bool = False) -> None:
    """Fresh AdamW (scales without decay) continuing the warmup + cosine curve."""
    config = state.config
    scales, weights = qat.param_groups(state.model)
    state.optimizer = torch.optim.AdamW(
        [
            {"params": scales, "lr": config.lr_scale, "weight_decay": 0.0},
            {"params": weights, "lr": lr_weight if lr_weight is not None else config.lr_weight,
             "weight_decay": config.weight_decay},
        ]
    )
    factor = (lambda _: 1.0) if constant_lr else _lr_lambda(state, state.global_step)
    state.lr_scheduler = LambdaLR(state.optimizer, factor)


def collect_calibration(model: qat.ToyClassifier, task: SyntheticSequenceTask, size: int) -> Dict[str, np.ndarray]:
    model.eval()
    return qat.calibration_inputs(model, task.calibration_batch(size))


def stage_transition(state: TrainState, calib: Dict[str, np.ndarray]) -> TrainState:
    """Move to the next stage: re-scale every degradable quantizer, lower L, reset the optimizer."""
    if state.is_final_stage:
        raise ScheduleError(f"already at the final stage (L={state.current_L})")
    old_L = state.current_L
    new_L = state.schedule.stages[state.stage_index + 1].L
    strategy = state.config.strategy

    factors: Dict[str, float] = {}
    for name, quantizer in qat.act_quantizers(state.model).items():
        if not quantizer.degradable:
            continue
        old = float(quantizer.scale.detach())
        if name in calib:
            quantizer.set_scale(transition_scale(calib[name], old, old_L, new_L, strategy))
        factors[name] = float(quantizer.scale.detach()) / old

    qat.set_level(state.model, new_L)
    state.stage_index += 1
    make_optimizer(state)
    state.transitions.append(
        {"epoch": len(state.history), "old_L": old_L, "new_L": new_L, "strategy": strategy.value, "factors": factors}
    )
    logger.info("stage_transition", old_L=old_L, new_L=new_L, strategy=strategy.value, factors=factors)
    return state


def _clamp_scales(model: torch.nn.Module) -> None:
    with torch.no_grad():
        for p in qat.scale_parameters(model):
            p.clamp_(min=SCALE_FLOOR)


def _mean_zero_fraction(model: qat.ToyClassifier, batch: torch.Tensor) -> float:
    quantizers = qat.act_quantizers(model)
    fractions = []
    for name, a in qat.calibration_inputs(model, batch).items():
        q = quantizers[name]
        if q.degradable and q.enabled:
            fractions.append(zero_fraction(a, float(q.scale.detach()), q.mode.L))
    return float(np.mean(fractions)) if fractions else 0.0


def evaluate(model: qat.ToyClassifier, task: SyntheticSequenceTask) -> Tuple[float, float]:
    """(validation loss, validation accuracy)."""
    model.eval()
    with torch.no_grad():
        logits = model(task.val_x)
        loss = float(F.cross_entropy(logits, task.val_y))
        acc = float((logits.argmax(dim=1) == task.val_y).float().mean())
    return loss, acc


def _run_epoch(state: TrainState, task: SyntheticSequenceTask, epoch: int, stage_L: int) -> EpochRecord:
    model = state.model
    config = state.config
    quantizers = qat.act_quantizers(model)
    grad_sums = {name: 0.0 for name in quantizers}
    total_loss, seen, steps = 0.0, 0, 0
    generator = torch.Generator().manual_seed((config.seed * 100003 + epoch) % 2**63)

    model.train()
    for xb, yb in task.batches(config.batch_size, generator):
        state.optimizer.zero_grad()
        loss = F.cross_entropy(model(xb), yb)
        if not torch.isfinite(loss):
            logger.error("training diverged", epoch=epoch, step=state.global_step)
            raise TrainingDivergedError(epoch, state.global_step, loss.item())
        loss.backward()
        for name, q in quantizers.items():
            if q.scale.grad is not None:
                grad_sums[name] += float(q.scale.grad)
        state.optimizer.step()
        state.lr_scheduler.step()
        _clamp_scales(model)
        state.global_step += 1
        steps += 1
        total_loss += loss.item() * len(yb)
        seen += len(yb)

    val_loss, acc = evaluate(model, task)
    record = EpochRecord(
        epoch=epoch,
        stage_L=stage_L,
        loss=total_loss / max(seen, 1),
        acc=acc,
        zero_frac=_mean_zero_fraction(model, task.val_x[: config.calib_size]),
        val_loss=val_loss,
        scales=qat.scale_snapshot(model),
        grads={name: total / max(steps, 1) for name, total in grad_sums.items()},
    )
    logger.info(
        "epoch_complete", epoch=epoch, stage_L=stage_L,
        loss=round(record.loss, 5), acc=round(acc, 4), zero_frac=round(record.zero_frac, 4),
    )
    return record


def _fp_warm_start(state: TrainState, task: SyntheticSequenceTask) -> None:
    """Full-precision epochs standing in for a pretrained starting point."""
    config = state.config
    qat.set_quantization(state.model, False)
    make_optimizer(state, lr_weight=config.lr_fp, constant_lr=True)
    for epoch in range(config.fp_epochs):
        record = _run_epoch(state, task, -(config.fp_epochs - epoch), stage_L=0)
        state.warmup_history.append(record)
    state.global_step = 0
    qat.set_quantization(state.model, True)


def train(
    model: qat.ToyClassifier,
    task: SyntheticSequenceTask,
    schedule: Schedule,
    config: TrainConfig,
) -> TrainState:
    """Run the whole schedule; returns the final state with one history record per epoch."""
    torch.manual_seed(config.seed)
    steps_per_epoch = max(1, -(-len(task) // config.batch_size))
    state = TrainState(model=model, config=config, schedule=schedule, steps_per_epoch=steps_per_epoch)

    if config.fp_epochs:
        _fp_warm_start(state, task)

    qat.set_quantization(model, True)
    qat.set_level(model, schedule.stages[0].L)
    # the first quantized pass initializes every scale to 2 * mean|A|
    collect_calibration(model, task, config.calib_size)
    make_optimizer(state)
    logger.info("training started", schedule=schedule.to_dict(), strategy=config.strategy.value)

    epoch = 0
    carry = 0
    last = len(schedule.stages) - 1
    for stage_index, stage in enumerate(schedule.stages):
        budget = stage.epochs + carry
        carry = 0
        best, stale = math.inf, 0
        for i in range(budget):
            record = _run_epoch(state, task, epoch, stage.L)
            state.history.append(record)
            epoch += 1
            if config.early_stop_patience and stage_index < last:
                if record.val_loss < best:
                    best, stale = record.val_loss, 0
                else:
                    stale += 1
                if stale >= config.early_stop_patience:
                    carry = budget - i - 1
                    logger.info("early stop", stage_L=stage.L, epochs_run=i + 1, carried=carry)
                    break
        if stage_index < last:
            stage_transition(state, collect_calibration(model, task, config.calib_size))

    if config.metrics_csv:
        write_metrics_csv(state.history, config.metrics_csv)
    if config.checkpoint_dir:
        from .checkpoint import save_checkpoint

        save_checkpoint(qat.export_model(model, state.current_L), config.checkpoint_dir)
    return state


def write_metrics_csv(history: List[EpochRecord], path: str) -> None:
    if not history:
        raise DomainError("no epochs to write")
    scale_names = sorted(history[-1].scales)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", "stage_L", "loss", "acc", "zero_frac", "val_loss"] + [f"scale:{n}" for n in scale_names])
        for rec in history:
            writer.writerow(
                [rec.epoch, rec.stage_L, f"{rec.loss:.6f}", f"{rec.acc:.4f}", f"{rec.zero_frac:.4f}", f"{rec.val_loss:.6f}"]
                + [f"{rec.scales.get(n, float('nan')):.6g}" for n in scale_names]
            )
    logger.info("wrote metrics", path=path, epochs=len(history))


def transition_spikes(state: TrainState) -> List[float]:
    """Loss jump at each stage boundary: first epoch of the new stage minus last of the old."""
    spikes = []
    for transition in state.transitions:
        i = transition["epoch"]
        if 0 < i < len(state.history):
            spikes.append(state.history[i].loss - state.history[i - 1].loss)
    return spikes


def gradient_check(
    model: qat.ToyClassifier,
    inputs: torch.Tensor,
    labels: torch.Tensor,
    step: float = 1e-3,
    atol: float = 1e-12,
) -> Dict[str, Tuple[float, float, float]]:
    """
    Compare every quantizer's LSQ scale gradient with central finite differences.

    The LSQ gradient (divided by its normalizer) is the derivative of the loss with every
    quantizer and ReLU gate linearized at the current point (`qat.frozen_rounding`), so the
    differences are taken on that surrogate with a relative step of `step * s`. Returns
    name -> (analytic, numeric, relative error); `atol` floors the error denominator.
    """
    probe = copy.deepcopy(model).double()
    probe.eval()
    x = inputs.double()
    quantizers = qat.act_quantizers(probe)
    active = {name: q for name, q in quantizers.items() if q.enabled}

    probe.zero_grad()
    F.cross_entropy(probe(x), labels).backward()
    analytic = {name: float(q.scale.grad) / q.last_grad_factor for name, q in active.items()}

    results: Dict[str, Tuple[float, float, float]] = {}
    with torch.no_grad(), qat.frozen_rounding(probe):
        probe(x)
        for name, q in active.items():
            s = float(q.scale)
            h = step * s
            q.scale.fill_(s + h)
            up = float(F.cross_entropy(probe(x), labels))
            q.scale.fill_(s - h)
            down = float(F.cross_entropy(probe(x), labels))
            q.scale.fill_(s)
            numeric = (up - down) / (2 * h)
            a = analytic[name]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), atol)
            results[name] = (a, numeric, rel)
    return results
