"""Two-phase training: gated multi-source pretraining, then plain finetuning.

Every batch holds instances of exactly one dataset. During pretraining the
epoch plan interleaves datasets so adjacent batches disagree, and each
parameter group's update is gated on the sign of the inner product between
its current gradient and the previous batch's gradient: positive dot applies
the Adam update, anything else freezes the group (parameters and optimizer
moments alike). Finetuning runs ungated single-dataset epochs with dev-based
best-checkpoint selection.

All randomness is drawn from streams derived from (seed, purpose, epoch,
batch), so any step of a run is a pure function of the seed and the step
index; resuming from a checkpoint reproduces the uninterrupted trajectory
bit for bit.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .codec import encode
from .data import Dataset, Vocabulary
from .evaluate import evaluate_split
from .instructions import InstructionPool, select
from .model import Parameters, forward

__all__ = [
    "TrainConfig",
    "BatchPlan",
    "GradientSnapshot",
    "Adam",
    "StepReport",
    "TrainState",
    "TrainingDiverged",
    "rng_for",
    "loss",
    "plan_epoch",
    "gated_step",
    "pretrain",
    "finetune",
    "skip_rate",
]


class TrainingDiverged(RuntimeError):
    """A gradient went non-finite; the step was aborted."""


def _path_code(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def rng_for(seed: int, *path) -> np.random.Generator:
    """A fresh generator on a stream identified by (seed, *path)."""
    entropy = [int(seed)] + [_path_code(p) for p in path]
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    pretrain_epochs: int = 3
    finetune_epochs: int = 10
    pretrain_max_steps: int | None = None
    finetune_max_steps: int | None = None
    threshold: float = 0.5
    min_count: int = 1
    gate_granularity: str = "group"  # "group" or "global"
    reset_optimizer_on_finetune: bool = True

    def validate(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.gate_granularity not in ("group", "global"):
            raise ValueError(f"unknown gate granularity {self.gate_granularity!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")
        return self


def loss(logits, gold):
    """Mean binary cross-entropy over all grid cells (scalar tensor)."""
    return ad.bce_with_logits(logits, gold)


@dataclass
class BatchPlan:
    batches: list            # [(dataset_id, [instance indices])]
    batch_size: int
    forced_adjacent: list = field(default_factory=list)  # plan positions

    def __len__(self):
        return len(self.batches)


def _dataset_sizes(datasets) -> dict:
    if isinstance(datasets, dict):
        return dict(datasets)
    return {ds.id: len(ds.splits.train) for ds in datasets}


def plan_epoch(datasets, batch_size: int, rng: np.random.Generator,
               interleave: bool = True) -> BatchPlan:
    """One epoch's batches: single-dataset batches covering every training
    instance exactly once.

    With interleaving, the next dataset is drawn (weighted by remaining
    batches) among datasets other than the previous one; when only the
    previous dataset has batches left, the adjacency violation is permitted
    and recorded rather than dropping data.
    """
    sizes = _dataset_sizes(datasets)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if any(n < 1 for n in sizes.values()):
        raise ValueError("every dataset needs at least one training instance")
    if interleave and len(sizes) < 2:
        raise ValueError("interleaved pretraining needs at least 2 datasets")

    queues = {}
    for ds_id, n in sizes.items():
        order = rng.permutation(n)
        queues[ds_id] = [
            [int(i) for i in order[lo:lo + batch_size]]
            for lo in range(0, n, batch_size)
        ]

    if not interleave:
        batches = [(ds_id, b) for ds_id in queues for b in queues[ds_id]]
        return BatchPlan(batches=batches, batch_size=batch_size)

    batches = []
    forced = []
    prev = None
    while any(queues.values()):
        candidates = [d for d, q in queues.items() if q and d != prev]
        if not candidates:
            ds_id = prev  # tail: only the previous dataset remains
            forced.append(len(batches))
        else:
            weights = np.array([len(queues[d]) for d in candidates], dtype=float)
            ds_id = candidates[int(rng.choice(len(candidates), p=weights / weights.sum()))]
        batches.append((ds_id, queues[ds_id].pop(0)))
        prev = ds_id
    return BatchPlan(batches=batches, batch_size=batch_size, forced_adjacent=forced)


class GradientSnapshot:
    """Per-group flat gradients of the previous batch (g at t-1)."""

    def __init__(self):
        self.prev: dict[str, np.ndarray] = {}

    def store(self, flat_by_group: dict):
        self.prev = {g: a.copy() for g, a in flat_by_group.items()}


class Adam:
    """Adaptive update with per-group step counters so frozen groups keep
    their moments and bias correction untouched."""

    def __init__(self, params: Parameters, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {n: np.zeros_like(t.data) for n, t in params.tensors.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.tensors.items()}
        self.t = {g: 0 for g in params.groups}

    def update_group(self, params: Parameters, group: str, grads: dict):
        self.t[group] += 1
        t = self.t[group]
        for name in params.groups[group]:
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1 ** t)
            v_hat = self.v[name] / (1 - self.beta2 ** t)
            params[name].data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class StepReport:
    step: int
    dataset_id: str
    loss_value: float
    gated: bool
    decisions: dict    # group -> {"dot": float|None, "updated": bool}
    forced_adjacent: bool = False

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "dataset": self.dataset_id,
            "loss": self.loss_value,
            "gated": self.gated,
            "forced_adjacent": self.forced_adjacent,
            "groups": self.decisions,
        }


def gated_step(params: Parameters, snapshot: GradientSnapshot, grads: dict,
               optimizer: Adam, *, gate: bool = True,
               granularity: str = "group") -> dict:
    """Apply one optimizer step under the gradient-agreement gate.

    A group updates iff the flat inner product of its current gradient with
    the previous batch's gradient is strictly positive; with no previous
    gradient (first step) it always updates. The snapshot then stores the
    current gradients for every group, updated or not. Returns per-group
    decisions {"dot", "updated"}.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in {name}")

    flat = {g: params.flat_group(g, grads) for g in params.groups}
    decisions = {}

    if gate and granularity == "global":
        if all(g in snapshot.prev for g in params.groups):
            current = np.concatenate([flat[g] for g in params.groups])
            previous = np.concatenate([snapshot.prev[g] for g in params.groups])
            dot = float(current @ previous)
            update_all = dot > 0.0
        else:
            dot, update_all = None, True
        for group in params.groups:
            decisions[group] = {"dot": dot, "updated": update_all}
            if update_all:
                optimizer.update_group(params, group, grads)
    else:
        for group in params.groups:
            if not gate:
                dot, updated = None, True
            elif group in snapshot.prev:
                dot = float(flat[group] @ snapshot.prev[group])
                updated = dot > 0.0
            else:
                dot, updated = None, True
            decisions[group] = {"dot": dot, "updated": updated}
            if updated:
                optimizer.update_group(params, group, grads)

    snapshot.store(flat)
    return decisions


@dataclass
class TrainState:
    params: Parameters
    optimizer: Adam
    snapshot: GradientSnapshot
    step: int = 0

    @classmethod
    def fresh(cls, params: Parameters, lr: float) -> "TrainState":
        return cls(params=params, optimizer=Adam(params, lr),
                   snapshot=GradientSnapshot(), step=0)


def _prepared(dataset: Dataset, vocab: Vocabulary):
    ids = [vocab.encode(inst.tokens) for inst in dataset.splits.train]
    golds = [encode(inst, dataset.label_space).data for inst in dataset.splits.train]
    return ids, golds


def _train_step(state: TrainState, dataset: Dataset, token_ids, golds,
                batch_indices, pool: InstructionPool, cfg: TrainConfig,
                seed: int, epoch: int, batch_idx: int, gate: bool) -> tuple:
    rng_instr = rng_for(seed, "instr", epoch, batch_idx)
    rng_drop = rng_for(seed, "drop", epoch, batch_idx)
    params = state.params
    params.zero_grads()
    with ad.Tape():
        total = None
        for inst_idx in batch_indices:
            instruction = select(pool, dataset.id, rng_instr)
            slots = instruction.slot_positions(dataset.label_space)
            fwd = forward(params, token_ids[inst_idx], instruction.token_ids,
                          slots, train=True, rng=rng_drop)
            inst_loss = loss(fwd.logits, golds[inst_idx])
            total = inst_loss if total is None else ad.add(total, inst_loss)
        batch_loss = ad.scale(total, 1.0 / len(batch_indices))
        ad.backward(batch_loss)
    grads = params.grads()
    decisions = gated_step(params, state.snapshot, grads, state.optimizer,
                           gate=gate, granularity=cfg.gate_granularity)
    state.step += 1
    return float(batch_loss.data), decisions


def _steps_per_epoch(sizes: dict, batch_size: int) -> int:
    return sum(-(-n // batch_size) for n in sizes.values())


@dataclass
class TrainResult:
    state: TrainState
    step_reports: list = field(default_factory=list)
    epoch_metrics: list = field(default_factory=list)
    best_dev_f1: float | None = None
    best_epoch: int | None = None


def pretrain(state: TrainState, sources: list, pool: InstructionPool,
             vocab: Vocabulary, cfg: TrainConfig, seed: int,
             eval_dev: bool = True) -> TrainResult:
    """Gated interleaved training over >= 2 source datasets.

    Resumable: the plan of epoch e and every in-step draw depend only on
    (seed, e, batch index), so a state loaded at step t continues exactly as
    the uninterrupted run would.
    """
    cfg.validate()
    if len(sources) < 2:
        raise ValueError("pretraining needs at least 2 source datasets")
    pool.require([ds.id for ds in sources])
    by_id = {ds.id: ds for ds in sources}
    prepared = {ds.id: _prepared(ds, vocab) for ds in sources}
    sizes = _dataset_sizes(sources)
    bpe = _steps_per_epoch(sizes, cfg.batch_size)
    total = cfg.pretrain_epochs * bpe
    if cfg.pretrain_max_steps is not None:
        total = min(total, cfg.pretrain_max_steps)

    result = TrainResult(state=state)
    while state.step < total:
        epoch = state.step // bpe
        plan = plan_epoch(sizes, cfg.batch_size, rng_for(seed, "plan", epoch))
        forced = set(plan.forced_adjacent)
        start = state.step % bpe
        for batch_idx in range(start, len(plan.batches)):
            if state.step >= total:
                break
            ds_id, indices = plan.batches[batch_idx]
            ids, golds = prepared[ds_id]
            value, decisions = _train_step(
                state, by_id[ds_id], ids, golds, indices, pool, cfg,
                seed, epoch, batch_idx, gate=True,
            )
            result.step_reports.append(StepReport(
                step=state.step, dataset_id=ds_id, loss_value=value,
                gated=True, decisions=decisions,
                forced_adjacent=batch_idx in forced,
            ))
        if eval_dev and state.step % bpe == 0:
            for ds in sources:
                _, f1 = evaluate_split(state.params, vocab, pool, ds, "dev",
                                       cfg.threshold)
                result.epoch_metrics.append(
                    {"epoch": epoch, "dataset": ds.id, "dev_f1": f1}
                )
    return result


def finetune(state: TrainState, target: Dataset, pool: InstructionPool,
             vocab: Vocabulary, cfg: TrainConfig, seed: int,
             eval_dev: bool = True) -> TrainResult:
    """Plain (ungated) training on one dataset, keeping the parameters of
    the epoch with the best dev headline F1."""
    cfg.validate()
    pool.require([target.id])
    if cfg.reset_optimizer_on_finetune:
        state = TrainState.fresh(state.params, cfg.lr)
    else:
        state = TrainState(params=state.params, optimizer=state.optimizer,
                           snapshot=GradientSnapshot(), step=0)
    ids, golds = _prepared(target, vocab)
    sizes = {target.id: len(target.splits.train)}
    bpe = _steps_per_epoch(sizes, cfg.batch_size)
    total = cfg.finetune_epochs * bpe
    if cfg.finetune_max_steps is not None:
        total = min(total, cfg.finetune_max_steps)

    result = TrainResult(state=state)
    best = None
    while state.step < total:
        epoch = state.step // bpe
        plan = plan_epoch(sizes, cfg.batch_size,
                          rng_for(seed, "ft-plan", epoch), interleave=False)
        start = state.step % bpe
        for batch_idx in range(start, len(plan.batches)):
            if state.step >= total:
                break
            _, indices = plan.batches[batch_idx]
            value, decisions = _train_step(
                state, target, ids, golds, indices, pool, cfg,
                seed, epoch, batch_idx, gate=False,
            )
            result.step_reports.append(StepReport(
                step=state.step, dataset_id=target.id, loss_value=value,
                gated=False, decisions=decisions,
            ))
        if eval_dev:
            _, f1 = evaluate_split(state.params, vocab, pool, target, "dev",
                                   cfg.threshold)
            result.epoch_metrics.append(
                {"epoch": epoch, "dataset": target.id, "dev_f1": f1}
            )
            if best is None or f1 > best[0]:
                best = (f1, epoch, state.params.copy_values())
    if eval_dev and best is not None:
        result.best_dev_f1, result.best_epoch, values = best
        state.params.load_values(values)
    return result


def skip_rate(step_reports) -> float:
    """Fraction of (step, group) decisions that froze the group, over steps
    where the gate had a previous gradient to compare against."""
    skipped = considered = 0
    for report in step_reports:
        for decision in report.decisions.values():
            if decision["dot"] is None:
                continue
            considered += 1
            if not decision["updated"]:
                skipped += 1
    return skipped / considered if considered else 0.0
