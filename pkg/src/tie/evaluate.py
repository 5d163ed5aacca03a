"""Model predictions over a dataset split, and their scores.

Evaluation always renders the first instruction of the dataset's pool, so
repeated runs are bit-identical; training is where instruction choice is
randomized.
"""

from __future__ import annotations

from . import autodiff as ad
from .codec import decode
from .data import Dataset, Vocabulary
from .instructions import InstructionPool
from .metrics import headline_f1, task_metric
from .model import Parameters, forward

__all__ = ["predict_split", "evaluate_split"]


def predict_split(params: Parameters, vocab: Vocabulary, pool: InstructionPool,
                  dataset: Dataset, split: str, tau: float):
    """Decode predictions for every instance of one split."""
    instruction = pool.first(dataset.id)
    slots = instruction.slot_positions(dataset.label_space)
    preds = []
    for inst in getattr(dataset.splits, split):
        state = forward(params, vocab.encode(inst.tokens), instruction.token_ids, slots)
        probs = ad.sigmoid(state.logits).data
        preds.append(decode(probs, dataset.label_space, tau, dataset.task_kind))
    return preds


def evaluate_split(params: Parameters, vocab: Vocabulary, pool: InstructionPool,
                   dataset: Dataset, split: str, tau: float):
    """Returns ({metric name: ScoreReport}, headline F1) for one split."""
    preds = predict_split(params, vocab, pool, dataset, split, tau)
    golds = getattr(dataset.splits, split)
    reports = task_metric(dataset.task_kind, preds, golds)
    return reports, headline_f1(reports, dataset.task_kind)
