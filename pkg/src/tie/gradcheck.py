"""Whole-model gradient verification against central finite differences.

Builds a small model, runs one taped forward/backward of the training loss,
then re-derives every parameter element's gradient by perturbing it +/- h and
re-running the (untaped) forward. The two routes must agree within a relative
tolerance, elementwise, with a small absolute floor for near-zero gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, Parameters, forward

__all__ = ["GradcheckReport", "run_gradcheck"]


@dataclass
class GradcheckReport:
    passed: bool
    tolerance: float
    worst_rel_err: float
    worst_tensor: str
    n_elements: int
    per_tensor: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "worst_rel_err": self.worst_rel_err,
            "worst_tensor": self.worst_tensor,
            "n_elements": self.n_elements,
            "per_tensor": {k: v for k, v in sorted(self.per_tensor.items())},
        }


def _rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def run_gradcheck(d: int = 8, layers: int = 1, heads: int = 2, n_tokens: int = 4,
                  n_instr: int = 8, num_channels: int = 3, seed: int = 0,
                  tolerance: float = 1e-3, step: float = 1e-5) -> GradcheckReport:
    """Check every trainable parameter of a toy model end to end."""
    rng = np.random.default_rng(seed)
    vocab_size = 12
    config = ModelConfig(
        d=d, layers_enc=layers, layers_dec=layers, heads=heads,
        max_len=max(n_tokens, 2), max_instr_len=max(n_instr, 2),
        dropout=0.0, vocab_size=vocab_size,
    )
    params = Parameters(config, num_channels, rng)

    token_ids = rng.integers(0, vocab_size, size=n_tokens).tolist()
    instr_ids = rng.integers(0, vocab_size, size=n_instr).tolist()
    slot_positions = rng.choice(n_instr, size=num_channels, replace=False).tolist()
    gold = (rng.random((n_tokens, n_tokens, num_channels)) < 0.3).astype(float)

    def loss_value() -> float:
        state = forward(params, token_ids, instr_ids, slot_positions)
        return ad.bce_with_logits(state.logits, gold).item()

    params.zero_grads()
    with ad.Tape():
        state = forward(params, token_ids, instr_ids, slot_positions)
        ad.backward(ad.bce_with_logits(state.logits, gold))

    report = GradcheckReport(passed=True, tolerance=tolerance, worst_rel_err=0.0,
                             worst_tensor="", n_elements=0)
    for name, tensor in params.tensors.items():
        fd = np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_value()
            flat[i] = orig - step
            lo = loss_value()
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * step)
        err = _rel_err(fd, tensor.grad)
        report.per_tensor[name] = err
        report.n_elements += flat.size
        if err > report.worst_rel_err:
            report.worst_rel_err = err
            report.worst_tensor = name
    report.passed = report.worst_rel_err < tolerance
    return report
