"""The instructed graph decoder.

Forward pipeline: encode the sentence with a small pre-norm transformer
encoder; run the instruction through a causal decoder that cross-attends to
the sentence; pull out the K decoder states at the label slot positions;
re-represent every sentence token as an attention mixture over projected
slot states; score all token pairs per channel with a biaffine form plus a
per-cell linear layer. Output logits are (|x|, |x|, K).

All parameters are named, and names are partitioned into groups (one per
layer-like unit); the trainer's update gate operates on those groups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "ModelConfig",
    "Parameters",
    "ForwardState",
    "CHANNEL_GROUPS",
    "encode_sentence",
    "decode_instruction",
    "gather_slots",
    "label_attention",
    "biaffine_score",
    "forward",
]

_MASKED = -1e30  # finite stand-in for -inf so masked logits stay checkable

# Groups whose parameter shapes depend on the channel count K; retargeting a
# model to a dataset with a different K re-instantiates exactly these.
CHANNEL_GROUPS = ("biaffine", "score")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    layers_enc: int = 1
    layers_dec: int = 1
    heads: int = 4
    max_len: int = 128
    max_instr_len: int = 64
    dropout: float = 0.0
    vocab_size: int = 3
    ffn_mult: int = 4
    # Feeding the label-attention mixture alone starves the pair scorer of
    # token identity (rows live on a K-corner simplex) and stalls training
    # at small d; the residual keeps both. Set False for the mixture-only
    # variant.
    residual_label_attn: bool = True

    def validate(self):
        if self.d < 1 or self.d % self.heads != 0:
            raise ValueError(f"hidden size {self.d} must be a positive multiple of heads {self.heads}")
        for name in ("layers_enc", "layers_dec", "heads", "max_len", "max_instr_len", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.vocab_size < 3:
            raise ValueError("vocab_size must cover the 3 reserved ids")
        return self

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj).validate()


def _attn_names(prefix):
    return [f"{prefix}.{w}" for w in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def _ffn_names(prefix):
    return [f"{prefix}.{w}" for w in ("w1", "b1", "w2", "b2")]


def _ln_names(prefix):
    return [f"{prefix}.g", f"{prefix}.b"]


class Parameters:
    """Named parameter tensors plus their group partition.

    Every trainable tensor belongs to exactly one group; groups are the unit
    the training gate freezes or updates.
    """

    def __init__(self, config: ModelConfig, num_channels: int, rng: np.random.Generator):
        config.validate()
        if num_channels < 1:
            raise ValueError("num_channels must be >= 1")
        self.config = config
        self.num_channels = num_channels
        self.tensors: dict[str, Tensor] = {}
        self.groups: dict[str, list[str]] = {}
        self._build(rng)

    def _uniform(self, name, shape, rng):
        bound = 1.0 / math.sqrt(self.config.d)
        self.tensors[name] = Tensor(rng.uniform(-bound, bound, size=shape),
                                    requires_grad=True)

    def _ones(self, name, shape):
        self.tensors[name] = Tensor(np.ones(shape), requires_grad=True)

    def _zeros(self, name, shape):
        self.tensors[name] = Tensor(np.zeros(shape), requires_grad=True)

    def _layer_norm_params(self, prefix):
        self._ones(f"{prefix}.g", (self.config.d,))
        self._zeros(f"{prefix}.b", (self.config.d,))

    def _attn_params(self, prefix, rng):
        d = self.config.d
        for w, b in (("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")):
            self._uniform(f"{prefix}.{w}", (d, d), rng)
            self._uniform(f"{prefix}.{b}", (d,), rng)

    def _ffn_params(self, prefix, rng):
        d, hid = self.config.d, self.config.d * self.config.ffn_mult
        self._uniform(f"{prefix}.w1", (d, hid), rng)
        self._uniform(f"{prefix}.b1", (hid,), rng)
        self._uniform(f"{prefix}.w2", (hid, d), rng)
        self._uniform(f"{prefix}.b2", (d,), rng)

    def _channel_params(self, rng):
        d, k = self.config.d, self.num_channels
        self._uniform("biaffine.w3", (d, k, d), rng)
        self._uniform("biaffine.w4", (k, 2 * d), rng)
        self._uniform("score.w", (k, k), rng)
        self._uniform("score.b", (k,), rng)

    def _build(self, rng):
        cfg = self.config
        d = cfg.d
        self._uniform("embed.tok", (cfg.vocab_size, d), rng)
        self._uniform("embed.pos_x", (cfg.max_len, d), rng)
        self._uniform("embed.pos_u", (cfg.max_instr_len, d), rng)
        self.groups["embed"] = ["embed.tok", "embed.pos_x", "embed.pos_u"]

        for i in range(cfg.layers_enc):
            p = f"enc.{i}"
            self._layer_norm_params(f"{p}.ln1")
            self._attn_params(f"{p}.attn", rng)
            self._layer_norm_params(f"{p}.ln2")
            self._ffn_params(f"{p}.ffn", rng)
            self.groups[p] = (
                _ln_names(f"{p}.ln1") + _attn_names(f"{p}.attn")
                + _ln_names(f"{p}.ln2") + _ffn_names(f"{p}.ffn")
            )
        self._layer_norm_params("enc.norm")
        self.groups["enc.norm"] = _ln_names("enc.norm")

        for i in range(cfg.layers_dec):
            p = f"dec.{i}"
            self._layer_norm_params(f"{p}.ln1")
            self._attn_params(f"{p}.self", rng)
            self._layer_norm_params(f"{p}.ln2")
            self._attn_params(f"{p}.cross", rng)
            self._layer_norm_params(f"{p}.ln3")
            self._ffn_params(f"{p}.ffn", rng)
            self.groups[p] = (
                _ln_names(f"{p}.ln1") + _attn_names(f"{p}.self")
                + _ln_names(f"{p}.ln2") + _attn_names(f"{p}.cross")
                + _ln_names(f"{p}.ln3") + _ffn_names(f"{p}.ffn")
            )
        self._layer_norm_params("dec.norm")
        self.groups["dec.norm"] = _ln_names("dec.norm")

        self._uniform("label_attn.w1", (d, d), rng)
        self._uniform("label_attn.w2", (d, d), rng)
        self.groups["label_attn"] = ["label_attn.w1", "label_attn.w2"]

        for mlp in ("head_mlp", "tail_mlp"):
            self._uniform(f"{mlp}.w1", (d, d), rng)
            self._uniform(f"{mlp}.b1", (d,), rng)
            self._uniform(f"{mlp}.w2", (d, d), rng)
            self._uniform(f"{mlp}.b2", (d,), rng)
            self.groups[mlp] = _ffn_names(mlp)

        self._channel_params(rng)
        self.groups["biaffine"] = ["biaffine.w3", "biaffine.w4"]
        self.groups["score"] = ["score.w", "score.b"]

        covered = [n for names in self.groups.values() for n in names]
        assert sorted(covered) == sorted(self.tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def zero_grads(self):
        for t in self.tensors.values():
            t.zero_grad()

    def grads(self) -> dict:
        return {name: t.grad.copy() for name, t in self.tensors.items()}

    def flat_group(self, group: str, arrays: dict) -> np.ndarray:
        return np.concatenate([arrays[n].reshape(-1) for n in self.groups[group]])

    def copy_values(self) -> dict:
        return {name: t.data.copy() for name, t in self.tensors.items()}

    def load_values(self, values: dict):
        for name, t in self.tensors.items():
            if t.data.shape != values[name].shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{t.data.shape} vs {values[name].shape}")
            t.data[...] = values[name]

    def reinit_channels(self, num_channels: int, rng: np.random.Generator):
        """Re-instantiate only the channel-width-dependent tensors for a new K."""
        self.num_channels = num_channels
        self._channel_params(rng)


@dataclass
class ForwardState:
    h_enc: Tensor    # (|x|, d)
    h_dec: Tensor    # (|u|, d)
    h_slot: Tensor   # (K, d)
    h_x: Tensor      # (|x|, d)
    h_head: Tensor   # (|x|, d)
    h_tail: Tensor   # (|x|, d)
    m_x: Tensor      # (|x|, |x|, K)
    logits: Tensor   # (|x|, |x|, K)


def _linear(x, w, b):
    return ad.add_bias(ad.matmul(x, w), b)


def _split_heads(x: Tensor, heads: int):
    d = x.shape[1]
    dh = d // heads
    return [ad.slice_cols(x, h * dh, (h + 1) * dh) for h in range(heads)]


def _attention(params, prefix, x_q, x_kv, heads, mask=None, train=False, rng=None):
    rate = params.config.dropout if train else 0.0
    q = _linear(x_q, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = _linear(x_kv, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    v = _linear(x_kv, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    dh = params.config.d // heads
    outs = []
    for qh, kh, vh in zip(_split_heads(q, heads), _split_heads(k, heads),
                          _split_heads(v, heads)):
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = ad.add(scores, mask)
        att = ad.softmax_rows(scores)
        if rate:
            att = ad.dropout(att, rate, rng)
        outs.append(ad.matmul(att, vh))
    cat = outs[0]
    for o in outs[1:]:
        cat = ad.concat_last_dim(cat, o)
    return _linear(cat, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def _ffn(params, prefix, x, train=False, rng=None):
    rate = params.config.dropout if train else 0.0
    h = ad.gelu(_linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    if rate:
        h = ad.dropout(h, rate, rng)
    return _linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _ln(params, prefix, x):
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def _causal_mask(n: int) -> Tensor:
    m = np.zeros((n, n))
    m[np.triu_indices(n, k=1)] = _MASKED
    return Tensor(m)


def _embed(params, table_name, ids, pos_table):
    ids = list(ids)
    tok = ad.embedding_lookup(params[table_name], ids)
    pos = ad.embedding_lookup(params[pos_table], list(range(len(ids))))
    return ad.add(tok, pos)


def encode_sentence(params: Parameters, token_ids, train: bool = False,
                    rng=None) -> Tensor:
    """Sentence token ids -> (|x|, d) hidden states."""
    n = len(token_ids)
    cfg = params.config
    if not 1 <= n <= cfg.max_len:
        raise ValueError(f"sentence length {n} outside [1, {cfg.max_len}]")
    x = _embed(params, "embed.tok", token_ids, "embed.pos_x")
    for i in range(cfg.layers_enc):
        p = f"enc.{i}"
        normed = _ln(params, f"{p}.ln1", x)
        x = ad.add(x, _attention(params, f"{p}.attn", normed, normed, cfg.heads,
                                 train=train, rng=rng))
        x = ad.add(x, _ffn(params, f"{p}.ffn", _ln(params, f"{p}.ln2", x),
                           train=train, rng=rng))
    return _ln(params, "enc.norm", x)


def decode_instruction(params: Parameters, h_enc: Tensor, instr_ids,
                       train: bool = False, rng=None) -> Tensor:
    """Instruction ids -> (|u|, d) sentence-aware states.

    Self-attention over the instruction is causal; every layer cross-attends
    to the full sentence encoding.
    """
    m = len(instr_ids)
    cfg = params.config
    if not 1 <= m <= cfg.max_instr_len:
        raise ValueError(f"instruction length {m} outside [1, {cfg.max_instr_len}]")
    mask = _causal_mask(m)
    u = _embed(params, "embed.tok", instr_ids, "embed.pos_u")
    for i in range(cfg.layers_dec):
        p = f"dec.{i}"
        normed = _ln(params, f"{p}.ln1", u)
        u = ad.add(u, _attention(params, f"{p}.self", normed, normed, cfg.heads,
                                 mask=mask, train=train, rng=rng))
        u = ad.add(u, _attention(params, f"{p}.cross", _ln(params, f"{p}.ln2", u),
                                 h_enc, cfg.heads, train=train, rng=rng))
        u = ad.add(u, _ffn(params, f"{p}.ffn", _ln(params, f"{p}.ln3", u),
                           train=train, rng=rng))
    return _ln(params, "dec.norm", u)


def gather_slots(h_dec: Tensor, slot_positions) -> Tensor:
    """Rows of the decoder output at the label slot positions, (K, d)."""
    return ad.embedding_lookup(h_dec, list(slot_positions))


def label_attention(h_enc: Tensor, h_slot: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Each token becomes a convex mixture of the projected slot states."""
    proj_x = ad.matmul(h_enc, w1)
    proj_slot = ad.matmul(h_slot, w2)
    att = ad.softmax_rows(ad.matmul(proj_x, ad.transpose(proj_slot)))
    return ad.matmul(att, proj_slot)


def _mlp(params, prefix, x):
    h = ad.gelu(_linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return _linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def biaffine_score(h_x: Tensor, params: Parameters):
    """Token-pair logits: bilinear head/tail interaction plus a linear term
    on the concatenated pair, then a per-cell K -> K linear map."""
    n, d = h_x.shape
    k = params.num_channels
    h_head = _mlp(params, "head_mlp", h_x)
    h_tail = _mlp(params, "tail_mlp", h_x)

    w3 = params["biaffine.w3"]
    a = ad.matmul(h_head, ad.reshape(w3, (d, k * d)))          # (n, k*d)
    b = ad.matmul(ad.reshape(a, (n * k, d)), ad.transpose(h_tail))  # (n*k, n)
    bilinear = ad.transpose(ad.reshape(b, (n, k, n)), (0, 2, 1))    # (n, n, k)

    pairs = ad.reshape(ad.pairwise_concat(h_head, h_tail), (n * n, 2 * d))
    linear = ad.reshape(ad.matmul(pairs, ad.transpose(params["biaffine.w4"])), (n, n, k))

    m_x = ad.add(bilinear, linear)
    flat = ad.matmul(ad.reshape(m_x, (n * n, k)), ad.transpose(params["score.w"]))
    logits = ad.reshape(ad.add_bias(flat, params["score.b"]), (n, n, k))
    return h_head, h_tail, m_x, logits


def forward(params: Parameters, token_ids, instr_ids, slot_positions,
            train: bool = False, rng=None) -> ForwardState:
    """Full pipeline; deterministic whenever train is False."""
    if len(slot_positions) != params.num_channels:
        raise ValueError(
            f"{len(slot_positions)} slots for a {params.num_channels}-channel model"
        )
    h_enc = encode_sentence(params, token_ids, train=train, rng=rng)
    h_dec = decode_instruction(params, h_enc, instr_ids, train=train, rng=rng)
    h_slot = gather_slots(h_dec, slot_positions)
    h_x = label_attention(h_enc, h_slot, params["label_attn.w1"], params["label_attn.w2"])
    if params.config.residual_label_attn:
        h_x = ad.add(h_enc, h_x)
    h_head, h_tail, m_x, logits = biaffine_score(h_x, params)
    n, k = len(token_ids), params.num_channels
    assert logits.shape == (n, n, k)
    return ForwardState(h_enc=h_enc, h_dec=h_dec, h_slot=h_slot, h_x=h_x,
                        h_head=h_head, h_tail=h_tail, m_x=m_x, logits=logits)
