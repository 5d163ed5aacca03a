"""Task-agnostic instance model, label spaces, tokenizer and JSONL ingestion.

One JSONL line per sentence:

    {"tokens": [...],
     "entities": [{"type": str, "start": int, "end": int}, ...],
     "links": [{"type": str, "subject": ref, "object": ref}, ...]}

where a ref is either an integer index into "entities" or a raw span
{"start": int, "end": int}. Token offsets are inclusive on both ends.

A dataset manifest is a JSON object {"id", "task", "entity_types",
"relation_types", "train", "dev", "test"} with split paths resolved relative
to the manifest file.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

__all__ = [
    "DataError",
    "LabelSpace",
    "Mention",
    "Link",
    "Instance",
    "Splits",
    "Dataset",
    "Vocabulary",
    "PAD_ID",
    "UNK_ID",
    "SLOT_ID",
    "tokenize",
    "load_jsonl",
    "load_manifest",
    "build_vocab",
]

TASK_KINDS = ("NER", "RE", "EE", "ABSA")

ABSA_ENTITY_TYPES = ["Expression", "Aspect"]
ABSA_RELATION_TYPES = ["Positive", "Negative", "Neutral"]

PAD_ID, UNK_ID, SLOT_ID = 0, 1, 2
_RESERVED = ["<pad>", "<unk>", "<slot>"]


class DataError(ValueError):
    """Malformed corpus file, manifest, or annotation."""


class LabelSpace:
    """Ordered entity-type and relation-type channels of one dataset.

    Channel indices run entities first, then relations; K is their total.
    """

    def __init__(self, entity_types, relation_types):
        self.entity_types = list(entity_types)
        self.relation_types = list(relation_types)
        names = self.entity_types + self.relation_types
        if len(set(names)) != len(names):
            raise DataError(f"duplicate label names in {names}")
        if not names:
            raise DataError("label space must have at least one channel")
        self.channel_index = {name: i for i, name in enumerate(names)}

    @property
    def num_channels(self) -> int:
        return len(self.channel_index)

    @property
    def channels(self):
        return self.entity_types + self.relation_types

    def channel(self, name: str) -> int:
        try:
            return self.channel_index[name]
        except KeyError:
            raise DataError(f"unknown label name {name!r}") from None

    def is_entity_channel(self, k: int) -> bool:
        return k < len(self.entity_types)

    def __eq__(self, other):
        return (
            isinstance(other, LabelSpace)
            and self.entity_types == other.entity_types
            and self.relation_types == other.relation_types
        )

    def __repr__(self):
        return f"LabelSpace(entities={self.entity_types}, relations={self.relation_types})"


@dataclass(frozen=True)
class Mention:
    type: str
    start: int
    end: int

    @property
    def span(self):
        return (self.start, self.end)


@dataclass(frozen=True)
class Link:
    """A typed directed connection; endpoints are mention indices or raw spans."""

    type: str
    subject: object  # int index into entities, or (start, end)
    object: object


@dataclass
class Instance:
    tokens: list
    entities: list = field(default_factory=list)
    links: list = field(default_factory=list)
    dataset_id: str = ""

    def resolve(self, ref):
        """Turn a link endpoint into ((start, end), entity type or None)."""
        if isinstance(ref, int):
            m = self.entities[ref]
            return m.span, m.type
        return (int(ref[0]), int(ref[1])), None


@dataclass
class Splits:
    train: list
    dev: list
    test: list


@dataclass
class Dataset:
    id: str
    task_kind: str
    label_space: LabelSpace
    splits: Splits


def tokenize(text: str, lowercase: bool = False):
    toks = text.split()
    return [t.lower() for t in toks] if lowercase else toks


def _parse_ref(raw, n_entities: int, where: str):
    if isinstance(raw, bool):
        raise DataError(f"{where}: mention ref must be an index or span")
    if isinstance(raw, int):
        if not 0 <= raw < n_entities:
            raise DataError(f"{where}: mention index {raw} out of range")
        return raw
    if isinstance(raw, dict) and "start" in raw and "end" in raw:
        return (int(raw["start"]), int(raw["end"]))
    raise DataError(f"{where}: mention ref must be an index or {{start,end}} span")


def _check_span(start: int, end: int, n_tokens: int, where: str):
    if not (0 <= start <= end < n_tokens):
        raise DataError(
            f"{where}: span ({start}, {end}) out of bounds for {n_tokens} tokens"
        )


def parse_instance(obj: dict, label_space: LabelSpace, dataset_id: str, where: str) -> Instance:
    tokens = obj.get("tokens")
    if not isinstance(tokens, list) or not tokens or not all(isinstance(t, str) for t in tokens):
        raise DataError(f"{where}: 'tokens' must be a non-empty list of strings")
    n = len(tokens)

    entities = []
    for j, ent in enumerate(obj.get("entities", [])):
        t = ent.get("type")
        if t not in label_space.entity_types:
            raise DataError(f"{where}: unknown entity type {t!r}")
        start, end = int(ent["start"]), int(ent["end"])
        _check_span(start, end, n, f"{where} entity {j}")
        entities.append(Mention(t, start, end))

    links = []
    for j, lk in enumerate(obj.get("links", [])):
        t = lk.get("type")
        if t not in label_space.relation_types:
            raise DataError(f"{where}: unknown relation type {t!r}")
        subj = _parse_ref(lk.get("subject"), len(entities), f"{where} link {j} subject")
        objr = _parse_ref(lk.get("object"), len(entities), f"{where} link {j} object")
        for ref in (subj, objr):
            if isinstance(ref, tuple):
                _check_span(ref[0], ref[1], n, f"{where} link {j}")
        links.append(Link(t, subj, objr))

    return Instance(tokens=tokens, entities=entities, links=links, dataset_id=dataset_id)


def load_jsonl(path, label_space: LabelSpace, *, dataset_id: str = "",
               max_len: int = 128, lowercase: bool = False):
    """Load and validate instances; returns (instances, n_dropped_too_long).

    Sentences longer than max_len are dropped, never truncated: truncation
    would corrupt gold offsets.
    """
    path = Path(path)
    instances = []
    dropped = 0
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            inst = parse_instance(obj, label_space, dataset_id, f"{path}:{lineno}")
            if len(inst.tokens) > max_len:
                dropped += 1
                continue
            if lowercase:
                inst.tokens = [t.lower() for t in inst.tokens]
            instances.append(inst)
    return instances, dropped


def _check_task_shape(task: str, space: LabelSpace):
    if task not in TASK_KINDS:
        raise DataError(f"unknown task kind {task!r}; expected one of {TASK_KINDS}")
    if task == "NER" and space.relation_types:
        raise DataError("NER datasets must have an empty relation-type list")
    if task in ("RE", "EE") and (not space.entity_types or not space.relation_types):
        raise DataError(f"{task} datasets need both entity and relation types")
    if task == "ABSA" and (
        space.entity_types != ABSA_ENTITY_TYPES or space.relation_types != ABSA_RELATION_TYPES
    ):
        raise DataError(
            "ABSA label space is fixed to entities "
            f"{ABSA_ENTITY_TYPES} and relations {ABSA_RELATION_TYPES}"
        )


def load_manifest(path, *, max_len: int = 128, lowercase: bool = False) -> Dataset:
    """Load a dataset manifest and all three splits."""
    path = Path(path)
    try:
        spec = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON ({exc.msg})") from None
    for key in ("id", "task", "entity_types", "relation_types", "train", "dev", "test"):
        if key not in spec:
            raise DataError(f"{path}: manifest missing field {key!r}")
    space = LabelSpace(spec["entity_types"], spec["relation_types"])
    _check_task_shape(spec["task"], space)

    base = path.parent
    splits = {}
    for split in ("train", "dev", "test"):
        split_path = base / spec[split]
        if not split_path.exists():
            raise DataError(f"{path}: {split} split not found at {split_path}")
        splits[split], _ = load_jsonl(
            split_path, space, dataset_id=spec["id"], max_len=max_len, lowercase=lowercase
        )
    return Dataset(
        id=spec["id"],
        task_kind=spec["task"],
        label_space=space,
        splits=Splits(**splits),
    )


class Vocabulary:
    """Token -> id map with fixed reserved ids.

    0 is padding, 1 the generic unknown, 2 the slot marker used for label
    words that fall outside the vocabulary (so an unseen label channel still
    renders as an identifiable slot token rather than plain <unk>).
    """

    def __init__(self, tokens):
        self.id_to_token = _RESERVED + list(tokens)
        if len(set(self.id_to_token)) != len(self.id_to_token):
            raise DataError("vocabulary tokens must be unique")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, tokens):
        return [self.id(t) for t in tokens]

    def to_json(self) -> list:
        return self.id_to_token[len(_RESERVED):]

    @classmethod
    def from_json(cls, tokens) -> "Vocabulary":
        return cls(tokens)


def build_vocab(datasets, min_count: int = 1, extra_texts=()) -> Vocabulary:
    """Count tokens over training splits (plus optional raw texts, e.g.
    instruction templates) and keep those seen at least min_count times.

    Order is frequency-descending with a lexicographic tiebreak, so identical
    corpora always serialize byte-equally.
    """
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    counts = Counter()
    for ds in datasets:
        for inst in ds.splits.train:
            counts.update(inst.tokens)
    for text in extra_texts:
        counts.update(tokenize(text))
    for reserved in _RESERVED:
        counts.pop(reserved, None)
    kept = sorted(
        (t for t, c in counts.items() if c >= min_count),
        key=lambda t: (-counts[t], t),
    )
    return Vocabulary(kept)
