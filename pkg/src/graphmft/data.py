"""Conversation datasets: the ``graphmft-v1`` line format and a synthetic generator."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

SCHEMA_TAG = "graphmft-v1"
MODALITIES = ("V", "A", "T")
SPLITS = ("train", "valid", "test")
_FEATURE_KEYS = {"V": "v", "A": "a", "T": "t"}


class DatasetFormatError(ValueError):
    """A ``graphmft-v1`` file violates the schema; the message names line and field."""


@dataclass(frozen=True)
class DatasetHeader:
    v_dim: int
    a_dim: int
    t_dim: int
    num_classes: int
    num_speakers: int
    schema_tag: str = SCHEMA_TAG

    def __post_init__(self):
        if self.schema_tag != SCHEMA_TAG:
            raise DatasetFormatError(f"schema_tag must be {SCHEMA_TAG!r}, got {self.schema_tag!r}")
        for name in ("v_dim", "a_dim", "t_dim", "num_classes", "num_speakers"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise DatasetFormatError(f"header field {name!r} must be a positive integer, got {value!r}")

    def dim(self, modality: str) -> int:
        return {"V": self.v_dim, "A": self.a_dim, "T": self.t_dim}[modality]


@dataclass(eq=False)
class Conversation:
    id: str
    speakers: np.ndarray
    labels: np.ndarray
    v: np.ndarray
    a: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.speakers = np.asarray(self.speakers, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.v = np.asarray(self.v, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)

    @property
    def m(self) -> int:
        return len(self.labels)

    def features(self, modality: str) -> np.ndarray:
        return getattr(self, _FEATURE_KEYS[modality])

    def validate(self, header: DatasetHeader) -> None:
        m = len(self.labels)
        if m < 1:
            raise DatasetFormatError(f"conversation {self.id!r}: field 'labels' is empty")
        if len(self.speakers) != m:
            raise DatasetFormatError(f"conversation {self.id!r}: field 'speakers' has {len(self.speakers)} entries, expected {m}")
        for mod in MODALITIES:
            key = _FEATURE_KEYS[mod]
            arr = self.features(mod)
            want = header.dim(mod)
            if arr.ndim != 2 or arr.shape[0] != m:
                raise DatasetFormatError(f"conversation {self.id!r}: field {key!r} must hold {m} vectors")
            if arr.shape[1] != want:
                raise DatasetFormatError(f"conversation {self.id!r}: field {key!r} vectors have length {arr.shape[1]}, expected {want}")
            if not np.all(np.isfinite(arr)):
                raise DatasetFormatError(f"conversation {self.id!r}: field {key!r} contains non-finite values")
        if self.labels.min() < 0 or self.labels.max() >= header.num_classes:
            raise DatasetFormatError(f"conversation {self.id!r}: field 'labels' out of range [0, {header.num_classes})")
        if self.speakers.min() < 0 or self.speakers.max() >= header.num_speakers:
            raise DatasetFormatError(f"conversation {self.id!r}: field 'speakers' out of range [0, {header.num_speakers})")

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "speakers": self.speakers.tolist(),
            "labels": self.labels.tolist(),
            "v": self.v.tolist(),
            "a": self.a.tolist(),
            "t": self.t.tolist(),
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, Conversation):
            return NotImplemented
        return self.id == other.id and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("speakers", "labels", "v", "a", "t")
        )


@dataclass(eq=True)
class Dataset:
    header: DatasetHeader
    conversations: list[Conversation]
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DatasetFormatError(f"split must be one of {SPLITS}, got {self.split!r}")

    def __len__(self) -> int:
        return len(self.conversations)

    @property
    def num_utterances(self) -> int:
        return sum(c.m for c in self.conversations)

    def labels(self) -> np.ndarray:
        return np.concatenate([c.labels for c in self.conversations])


def _header_from_obj(obj, lineno: int) -> tuple[DatasetHeader, str]:
    if not isinstance(obj, dict):
        raise DatasetFormatError(f"line {lineno}: header must be a JSON object")
    known = {"schema_tag", "v_dim", "a_dim", "t_dim", "num_classes", "num_speakers", "split"}
    extra = set(obj) - known
    if extra:
        raise DatasetFormatError(f"line {lineno}: unknown header field {sorted(extra)[0]!r}")
    for key in known - {"split"}:
        if key not in obj:
            raise DatasetFormatError(f"line {lineno}: header field {key!r} missing")
    try:
        header = DatasetHeader(**{k: obj[k] for k in known - {"split"}})
    except DatasetFormatError as e:
        raise DatasetFormatError(f"line {lineno}: {e}") from None
    return header, obj.get("split", "train")


def _conversation_from_obj(obj, header: DatasetHeader, lineno: int) -> Conversation:
    if not isinstance(obj, dict):
        raise DatasetFormatError(f"line {lineno}: conversation must be a JSON object")
    fields = ("id", "speakers", "labels", "v", "a", "t")
    for key in fields:
        if key not in obj:
            raise DatasetFormatError(f"line {lineno}: field {key!r} missing")
    extra = set(obj) - set(fields)
    if extra:
        raise DatasetFormatError(f"line {lineno}: unknown field {sorted(extra)[0]!r}")
    m = len(obj["labels"]) if isinstance(obj["labels"], list) else -1
    for key in ("speakers", "labels"):
        vals = obj[key]
        if not isinstance(vals, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in vals):
            raise DatasetFormatError(f"line {lineno}: field {key!r} must be a list of integers")
    for key, mod in (("v", "V"), ("a", "A"), ("t", "T")):
        rows = obj[key]
        want = header.dim(mod)
        if not isinstance(rows, list) or len(rows) != m:
            raise DatasetFormatError(f"line {lineno}: field {key!r} must hold {m} vectors")
        for r, row in enumerate(rows):
            if not isinstance(row, list) or len(row) != want:
                got = len(row) if isinstance(row, list) else type(row).__name__
                raise DatasetFormatError(f"line {lineno}: field {key!r} vector {r} has length {got}, expected {want}")
            if not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in row):
                raise DatasetFormatError(f"line {lineno}: field {key!r} vector {r} contains a non-number")
    conv = Conversation(str(obj["id"]), obj["speakers"], obj["labels"], obj["v"], obj["a"], obj["t"])
    try:
        conv.validate(header)
    except DatasetFormatError as e:
        raise DatasetFormatError(f"line {lineno}: {e}") from None
    return conv


def load_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError("line 1: missing header")
    header = split = None
    conversations = []
    for lineno, text in enumerate(lines, 1):
        if not text.strip():
            raise DatasetFormatError(f"line {lineno}: blank line")
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"line {lineno}: malformed JSON ({e.msg})") from None
        if header is None:
            header, split = _header_from_obj(obj, lineno)
        else:
            conversations.append(_conversation_from_obj(obj, header, lineno))
    return Dataset(header, conversations, split)


def _atomic_write_text(path, text: str) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def dumps_dataset(d: Dataset) -> str:
    h = d.header
    head = {
        "schema_tag": h.schema_tag,
        "v_dim": h.v_dim,
        "a_dim": h.a_dim,
        "t_dim": h.t_dim,
        "num_classes": h.num_classes,
        "num_speakers": h.num_speakers,
        "split": d.split,
    }
    lines = [json.dumps(head)]
    lines.extend(json.dumps(c.to_record()) for c in d.conversations)
    return "\n".join(lines) + "\n"


def save_dataset(d: Dataset, path) -> None:
    _atomic_write_text(path, dumps_dataset(d))


# -- synthetic data ---------------------------------------------------------

@dataclass
class SynthConfig:
    """Knobs of the synthetic generator.

    ``speaker_label_coupling`` is the probability that an utterance's speaker
    is tied to its label (``label % num_speakers``) instead of drawn
    uniformly; at 0 speakers carry no label information.
    """

    n_conv: int = 20
    m_range: tuple[int, int] = (6, 12)
    num_speakers: int = 2
    num_classes: int = 6
    dims: tuple[int, int, int] = (16, 16, 16)
    noise_sigma: float = 0.5
    transition_stickiness: float = 0.7
    modality_snr: tuple[float, float, float] = (1.0, 1.0, 1.0)
    speaker_label_coupling: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_speakers < 1:
            raise ValueError(f"num_speakers must be >= 1, got {self.num_speakers}")
        if self.n_conv < 1:
            raise ValueError(f"n_conv must be >= 1, got {self.n_conv}")
        lo, hi = self.m_range
        if not 1 <= lo <= hi:
            raise ValueError(f"m_range must satisfy 1 <= lo <= hi, got {self.m_range}")
        if len(self.dims) != 3 or min(self.dims) < self.num_classes:
            raise ValueError(f"every modality dim must be >= num_classes ({self.num_classes}), got {self.dims}")
        if len(self.modality_snr) != 3 or min(self.modality_snr) < 0:
            raise ValueError(f"modality_snr must be three non-negative scales, got {self.modality_snr}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.transition_stickiness <= 1.0:
            raise ValueError(f"transition_stickiness must lie in [0, 1], got {self.transition_stickiness}")
        if not 0.0 <= self.speaker_label_coupling <= 1.0:
            raise ValueError(f"speaker_label_coupling must lie in [0, 1], got {self.speaker_label_coupling}")


def prototypes(num_classes: int, dim: int) -> np.ndarray:
    """Unit-norm class prototypes: the first ``num_classes`` basis vectors."""
    return np.eye(num_classes, dim)


def speaker_offsets(rng: np.random.Generator, num_speakers: int, dim: int, norm: float = 0.25) -> np.ndarray:
    raw = rng.standard_normal((num_speakers, dim))
    lengths = np.linalg.norm(raw, axis=1, keepdims=True)
    return norm * raw / np.where(lengths > 0, lengths, 1.0)


def sticky_chain(rng: np.random.Generator, m: int, num_classes: int, stickiness: float) -> np.ndarray:
    labels = np.empty(m, dtype=np.int64)
    labels[0] = rng.integers(num_classes)
    for i in range(1, m):
        if rng.random() < stickiness:
            labels[i] = labels[i - 1]
        else:
            other = rng.integers(num_classes - 1)
            labels[i] = other + (other >= labels[i - 1])
    return labels


def gen_synthetic(cfg: SynthConfig) -> Dataset:
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    offset_seq, conv_seq = root.spawn(2)
    offset_rng = np.random.default_rng(offset_seq)
    offsets = [speaker_offsets(offset_rng, cfg.num_speakers, dim) for dim in cfg.dims]
    protos = [prototypes(cfg.num_classes, dim) for dim in cfg.dims]
    rng = np.random.default_rng(conv_seq)
    convs = []
    lo, hi = cfg.m_range
    width = len(str(cfg.n_conv - 1))
    for c in range(cfg.n_conv):
        m = int(rng.integers(lo, hi + 1))
        labels = sticky_chain(rng, m, cfg.num_classes, cfg.transition_stickiness)
        speakers = rng.integers(cfg.num_speakers, size=m)
        if cfg.speaker_label_coupling > 0:
            tied = rng.random(m) < cfg.speaker_label_coupling
            speakers = np.where(tied, labels % cfg.num_speakers, speakers)
        feats = []
        for k in range(3):
            noise = rng.standard_normal((m, cfg.dims[k])) * cfg.noise_sigma
            feats.append(cfg.modality_snr[k] * protos[k][labels] + offsets[k][speakers] + noise)
        convs.append(Conversation(f"conv{c:0{width}d}", speakers, labels, *feats))
    header = DatasetHeader(cfg.dims[0], cfg.dims[1], cfg.dims[2], cfg.num_classes, cfg.num_speakers)
    return Dataset(header, convs, "train")


def split_dataset(d: Dataset, ratios=(0.8, 0.1, 0.1), seed: int = 0, allow_empty: bool = False):
    """Conversation-level seeded partition into (train, valid, test).

    Sizes are ``floor(ratio * n)`` with leftovers handed out by largest
    remainder (ties to the earlier split).
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(d.conversations)
    raw = [r * n for r in ratios]
    sizes = [math.floor(x + 1e-9) for x in raw]
    rest = n - sum(sizes)
    order = sorted(range(3), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:rest]:
        sizes[i] += 1
    if not allow_empty:
        for name, size in zip(SPLITS, sizes):
            if size == 0:
                raise ValueError(f"split {name!r} would be empty ({n} conversations, ratios {ratios})")
    perm = np.random.default_rng(seed).permutation(n)
    out, start = [], 0
    for name, size in zip(SPLITS, sizes):
        idx = sorted(perm[start:start + size])
        out.append(Dataset(d.header, [d.conversations[i] for i in idx], name))
        start += size
    return tuple(out)


def with_split(d: Dataset, split: str) -> Dataset:
    return replace(d, split=split)
