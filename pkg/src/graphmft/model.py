"""GraphMFT forward pass: unimodal encoding, speaker embedding, pair-graph
attention stacks, same-modality summation, fusion and classification."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, fields, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Conversation, DatasetHeader
from .graphs import PAIRS, batch_graph, build_pair_graph
from .layers import Affine, BiRecurrentEncoder, Embedding, GATStack, Module
from .tensor import Tensor

CKPT_MAGIC = b"graphmft-ckpt-v1\n"


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    v_dim: int
    a_dim: int
    t_dim: int
    num_classes: int
    num_speakers: int
    d: int = 128
    K: int = 4
    L: int = 5
    h: int = 64
    P: int = 4
    F: int = 4
    self_loops: bool = True
    dropout: float = 0.5
    use_speaker: bool = True
    modalities: str = "VAT"
    gat_variant: str = "improved"

    def __post_init__(self):
        self.modalities = "".join(m for m in "VAT" if m in self.modalities.upper())
        self.validate()

    def validate(self) -> None:
        for name in ("v_dim", "a_dim", "t_dim", "num_classes", "num_speakers", "d", "K", "h"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d % self.K:
            raise ValueError(f"d={self.d} must be divisible by K={self.K}")
        if self.L < 0 or self.P < 0 or self.F < 0:
            raise ValueError("L, P and F must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if len(self.modalities) < 2:
            raise ValueError("at least two modalities are required; the architecture is pairwise")
        if self.gat_variant not in ("improved", "vanilla"):
            raise ValueError(f"gat_variant must be 'improved' or 'vanilla', got {self.gat_variant!r}")

    @property
    def pairs(self) -> list[str]:
        return [p for p, (x, y) in PAIRS.items() if x in self.modalities and y in self.modalities]

    def input_dim(self, modality: str) -> int:
        return {"V": self.v_dim, "A": self.a_dim, "T": self.t_dim}[modality]

    @classmethod
    def for_header(cls, header: DatasetHeader, **kw) -> ModelConfig:
        return cls(header.v_dim, header.a_dim, header.t_dim, header.num_classes, header.num_speakers, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)


@lru_cache(maxsize=4096)
def _pair_graph(m: int, pair: str, P: int, F: int, self_loops: bool):
    return build_pair_graph(m, pair, P, F, self_loops)


class GraphMFT(Module):
    """Parameter container plus the forward pass.

    Parameters exist only for enabled modalities/pairs, so a V-less model
    has neither a visual encoder nor V-A/V-T stacks.
    """

    def __init__(self, cfg: ModelConfig, seed: int | np.random.Generator = 0, dtype=np.float32):
        self.cfg = cfg
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        d = cfg.d
        self.enc = _Bag()
        if "V" in cfg.modalities:
            self.enc.V = Affine(cfg.v_dim, d, rng, dtype)
        if "A" in cfg.modalities:
            self.enc.A = Affine(cfg.a_dim, d, rng, dtype)
        if "T" in cfg.modalities:
            self.enc.T = BiRecurrentEncoder(cfg.t_dim, cfg.h, d, rng, dtype)
        if cfg.use_speaker:
            self.speaker = Embedding(cfg.num_speakers, d, rng, dtype)
        self.gat = _Bag()
        for pair in cfg.pairs:
            setattr(self.gat, pair, GATStack(d, cfg.K, cfg.L, rng, dtype, improved=cfg.gat_variant == "improved"))
        self.fusion = Affine(len(cfg.modalities) * d, d, rng, dtype, bias=False)
        self.clf = _Bag()
        self.clf.hidden = Affine(d, d, rng, dtype)
        self.clf.out = Affine(d, cfg.num_classes, rng, dtype)

    # -- parameters -------------------------------------------------------
    def params(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.params()
        missing = set(own) - set(state)
        if missing:
            raise CheckpointError(f"missing tensor {sorted(missing)[0]!r}")
        extra = set(state) - set(own)
        if extra:
            raise CheckpointError(f"unexpected tensor {sorted(extra)[0]!r}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, config expects {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)

    def astype(self, dtype) -> GraphMFT:
        for _, t in self.named_parameters():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self

    @property
    def dtype(self):
        return next(iter(self.named_parameters()))[1].dtype

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    # -- forward pieces ---------------------------------------------------
    def encode(self, convs: Sequence[Conversation]) -> dict[str, Tensor]:
        """Per-modality (N, d) features for the stacked utterances of ``convs``."""
        dtype = self.dtype
        lengths = [c.m for c in convs]
        out = {}
        for mod in self.cfg.modalities:
            want = self.cfg.input_dim(mod)
            raw = np.concatenate([c.features(mod) for c in convs], axis=0)
            if raw.shape[1] != want:
                raise T.ShapeError(f"modality {mod} features have width {raw.shape[1]}, model expects {want}")
            x = Tensor(raw.astype(dtype))
            layer = getattr(self.enc, mod)
            out[mod] = layer(x, lengths) if mod == "T" else layer(x)
        return out

    def add_speaker(self, feats: dict[str, Tensor], speakers: np.ndarray) -> dict[str, Tensor]:
        if not self.cfg.use_speaker:
            return feats
        spk = self.speaker(speakers)
        return {mod: x + spk for mod, x in feats.items()}

    def modality_sums(self, feats: dict[str, Tensor], lengths: list[int], training=False, rng=None) -> dict[str, Tensor]:
        """Run every enabled pair stack; each modality sums its halves across the stacks it joins."""
        cfg = self.cfg
        N = sum(lengths)
        sums: dict[str, Tensor] = {}
        for pair in cfg.pairs:
            first, second = PAIRS[pair]
            graph = batch_graph([_pair_graph(m, pair, cfg.P, cfg.F, cfg.self_loops) for m in lengths])
            X0 = T.concat([feats[first], feats[second]], axis=0)
            H = getattr(self.gat, pair)(X0, graph, training, cfg.dropout, rng)
            for mod, part in zip((first, second), T.split(H, [N, N], axis=0)):
                sums[mod] = part if mod not in sums else sums[mod] + part
        return sums

    def fuse(self, feats: dict[str, Tensor], lengths: list[int], training=False, rng=None) -> Tensor:
        sums = self.modality_sums(feats, lengths, training, rng)
        return self.fusion(T.concat([sums[m] for m in self.cfg.modalities], axis=1))

    def classify(self, H: Tensor) -> Tensor:
        return self.clf.out(T.relu(self.clf.hidden(H)))

    def forward(self, convs: Conversation | Sequence[Conversation], training: bool = False, rng=None) -> Tensor:
        """Logits for every utterance, conversations stacked in order.

        Conversations never share edges; batching them only packs disjoint
        graphs into one set of array ops.
        """
        if isinstance(convs, Conversation):
            convs = [convs]
        if training and self.cfg.dropout > 0 and rng is None:
            raise ValueError("training-mode forward needs a dropout generator")
        lengths = [c.m for c in convs]
        feats = self.encode(convs)
        speakers = np.concatenate([c.speakers for c in convs])
        feats = self.add_speaker(feats, speakers)
        return self.classify(self.fuse(feats, lengths, training, rng))

    __call__ = forward


class _Bag(Module):
    """Namespace node so parameter names read ``enc.V.W``."""


def predict(logits) -> np.ndarray:
    """Row-wise argmax; ``np.argmax`` already breaks ties toward the smaller index."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(arr, axis=1)


def probabilities(logits) -> np.ndarray:
    with T.no_grad():
        return T.softmax(T.as_tensor(logits), axis=1).data


# -- checkpoint container ---------------------------------------------------

def checkpoint_bytes(model: GraphMFT) -> bytes:
    cfg = json.dumps(model.cfg.to_dict(), sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", len(cfg)), cfg]
    named = list(model.named_parameters())
    parts.append(struct.pack("<I", len(named)))
    for name, t in named:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model: GraphMFT, path) -> None:
    blob = checkpoint_bytes(model)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> GraphMFT:
    with open(path, "rb") as fh:
        blob = fh.read()
    return checkpoint_from_bytes(blob)


def checkpoint_from_bytes(blob: bytes) -> GraphMFT:
    if not blob.startswith(CKPT_MAGIC):
        head = blob.split(b"\n", 1)[0][:32]
        if head.startswith(b"graphmft-ckpt-"):
            raise CheckpointError(f"unsupported checkpoint version {head.decode(errors='replace')!r}")
        raise CheckpointError("not a graphmft checkpoint (bad magic)")
    if len(blob) < len(CKPT_MAGIC) + 32:
        raise CheckpointError("checkpoint is truncated")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint is corrupt or truncated (digest mismatch)")
    pos = len(CKPT_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("checkpoint is truncated")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    (cfg_len,) = struct.unpack("<I", take(4))
    cfg = ModelConfig.from_dict(json.loads(take(cfg_len).decode("utf-8")))
    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(body):
        raise CheckpointError("trailing bytes after the last tensor")
    model = GraphMFT(cfg, seed=0)
    model.load_state_dict(state)
    return model


def with_config(cfg: ModelConfig, **changes) -> ModelConfig:
    return replace(cfg, **changes)
