"""Compare reverse-mode gradients against central finite differences."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    tol: float
    eps: float
    bits: int
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = all(e <= self.tol for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def lines(self) -> list[str]:
        out = [f"{name} {err:.3e} {'PASS' if err <= self.tol else 'FAIL'}" for name, err in self.errors.items()]
        verdict = "PASS" if self.passed else "FAIL"
        out.append(f"gradcheck {verdict} max_rel_err={self.max_error:.3e} tol={self.tol:.1e} eps={self.eps:.1e} bits={self.bits}")
        return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger of the two gradients' max magnitude."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    diff = np.abs(a - n).max(initial=0.0)
    if scale == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return float(diff / scale)


def _as_named(inputs) -> dict[str, Tensor]:
    if isinstance(inputs, dict):
        return dict(inputs)
    return {str(i): t for i, t in enumerate(inputs)}


def gradcheck(f: Callable, inputs, eps: float = 1e-6, tol: float = 1e-6, bits: int = 64) -> GradcheckReport:
    """Check ``f``'s analytic gradients w.r.t. every tensor in ``inputs``.

    ``f`` receives ``inputs`` (a dict or a list, same structure as given)
    and must return a scalar tensor deterministically.  The analytic pass
    runs at ``bits`` precision; the finite-difference oracle always runs in
    64-bit so a 32-bit check measures the backward pass, not the oracle.
    """
    named = _as_named(inputs)
    is_dict = isinstance(inputs, dict)
    analytic_dtype = np.float32 if bits == 32 else np.float64

    def call(tensors: dict[str, Tensor]):
        arg = tensors if is_dict else [tensors[k] for k in named]
        return f(arg)

    originals = {k: t.data for k, t in named.items()}
    saved_flags = {k: t.requires_grad for k, t in named.items()}
    try:
        with T.precision(bits):
            for k, t in named.items():
                t.data = originals[k].astype(analytic_dtype)
                t.grad = None
                t.requires_grad = True
            out = call(named)
            if out.size != 1:
                raise T.ShapeError("gradcheck needs a scalar-valued function")
            T.backward(out)
            analytic = {k: (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in named.items()}

        errors = {}
        with T.precision(64), T.no_grad():
            for k, t in named.items():
                t.data = originals[k].astype(np.float64)
            for k, t in named.items():
                base = t.data
                numeric = np.zeros(base.shape)
                flat = numeric.reshape(-1)
                for i in range(base.size):
                    probe = base.copy().reshape(-1)
                    probe[i] += eps
                    t.data = probe.reshape(base.shape)
                    plus = call(named).item()
                    probe[i] -= 2 * eps
                    t.data = probe.reshape(base.shape)
                    minus = call(named).item()
                    flat[i] = (plus - minus) / (2 * eps)
                t.data = base
                if not np.all(np.isfinite(numeric)):
                    raise T.NonFiniteError(f"non-finite finite-difference gradient for {k}")
                errors[k] = relative_error(analytic[k], numeric)
    finally:
        for k, t in named.items():
            t.data = originals[k]
            t.requires_grad = saved_flags[k]
            t.grad = None
    return GradcheckReport(errors, tol, eps, bits)


def model_gradcheck(seed: int = 0, bits: int = 64, tol: float | None = None, eps: float = 1e-4,
                    d: int = 8, K: int = 2, L: int = 2, m: int = 2) -> GradcheckReport:
    """End-to-end check of every GraphMFT parameter on a tiny synthetic conversation."""
    from .data import SynthConfig, gen_synthetic
    from .model import GraphMFT, ModelConfig
    from .train import cross_entropy

    data = gen_synthetic(SynthConfig(n_conv=1, m_range=(m, m), num_speakers=2, num_classes=3,
                                     dims=(4, 4, 4), seed=seed))
    conv = data.conversations[0]
    cfg = ModelConfig.for_header(data.header, d=d, K=K, L=L, h=4, P=1, F=1, dropout=0.0)
    model = GraphMFT(cfg, seed).astype(np.float64)
    params = model.params()
    report = gradcheck(lambda _: cross_entropy(model(conv), conv.labels), params, eps=eps,
                       tol=tol if tol is not None else (1e-4 if bits == 32 else 1e-6), bits=bits)
    return report


def layers_gradcheck(seed: int = 0, bits: int = 64, tol: float | None = None, eps: float = 1e-6) -> GradcheckReport:
    """Check each layer type in isolation; names are prefixed by the layer."""
    from .graphs import build_pair_graph
    from .layers import Affine, BiRecurrentEncoder, Embedding, GATLayer, GATStack

    rng = np.random.default_rng(seed)
    tol = tol if tol is not None else (1e-4 if bits == 32 else 1e-6)
    errors: dict[str, float] = {}

    def probe(weights):
        w = Tensor(weights)
        return lambda y: (y * w).sum()

    def run(prefix, module, fn):
        params = dict(module.named_parameters())
        rep = gradcheck(fn, params, eps=eps, tol=tol, bits=bits)
        errors.update({f"{prefix}.{k}": v for k, v in rep.errors.items()})

    x = rng.standard_normal((5, 3))
    aff = Affine(3, 4, rng, np.float64)
    aff.b.data = rng.standard_normal(4)
    w = probe(rng.standard_normal((5, 4)))
    run("affine", aff, lambda _: w(aff(Tensor(x))))

    emb = Embedding(3, 4, rng, np.float64)
    w = probe(rng.standard_normal((4, 4)))
    run("embedding", emb, lambda _: w(emb([0, 2, 0, 1])))

    seq = rng.standard_normal((7, 3))
    enc = BiRecurrentEncoder(3, 2, 4, rng, np.float64)
    for cell in (enc.fwd, enc.bwd):
        cell.b.data = rng.standard_normal(cell.b.shape) * 0.5
    w = probe(rng.standard_normal((7, 4)))
    run("birecurrent", enc, lambda _: w(enc(Tensor(seq), [4, 3])))

    g = build_pair_graph(3, "VA", 1, 1, True)
    X = rng.standard_normal((6, 4))
    gat = GATLayer(4, 2, rng, np.float64)
    w = probe(rng.standard_normal((6, 4)))
    run("gat", gat, lambda _: w(gat(Tensor(X), g)))

    stack = GATStack(4, 2, 2, rng, np.float64, improved=True)
    run("improved_stack", stack, lambda _: w(stack(Tensor(X), g)))
    vanilla = GATStack(4, 2, 2, rng, np.float64, improved=False)
    run("vanilla_stack", vanilla, lambda _: w(vanilla(Tensor(X), g)))
    return GradcheckReport(errors, tol, eps, bits)
