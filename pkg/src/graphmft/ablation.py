"""Ablation sweeps over one architectural factor, averaged across seeds."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, SynthConfig, gen_synthetic, split_dataset
from .model import ModelConfig
from .train import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

SUITES = ("gat_variant", "depth_sweep", "speaker", "modalities", "window_sweep")
ALIASES = {"gat": "gat_variant", "depth": "depth_sweep", "window": "window_sweep", "modality": "modalities"}
DEFAULT_GRIDS = {
    "gat_variant": ["vanilla", "improved"],
    "depth_sweep": ["1", "2", "4", "8"],
    "speaker": ["without", "with"],
    "modalities": ["VA", "VT", "AT", "VAT"],
    "window_sweep": ["0", "1", "2", "4"],
}


def canonical_suite(name: str) -> str:
    key = name.lower().replace("-", "_")
    key = ALIASES.get(key, key)
    if key not in SUITES:
        raise ValueError(f"unknown suite {name!r}; expected one of {', '.join(SUITES)}")
    return key


def suite_configs(suite: str, base: ModelConfig, grid) -> list[tuple[str, ModelConfig]]:
    """Expand a grid into labelled model configs; depth sweeps run both variants per depth."""
    suite = canonical_suite(suite)
    grid = [str(g).strip() for g in grid]
    if not grid:
        raise ValueError("ablation grid is empty")
    out = []
    for g in grid:
        if suite == "gat_variant":
            out.append((g.lower(), replace(base, gat_variant=g.lower())))
        elif suite == "depth_sweep":
            depth = int(g)
            for variant in ("vanilla", "improved"):
                out.append((f"{variant}-L{depth}", replace(base, L=depth, gat_variant=variant)))
        elif suite == "speaker":
            flag = {"with": True, "on": True, "1": True, "without": False, "off": False, "0": False}.get(g.lower())
            if flag is None:
                raise ValueError(f"speaker grid values are with/without, got {g!r}")
            out.append(("with" if flag else "without", replace(base, use_speaker=flag)))
        elif suite == "modalities":
            mods = g.upper()
            if len(set(mods)) != len(mods) or not set(mods) <= set("VAT"):
                raise ValueError(f"bad modality set {g!r}")
            cfg = replace(base, modalities=mods)
            out.append((cfg.modalities, cfg))
        else:
            w = int(g)
            out.append((f"P{w}F{w}", replace(base, P=w, F=w)))
    return out


@dataclass
class AblationResult:
    suite: str
    runs: list[dict] = field(default_factory=list)

    def summary(self) -> list[dict]:
        rows, order = {}, []
        for r in self.runs:
            if r["config"] not in rows:
                order.append(r["config"])
                rows[r["config"]] = []
            rows[r["config"]].append(r)
        out = []
        for name in order:
            ok = [r for r in rows[name] if r["error"] is None]
            acc = np.array([r["acc"] for r in ok])
            wf1 = np.array([r["wf1"] for r in ok])

            def stats(x):
                if len(x) == 0:
                    return math.nan, math.nan
                return float(x.mean()), float(x.std(ddof=1)) if len(x) > 1 else 0.0

            (am, asd), (wm, wsd) = stats(acc), stats(wf1)
            out.append({"config": name, "seeds": len(ok), "acc_mean": am, "acc_std": asd,
                        "wf1_mean": wm, "wf1_std": wsd, "failed": len(rows[name]) - len(ok)})
        return out

    def mean_wf1(self) -> dict[str, float]:
        return {r["config"]: r["wf1_mean"] for r in self.summary()}

    def summary_csv(self) -> str:
        buf = io.StringIO()
        cols = ["config", "seeds", "acc_mean", "acc_std", "wf1_mean", "wf1_std", "failed"]
        w = csv.DictWriter(buf, cols, lineterminator="\n")
        w.writeheader()
        w.writerows(self.summary())
        return buf.getvalue()

    def runs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config", "seed", "acc", "wf1"])
        for r in self.runs:
            w.writerow([r["config"], r["seed"], r["acc"], r["wf1"]])
        return buf.getvalue()


def run_ablation(suite: str, model_cfg: ModelConfig, train_cfg: TrainConfig, train_set: Dataset,
                 valid_set: Dataset, grid=None, seeds=3) -> AblationResult:
    """Train every (config, seed) cell and score it on ``valid_set``.

    ``seeds`` is a count (seeds ``train_cfg.seed + i``) or an explicit list.
    A failing cell is recorded with its error and the sweep continues.
    """
    suite = canonical_suite(suite)
    grid = DEFAULT_GRIDS[suite] if grid is None else list(grid)
    seed_list = [train_cfg.seed + i for i in range(seeds)] if isinstance(seeds, int) else list(seeds)
    result = AblationResult(suite)
    for label, cfg in suite_configs(suite, model_cfg, grid):
        for seed in seed_list:
            try:
                model, _ = train(cfg, replace(train_cfg, seed=seed), train_set, valid_set)
                m = evaluate(model, valid_set)
                row = {"config": label, "seed": seed, "acc": m.accuracy, "wf1": m.weighted_f1, "error": None}
            except Exception as e:  # a broken cell must not sink the grid
                log.warning("ablation cell %s seed %d failed: %s", label, seed, e)
                row = {"config": label, "seed": seed, "acc": math.nan, "wf1": math.nan, "error": str(e)}
            log.info("%s %s seed %d wf1 %.4f", suite, label, seed, row["wf1"])
            result.runs.append(row)
    return result


# -- synthetic benchmarks ---------------------------------------------------

def benchmark_config(kind: str = "standard", seed: int = 0) -> SynthConfig:
    """Generator settings for the synthetic benchmarks used by the sweeps.

    ``standard`` has equal modality strength; ``snr`` orders modality
    strength V < A < T; ``speaker`` ties speakers to labels.
    """
    base = SynthConfig(n_conv=48, m_range=(8, 14), num_speakers=2, num_classes=4, dims=(8, 8, 8),
                       noise_sigma=0.9, transition_stickiness=0.75, modality_snr=(0.6, 0.6, 0.6), seed=seed)
    if kind == "standard":
        return base
    if kind == "snr":
        # V must stay informative enough that adding it is measurable over A-T
        return replace(base, n_conv=128, modality_snr=(0.5, 0.7, 0.9), noise_sigma=0.7)
    if kind == "speaker":
        return replace(base, num_speakers=4, speaker_label_coupling=0.8)
    raise ValueError(f"unknown benchmark {kind!r}")


def benchmark_splits(kind: str = "standard", seed: int = 0):
    d = gen_synthetic(benchmark_config(kind, seed))
    return split_dataset(d, (0.5, 0.25, 0.25), seed=seed)


SUITE_BENCHMARK = {
    "gat_variant": "standard",
    "depth_sweep": "standard",
    "window_sweep": "standard",
    "modalities": "snr",
    "speaker": "speaker",
}

# desk-scale settings the sweeps were calibrated with
SWEEP_MODEL = {"d": 16, "K": 2, "L": 2, "h": 8, "P": 2, "F": 2, "dropout": 0.5}
SWEEP_TRAIN = {"lr": 5e-3, "batch_size": 8, "max_epochs": 30, "l2_lambda": 1e-5, "dropout": 0.5}


def sweep_configs(header, **overrides) -> tuple[ModelConfig, TrainConfig]:
    model_keys = {k: v for k, v in overrides.items() if k in ModelConfig.__dataclass_fields__}
    train_keys = {k: v for k, v in overrides.items() if k in TrainConfig.__dataclass_fields__}
    mc = ModelConfig.for_header(header, **{**SWEEP_MODEL, **model_keys})
    tc = TrainConfig(**{**SWEEP_TRAIN, **train_keys})
    return mc, tc
