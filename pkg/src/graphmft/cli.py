"""``graphmft`` command line: gen-synth, graph-dump, gradcheck, train, eval, ablate.

Every flag ``--foo-bar`` has the config-file key ``foo_bar``.  Values
resolve as: command default < ``preset`` < ``--config`` file <
``GRAPHMFT_SEED`` (seed only) < explicit flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from typing import Any, Callable

from . import __version__
from .ablation import SUITE_BENCHMARK, SWEEP_MODEL, SWEEP_TRAIN, benchmark_splits, canonical_suite, run_ablation
from .data import DatasetFormatError, SynthConfig, gen_synthetic, load_dataset, save_dataset, split_dataset
from .graphs import build_pair_graph, dump_graph, format_graph
from .model import CheckpointError, ModelConfig, load_checkpoint, save_checkpoint
from .train import PRESETS, TrainConfig, TrainingDiverged, evaluate, train

log = logging.getLogger("graphmft")


class UsageError(Exception):
    pass


class ArgParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(x) for x in text)
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def _strs(text) -> list[str]:
    if isinstance(text, (list, tuple)):
        return [str(x) for x in text]
    return [x.strip() for x in str(text).split(",") if x.strip()]


def _opt_int(text):
    return None if text in (None, "none", "None", "") else int(text)


def _opt_float(text):
    return None if text in (None, "none", "None", "") else float(text)


def _bool(value):
    if isinstance(value, bool):
        return value
    raise ValueError(f"expected true/false, got {value!r}")


@dataclass
class Opt:
    key: str
    type: Callable
    default: Any
    help: str
    choices: tuple | None = None

    @property
    def flag(self) -> str:
        return "--" + self.key.replace("_", "-")


def model_opts(defaults: dict) -> list[Opt]:
    return [
        Opt("d", int, defaults["d"], "hidden width shared by every stage"),
        Opt("heads", int, defaults["K"], "attention heads per layer (must divide d)"),
        Opt("layers", int, defaults["L"], "graph attention layers per pair stack"),
        Opt("rnn_hidden", int, defaults["h"], "hidden size of each text LSTM direction"),
        Opt("p", int, defaults["P"], "past context window"),
        Opt("f", int, defaults["F"], "future context window"),
        Opt("self_loops", _bool, True, "add a self edge to every node"),
        Opt("use_speaker", _bool, True, "add the speaker embedding to every modality"),
        Opt("modalities", str, "vat", "enabled modalities, two or three of v/a/t"),
        Opt("gat_variant", str, "improved", "attention stack flavour", ("improved", "vanilla")),
    ]


def train_opts(defaults: dict) -> list[Opt]:
    return [
        Opt("preset", str, None, "published hyperparameter preset (IEMOCAP or MELD settings)", tuple(PRESETS)),
        Opt("lr", float, defaults["lr"], "AdamW learning rate"),
        Opt("batch_size", int, defaults["batch_size"], "conversations per optimisation step"),
        Opt("max_epochs", int, defaults["max_epochs"], "training epochs"),
        Opt("l2_lambda", float, defaults["l2_lambda"], "decoupled weight decay"),
        Opt("dropout", float, defaults["dropout"], "dropout on attention weights and layer outputs"),
        Opt("seed", int, 0, "master seed for init, shuffling and dropout"),
        Opt("patience", _opt_int, None, "stop after this many epochs without valid improvement"),
        Opt("grad_clip", _opt_float, None, "clip the global gradient norm to this value"),
    ]


def data_opts(require_data: bool) -> list[Opt]:
    return [
        Opt("data", str, None, "graphmft-v1 file to split into train/valid/test"
            + ("" if require_data else " (omit to use the suite's synthetic benchmark)")),
        Opt("train", str, None, "explicit training split file"),
        Opt("valid", str, None, "explicit validation split file"),
        Opt("test", str, None, "explicit test split file"),
        Opt("split", _floats, (0.8, 0.1, 0.1), "train,valid,test ratios used with --data"),
        Opt("split_seed", int, 0, "seed of the conversation-level split"),
    ]


TRAIN_DEFAULTS = {"d": 128, "K": 4, "L": 5, "h": 64, "P": 4, "F": 4, **PRESETS["iemocap"]}
SWEEP_DEFAULTS = {**SWEEP_MODEL, **SWEEP_TRAIN}

GEN_OPTS = [
    Opt("out", str, None, "output dataset path (required)"),
    Opt("n_conv", int, 20, "number of conversations"),
    Opt("m_min", int, 6, "minimum utterances per conversation"),
    Opt("m_max", int, 12, "maximum utterances per conversation"),
    Opt("num_speakers", int, 2, "speaker vocabulary size"),
    Opt("num_classes", int, 6, "emotion classes"),
    Opt("v_dim", int, 16, "visual feature width"),
    Opt("a_dim", int, 16, "acoustic feature width"),
    Opt("t_dim", int, 16, "textual feature width"),
    Opt("noise_sigma", float, 0.5, "Gaussian feature noise"),
    Opt("stickiness", float, 0.7, "label self-transition probability"),
    Opt("snr", _floats, (1.0, 1.0, 1.0), "prototype scale per modality, v,a,t"),
    Opt("speaker_label_coupling", float, 0.0, "probability a speaker is tied to the label"),
    Opt("seed", int, 0, "generator seed"),
]

GRAPH_OPTS = [
    Opt("m", int, 3, "utterances in the conversation"),
    Opt("p", int, 1, "past context window"),
    Opt("f", int, 1, "future context window"),
    Opt("pair", str, "va", "modality pair", ("va", "vt", "at")),
    Opt("self_loops", _bool, True, "add a self edge to every node"),
    Opt("out", str, "-", "edge-list path, '-' for stdout"),
]

GRADCHECK_OPTS = [
    Opt("scope", str, "model", "what to check", ("layers", "model")),
    Opt("seed", int, 0, "seed for the toy inputs and weights"),
    Opt("tol", _opt_float, None, "max relative error (default 1e-6 at 64-bit, 1e-4 at 32-bit)"),
    Opt("bits", int, 64, "precision of the analytic pass", (32, 64)),
    Opt("eps", float, 1e-4, "finite-difference step"),
]

TRAIN_OPTS = data_opts(True) + model_opts(TRAIN_DEFAULTS) + train_opts(TRAIN_DEFAULTS) + [
    Opt("out_dir", str, None, "directory for checkpoint, history, metrics (required)"),
]

EVAL_OPTS = [
    Opt("checkpoint", str, None, "checkpoint path (required)"),
    Opt("data", str, None, "graphmft-v1 file to evaluate (required)"),
    Opt("out_dir", str, None, "directory for metrics.json and confusion.csv"),
]

ABLATE_OPTS = [
    Opt("suite", str, None, "gat_variant, depth_sweep, speaker, modalities or window_sweep (required)"),
    Opt("grid", _strs, None, "comma-separated grid values (default depends on suite)"),
    Opt("seeds", int, 3, "training seeds per grid cell"),
    Opt("out", str, None, "summary CSV path (required)"),
    Opt("runs_out", str, None, "per-run CSV path (default: <out>.runs.csv)"),
    Opt("bench_seed", int, 0, "seed of the synthetic benchmark when no data is given"),
] + data_opts(False) + model_opts(SWEEP_DEFAULTS) + train_opts(SWEEP_DEFAULTS)

COMMANDS = {
    "gen-synth": (GEN_OPTS, "write a synthetic graphmft-v1 dataset"),
    "graph-dump": (GRAPH_OPTS, "dump one pair graph as an edge list"),
    "gradcheck": (GRADCHECK_OPTS, "compare analytic and finite-difference gradients"),
    "train": (TRAIN_OPTS, "train a model and write checkpoint, history and metrics"),
    "eval": (EVAL_OPTS, "evaluate a checkpoint on a dataset"),
    "ablate": (ABLATE_OPTS, "run an ablation sweep and write a CSV table"),
}


def build_parser() -> ArgParser:
    parser = ArgParser(prog="graphmft", description="Graph-based multimodal fusion for emotion recognition in conversation.")
    parser.add_argument("--version", action="version", version=f"graphmft {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgParser)
    for name, (opts, text) in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", default=argparse.SUPPRESS, help="flat JSON file whose keys mirror the flags (default: none)")
        for o in opts:
            shown = ",".join(map(str, o.default)) if isinstance(o.default, tuple) else o.default
            text = f"{o.help} (default: {shown})"
            if o.type is _bool:
                p.add_argument(o.flag, dest=o.key, action=argparse.BooleanOptionalAction,
                               default=argparse.SUPPRESS, help=text)
            else:
                p.add_argument(o.flag, dest=o.key, type=o.type, default=argparse.SUPPRESS,
                               choices=o.choices, help=text, metavar=o.key.upper())
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    opts = COMMANDS[command][0]
    by_key = {o.key: o for o in opts}
    values = {o.key: o.default for o in opts}
    given = {k: v for k, v in vars(args).items() if k in by_key}
    from_file = {}
    if hasattr(args, "config"):
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a flat JSON object")
        for key, value in raw.items():
            if key not in by_key:
                raise UsageError(f"unknown config key {key!r} for {command}")
            o = by_key[key]
            try:
                value = o.type(value) if value is not None else None
            except (TypeError, ValueError) as e:
                raise UsageError(f"config key {key!r}: {e}") from None
            if o.choices and value not in o.choices:
                raise UsageError(f"config key {key!r} must be one of {list(o.choices)}")
            from_file[key] = value
    preset = given.get("preset", from_file.get("preset"))
    if preset:
        for key, value in PRESETS[preset].items():
            values[{"L": "layers"}.get(key, key)] = value
    values.update(from_file)
    if "seed" in by_key and os.environ.get("GRAPHMFT_SEED"):
        try:
            values["seed"] = int(os.environ["GRAPHMFT_SEED"])
        except ValueError:
            raise UsageError("GRAPHMFT_SEED must be an integer") from None
    values.update(given)
    return values


def _write_atomic(path: str, text: str) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _model_cfg(header, v: dict) -> ModelConfig:
    try:
        return ModelConfig.for_header(
            header, d=v["d"], K=v["heads"], L=v["layers"], h=v["rnn_hidden"], P=v["p"], F=v["f"],
            self_loops=v["self_loops"], dropout=v["dropout"], use_speaker=v["use_speaker"],
            modalities=v["modalities"], gat_variant=v["gat_variant"])
    except ValueError as e:
        raise UsageError(str(e)) from None


def _train_cfg(v: dict) -> TrainConfig:
    try:
        return TrainConfig(lr=v["lr"], batch_size=v["batch_size"], max_epochs=v["max_epochs"],
                           l2_lambda=v["l2_lambda"], dropout=v["dropout"], seed=v["seed"],
                           patience=v["patience"], grad_clip=v["grad_clip"])
    except ValueError as e:
        raise UsageError(str(e)) from None


def _require(v: dict, *keys) -> None:
    for k in keys:
        if v.get(k) in (None, ""):
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _splits(v: dict):
    if v["train"] or v["valid"]:
        if not (v["train"] and v["valid"]):
            raise UsageError("--train and --valid must be given together")
        train_set, valid_set = load_dataset(v["train"]), load_dataset(v["valid"])
        test_set = load_dataset(v["test"]) if v["test"] else None
        if valid_set.header != train_set.header or (test_set and test_set.header != train_set.header):
            raise DatasetFormatError("split files disagree on their headers")
        return train_set, valid_set, test_set
    if v["data"]:
        try:
            return split_dataset(load_dataset(v["data"]), v["split"], seed=v["split_seed"])
        except DatasetFormatError:
            raise
        except ValueError as e:
            raise UsageError(str(e)) from None
    return None


# -- commands ---------------------------------------------------------------

def cmd_gen_synth(v: dict) -> int:
    _require(v, "out")
    cfg = SynthConfig(n_conv=v["n_conv"], m_range=(v["m_min"], v["m_max"]), num_speakers=v["num_speakers"],
                      num_classes=v["num_classes"], dims=(v["v_dim"], v["a_dim"], v["t_dim"]),
                      noise_sigma=v["noise_sigma"], transition_stickiness=v["stickiness"],
                      modality_snr=tuple(v["snr"]), speaker_label_coupling=v["speaker_label_coupling"], seed=v["seed"])
    try:
        cfg.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    d = gen_synthetic(cfg)
    save_dataset(d, v["out"])
    h = d.header
    print(json.dumps({"out": v["out"], "conversations": len(d), "utterances": d.num_utterances,
                      "v_dim": h.v_dim, "a_dim": h.a_dim, "t_dim": h.t_dim,
                      "num_classes": h.num_classes, "num_speakers": h.num_speakers}))
    return 0


def cmd_graph_dump(v: dict) -> int:
    try:
        g = build_pair_graph(v["m"], v["pair"], v["p"], v["f"], v["self_loops"])
    except ValueError as e:
        raise UsageError(str(e)) from None
    if v["out"] == "-":
        sys.stdout.write(format_graph(g))
    else:
        dump_graph(g, v["out"])
    return 0


def cmd_gradcheck(v: dict) -> int:
    from .gradcheck import layers_gradcheck, model_gradcheck

    fn = model_gradcheck if v["scope"] == "model" else layers_gradcheck
    report = fn(seed=v["seed"], bits=v["bits"], tol=v["tol"], eps=v["eps"])
    for line in report.lines():
        print(line)
    return 0 if report.passed else 1


def _metrics_payload(metrics, **extra) -> dict:
    out = metrics.to_dict()
    out.update(extra)
    return out


def cmd_train(v: dict) -> int:
    _require(v, "out_dir")
    splits = _splits(v)
    if splits is None:
        raise UsageError("give --data or --train/--valid")
    train_set, valid_set, test_set = splits
    mcfg, tcfg = _model_cfg(train_set.header, v), _train_cfg(v)
    os.makedirs(v["out_dir"], exist_ok=True)
    out = lambda name: os.path.join(v["out_dir"], name)  # noqa: E731
    try:
        model, history = train(mcfg, tcfg, train_set, valid_set)
    except TrainingDiverged as e:
        if e.last_good is not None:
            from .model import GraphMFT

            salvage = GraphMFT(mcfg)
            salvage.load_state_dict(e.last_good)
            save_checkpoint(salvage, out("last_good.ckpt"))
        raise
    save_checkpoint(model, out("model.ckpt"))
    _write_atomic(out("history.csv"), history.to_csv())
    valid_m = evaluate(model, valid_set)
    payload = {"best_epoch": history.best_epoch, "valid": valid_m.to_dict(),
               "model_config": model.cfg.to_dict(), "train_config": tcfg.to_dict()}
    report_on, report_name = valid_m, "valid"
    if test_set is not None and test_set.conversations:
        test_m = evaluate(model, test_set)
        payload["test"] = test_m.to_dict()
        report_on, report_name = test_m, "test"
    _write_atomic(out("metrics.json"), json.dumps(payload, sort_keys=True, indent=2) + "\n")
    _write_atomic(out("confusion.csv"), report_on.confusion_csv())
    print(f"best epoch {history.best_epoch}; {report_name} split:")
    print(report_on.report())
    return 0


def cmd_eval(v: dict) -> int:
    _require(v, "checkpoint", "data")
    model = load_checkpoint(v["checkpoint"])
    data = load_dataset(v["data"])
    cfg, h = model.cfg, data.header
    want = (cfg.v_dim, cfg.a_dim, cfg.t_dim, cfg.num_classes, cfg.num_speakers)
    got = (h.v_dim, h.a_dim, h.t_dim, h.num_classes, h.num_speakers)
    if want != got:
        raise CheckpointError(f"checkpoint expects (v_dim, a_dim, t_dim, num_classes, num_speakers)={want}, dataset has {got}")
    metrics = evaluate(model, data)
    if v["out_dir"]:
        os.makedirs(v["out_dir"], exist_ok=True)
        _write_atomic(os.path.join(v["out_dir"], "metrics.json"), metrics.to_json(split=data.split))
        _write_atomic(os.path.join(v["out_dir"], "confusion.csv"), metrics.confusion_csv())
    print(metrics.report())
    return 0


def cmd_ablate(v: dict) -> int:
    _require(v, "suite", "out")
    try:
        suite = canonical_suite(v["suite"])
    except ValueError as e:
        raise UsageError(str(e)) from None
    splits = _splits(v)
    if splits is None:
        splits = benchmark_splits(SUITE_BENCHMARK[suite], v["bench_seed"])
    train_set, valid_set, _ = splits
    mcfg, tcfg = _model_cfg(train_set.header, v), _train_cfg(v)
    if v["seeds"] < 1:
        raise UsageError("--seeds must be >= 1")
    try:
        result = run_ablation(suite, mcfg, tcfg, train_set, valid_set, grid=v["grid"], seeds=v["seeds"])
    except ValueError as e:
        raise UsageError(str(e)) from None
    _write_atomic(v["out"], result.summary_csv())
    _write_atomic(v["runs_out"] or v["out"] + ".runs.csv", result.runs_csv())
    sys.stdout.write(result.summary_csv())
    return 0


HANDLERS = {
    "gen-synth": cmd_gen_synth,
    "graph-dump": cmd_graph_dump,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        values = resolve(args.command, args)
        return HANDLERS[args.command](values)
    except UsageError as e:
        print(f"graphmft: error: usage: {_one_line(e)}", file=sys.stderr)
        return 2
    except (DatasetFormatError, CheckpointError, TrainingDiverged, OSError, ValueError) as e:
        print(f"graphmft: error: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
