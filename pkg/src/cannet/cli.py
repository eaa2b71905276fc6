"""Command-line front end.

Every command resolves its settings from an optional JSON ``--config`` file
overridden by explicit flags, writes the resolved settings to
``<out>/config.json`` and can be rerun from that file alone.

Exit codes: 0 success, 2 bad input or configuration, 3 numerical failure,
4 sampling budget exhausted.
"""
from __future__ import annotations

import argparse
import dataclasses
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import Checkpoint
from .cign import CignConfig, CignModel, build_cign, cign_generate, save_pgm, save_png, train_cign
from .datasets import (CategoricalDataset, RendererParams, SyntheticScmSpec, VariableSchema, load_categorical_csv,
                       preset_spec, render_images, save_categorical_csv, synth_scm_dataset, train_test_split)
from .engine import make_generator
from .errors import (BudgetExhausted, ContractViolation, CyclicAfterThreshold, NonFiniteGradient, NonFiniteLoss,
                     ParseError, SchemaMismatch, SingularSystem)
from .evaluation import (ClassifierConfig, gan_train_test, graph_metrics, label_quality, split_half_floor)
from .lgn import LgnModel, TrainConfig, sample_conditional, sample_interventional, sample_observational, train_lgn
from .scm import adjacency_to_csv, extract_graph, graph_from_edges, graph_to_dot, graph_to_edges

log = logging.getLogger("cannet")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_BUDGET = 0, 2, 3, 4

# settings every command understands; the rest are command specific
COMMON = ("seed", "out", "data", "checkpoint")

DEFAULTS = {
    "train-lgn": {"data": None, "one_based": False, "tau": 0.3, "train": {}},
    "train-cign": {"data": None, "noise_width": 8, "train": {}},
    "sample": {"checkpoint": None, "mode": "observe", "set": [], "m": 1000, "budget": None},
    "gen-images": {"checkpoint": None, "labels": None, "set": [], "m": 16, "format": "png"},
    "extract-graph": {"checkpoint": None, "tau": 0.3},
    "eval-graph": {"graph": None, "truth": None},
    "eval-labels": {"checkpoint": None, "data": None, "test": None, "one_based": False, "repeats": 5,
                    "fraction": 0.9, "m": None},
    "eval-gan": {"checkpoint": None, "data": None, "fraction": 0.9, "classifier": {}},
    "synth-data": {"preset": "chain", "spec": None, "m": 5000, "images": False,
                   "image_shape": [16, 16, 1]},
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- configuration -----------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cannet", description="Causal adversarial network tools.")
    p.add_argument("--version", action="version", version=f"cannet {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def command(name: str, help_: str) -> argparse.ArgumentParser:
        c = sub.add_parser(name, help=help_)
        c.add_argument("--config", help="JSON file with settings; flags override it")
        c.add_argument("--seed", type=int)
        c.add_argument("--out", help="output directory (default run/<timestamp>-<seed>)")
        c.add_argument("--data")
        c.add_argument("--checkpoint")
        return c

    c = command("train-lgn", "train a label generation network on a categorical CSV")
    c.add_argument("--epochs", type=int)
    c.add_argument("--tau", type=float)
    c.add_argument("--one-based", dest="one_based", action="store_true", default=None)
    c = command("train-cign", "train a conditional image generator on an .npz image set")
    c.add_argument("--epochs", type=int)
    c.add_argument("--noise-width", dest="noise_width", type=int)
    c = command("sample", "draw labels from a trained label generator")
    c.add_argument("--mode", choices=("observe", "intervene", "condition"))
    c.add_argument("--set", action="append", metavar="NAME=VALUE")
    c.add_argument("-m", type=int)
    c.add_argument("--budget", type=int)
    c = command("gen-images", "render images from a trained conditional generator")
    c.add_argument("--labels", help="CSV of 0/1 label rows with a header")
    c.add_argument("--set", action="append", metavar="NAME=VALUE")
    c.add_argument("-m", type=int)
    c.add_argument("--format", choices=("png", "pgm"))
    c = command("extract-graph", "threshold a checkpoint's adjacency into a DAG")
    c.add_argument("--tau", type=float)
    c = command("eval-graph", "SHD and TPR of an edge list against a reference")
    c.add_argument("--graph")
    c.add_argument("--truth")
    c = command("eval-labels", "MSE_p / MSE_f / MSE_a of a label generator")
    c.add_argument("--test")
    c.add_argument("--repeats", type=int)
    c.add_argument("-m", type=int)
    c.add_argument("--one-based", dest="one_based", action="store_true", default=None)
    command("eval-gan", "GAN-train / GAN-test scores of a conditional generator")
    c = command("synth-data", "write a synthetic categorical (and optionally image) dataset")
    c.add_argument("--preset", choices=("chain", "collider", "bipartite", "shapes"))
    c.add_argument("--spec", help="JSON SCM spec (overrides --preset)")
    c.add_argument("-m", type=int)
    c.add_argument("--images", action="store_true", default=None)
    return p


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS[args.command]))
    cfg["seed"] = 0
    cfg.setdefault("out", None)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}", EXIT_INPUT) from None
        if loaded.get("command", args.command) != args.command:
            raise CliError(f"config is for {loaded['command']!r}, not {args.command!r}", EXIT_INPUT)
        loaded.pop("command", None)
        unknown = set(loaded) - set(cfg) - set(COMMON)
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}", EXIT_INPUT)
        for k, v in loaded.items():
            if isinstance(v, dict) and isinstance(cfg.get(k), dict):
                cfg[k].update(v)
            else:
                cfg[k] = v
    for key, value in vars(args).items():
        if key in ("command", "config", "verbose") or value is None:
            continue
        if key == "epochs":
            cfg["train"]["epochs"] = value
        else:
            cfg[key] = value
    if args.command == "train-lgn":
        cfg["train"] = TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"]}).to_dict()
    elif args.command == "train-cign":
        cfg["train"] = CignConfig.from_dict({**cfg["train"], "seed": cfg["seed"]}).to_dict()
    elif args.command == "eval-gan":
        clf = ClassifierConfig(**{**cfg["classifier"], "seed": cfg["seed"]})
        cfg["classifier"] = dataclasses.asdict(clf)
    return cfg


def _out_dir(cfg: dict) -> Path:
    out = cfg.get("out")
    if out is None:
        stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
        out = str(Path("run") / f"{stamp}-{cfg['seed']}")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_config(out: Path, command: str, cfg: dict) -> None:
    echo = {"command": command, **{k: v for k, v in cfg.items() if k != "out"}}
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require(cfg: dict, key: str) -> str:
    if not cfg.get(key):
        raise CliError(f"--{key} is required", EXIT_INPUT)
    return cfg[key]


def _parse_sets(pairs) -> dict[str, int]:
    out = {}
    for item in pairs or []:
        name, sep, value = str(item).partition("=")
        if not sep or not name.strip():
            raise CliError(f"--set expects NAME=VALUE, got {item!r}", EXIT_INPUT)
        try:
            out[name.strip()] = int(value)
        except ValueError:
            raise CliError(f"--set value must be an integer category, got {value!r}", EXIT_INPUT) from None
    return out


def _load_model(path: str, kind: str):
    ckpt = Checkpoint.load(path)
    if ckpt.kind != kind:
        raise SchemaMismatch(f"{path} holds a {ckpt.kind!r} model, expected {kind!r}")
    return LgnModel.from_checkpoint(ckpt) if kind == "lgn" else CignModel.from_checkpoint(ckpt)


def _write_history(path: Path, history) -> None:
    fields = ["epoch", "d_loss", "g_loss", "h", "lambda_bar", "rho"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in history:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in fields})


def _write_graph_files(out: Path, A: np.ndarray, names, tau: float) -> None:
    (out / "A.csv").write_text(adjacency_to_csv(A, names), encoding="utf-8")
    graph = extract_graph(A, tau, names)
    (out / "graph.edges").write_text(graph_to_edges(graph), encoding="utf-8")
    (out / "graph.dot").write_text(graph_to_dot(graph), encoding="utf-8")


def _load_npz(path: str):
    p = Path(path)
    if not p.exists():
        raise ParseError(f"no such file: {p}")
    try:
        with np.load(p, allow_pickle=False) as z:
            images = np.asarray(z["images"], dtype=np.float64)
            labels = np.asarray(z["labels"], dtype=np.int64)
            names = [str(s) for s in z["label_names"]] if "label_names" in z else None
    except (KeyError, ValueError, OSError) as exc:
        raise ParseError(f"{p}: expected an .npz with 'images' and 'labels' ({exc})") from None
    return images, labels, names


# -- commands ----------------------------------------------------------------

def cmd_train_lgn(cfg: dict, out: Path) -> int:
    ds = load_categorical_csv(_require(cfg, "data"), one_based=cfg["one_based"])
    train_cfg = TrainConfig.from_dict(cfg["train"])
    ckpt, history = train_lgn(ds, train_cfg)
    ckpt.save(out / "model.ckpt")
    _write_history(out / "history.csv", history)
    _write_graph_files(out, LgnModel.from_checkpoint(ckpt).adjacency(), ds.schema.names, cfg["tau"])
    print(f"trained {len(history)} epochs; final h = {history[-1]['h']:.3g}; outputs in {out}")
    return EXIT_OK


def cmd_train_cign(cfg: dict, out: Path) -> int:
    images, labels, names = _load_npz(_require(cfg, "data"))
    train_cfg = CignConfig.from_dict(cfg["train"])
    schema = VariableSchema.binary(names or [f"label{i}" for i in range(labels.shape[1])])
    model = build_cign(schema, cfg["noise_width"], images.shape[1:], train_cfg)
    ckpt, history = train_cign(images, labels, train_cfg, model=model)
    ckpt.save(out / "model.ckpt")
    _write_history(out / "history.csv", history)
    A = CignModel.from_checkpoint(ckpt).adjacency()
    node_names = list(schema.names) + [f"z{i}" for i in range(cfg["noise_width"])]
    (out / "A.csv").write_text(adjacency_to_csv(A, node_names), encoding="utf-8")
    print(f"trained {len(history)} epochs; final h = {history[-1]['h']:.3g}; outputs in {out}")
    return EXIT_OK


def _write_rows(path: Path, names, rows: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        w.writerows(np.asarray(rows, dtype=np.int64).tolist())


def cmd_sample(cfg: dict, out: Path) -> int:
    model = _load_model(_require(cfg, "checkpoint"), "lgn")
    spec = _parse_sets(cfg["set"])
    m, mode = int(cfg["m"]), cfg["mode"]
    gen = make_generator(cfg["seed"])
    names = list(model.schema.names)
    summary = {"mode": mode, "m": m, "set": spec}
    if mode == "observe":
        if spec:
            raise CliError("--set is not used with --mode observe", EXIT_INPUT)
        rows = sample_observational(model, m, gen)
    elif mode == "intervene":
        rows = sample_interventional(model, spec, m, gen)
    else:
        try:
            rows, rate = sample_conditional(model, spec, m, cfg["budget"], gen, return_rate=True)
        except BudgetExhausted as exc:
            _write_rows(out / "samples.csv", names, exc.partial)
            summary.update(accepted=len(exc.partial), acceptance_rate=exc.acceptance_rate)
            (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
            raise CliError(str(exc), EXIT_BUDGET) from None
        summary["acceptance_rate"] = rate
    _write_rows(out / "samples.csv", names, rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    if "acceptance_rate" in summary:
        print(f"acceptance rate {summary['acceptance_rate']:.4g}")
    print(f"wrote {len(rows)} rows to {out / 'samples.csv'}")
    return EXIT_OK


def cmd_gen_images(cfg: dict, out: Path) -> int:
    model = _load_model(_require(cfg, "checkpoint"), "cign")
    names = list(model.label_schema.names)
    if cfg["labels"]:
        ds = load_categorical_csv(cfg["labels"])
        if list(ds.schema.names) != names:
            raise SchemaMismatch(f"label columns {list(ds.schema.names)} do not match {names}")
        labels = ds.values
    else:
        fixed = _parse_sets(cfg["set"])
        unknown = set(fixed) - set(names)
        if unknown:
            raise CliError(f"unknown labels {sorted(unknown)}", EXIT_INPUT)
        labels = np.zeros((int(cfg["m"]), len(names)), dtype=np.int64)
        for k, v in fixed.items():
            labels[:, names.index(k)] = v
    gen = make_generator(cfg["seed"])
    Z = torch.randn(len(labels), model.noise_width, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        images = cign_generate(model, labels, Z, "eval").numpy()
    img_dir = out / "images"
    img_dir.mkdir(exist_ok=True)
    writer, ext = (save_png, "png") if cfg["format"] == "png" else (save_pgm, "pgm")
    for i, img in enumerate(images):
        writer(img_dir / f"{i:05d}.{ext}", img)
    _write_rows(out / "labels.csv", names, labels)
    print(f"wrote {len(images)} images to {img_dir}")
    return EXIT_OK


def cmd_extract_graph(cfg: dict, out: Path) -> int:
    model = _load_model(_require(cfg, "checkpoint"), "lgn")
    _write_graph_files(out, model.adjacency(), model.schema.names, cfg["tau"])
    print((out / "graph.edges").read_text(encoding="utf-8"), end="")
    return EXIT_OK


def _read_graph(path: str):
    p = Path(path)
    if not p.exists():
        raise ParseError(f"no such graph file: {p}")
    return graph_from_edges(p.read_text(encoding="utf-8"))


def cmd_eval_graph(cfg: dict, out: Path) -> int:
    est, truth = _read_graph(_require(cfg, "graph")), _read_graph(_require(cfg, "truth"))
    if sorted(est.node_names()) != sorted(truth.node_names()):
        raise SchemaMismatch("graph files name different node sets")
    est = graph_from_edges(Path(cfg["graph"]).read_text(encoding="utf-8"), truth.node_names())
    metrics = graph_metrics(est, truth).to_dict()
    text = json.dumps(metrics)
    (out / "metrics.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_eval_labels(cfg: dict, out: Path) -> int:
    model = _load_model(_require(cfg, "checkpoint"), "lgn")
    data = load_categorical_csv(_require(cfg, "data"), model.schema, one_based=cfg["one_based"])
    if cfg["test"]:
        train, test = data, load_categorical_csv(cfg["test"], model.schema, one_based=cfg["one_based"])
    else:
        train, test = train_test_split(data, cfg["fraction"], cfg["seed"])
    seed = cfg["seed"]

    def sampler(m, r):
        rows = sample_observational(model, m, make_generator(seed * 1000 + r))
        return CategoricalDataset(model.schema, rows)

    report = label_quality(train, test, sampler, cfg["repeats"], cfg["m"])
    result = report.to_dict()
    result["split_half_floor"] = split_half_floor(test, seed)
    (out / "report.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    text = report.to_text() + f"\nsplit-half floor (mse_p): {result['split_half_floor']:.3e}"
    (out / "report.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_eval_gan(cfg: dict, out: Path) -> int:
    model = _load_model(_require(cfg, "checkpoint"), "cign")
    images, labels, _ = _load_npz(_require(cfg, "data"))
    rng = np.random.default_rng(cfg["seed"])
    idx = rng.permutation(len(images))
    cut = int(round(len(images) * cfg["fraction"]))
    tr, te = np.sort(idx[:cut]), np.sort(idx[cut:])
    gen = make_generator(cfg["seed"])
    Z = torch.randn(len(tr), model.noise_width, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        fake = cign_generate(model, labels[tr], Z, "eval").numpy()
    clf = ClassifierConfig(**cfg["classifier"])
    scores = gan_train_test((images[tr], labels[tr]), (images[te], labels[te]), (fake, labels[tr]), clf)
    (out / "gan.json").write_text(json.dumps(scores.to_dict(), indent=2) + "\n", encoding="utf-8")
    text = scores.to_text()
    (out / "gan.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_synth_data(cfg: dict, out: Path) -> int:
    if cfg["spec"]:
        p = Path(cfg["spec"])
        if not p.exists():
            raise ParseError(f"no such spec file: {p}")
        try:
            spec = SyntheticScmSpec.from_json(p)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"{p}: bad SCM spec ({exc})") from None
    else:
        spec = preset_spec(cfg["preset"])
    ds = synth_scm_dataset(spec, int(cfg["m"]), cfg["seed"])
    save_categorical_csv(out / "data.csv", ds.schema, ds.values)
    (out / "truth.edges").write_text(graph_to_edges(spec.graph), encoding="utf-8")
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n", encoding="utf-8")
    if cfg["images"]:
        shape = tuple(int(s) for s in cfg["image_shape"])
        if any(c != 2 for c in ds.schema.cardinalities):
            raise ContractViolation("image labels must be binary")
        images = render_images(ds.values, shape, RendererParams(), seed=cfg["seed"] + 1)
        np.savez(out / "images.npz", images=images, labels=ds.values,
                 label_names=np.array(ds.schema.names))
    print(f"wrote {len(ds)} rows to {out / 'data.csv'}")
    return EXIT_OK


COMMANDS = {
    "train-lgn": cmd_train_lgn, "train-cign": cmd_train_cign, "sample": cmd_sample,
    "gen-images": cmd_gen_images, "extract-graph": cmd_extract_graph, "eval-graph": cmd_eval_graph,
    "eval-labels": cmd_eval_labels, "eval-gan": cmd_eval_gan, "synth-data": cmd_synth_data,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = _out_dir(cfg)
        _write_config(out, args.command, cfg)
        return COMMANDS[args.command](cfg, out)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (TypeError, OSError) as exc:
        # bad value types from a config file, unreadable paths
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ParseError, SchemaMismatch, ContractViolation, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NonFiniteLoss, NonFiniteGradient, SingularSystem, CyclicAfterThreshold) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
