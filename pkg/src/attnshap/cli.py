"""Command-line entry point: ``attnshap <subcommand> [options]``.

Settings are merged from built-in defaults, then ``--config`` (a JSON
object), then explicit flags. The merged settings, minus the output
directory, are hashed and the hash is written into every artifact.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from .attribution import METHODS, attribute
from .cav import (
    DEFAULT_CONCEPT_SIZE,
    DEFAULT_EVAL_SIZE,
    DEFAULT_N_CAVS,
    VARIANTS,
    relative_cav,
    tcav_scores,
    token_directional_derivatives,
)
from .exceptions import AttnShapError, ConfigError, DataError, NumericError
from .metrics import DEFAULT_B, DEFAULT_BINS, MetricConfig, evaluate_suite
from .parallel import n_workers
from .shapley import SamplingScheme
from .synthetic import concept_examples, concept_task, planted_token_task
from .transformer import ToyTransformer, patchify

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DEFAULTS = {
    "synth": {"task": "planted", "n": 400, "n_test": 200, "length": 10, "vocab_size": 16,
              "n_concept": 400},
    "train": {"data": None, "model": {}, "epochs": 30, "lr": 0.01, "batch_size": 32,
              "patch_size": None},
    "attribute": {"model": None, "data": None, "methods": ["Shapley-Grad-Att-CLS"],
                  "samples": 100, "class": None, "limit": None, "patch_size": None},
    "evaluate": {"model": None, "data": None, "methods": list(METHODS), "samples": 100,
                 "b": DEFAULT_B, "B": list(DEFAULT_BINS), "reference": "prediction",
                 "limit": None, "patch_size": None},
    "cav": {"model": None, "concepts": None, "concept": None, "layer": None,
            "n_cavs": DEFAULT_N_CAVS, "n_pos": DEFAULT_CONCEPT_SIZE,
            "n_neg": DEFAULT_CONCEPT_SIZE, "random_concept": "random",
            "epochs": 300, "lr": 0.5, "l2": 0.0},
    "tcav": {"model": None, "data": None, "cavs": None, "class": 1, "layer": None,
             "n_eval": DEFAULT_EVAL_SIZE, "variant": "T-TCAV", "filter_correct": False},
    "heatmap": {"model": None, "data": None, "cavs": None, "methods": ["Shapley-Grad-Att-CLS"],
                "class": None, "layer": None, "limit": 8, "cell": 8, "patch_size": None},
}
REQUIRED = {
    "train": ("data",),
    "attribute": ("model", "data"),
    "evaluate": ("model", "data"),
    "cav": ("model", "concepts"),
    "tcav": ("model", "data", "cavs"),
    "heatmap": ("model", "data"),
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="attnshap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with settings")
        p.add_argument("--seed", type=int, help="seed of every random stream")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    common(p)
    p.add_argument("--task", choices=("planted", "concept"))
    p.add_argument("--n", type=int, help="training examples")

    p = sub.add_parser("train", help="train the toy transformer")
    common(p)
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)

    helps = {
        "attribute": "write per-token attributions",
        "evaluate": "score methods with the faithfulness metrics",
        "heatmap": "render attributions or T-TCAV sensitivities as PPM images",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--model", help="model.bin checkpoint")
        p.add_argument("--data", help="JSONL dataset")
        p.add_argument("--methods", help="comma-separated method names")
        p.add_argument("--limit", type=int, help="use the first LIMIT records only")
        if name != "heatmap":
            p.add_argument("--samples", type=int, help="coalitions for sampled methods")
        if name != "evaluate":
            p.add_argument("--class", dest="class_", type=int, help="explained class")
        if name == "heatmap":
            p.add_argument("--cavs", help="CAV file; draws T-TCAV sensitivities")
            p.add_argument("--layer", type=int)

    p = sub.add_parser("cav", help="train relative CAVs")
    common(p)
    p.add_argument("--model")
    p.add_argument("--concepts", help="JSONL with a concept field per record")
    p.add_argument("--concept", help="concept to train (default: every concept)")
    p.add_argument("--layer", type=int, help="layer (default: every layer)")
    p.add_argument("--n-cavs", dest="n_cavs", type=int)

    p = sub.add_parser("tcav", help="score CAVs with TCAV / T-TCAV")
    common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--cavs")
    p.add_argument("--class", dest="class_", type=int)
    p.add_argument("--layer", type=int)
    p.add_argument("--variant", choices=VARIANTS)
    return parser


def resolve_config(args):
    """Merge defaults, the ``--config`` file and flags into one dict."""
    cmd = args.command
    cfg = dict(DEFAULTS[cmd])
    cfg["seed"] = 0
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(loaded) - set(cfg) - {"command"}
        if unknown:
            raise ConfigError(f"unknown config keys for {cmd}: {sorted(unknown)}")
        loaded.pop("command", None)
        cfg.update(loaded)
    for key, val in vars(args).items():
        key = "class" if key == "class_" else key
        if key in ("command", "config", "out") or val is None:
            continue
        if key == "methods":
            val = [m.strip() for m in val.split(",") if m.strip()]
        cfg[key] = val
    for key in REQUIRED.get(cmd, ()):
        if cfg.get(key) is None:
            raise ConfigError(f"{cmd} needs --{key}")
        if not Path(cfg[key]).exists():
            raise ConfigError(f"{key} path {cfg[key]} does not exist")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    for m in cfg.get("methods") or []:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}")
    cfg["command"] = cmd
    return cfg


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _inputs(records, patch_size):
    if records and records[0].token_ids is None:
        if not patch_size:
            raise ConfigError("image datasets need patch_size")
        return [patchify(r.pixels, patch_size) for r in records]
    return [r.token_ids for r in records]


def _labels(records):
    if any(r.label is None for r in records):
        raise DataError("every record needs a label")
    return np.array([r.label for r in records], dtype=np.int64)


def _load_data(cfg, model=None):
    vocab = None if model is None or model.patch_dim is not None else model.vocab_size
    records = io.load_dataset(cfg["data"], vocab_size=vocab)
    if cfg.get("limit") is not None:
        records = records[: int(cfg["limit"])]
    return records


def _layers(cfg, model):
    return [int(cfg["layer"])] if cfg.get("layer") is not None else list(
        range(1, model.n_layers + 1))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(cfg, out, chash):
    seed, n, length, vocab = cfg["seed"], int(cfg["n"]), int(cfg["length"]), int(cfg["vocab_size"])
    if cfg["task"] == "planted":
        X, y, _ = planted_token_task(n, length, vocab, seed=seed)
        Xt, yt, _ = planted_token_task(int(cfg["n_test"]), length, vocab, seed=seed + 1)
    elif cfg["task"] == "concept":
        X, y = concept_task(n, length, vocab, seed=seed)
        Xt, yt = concept_task(int(cfg["n_test"]), length, vocab, seed=seed + 1)
        concepts = []
        for j, c in enumerate(("C", "D", "E")):
            ex = concept_examples(c, int(cfg["n_concept"]), length, vocab, seed=seed + 10 + j)
            concepts += io.token_records(ex, concept=c, prefix=f"{c}-")
        pool = concept_examples(None, int(cfg["n_concept"]), length, vocab, seed=seed + 20)
        concepts += io.token_records(pool, concept="random", prefix="random-")
        io.save_dataset(out / "concepts.jsonl", concepts)
    else:
        raise ConfigError(f"unknown task {cfg['task']!r}")
    io.save_dataset(out / "train.jsonl", io.token_records(X, y))
    io.save_dataset(out / "test.jsonl", io.token_records(Xt, yt))
    return {"n_train": len(X), "n_test": len(Xt)}


def cmd_train(cfg, out, chash):
    records = io.load_dataset(cfg["data"])
    if not records:
        raise DataError("cannot train on an empty dataset")
    X = _inputs(records, cfg["patch_size"])
    y = _labels(records)
    hyper = dict(cfg["model"])
    if X and np.ndim(X[0]) == 2:
        hyper.setdefault("patch_dim", int(np.shape(X[0])[1]))
    try:
        model = ToyTransformer(epochs=int(cfg["epochs"]), lr=float(cfg["lr"]),
                               batch_size=int(cfg["batch_size"]), seed=cfg["seed"], **hyper)
    except TypeError as exc:
        raise ConfigError(f"bad model settings: {exc}") from None
    model.fit(X, y)
    io.save_model(out / "model.bin", model, config_hash=chash)
    acc = float(np.mean(model.predict(X) == y))
    return {"train_accuracy": acc, "loss_history": model.loss_history_}


def cmd_attribute(cfg, out, chash):
    model = io.load_model(cfg["model"])
    records = _load_data(cfg, model)
    X = _inputs(records, cfg["patch_size"])
    scheme = SamplingScheme(n_samples=int(cfg["samples"]), seed=cfg["seed"])
    lines = []
    for method in cfg["methods"]:
        for rec, x in zip(records, X):
            r = attribute(method, model, x, k=cfg["class"], scheme=scheme)
            lines.append(dict(r.to_record(), id=rec.id, config_hash=chash))
    with open(out / "attributions.jsonl", "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(io.canonical_json(line) + "\n")
    return {"n_records": len(records), "methods": cfg["methods"]}


REPORT_COLUMNS = ("method", "f1", "comp", "comp_ci", "suff", "suff_ci", "n")


def cmd_evaluate(cfg, out, chash):
    model = io.load_model(cfg["model"])
    records = _load_data(cfg, model)
    if not records:
        raise DataError("cannot evaluate on an empty dataset")
    X = _inputs(records, cfg["patch_size"])
    mcfg = MetricConfig(b=cfg["b"], B=tuple(cfg["B"]), reference=cfg["reference"])
    labels = _labels(records) if cfg["reference"] == "label" else None
    reports = evaluate_suite(model, X, cfg["methods"], mcfg, seed=cfg["seed"],
                             n_samples=int(cfg["samples"]), labels=labels,
                             dataset_id=str(cfg["data"]))
    rows = [r.to_record() for r in reports]
    io.write_csv(out / "report.csv", rows, REPORT_COLUMNS)
    io.write_json(out / "report.json", {"config_hash": chash, "rows": rows})
    failed = [r.method for r in reports if r.error]
    return {"failed_methods": failed}


def _concept_sets(path):
    records = io.load_dataset(path)
    sets = {}
    for r in records:
        if r.concept is None:
            raise DataError(f"concept record {r.id} has no concept field")
        sets.setdefault(r.concept, []).append(r.token_ids)
    return sets


def cmd_cav(cfg, out, chash):
    model = io.load_model(cfg["model"])
    sets = _concept_sets(cfg["concepts"])
    rand = cfg["random_concept"]
    real = {c: xs for c, xs in sets.items() if c != rand}
    names = [cfg["concept"]] if cfg["concept"] else sorted(real)
    if rand in sets and not cfg["concept"]:
        names.append(rand)
    cavs = []
    for layer in _layers(cfg, model):
        for ci, name in enumerate(names):
            for s in range(int(cfg["n_cavs"])):
                seed = [cfg["seed"], layer, ci, s]
                seed = int(np.random.SeedSequence(seed).generate_state(1)[0])
                if name == rand:
                    cav = relative_cav(model, name, {name: sets[rand]}, layer,
                                       cfg["n_pos"], cfg["n_neg"], seed,
                                       negative_pool=sets[rand], epochs=cfg["epochs"],
                                       lr=cfg["lr"], l2=cfg["l2"])
                else:
                    cav = relative_cav(model, name, real, layer, cfg["n_pos"], cfg["n_neg"],
                                       seed, epochs=cfg["epochs"], lr=cfg["lr"], l2=cfg["l2"])
                cavs.append(cav)
    io.save_cavs(out / "cavs.bin", cavs, config_hash=chash)
    rows = [{"concept": c.concept, "layer": c.layer, "accuracy": c.accuracy} for c in cavs]
    io.write_json(out / "cavs.json", {"config_hash": chash, "cavs": rows})
    return {"n_cavs": len(cavs)}


def cmd_tcav(cfg, out, chash):
    model = io.load_model(cfg["model"])
    records = _load_data(cfg, model)
    k = int(cfg["class"])
    X = [r.token_ids for r in records if r.label is None or r.label == k]
    X = X[: int(cfg["n_eval"])]
    cavs = io.load_cavs(cfg["cavs"])
    groups = {}
    for c in cavs:
        if cfg["layer"] is None or c.layer == int(cfg["layer"]):
            groups.setdefault((c.concept, c.layer), []).append(c)
    if not groups:
        raise DataError("no CAVs match the requested layer")
    rows = []
    for (concept, layer), group in sorted(groups.items()):
        rep = tcav_scores(model, X, layer, k, group, variant=cfg["variant"],
                          filter_correct=bool(cfg["filter_correct"]))
        rows.append(rep.to_record())
    io.write_json(out / "tcav.json", {"config_hash": chash, "rows": rows})
    io.write_csv(out / "tcav.csv", rows,
                 ("concept", "layer", "class", "variant", "score", "n_inputs", "p_value",
                  "reject"))
    return {"n_reports": len(rows)}


def cmd_heatmap(cfg, out, chash):
    model = io.load_model(cfg["model"])
    records = _load_data(cfg, model)
    X = _inputs(records, cfg["patch_size"])
    layout = None
    if records and records[0].pixels is not None:
        h, w = records[0].pixels.shape[:2]
        layout = (h // cfg["patch_size"], w // cfg["patch_size"])
    written = []
    if cfg["cavs"]:
        cavs = io.load_cavs(cfg["cavs"])
        layer = int(cfg["layer"]) if cfg["layer"] is not None else model.n_layers
        cands = [c for c in cavs if c.layer == layer]
        if not cands:
            raise DataError(f"no CAV for layer {layer}")
        cav = cands[0]
        k = 1 if cfg["class"] is None else int(cfg["class"])
        for rec, x in zip(records, X):
            sr = token_directional_derivatives(model, x, layer, k, cav, input_id=rec.id)
            name = f"ttcav_{cav.concept}_l{layer}_{rec.id}.ppm"
            io.emit_heatmap(sr, out / name, layout, int(cfg["cell"]), config_hash=chash)
            written.append(name)
    else:
        for method in cfg["methods"]:
            scheme = SamplingScheme(n_samples=100, seed=cfg["seed"])
            for rec, x in zip(records, X):
                r = attribute(method, model, x, k=cfg["class"], scheme=scheme)
                name = f"{method.replace(' ', '_').replace('.', '')}_{rec.id}.ppm"
                io.emit_heatmap(r, out / name, layout, int(cfg["cell"]), config_hash=chash)
                written.append(name)
    return {"images": written}


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "attribute": cmd_attribute,
    "evaluate": cmd_evaluate, "cav": cmd_cav, "tcav": cmd_tcav, "heatmap": cmd_heatmap,
}


def run(argv=None):
    """Parse ``argv``, execute the subcommand and return an exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        n_workers()
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        chash = io.config_hash(cfg)
        summary = COMMANDS[args.command](cfg, out, chash)
        io.write_json(out / f"{args.command}.run.json",
                      {"config": cfg, "config_hash": chash, "summary": summary})
    except ConfigError as exc:
        print(f"attnshap: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, ArithmeticError) as exc:
        print(f"attnshap: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, AttnShapError, ValueError, OSError) as exc:
        print(f"attnshap: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
