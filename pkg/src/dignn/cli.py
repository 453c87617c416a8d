"""Command-line entry point.

Subcommands: train, eval, synth, gradcheck, export-embeddings.

Exit codes: 0 success, 1 gradient-check failure, 2 usage/config error,
3 load error (graph or model), 4 training divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict

from .errors import DignnError, DivergenceError, GraphLoadError
from .graphdata import (
    SynthConfig, load_graph, neighbor_label_distribution, normalize_features,
    save_graph, stratified_split, synth_generate,
)
from .model import DignnConfig, DignnParams
from .rng import seed_streams
from .trainer import ABLATIONS, MODES, TrainConfig, evaluate, gradcheck, train
from . import model as M
from .graphdata import gather_batch

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_USAGE = 2
EXIT_LOAD = 3
EXIT_DIVERGENCE = 4

CONFIG_KEYS = {
    "epochs": int, "batch_size": int, "lr": float, "weight_decay": float,
    "seed": int, "mode": str, "ablation": str,
    "embed_dim": int, "hidden_dim": int, "alpha": float, "beta": float,
    "sigma_enc": float, "prior_mean": float, "prior_std": float,
    "shared_attention": bool, "drop_conditional_terms": bool,
    "train_ratio": float, "val_ratio": float, "test_ratio": float,
}

DEFAULT_RATIOS = {"train_ratio": 0.4, "val_ratio": 0.2, "test_ratio": 0.4}


class UsageError(DignnError):
    pass


def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise UsageError(f"not a boolean: {s!r}")


def read_config_file(path: str) -> dict:
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (p.strip() for p in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            typ = CONFIG_KEYS[key]
            out[key] = _parse_bool(value) if typ is bool else typ(value)
    return out


def resolve_config(file_cfg: dict, cli_overrides: dict) -> dict:
    cfg = {"epochs": 50, "batch_size": 1024, "lr": 0.001, "weight_decay": 0.0005,
           "seed": 0, "mode": "minibatch", "ablation": "full",
           **{k: v for k, v in asdict(DignnConfig()).items()
              if k not in ("mc_samples",)},
           **DEFAULT_RATIOS}
    cfg.update(file_cfg)
    cfg.update({k: v for k, v in cli_overrides.items() if v is not None})
    return cfg


def build_train_config(cfg: dict) -> TrainConfig:
    model = DignnConfig(
        embed_dim=cfg["embed_dim"], hidden_dim=cfg["hidden_dim"],
        alpha=cfg["alpha"], beta=cfg["beta"], sigma_enc=cfg["sigma_enc"],
        prior_mean=cfg["prior_mean"], prior_std=cfg["prior_std"],
        shared_attention=cfg["shared_attention"],
        drop_conditional_terms=cfg["drop_conditional_terms"],
    )
    return TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
        weight_decay=cfg["weight_decay"], seed=cfg["seed"], model=model,
        mode=cfg["mode"], ablation=cfg["ablation"],
    )


def variant_tag(cfg: dict) -> str:
    tag = "DIGNN"
    if cfg["mode"] == "fullbatch":
        tag += "\\S"
    if cfg["ablation"] == "no_mi":
        tag += "\\M"
    return tag


def _hash_dir(path: str) -> dict[str, str]:
    if not os.path.isdir(path):
        raise GraphLoadError(f"not a directory: {path}")
    hashes = {}
    for name in sorted(os.listdir(path)):
        fp = os.path.join(path, name)
        if os.path.isfile(fp):
            with open(fp, "rb") as fh:
                hashes[name] = hashlib.sha256(fh.read()).hexdigest()
    return hashes


def _write_json(obj, path: str):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _prepare_data(data_dir: str, cfg: dict):
    graph = load_graph(data_dir)
    ratios = (cfg["train_ratio"], cfg["val_ratio"], cfg["test_ratio"])
    streams = seed_streams(cfg["seed"])
    split = stratified_split(graph, ratios, streams["split"])
    graph = normalize_features(graph, split)
    return graph, split


def cmd_train(args) -> int:
    if args.manifest:
        with open(args.manifest) as fh:
            manifest = json.load(fh)
        cfg = manifest["config"]
        data_dir = manifest["data"]
    else:
        if not args.data:
            raise UsageError("train requires --data (or --manifest)")
        file_cfg = read_config_file(args.config) if args.config else {}
        overrides = {"seed": args.seed, "epochs": args.epochs,
                     "batch_size": args.batch_size, "alpha": args.alpha,
                     "beta": args.beta, "ablation": args.ablation,
                     "mode": args.mode}
        cfg = resolve_config(file_cfg, overrides)
        data_dir = args.data

    os.makedirs(args.out, exist_ok=True)
    paths = {name: os.path.join(args.out, fn) for name, fn in (
        ("manifest", "manifest.json"), ("model", "model.bin"),
        ("history", "history.csv"), ("metrics", "metrics.json"))}
    manifest = {
        "config": cfg,
        "seed": cfg["seed"],
        "data": data_dir,
        "outputs": {k: os.path.basename(v) for k, v in paths.items()},
        "input_hashes": _hash_dir(data_dir),
        "variant": variant_tag(cfg),
    }
    _write_json(manifest, paths["manifest"])

    graph, split = _prepare_data(data_dir, cfg)
    tcfg = build_train_config(cfg)
    try:
        params, history = train(graph, split, tcfg)
    except DivergenceError as exc:
        if exc.history is not None:
            exc.history.write_csv(paths["history"])
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE

    params.save(paths["model"])
    history.write_csv(paths["history"])
    report = evaluate(params, graph, split.test)
    payload = {"variant": variant_tag(cfg), "seed": cfg["seed"],
               "metrics": report.to_dict()}
    _write_json(payload, paths["metrics"])
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def _load_model_for(graph, model_path: str) -> DignnParams:
    params = DignnParams.load(model_path)
    if params.n_nodes != graph.num_nodes or params.feat_dim != graph.feature_dim:
        raise GraphLoadError(
            f"model dims ({params.n_nodes}, {params.feat_dim}) do not match "
            f"graph ({graph.num_nodes}, {graph.feature_dim})"
        )
    return params


def cmd_eval(args) -> int:
    cfg = resolve_config({}, {"seed": args.seed})
    graph, split = _prepare_data(args.data, cfg)
    params = _load_model_for(graph, args.model)
    report = evaluate(params, graph, split.test)
    payload = {"seed": cfg["seed"], "metrics": report.to_dict()}
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.out:
        _write_json(payload, args.out)
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        cfg = SynthConfig(
            num_nodes=args.n, feature_dim=args.dim, fraud_rate=args.fraud_rate,
            mean_separation=args.delta, homophily=args.homophily,
            avg_degree=args.avg_degree, seed=args.seed,
        )
        graph = synth_generate(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    save_graph(graph, args.out)
    dist = neighbor_label_distribution(graph)
    names = {0: "benign", 1: "fraud"}
    printable = {
        names[c]: None if row is None else {names[k]: v for k, v in row.items()}
        for c, row in dist.items()
    }
    print(json.dumps({"neighbor_label_distribution": printable},
                     indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    variants = {
        "default": DignnConfig(),
        "ce_only": DignnConfig(alpha=0.0, beta=0.0),
        "all_on": DignnConfig(alpha=1.0, beta=1.0),
    }
    ok = True
    for vname, mcfg in variants.items():
        report = gradcheck(mcfg, corrupt=args.corrupt_tensor)
        for tname, err in report["per_tensor"].items():
            print(f"{vname} {tname} {err:.3e}")
        status = "pass" if report["passed"] else "FAIL"
        print(f"{vname} max_rel_err {report['max_rel_err']:.3e} {status}")
        ok = ok and report["passed"]
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_export_embeddings(args) -> int:
    cfg = resolve_config({}, {"seed": args.seed})
    graph, _split = _prepare_data(args.data, cfg)
    params = _load_model_for(graph, args.model)
    ids = graph.labeled_ids()
    batch = gather_batch(graph, ids)
    out = M.forward(params, batch, params.cfg)
    z = out.z.value
    with open(args.out, "w") as fh:
        fh.write("node_id,label," +
                 ",".join(f"z{i}" for i in range(z.shape[1])) + "\n")
        for nid, lab, row in zip(ids, batch.labels, z):
            fh.write(f"{nid},{lab}," + ",".join(repr(float(x)) for x in row) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dignn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write run artifacts")
    t.add_argument("--data", help="graph directory")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--manifest", help="re-run from a previously written manifest")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--alpha", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--ablation", choices=ABLATIONS)
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained model on the test split")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--seed", type=int, default=0, help="root seed of the run")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="generate a synthetic graph directory")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--dim", type=int, default=16)
    s.add_argument("--fraud-rate", type=float, default=0.15, dest="fraud_rate")
    s.add_argument("--homophily", "--h", type=float, default=0.19,
                   dest="homophily")
    s.add_argument("--delta", type=float, default=2.33,
                   help="class feature-mean separation")
    s.add_argument("--avg-degree", type=float, default=10.0, dest="avg_degree")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    g = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    g.add_argument("--corrupt-tensor", dest="corrupt_tensor",
                   help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export-embeddings",
                       help="write fused embeddings of all labeled nodes")
    x.add_argument("--model", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_embeddings)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GraphLoadError as exc:
        print(f"load error: {exc}", file=sys.stderr)
        return EXIT_LOAD
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
