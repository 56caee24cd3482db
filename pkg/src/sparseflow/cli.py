"""Command-line interface: train, analyze, recipe, probe.

Exit codes: 0 success, 1 configuration error, 2 runtime error. The data
directory comes from --data or the SPARSEFLOW_DATA environment variable.
TOML configs mirror TrainConfig field names; [dst] and [prune] subtables map
onto DstConfig/PruneConfig.
"""

import argparse
import logging
import os
import sys

import numpy as np

try:
    import tomllib
except ImportError:  # python 3.10
    import tomli as tomllib

from . import __version__
from .checkpoint import load_state
from .data import default_data_dir, inputs_for, resolve_dataset
from .dst import DstConfig, PruneConfig
from .errors import ConfigError, SparseflowError
from .flow import full_hessian, spectrum
from .initialization import InitScheme
from .landscape import ParamPoint, interpolate_loss, mds_embed, similarity_report
from .network import build_network, parse_model_spec
from .recipes import RECIPES, fig1c_signal, run_experiment
from .train import TrainConfig, train, write_csv


def _load_toml_config(path):
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    dst = raw.pop("dst", None)
    prune = raw.pop("prune", None)
    for key in ("checkpoint_steps", "dist_exclude", "drop_epochs"):
        if key in raw:
            raw[key] = tuple(raw[key])
    try:
        cfg = TrainConfig(**raw)
        if dst:
            cfg.dst = DstConfig(**dst)
        if prune:
            cfg.prune = PruneConfig(**prune)
    except TypeError as exc:
        raise ConfigError(f"bad config file {path}: {exc}") from None
    return cfg


def _add_train_flags(p):
    p.add_argument("--config", help="TOML file with TrainConfig fields")
    p.add_argument("--model")
    p.add_argument("--dataset", default="mnist", choices=["mnist", "digits", "blobs"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-schedule", choices=["cosine", "warmup_step", "constant"])
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--sparsity", type=float)
    p.add_argument("--distribution", choices=["uniform", "erk", "explicit"])
    p.add_argument("--init", dest="init_family", choices=["per_neuron", "layer_scaled", "masked_dense"])
    p.add_argument("--dst-method", choices=["set", "rigl", "rigl_inverted", "none"])
    p.add_argument("--dst-drop-fraction", type=float, default=0.3)
    p.add_argument("--dst-update-every", type=int, default=100)
    p.add_argument("--dst-schedule", choices=["cosine", "lr_coupled"], default="cosine")
    p.add_argument("--prune-to", type=float, help="gradual magnitude pruning target sparsity")
    p.add_argument("--prune-span", default="0.15:0.7", help="t_start:t_end as fractions of the run")
    p.add_argument("--seed", type=int)
    p.add_argument("--flow-every", type=int)
    p.add_argument("--train-subset", type=int)
    p.add_argument("--out", dest="out_dir")


def _train_config_from_args(args):
    cfg = _load_toml_config(args.config) if args.config else TrainConfig()
    for name in ("model", "epochs", "batch_size", "lr", "lr_schedule", "momentum", "weight_decay",
                 "sparsity", "distribution", "init_family", "seed", "flow_every", "train_subset", "out_dir"):
        val = getattr(args, name, None)
        if val is not None:
            setattr(cfg, name, val)
    if args.dst_method and args.dst_method != "none":
        cfg.dst = DstConfig(method=args.dst_method, drop_fraction=args.dst_drop_fraction,
                            update_every=args.dst_update_every, schedule=args.dst_schedule)
    return cfg


def _cmd_train(args):
    cfg = _train_config_from_args(args)
    ds = resolve_dataset(args.dataset, args.data)
    if args.prune_to is not None:
        n = (cfg.train_subset or ds.train_x.shape[0]) // cfg.batch_size * cfg.epochs
        f0, f1 = (float(v) for v in args.prune_span.split(":"))
        cfg.prune = PruneConfig(args.prune_to, max(1, int(f0 * n)), max(2, int(f1 * n)),
                                frequency=max(1, n // 50))
    cfg.out_dir = cfg.out_dir or "run-out"
    art = train(cfg, ds)
    acc = art.final_test_accuracy
    print(f"finished at step {art.final_net.step}; test accuracy "
          f"{acc:.4f}" if acc is not None else "finished (no eval)")
    print(f"artifacts in {cfg.out_dir}")
    return 0


def _cmd_recipe(args):
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        overrides[key] = val
    out_dir, _ = run_experiment(args.name, overrides, args.out, args.data)
    print(f"recipe {args.name} written to {out_dir}")
    return 0


def _cmd_probe(args):
    overrides = {
        "model": args.model,
        "sparsities": args.sparsities,
        "seeds": args.seeds,
        "samples": args.samples,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    out = args.out or "probe-out"
    fig1c_signal(out, overrides=overrides)
    print(f"probe written to {out}")
    return 0


def _load_net_for_analysis(args):
    input_shape, specs = parse_model_spec(args.model)
    net = build_network(input_shape, specs)
    load_state(net, args.checkpoint)
    return net


def _cmd_analyze(args):
    os.makedirs(args.out, exist_ok=True)
    if args.what == "spectrum":
        net = _load_net_for_analysis(args)
        ds = resolve_dataset(args.dataset, args.data)
        xs = inputs_for(net.input_shape, ds, args.split)
        ys = ds.labels(args.split)
        if args.limit:
            xs, ys = xs[:args.limit], ys[:args.limit]
        h = full_hessian(net, xs, ys, cap=args.cap)
        est = spectrum(0.5 * (h + h.T), bandwidth=args.bandwidth)
        write_csv(os.path.join(args.out, "spectrum.csv"), ["eigenvalue", "density"],
                  list(zip(est.grid, est.density)))
        with open(os.path.join(args.out, "eigenvalues.txt"), "w") as fh:
            fh.write("\n".join(repr(v) for v in est.eigenvalues) + "\n")
        print(f"spectrum of {est.eigenvalues.size} eigenvalues written to {args.out}")
        return 0
    if args.what == "interpolate":
        input_shape, specs = parse_model_spec(args.model)
        net = build_network(input_shape, specs)
        load_state(net, args.checkpoint)
        other = net.clone()
        load_state(other, args.other)
        a = ParamPoint.from_network(net, "a")
        b = ParamPoint.from_network(other, "b")
        ds = resolve_dataset(args.dataset, args.data)
        xs = inputs_for(net.input_shape, ds, args.split)
        ys = ds.labels(args.split)
        if args.limit:
            xs, ys = xs[:args.limit], ys[:args.limit]
        rows = interpolate_loss(net, a, b, list(np.linspace(0.0, 1.0, args.points)), xs, ys)
        write_csv(os.path.join(args.out, "interpolation.csv"), ["alpha", "loss", "accuracy"], rows)
        print(f"interpolation ({args.points} points) written to {args.out}")
        return 0
    raise ConfigError(f"unknown analysis {args.what!r}")


def build_parser():
    p = argparse.ArgumentParser(prog="sparseflow",
                                description="sparse-network training and diagnosis lab")
    p.add_argument("--version", action="version", version=f"sparseflow {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--data", default=None, help=f"data directory (default $SPARSEFLOW_DATA or ./data)")
    sub = p.add_subparsers(dest="command", required=True)

    pt = sub.add_parser("train", help="run one training job")
    _add_train_flags(pt)
    pt.set_defaults(fn=_cmd_train)

    pr = sub.add_parser("recipe", help="run a reproduction recipe")
    pr.add_argument("name", choices=sorted(RECIPES))
    pr.add_argument("--out")
    pr.add_argument("--set", action="append", metavar="KEY=VAL")
    pr.set_defaults(fn=_cmd_recipe)

    pp = sub.add_parser("probe", help="signal-propagation probe sweep")
    pp.add_argument("--model", default=None)
    pp.add_argument("--sparsities", default=None, help="plus-separated, e.g. 0.0+0.9+0.95")
    pp.add_argument("--seeds", type=int, default=None)
    pp.add_argument("--samples", type=int, default=None)
    pp.add_argument("--out")
    pp.set_defaults(fn=_cmd_probe)

    pa = sub.add_parser("analyze", help="analyses over checkpoints")
    pa.add_argument("what", choices=["spectrum", "interpolate"])
    pa.add_argument("--model", required=True)
    pa.add_argument("--checkpoint", required=True)
    pa.add_argument("--other", help="second checkpoint (interpolate)")
    pa.add_argument("--dataset", default="mnist", choices=["mnist", "digits", "blobs"])
    pa.add_argument("--split", default="test", choices=["train", "test"])
    pa.add_argument("--limit", type=int, default=0, help="cap evaluation examples")
    pa.add_argument("--points", type=int, default=21)
    pa.add_argument("--cap", type=int, default=5000)
    pa.add_argument("--bandwidth", type=float, default=None)
    pa.add_argument("--out", default="analysis-out")
    pa.set_defaults(fn=_cmd_analyze)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags and 0 on --help; map usage errors to 1
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.data is None:
        args.data = default_data_dir()
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (SparseflowError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
