"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Failures print a single JSON line ``{"error": ..., "kind": ..., "stage": ...}``
on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .anonymize import load_results
from .data import DatasetError
from .models import HELDOUT, WHITEBOX, CheckpointError, EmbeddingNet
from .report import write_report

log = logging.getLogger("attrcloak")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# flag dest -> dotted config key
_KEYS = {
    "seed": "seed", "out": "output", "jobs": "jobs", "name": "name",
    "data": "data.dir",
    "height": "data.height", "width": "data.width", "channels": "data.channels",
    "subjects": "data.subjects", "images_per_subject": "data.images_per_subject",
    "train_per_subject": "data.train_per_subject", "alpha": "data.alpha", "sigma": "data.sigma",
    "overlap": "data.overlap", "texture_contrast": "data.texture_contrast",
    "epochs": "train.epochs", "batch_size": "train.batch_size", "train_lr": "train.lr",
    "label_smoothing": "train.label_smoothing",
    "attr_model": "models.attribute", "embedder": "models.whitebox", "heldout": "models.heldout",
    "variant": "variant",
    "suppress": "attack.suppress", "preserve": "attack.preserve",
    "preserve_identity": "attack.preserve_identity", "confidence": "attack.confidence",
    "iters": "attack.iterations", "lr": "attack.lr", "distortion_weight": "attack.distortion_weight",
    "identity_weight": "attack.identity_weight", "score_space": "attack.score_space",
    "box_eps": "attack.box_eps", "split": "attack.split", "limit": "attack.limit",
    "evaluate_identity": "evaluate_identity", "results": "results", "metrics": "metrics",
    "bins": "histogram_bins",
}


def _common(p):
    p.add_argument("--config", help="JSON experiment config; command-line flags override it")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help=f"master seed (fallback: ${P.SEED_ENV}, then 0)")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v progress, -vv debug")


def _data_flags(p):
    g = p.add_argument_group("synthetic data")
    for flag, typ in (("--height", int), ("--width", int), ("--channels", int), ("--subjects", int),
                      ("--images-per-subject", int), ("--train-per-subject", int), ("--alpha", float),
                      ("--sigma", float), ("--overlap", float), ("--texture-contrast", float)):
        g.add_argument(flag, type=typ)


def _train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--train-lr", type=float, help="Adam learning rate for training")
    g.add_argument("--label-smoothing", type=float)


def _attack_flags(p):
    g = p.add_argument_group("attack")
    g.add_argument("--suppress", action="append",
                   help="attribute name to suppress, optionally NAME:CLASS for a fixed target; repeatable")
    g.add_argument("--preserve", action="append", help="attribute name to preserve; repeatable")
    g.add_argument("--preserve-identity", action="store_true", default=None,
                   help="add the identity term against the white-box embedder")
    g.add_argument("--confidence", type=float, help="margin c")
    g.add_argument("--iters", type=int, help="Adam iterations")
    g.add_argument("--lr", type=float, help="attack learning rate")
    g.add_argument("--distortion-weight", type=float)
    g.add_argument("--identity-weight", type=float)
    g.add_argument("--score-space", choices=("probability", "logit"))
    g.add_argument("--box-eps", type=float)
    g.add_argument("--split", help="dataset split to attack (default test)")
    g.add_argument("--limit", type=int, help="attack at most this many samples")
    g.add_argument("--jobs", type=int, help="worker processes (default: available processors)")


def build_parser() -> argparse.ArgumentParser:
    root = _Parser(prog="attrcloak", description="k-attribute anonymization by adversarial perturbation")
    sub = root.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate and save a synthetic dataset")
    _common(p)
    _data_flags(p)

    p = sub.add_parser("train-attr", help="train the multi-head attribute classifier")
    _common(p)
    p.add_argument("--data", help="dataset directory")
    _train_flags(p)

    p = sub.add_parser("train-embed", help="train an identity embedder and calibrate its threshold")
    _common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--variant", choices=(WHITEBOX, HELDOUT))
    _train_flags(p)

    p = sub.add_parser("attack", help="anonymize a dataset split")
    _common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--attr-model", help="attribute classifier checkpoint")
    p.add_argument("--embedder", help="white-box embedder checkpoint")
    p.add_argument("--heldout", help="held-out embedder checkpoint (transfer reporting)")
    _attack_flags(p)

    p = sub.add_parser("eval", help="compute metrics for attack results")
    _common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--attr-model", help="attribute classifier checkpoint")
    p.add_argument("--embedder", help="white-box embedder checkpoint")
    p.add_argument("--heldout", help="held-out embedder checkpoint")
    p.add_argument("--results", help="attack results directory")
    p.add_argument("--bins", type=int, help="score histogram bins")

    p = sub.add_parser("report", help="render report.json, CSVs and SVG figures from metrics")
    _common(p)
    p.add_argument("--metrics", help="metrics.json written by eval")

    p = sub.add_parser("run-experiment", help="config-driven end-to-end run")
    _common(p)
    p.add_argument("--name")
    p.add_argument("--data", help="use an existing dataset instead of generating one")
    p.add_argument("--attr-model", help="use an existing attribute checkpoint")
    p.add_argument("--embedder", help="use an existing white-box embedder checkpoint")
    p.add_argument("--heldout", help="use an existing held-out embedder checkpoint")
    p.add_argument("--evaluate-identity", action="store_true", default=None,
                   help="report identity metrics even without the identity term")
    _data_flags(p)
    _train_flags(p)
    _attack_flags(p)
    return root


def _overrides(args: argparse.Namespace) -> dict:
    out: dict = {}
    for dest, key in _KEYS.items():
        v = getattr(args, dest, None)
        if v is None:
            continue
        node = out
        *head, last = key.split(".")
        for k in head:
            node = node.setdefault(k, {})
        node[last] = v
    return out


def _require(cfg: dict, key: str, flag: str):
    node = cfg
    for k in key.split("."):
        node = node[k]
    if node in (None, ""):
        raise P.ConfigError(f"{flag} is required (or set {key!r} in the config file)")
    return node


# -- commands -----------------------------------------------------------------

def cmd_gen_data(cfg):
    out = Path(cfg["output"])
    P.write_resolved(cfg, out)
    P.synthetic_spec(cfg)
    ds = P.stage_generate(cfg, out)
    return {"samples": len(ds.samples), "schema_hash": ds.schema.hash(), "out": str(out)}


def cmd_train_attr(cfg):
    out = Path(cfg["output"])
    P.write_resolved(cfg, out)
    P.train_config(cfg)
    ds = P.load_dataset_checked(_require(cfg, "data.dir", "--data"))
    P.stage_train_attribute(cfg, ds, out)
    return {"out": str(out)}


def cmd_train_embed(cfg):
    out = Path(cfg["output"])
    P.write_resolved(cfg, out)
    P.train_config(cfg)
    ds = P.load_dataset_checked(_require(cfg, "data.dir", "--data"))
    _, th = P.stage_train_embedder(cfg, ds, cfg["variant"], out)
    return {"out": str(out), "tau": th.tau, "eer": th.eer}


def _embedders(cfg, ds):
    wb = ho = None
    tau = None
    if cfg["models"]["whitebox"]:
        wb = P.load_model(cfg["models"]["whitebox"], EmbeddingNet)
        tau = P.load_threshold(cfg["models"]["whitebox"], wb, ds).tau
    if cfg["models"]["heldout"]:
        ho = P.load_model(cfg["models"]["heldout"], EmbeddingNet)
    return wb, tau, ho


def cmd_attack(cfg):
    out = Path(cfg["output"])
    P.write_resolved(cfg, out)
    ds = P.load_dataset_checked(_require(cfg, "data.dir", "--data"))
    net = P.load_attribute_model(_require(cfg, "models.attribute", "--attr-model"), ds)
    wb, tau, ho = _embedders(cfg, ds)
    if cfg["attack"]["preserve_identity"] and wb is None:
        raise P.ConfigError("--preserve-identity requires --embedder")
    P.attack_spec(cfg, ds.schema)  # validate before any heavy work
    batch = P.stage_attack(cfg, ds, net, out, wb, tau, ho)
    s = batch.summary
    return {"out": str(out), "eligible": s["eligible"], "success_rate": s["success_rate"]}


def cmd_eval(cfg):
    out = Path(cfg["output"])
    P.write_resolved(cfg, out)
    ds = P.load_dataset_checked(_require(cfg, "data.dir", "--data"))
    net = P.load_attribute_model(_require(cfg, "models.attribute", "--attr-model"), ds)
    res_dir = Path(_require(cfg, "results", "--results"))
    if not (res_dir / "results.json").is_file():
        raise P.ConfigError(f"attack results not found: {res_dir}")
    wb, _, ho = _embedders(cfg, ds)
    results, images = load_results(res_dir)
    metrics = P.evaluate(ds, net, results, images, wb, ho, int(cfg["histogram_bins"]))
    doc = P.metrics_json(metrics)
    doc["experiment"] = P.experiment_info(cfg)
    path = out / "metrics.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return {"metrics": str(path)}


def cmd_report(cfg):
    out = Path(cfg["output"])
    P.write_resolved(cfg, out)
    mpath = Path(_require(cfg, "metrics", "--metrics"))
    if not mpath.is_file():
        raise P.ConfigError(f"metrics file not found: {mpath}")
    doc = json.loads(mpath.read_text())
    return {"report": str(write_report(doc, out))}


def cmd_run_experiment(cfg):
    return {"out": str(P.run_experiment(cfg))}


COMMANDS = {
    "gen-data": cmd_gen_data, "train-attr": cmd_train_attr, "train-embed": cmd_train_embed,
    "attack": cmd_attack, "eval": cmd_eval, "report": cmd_report, "run-experiment": cmd_run_experiment,
}


def _fail(kind: str, message: str, stage: str | None = None) -> None:
    doc = {"error": message.replace("\n", " "), "kind": kind}
    if stage:
        doc["stage"] = stage
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _fail("usage", str(exc))
        return EXIT_USAGE
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        file_doc = P.load_config_file(args.config) if args.config else {}
        cfg = P.resolve_config(file_doc, _overrides(args))
        info = COMMANDS[args.command](cfg)
    except P.ConfigError as exc:
        _fail("usage", str(exc), args.command)
        return EXIT_USAGE
    except P.StageError as exc:
        if isinstance(exc.cause, (P.ConfigError, CheckpointError)):
            _fail("usage", str(exc.cause), exc.stage)
            return EXIT_USAGE
        _fail("runtime", f"{type(exc.cause).__name__}: {exc.cause}", exc.stage)
        return EXIT_RUNTIME
    except CheckpointError as exc:
        _fail("usage", str(exc), args.command)
        return EXIT_USAGE
    except (DatasetError, OSError, ValueError, RuntimeError) as exc:
        _fail("runtime", f"{type(exc).__name__}: {exc}", args.command)
        return EXIT_RUNTIME
    print(json.dumps(info, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
