"""Experiment configuration, pipeline stages and evaluation.

A config is a nested JSON document. Resolution order is command line, then
config file, then ``DEFAULTS``; the seed additionally falls back to the
``ATTRCLOAK_SEED`` environment variable before its default of 0.
"""
from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import metrics as M
from .anonymize import (
    LOGIT, PROBABILITY, AttackSpec, AttackSpecError, IdentityTerm, batch_attack, default_jobs,
    load_results, save_results,
)
from .data import (
    DEFAULT_SCHEMA, AttributeSchema, Dataset, DatasetError, SyntheticSpec, generate_dataset,
    load_dataset, save_dataset,
)
from .models import (
    HELDOUT, WHITEBOX, AttributeNet, CheckpointError, EmbeddingNet, MatchThreshold, TrainConfig,
    calibrate_threshold, check_schema, load_checkpoint, pairwise_distances, save_checkpoint,
    train_attribute_net, train_embedding_net,
)

log = logging.getLogger(__name__)

SEED_ENV = "ATTRCLOAK_SEED"

DEFAULTS: dict = {
    "name": "experiment",
    "seed": None,
    "output": "runs/experiment",
    "jobs": None,
    "data": {
        "dir": None,
        "height": 32, "width": 32, "channels": 3,
        "subjects": 40, "images_per_subject": 10, "train_per_subject": 3,
        "attributes": DEFAULT_SCHEMA.to_json(),
        "alpha": SyntheticSpec.alpha, "sigma": SyntheticSpec.sigma, "overlap": 0.0,
        "texture_grid": SyntheticSpec.texture_grid, "texture_contrast": SyntheticSpec.texture_contrast,
    },
    "train": {
        "epochs": TrainConfig.epochs, "batch_size": TrainConfig.batch_size, "lr": TrainConfig.lr,
        "label_smoothing": TrainConfig.label_smoothing,
    },
    "models": {"attribute": None, "whitebox": None, "heldout": None},
    "variant": WHITEBOX,
    "attack": {
        "suppress": [], "preserve": [], "preserve_identity": False,
        "confidence": 0.0, "iterations": 10000, "lr": 0.01,
        "distortion_weight": 1.0, "identity_weight": 1.0,
        "score_space": PROBABILITY, "box_eps": 1e-6,
        "split": "test", "limit": None,
    },
    "evaluate_identity": None,
    "results": None,
    "metrics": None,
    "histogram_bins": 10,
}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (a usage error)."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


# -- configuration ------------------------------------------------------------

def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_keys(doc: dict, ref: dict, where: str = "") -> None:
    for k, v in doc.items():
        if k not in ref:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(v, dict) and isinstance(ref[k], dict) and k not in ("attributes",):
            _check_keys(v, ref[k], f"{where}{k}.")


def load_config_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {p} must hold a JSON object")
    return doc


def resolve_config(file_doc: dict | None = None, overrides: dict | None = None) -> dict:
    """Merge defaults < file < overrides and fill the seed fallback chain."""
    file_doc = file_doc or {}
    overrides = overrides or {}
    _check_keys(file_doc, DEFAULTS)
    _check_keys(overrides, DEFAULTS)
    cfg = deep_merge(deep_merge(DEFAULTS, file_doc), overrides)
    if cfg["seed"] is None:
        env = os.environ.get(SEED_ENV)
        try:
            cfg["seed"] = int(env) if env not in (None, "") else 0
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    if cfg["jobs"] is None:
        cfg["jobs"] = default_jobs()
    if cfg["evaluate_identity"] is None:
        cfg["evaluate_identity"] = bool(cfg["attack"]["preserve_identity"])
    cfg["attack"]["suppress"] = _as_list(cfg["attack"]["suppress"])
    cfg["attack"]["preserve"] = _as_list(cfg["attack"]["preserve"])
    if int(cfg["jobs"]) < 1:
        raise ConfigError("jobs must be >= 1")
    sup = {str(x["name"] if isinstance(x, dict) else x).partition(":")[0] for x in cfg["attack"]["suppress"]}
    both = sorted(sup & set(cfg["attack"]["preserve"]))
    if both:
        raise ConfigError(f"attribute(s) both suppressed and preserved: {', '.join(both)}")
    return cfg


def _as_list(v) -> list:
    if v is None:
        return []
    if isinstance(v, str):
        return [s for s in (x.strip() for x in v.split(",")) if s]
    return list(v)


def write_resolved(cfg: dict, directory) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    path = root / "config.resolved.json"
    path.write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    return path


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    d = cfg["data"]
    try:
        schema = AttributeSchema.from_json(d["attributes"])
        names = {f.name for f in fields(SyntheticSpec)} - {"schema", "seed"}
        spec = SyntheticSpec(schema=schema, seed=int(cfg["seed"]),
                             **{k: v for k, v in d.items() if k in names})
        spec.validate()
    except (DatasetError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid data spec: {exc}") from None
    return spec


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(seed=int(cfg["seed"]), **cfg["train"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training config: {exc}") from None


def _parse_suppress(item, schema: AttributeSchema) -> tuple[int, int | None]:
    if isinstance(item, dict):
        name, target = item["name"], item.get("target")
    else:
        name, _, target = str(item).partition(":")
        target = int(target) if target != "" else None
    return schema.index(name), target


def attack_spec(cfg: dict, schema: AttributeSchema, identity: IdentityTerm | None = None) -> AttackSpec:
    """Build an ``AttackSpec`` from attribute names; all problems surface as ``ConfigError``."""
    a = cfg["attack"]
    try:
        suppress = dict(_parse_suppress(x, schema) for x in a["suppress"])
        preserve = frozenset(schema.index(n) for n in a["preserve"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(str(exc).strip("'\"")) from None
    if not suppress and not preserve and not a["preserve_identity"]:
        log.warning("attack config constrains nothing; the attack reduces to the identity map")
    if a["score_space"] not in (PROBABILITY, LOGIT):
        raise ConfigError(f"score_space must be {PROBABILITY!r} or {LOGIT!r}")
    spec = AttackSpec(
        suppress=suppress, preserve=preserve, confidence=float(a["confidence"]),
        distortion_weight=float(a["distortion_weight"]), identity=identity,
        iterations=int(a["iterations"]), lr=float(a["lr"]), score_space=a["score_space"],
        box_eps=float(a["box_eps"]), seed=int(cfg["seed"]),
    )
    try:
        spec.validate(schema)
    except AttackSpecError as exc:
        raise ConfigError(str(exc)) from None
    return spec


# -- stage helpers ------------------------------------------------------------

def load_dataset_checked(path) -> Dataset:
    p = Path(path)
    if not (p / "manifest.json").is_file():
        raise ConfigError(f"dataset not found: {p}")
    return load_dataset(p)


def load_model(path, kind: type):
    p = Path(path)
    if not (p / "model.json").is_file():
        raise ConfigError(f"checkpoint not found: {p}")
    net = load_checkpoint(p)
    if not isinstance(net, kind):
        raise ConfigError(f"checkpoint {p} holds a {type(net).__name__}, expected {kind.__name__}")
    return net


def load_attribute_model(path, dataset: Dataset) -> AttributeNet:
    net = load_model(path, AttributeNet)
    try:
        check_schema(net, dataset.schema)
    except CheckpointError as exc:
        raise ConfigError(str(exc)) from None
    return net


def save_threshold(th: MatchThreshold, directory) -> None:
    (Path(directory) / "threshold.json").write_text(json.dumps(th.to_json(), indent=1, sort_keys=True) + "\n")


def load_threshold(directory, net: EmbeddingNet, dataset: Dataset) -> MatchThreshold:
    p = Path(directory) / "threshold.json"
    if p.is_file():
        return MatchThreshold(**json.loads(p.read_text()))
    return calibrate_threshold(net, dataset)


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(jsonable(doc), indent=1, sort_keys=True) + "\n")


def jsonable(x):
    """Plain JSON types; non-finite floats become the strings "inf", "-inf", "nan"."""
    if isinstance(x, dict):
        return {str(k): jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        f = float(x)
        if np.isnan(f):
            return "nan"
        if np.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    return x


def stage_generate(cfg: dict, out) -> Dataset:
    ds = generate_dataset(synthetic_spec(cfg))
    save_dataset(ds, out)
    return ds


def stage_train_attribute(cfg: dict, dataset: Dataset, out) -> AttributeNet:
    net, report = train_attribute_net(dataset, train_config(cfg))
    save_checkpoint(net, out)
    _write_json(Path(out) / "training.json", report)
    return net


def stage_train_embedder(cfg: dict, dataset: Dataset, variant: str, out) -> tuple[EmbeddingNet, MatchThreshold]:
    if variant not in (WHITEBOX, HELDOUT):
        raise ConfigError(f"variant must be {WHITEBOX!r} or {HELDOUT!r}")
    net, report = train_embedding_net(dataset, train_config(cfg), variant=variant)
    th = calibrate_threshold(net, dataset)
    save_checkpoint(net, out)
    save_threshold(th, out)
    _write_json(Path(out) / "training.json", report)
    return net, th


def attack_samples(cfg: dict, dataset: Dataset):
    split = cfg["attack"]["split"]
    samples = dataset.split(split)
    if not samples:
        raise ConfigError(f"dataset has no {split!r} samples")
    limit = cfg["attack"]["limit"]
    return samples[: int(limit)] if limit is not None else samples


def stage_attack(cfg: dict, dataset: Dataset, net: AttributeNet, out, whitebox: EmbeddingNet | None = None,
                 tau: float | None = None, heldout: EmbeddingNet | None = None):
    identity = None
    if cfg["attack"]["preserve_identity"]:
        if whitebox is None:
            raise ConfigError("preserve_identity needs a white-box embedder")
        identity = IdentityTerm(whitebox, float(tau), float(cfg["attack"]["identity_weight"]))
    spec = attack_spec(cfg, dataset.schema, identity)
    batch = batch_attack(attack_samples(cfg, dataset), spec, net, heldout, jobs=int(cfg["jobs"]))
    save_results(batch, out)
    return batch


# -- evaluation ---------------------------------------------------------------

def _identity_metrics(net: EmbeddingNet, dataset: Dataset, probes, originals: np.ndarray,
                      anonymized: np.ndarray) -> dict:
    gallery = dataset.split("gallery")
    if not gallery:
        raise DatasetError("identity evaluation needs a gallery split")
    g_emb = net.embed_numpy(np.stack([s.image for s in gallery]))
    g_ids = np.array([s.subject for s in gallery])
    p_ids = np.array([s.subject for s in probes])
    e_orig = net.embed_numpy(originals)
    e_anon = net.embed_numpy(anonymized)
    cmc0 = M.cmc_curve(g_emb, g_ids, e_orig, p_ids)
    cmc1 = M.cmc_curve(g_emb, g_ids, e_anon, p_ids)
    # verification pairs: every unordered probe pair; original vs original
    # and original vs anonymized counterpart
    iu, ju = np.triu_indices(len(probes), k=1)
    same = p_ids[iu] == p_ids[ju]
    d0 = pairwise_distances(e_orig, e_orig)[iu, ju]
    d1 = pairwise_distances(e_orig, e_anon)[iu, ju]
    roc0 = roc1 = None
    if same.any() and not same.all():
        roc0 = M.roc_curve(d0[same], d0[~same])
        roc1 = M.roc_curve(d1[same], d1[~same])
    else:
        log.warning("%s: probes lack genuine or impostor pairs; ROC skipped", net.variant)
    own = np.sqrt(((e_orig - e_anon) ** 2).sum(-1))
    return {
        "variant": net.variant,
        "cmc_original": cmc0, "cmc_anonymized": cmc1,
        "rank1_original": cmc0.rank1, "rank1_anonymized": cmc1.rank1,
        "rank1_drop": cmc0.rank1 - cmc1.rank1,
        "roc_original": roc0, "roc_anonymized": roc1,
        "auc_original": roc0 and roc0.auc, "auc_anonymized": roc1 and roc1.auc,
        "auc_drop": roc0 and roc0.auc - roc1.auc,
        "genuine_pairs": int(same.sum()), "impostor_pairs": int((~same).sum()),
        "self_distance_mean": float(own.mean()), "self_distance_max": float(own.max()),
    }


def evaluate(dataset: Dataset, net: AttributeNet, results: dict, anonymized: dict[str, np.ndarray],
             whitebox: EmbeddingNet | None = None, heldout: EmbeddingNet | None = None,
             bins: int = 10) -> dict:
    """Metrics for one attack run. Curves stay as metric objects; see ``report``."""
    rows = results["samples"]
    if not rows:
        raise DatasetError("results hold no attacked samples")
    probes = [dataset.by_id(r["id"]) for r in rows]
    originals = np.stack([s.image for s in probes]).astype(np.float64)
    anon = np.stack([anonymized[r["id"]] for r in rows])
    truth = np.array([s.labels for s in probes])
    success = np.array([bool(r["success"]) for r in rows])
    pb = net.predict_proba(originals)
    pa = net.predict_proba(anon)
    spec = results["spec"]
    roles = {n: "suppress" for n in spec["suppress"]}
    roles.update({n: "preserve" for n in spec["preserve"]})

    test = dataset.split("test")
    acc = {}
    if test:
        pred = net.predict(np.stack([s.image for s in test]))
        lab = np.array([s.labels for s in test])
        acc = {n: float(np.mean(pred[:, i] == lab[:, i])) for i, n in enumerate(dataset.schema.names)}

    attrs = {}
    for i, name in enumerate(dataset.schema.names):
        c = dataset.schema.class_counts[i]
        t = truth[:, i]
        before = M.confusion_matrix(pb[i].argmax(-1), t, name, c)
        after = M.confusion_matrix(pa[i].argmax(-1), t, name, c)
        s_before = pb[i][np.arange(len(t)), t]
        s_after = pa[i][np.arange(len(t)), t]
        entry = {
            "role": roles.get(name, "free"),
            "confusion_before": before, "confusion_after": after,
            "true_score_before": M.score_histogram(np.clip(s_before, 0, 1), bins, f"{name} before"),
            "true_score_after": M.score_histogram(np.clip(s_after, 0, 1), bins, f"{name} after"),
            "accuracy_before": float(np.mean(pb[i].argmax(-1) == t)),
            "accuracy_after": float(np.mean(pa[i].argmax(-1) == t)),
            "true_score_below_half_after": float(np.mean(s_after < 0.5)),
        }
        if name in roles:
            m = [r["attributes"][i]["post_margin"] for r, ok in zip(rows, success) if ok]
            entry["margin_success_min"] = float(min(m)) if m else None
            entry["margin_success_mean"] = float(np.mean(m)) if m else None
        attrs[name] = entry

    ok_idx = np.flatnonzero(success)
    out = {
        "summary": results["summary"],
        "spec": spec,
        "classifier_test_accuracy": acc,
        "attributes": attrs,
        "quality_success": M.quality_stats(originals[ok_idx], anon[ok_idx]),
        "quality_all": M.quality_stats(originals, anon),
        "samples": [{"id": r["id"], "success": bool(r["success"]), "distortion": r["distortion"],
                     "psnr": r["psnr"]} for r in rows],
        "identity": {},
    }
    for emb in (whitebox, heldout):
        if emb is not None:
            out["identity"][emb.variant] = _identity_metrics(emb, dataset, probes, originals, anon)
    return out


def metrics_json(metrics: dict) -> dict:
    """JSON form of ``evaluate`` output (metric objects expanded)."""
    def conv(x):
        if hasattr(x, "to_json"):
            return x.to_json()
        if isinstance(x, M.QualityStats):
            return x.summary()
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, list):
            return [conv(v) for v in x]
        return x
    return jsonable(conv(metrics))


# -- end to end ---------------------------------------------------------------

def _stage(name: str, fn, *args, **kwargs):
    log.info("stage %s", name)
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise StageError(name, exc) from exc


def run_experiment(cfg: dict) -> Path:
    """gen/load data -> train/load models -> attack -> evaluate -> report."""
    from .report import write_report

    out = Path(cfg["output"])
    write_resolved(cfg, out)
    if cfg["data"]["dir"]:
        dataset = _stage("data", load_dataset_checked, cfg["data"]["dir"])
    else:
        dataset = _stage("data", stage_generate, cfg, out / "data")

    models = cfg["models"]
    if models["attribute"]:
        net = _stage("train-attr", load_attribute_model, models["attribute"], dataset)
    else:
        net = _stage("train-attr", stage_train_attribute, cfg, dataset, out / "models" / "attribute")

    need_id = cfg["attack"]["preserve_identity"] or cfg["evaluate_identity"]
    whitebox = heldout = None
    tau = None
    if need_id:
        if models["whitebox"]:
            whitebox = _stage("train-embed", load_model, models["whitebox"], EmbeddingNet)
            tau = load_threshold(models["whitebox"], whitebox, dataset).tau
        else:
            whitebox, th = _stage("train-embed", stage_train_embedder, cfg, dataset, WHITEBOX,
                                  out / "models" / "whitebox")
            tau = th.tau
        if models["heldout"]:
            heldout = _stage("train-embed", load_model, models["heldout"], EmbeddingNet)
        else:
            heldout, _ = _stage("train-embed", stage_train_embedder, cfg, dataset, HELDOUT,
                                out / "models" / "heldout")

    _stage("attack", stage_attack, cfg, dataset, net, out / "attack", whitebox, tau, heldout)
    results, images = _stage("eval", load_results, out / "attack")
    metrics = _stage("eval", evaluate, dataset, net, results, images, whitebox, heldout,
                     int(cfg["histogram_bins"]))
    doc = metrics_json(metrics)
    doc["experiment"] = experiment_info(cfg)
    _write_json(out / "metrics.json", doc)
    _stage("report", write_report, doc, out / "report")
    return out


def experiment_info(cfg: dict) -> dict:
    """Path-free description of a run, embedded in the report."""
    return {
        "name": cfg["name"], "seed": cfg["seed"],
        "data": {k: v for k, v in cfg["data"].items() if k != "dir"},
        "train": cfg["train"],
        "attack": cfg["attack"],
    }
