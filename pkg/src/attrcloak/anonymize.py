"""k-attribute anonymization by adversarial perturbation.

The anonymized image is ``T = (tanh(I + w) + 1) / 2`` and ``w`` is optimized
with Adam on

    sum_U max(-c, max_{k != j} S_k(T) - S_j(T))  +  lam_dist * ||I - T||^2
        + lam_id * ||Id(I) - Id(T)||

where ``S`` are the softmax scores (or logits) of attribute head ``U`` and ``j``
is the class the head should end on: the true class for preserved
attributes, a fixed target or the strongest non-true class for suppressed ones.
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import AttributeSchema, LabeledSample
from .metrics import psnr
from .models import AttributeNet, EmbeddingNet
from .optim import AdamState, adam_step
from .tensorio import load_tensor, save_tensor

log = logging.getLogger(__name__)

ANY_OTHER = None
PROBABILITY = "probability"
LOGIT = "logit"


class AttackSpecError(ValueError):
    pass


class PreconditionError(ValueError):
    def __init__(self, sample_id: str, misclassified: list[str]):
        self.sample_id = sample_id
        self.misclassified = misclassified
        super().__init__(f"sample {sample_id}: attributes not correctly classified: {', '.join(misclassified)}")


class NoEligibleSamplesError(ValueError):
    pass


@dataclass
class IdentityTerm:
    embedder: EmbeddingNet
    tau: float
    weight: float = 1.0


@dataclass
class AttackSpec:
    """Which attributes to flip and keep, plus optimizer settings.

    ``suppress`` maps attribute index to a target class, or ``ANY_OTHER`` to
    accept whichever wrong class is currently strongest.
    """

    suppress: dict[int, int | None] = field(default_factory=dict)
    preserve: frozenset[int] = frozenset()
    confidence: float = 0.0
    distortion_weight: float = 1.0
    identity: IdentityTerm | None = None
    iterations: int = 10000
    lr: float = 0.01
    score_space: str = PROBABILITY
    box_eps: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        self.suppress = {int(k): (None if v is None else int(v)) for k, v in dict(self.suppress).items()}
        self.preserve = frozenset(int(i) for i in self.preserve)

    @property
    def constrained(self) -> list[int]:
        return sorted(set(self.suppress) | self.preserve)

    def validate(self, schema: AttributeSchema, labels: Sequence[int] | None = None) -> None:
        overlap = set(self.suppress) & self.preserve
        if overlap:
            names = ", ".join(schema.names[i] if 0 <= i < schema.k else str(i) for i in sorted(overlap))
            raise AttackSpecError(f"attribute(s) both suppressed and preserved: {names}")
        for i in self.constrained:
            if not 0 <= i < schema.k:
                raise AttackSpecError(f"attribute index {i} outside schema of {schema.k}")
        for i, j in self.suppress.items():
            if j is not None and not 0 <= j < schema.class_counts[i]:
                raise AttackSpecError(f"target class {j} invalid for {schema.names[i]}")
            if j is not None and labels is not None and j == labels[i]:
                raise AttackSpecError(f"target class {j} for {schema.names[i]} equals the true class")
        if not 0.0 <= self.confidence <= 1.0 and self.score_space == PROBABILITY:
            raise AttackSpecError(f"confidence must lie in [0, 1], got {self.confidence}")
        if self.iterations < 0 or self.lr <= 0 or self.box_eps <= 0 or self.box_eps >= 0.5:
            raise AttackSpecError("iterations >= 0, lr > 0 and 0 < box_eps < 0.5 required")
        if self.score_space not in (PROBABILITY, LOGIT):
            raise AttackSpecError(f"unknown score space {self.score_space!r}")

    def describe(self, schema: AttributeSchema) -> dict:
        return {
            "suppress": {schema.names[i]: ("any" if j is None else j) for i, j in sorted(self.suppress.items())},
            "preserve": sorted(schema.names[i] for i in self.preserve),
            "confidence": self.confidence,
            "distortion_weight": self.distortion_weight,
            "identity": None if self.identity is None else {
                "variant": self.identity.embedder.variant, "tau": self.identity.tau, "weight": self.identity.weight},
            "iterations": self.iterations,
            "lr": self.lr,
            "score_space": self.score_space,
            "box_eps": self.box_eps,
            "seed": self.seed,
        }


# -- building blocks ----------------------------------------------------------

def init_perturbation(image, box_eps: float = 1e-6) -> np.ndarray:
    """``w0`` such that ``reparameterize(I, w0) == clamp(I, eps, 1 - eps)``."""
    img = np.asarray(image, dtype=np.float64)
    # clamp a hair inside eps so tanh round-off keeps |T - I| <= eps
    eps = box_eps * (1.0 - 1e-9)
    clamped = np.clip(img, eps, 1.0 - eps)
    return np.arctanh(2.0 * clamped - 1.0) - img


def reparameterize(image, w):
    """``(tanh(I + w) + 1) / 2``; differentiable when ``w`` is a tape tensor."""
    if isinstance(w, ad.Tensor):
        return ad.scale(ad.add(ad.tanh(ad.add(image, w)), 1.0), 0.5)
    return 0.5 * (np.tanh(np.asarray(image, dtype=np.float64) + w) + 1.0)


def _rival(values: np.ndarray, exclude: int) -> int:
    masked = np.where(np.arange(values.size) == exclude, -np.inf, values)
    return int(np.argmax(masked))


def target_class(values: np.ndarray, true_class: int, mode: str, target: int | None = None) -> int:
    """Class a head should end on: the true class, a fixed target, or the best non-true class."""
    if mode == "preserve":
        return true_class
    if mode != "suppress":
        raise ValueError(f"unknown mode {mode!r}")
    if target is not None:
        return target
    return _rival(values, true_class)


def attribute_objective(scores, true_class: int, mode: str = "suppress", target: int | None = None,
                        confidence: float = 0.0) -> ad.Tensor:
    """``max(-c, max_{k != j} S_k - S_j)`` for one attribute head."""
    scores = scores if isinstance(scores, ad.Tensor) else ad.Tensor(scores)
    values = scores.value.reshape(-1)
    n = values.size
    if not 0 <= true_class < n:
        raise ValueError(f"true class {true_class} outside [0, {n})")
    if target is not None and not 0 <= target < n:
        raise ValueError(f"target class {target} outside [0, {n})")
    if mode == "suppress" and target == true_class:
        raise ValueError("suppression target equals the true class")
    j = target_class(values, true_class, mode, target)
    k = _rival(values, j)
    return ad.max_const(ad.subtract(ad.gather(scores, k), ad.gather(scores, j)), -confidence)


def margin(values: np.ndarray, j: int) -> float:
    return float(values[j] - values[_rival(values, j)])


@dataclass
class Verdict:
    suppressed: dict[int, bool]
    preserved: dict[int, bool]
    identity: bool | None
    margins: dict[int, float]
    feasible: bool


def _verdict(scores: list[np.ndarray], probs: list[np.ndarray], labels, spec: AttackSpec,
             id_distance: float | None, required_margin: float) -> Verdict:
    sup, pre, margins = {}, {}, {}
    for a, tgt in spec.suppress.items():
        pred = int(np.argmax(probs[a]))
        sup[a] = pred != labels[a] if tgt is None else pred == tgt
        margins[a] = margin(scores[a], target_class(scores[a], labels[a], "suppress", tgt))
    for a in spec.preserve:
        pre[a] = int(np.argmax(probs[a])) == labels[a]
        margins[a] = margin(scores[a], labels[a])
    ident = None
    if spec.identity is not None:
        ident = bool(id_distance <= spec.identity.tau)
    ok = all(sup.values()) and all(pre.values()) and ident is not False
    if ok and required_margin > 0:
        ok = all(m >= required_margin for m in margins.values())
    return Verdict(sup, pre, ident, margins, ok)


def check_constraints(net: AttributeNet, image, anonymized, spec: AttackSpec, labels,
                      embedder: EmbeddingNet | None = None, required_margin: float = 0.0) -> Verdict:
    """Argmax verdicts for every constraint of ``spec`` on ``anonymized``.

    Identity passes when the white-box embedding distance is <= tau. With the
    default ``required_margin`` of 0 no score margins are enforced.
    """
    probs = [p.value for p in net.forward(anonymized)]
    scores = probs if spec.score_space == PROBABILITY else [z.value for z in net.logits(anonymized)]
    dist = None
    if spec.identity is not None:
        emb = embedder or spec.identity.embedder
        dist = float(np.linalg.norm(emb.embed_numpy(image) - emb.embed_numpy(anonymized)))
    return _verdict(scores, probs, labels, spec, dist, required_margin)


def _sum(terms: list[ad.Tensor]) -> ad.Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


@dataclass
class _Eval:
    loss: ad.Tensor
    T: np.ndarray
    scores: list[np.ndarray]
    probs: list[np.ndarray]
    id_distance: float | None
    terms: dict[int, float]


def _objective(image: np.ndarray, w: ad.Tensor, spec: AttackSpec, net: AttributeNet, labels,
               id_anchor: np.ndarray | None) -> _Eval:
    T = reparameterize(image, w)
    if spec.score_space == PROBABILITY:
        heads = net.forward(T)
        probs = None
    else:
        heads = net.logits(T)
        probs = [np.exp(h.value - h.value.max()) / np.exp(h.value - h.value.max()).sum() for h in heads]
    parts, term_values = [], {}
    for a in spec.constrained:
        if a in spec.suppress:
            t = attribute_objective(heads[a], labels[a], "suppress", spec.suppress[a], spec.confidence)
        else:
            t = attribute_objective(heads[a], labels[a], "preserve", None, spec.confidence)
        parts.append(t)
        term_values[a] = t.item()
    parts.append(ad.scale(ad.sq_norm(ad.subtract(T, image)), spec.distortion_weight))
    dist = None
    if spec.identity is not None:
        d = ad.norm(ad.subtract(spec.identity.embedder.embed(T), id_anchor))
        dist = d.item()
        parts.append(ad.scale(d, spec.identity.weight))
    scores = [h.value for h in heads]
    return _Eval(_sum(parts), T.value, scores, scores if probs is None else probs, dist, term_values)


def total_objective(image, w, spec: AttackSpec, net: AttributeNet, labels,
                    embedder: EmbeddingNet | None = None) -> ad.Tensor:
    """Scalar attack objective at ``w`` (a tape tensor for gradients, or an array)."""
    image = np.asarray(image, dtype=np.float64)
    anchor = None
    if spec.identity is not None:
        anchor = (embedder or spec.identity.embedder).embed_numpy(image)
    w = w if isinstance(w, ad.Tensor) else ad.Tensor(w)
    return _objective(image, w, spec, net, labels, anchor).loss


# -- the attack loop ----------------------------------------------------------

@dataclass
class AttackResult:
    sample_id: str
    success: bool
    T: np.ndarray
    w: np.ndarray
    distortion: float
    psnr: float
    first_feasible: int | None
    iterations: int
    final_loss: float
    attributes: list[dict]
    identity: dict = field(default_factory=dict)

    def summary_json(self) -> dict:
        return {
            "id": self.sample_id, "success": self.success, "distortion": self.distortion,
            "psnr": _json_float(self.psnr), "first_feasible": self.first_feasible,
            "iterations": self.iterations, "final_loss": self.final_loss,
            "attributes": self.attributes, "identity": self.identity,
        }


def _json_float(x: float):
    return "inf" if math.isinf(x) else x


def _quantize(T: np.ndarray) -> np.ndarray:
    # reported images go through float32 storage; keep them strictly inside (0, 1)
    q = T.astype(np.float32)
    q = np.clip(q, np.nextafter(np.float32(0), np.float32(1)), np.nextafter(np.float32(1), np.float32(0)))
    return q.astype(np.float64)


def predicted_classes(net: AttributeNet, image) -> list[int]:
    return [int(np.argmax(p)) for p in net.predict_proba(image)]


def eligible(net: AttributeNet, image, labels, spec: AttackSpec) -> list[int]:
    """Constrained attributes the net gets wrong on the clean image (empty = eligible)."""
    pred = predicted_classes(net, image)
    return [a for a in spec.constrained if pred[a] != labels[a]]


def run_attack(net: AttributeNet, sample: LabeledSample, spec: AttackSpec,
               heldout: EmbeddingNet | None = None) -> AttackResult:
    image = np.asarray(sample.image, dtype=np.float64)
    labels = tuple(int(c) for c in sample.labels)
    spec.validate(net.schema, labels)
    wrong = eligible(net, image, labels, spec)
    if wrong:
        raise PreconditionError(sample.id, [net.schema.names[a] for a in wrong])

    anchor = spec.identity.embedder.embed_numpy(image) if spec.identity is not None else None
    required = spec.confidence if spec.confidence > 0 else 0.0
    w = init_perturbation(image, spec.box_eps)
    state = AdamState.like(w, spec.lr)
    best_T, best_w, best_dist, first = None, None, math.inf, None
    last = None

    for it in range(spec.iterations + 1):
        with ad.Tape() as tape:
            wv = tape.variable(w)
            ev = _objective(image, wv, spec, net, labels, anchor)
            if it < spec.iterations:
                grad = tape.backward(ev.loss)[wv]
        last = ev
        verdict = _verdict(ev.scores, ev.probs, labels, spec, ev.id_distance, required)
        if verdict.feasible:
            Tq = _quantize(ev.T)
            dist = float(np.sum((Tq - image) ** 2))
            if dist < best_dist and check_constraints(net, image, Tq, spec, labels,
                                                      required_margin=required).feasible:
                best_T, best_w, best_dist = Tq, w.copy(), dist
                if first is None:
                    first = it
        if it < spec.iterations:
            w, state = adam_step(state, w, grad)

    success = best_T is not None
    T_out, w_out = (best_T, best_w) if success else (_quantize(last.T), w)
    dist = float(np.sum((T_out - image) ** 2))
    post_probs = net.predict_proba(T_out)
    pre_probs = net.predict_proba(image)
    attrs = []
    for a, name in enumerate(net.schema.names):
        role = "suppress" if a in spec.suppress else "preserve" if a in spec.preserve else "free"
        attrs.append({
            "name": name, "role": role, "true": labels[a],
            "pre_class": int(np.argmax(pre_probs[a])), "pre_score": float(pre_probs[a].max()),
            "pre_true_score": float(pre_probs[a][labels[a]]),
            "post_class": int(np.argmax(post_probs[a])), "post_score": float(post_probs[a].max()),
            "post_true_score": float(post_probs[a][labels[a]]),
            "post_margin": None if role == "free" else margin(
                post_probs[a], target_class(post_probs[a], labels[a], role, spec.suppress.get(a))),
        })
    identity = {}
    if spec.identity is not None:
        e = spec.identity.embedder
        identity["whitebox_post"] = float(np.linalg.norm(e.embed_numpy(image) - e.embed_numpy(T_out)))
        identity["whitebox_tau"] = spec.identity.tau
    if heldout is not None:
        identity["heldout_post"] = float(np.linalg.norm(heldout.embed_numpy(image) - heldout.embed_numpy(T_out)))
    return AttackResult(sample.id, success, T_out, w_out, dist, psnr(image, T_out), first,
                        spec.iterations, float(last.loss.item()), attrs, identity)


# -- batches ------------------------------------------------------------------

@dataclass
class BatchResult:
    results: list[AttackResult]
    summary: dict
    spec: dict


_WORKER: dict = {}


def _worker_init(net, spec, heldout):
    _WORKER.update(net=net, spec=spec, heldout=heldout)


def _worker_run(sample):
    return run_attack(_WORKER["net"], sample, _WORKER["spec"], _WORKER["heldout"])


def summarize(results: list[AttackResult], spec: AttackSpec, schema: AttributeSchema) -> dict:
    n = len(results)
    ok = [r for r in results if r.success]
    out = {
        "attacked": n,
        "successes": len(ok),
        "success_rate": sum(r.success for r in results) / n if n else 0.0,
        "mean_distortion": float(np.mean([r.distortion for r in results])) if n else None,
        "mean_distortion_success": float(np.mean([r.distortion for r in ok])) if ok else None,
        "mean_psnr_success": _json_float(float(np.mean([r.psnr for r in ok]))) if ok else None,
        "mean_psnr": _json_float(float(np.mean([r.psnr for r in results]))) if n else None,
        "attributes": {},
    }
    for a in spec.constrained:
        name = schema.names[a]
        rows = [r.attributes[a] for r in results]
        if a in spec.suppress:
            tgt = spec.suppress[a]
            hit = [(x["post_class"] != x["true"]) if tgt is None else (x["post_class"] == tgt) for x in rows]
            out["attributes"][name] = {"role": "suppress", "flip_rate": float(np.mean(hit))}
        else:
            kept = [x["post_class"] == x["true"] for x in rows]
            out["attributes"][name] = {"role": "preserve", "retention_rate": float(np.mean(kept))}
    return out


def batch_attack(samples: Sequence[LabeledSample], spec: AttackSpec, net: AttributeNet,
                 heldout: EmbeddingNet | None = None, jobs: int = 1) -> BatchResult:
    """Attack every sample the net classifies correctly on the constrained attributes."""
    if not samples:
        raise NoEligibleSamplesError("no samples in split")
    spec.validate(net.schema)
    keep = [s for s in samples if not eligible(net, np.asarray(s.image, dtype=np.float64), s.labels, spec)]
    if not keep:
        raise NoEligibleSamplesError("no eligible samples: the classifier misclassifies every candidate")
    log.info("attacking %d of %d samples", len(keep), len(samples))
    jobs = max(1, min(jobs, len(keep)))
    if jobs == 1:
        results = [run_attack(net, s, spec, heldout) for s in keep]
    else:
        with ProcessPoolExecutor(jobs, initializer=_worker_init, initargs=(net, spec, heldout)) as pool:
            results = list(pool.map(_worker_run, keep, chunksize=max(1, len(keep) // (4 * jobs))))
    summary = summarize(results, spec, net.schema)
    summary.update(candidates=len(samples), eligible=len(keep), filtered_out=len(samples) - len(keep))
    return BatchResult(results, summary, spec.describe(net.schema))


def default_jobs() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


# -- persistence --------------------------------------------------------------

def save_results(batch: BatchResult, directory) -> Path:
    root = Path(directory)
    (root / "anonymized").mkdir(parents=True, exist_ok=True)
    (root / "perturbation").mkdir(parents=True, exist_ok=True)
    for r in batch.results:
        save_tensor(root / "anonymized" / f"{r.sample_id}.ten", r.T)
        save_tensor(root / "perturbation" / f"{r.sample_id}.ten", r.w)
    doc = {"spec": batch.spec, "summary": batch.summary, "samples": [r.summary_json() for r in batch.results]}
    (root / "results.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return root


def load_results(directory) -> tuple[dict, dict[str, np.ndarray]]:
    """``(results.json document, {sample id: anonymized image})``."""
    root = Path(directory)
    doc = json.loads((root / "results.json").read_text())
    images = {s["id"]: load_tensor(root / "anonymized" / f"{s['id']}.ten").astype(np.float64)
              for s in doc["samples"]}
    return doc, images
