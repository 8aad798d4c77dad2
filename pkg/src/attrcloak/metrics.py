"""Evaluation metrics: confusion matrices, score histograms, CMC, ROC, image quality."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ConfusionMatrix:
    attribute: str
    counts: np.ndarray  # (true class, predicted class)

    @property
    def percent(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            pct = np.where(rows > 0, 100.0 * self.counts / np.maximum(rows, 1), 0.0)
        return pct

    def to_json(self) -> dict:
        return {"attribute": self.attribute, "counts": self.counts.tolist(), "percent": self.percent.tolist()}


def confusion_matrix(predictions, truths, attribute: str = "", classes: int | None = None) -> ConfusionMatrix:
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truths, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"confusion_matrix: {pred.size} predictions vs {true.size} truths")
    n = classes if classes is not None else int(max(pred.max(initial=0), true.max(initial=0))) + 1
    if pred.size and (pred.min() < 0 or true.min() < 0 or pred.max() >= n or true.max() >= n):
        raise ValueError(f"confusion_matrix: labels outside [0, {n})")
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return ConfusionMatrix(attribute, counts)


@dataclass
class Histogram:
    label: str
    edges: np.ndarray
    counts: np.ndarray

    def to_json(self) -> dict:
        return {"label": self.label, "edges": self.edges.tolist(), "counts": self.counts.tolist()}


def score_histogram(scores, bins: int = 10, label: str = "") -> Histogram:
    """Equal-width histogram over [0, 1]; a score of exactly 1 lands in the last bin."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("score_histogram: empty input")
    if bins < 2:
        raise ValueError("score_histogram: need at least 2 bins")
    if s.min() < 0 or s.max() > 1:
        raise ValueError("score_histogram: scores must lie in [0, 1]")
    edges = np.linspace(0.0, 1.0, bins + 1)
    # bin k holds edges[k] <= s < edges[k + 1], so counts agree with the reported edges
    idx = np.minimum(np.searchsorted(edges, s, side="right") - 1, bins - 1)
    return Histogram(label, edges, np.bincount(idx, minlength=bins))


def score_histograms(series: dict[str, list[float]], bins: int = 10) -> dict[str, Histogram]:
    return {name: score_histogram(vals, bins, name) for name, vals in series.items()}


@dataclass
class CmcCurve:
    rates: np.ndarray  # rates[r - 1] = identification rate at rank r

    @property
    def rank1(self) -> float:
        return float(self.rates[0])

    def to_json(self) -> dict:
        return {"ranks": list(range(1, len(self.rates) + 1)), "rates": self.rates.tolist()}


def _distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(-1))


def cmc_curve(gallery_emb, gallery_ids, probe_emb, probe_ids) -> CmcCurve:
    g = np.asarray(gallery_emb, dtype=np.float64)
    p = np.asarray(probe_emb, dtype=np.float64)
    gid = np.asarray(gallery_ids)
    pid = np.asarray(probe_ids)
    if len(np.unique(gid)) != len(gid):
        raise ValueError("cmc_curve: gallery must hold one entry per subject")
    missing = sorted(set(pid.tolist()) - set(gid.tolist()))
    if missing:
        raise ValueError(f"cmc_curve: probe subjects absent from gallery: {missing[:5]}")
    d = _distances(p, g)
    order_ids = np.argsort(gid, kind="stable")
    ranks = np.empty(len(p), dtype=np.int64)
    for i in range(len(p)):
        # lexsort: last key is primary -> distance first, gallery id second
        order = np.lexsort((gid[order_ids], d[i, order_ids]))
        ranked = gid[order_ids][order]
        ranks[i] = int(np.flatnonzero(ranked == pid[i])[0]) + 1
    counts = np.bincount(ranks, minlength=len(g) + 1)[1:]
    return CmcCurve(np.cumsum(counts) / len(p))


@dataclass
class RocCurve:
    far: np.ndarray
    tar: np.ndarray
    thresholds: np.ndarray
    auc: float

    def to_json(self) -> dict:
        return {"far": self.far.tolist(), "tar": self.tar.tolist(),
                "thresholds": [None if not np.isfinite(t) else float(t) for t in self.thresholds],
                "auc": self.auc}


def roc_curve(genuine, impostor) -> RocCurve:
    """Distance ROC: a pair is accepted when its distance is <= the threshold.

    The sweep starts at (0, 0) (threshold -inf) and visits every distinct observed
    distance, so the trapezoid AUC equals P(genuine < impostor) + P(tie) / 2.
    """
    gen = np.sort(np.asarray(genuine, dtype=np.float64))
    imp = np.sort(np.asarray(impostor, dtype=np.float64))
    if gen.size == 0 or imp.size == 0:
        raise ValueError("roc_curve: genuine and impostor lists must be nonempty")
    thr = np.unique(np.concatenate([gen, imp]))
    tar = np.searchsorted(gen, thr, side="right") / gen.size
    far = np.searchsorted(imp, thr, side="right") / imp.size
    far = np.concatenate([[0.0], far])
    tar = np.concatenate([[0.0], tar])
    thr = np.concatenate([[-np.inf], thr])
    auc = float(np.sum(np.diff(far) * (tar[1:] + tar[:-1]) / 2.0))
    return RocCurve(far, tar, thr, auc)


def pairwise_auc(genuine, impostor) -> float:
    """P(genuine < impostor) + P(tie) / 2 by direct comparison of every pair."""
    gen = np.asarray(genuine, dtype=np.float64)
    imp = np.asarray(impostor, dtype=np.float64)
    less = (gen[:, None] < imp[None, :]).sum()
    ties = (gen[:, None] == imp[None, :]).sum()
    return float((less + 0.5 * ties) / (gen.size * imp.size))


def mse(original, anonymized) -> float:
    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(anonymized, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(original, anonymized) -> float:
    """PSNR in dB for unit dynamic range; +inf when the images are identical."""
    m = mse(original, anonymized)
    return math.inf if m == 0.0 else 10.0 * math.log10(1.0 / m)


@dataclass
class QualityStats:
    sq_l2: np.ndarray
    psnr: np.ndarray
    mse: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def summary(self) -> dict:
        out = {"count": int(self.sq_l2.size)}
        if self.sq_l2.size:
            out.update(
                sq_l2_mean=float(self.sq_l2.mean()), sq_l2_median=float(np.median(self.sq_l2)),
                sq_l2_min=float(self.sq_l2.min()),
                psnr_mean=float(np.mean(self.psnr)), psnr_median=float(np.median(self.psnr)),
                psnr_min=float(np.min(self.psnr)),
            )
        return out


def quality_stats(originals, anonymized) -> QualityStats:
    if len(originals) != len(anonymized):
        raise ValueError("quality_stats: unequal number of originals and anonymized images")
    sq, ps, ms = [], [], []
    for a, b in zip(originals, anonymized):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise ValueError(f"quality_stats: shape mismatch {a.shape} vs {b.shape}")
        sq.append(float(np.sum((a - b) ** 2)))
        ms.append(mse(a, b))
        ps.append(psnr(a, b))
    return QualityStats(np.array(sq), np.array(ps), np.array(ms))
