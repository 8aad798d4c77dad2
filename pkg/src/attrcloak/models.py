"""Attribute classifier and identity embedders built on the autodiff core.

Both network families share an MLP trunk (flatten -> affine -> relu -> ...).
Parameters live in plain ``dict[str, np.ndarray]`` so the same forward code
serves training (parameters as tape variables) and attacks (parameters as
constants, no weight gradients computed).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .data import AttributeSchema, Dataset, DatasetError
from .optim import Adam
from .tensorio import TensorFormatError, load_tensor, save_tensor

log = logging.getLogger(__name__)

WHITEBOX = "whitebox"
HELDOUT = "heldout"
_EMBED_WIDTHS = {WHITEBOX: (256, 128), HELDOUT: (192, 96)}
_EMBED_SEED_OFFSET = {WHITEBOX: 0, HELDOUT: 7919}
EMBED_DIM = 64
# logit scale for the cosine-style identity head used during embedder training
ID_HEAD_SCALE = 10.0


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    # cross-entropy against (1 - eps) * onehot + eps / C; bounds the logit gap
    label_smoothing: float = 0.1

    def __post_init__(self):
        for name in ("epochs", "batch_size", "lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("TrainConfig.label_smoothing must lie in [0, 1)")


def _init_params(rng: np.random.Generator, sizes: list[tuple[str, int, int]]) -> dict[str, np.ndarray]:
    params = {}
    for name, fan_in, fan_out in sizes:
        params[f"{name}.W"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        params[f"{name}.b"] = np.zeros(fan_out)
    return params


def _f32(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    # weights are persisted as float32; keep the in-memory copy on the same grid
    return {k: v.astype(np.float32).astype(np.float64) for k, v in params.items()}


def _trunk(x, p: Mapping, widths, n_in: int):
    lead = x.dims[:-3] if x.value.ndim > 3 else ()
    h = ad.reshape(x, (*lead, n_in))
    for i in range(len(widths)):
        h = ad.relu(ad.affine(h, p[f"trunk{i}.W"], p[f"trunk{i}.b"]))
    return h


@dataclass
class AttributeNet:
    schema: AttributeSchema
    input_shape: tuple[int, int, int]
    params: dict[str, np.ndarray]
    hidden: tuple[int, ...] = (256, 128)
    seed: int = 0

    @classmethod
    def init(cls, schema: AttributeSchema, input_shape, seed: int = 0, hidden=(256, 128),
             zero: bool = False) -> "AttributeNet":
        n_in = int(np.prod(input_shape))
        sizes, prev = [], n_in
        for i, w in enumerate(hidden):
            sizes.append((f"trunk{i}", prev, w))
            prev = w
        for a in schema.attributes:
            sizes.append((f"head.{a.name}", prev, a.classes))
        params = _init_params(np.random.default_rng([seed, 11]), sizes)
        if zero:
            params = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(schema, tuple(input_shape), params, tuple(hidden), seed)

    @property
    def n_in(self) -> int:
        return int(np.prod(self.input_shape))

    def logits(self, x, params: Mapping | None = None) -> list[ad.Tensor]:
        p = self.params if params is None else params
        x = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
        if tuple(x.dims[-3:]) != self.input_shape:
            raise ad.ShapeError("forward_attributes", tuple(x.dims), self.input_shape)
        h = _trunk(x, p, self.hidden, self.n_in)
        return [ad.affine(h, p[f"head.{a.name}.W"], p[f"head.{a.name}.b"]) for a in self.schema.attributes]

    def forward(self, x, params: Mapping | None = None) -> list[ad.Tensor]:
        return [ad.softmax(z) for z in self.logits(x, params)]

    def predict_proba(self, images: np.ndarray) -> list[np.ndarray]:
        """Per-attribute probability arrays for a batch (or a single image)."""
        return [t.value for t in self.forward(np.asarray(images, dtype=np.float64))]

    def predict(self, images: np.ndarray) -> np.ndarray:
        probs = self.predict_proba(images)
        return np.stack([p.argmax(axis=-1) for p in probs], axis=-1)


def forward_attributes(net: AttributeNet, image) -> list[ad.Tensor]:
    return net.forward(image)


@dataclass
class EmbeddingNet:
    input_shape: tuple[int, int, int]
    n_subjects: int
    params: dict[str, np.ndarray]
    variant: str = WHITEBOX
    hidden: tuple[int, ...] = (256, 128)
    embed_dim: int = EMBED_DIM
    seed: int = 0

    @classmethod
    def init(cls, input_shape, n_subjects: int, variant: str = WHITEBOX, seed: int = 0) -> "EmbeddingNet":
        if variant not in _EMBED_WIDTHS:
            raise ValueError(f"unknown embedder variant {variant!r}")
        hidden = _EMBED_WIDTHS[variant]
        n_in = int(np.prod(input_shape))
        sizes, prev = [], n_in
        for i, w in enumerate(hidden):
            sizes.append((f"trunk{i}", prev, w))
            prev = w
        sizes += [("embed", prev, EMBED_DIM), ("idhead", EMBED_DIM, n_subjects)]
        rng = np.random.default_rng([seed + _EMBED_SEED_OFFSET[variant], 13])
        return cls(tuple(input_shape), n_subjects, _init_params(rng, sizes), variant, hidden, EMBED_DIM, seed)

    @property
    def n_in(self) -> int:
        return int(np.prod(self.input_shape))

    def embed(self, x, params: Mapping | None = None) -> ad.Tensor:
        p = self.params if params is None else params
        x = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
        if tuple(x.dims[-3:]) != self.input_shape:
            raise ad.ShapeError("embed", tuple(x.dims), self.input_shape)
        h = _trunk(x, p, self.hidden, self.n_in)
        return ad.l2_normalize(ad.affine(h, p["embed.W"], p["embed.b"]))

    def identity_logits(self, x, params: Mapping | None = None) -> ad.Tensor:
        p = self.params if params is None else params
        e = self.embed(x, p)
        return ad.affine(ad.scale(e, ID_HEAD_SCALE), p["idhead.W"], p["idhead.b"])

    def embed_numpy(self, images: np.ndarray) -> np.ndarray:
        return self.embed(np.asarray(images, dtype=np.float64)).value


# -- training -----------------------------------------------------------------

def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _fit(params: dict[str, np.ndarray], loss_fn, n: int, config: TrainConfig) -> float:
    opt = Adam(lr=config.lr)
    rng = np.random.default_rng([config.seed, 101])
    last = float("nan")
    for epoch in range(config.epochs):
        total, seen = 0.0, 0
        for idx in _batches(n, config.batch_size, rng):
            with ad.Tape() as tape:
                p = {k: tape.variable(v) for k, v in params.items()}
                loss = loss_fn(p, idx)
                grads = tape.backward(loss)
            opt.step(params, {k: grads[t] for k, t in p.items()})
            total += loss.item() * len(idx)
            seen += len(idx)
        last = total / seen
        log.debug("epoch %d loss %.6f", epoch, last)
    return last


def _cross_entropy(log_probs: ad.Tensor, targets: np.ndarray, eps: float) -> ad.Tensor:
    """Mean smoothed cross-entropy of a (batch, C) log-probability tensor."""
    nll = ad.scale(ad.mean(ad.gather(log_probs, targets)), -(1.0 - eps))
    if eps == 0.0:
        return nll
    # (1/B) sum_b (eps/C) sum_c -log p = -eps * mean over all entries
    return ad.add(nll, ad.scale(ad.mean(log_probs), -eps))


def _require(dataset: Dataset, split: str) -> None:
    if not dataset.splits.get(split):
        raise DatasetError(f"dataset has an empty {split!r} split")


def attribute_accuracy(net: AttributeNet, images: np.ndarray, labels: np.ndarray) -> list[float]:
    pred = net.predict(images)
    return [float(np.mean(pred[:, i] == labels[:, i])) for i in range(labels.shape[1])]


def train_attribute_net(dataset: Dataset, config: TrainConfig | None = None,
                        splits: tuple[str, ...] = ("train",)):
    """Fit the multi-head classifier on ``splits``; returns ``(net, report)``."""
    config = config or TrainConfig()
    for s in splits:
        _require(dataset, s)
    x = np.concatenate([dataset.images(s) for s in splits])
    y = np.concatenate([dataset.labels(s) for s in splits])
    net = AttributeNet.init(dataset.schema, x.shape[1:], seed=config.seed)

    def loss_fn(p, idx):
        heads = [ad.log_softmax(z) for z in net.logits(x[idx], p)]
        terms = [_cross_entropy(h, y[idx, i], config.label_smoothing) for i, h in enumerate(heads)]
        return ad.total(ad.concat([ad.reshape(t, (1,)) for t in terms]))

    final_loss = _fit(net.params, loss_fn, len(x), config)
    net.params = _f32(net.params)
    report = {"final_loss": final_loss, "attributes": {}}
    train_acc = attribute_accuracy(net, x, y)
    test_acc = (attribute_accuracy(net, dataset.images("test"), dataset.labels("test"))
                if dataset.splits.get("test") else [None] * dataset.schema.k)
    for i, name in enumerate(dataset.schema.names):
        report["attributes"][name] = {"train_accuracy": train_acc[i], "test_accuracy": test_acc[i]}
    return net, report


def train_embedding_net(dataset: Dataset, config: TrainConfig | None = None, variant: str = WHITEBOX,
                        splits: tuple[str, ...] = ("train", "gallery")):
    """Train an identity classifier; its normalized penultimate layer is the embedding."""
    config = config or TrainConfig()
    for s in splits:
        _require(dataset, s)
    x = np.concatenate([dataset.images(s) for s in splits])
    subj = np.concatenate([dataset.subjects(s) for s in splits])
    ids = np.unique(subj)
    if len(ids) < 2:
        raise DatasetError("embedding training needs at least 2 subjects")
    n_subjects = int(max(dataset.subjects(s).max() for s in splits)) + 1
    net = EmbeddingNet.init(x.shape[1:], n_subjects, variant=variant, seed=config.seed)

    def loss_fn(p, idx):
        return _cross_entropy(ad.log_softmax(net.identity_logits(x[idx], p)), subj[idx], config.label_smoothing)

    final_loss = _fit(net.params, loss_fn, len(x), config)
    net.params = _f32(net.params)
    return net, {"final_loss": final_loss, "variant": variant}


# -- identity matching --------------------------------------------------------

def identity_distance(e1, e2) -> float:
    a, b = np.asarray(e1, dtype=np.float64), np.asarray(e2, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"embedding dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(d2, 0.0))


def pair_distances(emb: np.ndarray, subjects: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Genuine and impostor distances over all unordered pairs i < j."""
    d = pairwise_distances(emb, emb)
    iu, ju = np.triu_indices(len(emb), k=1)
    same = subjects[iu] == subjects[ju]
    return d[iu, ju][same], d[iu, ju][~same]


@dataclass
class MatchThreshold:
    tau: float
    eer: float
    far: float
    frr: float
    split: str = "train"
    genuine_pairs: int = 0
    impostor_pairs: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)


def eer_threshold(genuine: np.ndarray, impostor: np.ndarray) -> MatchThreshold:
    """Distance threshold where FAR (impostor <= t) and FRR (genuine > t) meet.

    Candidates are the observed distances; the smallest |FAR - FRR| wins, and
    among equal gaps the lowest threshold. EER is reported as (FAR + FRR) / 2.
    """
    g = np.sort(np.asarray(genuine, dtype=np.float64))
    imp = np.sort(np.asarray(impostor, dtype=np.float64))
    if g.size == 0:
        raise ValueError("no genuine pairs")
    if imp.size == 0:
        raise ValueError("no impostor pairs")
    cand = np.unique(np.concatenate([g, imp]))
    fa = np.searchsorted(imp, cand, side="right").astype(np.int64)
    fr = g.size - np.searchsorted(g, cand, side="right").astype(np.int64)
    # |fa/I - fr/G| compared exactly as integers so ties are not decided by rounding
    gap = np.abs(fa * g.size - fr * imp.size)
    best = int(np.flatnonzero(gap == gap.min())[0])
    far, frr = fa[best] / imp.size, fr[best] / g.size
    return MatchThreshold(float(cand[best]), float((far + frr) / 2), float(far), float(frr),
                          genuine_pairs=int(g.size), impostor_pairs=int(imp.size))


def calibrate_threshold(net: EmbeddingNet, dataset: Dataset, split: str = "train") -> MatchThreshold:
    _require(dataset, split)
    emb = net.embed_numpy(dataset.images(split))
    genuine, impostor = pair_distances(emb, dataset.subjects(split))
    th = eer_threshold(genuine, impostor)
    th.split = split
    return th


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(net, directory) -> Path:
    root = Path(directory)
    (root / "weights").mkdir(parents=True, exist_ok=True)
    for name, arr in net.params.items():
        save_tensor(root / "weights" / f"{name}.ten", arr)
    meta = {"params": {k: list(v.shape) for k, v in net.params.items()}, "seed": net.seed,
            "input_shape": list(net.input_shape), "hidden": list(net.hidden)}
    if isinstance(net, AttributeNet):
        meta.update(kind="attribute", schema=net.schema.to_json(), schema_hash=net.schema.hash())
    else:
        meta.update(kind="embedding", variant=net.variant, n_subjects=net.n_subjects, embed_dim=net.embed_dim)
    (root / "model.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return root


def load_checkpoint(directory):
    root = Path(directory)
    mpath = root / "model.json"
    if not mpath.is_file():
        raise CheckpointError(f"no model.json in {root}")
    meta = json.loads(mpath.read_text())
    if meta.get("kind") == "attribute":
        schema = AttributeSchema.from_json(meta["schema"])
        if schema.hash() != meta.get("schema_hash"):
            raise CheckpointError(f"{mpath}: schema hash does not match stored schema")
        net = AttributeNet.init(schema, tuple(meta["input_shape"]), seed=meta["seed"], hidden=tuple(meta["hidden"]))
    elif meta.get("kind") == "embedding":
        net = EmbeddingNet.init(tuple(meta["input_shape"]), meta["n_subjects"], meta["variant"], seed=meta["seed"])
    else:
        raise CheckpointError(f"{mpath}: unknown model kind {meta.get('kind')!r}")
    expected = {k: tuple(v.shape) for k, v in net.params.items()}
    stored = {k: tuple(v) for k, v in meta["params"].items()}
    if expected != stored:
        raise CheckpointError(f"{mpath}: parameter shapes do not match the declared architecture")
    params = {}
    for name, shape in expected.items():
        path = root / "weights" / f"{name}.ten"
        if not path.is_file():
            raise CheckpointError(f"checkpoint is missing weights for parameter {name!r}")
        try:
            arr = load_tensor(path)
        except TensorFormatError as exc:
            raise CheckpointError(f"parameter {name!r}: {exc.reason}") from None
        if arr.shape != shape:
            raise CheckpointError(f"parameter {name!r}: shape {arr.shape} != {shape}")
        params[name] = arr.astype(np.float64)
    net.params = params
    return net


def check_schema(net: AttributeNet, schema: AttributeSchema) -> None:
    if net.schema.hash() != schema.hash():
        raise CheckpointError(f"checkpoint schema {net.schema.hash()} does not match dataset schema {schema.hash()}")
