"""Synthetic face-like dataset with banded attribute signals.

Each image is ``clamp(0.5 * texture(subject) + sum_i pattern(i, class_i) + noise)``.
The subject texture is a smooth random field; pattern ``(i, c)`` is a fixed
+/-alpha sign pattern living only in horizontal band ``i``. Every random draw
comes from a generator keyed on ``(seed, stream, ...)`` so any sample can be
rebuilt on its own.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensorio import TensorFormatError, load_tensor, save_tensor

SPLITS = ("train", "test", "gallery", "probe")

_TEXTURE, _PATTERN, _LABELS, _NOISE = 1, 2, 3, 4


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Attribute:
    name: str
    classes: int


@dataclass(frozen=True)
class AttributeSchema:
    attributes: tuple[Attribute, ...]

    def __post_init__(self):
        if not self.attributes:
            raise DatasetError("schema needs at least one attribute")
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise DatasetError(f"duplicate attribute names in {names}")
        for a in self.attributes:
            if a.classes < 2:
                raise DatasetError(f"attribute {a.name!r} needs >= 2 classes, got {a.classes}")

    @classmethod
    def of(cls, *pairs: tuple[str, int]) -> "AttributeSchema":
        return cls(tuple(Attribute(n, int(c)) for n, c in pairs))

    @classmethod
    def from_json(cls, items) -> "AttributeSchema":
        return cls(tuple(Attribute(d["name"], int(d["classes"])) for d in items))

    def to_json(self) -> list[dict]:
        return [{"name": a.name, "classes": a.classes} for a in self.attributes]

    @property
    def k(self) -> int:
        return len(self.attributes)

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    @property
    def class_counts(self) -> list[int]:
        return [a.classes for a in self.attributes]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown attribute {name!r}; schema has {self.names}") from None

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


DEFAULT_SCHEMA = AttributeSchema.of(
    ("gender", 2), ("attractive", 2), ("smiling", 2), ("makeup", 2), ("cheekbones", 2)
)


@dataclass(frozen=True)
class SyntheticSpec:
    height: int = 32
    width: int = 32
    channels: int = 3
    subjects: int = 40
    images_per_subject: int = 10
    train_per_subject: int = 3
    schema: AttributeSchema = DEFAULT_SCHEMA
    alpha: float = 0.03
    sigma: float = 0.01
    overlap: float = 0.0
    seed: int = 0
    texture_grid: int = 4
    texture_contrast: float = 0.2

    def validate(self) -> None:
        if self.subjects <= 0 or self.images_per_subject <= 0:
            raise DatasetError("need at least one subject and one image per subject")
        if min(self.height, self.width, self.channels) <= 0:
            raise DatasetError("image dimensions must be positive")
        if not 0.0 <= self.overlap < 1.0:
            raise DatasetError(f"band overlap must lie in [0, 1), got {self.overlap}")
        if self.height < self.schema.k:
            raise DatasetError(f"height {self.height} cannot hold {self.schema.k} bands")
        if not 0 <= self.train_per_subject < self.images_per_subject:
            raise DatasetError("train_per_subject must leave room for the gallery image")
        if self.texture_grid < 2:
            raise DatasetError("texture_grid must be >= 2")
        if not 0.0 <= self.texture_contrast < 1.0:
            raise DatasetError(f"texture_contrast must lie in [0, 1), got {self.texture_contrast}")
        if self.alpha < 0 or self.sigma < 0:
            raise DatasetError("alpha and sigma must be nonnegative")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    def to_json(self) -> dict:
        d = asdict(self)
        d["schema"] = self.schema.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "schema" in d:
            d["schema"] = AttributeSchema.from_json(d["schema"])
        return cls(**d)


@dataclass(eq=False)
class LabeledSample:
    id: str
    image: np.ndarray  # H x W x C, float32 in [0, 1]
    labels: tuple[int, ...]
    subject: int
    split: str

    def __eq__(self, other):
        if not isinstance(other, LabeledSample):
            return NotImplemented
        return (self.id == other.id and self.labels == other.labels
                and self.subject == other.subject and self.split == other.split
                and self.image.dtype == other.image.dtype
                and np.array_equal(self.image, other.image))


@dataclass(eq=False)
class Dataset:
    spec: SyntheticSpec | None
    schema: AttributeSchema
    samples: list[LabeledSample]
    splits: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.splits:
            self.splits = {s: [] for s in SPLITS}
            for i, smp in enumerate(self.samples):
                self.splits[smp.split].append(i)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.spec == other.spec and self.schema == other.schema
                and self.splits == other.splits and self.samples == other.samples)

    def split(self, name: str) -> list[LabeledSample]:
        if name not in SPLITS:
            raise DatasetError(f"unknown split {name!r}")
        return [self.samples[i] for i in self.splits.get(name, [])]

    def images(self, name: str) -> np.ndarray:
        return np.stack([s.image for s in self.split(name)]).astype(np.float64)

    def labels(self, name: str) -> np.ndarray:
        return np.array([s.labels for s in self.split(name)], dtype=np.int64)

    def subjects(self, name: str) -> np.ndarray:
        return np.array([s.subject for s in self.split(name)], dtype=np.int64)

    def by_id(self, sample_id: str) -> LabeledSample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def band_rows(spec: SyntheticSpec, i: int) -> tuple[int, int]:
    """Row range [lo, hi) of attribute ``i``'s band, widened by the overlap fraction."""
    k, h = spec.schema.k, spec.height
    lo, hi = (i * h) // k, ((i + 1) * h) // k
    pad = int(round(spec.overlap * (hi - lo)))
    return max(0, lo - pad), min(h, hi + pad)


def _upsample(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of a (g0, g1, C) grid to (h, w, C), corners aligned."""
    g0, g1 = grid.shape[:2]
    ys, xs = np.linspace(0, g0 - 1, h), np.linspace(0, g1 - 1, w)
    y0 = np.minimum(ys.astype(int), g0 - 2)
    x0 = np.minimum(xs.astype(int), g1 - 2)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x0 + 1] * fx
    bot = grid[y0 + 1][:, x0] * (1 - fx) + grid[y0 + 1][:, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def identity_texture(spec: SyntheticSpec, subject: int) -> np.ndarray:
    """Smooth per-subject field with values in [1 - contrast, 1 + contrast]."""
    g = spec.texture_grid
    grid = _rng(spec.seed, _TEXTURE, subject).uniform(-1.0, 1.0, size=(g, g, spec.channels))
    return 1.0 + spec.texture_contrast * _upsample(grid, spec.height, spec.width)


def attribute_pattern(spec: SyntheticSpec, attr: int, cls: int) -> np.ndarray:
    pat = np.zeros(spec.shape)
    lo, hi = band_rows(spec, attr)
    signs = _rng(spec.seed, _PATTERN, attr, cls).integers(0, 2, size=(hi - lo, spec.width, spec.channels))
    pat[lo:hi] = spec.alpha * (2.0 * signs - 1.0)
    return pat


def render(spec: SyntheticSpec, subject: int, labels, noise_key: tuple[int, ...]) -> np.ndarray:
    img = 0.5 * identity_texture(spec, subject)
    for i, c in enumerate(labels):
        img = img + attribute_pattern(spec, i, int(c))
    img = img + _rng(spec.seed, _NOISE, *noise_key).normal(0.0, spec.sigma, size=spec.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _split_for(spec: SyntheticSpec, k: int) -> str:
    if k == 0:
        return "gallery"
    if k <= spec.train_per_subject:
        return "train"
    return "test"


def generate_dataset(spec: SyntheticSpec) -> Dataset:
    spec.validate()
    counts = spec.schema.class_counts
    samples = []
    for s in range(spec.subjects):
        for k in range(spec.images_per_subject):
            rng = _rng(spec.seed, _LABELS, s, k)
            labels = tuple(int(rng.integers(0, c)) for c in counts)
            samples.append(LabeledSample(
                id=f"s{s:03d}_{k:02d}",
                image=render(spec, s, labels, (s, k)),
                labels=labels,
                subject=s,
                split=_split_for(spec, k),
            ))
    return Dataset(spec, spec.schema, samples)


def save_dataset(dataset: Dataset, directory) -> Path:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for smp in dataset.samples:
        rel = f"images/{smp.id}.ten"
        save_tensor(root / rel, smp.image)
        entries.append({"id": smp.id, "subject": smp.subject, "labels": list(smp.labels),
                        "split": smp.split, "file": rel})
    manifest = {
        "format": "attrcloak-dataset/1",
        "spec": dataset.spec.to_json() if dataset.spec else None,
        "schema": dataset.schema.to_json(),
        "schema_hash": dataset.schema.hash(),
        "seed": dataset.spec.seed if dataset.spec else None,
        "samples": entries,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return root


def load_dataset(directory) -> Dataset:
    root = Path(directory)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DatasetError(f"no manifest.json in {root}")
    try:
        manifest = json.loads(mpath.read_text())
        schema = AttributeSchema.from_json(manifest["schema"])
        spec = SyntheticSpec.from_json(manifest["spec"]) if manifest.get("spec") else None
        entries = manifest["samples"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"malformed manifest {mpath}: {exc}") from None
    if spec is not None and spec.schema != schema:
        raise DatasetError("manifest spec schema disagrees with manifest schema")
    samples = []
    for e in entries:
        path = root / e["file"]
        if not path.is_file():
            raise DatasetError(f"manifest lists missing tensor file {e['file']}")
        try:
            img = load_tensor(path)
        except TensorFormatError as exc:
            raise DatasetError(f"bad tensor file {e['file']}: {exc.reason}") from None
        labels = tuple(int(x) for x in e["labels"])
        if len(labels) != schema.k or any(not 0 <= c < n for c, n in zip(labels, schema.class_counts)):
            raise DatasetError(f"sample {e['id']}: labels {labels} do not fit schema")
        if spec is not None and img.shape != spec.shape:
            raise DatasetError(f"sample {e['id']}: image shape {img.shape} != spec shape {spec.shape}")
        if e["split"] not in SPLITS:
            raise DatasetError(f"sample {e['id']}: unknown split {e['split']!r}")
        samples.append(LabeledSample(e["id"], img, labels, int(e["subject"]), e["split"]))
    return Dataset(spec, schema, samples)
