"""Small hand-built models shared by the attack tests and the acceptance gate."""
from __future__ import annotations

import numpy as np

from attrcloak import autodiff as ad
from attrcloak.anonymize import AttackSpec, IdentityTerm, init_perturbation, total_objective
from attrcloak.data import AttributeSchema, LabeledSample
from attrcloak.models import AttributeNet, EmbeddingNet

# two-pixel logistic model: logit gap z0 - z1 = 4 (x0 - x1) + 0.4
LOGISTIC_W = np.array([[2.0, -2.0], [-2.0, 2.0]])
LOGISTIC_B = np.array([0.2, -0.2])
LOGISTIC_IMAGE = np.array([0.6, 0.4]).reshape(1, 2, 1)


def logistic_net() -> AttributeNet:
    net = AttributeNet.init(AttributeSchema.of(("a", 2)), (1, 2, 1), hidden=())
    net.params = {"head.a.W": LOGISTIC_W.copy(), "head.a.b": LOGISTIC_B.copy()}
    return net


def logistic_sample() -> LabeledSample:
    return LabeledSample("toy", LOGISTIC_IMAGE.astype(np.float32), (0,), 0, "test")


def logistic_grid_optimum(step: float = 0.01, bound: float = 3.0) -> float:
    """Smallest ||T - I||^2 over a w grid among images the model assigns to class 1."""
    g = np.round(np.arange(-bound, bound + step / 2, step), 10)
    w0, w1 = np.meshgrid(g, g, indexing="ij")
    x = LOGISTIC_IMAGE.reshape(-1)
    t0 = 0.5 * (np.tanh(x[0] + w0) + 1)
    t1 = 0.5 * (np.tanh(x[1] + w1) + 1)
    z0 = LOGISTIC_W[0, 0] * t0 + LOGISTIC_W[1, 0] * t1 + LOGISTIC_B[0]
    z1 = LOGISTIC_W[0, 1] * t0 + LOGISTIC_W[1, 1] * t1 + LOGISTIC_B[1]
    d = (t0 - x[0]) ** 2 + (t1 - x[1]) ** 2
    return float(d[z1 > z0].min())


def table_net(*tables) -> AttributeNet:
    """Constant-output net whose heads return the given probability tables."""
    schema = AttributeSchema.of(*((f"h{i}", len(t)) for i, t in enumerate(tables)))
    net = AttributeNet.init(schema, (1, 1, 1), hidden=())
    net.params = {}
    for i, t in enumerate(tables):
        net.params[f"head.h{i}.W"] = np.zeros((1, len(t)))
        net.params[f"head.h{i}.b"] = np.log(np.asarray(t, dtype=np.float64))
    return net


SMALL_SCHEMA = AttributeSchema.of(("s", 2), ("p", 3), ("q", 2))
SMALL_SHAPE = (4, 4, 1)


def small_instance(seed: int, identity: bool = True, confidence: float = 0.05):
    """Random 4x4x1 image, small nets and a perturbation away from w0."""
    rng = np.random.default_rng(seed)
    image = rng.uniform(0.05, 0.95, SMALL_SHAPE)
    net = AttributeNet.init(SMALL_SCHEMA, SMALL_SHAPE, seed=seed, hidden=(8,))
    net.params = {k: v.astype(np.float64) * 3.0 for k, v in net.params.items()}
    ident = None
    if identity:
        emb = EmbeddingNet.init(SMALL_SHAPE, 3, seed=seed)
        ident = IdentityTerm(emb, tau=0.5, weight=0.7)
    labels = tuple(int(x) for x in rng.integers(0, 2, 3))
    spec = AttackSpec(suppress={0: None}, preserve={1, 2}, confidence=confidence, distortion_weight=1.3,
                      identity=ident)
    w = init_perturbation(image) + rng.normal(0, 0.3, SMALL_SHAPE)
    return image, net, spec, labels, w


def objective_and_gradient(image, net, spec, labels, w):
    with ad.Tape() as tape:
        wv = tape.variable(w)
        loss = total_objective(image, wv, spec, net, labels)
        g = tape.backward(loss)[wv]
    return loss.item(), g


def objective_value(image, net, spec, labels, w) -> float:
    return total_objective(image, w, spec, net, labels).item()


# small end-to-end config: trains in seconds and still has genuine and impostor pairs
TINY = {
    "name": "tiny", "jobs": 1,
    "data": {"height": 10, "width": 8, "channels": 1, "subjects": 6, "images_per_subject": 8,
             "train_per_subject": 3, "alpha": 0.3, "sigma": 0.03},
    "train": {"epochs": 40},
    "attack": {"suppress": ["gender"], "preserve": ["makeup"], "iterations": 60},
}
