"""The four differentiable networks of the augmentation pipeline.

- Classifier: instance features -> predicted class distribution (the latent
  code the generator conditions on).
- Generator: (instance, annotator, predicted distribution, noise) -> a
  distribution over annotation labels.
- Discriminator: bilinear scorer sigma(u_r^T M_y v_n) over encoded annotator
  and instance vectors, with an optional label-correlation decoder that mixes
  the per-class bilinear matrices through the co-occurrence propagation
  matrix: M_hat_c = sum_c' P[c,c'] * M_c' * W.
- Auxiliary net: recovers the classifier's distribution from a generated
  annotation; shares the discriminator's encoders (same tensor objects).

All forwards accept plain numpy batches and return graph Tensors; every
output-layer weight starts at zero so freshly built classifier/generator/aux
nets emit exactly uniform distributions (the discriminator's class matrices
start random so its gradients are live from step one).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .data import CoocAdjacency
from .diffcore import ParamStore, Tensor


@dataclass(frozen=True)
class NetDims:
    """Width configuration shared by all four networks."""

    num_classes: int
    feature_dim: int
    annotator_dim: int
    noise_dim: int = 8
    clf_hidden: int = 128
    gen_hidden1: int = 64
    gen_hidden2: int = 128
    aux_hidden1: int = 64
    aux_hidden2: int = 128
    embed_dim: int = 32        # discriminator encoder output width
    class_embed_dim: int = 16  # low-dim embedding of the flattened class matrix
    dropout: float = 0.5
    lca_enabled: bool = True

    def __post_init__(self):
        for name in ("num_classes", "feature_dim", "annotator_dim", "noise_dim",
                     "clf_hidden", "gen_hidden1", "gen_hidden2", "aux_hidden1",
                     "aux_hidden2", "embed_dim", "class_embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


def _check_batch(x: np.ndarray, dim: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"{what} must have shape (batch, {dim}), got {x.shape}")
    return x


class Classifier:
    """One hidden ReLU layer (with dropout in train mode) into class logits."""

    def __init__(self, dims: NetDims, rng: np.random.Generator):
        self.dims = dims
        p = ParamStore()
        p.add("W1", dc.glorot_uniform(rng, (dims.feature_dim, dims.clf_hidden)))
        p.add("b1", np.zeros(dims.clf_hidden))
        p.add("W2", np.zeros((dims.clf_hidden, dims.num_classes)))
        p.add("b2", np.zeros(dims.num_classes))
        self.store = p

    def logits(self, x: np.ndarray, train_mode: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        x = _check_batch(x, self.dims.feature_dim, "classifier input")
        p = self.store
        h = dc.relu(dc.add(dc.matmul(Tensor(x), p["W1"]), p["b1"]))
        if train_mode and self.dims.dropout > 0.0:
            if rng is None:
                raise ValueError("train-mode classify needs an rng for dropout")
            h = dc.dropout(h, self.dims.dropout, rng)
        return dc.add(dc.matmul(h, p["W2"]), p["b2"])

    def probs(self, x, train_mode: bool = False, rng=None) -> Tensor:
        return dc.softmax(self.logits(x, train_mode, rng), axis=1)


class Generator:
    """Two ReLU layers over [x; e; zhat; noise] into annotation-label logits."""

    def __init__(self, dims: NetDims, rng: np.random.Generator):
        self.dims = dims
        d_in = dims.feature_dim + dims.annotator_dim + dims.num_classes + dims.noise_dim
        p = ParamStore()
        p.add("W1", dc.glorot_uniform(rng, (d_in, dims.gen_hidden1)))
        p.add("b1", np.zeros(dims.gen_hidden1))
        p.add("W2", dc.glorot_uniform(rng, (dims.gen_hidden1, dims.gen_hidden2)))
        p.add("b2", np.zeros(dims.gen_hidden2))
        p.add("W3", np.zeros((dims.gen_hidden2, dims.num_classes)))
        p.add("b3", np.zeros(dims.num_classes))
        self.store = p

    def draw_noise(self, rng: np.random.Generator, batch: int) -> np.ndarray:
        return rng.standard_normal((batch, self.dims.noise_dim))

    def logits(self, x, e, zhat, eps) -> Tensor:
        d = self.dims
        x = _check_batch(x, d.feature_dim, "generator instance input")
        e = _check_batch(e, d.annotator_dim, "generator annotator input")
        eps = _check_batch(eps, d.noise_dim, "generator noise")
        if not isinstance(zhat, Tensor):
            zhat = Tensor(_check_batch(zhat, d.num_classes, "generator zhat"))
        elif zhat.shape[1] != d.num_classes:
            raise ValueError(f"generator zhat must have width {d.num_classes}")
        p = self.store
        inp = dc.concat([Tensor(x), Tensor(e), zhat, Tensor(eps)], axis=1)
        h1 = dc.relu(dc.add(dc.matmul(inp, p["W1"]), p["b1"]))
        h2 = dc.relu(dc.add(dc.matmul(h1, p["W2"]), p["b2"]))
        return dc.add(dc.matmul(h2, p["W3"]), p["b3"])

    def distribution(self, x, e, zhat, eps) -> Tensor:
        return dc.softmax(self.logits(x, e, zhat, eps), axis=1)

    def log_distribution(self, x, e, zhat, eps) -> Tensor:
        return dc.log_softmax(self.logits(x, e, zhat, eps), axis=1)


class Discriminator:
    """Bilinear authenticity scorer with optional label-correlation mixing."""

    def __init__(self, dims: NetDims, rng: np.random.Generator):
        self.dims = dims
        c, m = dims.num_classes, dims.embed_dim
        p = ParamStore()
        p.add("Wu", dc.glorot_uniform(rng, (dims.annotator_dim, m)))
        p.add("bu", np.zeros(m))
        p.add("Wv", dc.glorot_uniform(rng, (dims.feature_dim, m)))
        p.add("bv", np.zeros(m))
        p.add("M", dc.glorot_uniform(rng, (c, m, m), fan_in=m, fan_out=m))
        # identity-initialized mixing keeps decoded matrices live at step one
        p.add("Wmix", np.eye(m))
        self.store = p

    def encode_annotators(self, e) -> Tensor:
        e = _check_batch(e, self.dims.annotator_dim, "discriminator annotator input")
        return dc.add(dc.matmul(Tensor(e), self.store["Wu"]), self.store["bu"])

    def encode_instances(self, x) -> Tensor:
        x = _check_batch(x, self.dims.feature_dim, "discriminator instance input")
        return dc.add(dc.matmul(Tensor(x), self.store["Wv"]), self.store["bv"])

    def decoded_matrices(self, adj: CoocAdjacency | None) -> Tensor:
        """Per-class bilinear matrices after optional correlation mixing."""
        c, m = self.dims.num_classes, self.dims.embed_dim
        mats = self.store["M"]
        if not self.dims.lca_enabled:
            return mats
        if adj is None:
            raise ValueError("label-correlation mixing needs a co-occurrence adjacency")
        prop = Tensor(adj.propagation)
        mixed = dc.matmul(prop, dc.reshape(mats, (c, m * m)))
        stacked = dc.reshape(mixed, (c * m, m))
        return dc.reshape(dc.matmul(stacked, self.store["Wmix"]), (c, m, m))

    def bilinear_score(self, x, e, y, adj: CoocAdjacency | None) -> Tensor:
        y = np.asarray(y, dtype=np.int64)
        if y.size and (y.min() < 0 or y.max() >= self.dims.num_classes):
            raise ValueError("class index out of range")
        u = self.encode_annotators(e)
        v = self.encode_instances(x)
        per_sample = dc.gather_rows(self.decoded_matrices(adj), y)
        return dc.rowwise_bilinear(u, per_sample, v)

    def score(self, x, e, y, adj: CoocAdjacency | None) -> Tensor:
        # clamp away float64 saturation so the output stays strictly inside (0,1)
        return dc.clamp(dc.sigmoid(self.bilinear_score(x, e, y, adj)),
                        1e-12, 1.0 - 1e-12)


class AuxNet:
    """Predicts the classifier's distribution from one annotation.

    Reuses the discriminator's encoder tensors (mutating those weights changes
    this net's outputs) plus a low-dim embedding of the annotation's decoded
    class matrix.
    """

    def __init__(self, dims: NetDims, rng: np.random.Generator, disc: Discriminator):
        self.dims = dims
        self.disc = disc
        m, ce = dims.embed_dim, dims.class_embed_dim
        d_in = 2 * m + ce
        p = ParamStore()
        p.add_tensor("Wu", disc.store["Wu"])
        p.add_tensor("bu", disc.store["bu"])
        p.add_tensor("Wv", disc.store["Wv"])
        p.add_tensor("bv", disc.store["bv"])
        p.add("Wembed", dc.glorot_uniform(rng, (m * m, ce)))
        p.add("bembed", np.zeros(ce))
        p.add("W1", dc.glorot_uniform(rng, (d_in, dims.aux_hidden1)))
        p.add("b1", np.zeros(dims.aux_hidden1))
        p.add("W2", dc.glorot_uniform(rng, (dims.aux_hidden1, dims.aux_hidden2)))
        p.add("b2", np.zeros(dims.aux_hidden2))
        p.add("W3", np.zeros((dims.aux_hidden2, dims.num_classes)))
        p.add("b3", np.zeros(dims.num_classes))
        self.store = p

    def own_store(self) -> ParamStore:
        """Parameters owned by this net only (encoders excluded)."""
        own = ParamStore()
        for name, t in self.store.items():
            if name not in ("Wu", "bu", "Wv", "bv"):
                own.add_tensor(name, t)
        return own

    def logits(self, x, e, y, adj: CoocAdjacency | None) -> Tensor:
        d = self.dims
        y = np.asarray(y, dtype=np.int64)
        if y.size and (y.min() < 0 or y.max() >= d.num_classes):
            raise ValueError("class index out of range")
        u = self.disc.encode_annotators(e)
        v = self.disc.encode_instances(x)
        c, m = d.num_classes, d.embed_dim
        flat = dc.reshape(self.disc.decoded_matrices(adj), (c, m * m))
        m_y = dc.add(dc.matmul(dc.gather_rows(flat, y), self.store["Wembed"]),
                     self.store["bembed"])
        inp = dc.concat([v, u, m_y], axis=1)
        h1 = dc.relu(dc.add(dc.matmul(inp, self.store["W1"]), self.store["b1"]))
        h2 = dc.relu(dc.add(dc.matmul(h1, self.store["W2"]), self.store["b2"]))
        return dc.add(dc.matmul(h2, self.store["W3"]), self.store["b3"])

    def posterior(self, x, e, y, adj) -> Tensor:
        return dc.softmax(self.logits(x, e, y, adj), axis=1)

    def log_posterior(self, x, e, y, adj) -> Tensor:
        return dc.log_softmax(self.logits(x, e, y, adj), axis=1)


@dataclass
class NetworkBundle:
    """All four parameter sets plus the co-occurrence adjacency they share."""

    dims: NetDims
    classifier: Classifier
    generator: Generator
    discriminator: Discriminator
    aux: AuxNet
    adjacency: CoocAdjacency | None

    def stores(self) -> dict[str, ParamStore]:
        return {
            "classifier": self.classifier.store,
            "generator": self.generator.store,
            "discriminator": self.discriminator.store,
            "aux": self.aux.own_store(),
        }

    def state_dict(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for prefix, store in self.stores().items():
            for name, tensor in store.items():
                out[f"{prefix}.{name}"] = tensor.data.copy()
        if self.adjacency is not None:
            out["adjacency.counts"] = self.adjacency.counts.copy()
            out["adjacency.propagation"] = self.adjacency.propagation.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for prefix, store in self.stores().items():
            store.load_state_dict(
                {name: state[f"{prefix}.{name}"] for name in store.names()})


def build_bundle(dims: NetDims, adjacency: CoocAdjacency | None,
                 rng: np.random.Generator) -> NetworkBundle:
    classifier = Classifier(dims, rng)
    generator = Generator(dims, rng)
    discriminator = Discriminator(dims, rng)
    aux = AuxNet(dims, rng, discriminator)
    if dims.lca_enabled and adjacency is None:
        raise ValueError("label-correlation mixing needs a co-occurrence adjacency")
    return NetworkBundle(dims, classifier, generator, discriminator, aux, adjacency)


# Operation-style wrappers -------------------------------------------------


def classify(clf: Classifier, x, train_mode: bool = False, rng=None) -> Tensor:
    """Predicted class distribution per instance row."""
    return clf.probs(x, train_mode=train_mode, rng=rng)


def generate_distribution(gen: Generator, x, e, zhat, eps) -> Tensor:
    """Annotation distribution per (instance, annotator, code, noise) row."""
    return gen.distribution(x, e, zhat, eps)


def discriminate(disc: Discriminator, x, e, y, adj=None) -> Tensor:
    """Authenticity probability in (0,1) for each (instance, annotator, label)."""
    return disc.score(x, e, y, adj)


def aux_posterior(aux: AuxNet, x, e, y, adj=None) -> Tensor:
    """Posterior over the classifier's classes given one annotation."""
    return aux.posterior(x, e, y, adj)
