"""Training procedures: baselines, pretraining, and the adversarial epoch loop.

One epoch of the main procedure:

1. snapshot the classifier+generator as the logging policy, sample one
   annotation per (train instance, annotator) pair with fresh noise, and
   record each sample's logging probability, code draw, and entropy;
2. select per-annotator count-balanced generated samples (weight 1/entropy)
   and update the discriminator and auxiliary net on selected + authentic;
3. score every logged sample into a loss delta;
4. split train instances by normalized classifier entropy against the
   threshold t;
5. update the generator by the importance-weighted objective on low-entropy
   instances (classifier frozen);
6. update the classifier the same way on high-entropy instances using only
   the discriminator signal (generator frozen);
7. record metrics.

The Lagrange multiplier is searched on a small grid per epoch by validation
accuracy. A one-step mode (generator and classifier updated jointly on all
pairs) exists only for the stability comparison.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import evalsuite
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError
from .data import TRAIN, VAL, TEST, CoocAdjacency, CrowdDataset, build_cooccurrence, majority_vote
from .diffcore import Adam, ParamStore, Tensor, backward
from .nets import AuxNet, Classifier, Discriminator, Generator, NetDims, NetworkBundle, build_bundle
from .objectives import (
    compute_breakdown,
    crm_objective,
    discriminator_loss,
    per_annotation_delta,
)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


MU_GRID = (0.0, 0.5, 1.0)


@dataclass
class TrainConfig:
    """All hyper-parameters of the training procedures."""

    seed: int = 0
    # schedule
    pretrain_epochs: int = 60
    gen_pretrain_epochs: int = 30
    disc_pretrain_epochs: int = 5
    epochs: int = 40
    inner_steps: int = 5
    batch_size: int = 64
    two_step: bool = True
    # objective weights
    info_weight: float = 0.5        # weight of the information term
    entropy_threshold: float = 0.5  # split point on normalized entropy
    disc_l2: float = 1e-4           # L2 penalty on discriminator outputs
    mu_mode: str = "grid"           # "grid" searches multiplier coefficients
    mu_fixed: float = 0.0           # used when mu_mode == "fixed"
    # optimization
    lr_classifier: float = 3e-4
    lr_generator: float = 3e-4
    lr_discriminator: float = 3e-4
    lr_pretrain: float = 1e-3
    # architecture
    noise_dim: int = 8
    dropout: float = 0.5
    lca_enabled: bool = True
    # grid control and ablation switches
    max_grid_pairs: int = 0          # 0 = log the full instance x annotator grid
    gen_use_instance_features: bool = True
    gen_use_annotator_features: bool = True
    selection_mode: str = "entropy"  # or "uniform"

    def validate(self) -> None:
        if self.info_weight < 0:
            raise ConfigError("info_weight must be >= 0")
        if not 0.0 < self.entropy_threshold < 1.0:
            raise ConfigError("entropy_threshold must lie strictly in (0, 1)")
        if min(self.epochs, self.inner_steps, self.batch_size) < 1:
            raise ConfigError("epochs, inner_steps, and batch_size must be >= 1")
        if min(self.pretrain_epochs, self.gen_pretrain_epochs,
               self.disc_pretrain_epochs) < 0:
            raise ConfigError("pretraining epoch counts must be >= 0")
        if self.mu_mode not in ("grid", "fixed"):
            raise ConfigError(f"unknown mu_mode {self.mu_mode!r}")
        if self.selection_mode not in ("entropy", "uniform"):
            raise ConfigError(f"unknown selection_mode {self.selection_mode!r}")
        for name in ("lr_classifier", "lr_generator", "lr_discriminator",
                     "lr_pretrain"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.disc_l2 < 0:
            raise ConfigError("disc_l2 must be >= 0")
        if self.max_grid_pairs < 0:
            raise ConfigError("max_grid_pairs must be >= 0")


@dataclass
class LoggedBatch:
    """Column view of this epoch's logged generated annotations."""

    instances: np.ndarray   # global instance ids, shape (P,)
    annotators: np.ndarray  # annotator ids, shape (P,)
    labels: np.ndarray      # sampled labels, shape (P,)
    g0: np.ndarray          # logging probabilities, shape (P,)
    eps: np.ndarray         # noise at logging time, shape (P, k)
    zhat_draws: np.ndarray  # sampled code class per pair, shape (P,)
    entropies: np.ndarray   # generator-distribution entropy per pair, shape (P,)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx: np.ndarray) -> "LoggedBatch":
        return LoggedBatch(self.instances[idx], self.annotators[idx],
                           self.labels[idx], self.g0[idx], self.eps[idx],
                           self.zhat_draws[idx], self.entropies[idx])


@dataclass
class TrainState:
    """Everything the epoch loop mutates."""

    bundle: NetworkBundle
    optimizers: dict
    snapshot: dict | None = None  # logging-policy parameter copy
    epoch: int = 0
    history: list = field(default_factory=list)
    rng: np.random.Generator | None = None


@dataclass
class TrainResult:
    classifier: Classifier
    bundle: NetworkBundle | None
    history: list
    best_epoch: int
    best_val_acc: float
    test_acc: float
    config: TrainConfig
    method: str


# ---------------------------------------------------------------------------
# shared helpers


def _check_finite(value: float, what: str, epoch: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite {what} at epoch {epoch}")


def _dims_for(ds: CrowdDataset, cfg: TrainConfig) -> NetDims:
    return NetDims(num_classes=ds.num_classes, feature_dim=ds.feature_dim,
                   annotator_dim=ds.annotator_dim, noise_dim=cfg.noise_dim,
                   dropout=cfg.dropout, lca_enabled=cfg.lca_enabled)


def _split_accuracy(clf: Classifier, ds: CrowdDataset, split: int) -> float:
    idx = ds.split_indices(split)
    if ds.ground_truth is None or idx.size == 0:
        return float("nan")
    labels = ds.ground_truth[idx]
    if np.any(labels < 0):
        return float("nan")
    return evalsuite.accuracy(clf, ds.features[idx], labels)


def _train_annotations(ds: CrowdDataset) -> np.ndarray:
    """Annotation triplets whose instance is in the train split."""
    mask = ds.splits[ds.annotations[:, 0]] == TRAIN
    return ds.annotations[mask]


def _minibatches(rng: np.random.Generator, count: int, batch_size: int):
    order = rng.permutation(count)
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]


def _gen_inputs(ds: CrowdDataset, cfg: TrainConfig, inst: np.ndarray,
                annot: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Generator-side feature rows honoring the ablation switches."""
    x = ds.features[inst]
    e = ds.annotator_features[annot]
    if not cfg.gen_use_instance_features:
        x = np.zeros_like(x)
    if not cfg.gen_use_annotator_features:
        e = np.zeros_like(e)
    return x, e


# ---------------------------------------------------------------------------
# supervised core (used by DL-MV, the truth baseline, and DL-CL's inner loop)


def _fit_classifier(clf: Classifier, x: np.ndarray, labels: np.ndarray,
                    cfg: TrainConfig, rng: np.random.Generator,
                    transforms: ParamStore | None = None,
                    annotators: np.ndarray | None = None,
                    epochs: int | None = None) -> list[dict]:
    """Cross-entropy training, optionally through per-annotator transforms.

    With ``transforms`` given, each sample's predicted log-distribution is
    mapped by its annotator's matrix before the final normalization; identity
    matrices make this collapse to plain cross-entropy exactly.
    """
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    params = clf.store if transforms is None else ParamStore.union(clf.store, transforms)
    opt = Adam(params, lr=cfg.lr_pretrain)
    history = []
    for epoch in range(epochs):
        losses = []
        for batch in _minibatches(rng, len(labels), cfg.batch_size):
            logits = clf.logits(x[batch], train_mode=True, rng=rng)
            log_probs = dc.log_softmax(logits, axis=1)
            if transforms is not None:
                mats = dc.gather_rows(transforms["T"], annotators[batch])
                log_probs = dc.log_softmax(dc.rowwise_matvec(mats, log_probs), axis=1)
            loss = dc.neg(dc.t_mean(dc.pick(log_probs, labels[batch])))
            _check_finite(loss.item(), "cross-entropy loss", epoch)
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(loss.item())
        history.append({"epoch": epoch, "loss": float(np.mean(losses))})
    return history


def dl_cl_loss(clf: Classifier, transforms: ParamStore, x, annotators, labels) -> Tensor:
    """The crowd-layer objective at fixed parameters (eval mode)."""
    log_probs = dc.log_softmax(clf.logits(x), axis=1)
    mats = dc.gather_rows(transforms["T"], np.asarray(annotators, dtype=np.int64))
    log_probs = dc.log_softmax(dc.rowwise_matvec(mats, log_probs), axis=1)
    return dc.neg(dc.t_mean(dc.pick(log_probs, np.asarray(labels, dtype=np.int64))))


def identity_transforms(num_annotators: int, num_classes: int) -> ParamStore:
    store = ParamStore()
    store.add("T", np.tile(np.eye(num_classes), (num_annotators, 1, 1)))
    return store


def pretrain_dl_cl(ds: CrowdDataset, cfg: TrainConfig,
                   rng: np.random.Generator | None = None,
                   freeze_transforms: bool = False) -> tuple[Classifier, ParamStore, list]:
    """Crowd-layer pretraining: classifier + per-annotator label transforms.

    Returns (classifier, transforms, history); the transforms are only needed
    by the baseline itself and are discarded by the main procedure.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    clf = Classifier(_dims_for(ds, cfg), rng)
    transforms = identity_transforms(ds.num_annotators, ds.num_classes)
    ann = _train_annotations(ds)
    history = _fit_classifier(
        clf, ds.features[ann[:, 0]], ann[:, 2], cfg, rng,
        transforms=None if freeze_transforms else transforms,
        annotators=ann[:, 1])
    return clf, transforms, history


def train_dl_mv(ds: CrowdDataset, cfg: TrainConfig) -> TrainResult:
    """Majority-vote aggregation followed by standard supervised training."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    mv = majority_vote(ds)
    train_idx = ds.split_indices(TRAIN)
    clf = Classifier(_dims_for(ds, cfg), rng)
    history = _fit_classifier(clf, ds.features[train_idx], mv[train_idx], cfg, rng)
    val_acc = _split_accuracy(clf, ds, VAL)
    return TrainResult(classifier=clf, bundle=None, history=history,
                       best_epoch=len(history) - 1, best_val_acc=val_acc,
                       test_acc=_split_accuracy(clf, ds, TEST),
                       config=cfg, method="dl-mv")


def train_on_truth(ds: CrowdDataset, cfg: TrainConfig) -> TrainResult:
    """Supervised training on the hidden ground truth (oracle baseline)."""
    cfg.validate()
    if ds.ground_truth is None:
        raise ValueError("truth baseline needs ground-truth labels")
    rng = np.random.default_rng(cfg.seed)
    train_idx = ds.split_indices(TRAIN)
    clf = Classifier(_dims_for(ds, cfg), rng)
    history = _fit_classifier(clf, ds.features[train_idx],
                              ds.ground_truth[train_idx], cfg, rng)
    return TrainResult(classifier=clf, bundle=None, history=history,
                       best_epoch=len(history) - 1,
                       best_val_acc=_split_accuracy(clf, ds, VAL),
                       test_acc=_split_accuracy(clf, ds, TEST),
                       config=cfg, method="truth")


def train_dl_cl(ds: CrowdDataset, cfg: TrainConfig) -> TrainResult:
    """The crowd-layer baseline as a standalone method."""
    clf, _, history = pretrain_dl_cl(ds, cfg)
    return TrainResult(classifier=clf, bundle=None, history=history,
                       best_epoch=len(history) - 1,
                       best_val_acc=_split_accuracy(clf, ds, VAL),
                       test_acc=_split_accuracy(clf, ds, TEST),
                       config=cfg, method="dl-cl")


# ---------------------------------------------------------------------------
# generator / discriminator pretraining


def pretrain_gen_disc(ds: CrowdDataset, clf: Classifier, cfg: TrainConfig,
                      rng: np.random.Generator,
                      adjacency: CoocAdjacency | None = None,
                      ) -> tuple[Generator, Discriminator, AuxNet, list]:
    """Likelihood-pretrain the generator, then warm up D and Q against it."""
    dims = _dims_for(ds, cfg)
    adjacency = build_cooccurrence(ds) if adjacency is None else adjacency
    gen = Generator(dims, rng)
    disc = Discriminator(dims, rng)
    aux = AuxNet(dims, rng, disc)
    ann = _train_annotations(ds)
    zhat_all = clf.probs(ds.features).data
    history = []

    opt_g = Adam(gen.store, lr=cfg.lr_pretrain)
    for epoch in range(cfg.gen_pretrain_epochs):
        losses = []
        for batch in _minibatches(rng, len(ann), cfg.batch_size):
            inst, annot, labels = ann[batch, 0], ann[batch, 1], ann[batch, 2]
            x, e = _gen_inputs(ds, cfg, inst, annot)
            eps = gen.draw_noise(rng, len(batch))
            log_dist = gen.log_distribution(x, e, zhat_all[inst], eps)
            loss = dc.neg(dc.t_mean(dc.pick(log_dist, labels)))
            _check_finite(loss.item(), "generator pretraining loss", epoch)
            opt_g.zero_grad()
            backward(loss)
            opt_g.step()
            losses.append(loss.item())
        history.append({"phase": "gen", "epoch": epoch, "loss": float(np.mean(losses))})

    opt_dq = Adam(ParamStore.union(disc.store, aux.own_store()),
                  lr=cfg.lr_discriminator)
    for epoch in range(cfg.disc_pretrain_epochs):
        losses = []
        for batch in _minibatches(rng, len(ann), cfg.batch_size):
            inst, annot, labels = ann[batch, 0], ann[batch, 1], ann[batch, 2]
            gx, ge = _gen_inputs(ds, cfg, inst, annot)
            eps = gen.draw_noise(rng, len(batch))
            gen_dist = gen.distribution(gx, ge, zhat_all[inst], eps).data
            fake_labels = dc.sample_categorical(rng, gen_dist)
            zdraws = dc.sample_categorical(rng, zhat_all[inst])
            x, e = ds.features[inst], ds.annotator_features[annot]
            d_auth = disc.score(x, e, labels, adjacency)
            d_gen = disc.score(x, e, fake_labels, adjacency)
            d_loss, _ = discriminator_loss(d_auth, d_gen, cfg.disc_l2)
            q_lp = aux.log_posterior(x, e, fake_labels, adjacency)
            q_loss = dc.neg(dc.t_mean(dc.pick(q_lp, zdraws)))
            loss = d_loss + q_loss
            _check_finite(loss.item(), "discriminator pretraining loss", epoch)
            opt_dq.zero_grad()
            backward(loss)
            opt_dq.step()
            losses.append(loss.item())
        history.append({"phase": "disc", "epoch": epoch, "loss": float(np.mean(losses))})
    return gen, disc, aux, history


# ---------------------------------------------------------------------------
# epoch machinery


def log_generation_grid(gen: Generator, clf: Classifier, ds: CrowdDataset,
                        cfg: TrainConfig, rng: np.random.Generator) -> LoggedBatch:
    """Sample one annotation per (train instance, annotator) pair.

    The full grid is logged unless ``max_grid_pairs`` caps it, in which case
    instances are subsampled per annotator but never below that annotator's
    authentic count (selection balance stays feasible).
    """
    train_idx = ds.split_indices(TRAIN)
    r = ds.num_annotators
    counts = np.bincount(_train_annotations(ds)[:, 1], minlength=r)

    pairs_inst = []
    pairs_annot = []
    per_annot_cap = None
    if cfg.max_grid_pairs and len(train_idx) * r > cfg.max_grid_pairs:
        per_annot_cap = max(1, cfg.max_grid_pairs // r)
    for annot in range(r):
        chosen = train_idx
        if per_annot_cap is not None:
            keep = max(per_annot_cap, int(counts[annot]))
            if keep < len(train_idx):
                chosen = rng.choice(train_idx, size=keep, replace=False)
                chosen = np.sort(chosen)
        pairs_inst.append(chosen)
        pairs_annot.append(np.full(len(chosen), annot, dtype=np.int64))
    inst = np.concatenate(pairs_inst)
    annot = np.concatenate(pairs_annot)

    zhat = clf.probs(ds.features[inst]).data
    eps = gen.draw_noise(rng, len(inst))
    gx, ge = _gen_inputs(ds, cfg, inst, annot)
    dist = gen.distribution(gx, ge, zhat, eps).data
    labels = dc.sample_categorical(rng, dist)
    g0 = dist[np.arange(len(inst)), labels]
    entropies = dc.entropy(dist, axis=1)
    zdraws = dc.sample_categorical(rng, zhat)
    return LoggedBatch(instances=inst, annotators=annot, labels=labels,
                       g0=g0, eps=eps, zhat_draws=zdraws, entropies=entropies)


def recompute_logging_probs(batch: LoggedBatch, snapshot: dict, dims: NetDims,
                            ds: CrowdDataset, cfg: TrainConfig) -> np.ndarray:
    """Replay the snapshot policy over the logged pairs (bit-exact check)."""
    rng = np.random.default_rng(0)
    clf = Classifier(dims, rng)
    gen = Generator(dims, rng)
    clf.store.load_state_dict({k.split(".", 1)[1]: v for k, v in snapshot.items()
                               if k.startswith("classifier.")})
    gen.store.load_state_dict({k.split(".", 1)[1]: v for k, v in snapshot.items()
                               if k.startswith("generator.")})
    zhat = clf.probs(ds.features[batch.instances]).data
    gx, ge = _gen_inputs(ds, cfg, batch.instances, batch.annotators)
    dist = gen.distribution(gx, ge, zhat, batch.eps).data
    return dist[np.arange(len(batch)), batch.labels]


def select_for_discriminator(annotators: np.ndarray, entropies: np.ndarray,
                             authentic_counts: np.ndarray,
                             rng: np.random.Generator,
                             mode: str = "entropy") -> np.ndarray:
    """Per-annotator draw of generated samples matching authentic counts.

    Weights are 1/max(entropy, 1e-6) ("entropy" mode) or uniform; draws are
    without replacement, exactly ``authentic_counts[r]`` per annotator, and
    annotators without authentic annotations contribute nothing.
    """
    annotators = np.asarray(annotators, dtype=np.int64)
    entropies = np.asarray(entropies, dtype=np.float64)
    selected = []
    for annot, count in enumerate(np.asarray(authentic_counts, dtype=np.int64)):
        if count == 0:
            continue
        candidates = np.flatnonzero(annotators == annot)
        if len(candidates) < count:
            raise ValueError(
                f"annotator {annot} has {len(candidates)} generated samples "
                f"but {count} authentic annotations")
        if mode == "uniform":
            weights = np.ones(len(candidates))
        else:
            weights = 1.0 / np.maximum(entropies[candidates], 1e-6)
        probs = weights / weights.sum()
        chosen = rng.choice(candidates, size=int(count), replace=False, p=probs)
        selected.append(np.sort(chosen))
    if not selected:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(selected)


def _update_disc_and_aux(state: TrainState, ds: CrowdDataset, cfg: TrainConfig,
                         batch: LoggedBatch, selected: np.ndarray,
                         authentic: np.ndarray, rng: np.random.Generator,
                         ) -> tuple[float, int]:
    bundle = state.bundle
    disc, aux, adj = bundle.discriminator, bundle.aux, bundle.adjacency
    sel = batch.subset(selected)
    ax, ae = ds.features[authentic[:, 0]], ds.annotator_features[authentic[:, 1]]
    sx, se = ds.features[sel.instances], ds.annotator_features[sel.annotators]
    clamp_total = 0
    last_loss = float("nan")
    for _ in range(cfg.inner_steps):
        d_auth = disc.score(ax, ae, authentic[:, 2], adj)
        d_gen = disc.score(sx, se, sel.labels, adj)
        d_loss, clamped = discriminator_loss(d_auth, d_gen, cfg.disc_l2)
        q_lp = aux.log_posterior(sx, se, sel.labels, adj)
        q_loss = dc.neg(dc.t_mean(dc.pick(q_lp, sel.zhat_draws)))
        loss = d_loss + q_loss
        _check_finite(loss.item(), "discriminator loss", state.epoch)
        opt = state.optimizers["disc"]
        opt.zero_grad()
        backward(loss)
        opt.step()
        clamp_total += clamped
        last_loss = loss.item()
    return last_loss, clamp_total


def _crm_update_generator(state: TrainState, ds: CrowdDataset, cfg: TrainConfig,
                          low: LoggedBatch, zhat_const: np.ndarray,
                          deltas: np.ndarray, mu: float) -> None:
    gen = state.bundle.generator
    gx, ge = _gen_inputs(ds, cfg, low.instances, low.annotators)
    before = state.bundle.classifier.store.fingerprint()
    for _ in range(cfg.inner_steps):
        dist = gen.distribution(gx, ge, zhat_const, low.eps)
        target = dc.pick(dist, low.labels)
        obj = crm_objective(low.g0, target, deltas, mu)
        _check_finite(obj.item(), "generator objective", state.epoch)
        opt = state.optimizers["gen"]
        opt.zero_grad()
        state.bundle.classifier.store.zero_grad()
        backward(obj)
        opt.step()
    assert state.bundle.classifier.store.fingerprint() == before, \
        "classifier changed during the generator step"


def _crm_update_classifier(state: TrainState, ds: CrowdDataset, cfg: TrainConfig,
                           high: LoggedBatch, deltas: np.ndarray, mu: float,
                           rng: np.random.Generator) -> None:
    clf = state.bundle.classifier
    gen = state.bundle.generator
    gx, ge = _gen_inputs(ds, cfg, high.instances, high.annotators)
    uniq, inverse = np.unique(high.instances, return_inverse=True)
    before = gen.store.fingerprint()
    for _ in range(cfg.inner_steps):
        zhat = clf.probs(ds.features[uniq], train_mode=True, rng=rng)
        dist = gen.distribution(gx, ge, dc.gather_rows(zhat, inverse), high.eps)
        target = dc.pick(dist, high.labels)
        obj = crm_objective(high.g0, target, deltas, mu)
        _check_finite(obj.item(), "classifier objective", state.epoch)
        opt = state.optimizers["clf"]
        opt.zero_grad()
        gen.store.zero_grad()
        backward(obj)
        opt.step()
    assert gen.store.fingerprint() == before, \
        "generator changed during the classifier step"


def _crm_update_joint(state: TrainState, ds: CrowdDataset, cfg: TrainConfig,
                      batch: LoggedBatch, deltas: np.ndarray, mu: float,
                      rng: np.random.Generator) -> None:
    """One-step mode: generator and classifier move together on all pairs."""
    clf = state.bundle.classifier
    gen = state.bundle.generator
    gx, ge = _gen_inputs(ds, cfg, batch.instances, batch.annotators)
    uniq, inverse = np.unique(batch.instances, return_inverse=True)
    for _ in range(cfg.inner_steps):
        zhat = clf.probs(ds.features[uniq], train_mode=True, rng=rng)
        dist = gen.distribution(gx, ge, dc.gather_rows(zhat, inverse), batch.eps)
        target = dc.pick(dist, batch.labels)
        obj = crm_objective(batch.g0, target, deltas, mu)
        _check_finite(obj.item(), "joint objective", state.epoch)
        state.optimizers["gen"].zero_grad()
        state.optimizers["clf"].zero_grad()
        backward(obj)
        state.optimizers["gen"].step()
        state.optimizers["clf"].step()


def _fork_gc(state: TrainState) -> dict:
    return {
        "clf": state.bundle.classifier.store.state_dict(),
        "gen": state.bundle.generator.store.state_dict(),
        "opt_clf": state.optimizers["clf"].state_dict(),
        "opt_gen": state.optimizers["gen"].state_dict(),
    }


def _restore_gc(state: TrainState, fork: dict) -> None:
    state.bundle.classifier.store.load_state_dict(fork["clf"])
    state.bundle.generator.store.load_state_dict(fork["gen"])
    state.optimizers["clf"].load_state_dict(fork["opt_clf"])
    state.optimizers["gen"].load_state_dict(fork["opt_gen"])


def run_epoch(state: TrainState, ds: CrowdDataset, cfg: TrainConfig) -> dict:
    """One full epoch; returns (and appends) the epoch's metric record."""
    bundle = state.bundle
    rng = state.rng
    warnings: list[str] = []

    # (1) freeze the logging policy and sample the grid
    state.snapshot = {f"classifier.{k}": v for k, v in
                      bundle.classifier.store.state_dict().items()}
    state.snapshot.update({f"generator.{k}": v for k, v in
                           bundle.generator.store.state_dict().items()})
    batch = log_generation_grid(bundle.generator, bundle.classifier, ds, cfg, rng)

    # (2) count-balanced selection, then discriminator + auxiliary updates
    authentic = _train_annotations(ds)
    counts = np.bincount(authentic[:, 1], minlength=ds.num_annotators)
    selected = select_for_discriminator(batch.annotators, batch.entropies,
                                        counts, rng, mode=cfg.selection_mode)
    disc_loss_val, clamp_count = _update_disc_and_aux(
        state, ds, cfg, batch, selected, authentic, rng)

    # (3) score all logged samples
    adj = bundle.adjacency
    x_all, e_all = ds.features[batch.instances], ds.annotator_features[batch.annotators]
    d_scores = bundle.discriminator.score(x_all, e_all, batch.labels, adj).data
    q_lp_all = bundle.aux.log_posterior(x_all, e_all, batch.labels, adj).data
    q_at_draw = q_lp_all[np.arange(len(batch)), batch.zhat_draws]
    deltas_gen, clamped_d = per_annotation_delta(d_scores, q_at_draw, cfg.info_weight)
    deltas_clf, _ = per_annotation_delta(d_scores, q_at_draw, 0.0)
    clamp_count += clamped_d

    # (4) split train instances by normalized code entropy at snapshot time
    train_idx = ds.split_indices(TRAIN)
    zhat_train = bundle.classifier.probs(ds.features[train_idx]).data
    norm_entropy = dc.entropy(zhat_train, axis=1) / np.log(ds.num_classes)
    low_instances = train_idx[norm_entropy <= cfg.entropy_threshold]
    pair_is_low = np.isin(batch.instances, low_instances)
    low_idx = np.flatnonzero(pair_is_low)
    high_idx = np.flatnonzero(~pair_is_low)
    low = batch.subset(low_idx)
    high = batch.subset(high_idx)
    zhat_low_const = bundle.classifier.probs(ds.features[low.instances]).data \
        if len(low_idx) else np.empty((0, ds.num_classes))

    # (5)+(6) CRM updates under a shared multiplier-coefficient search
    if cfg.mu_mode == "fixed":
        coeffs = (None,)
    else:
        coeffs = MU_GRID
    mean_delta_low = float(deltas_gen[low_idx].mean()) if len(low_idx) else 0.0
    mean_delta_high = float(deltas_clf[high_idx].mean()) if len(high_idx) else 0.0

    fork = _fork_gc(state)
    candidate_seed = int(rng.integers(2**63))
    results = []
    for coeff in coeffs:
        _restore_gc(state, fork)
        cand_rng = np.random.default_rng(candidate_seed)
        if coeff is None:
            mu_g = mu_c = cfg.mu_fixed
        else:
            mu_g, mu_c = coeff * mean_delta_low, coeff * mean_delta_high
        if cfg.two_step:
            if len(low_idx):
                _crm_update_generator(state, ds, cfg, low, zhat_low_const,
                                      deltas_gen[low_idx], mu_g)
            if len(high_idx):
                _crm_update_classifier(state, ds, cfg, high,
                                       deltas_clf[high_idx], mu_c, cand_rng)
        else:
            mu_joint = cfg.mu_fixed if coeff is None else coeff * float(deltas_gen.mean())
            _crm_update_joint(state, ds, cfg, batch, deltas_gen, mu_joint, cand_rng)
        val_acc = _split_accuracy(bundle.classifier, ds, VAL)
        results.append((coeff, mu_g, mu_c, val_acc, _fork_gc(state)))

    def sort_key(item):
        acc = item[3]
        return -np.inf if math.isnan(acc) else acc

    best = max(results, key=sort_key)  # first wins ties (max is stable)
    _restore_gc(state, best[4])
    chosen_coeff, mu_g, mu_c = best[0], best[1], best[2]

    if cfg.two_step and not len(low_idx):
        warnings.append("empty low-entropy set: generator update skipped")
    if cfg.two_step and not len(high_idx):
        warnings.append("empty high-entropy set: classifier update skipped")

    # (7) metrics
    sel = batch.subset(selected)
    d_auth_final = bundle.discriminator.score(
        ds.features[authentic[:, 0]], ds.annotator_features[authentic[:, 1]],
        authentic[:, 2], adj).data
    d_gen_final = bundle.discriminator.score(
        ds.features[sel.instances], ds.annotator_features[sel.annotators],
        sel.labels, adj).data
    code_entropy = float(dc.entropy(zhat_train, axis=1).mean())
    breakdown = compute_breakdown(d_auth_final, d_gen_final, q_at_draw[selected],
                                  code_entropy, cfg.info_weight)
    record = {
        "epoch": state.epoch,
        "train_acc": _split_accuracy(bundle.classifier, ds, TRAIN),
        "val_acc": best[3],
        "test_acc": _split_accuracy(bundle.classifier, ds, TEST),
        "value_term": breakdown.value_term,
        "info_term": breakdown.info_term,
        "combined": breakdown.combined,
        "disc_loss": disc_loss_val,
        "disc_auc": evalsuite.auc(d_auth_final, d_gen_final),
        "clamp_count": clamp_count + breakdown.clamp_count,
        "num_logged": len(batch),
        "num_selected": int(len(selected)),
        "num_low_pairs": int(len(low_idx)),
        "num_high_pairs": int(len(high_idx)),
        "mu_coeff": float("nan") if chosen_coeff is None else chosen_coeff,
        "mu_generator": mu_g,
        "mu_classifier": mu_c,
        "warnings": ";".join(warnings),
    }
    state.history.append(record)
    state.epoch += 1
    return record


def train_crowding(ds: CrowdDataset, cfg: TrainConfig) -> TrainResult:
    """Full adversarial-augmentation training; best-validation classifier wins.

    The freshly pretrained classifier is the epoch-0 candidate, so on clean
    data the procedure can never fall below its own starting point by more
    than validation noise.
    """
    cfg.validate()
    master = np.random.default_rng(cfg.seed)
    clf, _, pre_history = pretrain_dl_cl(ds, cfg, rng=master)
    adjacency = build_cooccurrence(ds)
    gen, disc, aux, gd_history = pretrain_gen_disc(ds, clf, cfg, master, adjacency)
    bundle = NetworkBundle(_dims_for(ds, cfg), clf, gen, disc, aux, adjacency)
    state = TrainState(
        bundle=bundle,
        optimizers={
            "clf": Adam(clf.store, lr=cfg.lr_classifier),
            "gen": Adam(gen.store, lr=cfg.lr_generator),
            "disc": Adam(ParamStore.union(disc.store, aux.own_store()),
                         lr=cfg.lr_discriminator),
        },
        rng=master,
    )

    best_val = _split_accuracy(clf, ds, VAL)
    best_epoch = -1  # the pretrained classifier itself
    best_params = clf.store.state_dict()
    for _ in range(cfg.epochs):
        record = run_epoch(state, ds, cfg)
        val = record["val_acc"]
        if not math.isnan(val) and (math.isnan(best_val) or val > best_val):
            best_val = val
            best_epoch = record["epoch"]
            best_params = clf.store.state_dict()

    clf.store.load_state_dict(best_params)
    history = state.history
    return TrainResult(classifier=clf, bundle=bundle, history=history,
                       best_epoch=best_epoch, best_val_acc=best_val,
                       test_acc=_split_accuracy(clf, ds, TEST),
                       config=cfg, method="crowding")


def train_method(ds: CrowdDataset, cfg: TrainConfig, method: str) -> TrainResult:
    if method == "crowding":
        return train_crowding(ds, cfg)
    if method == "dl-cl":
        return train_dl_cl(ds, cfg)
    if method == "dl-mv":
        return train_dl_mv(ds, cfg)
    raise ConfigError(f"unknown method {method!r}; expected crowding, dl-cl, or dl-mv")


# ---------------------------------------------------------------------------
# checkpoints

_DIMS_INT_FIELDS = ("num_classes", "feature_dim", "annotator_dim", "noise_dim",
                    "clf_hidden", "gen_hidden1", "gen_hidden2", "aux_hidden1",
                    "aux_hidden2", "embed_dim", "class_embed_dim")


def _dims_meta(dims: NetDims) -> dict:
    meta = {f"meta.{f}": np.array(float(getattr(dims, f)))
            for f in _DIMS_INT_FIELDS}
    meta["meta.dropout"] = np.array(dims.dropout)
    meta["meta.lca_enabled"] = np.array(1.0 if dims.lca_enabled else 0.0)
    return meta


def _dims_from_meta(arrays: dict) -> NetDims:
    kwargs = {f: int(arrays[f"meta.{f}"]) for f in _DIMS_INT_FIELDS}
    kwargs["dropout"] = float(arrays["meta.dropout"])
    kwargs["lca_enabled"] = bool(arrays["meta.lca_enabled"])
    return NetDims(**kwargs)


def save_result_checkpoint(path: str | Path, result: TrainResult) -> None:
    """Persist a finished run: the best classifier, and for the adversarial
    method the whole network bundle plus its adjacency."""
    if result.bundle is not None:
        dims = result.bundle.dims
        arrays = dict(result.bundle.state_dict())
        arrays["meta.has_bundle"] = np.array(1.0)
    else:
        dims = result.classifier.dims
        arrays = {f"classifier.{k}": v
                  for k, v in result.classifier.store.state_dict().items()}
        arrays["meta.has_bundle"] = np.array(0.0)
    arrays.update(_dims_meta(dims))
    save_checkpoint(path, arrays)


def load_result_checkpoint(path: str | Path) -> tuple[Classifier, NetworkBundle | None]:
    """Rebuild the classifier (and the bundle when present) from a checkpoint."""
    arrays = load_checkpoint(path)
    dims = _dims_from_meta(arrays)
    rng = np.random.default_rng(0)
    if arrays["meta.has_bundle"]:
        adjacency = CoocAdjacency(counts=arrays["adjacency.counts"],
                                  propagation=arrays["adjacency.propagation"])
        clf = Classifier(dims, rng)
        gen = Generator(dims, rng)
        disc = Discriminator(dims, rng)
        aux = AuxNet(dims, rng, disc)
        bundle = NetworkBundle(dims, clf, gen, disc, aux, adjacency)
        bundle.load_state_dict(arrays)
        return clf, bundle
    clf = Classifier(dims, rng)
    clf.store.load_state_dict({k.split(".", 1)[1]: v for k, v in arrays.items()
                               if k.startswith("classifier.")})
    return clf, None


# ---------------------------------------------------------------------------
# augmentation export


def export_augmented(ds: CrowdDataset, bundle: NetworkBundle, seed: int,
                     out_path: str | Path | None = None) -> np.ndarray:
    """Authentic annotations plus one generated label per missing pair.

    Returns rows (instance, annotator, label, authentic) over the full
    train-instance x annotator grid in canonical order; optionally writes
    them as CSV with an ``authentic`` column.
    """
    rng = np.random.default_rng(seed)
    train_idx = ds.split_indices(TRAIN)
    authentic = {(int(n), int(r)): int(y) for n, r, y in _train_annotations(ds)}
    r_total = ds.num_annotators
    inst = np.repeat(train_idx, r_total)
    annot = np.tile(np.arange(r_total), len(train_idx))
    missing = np.array([(int(n), int(a)) not in authentic
                        for n, a in zip(inst, annot)])

    labels = np.empty(len(inst), dtype=np.int64)
    for i, (n, a) in enumerate(zip(inst, annot)):
        if not missing[i]:
            labels[i] = authentic[(int(n), int(a))]
    if missing.any():
        m_inst, m_annot = inst[missing], annot[missing]
        zhat = bundle.classifier.probs(ds.features[m_inst]).data
        eps = bundle.generator.draw_noise(rng, len(m_inst))
        dist = bundle.generator.distribution(ds.features[m_inst],
                                             ds.annotator_features[m_annot],
                                             zhat, eps).data
        labels[missing] = dc.sample_categorical(rng, dist)

    rows = np.column_stack([inst, annot, labels, (~missing).astype(np.int64)])
    if out_path is not None:
        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["instance_id", "annotator_id", "label", "authentic"])
            writer.writerows(rows.tolist())
    return rows


def read_augmented_file(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read an export back as (triplets, authentic flags)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["instance_id", "annotator_id", "label", "authentic"]:
            raise ValueError(f"{path}: not an augmented annotation file")
        body = [[int(v) for v in row] for row in reader if row]
    arr = np.asarray(body, dtype=np.int64).reshape(-1, 4)
    return arr[:, :3], arr[:, 3].astype(bool)
