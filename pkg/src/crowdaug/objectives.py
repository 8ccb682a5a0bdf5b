"""Training objectives: adversarial value, information bound, CRM estimator.

The discriminator maximizes E[log D] on authentic annotations plus
E[log(1-D)] on generated ones (implemented as a loss to minimize, plus an L2
penalty on its raw outputs). The generator and classifier are updated
off-policy: each logged annotation carries its logging probability g0, and the
importance-weighted objective mean((delta - mu) * G_theta(y) / g0) is
minimized, where delta folds the discriminator signal and (for the generator)
the per-sample information term.

Probabilities entering any log are clamped to [1e-12, 1 - 1e-12]; clamp
counts are surfaced so adversarial saturation is visible in reports.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

CLAMP_LO = 1e-12
CLAMP_HI = 1.0 - 1e-12


@dataclass(frozen=True)
class LoggedSample:
    """One sampled annotation with everything needed to replay its loss."""

    instance: int
    annotator: int
    label: int
    g0: float              # logging policy's probability of `label`
    authentic: bool
    eps: np.ndarray        # generator noise drawn at logging time
    zhat_draw: int         # class sampled from the classifier's distribution
    entropy: float         # entropy of the logged generator distribution

    def __post_init__(self):
        if not self.g0 > 0.0:
            raise ValueError(f"logged sample has non-positive g0 = {self.g0}")


@dataclass(frozen=True)
class LossBreakdown:
    """Reporting view of one batch: V, L_I, and V - lambda * L_I."""

    value_term: float
    info_term: float
    combined: float
    deltas: np.ndarray
    clamp_count: int


def _clamp_count(values: np.ndarray) -> int:
    return int(np.count_nonzero((values <= CLAMP_LO) | (values >= CLAMP_HI)))


def _as_prob_tensor(scores) -> tuple[Tensor, int]:
    t = scores if isinstance(scores, Tensor) else Tensor(np.asarray(scores, dtype=np.float64))
    return dc.clamp(t, CLAMP_LO, CLAMP_HI), _clamp_count(t.data)


def discriminator_loss(authentic_scores, generated_scores,
                       l2_coeff: float = 1e-4) -> tuple[Tensor, int]:
    """Negative adversarial value plus output L2; returns (loss, clamp count).

    Minimizing this over the discriminator maximizes
    mean(log D(authentic)) + mean(log(1 - D(generated))).
    """
    auth, clamped_a = _as_prob_tensor(authentic_scores)
    gen, clamped_g = _as_prob_tensor(generated_scores)
    if auth.size == 0 or gen.size == 0:
        raise ValueError("discriminator_loss needs both authentic and generated scores")
    loss = dc.neg(dc.add(dc.t_mean(dc.t_log(auth)),
                         dc.t_mean(dc.t_log(dc.neg(gen) + 1.0))))
    if l2_coeff > 0.0:
        both = dc.concat([auth, gen], axis=0)
        loss = loss + dc.t_mean(dc.mul(both, both)) * l2_coeff
    return loss, clamped_a + clamped_g


def info_lower_bound(q_logprobs, entropy_term: float):
    """Variational bound on I(code; annotation): mean log Q + code entropy.

    ``entropy_term`` is treated as a constant (no gradient) — during generator
    updates the classifier producing the code is frozen.
    """
    if isinstance(q_logprobs, Tensor):
        return dc.t_mean(q_logprobs) + float(entropy_term)
    return float(np.mean(np.asarray(q_logprobs, dtype=np.float64)) + entropy_term)


def per_annotation_delta(d_scores, q_logprobs, info_weight: float) -> tuple[np.ndarray, int]:
    """Per-sample loss delta = log(1 - D(y)) - lambda * log Q(code|y).

    Pure numpy: deltas act as constant weights inside the CRM objective, never
    as a gradient path. Returns (deltas, clamp count).
    """
    d = np.asarray(d_scores, dtype=np.float64)
    clamped = _clamp_count(d)
    d = np.clip(d, CLAMP_LO, CLAMP_HI)
    deltas = np.log1p(-d)
    if info_weight != 0.0:
        q = np.asarray(q_logprobs, dtype=np.float64)
        if q.shape != d.shape:
            raise ValueError(f"shape mismatch: {d.shape} scores vs {q.shape} log-probs")
        deltas = deltas - info_weight * q
    return deltas, clamped


def crm_objective(g0, target_probs, deltas, mu: float) -> Tensor:
    """Importance-weighted risk mean((delta - mu) * G_theta(y) / g0).

    ``target_probs`` must be a graph Tensor (the gradient path); ``g0`` and
    ``deltas`` are constants from logging time.
    """
    g0 = np.asarray(g0, dtype=np.float64)
    if np.any(g0 <= 0.0):
        raise ValueError("logging support violated: g0 must be positive everywhere")
    deltas = np.asarray(deltas, dtype=np.float64)
    if not isinstance(target_probs, Tensor):
        target_probs = Tensor(np.asarray(target_probs, dtype=np.float64))
    if target_probs.shape != g0.shape or deltas.shape != g0.shape:
        raise ValueError("g0, target_probs, and deltas must share one shape")
    centered = Tensor(deltas - mu)
    return dc.t_mean(dc.mul(centered, dc.div(target_probs, Tensor(g0))))


def compute_breakdown(authentic_scores: np.ndarray, generated_scores: np.ndarray,
                      q_logprobs: np.ndarray, code_entropy: float,
                      info_weight: float) -> LossBreakdown:
    """Metrics-only summary of the adversarial batch (no gradients)."""
    auth = np.asarray(authentic_scores, dtype=np.float64)
    gen = np.asarray(generated_scores, dtype=np.float64)
    clamped = _clamp_count(auth) + _clamp_count(gen)
    auth = np.clip(auth, CLAMP_LO, CLAMP_HI)
    gen = np.clip(gen, CLAMP_LO, CLAMP_HI)
    value = float(np.mean(np.log(auth)) + np.mean(np.log1p(-gen)))
    info = info_lower_bound(np.asarray(q_logprobs, dtype=np.float64), code_entropy)
    deltas, _ = per_annotation_delta(gen, q_logprobs, info_weight)
    return LossBreakdown(value_term=value, info_term=info,
                         combined=value - info_weight * info,
                         deltas=deltas, clamp_count=clamped)
