"""Pairwise and multi-negative (Plackett-Luce) DPO losses and their gradients.

Losses consume beta-free log-ratios ``log pi_theta(y|x,m) - log pi_ref(y|x,m)``.
All losses are minimization losses (negated log-likelihoods). With advantages
``a_i = beta * (neg_i - pos)`` the multi-negative image loss is
``-log sigmoid(-logsumexp(a)) = softplus(logsumexp(a))`` and its gradient is

    beta * sigmoid(logsumexp(a)) * sum_i softmax(a)_i * (grad neg_i - grad pos).
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Protocol, Sequence

import numpy as np

from mispdpo.errors import ConfigError, DataError, DomainError, NumericError


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 0.5
    lam: float = 1.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")


@dataclass
class PreferenceInstance:
    pos_logratio: float
    neg_logratios: Sequence[float]
    text_pos_logratio: Optional[float] = None
    text_neg_logratio: Optional[float] = None
    q: Optional[Sequence[float]] = None

    def __post_init__(self):
        self.neg_logratios = [float(v) for v in self.neg_logratios]
        if not self.neg_logratios:
            raise DataError("a preference instance needs at least one negative")
        values = [self.pos_logratio, *self.neg_logratios]
        if self.has_text:
            values += [self.text_pos_logratio, self.text_neg_logratio]
        if not all(math.isfinite(v) for v in values):
            raise NumericError("log-ratios must be finite")
        if (self.text_pos_logratio is None) != (self.text_neg_logratio is None):
            raise DataError("text log-ratios must be given as a pair")
        if self.q is not None:
            self.q = [float(v) for v in self.q]
            if len(self.q) != len(self.neg_logratios):
                raise DataError("proposal probabilities must align with negatives")
            if any(not v > 0 for v in self.q):
                raise DomainError("proposal probabilities must be strictly positive")

    @property
    def has_text(self):
        return self.text_pos_logratio is not None and self.text_neg_logratio is not None

    def to_dict(self):
        doc = {"pos_logratio": self.pos_logratio, "neg_logratios": list(self.neg_logratios)}
        if self.has_text:
            doc["text_pos_logratio"] = self.text_pos_logratio
            doc["text_neg_logratio"] = self.text_neg_logratio
        if self.q is not None:
            doc["q"] = list(self.q)
        return doc

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls(
                float(doc["pos_logratio"]),
                doc["neg_logratios"],
                doc.get("text_pos_logratio"),
                doc.get("text_neg_logratio"),
                doc.get("q"),
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed preference instance: {exc}") from exc


@dataclass
class MnGradientReport:
    advantages: List[float]
    preference_weights: List[float]
    sigma_factor: float
    per_negative_delta_weights: List[float]


# -- scalar kernels ---------------------------------------------------------

def logsumexp(values) -> float:
    a = np.asarray(values, dtype=np.float64)
    m = float(np.max(a))
    if math.isinf(m):
        return m
    return m + math.log(float(np.sum(np.exp(a - m))))


def softmax(values) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64)
    e = np.exp(a - np.max(a))
    return e / e.sum()


def softplus(x: float) -> float:
    """``log(1 + e^x)`` without overflow."""
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def log_sigmoid(x: float) -> float:
    return -softplus(-x)


# -- losses -----------------------------------------------------------------

def pairwise_dpo_loss(pos_logratio, neg_logratio, beta) -> float:
    """``-log sigmoid(beta * (pos - neg))``; serves both text and image pairs."""
    if not (math.isfinite(pos_logratio) and math.isfinite(neg_logratio)):
        raise NumericError("log-ratios must be finite")
    return softplus(-(beta * (pos_logratio - neg_logratio)))


def advantages(instance: PreferenceInstance, beta) -> List[float]:
    return [beta * (n - instance.pos_logratio) for n in instance.neg_logratios]


def mn_loss(instance: PreferenceInstance, beta) -> float:
    """Plackett-Luce loss of the positive image against all negative images."""
    return softplus(logsumexp(advantages(instance, beta)))


def mn_gradient_report(instance: PreferenceInstance, beta) -> MnGradientReport:
    a = advantages(instance, beta)
    p = softmax(a)
    sig = sigmoid(logsumexp(a))
    return MnGradientReport(a, p.tolist(), sig, (beta * sig * p).tolist())


def text_loss(instance: PreferenceInstance, beta) -> float:
    if not instance.has_text:
        raise ConfigError("text loss needs text_pos_logratio and text_neg_logratio")
    return pairwise_dpo_loss(instance.text_pos_logratio, instance.text_neg_logratio, beta)


def total_loss(instance: PreferenceInstance, config: DpoConfig) -> float:
    """Image loss plus ``lam`` times the text loss (the text term is skipped when lam is 0)."""
    loss = mn_loss(instance, config.beta)
    if config.lam > 0:
        if not instance.has_text:
            raise ConfigError("lambda > 0 requires a text log-ratio pair")
        loss += config.lam * text_loss(instance, config.beta)
    return loss


# -- parameter gradients through a differentiable policy ----------------------

class DifferentiablePolicy(Protocol):
    def logprob(self, context) -> float: ...

    def logprob_grad(self, context) -> np.ndarray: ...


@dataclass
class ImageComparison:
    """One prompt's contexts for the image-side loss.

    ``pos_context`` pairs the response with the preferred image; each entry of
    ``neg_contexts`` pairs the same response with a negative image. Reference
    log-probs are frozen inputs.
    """

    pos_context: object
    neg_contexts: Sequence[object]
    ref_pos_logprob: float
    ref_neg_logprobs: Sequence[float]
    text_pos_context: object = None
    text_neg_context: object = None
    ref_text_pos_logprob: Optional[float] = None
    ref_text_neg_logprob: Optional[float] = None

    def __post_init__(self):
        if len(self.neg_contexts) == 0:
            raise DataError("need at least one negative context")
        if len(self.neg_contexts) != len(self.ref_neg_logprobs):
            raise DataError("reference log-probs must align with negative contexts")

    @property
    def has_text(self):
        return self.text_pos_context is not None and self.text_neg_context is not None


def instance_from_policy(policy: DifferentiablePolicy, comp: ImageComparison, q=None) -> PreferenceInstance:
    text_pos = text_neg = None
    if comp.has_text:
        text_pos = policy.logprob(comp.text_pos_context) - comp.ref_text_pos_logprob
        text_neg = policy.logprob(comp.text_neg_context) - comp.ref_text_neg_logprob
    return PreferenceInstance(
        policy.logprob(comp.pos_context) - comp.ref_pos_logprob,
        [policy.logprob(c) - r for c, r in zip(comp.neg_contexts, comp.ref_neg_logprobs)],
        text_pos,
        text_neg,
        q,
    )


def delta_grads(policy: DifferentiablePolicy, comp: ImageComparison, subset=None):
    """``grad log pi(y|x,m_neg_i) - grad log pi(y|x,m_pos)`` for each (selected) negative."""
    g_pos = policy.logprob_grad(comp.pos_context)
    idx = range(len(comp.neg_contexts)) if subset is None else subset
    return [policy.logprob_grad(comp.neg_contexts[i]) - g_pos for i in idx]


def mn_gradient_exact(policy: DifferentiablePolicy, comp: ImageComparison, beta) -> np.ndarray:
    """Parameter gradient of the image loss assembled from the report weights."""
    report = mn_gradient_report(instance_from_policy(policy, comp), beta)
    deltas = delta_grads(policy, comp)
    grad = np.zeros_like(deltas[0])
    for w, d in zip(report.per_negative_delta_weights, deltas):
        grad += w * d
    return grad


def is_weights(adv, q, mode):
    """Per-sample weights of the importance-sampling estimator.

    ``literal`` returns ``exp(a_i) / q_i``; ``self_normalized`` divides those by
    their sum over the sampled subset.
    """
    a = np.asarray(adv, dtype=np.float64)
    qq = np.asarray(q, dtype=np.float64)
    if np.any(qq <= 0):
        raise DomainError("proposal probabilities must be strictly positive")
    if mode == "literal":
        return np.exp(a) / qq
    if mode == "self_normalized":
        # exp(a_i - log q_i) shifted by the max for stability; the shift cancels.
        logw = a - np.log(qq)
        w = np.exp(logw - logw.max())
        return w / w.sum()
    raise ConfigError(f"unknown importance-sampling mode {mode!r}")


def mn_gradient_is(policy: DifferentiablePolicy, comp: ImageComparison, subset, q, beta,
                   mode="self_normalized") -> np.ndarray:
    """Importance-sampling gradient over a sampled subset of the negatives.

    Args:
        subset: indices into ``comp.neg_contexts`` (may repeat).
        q: proposal probability of each sampled index, aligned with ``subset``.
        mode: ``"literal"`` applies ``exp(a_i)/q_i`` verbatim;
            ``"self_normalized"`` normalizes those weights to sum to one.
    """
    subset = list(subset)
    if len(subset) != len(q):
        raise DataError("q must align with the sampled subset")
    inst = instance_from_policy(policy, comp)
    adv = advantages(inst, beta)
    sub_adv = [adv[i] for i in subset]
    w = is_weights(sub_adv, q, mode)
    factor = beta * sigmoid(logsumexp(sub_adv))
    deltas = delta_grads(policy, comp, subset)
    grad = np.zeros_like(deltas[0])
    for wi, d in zip(w, deltas):
        grad += wi * d
    return factor * grad


def text_gradient(policy: DifferentiablePolicy, comp: ImageComparison, beta) -> np.ndarray:
    """Gradient of the text loss: ``-beta * sigmoid(-beta*(pos-neg)) * (grad pos - grad neg)``."""
    if not comp.has_text:
        raise ConfigError("comparison has no text pair")
    pos = policy.logprob(comp.text_pos_context) - comp.ref_text_pos_logprob
    neg = policy.logprob(comp.text_neg_context) - comp.ref_text_neg_logprob
    coef = -beta * sigmoid(-beta * (pos - neg))
    return coef * (policy.logprob_grad(comp.text_pos_context) - policy.logprob_grad(comp.text_neg_context))


def total_gradient(policy: DifferentiablePolicy, comp: ImageComparison, config: DpoConfig) -> np.ndarray:
    grad = mn_gradient_exact(policy, comp, config.beta)
    if config.lam > 0:
        grad = grad + config.lam * text_gradient(policy, comp, config.beta)
    return grad
