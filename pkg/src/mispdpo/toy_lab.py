"""Desk-scale stand-ins for a policy and data, used to exercise the losses end to end.

The toy policy is a linear softmax over a small vocabulary: every token of a
response is drawn i.i.d. from ``softmax(W f)`` where ``f`` is the feature
vector of a (prompt, image) context. In the planted task each context is a
sign pattern over ``F`` factors, a response names a few factors with their
signs (one token per factor), and a negative context flips one of the
factors the response mentions.
"""

import math
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from mispdpo import pl_dpo
from mispdpo.errors import ConfigError, DataError, DimensionError, DivergenceError
from mispdpo.negselect import CandidateScore, SelectionConfig, greedy_select, normalized_scores


@dataclass(frozen=True)
class ToyContext:
    features: np.ndarray
    response: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))
        object.__setattr__(self, "response", tuple(int(t) for t in self.response))
        if not self.response:
            raise DataError("response must be non-empty")


class ToyPolicy:
    """Linear softmax policy with a V x F weight matrix."""

    def __init__(self, weights):
        self.weights = np.array(weights, dtype=np.float64)

    @property
    def vocab_size(self):
        return self.weights.shape[0]

    def _check(self, ctx: ToyContext):
        if ctx.features.shape != (self.weights.shape[1],):
            raise DimensionError(f"context has {ctx.features.shape} features, policy expects {self.weights.shape[1]}")
        if min(ctx.response) < 0 or max(ctx.response) >= self.vocab_size:
            raise DataError(f"response token out of range [0, {self.vocab_size})")

    def logprob(self, ctx: ToyContext) -> float:
        return toy_logprob(self, ctx)

    def logprob_grad(self, ctx: ToyContext) -> np.ndarray:
        return toy_logprob_grad(self, ctx)

    def copy(self):
        return ToyPolicy(self.weights.copy())


def _log_softmax(logits):
    m = logits.max()
    return logits - (m + math.log(float(np.exp(logits - m).sum())))


def toy_logprob(policy: ToyPolicy, ctx: ToyContext) -> float:
    policy._check(ctx)
    logp = _log_softmax(policy.weights @ ctx.features)
    return float(sum(logp[t] for t in ctx.response))


def toy_logprob_grad(policy: ToyPolicy, ctx: ToyContext) -> np.ndarray:
    policy._check(ctx)
    logits = policy.weights @ ctx.features
    p = np.exp(_log_softmax(logits))
    counts = np.bincount(ctx.response, minlength=policy.vocab_size).astype(np.float64)
    return np.outer(counts - len(ctx.response) * p, ctx.features)


# -- planted candidate pools ------------------------------------------------

@dataclass(frozen=True)
class PlantedFactorSpec:
    num_factors: int = 4
    samples_per_factor: int = 3
    factor_noise: float = 0.05
    seed: int = 0
    dim: int = 16
    scale: float = 1.0  # centroid norm; noise is scaled along with it

    def __post_init__(self):
        if self.num_factors < 2:
            raise ConfigError("num_factors must be at least 2")
        if self.samples_per_factor < 1:
            raise ConfigError("samples_per_factor must be positive")
        if self.factor_noise < 0:
            raise ConfigError("factor_noise must be nonnegative")


@dataclass
class PlantedPool:
    positive: np.ndarray  # (D,)
    candidates: np.ndarray  # (n, D)
    diffs: np.ndarray  # positive - candidates
    labels: List[int]
    ids: List[str]
    centroids: np.ndarray  # (num_factors, D), orthonormal rows

    def label_map(self):
        return dict(zip(self.ids, self.labels))


def orthonormal_directions(n, dim, rng):
    if n > dim:
        raise DimensionError(f"cannot place {n} orthogonal factors in dimension {dim}")
    q, r = np.linalg.qr(rng.normal(size=(dim, n)))
    q = q * np.sign(np.diag(r))[None, :]
    return q.T


def make_planted_pool(spec: PlantedFactorSpec) -> PlantedPool:
    """Candidate pool whose difference vectors cluster around orthogonal centroids.

    Centroids and the positive are drawn first from the seeded generator, so
    two specs differing only in ``samples_per_factor`` share them; a large
    pool can serve as an SAE training corpus for a small one.
    """
    rng = np.random.default_rng(spec.seed)
    centroids = orthonormal_directions(spec.num_factors, spec.dim, rng)
    positive = rng.normal(size=spec.dim)
    labels = [k for k in range(spec.num_factors) for _ in range(spec.samples_per_factor)]
    # factor_noise is the RMS norm of the noise vector, not a per-coordinate sigma.
    noise = spec.factor_noise / math.sqrt(spec.dim) * rng.normal(size=(len(labels), spec.dim))
    diffs = spec.scale * (centroids[labels] + noise)
    ids = [f"f{k}_{n}" for k in range(spec.num_factors) for n in range(spec.samples_per_factor)]
    return PlantedPool(positive, positive[None, :] - diffs, diffs, labels, ids, centroids)


# -- planted preference task ------------------------------------------------

SAMPLERS = ("diverse", "random")


@dataclass(frozen=True)
class ToyTaskConfig:
    dpo: pl_dpo.DpoConfig = field(default_factory=pl_dpo.DpoConfig)
    sampler: str = "diverse"
    k: int = 3
    diversity_weight: float = 0.5
    steps: int = 500
    learning_rate: float = 0.05
    seed: int = 0
    vocab_size: int = 16
    num_features: int = 8
    response_length: int = 4
    n_train: int = 16
    n_heldout: int = 64
    variants_per_factor: int = 2
    context_noise: float = 0.05
    init_scale: float = 0.01

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"unknown sampler {self.sampler!r}; choose from {SAMPLERS}")
        if self.k < 1:
            raise ConfigError("k must be at least 1")
        if self.steps < 0:
            raise ConfigError("steps must be nonnegative")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.vocab_size < 2 * self.num_features:
            raise ConfigError("vocab_size must cover two attribute tokens per feature")
        if min(self.vocab_size, self.num_features, self.response_length, self.n_train,
               self.n_heldout, self.variants_per_factor) < 1:
            raise ConfigError("task sizes must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if "dpo" in doc and isinstance(doc["dpo"], dict):
            doc["dpo"] = pl_dpo.DpoConfig(**doc["dpo"])
        return cls(**doc)


@dataclass
class PlantedInstance:
    pos: ToyContext
    text_neg: ToyContext
    negatives: List[ToyContext]  # candidate negative contexts (or the held-out flips)
    factors: List[int]  # flipped factor of each negative


@dataclass
class PlantedTask:
    train: List[PlantedInstance]
    heldout: List[PlantedInstance]


def attribute_token(factor, value):
    """Token naming one factor and its sign: ``2 * factor + (value > 0)``."""
    return 2 * factor + int(value > 0)


def _sample_instance(cfg: ToyTaskConfig, rng, variants):
    f = cfg.num_features
    z = rng.choice(np.array([-1.0, 1.0]), size=f)
    mentioned = [int(k) for k in rng.choice(f, size=min(cfg.response_length, f), replace=False)]
    y = tuple(attribute_token(k, z[k]) for k in mentioned)
    # Text-side negative: same image, response with one attribute hallucinated.
    y_bad = (attribute_token(mentioned[0], -z[mentioned[0]]),) + y[1:]
    negs, factors = [], []
    for k in mentioned:
        for _ in range(variants):
            feat = z.copy()
            feat[k] = -feat[k]
            feat = feat + cfg.context_noise * rng.normal(size=f)
            negs.append(ToyContext(feat, y))
            factors.append(k)
    pos = z + cfg.context_noise * rng.normal(size=f)
    return PlantedInstance(ToyContext(pos, y), ToyContext(pos, y_bad), negs, factors)


def make_planted_task(cfg: ToyTaskConfig) -> PlantedTask:
    """Training instances with ``variants_per_factor`` flips per mentioned factor; held-out with one."""
    rng = np.random.default_rng([cfg.seed, 0])
    train = [_sample_instance(cfg, rng, cfg.variants_per_factor) for _ in range(cfg.n_train)]
    heldout = [_sample_instance(cfg, rng, 1) for _ in range(cfg.n_heldout)]
    return PlantedTask(train, heldout)


def choose_negatives(inst: PlantedInstance, cfg: ToyTaskConfig, rng) -> List[int]:
    """Indices of the active negative set for one training instance.

    ``diverse`` scores each candidate by the squared norm of its feature
    deviation (normalized by the pool max) and runs greedy diversity
    selection with cosine on the deviations; ``random`` draws ``k`` without
    replacement.
    """
    n = len(inst.negatives)
    k = min(cfg.k, n)
    if cfg.sampler == "random":
        return sorted(int(i) for i in rng.choice(n, size=k, replace=False))
    dev = np.array([inst.pos.features - c.features for c in inst.negatives])
    sq = np.sum(dev * dev, axis=1)
    s = normalized_scores(sq, np.zeros(n))
    scores = [CandidateScore(i, float(sq[i]), 0.0, float(s[i])) for i in range(n)]
    manifest = greedy_select(scores, dev, SelectionConfig(k, cfg.diversity_weight))
    return list(manifest.ids)


def build_comparisons(task: PlantedTask, active: List[List[int]], reference: ToyPolicy):
    comps = []
    for inst, idx in zip(task.train, active):
        negs = [inst.negatives[i] for i in idx]
        comps.append(
            pl_dpo.ImageComparison(
                inst.pos,
                negs,
                reference.logprob(inst.pos),
                [reference.logprob(c) for c in negs],
                inst.pos,
                inst.text_neg,
                reference.logprob(inst.pos),
                reference.logprob(inst.text_neg),
            )
        )
    return comps


def batch_logprob(weights, features, counts) -> np.ndarray:
    """Log-probs of many (context, response) pairs given token-count rows."""
    logits = features @ weights.T
    m = logits.max(axis=-1, keepdims=True)
    log_z = m[..., 0] + np.log(np.exp(logits - m).sum(axis=-1))
    return np.sum(counts * logits, axis=-1) - counts.sum(axis=-1) * log_z


def heldout_margins(policy: ToyPolicy, instances: Sequence[PlantedInstance]) -> np.ndarray:
    """Positive log-prob minus the largest negative log-prob, per instance."""
    v = policy.vocab_size
    pos_f = np.array([inst.pos.features for inst in instances])
    counts = np.array([np.bincount(inst.pos.response, minlength=v) for inst in instances], dtype=np.float64)
    neg_f = np.array([[c.features for c in inst.negatives] for inst in instances])
    pos = batch_logprob(policy.weights, pos_f, counts)
    neg = batch_logprob(policy.weights, neg_f, counts[:, None, :])
    return pos - neg.max(axis=1)


def objective(policy: ToyPolicy, comps, dpo: pl_dpo.DpoConfig) -> float:
    total = 0.0
    for comp in comps:
        total += pl_dpo.total_loss(pl_dpo.instance_from_policy(policy, comp), dpo)
    return total / len(comps)


def objective_grad(policy: ToyPolicy, comps, dpo: pl_dpo.DpoConfig) -> np.ndarray:
    grad = np.zeros_like(policy.weights)
    for comp in comps:
        grad += pl_dpo.total_gradient(policy, comp, dpo)
    return grad / len(comps)


@dataclass
class ToyRun:
    trace: List[dict]
    policy: ToyPolicy
    reference: ToyPolicy
    task: PlantedTask
    active: List[List[int]]

    @property
    def final(self):
        return self.trace[-1]


def run_toy_training(cfg: ToyTaskConfig, on_step=None) -> ToyRun:
    """Full-batch gradient descent on the mean combined loss of the planted task.

    The reference policy is the seeded initial policy, frozen. Each training
    instance's negative set is chosen once, before the first step. The trace
    has ``steps + 1`` records: record ``n`` is measured after ``n`` updates.

    Raises:
        DivergenceError: non-finite loss; ``index`` is the step.
    """
    task = make_planted_task(cfg)
    init_rng = np.random.default_rng([cfg.seed, 1])
    policy = ToyPolicy(cfg.init_scale * init_rng.normal(size=(cfg.vocab_size, cfg.num_features)))
    reference = policy.copy()
    sample_rng = np.random.default_rng([cfg.seed, 2])
    active = [choose_negatives(inst, cfg, sample_rng) for inst in task.train]
    coverage = float(np.mean([len({inst.factors[i] for i in idx}) for inst, idx in zip(task.train, active)]))
    comps = build_comparisons(task, active, reference)

    def record(step):
        loss = objective(policy, comps, cfg.dpo)
        if not math.isfinite(loss):
            raise DivergenceError(f"toy training diverged at step {step}", index=step)
        rec = {"step": step, "loss": loss, "margin": float(heldout_margins(policy, task.heldout).mean()),
               "coverage": coverage}
        if on_step is not None:
            on_step(rec)
        return rec

    trace = [record(0)]
    for step in range(1, cfg.steps + 1):
        policy.weights -= cfg.learning_rate * objective_grad(policy, comps, cfg.dpo)
        trace.append(record(step))
    return ToyRun(trace, policy, reference, task, active)


def with_overrides(cfg: ToyTaskConfig, **kw) -> ToyTaskConfig:
    return replace(cfg, **kw)
