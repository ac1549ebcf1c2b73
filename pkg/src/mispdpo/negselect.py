"""Candidate scoring and greedy diversity-promoting negative selection.

Each candidate's difference vector is scored by how hard the SAE finds it to
reconstruct plus how strongly it activates the code, both normalized by the
pool maximum. Selection then greedily adds the candidate maximizing
``score + diversity_weight * min_j (1 - cos(code_i, code_j))`` over the
already-selected ``j``.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Hashable, List, Optional, Sequence

import numpy as np

from mispdpo.embed_core import difference_matrix
from mispdpo.errors import ConfigError, DataError, DegenerateInputError, InsufficientDataError
from mispdpo.sae import SaeModel, decode, encode

MANIFEST_FORMAT = "misp-sel-v1"


@dataclass(frozen=True)
class SelectionConfig:
    k: int = 3
    diversity_weight: float = 0.5

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("selection size k must be at least 1")
        if self.diversity_weight < 0 or not math.isfinite(self.diversity_weight):
            raise ConfigError("diversity_weight must be a finite nonnegative number")


@dataclass(frozen=True)
class CandidateScore:
    candidate_id: Hashable
    recon_error: float
    act_l1: float
    score: float


@dataclass(frozen=True)
class Pick:
    candidate_id: Hashable
    score: float
    diversity_bonus: float


@dataclass
class SelectionManifest:
    prompt_id: Optional[str]
    positive_id: Optional[str]
    selected: List[Pick]
    config: SelectionConfig
    coverage: Optional[int] = None
    extra: dict = field(default_factory=dict)

    @property
    def ids(self):
        return [p.candidate_id for p in self.selected]

    def to_dict(self):
        doc = {
            "format": MANIFEST_FORMAT,
            "prompt_id": self.prompt_id,
            "positive_id": self.positive_id,
            "config": asdict(self.config),
            "selected": [
                {"id": p.candidate_id, "score": p.score, "diversity_bonus": p.diversity_bonus}
                for p in self.selected
            ],
        }
        if self.coverage is not None:
            doc["coverage"] = self.coverage
        doc.update(self.extra)
        return doc

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != MANIFEST_FORMAT:
            raise DataError(f"not a {MANIFEST_FORMAT} manifest")
        known = {"format", "prompt_id", "positive_id", "config", "selected", "coverage"}
        return cls(
            prompt_id=doc.get("prompt_id"),
            positive_id=doc.get("positive_id"),
            selected=[Pick(s["id"], s["score"], s["diversity_bonus"]) for s in doc["selected"]],
            config=SelectionConfig(**doc["config"]),
            coverage=doc.get("coverage"),
            extra={k: v for k, v in doc.items() if k not in known},
        )

    def to_json(self):
        return json.dumps(self.to_dict())


def normalized_scores(recon_errors, act_l1):
    """``l / max(l) + v / max(v)``; a term whose pool maximum is 0 contributes 0."""
    ell = np.asarray(recon_errors, dtype=np.float64)
    v = np.asarray(act_l1, dtype=np.float64)
    ell_max, v_max = ell.max(), v.max()
    left = ell / ell_max if ell_max > 0 else np.zeros_like(ell)
    right = v / v_max if v_max > 0 else np.zeros_like(v)
    return left + right


def score_candidates(model: SaeModel, diffs, ids: Optional[Sequence] = None) -> List[CandidateScore]:
    """Score a candidate pool of difference vectors under a trained SAE.

    Args:
        model: trained SAE.
        diffs: DifferenceVectors or an (n, D) matrix of difference rows.
        ids: candidate ids; taken from the DifferenceVectors, else row indices.
    """
    rows = list(diffs) if not isinstance(diffs, np.ndarray) else diffs
    if len(rows) == 0:
        raise InsufficientDataError("empty candidate pool")
    if ids is None:
        ids = [getattr(r, "candidate_id", None) for r in rows] if not isinstance(rows, np.ndarray) else []
        if not ids or any(i is None for i in ids):
            ids = list(range(len(rows)))
    x = np.vstack([np.asarray(r, dtype=np.float64) for r in rows])
    code = encode(model, x)
    resid = x - decode(model, code)
    ell = np.sum(resid * resid, axis=1)
    v = np.sum(np.abs(code), axis=1)
    s = normalized_scores(ell, v)
    return [CandidateScore(i, float(a), float(b), float(c)) for i, a, b, c in zip(ids, ell, v, s)]


def _check_inputs(scores, codes):
    if len(scores) == 0:
        raise InsufficientDataError("empty candidate pool")
    if len(scores) != len(codes):
        raise DataError(f"{len(scores)} scores but {len(codes)} codes")


def greedy_select(scores: Sequence[CandidateScore], codes, config: SelectionConfig,
                  prompt_id=None, positive_id=None) -> SelectionManifest:
    """Greedy diversity-promoting top-K selection.

    The diversity term is 0 for the first pick. Ties go to the smallest
    candidate index. Stops after ``min(K, pool size)`` picks.

    Raises:
        DegenerateInputError: some code has zero norm (ids listed).
    """
    _check_inputs(scores, codes)
    c = np.asarray(codes, dtype=np.float64)
    norms = np.linalg.norm(c, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        bad = [scores[i].candidate_id for i in zero]
        raise DegenerateInputError(f"zero-norm codes for candidates {bad}")
    unit = c / norms[:, None]
    s = np.array([sc.score for sc in scores], dtype=np.float64)
    n = len(scores)
    min_dist = np.zeros(n)
    available = np.ones(n, dtype=bool)
    picks = []
    for step in range(min(config.k, n)):
        bonus = config.diversity_weight * min_dist if step else np.zeros(n)
        objective = np.where(available, s + bonus, -np.inf)
        best = int(np.argmax(objective))  # first occurrence on ties
        picks.append(Pick(scores[best].candidate_id, float(s[best]), float(bonus[best])))
        available[best] = False
        dist = 1.0 - np.clip(unit @ unit[best], -1.0, 1.0)
        min_dist = dist if step == 0 else np.minimum(min_dist, dist)
    return SelectionManifest(prompt_id, positive_id, picks, config)


def reference_select(scores: Sequence[CandidateScore], codes, config: SelectionConfig,
                     prompt_id=None, positive_id=None) -> SelectionManifest:
    """Straight-line version of :func:`greedy_select` for differential testing."""
    _check_inputs(scores, codes)
    vecs = [[float(t) for t in row] for row in codes]
    lengths = [math.sqrt(sum(t * t for t in row)) for row in vecs]
    bad = [scores[i].candidate_id for i in range(len(vecs)) if lengths[i] == 0.0]
    if bad:
        raise DegenerateInputError(f"zero-norm codes for candidates {bad}")

    def cos(i, j):
        dot = sum(a * b for a, b in zip(vecs[i], vecs[j]))
        return max(-1.0, min(1.0, dot / (lengths[i] * lengths[j])))

    chosen = []
    picks = []
    while len(chosen) < min(config.k, len(scores)):
        best, best_val, best_bonus = None, None, None
        for i in range(len(scores)):
            if i in chosen:
                continue
            if chosen:
                bonus = config.diversity_weight * min(1.0 - cos(i, j) for j in chosen)
            else:
                bonus = 0.0
            val = scores[i].score + bonus
            if best is None or val > best_val:
                best, best_val, best_bonus = i, val, bonus
        chosen.append(best)
        picks.append(Pick(scores[best].candidate_id, scores[best].score, best_bonus))
    return SelectionManifest(prompt_id, positive_id, picks, config)


def coverage(selected_ids, labels) -> int:
    """Number of distinct ground-truth factors among the selected ids."""
    return len({labels[i] for i in selected_ids})


def select_negatives(model: SaeModel, positive, candidates, candidate_ids, config: SelectionConfig,
                     prompt_id=None, positive_id=None, labels=None) -> SelectionManifest:
    """Full pipeline for one positive: differences, scores, codes, greedy selection."""
    diffs = difference_matrix(positive, candidates)
    scored = score_candidates(model, diffs, list(candidate_ids))
    manifest = greedy_select(scored, encode(model, diffs), config, prompt_id, positive_id)
    if labels is not None:
        manifest.coverage = coverage(manifest.ids, labels)
    return manifest
