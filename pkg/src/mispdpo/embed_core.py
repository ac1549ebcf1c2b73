"""Fused prompt-image embeddings, difference vectors and similarity primitives.

Fusion flattens the outer product of an image embedding and a text embedding
in row-major order: flat index ``i * d_t + j`` holds ``image[i] * text[j]``.
Every downstream operation is order-agnostic, but checkpoints and fused files
depend on this convention staying fixed.
"""

from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

from mispdpo.errors import (
    DegenerateInputError,
    DimensionError,
    InsufficientDataError,
    NumericError,
)

DEFAULT_DIM_CAP = 65_536


def as_vector(values, name="vector"):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DimensionError(f"{name} must be a non-empty 1-D vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


def l2_normalize(values):
    arr = as_vector(values)
    norm = np.linalg.norm(arr)
    if norm == 0.0:
        raise DegenerateInputError("cannot normalize a zero vector")
    return arr / norm


def fuse(image_emb, text_emb, normalize=False) -> np.ndarray:
    """Fuse an image embedding and a text embedding into ``vec(h_v h_t^T)``.

    Args:
        image_emb: image-side embedding of length d_v.
        text_emb: prompt-side embedding of length d_t.
        normalize: L2-normalize both inputs before fusing. Off by default;
            embeddings are taken as given.

    Returns:
        Float64 vector of length d_v * d_t, row-major (image index outer).
    """
    hv = as_vector(image_emb, "image embedding")
    ht = as_vector(text_emb, "text embedding")
    if normalize:
        hv = l2_normalize(hv)
        ht = l2_normalize(ht)
    return np.outer(hv, ht).reshape(-1)


def fuse_rows(image_rows, text_rows, normalize=False) -> np.ndarray:
    """Row-wise :func:`fuse` for two aligned matrices."""
    hv = np.asarray(image_rows, dtype=np.float64)
    ht = np.asarray(text_rows, dtype=np.float64)
    if hv.ndim != 2 or ht.ndim != 2 or hv.shape[0] != ht.shape[0]:
        raise DimensionError(f"cannot fuse row sets of shapes {hv.shape} and {ht.shape}")
    if hv.shape[1] == 0 or ht.shape[1] == 0:
        raise DimensionError("embeddings must have positive dimension")
    if not (np.all(np.isfinite(hv)) and np.all(np.isfinite(ht))):
        raise NumericError("embeddings contain non-finite entries")
    if normalize:
        hn = np.linalg.norm(hv, axis=1, keepdims=True)
        tn = np.linalg.norm(ht, axis=1, keepdims=True)
        if np.any(hn == 0) or np.any(tn == 0):
            raise DegenerateInputError("cannot normalize a zero embedding")
        hv, ht = hv / hn, ht / tn
    return np.einsum("ni,nj->nij", hv, ht).reshape(hv.shape[0], -1)


@dataclass(frozen=True)
class DifferenceVector:
    """``e(positive, prompt) - e(candidate, prompt)`` tagged with the candidate id."""

    values: np.ndarray
    candidate_id: Hashable = None

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self):
        return self.values.shape[0]


def difference(positive, candidate, candidate_id=None) -> DifferenceVector:
    p = np.asarray(positive, dtype=np.float64)
    c = np.asarray(candidate, dtype=np.float64)
    if p.ndim != 1 or p.shape != c.shape:
        raise DimensionError(f"length mismatch: positive {p.shape} vs candidate {c.shape}")
    return DifferenceVector(p - c, candidate_id)


def difference_matrix(positive, candidates) -> np.ndarray:
    """Difference vectors of one positive against each candidate row."""
    p = np.asarray(positive, dtype=np.float64)
    c = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if p.ndim != 1 or c.shape[1] != p.shape[0]:
        raise DimensionError(f"length mismatch: positive {p.shape} vs candidates {c.shape}")
    return p[None, :] - c


def cosine(u, v) -> float:
    """Cosine similarity; ``1 - cosine`` is the diversity distance used in selection."""
    a = np.asarray(u, dtype=np.float64)
    b = np.asarray(v, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"cosine needs equal-length vectors, got {a.shape} and {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine is undefined for a zero-norm vector")
    c = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(-1.0, c))


@dataclass
class Projection:
    points: np.ndarray  # (n, 2)
    components: np.ndarray  # (2, d)
    explained_variance: np.ndarray  # (2,)
    mean: np.ndarray


def project_2d(vectors) -> Projection:
    """PCA onto the two leading principal components.

    Sign convention: the largest-magnitude loading of each component is made
    positive, which makes the output deterministic for a given input order.
    Variances use the ``n - 1`` normalization.
    """
    x = np.asarray([np.asarray(v, dtype=np.float64) for v in vectors])
    if x.ndim != 2 or x.shape[0] < 2:
        raise InsufficientDataError("project_2d needs at least 2 vectors")
    mean = x.mean(axis=0)
    centered = x - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    comps = np.zeros((2, x.shape[1]))
    var = np.zeros(2)
    k = min(2, vt.shape[0])
    comps[:k] = vt[:k]
    var[:k] = svals[:k] ** 2 / (x.shape[0] - 1)
    for r in range(k):
        pivot = np.argmax(np.abs(comps[r]))
        if comps[r, pivot] < 0:
            comps[r] = -comps[r]
    return Projection(centered @ comps.T, comps, var, mean)


def random_sign_projection(rows, target_dim, seed) -> np.ndarray:
    """Seeded Rademacher projection, scaled by ``1/sqrt(target_dim)``."""
    x = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    rng = np.random.default_rng(seed)
    signs = rng.choice(np.array([-1.0, 1.0]), size=(x.shape[1], target_dim))
    return x @ signs / np.sqrt(target_dim)


def cap_dimension(rows, limit=DEFAULT_DIM_CAP, target_dim=4096, seed=0, enabled=False):
    """Project rows down to ``target_dim`` when enabled and wider than ``limit``.

    Off by default: the full outer product is used unless a caller opts in.
    """
    x = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if not enabled or x.shape[1] <= limit:
        return x
    return random_sign_projection(x, target_dim, seed)


def stack(vectors: Sequence) -> np.ndarray:
    """Stack DifferenceVectors (or plain vectors) into a float64 matrix."""
    rows = [np.asarray(v, dtype=np.float64) for v in vectors]
    if not rows:
        raise InsufficientDataError("no vectors to stack")
    lengths = {r.shape for r in rows}
    if len(lengths) != 1:
        raise DimensionError(f"inconsistent vector shapes: {sorted(lengths)}")
    return np.vstack(rows)
