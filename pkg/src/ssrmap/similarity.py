"""Cosine similarity spaces and KL divergence between them.

A similarity space is the row-stochastic matrix obtained by taking all
pairwise cosine similarities of a set of vectors and pushing each row
through a temperature softmax.  Distances between two spaces built over
the same index set are measured row-wise with KL divergence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Probabilities below this floor are clamped inside log ratios so that a
# vanishing teacher entry cannot produce an infinite divergence.
PROB_FLOOR = 1e-12

DEFAULT_TEMPERATURE = 0.1

__all__ = [
    "PROB_FLOOR",
    "DEFAULT_TEMPERATURE",
    "SimilaritySpace",
    "cosine_similarity",
    "build_similarity_space",
    "kl_divergence_row",
    "kl_divergence_space",
]


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two vectors, in float64.

    Raises ValueError on mismatched dimensions or a zero-norm input.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError("cosine_similarity expects 1-D vectors")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm vector")
    return float(np.dot(a, b) / (na * nb))


def normalize_rows(matrix: np.ndarray, *, allow_zero: bool = False) -> np.ndarray:
    """Scale each row to unit L2 norm.

    With ``allow_zero`` a zero row is passed through unchanged instead of
    raising; callers that fuse optional text embeddings rely on that.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if not allow_zero and np.any(norms == 0.0):
        raise ValueError("zero-norm row cannot be normalized")
    safe = np.where(norms == 0.0, 1.0, norms)
    return matrix / safe


@dataclass(frozen=True)
class SimilaritySpace:
    """Pairwise cosine matrix plus its row-stochastic softmax form.

    ``sims`` holds raw cosines (diagonal is 1 by construction).  ``rows``
    holds softmax(sims / temperature) per row; when the diagonal is
    excluded those entries are zero and each row sums to 1 over the rest.
    """

    sims: np.ndarray
    rows: np.ndarray
    temperature: float
    exclude_diagonal: bool

    @property
    def size(self) -> int:
        return self.sims.shape[0]


def _softmax_rows(sims: np.ndarray, temperature: float, exclude_diagonal: bool) -> np.ndarray:
    n = sims.shape[0]
    scaled = sims / temperature
    if exclude_diagonal:
        np.fill_diagonal(scaled, -np.inf)
    scaled = scaled - scaled.max(axis=1, keepdims=True)
    expd = np.exp(scaled)
    return expd / expd.sum(axis=1, keepdims=True)


def build_similarity_space(
    vectors: np.ndarray,
    temperature: float = DEFAULT_TEMPERATURE,
    exclude_diagonal: bool = True,
) -> SimilaritySpace:
    """Build the similarity space of a stack of vectors.

    Args:
        vectors: (N, D) array, N >= 2, every row nonzero.
        temperature: softmax temperature, > 0.
        exclude_diagonal: drop self-similarity from the row distributions.

    Returns:
        SimilaritySpace in float64.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] < 2:
        raise ValueError("similarity space needs a (N, D) stack with N >= 2")
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(vectors)):
        raise ValueError("non-finite values in input vectors")
    unit = normalize_rows(vectors)
    sims = unit @ unit.T
    # Dot products commute exactly in IEEE arithmetic, but symmetrize anyway
    # so downstream equality checks never depend on the BLAS kernel.
    sims = (sims + sims.T) / 2.0
    np.fill_diagonal(sims, 1.0)
    rows = _softmax_rows(sims.copy(), temperature, exclude_diagonal)
    return SimilaritySpace(
        sims=sims,
        rows=rows,
        temperature=float(temperature),
        exclude_diagonal=bool(exclude_diagonal),
    )


def kl_divergence_row(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) for two probability rows, in nats.

    ``q`` entries are floored at PROB_FLOOR inside the ratio; terms with
    p == 0 contribute exactly zero.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("row shapes differ")
    if np.any(p < 0.0) or np.any(q < 0.0):
        raise ValueError("negative probabilities")
    q = np.maximum(q, PROB_FLOOR)
    mask = p > 0.0
    terms = np.zeros_like(p)
    terms[mask] = p[mask] * np.log(p[mask] / q[mask])
    return float(terms.sum())


def kl_divergence_space(
    student: SimilaritySpace,
    teacher: SimilaritySpace,
    *,
    swap: bool = False,
) -> float:
    """Sum over rows of KL(student_row || teacher_row), in nats.

    ``swap=True`` reverses the direction to KL(teacher || student).
    Implemented literally as a sum of kl_divergence_row calls so the
    space-level value is exactly the sum of row-level values.
    """
    if student.size != teacher.size:
        raise ValueError(f"space sizes differ: {student.size} vs {teacher.size}")
    total = 0.0
    for j in range(student.size):
        if swap:
            total += kl_divergence_row(teacher.rows[j], student.rows[j])
        else:
            total += kl_divergence_row(student.rows[j], teacher.rows[j])
    return total
