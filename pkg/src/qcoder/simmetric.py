"""Composite similarity between two hierarchical codebooks.

Blends semantic similarity (embedding cosine over "name: definition"
texts, rescaled to [0,1]) with structural similarity (depth, relative
path position, and subtree size), aligns code pairs with the Hungarian
algorithm, and averages the per-weighting means over nine semantic
weights 0.1..0.9 into a single blended score.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .models import Code, Codebook

Embedder = Callable[[Sequence[str]], list[list[float]]]

DEFAULT_WEIGHTS = tuple(round(0.1 * i, 1) for i in range(1, 10))


def code_text(code: Code) -> str:
    return f"{code.name}: {code.definition}" if code.definition else code.name


def semantic_similarity_matrix(
    codes_a: Sequence[Code], codes_b: Sequence[Code], embedder: Embedder
) -> np.ndarray:
    """Pairwise (cos + 1) / 2 over sentence embeddings of code texts."""
    texts = [code_text(c) for c in codes_a] + [code_text(c) for c in codes_b]
    vecs = np.asarray(embedder(texts), dtype=float)
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    vecs = vecs / norms
    ea, eb = vecs[: len(codes_a)], vecs[len(codes_a) :]
    cos = np.clip(ea @ eb.T, -1.0, 1.0)
    return (cos + 1.0) / 2.0


def semantic_similarity(c1: Code, c2: Code, embedder: Embedder) -> float:
    return float(semantic_similarity_matrix([c1], [c2], embedder)[0, 0])


def structural_components(
    c1: Code, t1: Codebook, c2: Code, t2: Codebook
) -> tuple[float, float, float]:
    d1, d2 = t1.depth(c1.id), t2.depth(c2.id)
    h1, h2 = t1.height(), t2.height()
    max_depth = max(1, h1, h2)
    s_level = 1.0 - abs(d1 - d2) / max_depth
    r1 = d1 / h1 if h1 > 0 else 1.0
    r2 = d2 / h2 if h2 > 0 else 1.0
    s_path = 1.0 - abs(r1 - r2)
    n1, n2 = len(t1.descendants(c1.id)), len(t2.descendants(c2.id))
    s_subtree = 1.0 - abs(n1 - n2) / max(1, n1, n2)
    return s_level, s_path, s_subtree


def structural_similarity(c1: Code, t1: Codebook, c2: Code, t2: Codebook) -> float:
    s_level, s_path, s_subtree = structural_components(c1, t1, c2, t2)
    return (s_level + s_path + s_subtree) / 3.0


def hungarian_match(
    score_matrix: np.ndarray, maximize: bool = True
) -> tuple[list[tuple[int, Optional[int]]], float]:
    """Optimal one-to-one assignment; rectangular matrices are padded
    with zero-score dummies and dummy-matched rows report None."""
    m = np.asarray(score_matrix, dtype=float)
    if m.size == 0:
        raise ValueError("empty score matrix")
    if not np.isfinite(m).all():
        raise ValueError("score matrix must be finite")
    rows, cols = m.shape
    size = max(rows, cols)
    padded = np.zeros((size, size))
    padded[:rows, :cols] = m
    ri, ci = linear_sum_assignment(padded, maximize=maximize)
    matching: list[tuple[int, Optional[int]]] = []
    total = 0.0
    for r, c in zip(ri, ci):
        if r < rows:
            if c < cols:
                matching.append((int(r), int(c)))
                total += m[r, c]
            else:
                matching.append((int(r), None))
    return matching, total


@dataclass
class SimilarityReport:
    weights: list[float]
    pair_matrices: dict[float, list[list[float]]]
    matchings: dict[float, list[tuple[int, Optional[int]]]]
    per_weighting_mean: dict[float, float]
    s_bar: float
    components: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights,
            "pair_matrices": {str(a): m for a, m in self.pair_matrices.items()},
            "matchings": {
                str(a): [[h, l] for h, l in m] for a, m in self.matchings.items()
            },
            "per_weighting_mean": {str(a): v for a, v in self.per_weighting_mean.items()},
            "s_bar": self.s_bar,
            "components": self.components,
        }


def codebook_similarity(
    human: Codebook,
    generated: Codebook,
    embedder: Embedder,
    weights: Sequence[float] = DEFAULT_WEIGHTS,
) -> SimilarityReport:
    """Blended similarity of a generated codebook against a human one.

    For each semantic weight alpha, the pairwise score matrix
    alpha*S_sim + (1-alpha)*S_str is Hungarian-matched; the per-weighting
    mean divides the matched totals by |human codes| (unmatched human
    codes contribute zero), and the final score averages the weightings.
    """
    if not human.codes or not generated.codes:
        raise ValueError("both codebooks must be nonempty")
    hc, lc = human.codes, generated.codes
    sem = semantic_similarity_matrix(hc, lc, embedder)
    struct = np.zeros((len(hc), len(lc)))
    comp: dict[str, list] = {"s_level": [], "s_path": [], "s_subtree": []}
    for i, c1 in enumerate(hc):
        row_l, row_p, row_s = [], [], []
        for j, c2 in enumerate(lc):
            s_level, s_path, s_subtree = structural_components(c1, human, c2, generated)
            struct[i, j] = (s_level + s_path + s_subtree) / 3.0
            row_l.append(s_level)
            row_p.append(s_path)
            row_s.append(s_subtree)
        comp["s_level"].append(row_l)
        comp["s_path"].append(row_p)
        comp["s_subtree"].append(row_s)
    comp["s_sim"] = sem.tolist()
    comp["s_str"] = struct.tolist()

    pair_matrices: dict[float, list[list[float]]] = {}
    matchings: dict[float, list[tuple[int, Optional[int]]]] = {}
    means: dict[float, float] = {}
    for alpha in weights:
        blended = alpha * sem + (1.0 - alpha) * struct
        matching, total = hungarian_match(blended, maximize=True)
        pair_matrices[alpha] = blended.tolist()
        matchings[alpha] = matching
        means[alpha] = total / len(hc)

    s_bar = float(np.mean(list(means.values())))
    return SimilarityReport(
        weights=list(weights),
        pair_matrices=pair_matrices,
        matchings=matchings,
        per_weighting_mean=means,
        s_bar=s_bar,
        components=comp,
    )
