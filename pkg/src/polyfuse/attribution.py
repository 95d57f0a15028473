"""Integrated-gradients token attribution, similarity matrices, and PCA.

Attribution treats the trained network as a function of the pooled text
embedding: a wrapper mean-pools the token-level vectors, so the path
integral from a zero baseline distributes the prediction over tokens.
The path integral uses the midpoint Riemann rule; for a linear model it
is exact for any step count, and the residual violation of the
completeness axiom (attributions summing to F(x) - F(baseline)) is
reported, never hidden.  Per-token scores are summed over embedding
dimensions, and regrouping raw subword scores onto chemical tokens uses
the total-preserving weighted sum from the tokenizer module.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import psmiles
from .embed_store import mean_pool
from .errors import DataError, NumericalError
from .model import ModelParams, input_gradient, predict
from .ndmath import ShapeMismatchError

PooledGradFn = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
"""Maps a batch of pooled inputs (m, dim) to (values (m,), gradients (m, dim))."""


@dataclass
class Attribution:
    polymer_id: str
    tokens: list[str]
    scores: np.ndarray
    completeness_gap: float
    output: float  # F(x)
    baseline_output: float  # F(baseline)
    normalized_scores: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "polymer_id": self.polymer_id,
            "tokens": list(self.tokens),
            "scores": [float(s) for s in self.scores],
            "normalized_scores": None
            if self.normalized_scores is None
            else [float(s) for s in self.normalized_scores],
            "completeness_gap": self.completeness_gap,
            "output": self.output,
            "baseline_output": self.baseline_output,
        }


def integrated_gradients(
    pooled_fn: PooledGradFn,
    token_vectors: np.ndarray,
    steps: int,
    baseline: np.ndarray | None = None,
) -> tuple[np.ndarray, float, float]:
    """Midpoint-rule integrated gradients through a mean-pooling wrapper.

    Returns (per-token scores summed over dims, F(x), F(baseline)).
    The wrapper F(T) = f(mean(T)) makes dF/dT[k, d] = f'(pooled)[d] / n,
    and the straight path from the baseline pools to a straight path in
    the pooled space, so one batched gradient call covers all steps.
    """
    token_vectors = np.asarray(token_vectors, dtype=np.float64)
    if token_vectors.ndim != 2 or token_vectors.shape[0] < 1:
        raise ShapeMismatchError("token_vectors must be (n_tokens, dim) with n_tokens >= 1")
    if steps < 1:
        raise DataError(f"step count must be >= 1, got {steps}")
    n_tok = token_vectors.shape[0]
    if baseline is None:
        baseline = np.zeros_like(token_vectors)
    baseline = np.asarray(baseline, dtype=np.float64)
    if baseline.shape != token_vectors.shape:
        raise ShapeMismatchError("baseline shape must match token_vectors")

    pooled_x = mean_pool(token_vectors)
    pooled_b = mean_pool(baseline)
    alphas = (np.arange(1, steps + 1) - 0.5) / steps
    path = pooled_b + alphas[:, None] * (pooled_x - pooled_b)
    _, grads = pooled_fn(path)
    avg_grad = grads.mean(axis=0) / n_tok
    scores = ((token_vectors - baseline) * avg_grad).sum(axis=1)

    fx = float(pooled_fn(pooled_x[None, :])[0][0])
    fb = float(pooled_fn(pooled_b[None, :])[0][0])
    gap = abs(float(scores.sum()) - (fx - fb))
    return scores, fx, fb


def model_pooled_fn(params: ModelParams, uni_vec: np.ndarray) -> PooledGradFn:
    """Eval-mode network as a function of the pooled text embedding,
    with the structural embedding held fixed."""
    uni_vec = np.asarray(uni_vec, dtype=np.float64)
    if uni_vec.shape != (params.config.uni_dim,):
        raise ShapeMismatchError(
            f"structural vector shape {uni_vec.shape} != ({params.config.uni_dim},)"
        )

    def fn(pooled_batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        uni = np.broadcast_to(uni_vec, (pooled_batch.shape[0], uni_vec.shape[0]))
        return input_gradient(params, pooled_batch, uni)

    return fn


def attribute_tokens(
    params: ModelParams,
    tokens: list[str],
    token_vectors: np.ndarray,
    uni_vec: np.ndarray,
    steps: int = 64,
    merge: bool = True,
    polymer_id: str = "",
) -> Attribution:
    """Per-token attributions for one polymer, optionally regrouped onto
    the chemical tokenization of the concatenated token text."""
    if len(tokens) != np.asarray(token_vectors).shape[0]:
        raise DataError("one vector row per token required")
    scores, fx, fb = integrated_gradients(
        model_pooled_fn(params, uni_vec), token_vectors, steps
    )
    out_tokens = list(tokens)
    if merge:
        joined = "".join(tokens)
        targets = [t.text for t in psmiles.tokenize(joined)]
        if targets != out_tokens:
            merge_map = psmiles.build_merge_map(out_tokens, targets)
            scores = psmiles.merge_scores(scores, merge_map)
            out_tokens = targets
    gap = abs(float(scores.sum()) - (fx - fb))
    return Attribution(polymer_id, out_tokens, scores, gap, fx, fb)


def normalize_by_star(attribution: Attribution) -> Attribution:
    """Divide all scores by the first "[*]" token's score."""
    try:
        star = attribution.tokens.index(psmiles.CONNECTION)
    except ValueError:
        raise DataError(
            f"no {psmiles.CONNECTION} token to normalize by for {attribution.polymer_id!r}"
        ) from None
    ref = float(attribution.scores[star])
    if ref == 0.0:
        raise NumericalError(
            f"reference {psmiles.CONNECTION} score is exactly zero for "
            f"{attribution.polymer_id!r}"
        )
    return replace(attribution, normalized_scores=attribution.scores / ref)


# ---------------------------------------------------------------------------
# Token cosine similarity


@dataclass
class SimilarityMatrix:
    tokens: list[str]
    matrix: np.ndarray  # (n, n); NaN rows/cols for zero-norm vectors
    threshold: float
    edges: list[tuple[int, int, float]]
    undefined: list[int]

    def to_dict(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "threshold": self.threshold,
            "matrix": [[None if np.isnan(v) else float(v) for v in row] for row in self.matrix],
            "edges": [
                {"i": i, "j": j, "token_i": self.tokens[i], "token_j": self.tokens[j], "value": v}
                for i, j, v in self.edges
            ],
            "undefined": list(self.undefined),
        }


def cosine_matrix(
    tokens: list[str], vectors: np.ndarray, threshold: float = 0.5
) -> SimilarityMatrix:
    """Pairwise cosine similarities with an edge list at >= threshold.

    Zero-norm vectors are flagged and their rows/columns marked
    undefined (NaN) rather than silently zeroed.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] != len(tokens):
        raise DataError("one vector row per token required")
    norms = np.linalg.norm(vectors, axis=1)
    undefined = [i for i, nv in enumerate(norms) if nv == 0.0]
    safe = np.where(norms > 0, norms, 1.0)
    unit = vectors / safe[:, None]
    matrix = unit @ unit.T
    np.fill_diagonal(matrix, 1.0)
    np.clip(matrix, -1.0, 1.0, out=matrix)
    for i in undefined:
        matrix[i, :] = np.nan
        matrix[:, i] = np.nan
    edges = [
        (i, j, float(matrix[i, j]))
        for i in range(len(tokens))
        for j in range(i + 1, len(tokens))
        if not np.isnan(matrix[i, j]) and matrix[i, j] >= threshold
    ]
    return SimilarityMatrix(list(tokens), matrix, threshold, edges, undefined)


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PcaResult:
    coords: np.ndarray  # (n, k)
    explained_variance_ratio: np.ndarray  # (k,)
    components: np.ndarray  # (k, d)
    mean: np.ndarray  # (d,)


def pca_reduce(matrix: np.ndarray, k: int) -> PcaResult:
    """Project onto the top-k principal axes of the mean-centered data.

    Implemented by SVD of the centered matrix; component signs are fixed
    so each component's largest-magnitude coordinate is positive.
    """
    X = np.asarray(matrix, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DataError("pca needs an (n >= 2, d) matrix")
    if not 1 <= k <= min(X.shape):
        raise DataError(f"k must be in [1, {min(X.shape)}], got {k}")
    mean = X.mean(axis=0)
    centered = X - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    variances = s**2 / (X.shape[0] - 1)
    total = float(variances.sum())
    components = vt[:k].copy()
    for i in range(k):
        pivot = int(np.argmax(np.abs(components[i])))
        if components[i, pivot] < 0:
            components[i] = -components[i]
    coords = centered @ components.T
    ratio = variances[:k] / total if total > 0 else np.zeros(k)
    return PcaResult(coords, ratio, components, mean)
