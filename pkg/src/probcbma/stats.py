"""Statistical post-processing: G-test, Bonferroni, F1, consistency.

Contingency tables may hold weighted (fractional) study counts: in soft mode
each study contributes its formula weight instead of a 0/1 indicator, which
reduces to ordinary counts under hard thresholding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.special import erfc


@dataclass(frozen=True)
class ContingencyTable2x2:
    """Study counts cross-classifying voxel activation x condition match."""

    n11: float  # activated, condition matched
    n10: float  # activated, not matched
    n01: float  # not activated, matched
    n00: float  # not activated, not matched

    def __post_init__(self):
        cells = (self.n11, self.n10, self.n01, self.n00)
        if any(c < 0 for c in cells):
            raise ValueError("contingency counts must be >= 0")
        if sum(cells) <= 0:
            raise ValueError("contingency table is empty")


def g_test(table: ContingencyTable2x2) -> tuple:
    """Likelihood-ratio test of independence, ``G = 2 sum O ln(O/E)``.

    Returns ``(G, p)`` with the p-value from the chi-square survival function
    at one degree of freedom.  A zero margin makes the table degenerate;
    by convention it carries no evidence (``G = 0, p = 1``).
    """
    n11, n10, n01, n00 = table.n11, table.n10, table.n01, table.n00
    total = n11 + n10 + n01 + n00
    row1, row0 = n11 + n10, n01 + n00
    col1, col0 = n11 + n01, n10 + n00
    if min(row1, row0, col1, col0) <= 0:
        return 0.0, 1.0
    g = 0.0
    for observed, expected in (
        (n11, row1 * col1 / total),
        (n10, row1 * col0 / total),
        (n01, row0 * col1 / total),
        (n00, row0 * col0 / total),
    ):
        if observed > 0:
            g += observed * math.log(observed / expected)
    g = max(0.0, 2.0 * g)
    return g, chi2_sf_1df(g)


def chi2_sf_1df(g):
    """Chi-square survival function with one degree of freedom."""
    return erfc(np.sqrt(np.asarray(g, dtype=float) / 2.0))


def effective_sample_size(weights: np.ndarray) -> float:
    """Kish effective sample size ``(sum w)^2 / sum w^2`` of a weight vector."""
    weights = np.asarray(weights, dtype=float)
    denominator = float(np.sum(weights**2))
    if denominator <= 0.0:
        return 0.0
    return float(np.sum(weights)) ** 2 / denominator


def weighted_contingency(y_column: np.ndarray, weights: np.ndarray) -> ContingencyTable2x2:
    """Cross-classify activation against fractional condition weights.

    Each side of the table is scaled to its Kish effective sample size, so
    the evidence carried by fractional weights is neither inflated by raw
    study counts nor shrunk by the weight scale.  For 0/1 weights this is
    exactly the ordinary count table.
    """
    y_column = np.asarray(y_column, dtype=float)
    weights = np.asarray(weights, dtype=float)
    tables = []
    for side in (weights, 1.0 - weights):
        total = side.sum()
        n_eff = effective_sample_size(side)
        activated = float(side @ y_column) / total if total > 0 else 0.0
        tables.append((n_eff * activated, n_eff * (1.0 - activated)))
    (n11, n01), (n10, n00) = tables
    return ContingencyTable2x2(n11, n10, n01, n00)


def g_test_map(y: sparse.spmatrix, weights: np.ndarray) -> tuple:
    """Vectorized per-voxel G-test against the study weight vector.

    ``y`` is the study-by-voxel activation matrix, ``weights`` the per-study
    condition weights; returns arrays ``(G, p)`` of length K.  Tables are
    built as in `weighted_contingency`.
    """
    y = sparse.csr_matrix(y)
    weights = np.asarray(weights, dtype=float)
    cells = []
    for side in (weights, 1.0 - weights):
        total = float(side.sum())
        n_eff = effective_sample_size(side)
        if total > 0:
            activated = y.T.dot(side) / total
        else:
            activated = np.zeros(y.shape[1])
        cells.append((n_eff * activated, n_eff * (1.0 - activated)))
    (n11, n01), (n10, n00) = cells

    total = n11 + n10 + n01 + n00
    row1 = n11 + n10
    row0 = n01 + n00
    col1 = n11 + n01
    col0 = n10 + n00
    degenerate = (row1 <= 0) | (row0 <= 0) | (col1 <= 0) | (col0 <= 0) | (total <= 0)
    safe_total = np.where(total > 0, total, 1.0)

    g = np.zeros_like(n11)
    for observed, expected in (
        (n11, row1 * col1 / safe_total),
        (n10, row1 * col0 / safe_total),
        (n01, row0 * col1 / safe_total),
        (n00, row0 * col0 / safe_total),
    ):
        mask = (observed > 0) & ~degenerate
        g[mask] += observed[mask] * np.log(observed[mask] / expected[mask])
    g = np.maximum(0.0, 2.0 * g)
    p = chi2_sf_1df(g)
    g[degenerate] = 0.0
    p[degenerate] = 1.0
    return g, p


def bonferroni_threshold(p_values: Sequence[float], base: float = 0.01) -> np.ndarray:
    """Significance flags under the family-wise corrected threshold base/K."""
    p_values = np.asarray(p_values, dtype=float)
    if p_values.size == 0:
        raise ValueError("empty p-value list")
    return p_values < base / p_values.size


def f1_score(predicted: Sequence, truth: Sequence) -> float:
    """Harmonic mean of precision and recall; 0 when both are undefined."""
    predicted = np.asarray(predicted, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if predicted.shape != truth.shape:
        raise ValueError(f"length mismatch: {predicted.shape} vs {truth.shape}")
    tp = float(np.sum(predicted & truth))
    fp = float(np.sum(predicted & ~truth))
    fn = float(np.sum(~predicted & truth))
    if tp == 0.0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)


def consistency(activation_matrix) -> float:
    """Stability of thresholded maps across sub-samples.

    Rows are sub-samples, columns voxels; per voxel the score is
    ``1 - 2*|mean - 1/2|``, averaged over voxels.  1 means every sub-sample
    agrees, 0 means a coin flip.
    """
    matrix = np.asarray(activation_matrix, dtype=float)
    if matrix.ndim != 2 or matrix.size == 0:
        raise ValueError("activation matrix must be a nonempty 2-D array")
    means = matrix.mean(axis=0)
    return float(np.mean(1.0 - 2.0 * np.abs(means - 0.5)))
