"""Synthetic CBMA databases with ground-truth query-linked voxels.

Pipeline: per-study term frequencies follow a logistic-normal distribution
(softmax of a correlated Gaussian), inverse document frequencies turn them
into TF-IDF features, and per-voxel coefficient vectors, drawn by rejection
so that exactly ``round(active_fraction * K)`` voxels respond to the query
terms, drive Bernoulli activation sampling.  The designated voxels form the
``truth`` vector used by the F1 benchmark.

The paper-level description of the coefficient sampler is reconstructed here;
the contract this module guarantees is the controlled proportion of
query-linked voxels and their elevated activation probability in studies
whose query-term weights exceed one half.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy.special import expit

from .cbma import CbmaDataset

DEFAULT_ACTIVE_FRACTION = 0.05


class RejectionBudgetExceeded(Exception):
    """The coefficient sampler hit its redraw cap."""


def default_mu(n_terms: int, spread: float = 2.0) -> np.ndarray:
    """Spread per-term means so document frequencies vary across terms."""
    return np.linspace(-spread, spread, n_terms)


def default_sigma(n_terms: int, n_blocks: int = 3, rho: float = 0.5, variance: float = 4.0):
    """Block-correlated covariance: terms split into groups, correlation
    ``rho`` within a group, none across."""
    sigma = np.eye(n_terms)
    bounds = np.linspace(0, n_terms, n_blocks + 1).astype(int)
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        sigma[lo:hi, lo:hi] = rho
    np.fill_diagonal(sigma, 1.0)
    return sigma * variance


@dataclass(frozen=True)
class GenConfig:
    """Knobs of the generative model; ``mu``/``sigma`` default to the
    synthetic block-correlated parameters above."""

    n_studies: int
    n_terms: int = 11
    n_voxels: int = 1000
    active_fraction: float = DEFAULT_ACTIVE_FRACTION
    mu: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None
    # Latent relevance ramp.  Slightly more inclusive than the analysis
    # threshold of 0.1: studies just under it can still be genuinely relevant,
    # which is what hard thresholding misses.
    tau: float = 0.09
    alpha: float = 150.0
    query: Optional[tuple] = None  # pair of term indices; defaults to a correlated pair
    seed: int = 0
    base_rate: float = 0.02  # marginal voxel activation probability
    coef_noise: float = 0.6  # sd of background voxel coefficients
    link_threshold: float = 1.2  # minimum query-term coefficient for linked voxels
    rejection_cap: int = 100_000
    presence_cutoff: Optional[float] = None  # default 1/(10*M)

    def __post_init__(self):
        if not 0 < self.active_fraction < 1:
            raise ValueError("active_fraction must be in (0, 1)")
        if min(self.n_studies, self.n_terms, self.n_voxels) < 1:
            raise ValueError("n_studies, n_terms and n_voxels must be >= 1")

    def resolved_mu(self):
        mu = default_mu(self.n_terms) if self.mu is None else np.asarray(self.mu, float)
        if mu.shape != (self.n_terms,):
            raise ValueError(f"mu must have length {self.n_terms}")
        return mu

    def resolved_sigma(self):
        sigma = (
            default_sigma(self.n_terms)
            if self.sigma is None
            else np.asarray(self.sigma, float)
        )
        if sigma.shape != (self.n_terms, self.n_terms):
            raise ValueError(f"sigma must be {self.n_terms}x{self.n_terms}")
        if not np.allclose(sigma, sigma.T):
            raise ValueError("sigma must be symmetric")
        return sigma

    def resolved_query(self):
        if self.query is not None:
            a, b = self.query
            return int(a), int(b)
        # A correlated pair: the first two terms share a covariance block.
        return 0, 1

    def resolved_cutoff(self):
        return (
            1.0 / (10.0 * self.n_terms)
            if self.presence_cutoff is None
            else self.presence_cutoff
        )


@dataclass(frozen=True)
class SimulatedDataset:
    dataset: CbmaDataset
    truth: np.ndarray  # bool, length K
    config: GenConfig = field(compare=False)

    def write(self, directory) -> None:
        directory = Path(directory)
        self.dataset.to_tsv(directory)
        pd.DataFrame(
            {"voxel_id": self.dataset.voxels, "truth": self.truth.astype(int)}
        ).to_csv(directory / "truth.tsv", sep="\t", index=False)


def _psd_factor(sigma: np.ndarray) -> np.ndarray:
    """Cholesky-like factor accepting positive semi-definite matrices."""
    if not sigma.any():
        return np.zeros_like(sigma)
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        eigenvalues, vectors = np.linalg.eigh(sigma)
        if eigenvalues.min() < -1e-10 * max(1.0, eigenvalues.max()):
            raise np.linalg.LinAlgError(
                f"sigma is not positive semi-definite (min eigenvalue {eigenvalues.min()})"
            ) from None
        return vectors * np.sqrt(np.clip(eigenvalues, 0.0, None))


def sample_term_frequencies(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """Logistic-normal term-frequency vectors, one row per study, rows sum to 1."""
    mu = cfg.resolved_mu()
    factor = _psd_factor(cfg.resolved_sigma())
    gaussian = rng.standard_normal((cfg.n_studies, cfg.n_terms)) @ factor.T + mu
    shifted = gaussian - gaussian.max(axis=1, keepdims=True)
    tf = np.exp(shifted)
    tf /= tf.sum(axis=1, keepdims=True)
    return tf


def compute_idf(tf_matrix: np.ndarray, presence_cutoff: float = 0.0) -> np.ndarray:
    """``idf_j = ln(N / (1 + df_j))`` clamped at zero, with ``df_j`` the number
    of studies whose term frequency exceeds the presence cutoff."""
    tf_matrix = np.asarray(tf_matrix)
    if tf_matrix.size == 0:
        raise ValueError("empty term-frequency matrix")
    n = tf_matrix.shape[0]
    df = (tf_matrix > presence_cutoff).sum(axis=0)
    return np.clip(np.log(n / (1.0 + df)), 0.0, None)


def sample_activations(cfg: GenConfig, x: np.ndarray, rng: np.random.Generator):
    """Draw the activation matrix ``Y`` and the truth vector.

    Studies match the query through a latent Bernoulli draw whose success
    probability is the product of the two query terms' soft weights, so
    studies just below the hard threshold still carry real signal.  Per-voxel
    coefficient vectors are rejection-sampled: a predetermined subset of
    ``round(active_fraction * K)`` voxels must come out query-linked (both
    query-term coefficients above the link threshold), the rest must not.
    Linked voxels activate at a high rate (driven by their query
    coefficients) exactly in latently matching studies; the remaining voxels
    respond smoothly to the term weights through their coefficients.  All
    marginal activation rates are calibrated to ``base_rate``, so linked
    voxels are distinguishable only through their association with matching
    studies.
    """
    n, m = x.shape
    k = cfg.n_voxels
    term_a, term_b = cfg.resolved_query()
    weights = expit(cfg.alpha * (x - cfg.tau))  # study-by-term soft weights
    match_probability = weights[:, term_a] * weights[:, term_b]
    matches = rng.random(n) < match_probability

    n_linked = int(round(cfg.active_fraction * k))
    linked = np.zeros(k, dtype=bool)
    linked[rng.permutation(k)[:n_linked]] = True

    budget = cfg.rejection_cap
    coefficients = np.empty((k, m))
    for voxel in range(k):
        draws = 0
        while True:
            draws += 1
            if draws > budget:
                raise RejectionBudgetExceeded(
                    f"voxel {voxel}: more than {budget} coefficient draws"
                )
            beta = rng.normal(0.0, cfg.coef_noise, m)
            both_high = min(beta[term_a], beta[term_b]) >= cfg.link_threshold
            if linked[voxel]:
                # Resample the query coordinates until both clear the
                # threshold; their conditional laws are independent.
                for j in (term_a, term_b):
                    while beta[j] < cfg.link_threshold:
                        draws += 1
                        if draws > budget:
                            raise RejectionBudgetExceeded(
                                f"voxel {voxel}: more than {budget} coefficient draws"
                            )
                        beta[j] = rng.normal(0.0, cfg.coef_noise)
                coefficients[voxel] = beta
                break
            if not both_high:
                coefficients[voxel] = beta
                break

    probabilities = np.empty((n, k))

    # Linked voxels: high activation rate in matching studies, set by the
    # query coefficients; background rate solved so the marginal stays at
    # base_rate.
    linked_idx = np.flatnonzero(linked)
    if linked_idx.size:
        high = expit(coefficients[linked_idx, term_a] + coefficients[linked_idx, term_b])
        mean_match = matches.mean()
        background = (cfg.base_rate - mean_match * high) / max(1.0 - mean_match, 1e-9)
        background = np.clip(background, 1e-4, 1.0)
        p = np.where(matches[:, None], high[None, :], background[None, :])
        probabilities[:, linked_idx] = p

    # Remaining voxels: smooth response to the term weights.
    other_idx = np.flatnonzero(~linked)
    if other_idx.size:
        scores = weights @ coefficients[other_idx].T
        intercepts = _calibrate_intercepts(scores, cfg.base_rate)
        probabilities[:, other_idx] = expit(scores + intercepts)

    y = (rng.random((n, k)) < probabilities).astype(np.int8)
    return y, linked


def _calibrate_intercepts(scores: np.ndarray, rate: float, iterations: int = 50):
    lo = np.full(scores.shape[1], -40.0)
    hi = np.full(scores.shape[1], 40.0)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        current = expit(scores + mid).mean(axis=0)
        too_high = current > rate
        hi[too_high] = mid[too_high]
        lo[~too_high] = mid[~too_high]
    return 0.5 * (lo + hi)


def generate(cfg: GenConfig) -> SimulatedDataset:
    """Run the full pipeline deterministically for the configured seed."""
    rng = np.random.default_rng(cfg.seed)
    tf = sample_term_frequencies(cfg, rng)
    idf = compute_idf(tf, cfg.resolved_cutoff())
    x = tf * idf
    y, truth = sample_activations(cfg, x, rng)

    digits_s = max(1, len(str(cfg.n_studies - 1)))
    digits_v = max(1, len(str(cfg.n_voxels - 1)))
    studies = np.array([f"s{i:0{digits_s}d}" for i in range(cfg.n_studies)])
    terms = np.array([f"t{i:02d}" for i in range(cfg.n_terms)])
    voxels = np.array([f"v{i:0{digits_v}d}" for i in range(cfg.n_voxels)])
    dataset = CbmaDataset(studies, terms, voxels, x, y)
    return SimulatedDataset(dataset, truth, cfg)


def load_gen_config(path) -> GenConfig:
    """Read a GenConfig from a ``key = value`` file.

    Unknown keys error out; ``mu_file``/``sigma_file`` point at whitespace-
    separated numeric files; ``query`` is two comma-separated term indices.
    """
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, text = (part.strip() for part in line.split("=", 1))
        values[key] = text

    kwargs = {}
    int_keys = {"n_studies", "n_terms", "n_voxels", "seed", "rejection_cap"}
    float_keys = {
        "active_fraction",
        "tau",
        "alpha",
        "base_rate",
        "coef_noise",
        "link_threshold",
        "presence_cutoff",
    }
    for key, text in values.items():
        if key in int_keys:
            kwargs[key] = int(text)
        elif key in float_keys:
            kwargs[key] = float(text)
        elif key == "query":
            a, b = text.split(",")
            kwargs[key] = (int(a), int(b))
        elif key == "mu_file":
            kwargs["mu"] = np.loadtxt(text, ndmin=1)
        elif key == "sigma_file":
            kwargs["sigma"] = np.loadtxt(text, ndmin=2)
        else:
            raise ValueError(f"{path}: unknown configuration key {key!r}")
    if "n_studies" not in kwargs:
        raise ValueError(f"{path}: n_studies is required")
    return GenConfig(**kwargs)
