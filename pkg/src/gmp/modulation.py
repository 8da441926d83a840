"""Inter-modality decoupled gradient modulation.

Per-sample semantic and domain confidences are summed over the batch and
turned into cross-modality discrepancy ratios: rho compares semantic
confidence (own over other), sigma compares domain confidence with the
other modality in the numerator, so both read ">1 means this modality is
stronger at the task". A modality that is ahead on a task gets its
gradient for that task scaled down by 1 - tanh(alpha * ratio); the other
task's gradient is scaled independently.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import tanh_scalar

MODALITIES = ("v", "a")
OTHER = {"v": "a", "a": "v"}

# Confidence sums are strictly positive in exact arithmetic but can
# underflow; ratios are clamped away from 0/0.
SUM_EPS = 1e-12
# tanh saturates to exactly 1.0 in float64 for arguments >= ~19.1, which
# would push a coefficient to exactly 0; keep it strictly positive.
COEFF_FLOOR = 1e-12


@dataclass
class ConfidenceStats:
    q_sum: dict
    c_sum: dict
    rho: dict
    sigma: dict


@dataclass
class ModulationCoefficients:
    k: dict
    p: dict
    alpha_k: float
    alpha_p: float


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _label_confidence(logits, labels) -> np.ndarray:
    logits = _as_array(logits)
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    return _softmax_rows(logits)[np.arange(n), labels]


def semantic_confidence(class_logits, labels) -> np.ndarray:
    """Softmax probability each modality block assigns to the true class."""
    return _label_confidence(class_logits, labels)


def domain_confidence(domain_logits, domains) -> np.ndarray:
    """Softmax probability each modality block assigns to the true domain."""
    return _label_confidence(domain_logits, domains)


def discrepancy_ratios(q_v, q_a, c_v, c_a) -> ConfidenceStats:
    """Batch-sum the confidences and form the cross-modality ratios.

    rho[m] = sum(q_m) / sum(q_other); sigma[m] = sum(c_other) / sum(c_m).
    The sigma direction is deliberately flipped: low own-domain confidence
    means stronger domain invariance.
    """
    vectors = [np.asarray(v, dtype=np.float64).ravel() for v in (q_v, q_a, c_v, c_a)]
    n = vectors[0].size
    if n == 0:
        raise ValueError("empty batch")
    if any(v.size != n for v in vectors):
        raise ValueError("confidence vectors must have equal length")
    q_sum = {"v": max(float(vectors[0].sum()), SUM_EPS),
             "a": max(float(vectors[1].sum()), SUM_EPS)}
    c_sum = {"v": max(float(vectors[2].sum()), SUM_EPS),
             "a": max(float(vectors[3].sum()), SUM_EPS)}
    rho = {m: q_sum[m] / q_sum[OTHER[m]] for m in MODALITIES}
    sigma = {m: c_sum[OTHER[m]] / c_sum[m] for m in MODALITIES}
    return ConfidenceStats(q_sum=q_sum, c_sum=c_sum, rho=rho, sigma=sigma)


def suppression_coefficient(ratio: float, alpha: float) -> float:
    """1 - tanh(alpha * ratio) when the ratio strictly exceeds 1, else 1."""
    if ratio > 1.0:
        return max(1.0 - tanh_scalar(alpha * ratio), COEFF_FLOOR)
    return 1.0


def modulation_coefficients(stats: ConfidenceStats, alpha_k: float,
                            alpha_p: float) -> ModulationCoefficients:
    """Piecewise coefficients: suppress a task's gradient only for the
    modality whose ratio strictly exceeds 1."""
    if alpha_k < 0.0 or alpha_p < 0.0:
        raise ValueError("suppression strengths must be nonnegative")
    k = {m: suppression_coefficient(stats.rho[m], alpha_k) for m in MODALITIES}
    p = {m: suppression_coefficient(stats.sigma[m], alpha_p) for m in MODALITIES}
    return ModulationCoefficients(k=k, p=p, alpha_k=alpha_k, alpha_p=alpha_p)


def modulate(g_c: np.ndarray, g_d: np.ndarray, k_m: float, p_m: float):
    """Scale the classification and domain gradients independently;
    directions are preserved exactly."""
    return k_m * np.asarray(g_c, dtype=np.float64), \
        p_m * np.asarray(g_d, dtype=np.float64)
