"""Conflict-adaptive gradient projection.

A modality's classification and domain gradients conflict when their dot
product is strictly negative. On conflict, the task that is currently
stronger (gamma = rho / sigma above or below 1) has its gradient projected
onto the orthogonal complement of the weaker task's gradient; the weaker
task's gradient enters the total update untouched. Aligned, orthogonal and
exactly tied cases are left alone.
"""

from dataclasses import dataclass

import numpy as np

# Guard against dividing by a degenerate direction: exact-zero gradients
# occur at initialization with zero biases.
NORM_EPS = 1e-18


@dataclass
class ProjectionOutcome:
    modality: str
    conflict: bool
    gamma: float
    projected_task: str          # "none" | "classification" | "domain"
    G: np.ndarray
    dot_before: float
    dot_after: float


def detect_conflict(g_c: np.ndarray, g_d: np.ndarray) -> bool:
    """True iff the gradients point in opposing directions (dot < 0)."""
    g_c = np.asarray(g_c, dtype=np.float64)
    g_d = np.asarray(g_d, dtype=np.float64)
    if g_c.shape != g_d.shape:
        raise ValueError(f"gradient shape mismatch: {g_c.shape} vs {g_d.shape}")
    return float(g_c @ g_d) < 0.0


def task_strength(stats, m: str) -> float:
    """gamma = rho / sigma: >1 means classification is the stronger task
    for modality m."""
    return stats.rho[m] / stats.sigma[m]


def project_orthogonal(g_strong: np.ndarray, g_weak: np.ndarray) -> np.ndarray:
    """Remove from g_strong its component along g_weak.

    Idempotent; never grows the vector. If g_weak is numerically zero the
    input is returned unchanged.
    """
    g_strong = np.asarray(g_strong, dtype=np.float64)
    g_weak = np.asarray(g_weak, dtype=np.float64)
    if g_strong.shape != g_weak.shape:
        raise ValueError(f"gradient shape mismatch: {g_strong.shape} vs {g_weak.shape}")
    sq = float(g_weak @ g_weak)
    if sq < NORM_EPS:
        return g_strong.copy()
    return g_strong - (float(g_strong @ g_weak) / sq) * g_weak


def apply_cagp(g_c: np.ndarray, g_d: np.ndarray, gamma: float,
               modality: str = "v") -> ProjectionOutcome:
    """Combine the two task gradients, projecting the stronger one on
    conflict.

    No conflict: G = g_c + g_d. Conflict with gamma > 1: classification is
    stronger, so it is projected orthogonal to the domain gradient.
    Conflict with gamma < 1: the domain gradient is projected instead.
    A gamma == 1 tie applies no projection.
    """
    g_c = np.asarray(g_c, dtype=np.float64)
    g_d = np.asarray(g_d, dtype=np.float64)
    if g_c.shape != g_d.shape:
        raise ValueError(f"gradient shape mismatch: {g_c.shape} vs {g_d.shape}")
    dot_before = float(g_c @ g_d)
    conflict = dot_before < 0.0
    if not conflict or gamma == 1.0:
        return ProjectionOutcome(modality=modality, conflict=conflict,
                                 gamma=gamma, projected_task="none",
                                 G=g_c + g_d, dot_before=dot_before,
                                 dot_after=dot_before)
    if gamma > 1.0:
        g_c_proj = project_orthogonal(g_c, g_d)
        return ProjectionOutcome(modality=modality, conflict=True, gamma=gamma,
                                 projected_task="classification",
                                 G=g_c_proj + g_d, dot_before=dot_before,
                                 dot_after=float(g_c_proj @ g_d))
    g_d_proj = project_orthogonal(g_d, g_c)
    return ProjectionOutcome(modality=modality, conflict=True, gamma=gamma,
                             projected_task="domain",
                             G=g_c + g_d_proj, dot_before=dot_before,
                             dot_after=float(g_d_proj @ g_c))
