"""Central finite-difference verification of model gradients.

Perturbs every parameter entry by +/-h, re-runs the forward pass, and
compares (f(x+h) - f(x-h)) / 2h against the backward-pass gradients for
both the classification and the domain loss. The check only ever calls
the forward path, so it is independent of the code it verifies.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamSet, backward, cross_entropy
from .data import MultimodalBatch, Tensor
from .model import ModelConfig, forward, init_model


@dataclass
class BlockReport:
    loss: str               # "classification" | "domain"
    param: str
    rel_err: float


def _losses(params: ParamSet, batch: MultimodalBatch):
    outs = forward(params, batch)
    return (float(cross_entropy(outs.class_logits, batch.y).data),
            float(cross_entropy(outs.domain_logits, batch.d).data))


def fd_gradients(params: ParamSet, batch: MultimodalBatch, h: float = 1e-5):
    """Central-difference gradients of both losses for every parameter."""
    fd_c = {name: np.zeros_like(p.data) for name, p in params.items()}
    fd_d = {name: np.zeros_like(p.data) for name, p in params.items()}
    for name, p in params.items():
        flat = p.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            c_plus, d_plus = _losses(params, batch)
            flat[i] = orig - h
            c_minus, d_minus = _losses(params, batch)
            flat[i] = orig
            fd_c[name].ravel()[i] = (c_plus - c_minus) / (2.0 * h)
            fd_d[name].ravel()[i] = (d_plus - d_minus) / (2.0 * h)
    return fd_c, fd_d


def _block_rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    # Scale by the block's gradient magnitude so near-zero entries do not
    # blow up the ratio.
    scale = max(float(np.abs(fd).max()), float(np.abs(analytic).max()), 1e-12)
    return float(np.abs(analytic - fd).max()) / scale


def check_gradients(params: ParamSet, batch: MultimodalBatch,
                    h: float = 1e-5) -> list:
    """One BlockReport per (loss, parameter) pair."""
    outs = forward(params, batch)
    loss_c = cross_entropy(outs.class_logits, batch.y)
    loss_d = cross_entropy(outs.domain_logits, batch.d)
    grad_c = backward(loss_c, params)
    grad_d = backward(loss_d, params)
    fd_c, fd_d = fd_gradients(params, batch, h=h)
    reports = []
    for name in sorted(params.names()):
        reports.append(BlockReport("classification", name,
                                   _block_rel_err(grad_c[name], fd_c[name])))
        reports.append(BlockReport("domain", name,
                                   _block_rel_err(grad_d[name], fd_d[name])))
    return reports


def run_grad_check(seed: int = 0, tolerance: float = 1e-4, h: float = 1e-5):
    """Full suite on a small random two-modality model.

    Returns (passed, reports, max_rel_err).
    """
    cfg = ModelConfig(input_dim_v=10, input_dim_a=9, feature_dim=8,
                      num_classes=4, num_domains=3, encoder_hidden=12,
                      seed=seed)
    params = init_model(cfg)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(99,)))
    n = 8
    batch = MultimodalBatch(
        x_v=Tensor(rng.uniform(-1.0, 1.0, size=(n, cfg.input_dim_v))),
        x_a=Tensor(rng.uniform(-1.0, 1.0, size=(n, cfg.input_dim_a))),
        y=rng.integers(0, cfg.num_classes, size=n).astype(np.intp),
        d=rng.integers(0, cfg.num_domains, size=n).astype(np.intp))
    reports = check_gradients(params, batch, h=h)
    max_err = max(r.rel_err for r in reports)
    return max_err < tolerance, reports, max_err
