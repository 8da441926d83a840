"""Two-modality domain-generalization model.

Per-modality MLP encoders feed a shared linear classifier and a shared
linear domain discriminator. Both heads act on the concatenation of the
two feature vectors, which is algebraically the same as applying a
per-modality weight block to each feature vector and summing, plus a
shared bias. The per-modality blocks are kept as separate parameters so
each modality's head contribution is directly available for the
confidence statistics.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamSet, Tensor, add, matmul, relu

MODALITIES = ("v", "a")


@dataclass
class ModelConfig:
    input_dim_v: int
    input_dim_a: int
    feature_dim: int
    num_classes: int
    num_domains: int
    encoder_hidden: int = 256
    seed: int = 0

    def __post_init__(self):
        for attr in ("input_dim_v", "input_dim_a", "feature_dim", "encoder_hidden"):
            if getattr(self, attr) < 1:
                raise ValueError(f"{attr} must be >= 1, got {getattr(self, attr)}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_domains < 2:
            raise ValueError(f"num_domains must be >= 2, got {self.num_domains}")


@dataclass
class ForwardOutputs:
    features_v: Tensor
    features_a: Tensor
    class_logits: Tensor
    domain_logits: Tensor
    per_modality_class_logits: dict = field(default_factory=dict)
    per_modality_domain_logits: dict = field(default_factory=dict)


def init_model(cfg: ModelConfig) -> ParamSet:
    """Deterministic init: weights ~ U(-1/sqrt(fan_in), +1/sqrt(fan_in)),
    biases zero."""
    rng = np.random.default_rng(cfg.seed)
    params = ParamSet()

    def weight(name, fan_in, fan_out, partition):
        bound = 1.0 / np.sqrt(fan_in)
        params.add(name, rng.uniform(-bound, bound, size=(fan_in, fan_out)), partition)

    def bias(name, dim, partition):
        params.add(name, np.zeros(dim), partition)

    for m, in_dim in (("v", cfg.input_dim_v), ("a", cfg.input_dim_a)):
        part = f"encoder:{m}"
        weight(f"enc_{m}.w1", in_dim, cfg.encoder_hidden, part)
        bias(f"enc_{m}.b1", cfg.encoder_hidden, part)
        weight(f"enc_{m}.w2", cfg.encoder_hidden, cfg.feature_dim, part)
        bias(f"enc_{m}.b2", cfg.feature_dim, part)
    for m in MODALITIES:
        weight(f"cls.w_{m}", cfg.feature_dim, cfg.num_classes, "head:classifier")
    bias("cls.b", cfg.num_classes, "head:classifier")
    for m in MODALITIES:
        weight(f"dom.w_{m}", cfg.feature_dim, cfg.num_domains, "head:discriminator")
    bias("dom.b", cfg.num_domains, "head:discriminator")
    return params


def _encode(params: ParamSet, x: Tensor, m: str) -> Tensor:
    h = relu(add(matmul(x, params[f"enc_{m}.w1"]), params[f"enc_{m}.b1"]))
    return add(matmul(h, params[f"enc_{m}.w2"]), params[f"enc_{m}.b2"])


def forward(params: ParamSet, batch) -> ForwardOutputs:
    """Pure function of (params, batch); heads decompose into per-modality
    blocks plus shared bias."""
    feats = {m: _encode(params, x, m)
             for m, x in (("v", batch.x_v), ("a", batch.x_a))}
    cls_blocks = {m: matmul(feats[m], params[f"cls.w_{m}"]) for m in MODALITIES}
    dom_blocks = {m: matmul(feats[m], params[f"dom.w_{m}"]) for m in MODALITIES}
    class_logits = add(add(cls_blocks["v"], cls_blocks["a"]), params["cls.b"])
    domain_logits = add(add(dom_blocks["v"], dom_blocks["a"]), params["dom.b"])
    return ForwardOutputs(
        features_v=feats["v"],
        features_a=feats["a"],
        class_logits=class_logits,
        domain_logits=domain_logits,
        per_modality_class_logits=cls_blocks,
        per_modality_domain_logits=dom_blocks,
    )


def unimodal_branch_logits(params: ParamSet, batch, m: str) -> Tensor:
    """Classifier logits from one modality's block plus the shared bias."""
    if m not in MODALITIES:
        raise KeyError(f"unknown modality {m!r}")
    x = batch.x_v if m == "v" else batch.x_a
    feat = _encode(params, x, m)
    return add(matmul(feat, params[f"cls.w_{m}"]), params["cls.b"])
