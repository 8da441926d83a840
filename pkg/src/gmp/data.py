"""Synthetic two-modality, multi-domain classification benchmark.

Each modality's samples live in a space where class signal and domain
signal occupy mutually orthogonal directions:

    x = discrim_strength * P[:, y] + domain_leak * Q[:, d] + noise

with P (class embeddings) and Q (domain embeddings) drawn once per
modality as orthonormal columns of a seeded QR factorization. The two
amplitude knobs are independent per modality, so one modality can be made
highly discriminative but domain-contaminated while the other is weaker
but domain-stable. Generation is a pure function of
(seed, domain, class, index), so datasets are reproducible and
order-independent.
"""

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

MODALITIES = ("v", "a")


@dataclass
class SynthConfig:
    num_classes: int = 6
    num_domains: int = 3
    samples_per_class_per_domain: int = 150
    dim_v: int = 24
    dim_a: int = 24
    discrim_strength: dict = field(default_factory=lambda: {"v": 1.0, "a": 0.55})
    domain_leak: dict = field(default_factory=lambda: {"v": 0.8, "a": 0.15})
    noise_std: dict = field(default_factory=lambda: {"v": 0.35, "a": 0.35})
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_domains < 3:
            raise ValueError("num_domains must be >= 3 (two source + one target)")
        if self.samples_per_class_per_domain < 1:
            raise ValueError("samples_per_class_per_domain must be >= 1")
        for m in MODALITIES:
            for knob in (self.discrim_strength, self.domain_leak, self.noise_std):
                value = knob[m]
                if not np.isfinite(value) or value < 0.0:
                    raise ValueError(f"amplitude for {m!r} must be finite and >= 0")
        subspace = self.num_classes + self.num_domains
        for name, dim in (("dim_v", self.dim_v), ("dim_a", self.dim_a)):
            if dim < subspace:
                raise ValueError(
                    f"{name}={dim} too small: needs >= num_classes + num_domains"
                    f" = {subspace} for orthogonal class/domain embeddings")


# The default benchmark: a strong-but-leaky modality v against a weaker
# but domain-stable modality a.
PRESETS = {"asym-v": SynthConfig}


def make_preset(name: str, seed: int = 0) -> SynthConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}")
    return PRESETS[name](seed=seed)


@dataclass
class MultimodalBatch:
    x_v: Tensor
    x_a: Tensor
    y: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        n = self.x_v.data.shape[0]
        if not (self.x_a.data.shape[0] == len(self.y) == len(self.d) == n):
            raise ValueError("batch fields must have aligned lengths")

    def __len__(self):
        return self.x_v.data.shape[0]


@dataclass
class Dataset:
    x_v: np.ndarray
    x_a: np.ndarray
    y: np.ndarray
    d: np.ndarray
    seed: int = 0

    def __len__(self):
        return self.x_v.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.x_v[idx].copy(), self.x_a[idx].copy(),
                       self.y[idx].copy(), self.d[idx].copy(), seed=self.seed)

    def domain_indices(self, domain: int) -> np.ndarray:
        return np.nonzero(self.d == domain)[0]

    def make_batch(self, idx=None) -> MultimodalBatch:
        if idx is None:
            idx = np.arange(len(self))
        idx = np.asarray(idx, dtype=np.intp)
        return MultimodalBatch(x_v=Tensor(self.x_v[idx]), x_a=Tensor(self.x_a[idx]),
                               y=self.y[idx].copy(), d=self.d[idx].copy())


def _embeddings(cfg: SynthConfig, m: str):
    """Orthonormal class/domain embedding columns for one modality, drawn
    once from the seed. Columns of P and Q are mutually orthogonal."""
    dim = cfg.dim_v if m == "v" else cfg.dim_a
    rng = np.random.default_rng(
        np.random.SeedSequence(cfg.seed, spawn_key=(0, MODALITIES.index(m))))
    gauss = rng.standard_normal((dim, cfg.num_classes + cfg.num_domains))
    q, _ = np.linalg.qr(gauss)
    return q[:, :cfg.num_classes], q[:, cfg.num_classes:]


def _sample(cfg, embeds, domain, cls, index):
    rng = np.random.default_rng(
        np.random.SeedSequence(cfg.seed, spawn_key=(1, domain, cls, index)))
    out = {}
    for m in MODALITIES:
        p_cols, q_cols = embeds[m]
        dim = p_cols.shape[0]
        out[m] = (cfg.discrim_strength[m] * p_cols[:, cls]
                  + cfg.domain_leak[m] * q_cols[:, domain]
                  + cfg.noise_std[m] * rng.standard_normal(dim))
    return out


def generate(cfg: SynthConfig) -> Dataset:
    """Full dataset ordered by (domain, class, index)."""
    embeds = {m: _embeddings(cfg, m) for m in MODALITIES}
    rows_v, rows_a, ys, ds = [], [], [], []
    for domain in range(cfg.num_domains):
        for cls in range(cfg.num_classes):
            for index in range(cfg.samples_per_class_per_domain):
                sample = _sample(cfg, embeds, domain, cls, index)
                rows_v.append(sample["v"])
                rows_a.append(sample["a"])
                ys.append(cls)
                ds.append(domain)
    return Dataset(x_v=np.array(rows_v), x_a=np.array(rows_a),
                   y=np.array(ys, dtype=np.intp), d=np.array(ds, dtype=np.intp),
                   seed=cfg.seed)


def split_leave_one_domain_out(dataset: Dataset, target_domain: int,
                               val_fraction: float):
    """(train, source_val, target_test): train/val from the non-target
    domains with val drawn per (domain, class) deterministically from the
    dataset seed; test is the whole target domain."""
    domains = np.unique(dataset.d)
    if target_domain not in domains:
        raise KeyError(f"unknown domain {target_domain!r}")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    val_idx = []
    train_idx = []
    for domain in domains:
        if domain == target_domain:
            continue
        for cls in np.unique(dataset.y):
            group = np.nonzero((dataset.d == domain) & (dataset.y == cls))[0]
            rng = np.random.default_rng(np.random.SeedSequence(
                dataset.seed, spawn_key=(2, int(domain), int(cls))))
            perm = group[rng.permutation(len(group))]
            n_val = int(round(val_fraction * len(group)))
            val_idx.extend(perm[:n_val])
            train_idx.extend(perm[n_val:])
    test_idx = dataset.domain_indices(target_domain)
    return (dataset.subset(np.sort(train_idx)),
            dataset.subset(np.sort(val_idx)),
            dataset.subset(test_idx))


def dataset_hash(dataset: Dataset) -> str:
    h = hashlib.sha256()
    for arr in (dataset.x_v, dataset.x_a, dataset.y, dataset.d):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def csv_header(dim_v: int, dim_a: int) -> list:
    return (["domain", "class"]
            + [f"v{i}" for i in range(dim_v)]
            + [f"a{i}" for i in range(dim_a)])


def export_csv(dataset: Dataset, path) -> None:
    """One row per sample; floats printed with 17 significant digits so the
    round-trip is exact."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(csv_header(dataset.x_v.shape[1], dataset.x_a.shape[1]))
        for i in range(len(dataset)):
            row = [int(dataset.d[i]), int(dataset.y[i])]
            row += [f"{x:.17g}" for x in dataset.x_v[i]]
            row += [f"{x:.17g}" for x in dataset.x_a[i]]
            writer.writerow(row)


def import_csv(path, seed: int = 0) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim_v = sum(1 for c in header if c.startswith("v"))
        dim_a = sum(1 for c in header if c.startswith("a"))
        if header != csv_header(dim_v, dim_a):
            raise ValueError(f"unrecognized dataset header in {path}")
        ds_col, ys, rows_v, rows_a = [], [], [], []
        for row in reader:
            ds_col.append(int(row[0]))
            ys.append(int(row[1]))
            values = np.array([float(x) for x in row[2:]])
            rows_v.append(values[:dim_v])
            rows_a.append(values[dim_v:])
    return Dataset(x_v=np.array(rows_v), x_a=np.array(rows_a),
                   y=np.array(ys, dtype=np.intp),
                   d=np.array(ds_col, dtype=np.intp), seed=seed)
