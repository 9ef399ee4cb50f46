"""Synthetic ring/sphere generators and UCI table ingestion."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .rng import stream

UCI_DIMS = {"power": 6, "miniboone": 43}


class FormatError(ValueError):
    pass


@dataclass
class SyntheticParams:
    radii: tuple = (1.0, 2.0, 3.0)
    sigma_r: float = 0.05
    sigma_x: float = 0.02
    n: int = 6000
    seed: int = 0
    a: tuple = ()
    b: tuple = ()

    def __post_init__(self):
        self.radii = tuple(float(r) for r in self.radii)
        self.a = tuple(float(v) for v in self.a)
        self.b = tuple(float(v) for v in self.b)
        if not self.radii or any(r <= 0 for r in self.radii):
            raise ValueError("radii must be a non-empty list of positive reals")
        if self.sigma_r < 0 or self.sigma_x < 0:
            raise ValueError("noise scales must be non-negative")
        if len(self.a) != len(self.b):
            raise ValueError("harmonic coefficient lists must have equal length")
        if self.n < 0:
            raise ValueError("n must be non-negative")

    @property
    def K(self) -> int:
        return len(self.a)


@dataclass
class Dataset:
    x: np.ndarray
    labels: np.ndarray | None = None
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.x):
                raise ValueError("labels and x differ in length")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("dataset contains non-finite values")

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def __len__(self):
        return len(self.x)

    def subset(self, idx, split: str) -> "Dataset":
        labels = None if self.labels is None else self.labels[idx]
        prov = dict(self.provenance, split=split)
        return Dataset(self.x[idx], labels, split, prov)


def _ring_draws(p: SyntheticParams, tag: str):
    rng = stream(p.seed, tag)
    labels = rng.integers(0, len(p.radii), size=p.n)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=p.n)
    eps_r = rng.standard_normal(p.n) * p.sigma_r
    return rng, labels, phi, eps_r


def _provenance(name: str, p: SyntheticParams) -> dict:
    # JSON-normal form (lists, not tuples) so saved provenance compares equal.
    return json.loads(json.dumps({"generator": name, "params": asdict(p)}))


def gen_lcr2d(p: SyntheticParams, phi: np.ndarray | None = None, _name="lcr2d") -> Dataset:
    """Concentric rings: r = R_c + eps_r, x = r [cos phi, sin phi] + eps_x."""
    rng, labels, phi_draw, eps_r = _ring_draws(p, "ring2d")
    phi = phi_draw if phi is None else np.broadcast_to(np.asarray(phi, dtype=np.float64), (p.n,))
    r = np.asarray(p.radii)[labels] + eps_r
    x = r[:, None] * np.column_stack([np.cos(phi), np.sin(phi)])
    x = x + rng.standard_normal((p.n, 2)) * p.sigma_x
    return Dataset(x, labels, "train", _provenance(_name, p))


def gen_lcs3d(p: SyntheticParams) -> Dataset:
    """Concentric spheres; direction from u ~ U[-1, 1], theta = arccos u."""
    rng = stream(p.seed, "sphere3d")
    labels = rng.integers(0, len(p.radii), size=p.n)
    u = rng.uniform(-1.0, 1.0, size=p.n)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=p.n)
    eps_r = rng.standard_normal(p.n) * p.sigma_r
    theta = np.arccos(u)
    r = np.asarray(p.radii)[labels] + eps_r
    direction = np.column_stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)])
    x = r[:, None] * direction + rng.standard_normal((p.n, 3)) * p.sigma_x
    return Dataset(x, labels, "train", _provenance("lcs3d", p))


def harmonic_radius(phi, base, a, b):
    """base + sum_k a_k cos(k phi) + b_k sin(k phi)."""
    phi = np.asarray(phi, dtype=np.float64)
    r = np.asarray(base, dtype=np.float64) + np.zeros_like(phi)
    for k, (ak, bk) in enumerate(zip(a, b), start=1):
        r = r + ak * np.cos(k * phi) + bk * np.sin(k * phi)
    return r


def gen_hmr2d(p: SyntheticParams, phi: np.ndarray | None = None) -> Dataset:
    """Harmonic-modulated rings. Shares the ring draw order with gen_lcr2d,
    so zero coefficients reproduce it exactly."""
    if p.K < 1:
        raise ValueError("HMR-2D needs at least one harmonic")
    rng, labels, phi_draw, eps_r = _ring_draws(p, "ring2d")
    phi = phi_draw if phi is None else np.broadcast_to(np.asarray(phi, dtype=np.float64), (p.n,))
    r = harmonic_radius(phi, np.asarray(p.radii)[labels], p.a, p.b) + eps_r
    x = r[:, None] * np.column_stack([np.cos(phi), np.sin(phi)])
    x = x + rng.standard_normal((p.n, 2)) * p.sigma_x
    return Dataset(x, labels, "train", _provenance("hmr2d", p))


DEFAULTS = {
    "lcr2d": SyntheticParams(),
    "lcs3d": SyntheticParams(),
    "hmr2d": SyntheticParams(radii=(2.0,), a=(0.3, 0.15, 0.1), b=(0.1, -0.1, 0.05)),
}

GENERATORS = {"lcr2d": gen_lcr2d, "lcs3d": gen_lcs3d, "hmr2d": gen_hmr2d}


def generate(name: str, params: SyntheticParams | None = None) -> Dataset:
    params = params if params is not None else DEFAULTS[name]
    return GENERATORS[name](params)


def regenerate(provenance: dict) -> Dataset:
    params = SyntheticParams(**provenance["params"])
    ds = GENERATORS[provenance["generator"]](params)
    if "split" in provenance:
        idx = np.asarray(provenance["indices"], dtype=np.int64)
        ds = ds.subset(idx, provenance["split"])
    return ds


def train_test_split(ds: Dataset, test_fraction: float = 0.2, seed: int = 0):
    """Fixed permutation split; indices are recorded in the provenance."""
    n = len(ds)
    n_test = int(round(test_fraction * n))
    perm = stream(seed, "split").permutation(n)
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    out = []
    for idx, split in ((train_idx, "train"), (test_idx, "test")):
        sub = ds.subset(idx, split)
        sub.provenance["indices"] = idx.tolist()
        sub.provenance["split_seed"] = seed
        out.append(sub)
    return tuple(out)


# -- UCI -------------------------------------------------------------------


def _read_table(path: Path, d: int) -> np.ndarray:
    try:
        arr = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if arr.shape[1] != d:
        raise FormatError(f"{path}: expected {d} columns, found {arr.shape[1]}")
    return arr


def load_uci(path, name: str, n_train: int = 20000, n_test: int = 2000, seed: int = 0):
    """Subsample and standardize a preprocessed UCI table pair.

    ``path`` is a directory with ``train.csv`` and ``test.csv`` (plain floats,
    no header). Rows are drawn uniformly without replacement; both splits are
    standardized with the training subsample's column mean and std.
    """
    name = name.lower()
    if name not in UCI_DIMS:
        raise ValueError(f"unknown UCI dataset {name!r}")
    d = UCI_DIMS[name]
    root = Path(path)
    pools = {split: _read_table(root / f"{split}.csv", d) for split in ("train", "test")}
    picks = {}
    for split, want in (("train", n_train), ("test", n_test)):
        have = len(pools[split])
        if want > have:
            raise IndexError(f"{name} {split}: requested {want} rows, file has {have}")
        picks[split] = np.sort(stream(seed, f"uci-{name}-{split}").choice(have, size=want, replace=False))
    train_raw = pools["train"][picks["train"]]
    mu = train_raw.mean(axis=0)
    sd = train_raw.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    out = []
    for split in ("train", "test"):
        x = (pools[split][picks[split]] - mu) / sd
        prov = {
            "generator": f"uci-{name}",
            "path": str(root.resolve()),
            "seed": seed,
            "split": split,
            "indices": picks[split].tolist(),
            "mean": mu.tolist(),
            "std": sd.tolist(),
        }
        out.append(Dataset(x, None, split, prov))
    return tuple(out)


# -- persistence -----------------------------------------------------------


def save_dataset(ds: Dataset, path) -> None:
    """CSV (optional trailing label column) plus ``<path>.json`` provenance."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for i, row in enumerate(ds.x):
            vals = [repr(float(v)) for v in row]
            if ds.labels is not None:
                vals.append(str(int(ds.labels[i])))
            w.writerow(vals)
    meta = {"d": ds.d, "n": len(ds), "split": ds.split, "has_labels": ds.labels is not None}
    meta["provenance"] = ds.provenance
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True))


def load_dataset(path) -> Dataset:
    path = Path(path)
    meta_path = Path(str(path) + ".json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    arr = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    has_labels = meta.get("has_labels", False)
    if has_labels:
        x, labels = arr[:, :-1], arr[:, -1].astype(np.int64)
    else:
        x, labels = arr, None
    return Dataset(x, labels, meta.get("split", "train"), meta.get("provenance", {}))
