"""Seeded generators for the four synthetic benchmark tasks.

=========  ===============================================================
reg1       ``y = 0.1 x^3 + eps``, ``eps ~ N(0, 0.25)``, gap in (-1, 1)
reg2       ``y = -(1 + x) sin(1.2 x) + eps``, ``eps ~ N(0, 0.04)``, sparse [-2, 2]
class1     Gaussians at (2, 2) / (-2, -2), identity covariance
class2     Gaussians at (3, 0) / (-3, 0), covariance [[2, 1], [1, 2]],
           training classes truncated on opposite sides of ``x2 = 0``
=========  ===============================================================

Noise parameters are variances. Regression test targets are the noiseless
function values; training and validation targets carry noise.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

SPLITS = ("train", "val", "test")


class DatasetParseError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    split: np.ndarray
    task: str
    generator: str
    seed: int
    noise_sigma: float | None = None

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0] or self.y.shape[0] != self.split.shape[0]:
            raise ValueError("x, y and split must have the same number of rows")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError("non-finite data")

    def part(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """``(x, y)`` rows of one split."""
        if name not in SPLITS:
            raise KeyError(name)
        rows = self.split == name
        return self.x[rows], self.y[rows]

    @property
    def train(self):
        return self.part("train")

    @property
    def val(self):
        return self.part("val")

    @property
    def test(self):
        return self.part("test")

    def counts(self) -> dict[str, int]:
        return {s: int(np.sum(self.split == s)) for s in SPLITS}

    def equals(self, other: "Dataset") -> bool:
        return (np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y)
                and np.array_equal(self.split, other.split) and self.task == other.task
                and self.generator == other.generator and self.seed == other.seed
                and self.noise_sigma == other.noise_sigma)


@dataclass(frozen=True)
class SplitSpec:
    """Row counts for the train, validation and test splits."""

    n_train: int
    n_val: int
    n_test: int

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) <= 0:
            raise ValueError("split counts must be positive")


# -- regression ----------------------------------------------------------------


def reg1_mean(x):
    return 0.1 * np.asarray(x) ** 3


def reg2_mean(x):
    x = np.asarray(x)
    return -(1.0 + x) * np.sin(1.2 * x)


REGRESSION_TASKS = {
    # mean function, noise variance, test range
    "reg1": (reg1_mean, 0.25, (-4.0, 4.0)),
    "reg2": (reg2_mean, 0.04, (-6.0, 6.0)),
}


def _uniform_union(rng, intervals, n):
    """Uniform draws on a union of disjoint intervals (region picked by length)."""
    lengths = np.array([hi - lo for lo, hi in intervals], dtype=float)
    which = rng.choice(len(intervals), size=n, p=lengths / lengths.sum())
    lo = np.array([iv[0] for iv in intervals])[which]
    hi = np.array([iv[1] for iv in intervals])[which]
    return lo + (hi - lo) * rng.uniform(size=n)


def _regression(task, seed, blocks, n_test):
    mean_fn, noise_var, (lo, hi) = REGRESSION_TASKS[task]
    sigma = math.sqrt(noise_var)
    rng = np.random.default_rng(seed)
    xs, ys, splits = [], [], []
    for split, intervals, n in blocks:
        x = _uniform_union(rng, intervals, n)
        xs.append(x)
        ys.append(mean_fn(x) + sigma * rng.standard_normal(n))
        splits += [split] * n
    x_test = rng.uniform(lo, hi, size=n_test)
    xs.append(x_test)
    ys.append(mean_fn(x_test))
    splits += ["test"] * n_test
    return Dataset(np.concatenate(xs)[:, None], np.concatenate(ys)[:, None],
                   np.array(splits), "regression", task, seed, sigma)


def gen_reg_mismatched(seed: int, splits: SplitSpec = SplitSpec(80, 20, 200)) -> Dataset:
    region = [(-4.0, -1.0), (1.0, 4.0)]
    return _regression("reg1", seed, [("train", region, splits.n_train),
                                      ("val", region, splits.n_val)], splits.n_test)


def gen_reg_matched(seed: int, splits: SplitSpec = SplitSpec(80, 20, 200),
                    n_sparse: tuple[int, int] = (2, 2)) -> Dataset:
    """80/20 train/val from the outer region, plus 2/2 from [-2, 2]."""
    outer = [(-6.0, -2.0), (2.0, 6.0)]
    inner = [(-2.0, 2.0)]
    return _regression("reg2", seed, [("train", outer, splits.n_train),
                                      ("train", inner, n_sparse[0]),
                                      ("val", outer, splits.n_val),
                                      ("val", inner, n_sparse[1])], splits.n_test)


def noiseless_grid(task: str, n: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Evenly spaced inputs over the test range with noiseless targets."""
    mean_fn, _, (lo, hi) = REGRESSION_TASKS[task]
    x = np.linspace(lo, hi, n)
    return x[:, None], mean_fn(x)[:, None]


# -- classification ------------------------------------------------------------

CLASS_TASKS = {
    "class1": (np.array([2.0, 2.0]), np.array([-2.0, -2.0]), np.eye(2), False),
    "class2": (np.array([3.0, 0.0]), np.array([-3.0, 0.0]),
               np.array([[2.0, 1.0], [1.0, 2.0]]), True),
}

MAX_REJECTION_DRAWS = 1_000_000


def _class_sizes(rng, n):
    """Split ``n`` into two halves; an odd extra row goes to a random class."""
    half = n // 2
    if n % 2 and rng.uniform() < 0.5:
        return half + 1, half
    return (half, n - half)


def _draw_truncated(rng, mean, chol, n, keep):
    out = np.empty((0, 2))
    drawn = 0
    while out.shape[0] < n:
        batch = max(2 * (n - out.shape[0]), 16)
        drawn += batch
        if drawn > MAX_REJECTION_DRAWS:
            raise RuntimeError("rejection sampling budget exceeded")
        z = mean + rng.standard_normal((batch, 2)) @ chol.T
        out = np.vstack([out, z[keep(z)]])
    return out[:n]


def _classification(task, seed, splits):
    mean1, mean0, cov, truncate = CLASS_TASKS[task]
    chol = np.linalg.cholesky(cov)
    rng = np.random.default_rng(seed)
    xs, ys, tags = [], [], []
    for split, n in (("train", splits.n_train), ("val", splits.n_val), ("test", splits.n_test)):
        n1, n0 = _class_sizes(rng, n)
        if truncate and split != "test":
            x1 = _draw_truncated(rng, mean1, chol, n1, lambda z: z[:, 1] <= 0.0)
            x0 = _draw_truncated(rng, mean0, chol, n0, lambda z: z[:, 1] >= 0.0)
        else:
            x1 = mean1 + rng.standard_normal((n1, 2)) @ chol.T
            x0 = mean0 + rng.standard_normal((n0, 2)) @ chol.T
        x = np.vstack([x1, x0])
        y = np.concatenate([np.ones(n1), np.zeros(n0)])
        order = rng.permutation(n)
        xs.append(x[order])
        ys.append(y[order])
        tags += [split] * n
    return Dataset(np.vstack(xs), np.concatenate(ys)[:, None], np.array(tags),
                   "classification", task, seed)


def gen_class_mismatched(seed: int, splits: SplitSpec = SplitSpec(80, 20, 100)) -> Dataset:
    return _classification("class1", seed, splits)


def gen_class_matched(seed: int, splits: SplitSpec = SplitSpec(80, 20, 100)) -> Dataset:
    """Training/validation class 1 keeps ``x2 <= 0``, class 0 keeps ``x2 >= 0``."""
    return _classification("class2", seed, splits)


GENERATORS = {
    "reg1": gen_reg_mismatched,
    "reg2": gen_reg_matched,
    "class1": gen_class_mismatched,
    "class2": gen_class_matched,
}


def generate(task: str, seed: int) -> Dataset:
    try:
        return GENERATORS[task](seed)
    except KeyError:
        raise KeyError(f"unknown dataset {task!r}; choose from {sorted(GENERATORS)}") from None


# -- persistence -------------------------------------------------------------------


def manifest_path(path) -> str:
    return f"{path}.manifest"


def save(dataset: Dataset, path) -> None:
    """Write ``x0..xD-1, y, split`` rows plus a one-line sidecar manifest."""
    cols = [f"x{i}" for i in range(dataset.x.shape[1])]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(cols + ["y", "split"])
        for xr, yr, s in zip(dataset.x, dataset.y[:, 0], dataset.split):
            out.writerow([f"{v:.17g}" for v in xr] + [f"{yr:.17g}", s])
    noise = "" if dataset.noise_sigma is None else f"{dataset.noise_sigma:.17g}"
    with open(manifest_path(path), "w") as fh:
        fh.write(f"generator={dataset.generator} seed={dataset.seed} task={dataset.task} "
                 f"noise_sigma={noise}\n")


def load(path) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetParseError(f"{path}: line 1: empty file")
    header = rows[0]
    if len(header) < 3 or header[-2:] != ["y", "split"]:
        raise DatasetParseError(f"{path}: line 1: bad header {header!r}")
    d = len(header) - 2
    xs, ys, splits = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != d + 2:
            raise DatasetParseError(f"{path}: line {lineno}: expected {d + 2} fields")
        try:
            xs.append([float(v) for v in row[:d]])
            ys.append(float(row[d]))
        except ValueError as exc:
            raise DatasetParseError(f"{path}: line {lineno}: {exc}") from None
        if row[d + 1] not in SPLITS:
            raise DatasetParseError(f"{path}: line {lineno}: unknown split {row[d + 1]!r}")
        splits.append(row[d + 1])
    meta = {"generator": "unknown", "seed": "0", "task": "regression", "noise_sigma": ""}
    try:
        with open(manifest_path(path)) as fh:
            meta.update(kv.split("=", 1) for kv in fh.read().split())
    except FileNotFoundError:
        pass
    noise = float(meta["noise_sigma"]) if meta["noise_sigma"] else None
    return Dataset(np.array(xs, dtype=float).reshape(-1, d), np.array(ys, dtype=float)[:, None],
                   np.array(splits), meta["task"], meta["generator"], int(meta["seed"]), noise)
