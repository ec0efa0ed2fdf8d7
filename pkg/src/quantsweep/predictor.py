"""Saturation-point prediction from configuration features.

Rows come from running the saturation search over simulator configs; the
regressor seam is pluggable with two shipped baselines (k-nearest-neighbor
and a bagged, depth-limited regression-tree ensemble). Methods are encoded
as their (weight, activation, kv) bit triple plus a numeric-family flag so
the regressor sees ordinal structure.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

GPU_CODE = {"A100": 0.0, "H100": 1.0}


@dataclass(frozen=True)
class FeatureRow:
    model_params: float
    weight_bits: int
    activation_bits: int
    kv_bits: int
    family_int: int  # 1 for INT schemes, 0 for FP
    gpu: str
    input_len: float
    output_len: float
    tp_degree: int
    target: float  # saturation req/s

    def __post_init__(self) -> None:
        if self.target <= 0:
            raise ValueError("target saturation must be positive")


def encode(rows: list[FeatureRow]) -> np.ndarray:
    return np.array(
        [
            [
                math.log10(r.model_params),
                r.weight_bits,
                r.activation_bits,
                r.kv_bits,
                r.family_int,
                GPU_CODE[r.gpu],
                r.input_len,
                r.output_len,
                r.tp_degree,
            ]
            for r in rows
        ],
        dtype=float,
    )


def targets_of(rows: list[FeatureRow]) -> np.ndarray:
    return np.array([r.target for r in rows], dtype=float)


def mape(preds, targets) -> float:
    """100 * mean(|pred - target| / target); targets must be positive."""
    preds = np.asarray(preds, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if preds.shape != targets.shape or preds.size < 1:
        raise ValueError("preds and targets must have equal nonzero length")
    if np.any(targets == 0):
        raise ValueError("zero target in MAPE")
    return float(100.0 * np.mean(np.abs(preds - targets) / np.abs(targets)))


class ConstantModel:
    def __init__(self, value: float):
        self.value = value

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.full(len(x), self.value)


class KnnModel:
    def __init__(self, k: int = 5):
        self.k = k

    def fit(self, x: np.ndarray, y: np.ndarray) -> "KnnModel":
        self._mu = x.mean(axis=0)
        self._sigma = x.std(axis=0)
        self._sigma[self._sigma == 0] = 1.0
        self._x = (x - self._mu) / self._sigma
        self._y = y
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        q = (x - self._mu) / self._sigma
        out = np.empty(len(q))
        k = min(self.k, len(self._x))
        for i, row in enumerate(q):
            d = np.linalg.norm(self._x - row, axis=1)
            idx = np.argpartition(d, k - 1)[:k]
            out[i] = float(self._y[idx].mean())
        return out


class _TreeNode:
    __slots__ = ("feature", "threshold", "left", "right", "value")

    def __init__(self, value: float):
        self.feature = -1
        self.threshold = 0.0
        self.left = None
        self.right = None
        self.value = value


def _fit_tree(x: np.ndarray, y: np.ndarray, max_depth: int, min_leaf: int,
              rng: np.random.Generator, feature_frac: float = 1.0) -> _TreeNode:
    node = _TreeNode(float(y.mean()))
    if max_depth == 0 or len(y) < 2 * min_leaf or np.all(y == y[0]):
        return node
    best_gain = 0.0
    best = None
    base_sse = float(((y - y.mean()) ** 2).sum())
    n_feat = x.shape[1]
    n_take = max(1, math.ceil(feature_frac * n_feat))
    features = rng.permutation(n_feat)[:n_take]
    for f in features:
        order = np.argsort(x[:, f], kind="stable")
        xs, ys = x[order, f], y[order]
        csum = np.cumsum(ys)
        csq = np.cumsum(ys**2)
        total, total_sq = csum[-1], csq[-1]
        n = len(ys)
        for i in range(min_leaf, n - min_leaf + 1):
            if i < n and xs[i - 1] == xs[i]:
                continue
            left_sse = csq[i - 1] - csum[i - 1] ** 2 / i
            right_n = n - i
            if right_n == 0:
                continue
            right_sum = total - csum[i - 1]
            right_sse = (total_sq - csq[i - 1]) - right_sum**2 / right_n
            gain = base_sse - (left_sse + right_sse)
            if gain > best_gain + 1e-12:
                best_gain = gain
                best = (f, (xs[i - 1] + xs[i]) / 2.0, i, order)
    if best is None:
        return node
    f, threshold, i, order = best
    node.feature = int(f)
    node.threshold = float(threshold)
    node.left = _fit_tree(x[order[:i]], y[order[:i]], max_depth - 1, min_leaf, rng, feature_frac)
    node.right = _fit_tree(x[order[i:]], y[order[i:]], max_depth - 1, min_leaf, rng, feature_frac)
    return node


def _tree_predict(node: _TreeNode, row: np.ndarray) -> float:
    while node.feature >= 0:
        node = node.left if row[node.feature] <= node.threshold else node.right
    return node.value


class TreeEnsembleModel:
    """Depth-limited regression-tree ensemble, deterministic given seed.

    Diversity comes from per-split feature subsampling; bootstrapping is off
    by default so the fitted ensemble reproduces its training targets (the
    memorization sanity bound). Enable bootstrap for classic bagging.
    """

    def __init__(self, n_trees: int = 25, max_depth: int = 12, min_leaf: int = 1,
                 bootstrap: bool = False, feature_frac: float = 0.8):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.bootstrap = bootstrap
        self.feature_frac = feature_frac
        self._trees: list[_TreeNode] = []

    def fit(self, x: np.ndarray, y: np.ndarray, seed: int = 0) -> "TreeEnsembleModel":
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x7EEE])))
        self._trees = []
        n = len(y)
        for _ in range(self.n_trees):
            if self.bootstrap:
                idx = rng.integers(0, n, size=n)
            else:
                idx = np.arange(n)
            self._trees.append(_fit_tree(x[idx], y[idx], self.max_depth, self.min_leaf,
                                         rng, self.feature_frac))
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        preds = np.array([[_tree_predict(t, row) for t in self._trees] for row in x])
        return preds.mean(axis=1)


def train(rows: list[FeatureRow], regressor_spec: dict | None = None, seed: int = 0):
    """Fit the configured regressor; degenerate target variance yields a
    constant model with a warning."""
    if len(rows) < 10:
        raise ValueError("need at least 10 rows to train")
    spec = dict(regressor_spec or {"kind": "tree"})
    x, y = encode(rows), targets_of(rows)
    if float(y.std()) == 0.0:
        log.warning("degenerate target variance; fitting a constant model")
        return ConstantModel(float(y[0]))
    kind = spec.pop("kind", "tree")
    if kind == "knn":
        return KnnModel(**spec).fit(x, y)
    if kind == "tree":
        return TreeEnsembleModel(**spec).fit(x, y, seed=seed)
    raise ValueError(f"unknown regressor kind {kind!r}")


def predict(model, rows: list[FeatureRow]) -> np.ndarray:
    return model.predict(encode(rows))


# -- split schemes -----------------------------------------------------------------

@dataclass(frozen=True)
class SplitScheme:
    name: str
    kind: str  # random | leave_out_input_len | leave_out_output_len | cross_gpu | filter
    test_frac: float = 0.2
    seed: int = 0
    length: float | None = None
    train_gpu: str | None = None
    test_gpu: str | None = None
    predicate: object = None


def random_split(test_frac: float = 0.2, seed: int = 0) -> SplitScheme:
    return SplitScheme(name=f"random({1 - test_frac:.0%}/{test_frac:.0%})",
                       kind="random", test_frac=test_frac, seed=seed)


def leave_out_input_len(length: float) -> SplitScheme:
    return SplitScheme(name=f"leave_out_input_len({length:g})",
                       kind="leave_out_input_len", length=length)


def leave_out_output_len(length: float) -> SplitScheme:
    return SplitScheme(name=f"leave_out_output_len({length:g})",
                       kind="leave_out_output_len", length=length)


def cross_gpu(train_gpu: str, test_gpu: str) -> SplitScheme:
    return SplitScheme(name=f"cross_gpu({train_gpu}->{test_gpu})",
                       kind="cross_gpu", train_gpu=train_gpu, test_gpu=test_gpu)


def filter_scheme(name: str, predicate, test_frac: float = 0.2, seed: int = 0) -> SplitScheme:
    return SplitScheme(name=f"filter({name})", kind="filter", predicate=predicate,
                       test_frac=test_frac, seed=seed)


def partition(rows: list[FeatureRow], scheme: SplitScheme) -> tuple[list[FeatureRow], list[FeatureRow]]:
    if scheme.kind in ("random", "filter"):
        pool = rows if scheme.kind == "random" else [r for r in rows if scheme.predicate(r)]
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([scheme.seed, 0x5417])))
        idx = rng.permutation(len(pool))
        n_test = int(round(len(pool) * scheme.test_frac))
        test_idx = set(idx[:n_test].tolist())
        train = [pool[i] for i in range(len(pool)) if i not in test_idx]
        test = [pool[i] for i in range(len(pool)) if i in test_idx]
        return train, test
    if scheme.kind == "leave_out_input_len":
        train = [r for r in rows if r.input_len != scheme.length]
        test = [r for r in rows if r.input_len == scheme.length]
        return train, test
    if scheme.kind == "leave_out_output_len":
        train = [r for r in rows if r.output_len != scheme.length]
        test = [r for r in rows if r.output_len == scheme.length]
        return train, test
    if scheme.kind == "cross_gpu":
        train = [r for r in rows if r.gpu == scheme.train_gpu]
        test = [r for r in rows if r.gpu == scheme.test_gpu]
        return train, test
    raise ValueError(f"unknown scheme kind {scheme.kind!r}")


def evaluate_splits(rows: list[FeatureRow], schemes: list[SplitScheme],
                    regressor_spec: dict | None = None, seed: int = 0) -> list[dict]:
    """Per scheme: partition, train, report MAPE and row counts.

    Schemes with an empty test (or undersized train) partition are skipped
    with a warning.
    """
    report = []
    for scheme in schemes:
        train_rows, test_rows = partition(rows, scheme)
        if not test_rows or len(train_rows) < 10:
            log.warning("skipping scheme %s: empty or undersized partition", scheme.name)
            continue
        model = train(train_rows, regressor_spec, seed=seed)
        preds = predict(model, test_rows)
        report.append({
            "scheme": scheme.name,
            "train_n": len(train_rows),
            "test_n": len(test_rows),
            "mape": mape(preds, targets_of(test_rows)),
        })
    return report


def write_rows_csv(rows: list[FeatureRow], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model_params", "weight_bits", "activation_bits", "kv_bits",
                    "family_int", "gpu", "input_len", "output_len", "tp_degree", "target"])
        for r in rows:
            w.writerow([r.model_params, r.weight_bits, r.activation_bits, r.kv_bits,
                        r.family_int, r.gpu, r.input_len, r.output_len, r.tp_degree, r.target])


def read_rows_csv(path: str) -> list[FeatureRow]:
    rows = []
    with open(path) as fh:
        for rec in csv.DictReader(fh):
            rows.append(FeatureRow(
                model_params=float(rec["model_params"]),
                weight_bits=int(rec["weight_bits"]),
                activation_bits=int(rec["activation_bits"]),
                kv_bits=int(rec["kv_bits"]),
                family_int=int(rec["family_int"]),
                gpu=rec["gpu"],
                input_len=float(rec["input_len"]),
                output_len=float(rec["output_len"]),
                tp_degree=int(rec["tp_degree"]),
                target=float(rec["target"]),
            ))
    return rows


def report_csv(report: list[dict], path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scheme", "train_n", "test_n", "mape"])
        for row in report:
            w.writerow([row["scheme"], row["train_n"], row["test_n"], f"{row['mape']:.2f}"])
