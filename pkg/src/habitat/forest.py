"""CART random forest for binary presence/absence classification.

Trees are grown on bootstrap multisets with Gini splits over a random feature
subset at every node. Split comparison is done in exact integer arithmetic so
ties resolve deterministically: lower feature index first, then lower
threshold. Every tree's randomness comes from a seed derived from the master
seed and the tree index, so results do not depend on the number of threads.
"""

from __future__ import annotations

import io
import itertools
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .grid import feature_layer
from .metrics import confusion, precision_recall_f1
from .sampling import LabeledDataset, mix_seed


class ForestError(ValueError):
    pass


class ForestFormatError(ForestError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"byte {offset}: {message}")


@dataclass(frozen=True)
class Hyperparams:
    n_estimators: int = 500
    max_features: int = 2
    max_depth: int = 22
    min_samples_split: int = 2
    min_samples_leaf: int = 1

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ForestError("n_estimators must be >= 1")
        if self.max_features < 1:
            raise ForestError("max_features must be >= 1")
        if self.max_depth < 1:
            raise ForestError("max_depth must be >= 1")
        if self.min_samples_split < 2:
            raise ForestError("min_samples_split must be >= 2")
        if self.min_samples_leaf < 1:
            raise ForestError("min_samples_leaf must be >= 1")

    def check(self, n_features: int) -> None:
        if self.max_features > n_features:
            raise ForestError(
                f"max_features={self.max_features} exceeds the {n_features} available features")


def gini(counts) -> float:
    n0, n1 = counts
    n = n0 + n1
    if n <= 0:
        raise ForestError("gini of an empty node")
    p0 = n0 / n
    p1 = n1 / n
    return 1.0 - p0 * p0 - p1 * p1


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    impurity_decrease: float
    n_left: int
    n_right: int


def _best_split(X, y, idx, features, min_samples_leaf=1):
    """Best Gini split of the multiset ``idx`` over ``features`` (or None).

    Maximising the weighted decrease is the same as maximising
    S = (l0^2 + l1^2)/nl + (r0^2 + r1^2)/nr, compared here as exact fractions.
    """
    n = len(idx)
    yi = y[idx]
    n1 = int(yi.sum())
    n0 = n - n1
    if n0 == 0 or n1 == 0:
        return None
    parent = n0 * n0 + n1 * n1
    best = None  # (num, den, feature, position, xs)
    nl_all = np.arange(1, n, dtype=np.int64)
    size_ok = (nl_all >= min_samples_leaf) & (n - nl_all >= min_samples_leaf)
    if not size_ok.any():
        return None
    for f in sorted(features):
        xv = X[idx, f]
        order = np.argsort(xv, kind="stable")
        xs = xv[order]
        cand = np.flatnonzero((xs[1:] != xs[:-1]) & size_ok)
        if not len(cand):
            continue
        c1 = np.cumsum(yi[order])[cand]
        nl = cand + 1
        l1 = c1
        l0 = nl - l1
        nr = n - nl
        r1 = n1 - l1
        r0 = n0 - l0
        num = (l0 * l0 + l1 * l1) * nr + (r0 * r0 + r1 * r1) * nl
        den = nl * nr
        score = num / den
        top = score.max()
        near = np.flatnonzero(score >= top * (1.0 - 1e-12))
        k = int(near[0])
        for j in near[1:]:
            if int(num[j]) * int(den[k]) > int(num[k]) * int(den[j]):
                k = int(j)
        cur = (int(num[k]), int(den[k]), f, int(cand[k]), xs)
        if best is None or cur[0] * best[1] > best[0] * cur[1]:
            best = cur
    if best is None:
        return None
    num, den, f, pos, xs = best
    # require a strict decrease: num/den > parent/n
    if num * n <= parent * den:
        return None
    lo, hi = float(xs[pos]), float(xs[pos + 1])
    threshold = (lo + hi) / 2.0
    if not lo <= threshold < hi:
        threshold = lo
    nl = pos + 1
    decrease = (num / den - parent / n) / n
    return Split(f, threshold, decrease, nl, n - nl)


def best_split(data: LabeledDataset, samples, feature_subset, min_samples_leaf: int = 1):
    """Best split of ``samples`` (indices into ``data``, repeats allowed) or None."""
    if not len(feature_subset):
        raise ForestError("feature subset is empty")
    return _best_split(data.X, data.y, np.asarray(samples, dtype=np.int64), feature_subset,
                       min_samples_leaf)


@dataclass(eq=False)
class Tree:
    """Flat array representation; node 0 is the root, leaves have feature -1.

    ``counts[i]`` holds the (absence, presence) bootstrap counts reaching node
    ``i``; ``decrease[i]`` is the Gini decrease of an internal node's split.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray
    decrease: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, i: int) -> bool:
        return self.feature[i] < 0

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while len(active):
            nd = node[active]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        leaf = self.leaf_index(np.atleast_2d(X))
        c = self.counts[leaf]
        return c[:, 1] / c.sum(axis=1)

    def structurally_equal(self, other: "Tree") -> bool:
        return all(np.array_equal(getattr(self, a), getattr(other, a))
                   for a in ("feature", "threshold", "left", "right", "counts", "decrease"))


def fit_tree(data: LabeledDataset, sample_indices, params: Hyperparams, seed: int) -> Tree:
    """Grow one CART tree on a bootstrap multiset of ``data`` row indices."""
    idx0 = np.asarray(sample_indices, dtype=np.int64)
    if len(idx0) == 0:
        raise ForestError("cannot fit a tree on an empty sample set")
    X, y = data.X, data.y
    p = X.shape[1]
    params.check(p)
    rng = np.random.default_rng(seed)

    feature, threshold, left, right, counts, decrease = [], [], [], [], [], []

    def new_node(idx):
        n1 = int(y[idx].sum())
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append((len(idx) - n1, n1))
        decrease.append(0.0)
        return len(feature) - 1

    stack = [(new_node(idx0), idx0, 0)]
    while stack:
        node, idx, depth = stack.pop()
        n0, n1 = counts[node]
        if depth >= params.max_depth or n0 == 0 or n1 == 0 or len(idx) < params.min_samples_split:
            continue
        subset = rng.choice(p, size=params.max_features, replace=False)
        split = _best_split(X, y, idx, subset.tolist(), params.min_samples_leaf)
        if split is None:
            continue
        go_left = X[idx, split.feature] <= split.threshold
        li, ri = idx[go_left], idx[~go_left]
        lnode = new_node(li)
        rnode = new_node(ri)
        feature[node] = split.feature
        threshold[node] = split.threshold
        left[node] = lnode
        right[node] = rnode
        decrease[node] = split.impurity_decrease
        # right pushed first so the left subtree is grown (and numbered) first
        stack.append((rnode, ri, depth + 1))
        stack.append((lnode, li, depth + 1))

    return Tree(np.array(feature, np.int64), np.array(threshold, np.float64),
                np.array(left, np.int64), np.array(right, np.int64),
                np.array(counts, np.int64).reshape(-1, 2), np.array(decrease, np.float64))


def tree_seed(master_seed: int, t: int) -> int:
    return mix_seed(master_seed, t)


def bootstrap_indices(n: int, per_tree_seed: int) -> np.ndarray:
    return np.random.default_rng(mix_seed(per_tree_seed, 0)).integers(0, n, size=n)


def split_seed(per_tree_seed: int) -> int:
    """Seed for the per-node feature draws of one tree."""
    return mix_seed(per_tree_seed, 1)


@dataclass(eq=False)
class RandomForest:
    trees: list[Tree]
    params: Hyperparams
    feature_names: list[str]
    tree_seeds: list[int]
    oob_indices: list[np.ndarray]
    n_train: int
    master_seed: int = 0

    @property
    def n_features(self) -> int:
        return len(self.feature_names)


def _fit_one(train: LabeledDataset, params: Hyperparams, seed: int):
    boot = bootstrap_indices(len(train), seed)
    tree = fit_tree(train, boot, params, split_seed(seed))
    oob = np.setdiff1d(np.arange(len(train)), boot)
    return tree, oob


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def fit_forest(train: LabeledDataset, params: Hyperparams, master_seed: int,
               threads: int = 1) -> RandomForest:
    n0, n1 = train.class_counts()
    if n0 < 1 or n1 < 1:
        raise ForestError(f"training set needs both classes, got {n0} absences / {n1} presences")
    params.check(train.n_features)
    seeds = [tree_seed(master_seed, t) for t in range(params.n_estimators)]
    fitted = _map(lambda s: _fit_one(train, params, s), seeds, threads)
    return RandomForest([t for t, _ in fitted], params, list(train.feature_names), seeds,
                        [o for _, o in fitted], len(train), master_seed)


def _check_x(f: RandomForest, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != f.n_features:
        raise ForestError(f"expected {f.n_features} features, got {X.shape[1]}")
    if np.isnan(X).any():
        raise ForestError("feature vector contains nodata")
    return X, single


def predict_proba_batch(f: RandomForest, X, threads: int = 1) -> np.ndarray:
    """Mean over trees of the leaf presence fraction, for each row of X."""
    X, _ = _check_x(f, X)
    per_tree = _map(lambda t: t.predict_proba(X), f.trees, threads)
    # fixed tree-order accumulation so batch and single-row results agree bitwise
    total = np.zeros(len(X))
    for p in per_tree:
        total += p
    return total / len(f.trees)


def predict_proba(f: RandomForest, x) -> float:
    X, single = _check_x(f, x)
    if not single:
        raise ForestError("predict_proba takes one feature vector; use predict_proba_batch")
    return float(predict_proba_batch(f, X)[0])


def predict_class(f: RandomForest, x, threshold: float = 0.5):
    """1 where predicted probability >= threshold (ties go to presence)."""
    if not 0.0 < threshold < 1.0:
        raise ForestError("threshold must lie in (0, 1)")
    X = np.asarray(x, dtype=np.float64)
    if X.ndim == 1:
        return int(predict_proba(f, X) >= threshold)
    return (predict_proba_batch(f, X) >= threshold).astype(np.int64)


# ---------------------------------------------------------------------------
# Importance and feature dropping
# ---------------------------------------------------------------------------

def importance_mdi(f: RandomForest) -> np.ndarray:
    """Impurity decrease weighted by node share, averaged over trees, normalised to 1."""
    total = np.zeros(f.n_features)
    for tree in f.trees:
        root_n = tree.counts[0].sum()
        internal = tree.feature >= 0
        w = tree.counts[internal].sum(axis=1) / root_n * tree.decrease[internal]
        np.add.at(total, tree.feature[internal], w)
    total /= len(f.trees)
    s = total.sum()
    return total / s if s > 0 else total


def importance_permutation(f: RandomForest, test: LabeledDataset, n_repeats: int = 10,
                           rng_seed: int = 0, threshold: float = 0.5, shuffle=None) -> np.ndarray:
    """Mean accuracy drop when one feature column is permuted.

    ``shuffle(rng, n)`` returns the permutation to apply; the default draws a
    uniform one from the seeded generator.
    """
    if len(test) == 0:
        raise ForestError("permutation importance needs a non-empty test set")
    rng = np.random.default_rng(rng_seed)
    shuffle = shuffle or (lambda g, n: g.permutation(n))
    base = np.mean((predict_proba_batch(f, test.X) >= threshold) == test.y)
    out = np.zeros(f.n_features)
    for j in range(f.n_features):
        drops = []
        for _ in range(n_repeats):
            Xp = test.X.copy()
            Xp[:, j] = test.X[shuffle(rng, len(test)), j]
            acc = np.mean((predict_proba_batch(f, Xp) >= threshold) == test.y)
            drops.append(base - acc)
        out[j] = np.mean(drops)
    return out


def group_importance(feature_names: Sequence[str], importance) -> dict[str, float]:
    """Sum column importances per source layer (indicator columns share a layer)."""
    out: dict[str, float] = {}
    for name, v in zip(feature_names, importance):
        g = feature_layer(name)
        out[g] = out.get(g, 0.0) + float(v)
    return out


def least_important(feature_names: Sequence[str], importance, k: int) -> list[str]:
    """The k least important layers; ties go to the earlier layer."""
    groups = group_importance(feature_names, importance)
    order = list(groups)
    if k >= len(order):
        raise ForestError(f"cannot drop {k} of {len(order)} features")
    if k < 0:
        raise ForestError("k must be >= 0")
    ranked = sorted(range(len(order)), key=lambda i: (groups[order[i]], i))
    return [order[i] for i in sorted(ranked[:k])]


def drop_least_important(ds: LabeledDataset, importance, k: int) -> LabeledDataset:
    """Remove the k lowest-importance features.

    Indicator columns of one categorical layer ("lulc=1", "lulc=2") count as a
    single feature whose importance is their sum.
    """
    dropped = set(least_important(ds.feature_names, importance, k))
    keep = [n for n in ds.feature_names if feature_layer(n) not in dropped]
    return ds.select_features(keep)


def oob_predictions(f: RandomForest, train: LabeledDataset):
    """(mean OOB probability, number of covering trees) per training sample."""
    if len(train) != f.n_train:
        raise ForestError("OOB evaluation needs the forest's own training set")
    total = np.zeros(len(train))
    cover = np.zeros(len(train), dtype=np.int64)
    for tree, oob in zip(f.trees, f.oob_indices):
        if len(oob):
            total[oob] += tree.predict_proba(train.X[oob])
            cover[oob] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        proba = np.where(cover > 0, total / np.maximum(cover, 1), np.nan)
    return proba, cover


def oob_score(f: RandomForest, train: LabeledDataset, threshold: float = 0.5) -> float:
    """OOB accuracy over samples covered by at least one tree."""
    proba, cover = oob_predictions(f, train)
    covered = cover > 0
    if not covered.any():
        raise ForestError("no sample is out-of-bag for any tree")
    return float(np.mean((proba[covered] >= threshold) == train.y[covered]))


# ---------------------------------------------------------------------------
# Hyper-parameter search
# ---------------------------------------------------------------------------

def stratified_folds(y, k: int, seed: int) -> np.ndarray:
    """Fold id per sample; each class is shuffled then dealt round-robin."""
    y = np.asarray(y)
    fold = np.empty(len(y), dtype=np.int64)
    rng = np.random.default_rng(seed)
    for c in (0, 1):
        idx = rng.permutation(np.flatnonzero(y == c))
        fold[idx] = np.arange(len(idx)) % k
    return fold


@dataclass
class ScoreRow:
    params: Hyperparams
    fold_f1: list
    mean_f1: float | None


def grid_search(train: LabeledDataset, grid: dict, folds: int = 5, master_seed: int = 0,
                base: Hyperparams | None = None, threads: int = 1):
    """Stratified k-fold cross-validated F1 over the product of candidate values.

    ``grid`` maps ``n_estimators``, ``max_features`` and ``max_depth`` to lists.
    A combination with an undefined F1 on any fold has mean None and ranks
    last. Equal means prefer fewer trees, then shallower trees, then fewer
    features per split.
    """
    if folds < 2:
        raise ForestError("grid search needs at least 2 folds")
    base = base or Hyperparams()
    keys = ("n_estimators", "max_features", "max_depth")
    lists = [list(grid.get(k, [getattr(base, k)])) for k in keys]
    if any(not v for v in lists):
        raise ForestError("hyper-parameter grid is empty")
    fold = stratified_folds(train.y, folds, mix_seed(master_seed, 17))
    for k in range(folds):
        for part in (fold == k, fold != k):
            if len(np.unique(train.y[part])) < 2:
                raise ForestError(f"fold {k} has a single class")

    rows = []
    for combo in itertools.product(*lists):
        params = Hyperparams(*combo, base.min_samples_split, base.min_samples_leaf)
        scores = []
        for k in range(folds):
            tr = train.take(np.flatnonzero(fold != k))
            va = train.take(np.flatnonzero(fold == k))
            forest = fit_forest(tr, params, mix_seed(master_seed, 100 + k), threads)
            pred = (predict_proba_batch(forest, va.X) >= 0.5).astype(np.int64)
            scores.append(precision_recall_f1(confusion(va.y, pred))[2])
        mean = None if any(s is None for s in scores) else float(np.mean(scores))
        rows.append(ScoreRow(params, scores, mean))

    def rank(row: ScoreRow):
        p = row.params
        return (row.mean_f1 is not None, row.mean_f1 or 0.0,
                -p.n_estimators, -p.max_depth, -p.max_features)

    best = max(rows, key=rank)
    return best.params, rows


def write_score_table(rows: Sequence[ScoreRow], delimiter: str = "\t") -> str:
    out = io.StringIO()
    nf = max(len(r.fold_f1) for r in rows)
    cols = ["n_estimators", "max_features", "max_depth", "mean_f1",
            *(f"fold{k}_f1" for k in range(nf))]
    out.write(delimiter.join(cols) + "\n")

    def fmt(v):
        return "undefined" if v is None else repr(float(v))
    for r in rows:
        p = r.params
        out.write(delimiter.join([str(p.n_estimators), str(p.max_features), str(p.max_depth),
                                  fmt(r.mean_f1), *(fmt(s) for s in r.fold_f1)]) + "\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

MAGIC = b"HABRF"
FORMAT_VERSION = 1


def serialize_forest(f: RandomForest) -> bytes:
    """Versioned binary format: magic, version, length-prefixed JSON metadata,
    then per tree length-prefixed little-endian node arrays and OOB indices."""
    meta = {
        "params": asdict(f.params),
        "feature_names": f.feature_names,
        "tree_seeds": [str(s) for s in f.tree_seeds],
        "n_train": f.n_train,
        "master_seed": str(f.master_seed),
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<H", FORMAT_VERSION))
    out.write(struct.pack("<I", len(meta_bytes)))
    out.write(meta_bytes)
    out.write(struct.pack("<I", len(f.trees)))
    for tree, oob in zip(f.trees, f.oob_indices):
        out.write(struct.pack("<I", tree.n_nodes))
        out.write(tree.feature.astype("<i4").tobytes())
        out.write(tree.threshold.astype("<f8").tobytes())
        out.write(tree.left.astype("<i4").tobytes())
        out.write(tree.right.astype("<i4").tobytes())
        out.write(tree.counts.astype("<i8").tobytes())
        out.write(tree.decrease.astype("<f8").tobytes())
        out.write(struct.pack("<I", len(oob)))
        out.write(np.asarray(oob).astype("<i4").tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise ForestFormatError(
                f"truncated {what}: need {n} bytes, {len(self.data) - self.pos} left", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count, what), dtype=dtype).astype(
            dtype.replace("<", "").replace("i4", "i8"))


def parse_forest(data: bytes) -> RandomForest:
    r = _Reader(bytes(data))
    if len(data) == 0:
        raise ForestFormatError("empty input", 0)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise ForestFormatError("not a forest file (bad magic)", 0)
    version = struct.unpack("<H", r.take(2, "version"))[0]
    if version != FORMAT_VERSION:
        raise ForestFormatError(f"unsupported format version {version}", len(MAGIC))
    meta_len = r.u32("metadata length")
    meta_at = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
        params = Hyperparams(**meta["params"])
        names = list(meta["feature_names"])
        seeds = [int(s) for s in meta["tree_seeds"]]
        n_train = int(meta["n_train"])
        master = int(meta["master_seed"])
    except ForestFormatError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise ForestFormatError(f"bad metadata ({exc})", meta_at) from None
    n_trees_at = r.pos
    n_trees = r.u32("tree count")
    if n_trees != params.n_estimators or n_trees != len(seeds):
        raise ForestFormatError("tree count disagrees with metadata", n_trees_at)
    trees, oobs = [], []
    for t in range(n_trees):
        at = r.pos
        n = r.u32(f"tree {t} node count")
        if n == 0:
            raise ForestFormatError(f"tree {t} has no nodes", at)
        feat = r.array("<i4", n, f"tree {t} features")
        thr = r.array("<f8", n, f"tree {t} thresholds")
        left = r.array("<i4", n, f"tree {t} left children")
        right = r.array("<i4", n, f"tree {t} right children")
        counts = r.array("<i8", 2 * n, f"tree {t} counts").reshape(n, 2)
        dec = r.array("<f8", n, f"tree {t} decreases")
        internal = feat >= 0
        node_ids = np.arange(n)
        # children always follow their parent, which also rules out cycles
        if (np.any(feat >= len(names)) or np.any(feat < -1)
                or np.any((left[internal] <= node_ids[internal]) | (left[internal] >= n))
                or np.any((right[internal] <= node_ids[internal]) | (right[internal] >= n))
                or np.any(counts < 0) or np.any(counts.sum(axis=1) < 1)):
            raise ForestFormatError(f"tree {t} has an invalid node table", at)
        oob_at = r.pos
        n_oob = r.u32(f"tree {t} OOB count")
        oob = r.array("<i4", n_oob, f"tree {t} OOB indices")
        if np.any((oob < 0) | (oob >= n_train)):
            raise ForestFormatError(f"tree {t} OOB index out of range", oob_at)
        trees.append(Tree(feat, thr, left, right, counts, dec))
        oobs.append(oob)
    if r.pos != len(r.data):
        raise ForestFormatError(f"{len(r.data) - r.pos} trailing bytes", r.pos)
    return RandomForest(trees, params, names, seeds, oobs, n_train, master)


def save_forest(f: RandomForest, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_forest(f))


def load_forest(path) -> RandomForest:
    with open(path, "rb") as fh:
        return parse_forest(fh.read())
