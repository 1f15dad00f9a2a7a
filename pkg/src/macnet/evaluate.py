"""Measurements on trained networks.

Covers logic regression from binarised attributes to traits, N-shot
recognition of a held-out category with a linear SVM, spatial consistency
of attribute maps, silhouette separation and Beta distribution matching.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .network import MacNetwork, predict
from .percept import BetaParams, check_grid, default_grid, kde_eval, kl_beta_vs_kde
from .synth import CategorySpec, derive_seed, gen_patch

# logic trees -------------------------------------------------------------------
# A tree is a nested tuple: ("leaf", index, negated), ("not", child),
# ("and", left, right) or ("or", left, right).


def leaf(index: int, negated: bool = False) -> tuple:
    return ("leaf", int(index), bool(negated))


def evaluate_tree(tree: tuple, bits) -> np.ndarray:
    """Boolean prediction per row of a binary attribute matrix."""
    kind = tree[0]
    if kind == "leaf":
        col = np.asarray(bits)[:, tree[1]].astype(bool)
        return ~col if tree[2] else col
    if kind == "not":
        return ~evaluate_tree(tree[1], bits)
    left, right = evaluate_tree(tree[1], bits), evaluate_tree(tree[2], bits)
    return left & right if kind == "and" else left | right


def n_leaves(tree: tuple) -> int:
    if tree[0] == "leaf":
        return 1
    return sum(n_leaves(c) for c in tree[1:])


def validate_tree(tree: tuple, n_attributes: int) -> None:
    kind = tree[0]
    if kind == "leaf":
        if not 0 <= tree[1] < n_attributes:
            raise ValueError(f"leaf index {tree[1]} outside [0, {n_attributes})")
    elif kind == "not":
        if len(tree) != 2:
            raise ValueError("NOT takes exactly one child")
        validate_tree(tree[1], n_attributes)
    elif kind in ("and", "or"):
        if len(tree) != 3:
            raise ValueError(f"{kind.upper()} takes exactly two children")
        validate_tree(tree[1], n_attributes)
        validate_tree(tree[2], n_attributes)
    else:
        raise ValueError(f"unknown node type {kind!r}")


def tree_to_str(tree: tuple) -> str:
    kind = tree[0]
    if kind == "leaf":
        return ("NOT " if tree[2] else "") + f"a{tree[1]}"
    if kind == "not":
        return f"NOT ({tree_to_str(tree[1])})"
    return f"({tree_to_str(tree[1])} {kind.upper()} {tree_to_str(tree[2])})"


def tree_to_json(tree: tuple):
    if tree[0] == "leaf":
        return {"leaf": tree[1], "negated": tree[2]}
    return {"op": tree[0], "children": [tree_to_json(c) for c in tree[1:]]}


def tree_from_json(obj) -> tuple:
    if "leaf" in obj:
        return leaf(obj["leaf"], obj.get("negated", False))
    return (obj["op"],) + tuple(tree_from_json(c) for c in obj["children"])


def _nodes(tree: tuple, path: tuple = ()):
    yield path, tree
    if tree[0] != "leaf":
        for i, child in enumerate(tree[1:], start=1):
            yield from _nodes(child, path + (i,))


def _replace(tree: tuple, path: tuple, new: tuple) -> tuple:
    if not path:
        return new
    i = path[0]
    return tree[:i] + (_replace(tree[i], path[1:], new),) + tree[i + 1:]


@dataclass
class AnnealConfig:
    n_proposals: int = 20000
    t0: float = 1.0
    cooling: float = 0.97
    cooling_interval: int = 100  # proposals per temperature level
    max_leaves: int = 8
    threshold: float = 0.5

    def __post_init__(self):
        if self.n_proposals < 1 or self.cooling_interval < 1 or self.max_leaves < 1:
            raise ValueError("n_proposals, cooling_interval and max_leaves must be positive")
        if self.t0 <= 0 or not 0 < self.cooling <= 1:
            raise ValueError("t0 must be positive and cooling in (0, 1]")


class _PatternScorer:
    """Misclassification rate computed over the distinct attribute patterns."""

    def __init__(self, bits: np.ndarray, target: np.ndarray):
        self.patterns, inverse = np.unique(bits, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        self.pos = np.bincount(inverse, weights=target, minlength=len(self.patterns))
        self.neg = np.bincount(inverse, weights=1 - target, minlength=len(self.patterns))
        self.n = len(target)

    def error(self, tree: tuple) -> float:
        pred = evaluate_tree(tree, self.patterns)
        return float((self.neg[pred].sum() + self.pos[~pred].sum()) / self.n)


def _propose(tree: tuple, rng: np.random.Generator, n_attr: int, max_leaves: int) -> tuple:
    nodes = list(_nodes(tree))
    leaves = [(p, t) for p, t in nodes if t[0] == "leaf"]
    binary = [(p, t) for p, t in nodes if t[0] in ("and", "or")]
    move = rng.integers(5)
    if move == 0:  # replace leaf
        path, node = leaves[rng.integers(len(leaves))]
        idx = int(rng.integers(n_attr - 1)) if n_attr > 1 else 0
        if n_attr > 1 and idx >= node[1]:
            idx += 1
        return _replace(tree, path, leaf(idx, node[2]))
    if move == 1:  # negate a leaf, or wrap/unwrap an internal node in NOT
        path, node = nodes[rng.integers(len(nodes))]
        if node[0] == "leaf":
            return _replace(tree, path, leaf(node[1], not node[2]))
        return _replace(tree, path, node[1] if node[0] == "not" else ("not", node))
    if move == 2 and binary:  # swap operator
        path, node = binary[rng.integers(len(binary))]
        return _replace(tree, path, ("or" if node[0] == "and" else "and",) + node[1:])
    if move == 4 and binary:  # prune
        path, node = binary[rng.integers(len(binary))]
        return _replace(tree, path, node[1 + rng.integers(2)])
    if n_leaves(tree) < max_leaves:  # grow
        path, node = leaves[rng.integers(len(leaves))]
        new = leaf(rng.integers(n_attr), bool(rng.integers(2)))
        op = "and" if rng.integers(2) else "or"
        return _replace(tree, path, (op, node, new))
    return tree


def fit_logic_tree(attr_bits, trait_bits, cfg: AnnealConfig = AnnealConfig(), seed: int = 0):
    """Simulated annealing over boolean trees; returns (best tree, accuracy)."""
    bits = np.asarray(attr_bits).astype(bool)
    target = np.asarray(trait_bits).astype(np.int64).reshape(-1)
    if bits.ndim != 2 or bits.shape[0] != target.shape[0]:
        raise ValueError(f"attribute bits {bits.shape} do not match {target.shape[0]} targets")
    counts = np.bincount(target, minlength=2)
    if counts.size > 2:
        raise ValueError("trait values must be binary")
    if counts.min() == 0:
        raise ValueError("trait column is constant; nothing to fit")
    if counts.min() < 2:
        raise ValueError("need at least two samples of each trait value")

    rng = np.random.default_rng(seed)
    n_attr = bits.shape[1]
    scorer = _PatternScorer(bits, target)
    current = leaf(rng.integers(n_attr))
    cur_err = scorer.error(current)
    best, best_err = current, cur_err
    temp = cfg.t0
    for step in range(1, cfg.n_proposals + 1):
        cand = _propose(current, rng, n_attr, cfg.max_leaves)
        cand_err = scorer.error(cand)
        delta = cand_err - cur_err
        if delta <= 0 or rng.random() < math.exp(-delta / temp):
            current, cur_err = cand, cand_err
            if cur_err < best_err:
                best, best_err = current, cur_err
        if step % cfg.cooling_interval == 0:
            temp *= cfg.cooling
    return best, 1.0 - best_err


def binarize(attributes, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(attributes) >= threshold


def trait_decoding(train_attrs, train_traits, test_attrs, test_traits, names: Sequence[str],
                   cfg: AnnealConfig = AnnealConfig(), seed: int = 0) -> dict:
    """Fit one tree per trait on training attributes; score on held-out ones."""
    tb, sb = binarize(train_attrs, cfg.threshold), binarize(test_attrs, cfg.threshold)
    train_traits, test_traits = np.asarray(train_traits), np.asarray(test_traits)
    per_trait = {}
    for t, name in enumerate(names):
        tree, train_acc = fit_logic_tree(tb, train_traits[:, t], cfg, seed + t)
        test_acc = float(np.mean(evaluate_tree(tree, sb) == test_traits[:, t].astype(bool)))
        per_trait[name] = {"tree": tree_to_str(tree), "tree_json": tree_to_json(tree),
                           "train_accuracy": train_acc, "test_accuracy": test_acc}
    return {"traits": per_trait,
            "mean_test_accuracy": float(np.mean([v["test_accuracy"] for v in per_trait.values()]))}


# linear SVM --------------------------------------------------------------------

def train_linear_svm(X, y, C: float = 1.0, epochs: int = 200, batch_size: int = 16, seed: int = 0):
    """Hinge-loss subgradient descent (Pegasos steps) with a regularised bias.

    Minimises lambda/2 ||w||^2 + mean_i max(0, 1 - y_i (w . x_i + b)) with
    lambda = 1 / (C n), which has the same minimiser as
    1/2 ||w||^2 + C sum_i hinge_i. Labels must be +1 / -1.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("SVM labels must be +1 or -1")
    n = len(y)
    Xa = np.hstack([X, np.ones((n, 1))])
    lam = 1.0 / (C * n)
    w = np.zeros(Xa.shape[1])
    rng = np.random.default_rng(seed)
    t = 0
    radius = 1.0 / math.sqrt(lam)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            t += 1
            idx = order[start:start + batch_size]
            eta = 1.0 / (lam * t)
            margin = y[idx] * (Xa[idx] @ w)
            viol = idx[margin < 1]
            w *= 1.0 - eta * lam
            if len(viol):
                w += (eta / len(idx)) * (y[viol, None] * Xa[viol]).sum(0)
            norm = np.linalg.norm(w)
            if norm > radius:
                w *= radius / norm
    return w[:-1], float(w[-1])


# N-shot ------------------------------------------------------------------------

FEATURE_SETS = ("attributes", "materials", "concatenation")


@dataclass
class NShotConfig:
    shots: tuple = (1, 2, 5, 10, 20)
    repeats: int = 5
    canvas_size: int = 128
    pool_images: int = 20
    negative_images: int = 20  # per seen category
    test_images: int = 10
    svm_C: float = 1.0
    svm_epochs: int = 200

    def __post_init__(self):
        if self.repeats < 5:
            raise ValueError("N-shot evaluation needs at least 5 repeats")
        self.shots = tuple(int(s) for s in self.shots)


def canvas_patches(canvas: np.ndarray, patch: int = 32) -> np.ndarray:
    """Non-overlapping patch tiles of a (3, S, S) canvas, row-major."""
    _, h, w = canvas.shape
    return np.stack([canvas[:, y:y + patch, x:x + patch]
                     for y in range(0, h - patch + 1, patch) for x in range(0, w - patch + 1, patch)])


def _canvas_features(net: MacNetwork, spec: CategorySpec, seeds, size: int) -> dict:
    p = net.cfg.patch_size
    patches = np.concatenate([canvas_patches(gen_patch(spec, s, size), p) for s in seeds])
    out = predict(net, patches)
    per = len(patches) // len(seeds)
    feats = {"attributes": out["attributes"], "materials": out["probabilities"]}
    feats["concatenation"] = np.hstack([feats["attributes"], feats["materials"]])
    return {k: v.reshape(len(seeds), per, -1) for k, v in feats.items()}


def _standardize(train: np.ndarray, *others):
    mu = train.mean(0)
    sd = train.std(0)
    sd[sd < 1e-12] = 1.0
    return [(a - mu) / sd for a in (train,) + others]


def nshot_eval(net: MacNetwork, categories: Sequence[CategorySpec], held_out: int,
               cfg: NShotConfig = NShotConfig(), seed: int = 0) -> dict:
    """Recall on a category the network never saw, from N example images."""
    k = len(categories)
    if not 0 <= held_out < k:
        raise ValueError(f"held-out index {held_out} outside [0, {k})")
    if net.cfg.n_categories != k - 1:
        raise ValueError("network must be trained on every category except the held-out one")
    if not net.cfg.aux_heads:
        raise ValueError("network has no attribute heads")
    if max(cfg.shots) > cfg.pool_images:
        raise ValueError(f"N={max(cfg.shots)} exceeds the {cfg.pool_images} available images")
    seen = [i for i in range(k) if i != held_out]
    size = cfg.canvas_size
    counter = iter(range(10 ** 9))

    def seeds(n):
        return [derive_seed(seed, next(counter)) for _ in range(n)]

    pos_pool = _canvas_features(net, categories[held_out], seeds(cfg.pool_images), size)
    pos_test = _canvas_features(net, categories[held_out], seeds(cfg.test_images), size)
    neg_pool = [_canvas_features(net, categories[c], seeds(cfg.negative_images), size) for c in seen]
    neg_test = [_canvas_features(net, categories[c], seeds(cfg.test_images), size) for c in seen]

    recall = {fs: {n: [] for n in cfg.shots} for fs in FEATURE_SETS}
    specificity = {fs: {n: [] for n in cfg.shots} for fs in FEATURE_SETS}
    for rep in range(cfg.repeats):
        rng = np.random.default_rng([seed, rep])
        for n in cfg.shots:
            pick = rng.choice(cfg.pool_images, size=n, replace=False)
            n_pos = n * pos_pool["attributes"].shape[1]
            share = [n_pos // len(seen) + (1 if i < n_pos % len(seen) else 0) for i in range(len(seen))]
            neg_idx = []
            for pool, m in zip(neg_pool, share):
                flat = pool["attributes"].shape[0] * pool["attributes"].shape[1]
                neg_idx.append(rng.choice(flat, size=m, replace=False))
            for fs in FEATURE_SETS:
                pos = pos_pool[fs][pick].reshape(-1, pos_pool[fs].shape[-1])
                neg = np.concatenate([pool[fs].reshape(-1, pool[fs].shape[-1])[ix]
                                      for pool, ix in zip(neg_pool, neg_idx)])
                X = np.vstack([pos, neg])
                y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
                tp = pos_test[fs].reshape(-1, X.shape[1])
                tn = np.concatenate([t[fs].reshape(-1, X.shape[1]) for t in neg_test])
                X, tp, tn = _standardize(X, tp, tn)
                w, b = train_linear_svm(X, y, cfg.svm_C, cfg.svm_epochs, seed=derive_seed(seed, rep * 1000 + n))
                recall[fs][n].append(float(np.mean(tp @ w + b > 0)))
                specificity[fs][n].append(float(np.mean(tn @ w + b <= 0)))

    def summary(table):
        return {fs: {str(n): {"mean": float(np.mean(v)), "std": float(np.std(v)), "values": v}
                     for n, v in per.items()} for fs, per in table.items()}

    return {"held_out": held_out, "held_out_name": categories[held_out].name,
            "shots": list(cfg.shots), "repeats": cfg.repeats,
            "recall": summary(recall), "specificity": summary(specificity)}


def nshot_curve_rows(report: dict) -> list:
    """(N, feature_set, mean, std) rows of the recall curves."""
    rows = []
    for fs, per in report["recall"].items():
        for n, stats in per.items():
            rows.append((int(n), fs, stats["mean"], stats["std"]))
    return sorted(rows, key=lambda r: (FEATURE_SETS.index(r[1]), r[0]))


# spatial / cluster / distribution ------------------------------------------------

def spatial_consistency(attr_map, mask) -> tuple:
    """Mean |difference| of 4-neighbour pixel pairs inside regions and across boundaries."""
    attr_map = np.asarray(attr_map, dtype=np.float64)
    mask = np.asarray(mask)
    if attr_map.shape != mask.shape or attr_map.ndim != 2:
        raise ValueError(f"map {attr_map.shape} and mask {mask.shape} must be equal 2-D shapes")
    if len(np.unique(mask)) < 2:
        raise ValueError("mask must contain at least two regions")
    diffs = [np.abs(np.diff(attr_map, axis=ax)) for ax in (0, 1)]
    same = [np.diff(mask, axis=ax) == 0 for ax in (0, 1)]
    d = np.concatenate([x.ravel() for x in diffs])
    s = np.concatenate([x.ravel() for x in same])
    return float(d[s].mean()), float(d[~s].mean())


def cluster_separation(vectors, labels) -> float:
    """Mean silhouette (Euclidean); singleton clusters and a = b = 0 score 0."""
    X = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("silhouette needs at least two labels")
    dist = cdist(X, X)
    member = labels[None, :] == classes[:, None]  # (C, n)
    sizes = member.sum(1)
    sums = dist @ member.T  # (n, C)
    own = np.searchsorted(classes, labels)
    n_own = sizes[own]
    a = np.where(n_own > 1, sums[np.arange(len(X)), own] / np.maximum(n_own - 1, 1), 0.0)
    other = sums / sizes[None, :]
    other[np.arange(len(X)), own] = np.inf
    b = other.min(1)
    denom = np.maximum(a, b)
    s = np.where((n_own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def distribution_match(values, beta: BetaParams = BetaParams(), grid=None, bandwidth="auto") -> float:
    """KL between the Beta prior and a KDE of pooled attribute values."""
    grid = default_grid() if grid is None else check_grid(grid)
    q = kde_eval(np.asarray(values, dtype=np.float64).ravel(), grid, bandwidth)
    return kl_beta_vs_kde(grid, beta, q)
