"""Storage, growth and traversal shared by the regression and causal forests."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _tree
from .exceptions import InputError

FORMAT_VERSION = 1


@dataclass
class TreeNode:
    """Readable view of one node of a fitted tree.

    Internal nodes carry ``split_feature``/``split_value`` and two children;
    leaves carry the training rows used for their estimate.
    """

    split_feature: int | None = None
    split_value: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    leaf_members: np.ndarray | None = None
    n_split: int = 0

    @property
    def is_leaf(self):
        return self.split_feature is None


@dataclass
class TreePlan:
    split_idx: np.ndarray
    est_idx: np.ndarray
    sample: np.ndarray
    seed: int
    bag: int = -1
    stratum: int = -1


@dataclass
class GrownForest:
    """Concatenated flat arrays for all trees; node ids are global."""

    n_train: int
    roots: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    mstart: np.ndarray
    mcount: np.ndarray
    members: np.ndarray
    nsplit: np.ndarray
    in_sample: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def n_trees(self):
        return self.roots.shape[0]

    def apply(self, X):
        X = np.ascontiguousarray(X, dtype=np.float64)
        return _tree.apply_trees(X, self.roots, self.feature, self.threshold,
                                 self.left, self.right)

    def member_node(self):
        """Node id of every entry of ``members``."""
        return np.repeat(np.arange(self.feature.shape[0]), self.mcount)

    def leaf_means(self, values):
        node_of = self.member_node()
        sums = np.bincount(node_of, weights=values[self.members],
                           minlength=self.feature.shape[0])
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.mcount > 0, sums / np.maximum(self.mcount, 1), 0.0)

    def weights(self, leaves_row, tree_mask=None):
        if tree_mask is None:
            tree_mask = np.ones(self.n_trees, dtype=np.bool_)
        return _tree.accumulate_weights(leaves_row, tree_mask, self.mstart,
                                        self.mcount, self.members, self.n_train)

    def tree(self, t):
        return _to_nodes(self, int(self.roots[t]))

    def to_arrays(self):
        out = {k: getattr(self, k) for k in (
            "roots", "feature", "threshold", "left", "right", "mstart", "mcount",
            "members", "nsplit", "in_sample")}
        out["n_train"] = np.array(self.n_train)
        for k, v in self.extra.items():
            out["extra__" + k] = v
        return out

    @classmethod
    def from_arrays(cls, arrs):
        extra = {k[len("extra__"):]: arrs[k] for k in arrs if k.startswith("extra__")}
        return cls(n_train=int(arrs["n_train"]), extra=extra, **{
            k: arrs[k] for k in ("roots", "feature", "threshold", "left", "right",
                                 "mstart", "mcount", "members", "nsplit", "in_sample")})


def _to_nodes(grown, node):
    if grown.feature[node] < 0:
        s = grown.mstart[node]
        return TreeNode(leaf_members=grown.members[s:s + grown.mcount[node]].copy(),
                        n_split=int(grown.nsplit[node]))
    return TreeNode(split_feature=int(grown.feature[node]),
                    split_value=float(grown.threshold[node]),
                    left=_to_nodes(grown, grown.left[node]),
                    right=_to_nodes(grown, grown.right[node]),
                    n_split=int(grown.nsplit[node]))


def resolve_mtry(mtry, d):
    if mtry is None:
        return min(d, int(math.ceil(math.sqrt(d))) + 20)
    if isinstance(mtry, str):
        if mtry == "sqrt":
            return int(math.ceil(math.sqrt(d)))
        if mtry == "third":
            return int(math.ceil(d / 3))
        raise InputError(f"unknown mtry rule {mtry!r}")
    mtry = int(mtry)
    if not 1 <= mtry <= d:
        raise InputError(f"mtry={mtry} must lie in [1, {d}]")
    return mtry


def _draw(rng, pool, size):
    return np.sort(rng.choice(pool, size=size, replace=False))


def _honest_split(rng, sample, honesty_fraction):
    if honesty_fraction is None:
        return sample, sample
    perm = rng.permutation(sample)
    n_split = int(math.floor(honesty_fraction * sample.shape[0]))
    n_split = min(max(n_split, 1), sample.shape[0] - 1)
    return np.sort(perm[:n_split]), np.sort(perm[n_split:])


def allocate(total, sizes):
    """Split ``total`` units across strata proportionally (largest remainder)."""
    sizes = np.asarray(sizes, dtype=float)
    raw = total * sizes / sizes.sum()
    base = np.floor(raw).astype(int)
    rem = total - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:rem]] += 1
    return base


def stratum_pools(n, strata):
    if strata is None:
        return [np.arange(n)], np.zeros(n, dtype=np.int64)
    strata = np.asarray(strata)
    labels, codes = np.unique(strata, return_inverse=True)
    return [np.flatnonzero(codes == k) for k in range(len(labels))], codes


def plan_trees(n, num_trees, subsample_fraction, honesty_fraction, seed, strata=None):
    """One independent subsample per tree (nuisance forests)."""
    pools, _ = stratum_pools(n, strata)
    per = allocate(num_trees, [len(p) for p in pools])
    plans = []
    t = 0
    for s, (pool, count) in enumerate(zip(pools, per)):
        size = int(math.ceil(subsample_fraction * len(pool)))
        for _ in range(count):
            rng = np.random.default_rng([seed, 2, t])
            sample = _draw(rng, pool, size)
            split, est = _honest_split(rng, sample, honesty_fraction)
            plans.append(TreePlan(split, est, sample, int(rng.integers(2**31 - 1)),
                                  stratum=s))
            t += 1
    return plans


def plan_bagged_trees(n, num_trees, bag_size, subsample_fraction, honesty_fraction,
                      seed, strata=None):
    """Trees grouped in bags of ``bag_size`` sharing one half-sample draw."""
    pools, _ = stratum_pools(n, strata)
    n_bags = num_trees // bag_size
    per = allocate(n_bags, [len(p) for p in pools])
    plans = []
    halves = []
    bag = 0
    for s, (pool, count) in enumerate(zip(pools, per)):
        half_size = int(math.ceil(len(pool) / 2)) if bag_size > 1 else len(pool)
        size = min(int(math.ceil(subsample_fraction * len(pool))), half_size)
        for _ in range(count):
            rng_bag = np.random.default_rng([seed, 1, bag])
            half = _draw(rng_bag, pool, half_size)
            halves.append(half)
            for j in range(bag_size):
                rng = np.random.default_rng([seed, 3, bag, j])
                sample = _draw(rng, half, size)
                split, est = _honest_split(rng, sample, honesty_fraction)
                plans.append(TreePlan(split, est, sample, int(rng.integers(2**31 - 1)),
                                      bag=bag, stratum=s))
            bag += 1
    return plans, halves


def grow(X, a, b, treated, plans, *, kind, mtry, min_leaf, min_treated=0,
         min_control=0, penalty=0.0, honest=True, n_jobs=1):
    """Grow every planned tree and concatenate the results."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    treated = np.ascontiguousarray(treated, dtype=np.int64)
    n = X.shape[0]

    def one(plan):
        return _tree.grow_tree(X, a, b, treated, plan.split_idx.astype(np.int64),
                               plan.est_idx.astype(np.int64), kind, mtry, min_leaf,
                               min_treated, min_control, penalty, honest, plan.seed)

    n_jobs = max(1, int(n_jobs or 1))
    if n_jobs == 1:
        trees = [one(p) for p in plans]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(one, plans))
    return assemble(n, plans, trees)


def assemble(n, plans, trees):
    sizes = np.array([t[0].shape[0] for t in trees], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    feature = np.concatenate([t[0] for t in trees])
    threshold = np.concatenate([t[1] for t in trees])
    left = np.concatenate([np.where(t[2] >= 0, t[2] + o, -1) for t, o in zip(trees, offsets)])
    right = np.concatenate([np.where(t[3] >= 0, t[3] + o, -1) for t, o in zip(trees, offsets)])
    members, mcount, nsplit = [], [], []
    for plan, t, size in zip(plans, trees, sizes):
        est_leaf, split_leaf = t[4], t[5]
        order = np.argsort(est_leaf, kind="stable")
        members.append(plan.est_idx[order])
        mcount.append(np.bincount(est_leaf, minlength=size))
        nsplit.append(np.bincount(split_leaf, minlength=size))
    mcount = np.concatenate(mcount).astype(np.int64)
    nsplit = np.concatenate(nsplit).astype(np.int64)
    members = np.concatenate(members).astype(np.int64)
    mstart = np.concatenate([[0], np.cumsum(mcount)[:-1]]).astype(np.int64)
    in_sample = np.zeros((len(plans), n), dtype=np.bool_)
    for t, plan in enumerate(plans):
        in_sample[t, plan.sample] = True
    return GrownForest(n_train=n, roots=offsets.astype(np.int64), feature=feature,
                       threshold=threshold, left=left, right=right, mstart=mstart,
                       mcount=mcount, members=members, nsplit=nsplit,
                       in_sample=in_sample)


def save_npz(path, kind, params, grown, **arrays):
    meta = json.dumps({"format": FORMAT_VERSION, "kind": kind, "params": params})
    np.savez_compressed(path, meta=np.array(meta), **grown.to_arrays(),
                        **{"data__" + k: v for k, v in arrays.items()})


def load_npz(path, kind):
    with np.load(path, allow_pickle=False) as z:
        arrs = {k: z[k] for k in z.files}
    meta = json.loads(str(arrs.pop("meta")))
    if meta.get("format") != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported forest format {meta.get('format')}")
    if meta.get("kind") != kind:
        raise InputError(f"{path}: holds a {meta.get('kind')} forest, not {kind}")
    data = {k[len("data__"):]: arrs.pop(k) for k in list(arrs) if k.startswith("data__")}
    return meta["params"], GrownForest.from_arrays(arrs), data
