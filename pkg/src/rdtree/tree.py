"""Regression discontinuity trees: grow, prune, cross-validate, honestly estimate, predict."""

from __future__ import annotations

import copy
import heapq
import json
import math
from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np

from ._split import GrowContext, find_best_split
from .criterion import emse_fuzzy, emse_sharp, leaf_stats
from .data import FUZZY, Dataset, honest_split
from .errors import (
    ArgumentError,
    CVError,
    DegenerateFirstStageError,
    EstimationError,
    FitError,
    RDTreeError,
)
from .leaf_fit import (
    ABOVE,
    BELOW,
    CLUSTERED,
    FIRST_STAGE_TOL,
    HOMOSCEDASTIC,
    VARIANCE_KINDS,
    LeafEstimate,
    PolySpec,
    fit_side,
    leaf_estimate,
)

Z95 = 1.959963984540054


@dataclass(frozen=True)
class FitConfig:
    q: int = 1
    min_side_obs: int = 50
    min_gain: float = 0.0
    bucket_size: int = 5
    max_depth: Optional[int] = None
    max_leaves: Optional[int] = None
    cv_folds: int = 10
    one_se_rule: bool = True
    variance: str = HOMOSCEDASTIC
    honest_fraction: float = 0.5
    seed: int = 0
    design: Optional[str] = None
    sweep: str = "prefix"

    def __post_init__(self):
        if self.q < 0 or int(self.q) != self.q:
            raise ArgumentError(f"q must be a non-negative integer, got {self.q}")
        if self.min_side_obs < self.q + 2:
            raise ArgumentError(f"min_side_obs must be at least q + 2 = {self.q + 2}")
        if self.cv_folds < 2:
            raise ArgumentError("cv_folds must be at least 2")
        if self.min_gain < 0:
            raise ArgumentError("min_gain must be non-negative")
        if self.bucket_size < 1:
            raise ArgumentError("bucket_size must be at least 1")
        if self.variance not in VARIANCE_KINDS:
            raise ArgumentError(f"unknown variance kind {self.variance!r}")
        if not 0 < self.honest_fraction < 1:
            raise ArgumentError("honest_fraction must be in (0, 1)")
        if self.sweep not in ("prefix", "sherman_morrison"):
            raise ArgumentError(f"unknown sweep {self.sweep!r}")


@dataclass(eq=False)
class Node:
    feature: Optional[int] = None
    threshold: Optional[float] = None
    left: Optional["Node"] = None
    right: Optional["Node"] = None
    leaf_id: Optional[int] = None
    estimate: Optional[LeafEstimate] = None
    # training-sample criterion share if this node were a leaf
    risk: float = math.nan
    n_train: int = 0
    n_est: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def walk(self):
        yield self
        if not self.is_leaf:
            yield from self.left.walk()
            yield from self.right.walk()

    def leaves(self):
        return [n for n in self.walk() if n.is_leaf]

    def collapse(self):
        self.feature = self.threshold = self.left = self.right = None


@dataclass(frozen=True)
class PredictionResult:
    tau: float
    se: float
    ci95: tuple
    leaf_id: Optional[int]
    leaf_path: list


@dataclass(eq=False)
class Tree:
    root: Node
    feature_names: tuple
    cutoff: float = 0.0
    design: str = "sharp"
    q: int = 1

    @property
    def n_leaves(self) -> int:
        return len(self.root.leaves())

    def leaves(self) -> List[Node]:
        return self.root.leaves()

    def copy(self) -> "Tree":
        return copy.deepcopy(self)

    def number_leaves(self):
        for i, leaf in enumerate(self.leaves(), start=1):
            leaf.leaf_id = i

    def features_used(self) -> set:
        return {n.feature for n in self.root.walk() if not n.is_leaf}

    def splits(self) -> list:
        return [(n.feature, n.threshold) for n in self.root.walk() if not n.is_leaf]

    def route(self, Z) -> list:
        """Leaf node for every row of ``Z``; ``<=`` threshold goes left."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        out = [None] * Z.shape[0]

        def go(node, idx):
            if node.is_leaf:
                for i in idx:
                    out[i] = node
                return
            mask = Z[idx, node.feature] <= node.threshold
            go(node.left, idx[mask])
            go(node.right, idx[~mask])

        go(self.root, np.arange(Z.shape[0]))
        return out

    def leaf_index(self, Z) -> np.ndarray:
        """Position of each row's leaf in :meth:`leaves` order."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        out = np.empty(Z.shape[0], dtype=np.int64)
        counter = iter(range(10**9))

        def go(node, idx):
            if node.is_leaf:
                out[idx] = next(counter)
                return
            mask = Z[idx, node.feature] <= node.threshold
            go(node.left, idx[mask])
            go(node.right, idx[~mask])

        go(self.root, np.arange(Z.shape[0]))
        return out

    def predict_tau(self, Z) -> np.ndarray:
        taus = np.array([leaf.estimate.tau if leaf.estimate else math.nan for leaf in self.leaves()])
        return taus[self.leaf_index(Z)]

    def to_dict(self) -> dict:
        return {
            "design": self.design,
            "cutoff": self.cutoff,
            "q": self.q,
            "feature_names": list(self.feature_names),
            "root": _node_to_dict(self.root),
        }

    def to_json(self, indent: Optional[int] = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, doc: dict) -> "Tree":
        return cls(
            root=_node_from_dict(doc["root"]),
            feature_names=tuple(doc["feature_names"]),
            cutoff=float(doc.get("cutoff", 0.0)),
            design=doc.get("design", "sharp"),
            q=int(doc.get("q", 1)),
        )

    @classmethod
    def from_json(cls, text: str) -> "Tree":
        return cls.from_dict(json.loads(text))

    def render(self) -> str:
        return render_tree(self)


def _node_to_dict(node: Node) -> dict:
    if node.is_leaf:
        est = node.estimate
        return {
            "id": node.leaf_id,
            "tau": None if est is None else est.tau,
            "se": None if est is None else est.se,
            "n_plus": None if est is None else est.n_plus,
            "n_minus": None if est is None else est.n_minus,
        }
    return {
        "feature": node.feature,
        "threshold": node.threshold,
        "left": _node_to_dict(node.left),
        "right": _node_to_dict(node.right),
    }


def _node_from_dict(d: dict) -> Node:
    if "feature" in d:
        return Node(
            feature=int(d["feature"]),
            threshold=float(d["threshold"]),
            left=_node_from_dict(d["left"]),
            right=_node_from_dict(d["right"]),
        )
    est = None
    if d.get("tau") is not None:
        n_plus, n_minus = int(d["n_plus"]), int(d["n_minus"])
        n = n_plus + n_minus
        est = LeafEstimate(
            tau=float(d["tau"]),
            var_tau=float(d["se"]) ** 2,
            n_plus=n_plus,
            n_minus=n_minus,
            p_plus=n_plus / n,
            p_minus=n_minus / n,
        )
    return Node(leaf_id=d.get("id"), estimate=est)


def render_tree(tree: Tree) -> str:
    """Indented decision listing; every line shows the node's honest estimate and (se) when available."""
    names = tree.feature_names
    lines = []

    def label(node):
        if node.estimate is None:
            return ": n/a" if node.is_leaf else ""
        return f": {node.estimate.tau:.4f} ({node.estimate.se:.4f})"

    def go(node, depth, head):
        tag = f"  [leaf {node.leaf_id}]" if node.is_leaf and node.leaf_id is not None else ""
        lines.append("    " * depth + f"{head}{label(node)}{tag}")
        if not node.is_leaf:
            name = names[node.feature] if node.feature < len(names) else f"z{node.feature + 1}"
            go(node.left, depth + 1, f"{name} <= {node.threshold:g}")
            go(node.right, depth + 1, f"{name} > {node.threshold:g}")

    go(tree.root, 0, "All")
    return "\n".join(lines)


# --------------------------------------------------------------------- growth
def _context(dataset: Dataset, config: FitConfig, n_test: int, n_est: int) -> GrowContext:
    return GrowContext(dataset, config.q, n_test, n_est, config.min_side_obs, config.bucket_size, config.sweep)


def _check_design(dataset: Dataset, config: FitConfig):
    if config.design is not None and config.design != dataset.design:
        raise ArgumentError(f"config design {config.design!r} does not match dataset design {dataset.design!r}")


def grow_tree(train, est, dataset: Dataset, config: FitConfig) -> Tree:
    """Grow the large tree on ``train`` using shares from ``est``.

    Nodes are expanded best-gain first so that ``max_leaves`` keeps the most
    valuable splits; without caps the result equals plain recursive growth.
    """
    _check_design(dataset, config)
    train = np.asarray(train)
    est = np.asarray(est)
    ctx = _context(dataset, config, train.shape[0], est.shape[0])
    if not ctx.node_valid(train, est):
        raise FitError(
            f"root node needs at least {ctx.min_side_obs} training and estimation rows on each side of the cutoff"
        )
    risk, ok, _, _ = ctx.node_risk(train, est)
    if not ok:
        raise FitError("root node cannot be fitted (singular design or degenerate first stage)")
    root = Node(risk=risk, n_train=train.shape[0], n_est=est.shape[0])
    tree = Tree(root, dataset.feature_names, dataset.cutoff, dataset.design, config.q)

    heap = []
    counter = 0

    def consider(node, idx_tr, idx_est, depth):
        nonlocal counter
        if config.max_depth is not None and depth >= config.max_depth:
            return
        split = find_best_split(ctx, idx_tr, idx_est, node.risk, config.min_gain)
        if split is not None:
            heapq.heappush(heap, (-split.gain, counter, node, split, idx_tr, idx_est, depth))
            counter += 1

    consider(root, train, est, 0)
    leaves = 1
    while heap:
        if config.max_leaves is not None and leaves >= config.max_leaves:
            break
        _, _, node, split, idx_tr, idx_est, depth = heapq.heappop(heap)
        k, thr = split.feature, split.threshold
        go_left_tr = dataset.z[idx_tr, k] <= thr
        go_left_est = dataset.z[idx_est, k] <= thr
        children = []
        for mask_tr, mask_est in ((go_left_tr, go_left_est), (~go_left_tr, ~go_left_est)):
            c_tr, c_est = idx_tr[mask_tr], idx_est[mask_est]
            c_risk, _, _, _ = ctx.node_risk(c_tr, c_est)
            children.append((Node(risk=c_risk, n_train=c_tr.shape[0], n_est=c_est.shape[0]), c_tr, c_est))
        node.feature, node.threshold = k, thr
        node.left, node.right = children[0][0], children[1][0]
        leaves += 1
        for child, c_tr, c_est in children:
            consider(child, c_tr, c_est, depth + 1)
    tree.number_leaves()
    return tree


# -------------------------------------------------------------------- pruning
@dataclass
class PrunePath:
    gammas: list
    leaf_counts: list
    subtrees: list

    def __len__(self):
        return len(self.gammas)

    def __iter__(self):
        return iter(zip(self.gammas, self.leaf_counts, self.subtrees))

    def candidates(self) -> list:
        """Representative penalty per interval: 0, geometric means of consecutive thresholds, +inf for the root."""
        g = self.gammas
        if len(g) == 1:
            return [0.0]
        out = [0.0]
        out += [math.sqrt(g[k] * g[k + 1]) for k in range(1, len(g) - 1)]
        out.append(math.inf)
        return out


def _subtree_stats(node: Node):
    """(sum of leaf risks, leaf count) for the branch under ``node``."""
    if node.is_leaf:
        return node.risk, 1
    rl, nl = _subtree_stats(node.left)
    rr, nr = _subtree_stats(node.right)
    return rl + rr, nl + nr


def weakest_link(tree: Tree) -> PrunePath:
    """Cost-complexity pruning sequence.

    Repeatedly collapses the internal node(s) with the smallest per-leaf
    criterion improvement ``(R(t) - R(T_t)) / (|T_t| - 1)``.
    """
    work = tree.copy()
    gammas = [0.0]
    counts = [work.n_leaves]
    subtrees = [_finalize(work.copy())]
    while not work.root.is_leaf:
        links = []
        for node in work.root.walk():
            if node.is_leaf:
                continue
            r_sub, n_sub = _subtree_stats(node)
            links.append(((node.risk - r_sub) / (n_sub - 1), node))
        g_min = min(g for g, _ in links)
        for g, node in links:
            if g <= g_min + 1e-12 * abs(g_min):
                node.collapse()
        g_min = max(g_min, 0.0)
        if g_min <= gammas[-1] and len(gammas) > 1:
            counts[-1] = work.n_leaves
            subtrees[-1] = _finalize(work.copy())
        elif g_min <= gammas[-1]:
            # a non-positive first link collapses into the unpenalised tree
            counts[0] = work.n_leaves
            subtrees[0] = _finalize(work.copy())
        else:
            gammas.append(g_min)
            counts.append(work.n_leaves)
            subtrees.append(_finalize(work.copy()))
    return PrunePath(gammas, counts, subtrees)


def _finalize(tree: Tree) -> Tree:
    tree.number_leaves()
    return tree


def prune(tree: Tree, gamma: float, path: Optional[PrunePath] = None) -> Tree:
    """Subtree of ``path`` whose penalty interval contains ``gamma``."""
    if gamma < 0 or math.isnan(gamma):
        raise ArgumentError(f"gamma must be non-negative, got {gamma}")
    if path is None:
        path = weakest_link(tree)
    chosen = path.subtrees[0]
    for g, _, sub in path:
        if g <= gamma:
            chosen = sub
        else:
            break
    return chosen.copy()


# ------------------------------------------------------------ honest criterion
def honest_criterion(tree: Tree, test_idx, est_idx, dataset: Dataset, config: FitConfig):
    """Criterion of a fixed partition with fits on ``test_idx`` and shares from ``est_idx``.

    Raises if any leaf cannot be fitted on the test rows.
    """
    test_idx = np.asarray(test_idx)
    est_idx = np.asarray(est_idx)
    spec = PolySpec(config.q, dataset.cutoff)
    leaves = tree.leaves()
    pos_te = tree.leaf_index(dataset.z[test_idx])
    pos_est = tree.leaf_index(dataset.z[est_idx])
    above = dataset.above
    stats = []
    for j in range(len(leaves)):
        rows = test_idx[pos_te == j]
        erows = est_idx[pos_est == j]
        up, dn = rows[above[rows]], rows[~above[rows]]
        fp = fit_side(dataset.x[up], dataset.y[up], spec, ABOVE)
        fm = fit_side(dataset.x[dn], dataset.y[dn], spec, BELOW)
        takeup = None
        if dataset.design == FUZZY:
            takeup = (
                fit_side(dataset.x[up], dataset.t[up], spec, ABOVE),
                fit_side(dataset.x[dn], dataset.t[dn], spec, BELOW),
            )
        e_up = int(above[erows].sum())
        st = leaf_stats(fp, fm, e_up, erows.shape[0] - e_up, takeup)
        if st.tau_t is not None and not st.tau_t > FIRST_STAGE_TOL:
            raise DegenerateFirstStageError(f"leaf {j + 1}: first-stage jump {st.tau_t:.3g} is not positive")
        stats.append(st)
    crit = emse_fuzzy if dataset.design == FUZZY else emse_sharp
    return crit(stats, test_idx.shape[0], est_idx.shape[0])


def in_sample_criterion(tree: Tree) -> float:
    """Honest in-sample criterion of a grown (or pruned) tree from its stored leaf risks."""
    return math.fsum(leaf.risk for leaf in tree.leaves())


# ----------------------------------------------------------- cross-validation
@dataclass
class CVResult:
    gamma_star: float
    candidates: list
    mean: np.ndarray
    se: np.ndarray
    scores: np.ndarray
    best_index: int
    chosen_index: int


def _fold_split(train, est, R: int, seed: int):
    rng = np.random.default_rng([seed, 0x5EED])
    tr = np.array_split(rng.permutation(np.asarray(train)), R)
    es = np.array_split(rng.permutation(np.asarray(est)), R)
    return tr, es


def cross_validate(train, est, dataset: Dataset, config: FitConfig, path: Optional[PrunePath] = None) -> CVResult:
    """Choose the complexity penalty by R-fold honest cross-validation.

    Fold ``r`` grows a tree on the other training and estimation folds, prunes it
    at every candidate penalty and scores each subtree with the honest
    criterion on held-out fold pair ``r``. Subtrees that cannot be fitted on
    the held-out rows score ``+inf``.
    """
    train = np.asarray(train)
    est = np.asarray(est)
    if path is None:
        path = weakest_link(grow_tree(train, est, dataset, config))
    candidates = path.candidates()
    R = config.cv_folds
    folds_tr, folds_est = _fold_split(train, est, R, config.seed)
    scores = np.full((R, len(candidates)), np.inf)
    for r in range(R):
        tr_in = np.sort(np.concatenate([f for i, f in enumerate(folds_tr) if i != r]))
        est_in = np.sort(np.concatenate([f for i, f in enumerate(folds_est) if i != r]))
        if len(candidates) == 1:
            # nothing to choose, but every fold must still support a root fit
            ctx = _context(dataset, config, tr_in.shape[0], est_in.shape[0])
            if not (ctx.node_valid(tr_in, est_in) and ctx.node_risk(tr_in, est_in)[1]):
                raise CVError(f"fold {r + 1}: root node cannot be fitted on the remaining folds")
            continue
        try:
            fold_tree = grow_tree(tr_in, est_in, dataset, config)
        except FitError as exc:
            raise CVError(f"fold {r + 1}: {exc}") from None
        fold_path = weakest_link(fold_tree)
        for c, gamma in enumerate(candidates):
            sub = prune(fold_tree, gamma, fold_path)
            try:
                scores[r, c] = honest_criterion(sub, folds_tr[r], folds_est[r], dataset, config).emse
            except RDTreeError:
                scores[r, c] = np.inf
    if len(candidates) == 1:
        scores[:] = 0.0
    with np.errstate(invalid="ignore"):
        mean = scores.mean(axis=0)
        se = scores.std(axis=0, ddof=1) / math.sqrt(R)
    # ties resolve toward the larger penalty
    best = max(range(len(candidates)), key=lambda c: (-mean[c], c))
    chosen = best
    if config.one_se_rule and np.isfinite(mean[best]):
        limit = mean[best] + se[best]
        chosen = max(c for c in range(len(candidates)) if mean[c] <= limit)
    return CVResult(candidates[chosen], candidates, mean, se, scores, best, chosen)


# ---------------------------------------------------------- honest estimation
def honest_estimate(tree: Tree, est, dataset: Dataset, config: FitConfig) -> Tree:
    """Re-estimate every leaf on the estimation sample only; returns a new tree.

    Internal nodes receive estimates too when their rows allow it (used in the
    text rendering); leaves must be estimable or :class:`EstimationError` is raised.
    """
    out = tree.copy()
    out.number_leaves()
    est = np.asarray(est)
    spec = PolySpec(config.q, dataset.cutoff)
    above = dataset.above
    fuzzy = dataset.design == FUZZY
    clustered = config.variance == CLUSTERED
    if clustered and dataset.cluster is None:
        raise EstimationError("clustered variance requested but the dataset has no cluster ids")

    def estimate(rows):
        up, dn = rows[above[rows]], rows[~above[rows]]
        if min(up.shape[0], dn.shape[0]) < config.q + 2:
            raise EstimationError(
                f"{up.shape[0]} above / {dn.shape[0]} below estimation rows; need {config.q + 2} per side"
            )
        fp = fit_side(dataset.x[up], dataset.y[up], spec, ABOVE)
        fm = fit_side(dataset.x[dn], dataset.y[dn], spec, BELOW)
        takeup = None
        if fuzzy:
            takeup = (
                fit_side(dataset.x[up], dataset.t[up], spec, ABOVE),
                fit_side(dataset.x[dn], dataset.t[dn], spec, BELOW),
            )
        n = rows.shape[0]
        clusters = (dataset.cluster[up], dataset.cluster[dn]) if clustered else None
        return leaf_estimate(
            fp, fm, (up.shape[0] / n, dn.shape[0] / n), config.variance,
            scale=n, takeup=takeup, clusters=clusters,
        )

    def go(node, rows):
        node.n_est = rows.shape[0]
        if node.is_leaf:
            try:
                node.estimate = estimate(rows)
            except RDTreeError as exc:
                raise EstimationError(f"leaf {node.leaf_id}: {exc}") from None
            return
        try:
            node.estimate = estimate(rows)
        except RDTreeError:
            node.estimate = None
        mask = dataset.z[rows, node.feature] <= node.threshold
        go(node.left, rows[mask])
        go(node.right, rows[~mask])

    go(out.root, est)
    return out


def predict(tree: Tree, z) -> PredictionResult:
    z = np.asarray(z, dtype=float).ravel()
    if z.shape[0] != len(tree.feature_names):
        raise ArgumentError(f"feature vector has {z.shape[0]} entries, expected K={len(tree.feature_names)}")
    node = tree.root
    path = []
    while not node.is_leaf:
        if z[node.feature] <= node.threshold:
            path.append((node.feature, node.threshold, "<="))
            node = node.left
        else:
            path.append((node.feature, node.threshold, ">"))
            node = node.right
    if node.estimate is None:
        raise EstimationError(f"leaf {node.leaf_id} has no honest estimate")
    tau, se = node.estimate.tau, node.estimate.se
    return PredictionResult(tau, se, (tau - Z95 * se, tau + Z95 * se), node.leaf_id, path)


# -------------------------------------------------------------- full pipeline
@dataclass
class FitResult:
    tree: Tree
    large_tree: Tree
    path: PrunePath
    cv: CVResult
    split: object
    criterion: float

    @property
    def gamma_star(self) -> float:
        return self.cv.gamma_star


def fit(dataset: Dataset, config: FitConfig = FitConfig(), split=None) -> FitResult:
    """Split, grow, cross-validate, prune and honestly estimate."""
    _check_design(dataset, config)
    if split is None:
        split = honest_split(dataset, config.honest_fraction, config.seed)
    large = grow_tree(split.train, split.est, dataset, config)
    path = weakest_link(large)
    cv = cross_validate(split.train, split.est, dataset, config, path)
    pruned = prune(large, cv.gamma_star, path)
    final = honest_estimate(pruned, split.est, dataset, config)
    return FitResult(final, large, path, cv, split, in_sample_criterion(pruned))


def select_order(dataset: Dataset, config: FitConfig, orders, split=None):
    """Choose the polynomial order jointly with the penalty by cross-validation.

    Returns ``(q, scores)`` where ``scores[q]`` is the fold-averaged criterion at
    that order's selected penalty; ties go to the smaller order.
    """
    orders = sorted(set(int(q) for q in orders))
    if not orders or orders[0] < 0:
        raise ArgumentError("orders must be non-negative integers")
    if split is None:
        split = honest_split(dataset, config.honest_fraction, config.seed)
    scores = {}
    for q in orders:
        cfg = replace(config, q=q, min_side_obs=max(config.min_side_obs, q + 2))
        try:
            cv = cross_validate(split.train, split.est, dataset, cfg)
            scores[q] = float(cv.mean[cv.chosen_index])
        except RDTreeError:
            scores[q] = math.inf
    best = min(orders, key=lambda q: (scores[q], q))
    if not math.isfinite(scores[best]):
        raise FitError("no polynomial order in the grid could be cross-validated")
    return best, scores
