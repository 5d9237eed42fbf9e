import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdtree import (
    Dataset,
    FitConfig,
    Tree,
    cross_validate,
    fit,
    grow_tree,
    honest_criterion,
    honest_estimate,
    honest_split,
    predict,
    prune,
    weakest_link,
)
from rdtree.errors import ArgumentError, CVError, EstimationError, FitError
from rdtree.tree import Node, in_sample_criterion, select_order


def dgp1_like(n=1000, seed=0, k=2):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, n)
    z = rng.integers(0, 2, (n, k)).astype(float)
    y = 2 * x + (x >= 0) * (2 * z[:, 0] - 1) + rng.normal(size=n)
    return Dataset(y=y, x=x, z=z, cutoff=0.0)


def toy_tree():
    # root (R=1.0) -> A (R=0.4) -> leaves 0.1, 0.2 ; root -> leaf 0.3
    a = Node(feature=1, threshold=0.0, left=Node(risk=0.1), right=Node(risk=0.2), risk=0.4)
    root = Node(feature=0, threshold=0.5, left=a, right=Node(risk=0.3), risk=1.0)
    t = Tree(root, ("z1", "z2"))
    t.number_leaves()
    return t


def test_weakest_link_manual_oracle():
    # g(A) = (0.4 - 0.3) / 1 = 0.1, g(root) = (1.0 - 0.6) / 2 = 0.2 -> collapse A first;
    # then g(root) = (1.0 - 0.7) / 1 = 0.3
    path = weakest_link(toy_tree())
    assert path.gammas == pytest.approx([0.0, 0.1, 0.3], abs=1e-15)
    assert path.leaf_counts == [3, 2, 1]
    assert path.candidates() == pytest.approx([0.0, math.sqrt(0.03), math.inf])


def test_prune_intervals():
    t = toy_tree()
    path = weakest_link(t)
    assert prune(t, 0.0, path).n_leaves == 3
    assert prune(t, 0.05, path).n_leaves == 3
    mid = prune(t, 0.2, path)
    assert mid.n_leaves == 2 and mid.splits() == [(0, 0.5)]
    assert prune(t, 0.31, path).n_leaves == 1
    assert prune(t, 1e9, path).root.is_leaf
    with pytest.raises(ArgumentError):
        prune(t, -0.1, path)


def test_single_leaf_path():
    t = Tree(Node(risk=0.0), ("z1",))
    path = weakest_link(t)
    assert path.gammas == [0.0] and path.leaf_counts == [1]


def _node_ids(tree):
    return {(n.feature, n.threshold, d) for d, n in _depths(tree.root)}


def _depths(node, d=0, prefix=""):
    yield prefix, node
    if not node.is_leaf:
        yield from _depths(node.left, d + 1, prefix + "L")
        yield from _depths(node.right, d + 1, prefix + "R")


def test_grown_path_invariants():
    d = dgp1_like(n=3000, seed=2, k=4)
    s = honest_split(d, 0.5, 1)
    big = grow_tree(s.train, s.est, d, FitConfig(q=1, min_side_obs=30))
    path = weakest_link(big)
    assert all(a < b for a, b in zip(path.gammas, path.gammas[1:]))
    assert all(a > b for a, b in zip(path.leaf_counts, path.leaf_counts[1:]))
    assert path.leaf_counts[-1] == 1
    for prev, nxt in zip(path.subtrees, path.subtrees[1:]):
        paths_prev = {p for p, _ in _depths(prev.root)}
        paths_next = {p for p, _ in _depths(nxt.root)}
        assert paths_next <= paths_prev


def test_min_gain_infinite_gives_root():
    d = dgp1_like()
    s = honest_split(d, 0.5, 0)
    assert grow_tree(s.train, s.est, d, FitConfig(min_gain=math.inf)).n_leaves == 1


def test_dgp1_grows_on_first_feature():
    d = dgp1_like(n=1000, seed=4)
    s = honest_split(d, 0.5, 4)
    t = grow_tree(s.train, s.est, d, FitConfig(q=1))
    assert t.splits()[0] == (0, 0.5)


def test_constant_features_give_root():
    n = 200
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, n)
    d = Dataset(y=rng.normal(size=n), x=x, z=np.ones((n, 3)), cutoff=0.0)
    s = honest_split(d, 0.5, 0)
    assert grow_tree(s.train, s.est, d, FitConfig(min_side_obs=20)).n_leaves == 1


def test_root_invalid():
    d = dgp1_like(n=150)
    s = honest_split(d, 0.5, 0)
    with pytest.raises(FitError):
        grow_tree(s.train, s.est, d, FitConfig())


def test_caps():
    d = dgp1_like(n=4000, seed=1, k=3)
    s = honest_split(d, 0.5, 0)
    assert grow_tree(s.train, s.est, d, FitConfig(min_side_obs=20, max_depth=1)).n_leaves <= 2
    assert grow_tree(s.train, s.est, d, FitConfig(min_side_obs=20, max_leaves=3)).n_leaves <= 3


def test_growth_improves_criterion():
    d = dgp1_like(n=3000, seed=5, k=3)
    s = honest_split(d, 0.5, 5)
    big = grow_tree(s.train, s.est, d, FitConfig(min_side_obs=30))
    for node in big.root.walk():
        if not node.is_leaf:
            assert node.left.risk + node.right.risk < node.risk


def test_config_validation():
    with pytest.raises(ArgumentError):
        FitConfig(q=3, min_side_obs=4)
    with pytest.raises(ArgumentError):
        FitConfig(cv_folds=1)
    with pytest.raises(ArgumentError):
        FitConfig(min_gain=-1.0)


def test_cv_determinism_and_one_se():
    d = dgp1_like(n=1500, seed=6, k=3)
    s = honest_split(d, 0.5, 6)
    on = cross_validate(s.train, s.est, d, FitConfig(min_side_obs=30, seed=3))
    again = cross_validate(s.train, s.est, d, FitConfig(min_side_obs=30, seed=3))
    off = cross_validate(s.train, s.est, d, FitConfig(min_side_obs=30, seed=3, one_se_rule=False))
    assert on.gamma_star == again.gamma_star
    np.testing.assert_array_equal(on.scores, again.scores)
    assert on.gamma_star >= off.gamma_star


def test_cv_fold_error():
    d = dgp1_like(n=240, seed=0)
    s = honest_split(d, 0.5, 0)
    with pytest.raises(CVError, match="fold 1"):
        cross_validate(s.train, s.est, d, FitConfig(min_side_obs=50, cv_folds=2))


def test_pure_noise_prunes_to_root():
    roots = 0
    for seed in range(100):
        rng = np.random.default_rng([seed, 77])
        n = 2000
        z = np.column_stack([rng.integers(0, 2, n), rng.normal(size=n)]).astype(float)
        d = Dataset(y=rng.normal(size=n), x=rng.uniform(-1, 1, n), z=z, cutoff=0.0)
        roots += fit(d, FitConfig(q=1, seed=seed)).tree.n_leaves == 1
    assert roots >= 90


def test_honesty_firewall():
    d = dgp1_like(n=1000, seed=7)
    s = honest_split(d, 0.5, 7)
    cfg = FitConfig(q=1)
    tree = grow_tree(s.train, s.est, d, cfg)
    y = d.y.copy()
    y[s.train] = np.random.default_rng(0).permutation(y[s.train])
    shuffled = Dataset(y=y, x=d.x, z=d.z, cutoff=0.0)
    a = honest_estimate(tree, s.est, d, cfg).to_json()
    b = honest_estimate(tree, s.est, shuffled, cfg).to_json()
    assert a == b


def test_honest_estimate_missing_side():
    d = dgp1_like(n=1000, seed=8)
    s = honest_split(d, 0.5, 8)
    tree = grow_tree(s.train, s.est, d, FitConfig())
    est_below_only = s.est[d.x[s.est] < 0]
    with pytest.raises(EstimationError, match="leaf 1"):
        honest_estimate(tree, est_below_only, d, FitConfig())


def test_partition_soundness_and_predict():
    d = dgp1_like(n=4000, seed=9, k=3)
    res = fit(d, FitConfig(q=1, seed=9))
    tree = res.tree
    assert tree.n_leaves == 2
    assert sum(leaf.n_est for leaf in tree.leaves()) == res.split.est.size
    grid = np.random.default_rng(1).uniform(-5, 5, (10_000, 3))
    idx = tree.leaf_index(grid)
    assert np.bincount(idx, minlength=tree.n_leaves).sum() == 10_000
    p = predict(tree, [1.0, 0.0, 0.0])
    assert p.tau == pytest.approx(1.0, abs=0.3)
    assert p.ci95[0] <= p.tau <= p.ci95[1]
    assert p.ci95[1] - p.tau == pytest.approx(1.959963984540054 * p.se)
    assert predict(tree, [1e6, -1e6, 3.0]).leaf_id == 2
    with pytest.raises(ArgumentError, match="K=3"):
        predict(tree, [1.0, 0.0])


def test_json_roundtrip():
    d = dgp1_like(n=2000, seed=10, k=3)
    tree = fit(d, FitConfig(q=1, seed=1)).tree
    text = tree.to_json()
    back = Tree.from_json(text)
    assert back.to_json() == text
    np.testing.assert_array_equal(back.predict_tau(d.z), tree.predict_tau(d.z))
    assert "All" in back.render() and "[leaf 1]" in back.render()


def test_honest_criterion_matches_in_sample_on_growth_sample():
    d = dgp1_like(n=2000, seed=11)
    s = honest_split(d, 0.5, 11)
    tree = grow_tree(s.train, s.est, d, FitConfig())
    crit = honest_criterion(tree, s.train, s.est, d, FitConfig())
    assert crit.emse == pytest.approx(in_sample_criterion(tree), rel=1e-8)


def test_select_order_returns_grid_member():
    d = dgp1_like(n=2000, seed=12)
    q, scores = select_order(d, FitConfig(q=1, min_side_obs=50, cv_folds=5), [2, 0, 1])
    assert sorted(scores) == [0, 1, 2]
    assert scores[q] == min(scores.values())
    with pytest.raises(ArgumentError):
        select_order(d, FitConfig(), [])


@given(seed=st.integers(0, 10_000))
@settings(max_examples=5, deadline=None)
def test_fit_deterministic(seed):
    d = dgp1_like(n=800, seed=seed)
    a = fit(d, FitConfig(q=1, seed=seed)).tree.to_json()
    b = fit(d, FitConfig(q=1, seed=seed)).tree.to_json()
    assert a == b
