"""Simulation designs and Monte Carlo evaluation of RD trees."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .data import FUZZY, SHARP, Dataset
from .errors import ArgumentError, RDTreeError
from .tree import Z95, FitConfig, Tree, fit

EVAL_SIZE = 10_000
THRESHOLD_TOL = 0.5


def _poly(coefs, x):
    return np.polynomial.polynomial.polyval(x, coefs)


# eta below / above the cutoff for the quintic designs
_D3_BELOW_1 = (0.48, 1.27, 7.18, 20.21, 21.54, 7.33)
_D3_BELOW_0 = (0.48, 2.35, 8.18, 22.21, 24.14, 8.33)
_D3_ABOVE_1 = (0.48, 0.84, -3.00, 7.99, -9.01, 3.56)
_D3_ABOVE_0 = (0.48, 1.21, -2.90, 6.99, -10.01, 4.56)
_D4_BELOW = (3.71, 2.30, 3.28, 1.45, 0.23, 0.03)
_D4_ABOVE = (3.71, 18.49, -54.81, 74.30, -45.02, 9.83)
_D5_ABOVE = (0.48, 0.84, -0.1 * 3.00, -0.3 * 7.99, -0.1 * 9.01, 3.56)
_D5_BELOW = (0.48, 1.27, -0.5 * 7.18, 0.7 * 20.21, 1.1 * 21.54, 1.5 * 7.33)


@dataclass(frozen=True)
class DgpSpec:
    """One simulation design.

    ``relevant`` maps feature index to its true split threshold; ``None`` when
    the effect varies continuously and no finite tree is correct.
    """

    number: int
    fuzzy: bool
    k: int
    q: int
    sigma2: float
    relevant: Optional[dict]

    @property
    def name(self) -> str:
        return f"f-{self.number}" if self.fuzzy else str(self.number)

    @property
    def design(self) -> str:
        return FUZZY if self.fuzzy else SHARP

    def draw_x(self, rng, n):
        if self.number <= 2:
            return rng.uniform(-1.0, 1.0, n)
        return 2.0 * rng.beta(2.0, 4.0, n) - 1.0

    def draw_z(self, rng, n):
        if self.number == 2:
            return np.column_stack([rng.integers(0, 2, (n, 2)), rng.uniform(-5.0, 5.0, (n, 2))]).astype(float)
        if self.number == 4:
            return np.column_stack([rng.uniform(5.0, 9.0, n), rng.integers(0, 2, (n, 6))]).astype(float)
        return rng.integers(0, 2, (n, self.k)).astype(float)

    def kappa(self, z):
        z = np.atleast_2d(z)
        if self.number == 1:
            return 2.0 * z[:, 0] - 1.0
        if self.number == 2:
            return 2.0 * z[:, 2]
        if self.number == 3:
            return 0.02 * z[:, 0] + 0.07 * (1.0 - z[:, 0])
        if self.number == 4:
            return -5.45 - (z[:, 0] - 5.0)
        return np.full(z.shape[0], 0.04)

    def eta(self, x, z):
        z = np.atleast_2d(z)
        above = x >= 0
        if self.number == 1:
            return 2.0 * x
        if self.number == 2:
            return np.where(z[:, 1] == 1, 2.0 * x, -2.0 * x)
        if self.number == 3:
            z1 = z[:, 0] == 1
            below = np.where(z1, _poly(_D3_BELOW_1, x), _poly(_D3_BELOW_0, x))
            abv = np.where(z1, _poly(_D3_ABOVE_1, x), _poly(_D3_ABOVE_0, x))
            return np.where(above, abv, below)
        if self.number == 4:
            return np.where(above, _poly(_D4_ABOVE, x), _poly(_D4_BELOW, x))
        return np.where(above, _poly(_D5_ABOVE, x), _poly(_D5_BELOW, x))


DGPS = {
    spec.name: spec
    for fuzzy in (False, True)
    for spec in (
        DgpSpec(1, fuzzy, 2, 1, 1.0, {0: 0.5}),
        DgpSpec(2, fuzzy, 4, 1, 1.0, None),
        DgpSpec(3, fuzzy, 52, 5, 0.05, {0: 0.5}),
        DgpSpec(4, fuzzy, 7, 5, 0.05, None),
        DgpSpec(5, fuzzy, 52, 5, 0.05, {}),
    )
}


def get_dgp(name) -> DgpSpec:
    key = str(name)
    if key not in DGPS:
        raise ArgumentError(f"unknown DGP {name!r}; choose from {', '.join(DGPS)}")
    return DGPS[key]


@dataclass(frozen=True)
class Oracle:
    """True effect function of one design; call it on a feature matrix."""

    spec: DgpSpec

    def __call__(self, z) -> np.ndarray:
        return self.spec.kappa(np.asarray(z, dtype=float))


def _design_rng(spec, n, seed):
    return np.random.default_rng([seed, spec.number, n, 1])


def _noise_rng(spec, n, seed, rep):
    return np.random.default_rng([seed, spec.number, n, 2, int(spec.fuzzy), rep])


def eval_sample(spec, seed: int = 0, size: int = EVAL_SIZE) -> np.ndarray:
    """Noise-free evaluation features drawn from the design's feature law."""
    spec = spec if isinstance(spec, DgpSpec) else get_dgp(spec)
    rng = np.random.default_rng([seed, spec.number, size, 3])
    return spec.draw_z(rng, size)


def generate(spec, n: int, rep: int = 1, seed: int = 0):
    """Simulated sample and its oracle.

    The running variable and features depend only on ``(design, n, seed)``;
    outcome noise and take-up shocks change with ``rep`` (numbered from 1).
    """
    spec = spec if isinstance(spec, DgpSpec) else get_dgp(spec)
    if rep < 1:
        raise ArgumentError(f"rep must be at least 1, got {rep}")
    if n < 4:
        raise ArgumentError("n must be at least 4")
    drng = _design_rng(spec, n, seed)
    x = spec.draw_x(drng, n)
    z = spec.draw_z(drng, n)
    nrng = _noise_rng(spec, n, seed, rep)
    eps = nrng.normal(0.0, math.sqrt(spec.sigma2), n)
    kappa = spec.kappa(z)
    eta = spec.eta(x, z)
    t = None
    if spec.fuzzy:
        nu = nrng.normal(0.0, 1.0, n)
        t = ((x >= 0) & (0.5 + 0.8 * x + nu > 0)).astype(float)
        y = eta + t * kappa + eps
    else:
        y = eta + (x >= 0) * kappa + eps
    return Dataset(y=y, x=x, z=z, cutoff=0.0, design=spec.design, t=t), Oracle(spec)


def infeasible_mse(tree: Tree, eval_z, oracle) -> float:
    """Mean squared gap between the true and estimated effects over ``eval_z``."""
    eval_z = np.atleast_2d(np.asarray(eval_z, dtype=float))
    if eval_z.shape[0] == 0:
        raise ArgumentError("empty evaluation sample")
    gap = oracle(eval_z) - tree.predict_tau(eval_z)
    return math.fsum(gap * gap) / gap.shape[0]


def dgp_found(tree: Tree, spec) -> bool:
    """Whether the tree recovers the true partition.

    The features used by internal nodes must equal the relevant set and every
    threshold must lie within ``0.5`` of the truth. For a homogeneous design
    only the root-only tree qualifies.
    """
    spec = spec if isinstance(spec, DgpSpec) else get_dgp(spec)
    if spec.relevant is None:
        raise ArgumentError(f"DGP {spec.name} has a continuous effect; there is no true tree")
    splits = tree.splits()
    if set(f for f, _ in splits) != set(spec.relevant):
        return False
    return all(abs(thr - spec.relevant[f]) <= THRESHOLD_TOL for f, thr in splits)


def _leaf_truth(tree: Tree, eval_z, oracle):
    """True effect per leaf: average oracle value over the evaluation rows it holds."""
    pos = tree.leaf_index(eval_z)
    kappa = oracle(eval_z)
    out = []
    for j in range(tree.n_leaves):
        mask = pos == j
        out.append(float(kappa[mask].mean()) if mask.any() else math.nan)
    return out


def _leaf_keys(tree: Tree, spec: DgpSpec) -> list:
    """Stable labels for the leaves of a correctly recovered tree, e.g. ``z1>0.5``."""
    labels = []

    def go(node, path):
        if node.is_leaf:
            labels.append(" & ".join(path) or "root")
            return
        name = tree.feature_names[node.feature]
        thr = spec.relevant[node.feature]
        go(node.left, path + [f"{name}<={thr:g}"])
        go(node.right, path + [f"{name}>{thr:g}"])

    go(tree.root, [])
    return labels


@dataclass
class RepResult:
    rep: int
    n_leaves: int
    found: Optional[bool]
    inf_mse: float
    # (label, true tau, estimated tau, se) per leaf, filled only for recovered trees
    leaves: list = field(default_factory=list)


def rep_seed(spec: DgpSpec, n: int, rep: int, seed: int) -> int:
    """Seed for one replication's honest split and cross-validation folds."""
    return int(np.random.SeedSequence([seed, spec.number, n, int(spec.fuzzy), rep]).generate_state(1)[0])


def run_rep(spec: DgpSpec, n: int, rep: int, config: FitConfig, seed: int, eval_z) -> RepResult:
    data, oracle = generate(spec, n, rep, seed)
    try:
        tree = fit(data, replace(config, seed=rep_seed(spec, n, rep, seed))).tree
    except RDTreeError as exc:
        raise type(exc)(f"rep {rep}: {exc}") from None
    found = None if spec.relevant is None else dgp_found(tree, spec)
    leaves = []
    if found:
        truth = _leaf_truth(tree, eval_z, oracle)
        keys = _leaf_keys(tree, spec)
        for j, leaf in enumerate(tree.leaves()):
            leaves.append((keys[j], truth[j], leaf.estimate.tau, leaf.estimate.se))
    return RepResult(rep, tree.n_leaves, found, infeasible_mse(tree, eval_z, oracle), leaves)


def _run_rep_args(args):
    return run_rep(*args)


@dataclass
class McReport:
    dgp: str
    n: int
    reps: int
    q: int
    seed: int
    avg_inf_mse: float
    avg_leaves: float
    dgp_found_pct: Optional[float]
    # per-leaf summaries over recovered trees, keyed by leaf label
    leaf_avg_bias: dict
    leaf_coverage95: dict
    leaf_found_reps: dict
    runtime_sec: float

    CSV_COLUMNS = (
        "dgp", "n", "reps", "q", "seed", "avg_inf_mse", "avg_leaves", "dgp_found_pct",
        "leaf", "avg_bias", "coverage95", "found_reps",
    )

    def to_dict(self, include_runtime: bool = True) -> dict:
        d = asdict(self)
        if not include_runtime:
            d.pop("runtime_sec")
        return d

    def to_json(self, indent: int = 2, include_runtime: bool = True) -> str:
        return json.dumps(self.to_dict(include_runtime), indent=indent)

    def csv_rows(self) -> list:
        """One row per leaf label (a single blank-leaf row when nothing was recovered)."""
        base = {
            "dgp": self.dgp,
            "n": self.n,
            "reps": self.reps,
            "q": self.q,
            "seed": self.seed,
            "avg_inf_mse": f"{self.avg_inf_mse:.6g}",
            "avg_leaves": f"{self.avg_leaves:.6g}",
            "dgp_found_pct": "" if self.dgp_found_pct is None else f"{self.dgp_found_pct:.6g}",
        }
        keys = list(self.leaf_coverage95) or [None]
        rows = []
        for key in keys:
            row = dict(base, leaf="", avg_bias="", coverage95="", found_reps="")
            if key is not None:
                row.update(
                    leaf=key,
                    avg_bias=f"{self.leaf_avg_bias[key]:.6g}",
                    coverage95=f"{self.leaf_coverage95[key]:.6g}",
                    found_reps=self.leaf_found_reps[key],
                )
            rows.append(row)
        return rows

    @classmethod
    def to_csv(cls, reports) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cls.CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerows(r.csv_rows())
        return buf.getvalue()


def mc_config(spec, q: Optional[int] = None, **overrides) -> FitConfig:
    """Default configuration for a simulation design: its q, 50-row side floor, minimum-CV penalty."""
    spec = spec if isinstance(spec, DgpSpec) else get_dgp(spec)
    q = spec.q if q is None else q
    base = dict(q=q, min_side_obs=max(50, q + 2), one_se_rule=False, design=spec.design)
    base.update(overrides)
    return FitConfig(**base)


def run_mc(dgp, n: int, reps: int, config: Optional[FitConfig] = None, seed: int = 0, threads: int = 1,
           n_eval: int = EVAL_SIZE, progress=None) -> McReport:
    """Fit ``reps`` simulated samples and summarise recovery, accuracy and leaf inference.

    Replications are independent; with ``threads > 1`` they run in worker
    processes and results are reduced in replication order, so the report
    does not depend on ``threads``.
    """
    spec = dgp if isinstance(dgp, DgpSpec) else get_dgp(dgp)
    if reps < 1:
        raise ArgumentError("reps must be at least 1")
    if threads < 1:
        raise ArgumentError("threads must be at least 1")
    config = mc_config(spec) if config is None else config
    eval_z = eval_sample(spec, seed, n_eval)
    t0 = time.perf_counter()
    jobs = [(spec, n, r, config, seed, eval_z) for r in range(1, reps + 1)]
    if threads == 1:
        results = []
        for job in jobs:
            results.append(run_rep(*job))
            if progress is not None:
                progress(len(results), reps)
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_rep_args, jobs))
    return summarize(spec, n, config, seed, results, time.perf_counter() - t0)


def summarize(spec: DgpSpec, n: int, config: FitConfig, seed: int, results, runtime: float) -> McReport:
    """Aggregate replication results; compensated sums make the result order-insensitive."""
    results = sorted(results, key=lambda r: r.rep)
    R = len(results)
    found_pct = None
    if spec.relevant is not None:
        found_pct = 100.0 * sum(bool(r.found) for r in results) / R
    cover, bias = {}, {}
    for r in results:
        for key, truth, tau, se in r.leaves:
            cover.setdefault(key, []).append(1.0 if abs(tau - truth) <= Z95 * se else 0.0)
            bias.setdefault(key, []).append(truth - tau)
    keys = sorted(cover)
    return McReport(
        dgp=spec.name,
        n=n,
        reps=R,
        q=config.q,
        seed=seed,
        avg_inf_mse=math.fsum(r.inf_mse for r in results) / R,
        avg_leaves=math.fsum(r.n_leaves for r in results) / R,
        dgp_found_pct=found_pct,
        leaf_avg_bias={k: math.fsum(bias[k]) / len(bias[k]) for k in keys},
        leaf_coverage95={k: math.fsum(cover[k]) / len(cover[k]) for k in keys},
        leaf_found_reps={k: len(cover[k]) for k in keys},
        runtime_sec=runtime,
    )
