"""Regression forests whose leaves hold discretized q-value distributions.

One forest per flipper configuration.  Missing features are handled natively:
during training a sample whose split feature is unobserved descends into both
subtrees (half weight to each side for leaf statistics), and at prediction
time a masked feature likewise sends the query down both children.  The
marginalized QPDF is the prior-weighted mixture of all reached leaves,
renormalized per tree and averaged over the trees.

Split objective at a node (set membership, not weights): with
R1 = {k : x_k[j] <= s or x_k[j] missing} and R2 = {k : x_k[j] > s or missing},

    cost(s, j) = |R1| * var(q[R1]) + |R2| * var(q[R2])

which equals the summed squared deviation on each side.  Costs are evaluated
as raw moments, sum(q^2) - sum(q)^2 / count, so an exhaustive re-evaluation
of a candidate reproduces the implementation's value bit for bit on exactly
representable targets; ties break toward the lowest feature index, then the
lowest threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dem import StateVector

DEFAULT_N_TREES = 32
DEFAULT_MIN_SAMPLES = 5
DEFAULT_MAX_DEPTH = 12
DEFAULT_Q_BINS = 40
RANGE_PAD = 0.05


@dataclass(frozen=True)
class QHistogram:
    """Discretized probability density over q values."""

    edges: np.ndarray   # B+1 ascending bin edges
    mass: np.ndarray    # B nonnegative weights summing to 1

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float)
        mass = np.asarray(self.mass, dtype=float)
        if edges.ndim != 1 or mass.shape != (edges.size - 1,):
            raise ValueError("need B+1 edges and B masses")
        if not (np.diff(edges) > 0).all():
            raise ValueError("edges must be strictly ascending")
        if (mass < 0).any():
            raise ValueError("mass must be nonnegative")
        total = mass.sum()
        if not np.isclose(total, 1.0, atol=1e-9):
            raise ValueError("mass must sum to 1 (got %r)" % total)
        e = edges.copy(); e.flags.writeable = False
        m = mass.copy(); m.flags.writeable = False
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "mass", m)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def mean(self) -> float:
        return float(self.centers @ self.mass)

    @classmethod
    def from_weights(cls, edges, weights) -> "QHistogram":
        weights = np.asarray(weights, dtype=float)
        total = weights.sum()
        if total <= 0:
            raise ValueError("histogram needs positive total weight")
        return cls(edges, weights / total)

    @classmethod
    def from_samples(cls, q, edges, weights=None) -> "QHistogram":
        q = np.asarray(q, dtype=float)
        edges = np.asarray(edges, dtype=float)
        # clip into the outer bins so resampled targets can never fall out
        idx = np.clip(np.searchsorted(edges, q, side="right") - 1, 0, edges.size - 2)
        w = np.ones(q.size) if weights is None else np.asarray(weights, dtype=float)
        hist = np.zeros(edges.size - 1)
        np.add.at(hist, idx, w)
        return cls.from_weights(edges, hist)


def make_edges(q, bins: int = DEFAULT_Q_BINS, pad: float = RANGE_PAD) -> np.ndarray:
    """Uniform bin layout spanning the q range, padded a little on each side."""
    q = np.asarray(q, dtype=float)
    lo, hi = float(q.min()), float(q.max())
    span = hi - lo
    if span <= 0:
        lo, hi = lo - 1.0, hi + 1.0
    else:
        lo, hi = lo - pad * span, hi + pad * span
    return np.linspace(lo, hi, bins + 1)


@dataclass(frozen=True)
class Leaf:
    histogram: QHistogram
    prior: float


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    left: object
    right: object


def _side_cost(total, total_sq, count):
    # |R| * var(q_R) as raw moments; guard tiny negative cancellation
    return np.maximum(0.0, total_sq - (total * total) / count)


def best_split(values: np.ndarray, missing: np.ndarray, q: np.ndarray):
    """Greedy (threshold, feature) search minimizing summed subtree variance.

    Returns (feature, threshold) or None when no feature offers two distinct
    observed values.  Candidate thresholds are midpoints between consecutive
    distinct observed values of a feature; samples missing that feature count
    in both sides.  Ties break toward the lowest feature index, then the
    lowest threshold; per-side costs are raw-moment sums of squared
    deviations, so a direct re-evaluation of any candidate reproduces the
    value exactly.
    """
    values = np.asarray(values, dtype=float)
    missing = np.asarray(missing, dtype=bool)
    q = np.asarray(q, dtype=float)
    m, n = values.shape
    if m < 2:
        return None

    best = None
    best_cost = np.inf
    for j in range(n):
        obs = ~missing[:, j]
        v = values[obs, j]
        if v.size < 2:
            continue
        order = np.argsort(v, kind="stable")
        v_sorted = v[order]
        q_sorted = q[obs][order]
        distinct = np.nonzero(np.diff(v_sorted) > 0)[0]
        if distinct.size == 0:
            continue
        q_missing = q[~obs]
        miss_n = q_missing.size
        miss_sum = float(q_missing.sum())
        miss_sq = float((q_missing * q_missing).sum())
        cum = np.cumsum(q_sorted)
        cum_sq = np.cumsum(q_sorted * q_sorted)
        total, total_sq = float(cum[-1]), float(cum_sq[-1])
        left_n = (distinct + 1) + miss_n
        right_n = (v.size - distinct - 1) + miss_n
        costs = (_side_cost(cum[distinct] + miss_sum,
                            cum_sq[distinct] + miss_sq, left_n)
                 + _side_cost((total - cum[distinct]) + miss_sum,
                              (total_sq - cum_sq[distinct]) + miss_sq, right_n))
        k = int(np.argmin(costs))     # first minimum: lowest threshold wins
        if costs[k] < best_cost:
            best_cost = float(costs[k])
            pos = distinct[k]
            best = (j, 0.5 * (v_sorted[pos] + v_sorted[pos + 1]))
    return best


def train_tree(values, missing, q, edges,
               min_samples: int = DEFAULT_MIN_SAMPLES,
               max_depth: int = DEFAULT_MAX_DEPTH,
               seed=None):
    """Grow one tree by greedy recursive splitting.

    A node becomes a leaf when it holds at most ``min_samples`` samples, the
    depth limit is reached, or no valid split exists.  Leaf priors are the
    descent-weight share of the training set reaching the leaf (a sample
    descending both ways contributes half weight to each side); the leaf
    histogram is the descent-weighted empirical q histogram.  Construction is
    deterministic; ``seed`` is accepted for interface symmetry only.
    """
    values = np.asarray(values, dtype=float)
    missing = np.asarray(missing, dtype=bool)
    q = np.asarray(q, dtype=float)
    if values.ndim != 2 or values.shape[0] == 0:
        raise ValueError("training set must be non-empty")
    total_weight = float(values.shape[0])

    def build(idx, weights, depth):
        node_q = q[idx]
        if idx.size <= min_samples or depth >= max_depth:
            return _make_leaf(node_q, weights, edges, total_weight)
        found = best_split(values[idx], missing[idx], node_q)
        if found is None:
            return _make_leaf(node_q, weights, edges, total_weight)
        j, thr = found
        obs = ~missing[idx, j]
        goes_left = obs & (values[idx, j] <= thr)
        goes_right = obs & (values[idx, j] > thr)
        both = ~obs
        left_idx = np.concatenate([idx[goes_left], idx[both]])
        left_w = np.concatenate([weights[goes_left], 0.5 * weights[both]])
        right_idx = np.concatenate([idx[goes_right], idx[both]])
        right_w = np.concatenate([weights[goes_right], 0.5 * weights[both]])
        return Split(j, thr,
                     build(left_idx, left_w, depth + 1),
                     build(right_idx, right_w, depth + 1))

    root_idx = np.arange(values.shape[0])
    return build(root_idx, np.ones(values.shape[0]), 0)


def _make_leaf(node_q, weights, edges, total_weight) -> Leaf:
    hist = QHistogram.from_samples(node_q, edges, weights)
    return Leaf(hist, float(weights.sum()) / total_weight)


def tree_leaves(node) -> list[Leaf]:
    if isinstance(node, Leaf):
        return [node]
    return tree_leaves(node.left) + tree_leaves(node.right)


def reached_leaves(node, values, missing) -> list[Leaf]:
    """Leaves compatible with the (possibly masked) query."""
    if isinstance(node, Leaf):
        return [node]
    if missing[node.feature]:
        return (reached_leaves(node.left, values, missing)
                + reached_leaves(node.right, values, missing))
    child = node.left if values[node.feature] <= node.threshold else node.right
    return reached_leaves(child, values, missing)


class Forest:
    """Per-configuration tree ensembles sharing one q-bin layout."""

    def __init__(self, trees_by_config: dict, edges: np.ndarray):
        if not trees_by_config:
            raise ValueError("forest needs at least one configuration")
        for c, trees in trees_by_config.items():
            if not trees:
                raise ValueError("configuration %r has no trees" % (c,))
        self.trees_by_config = {c: list(trees_by_config[c])
                                for c in sorted(trees_by_config)}
        edges = np.asarray(edges, dtype=float)
        edges.flags.writeable = False
        self.edges = edges

    @property
    def configs(self) -> list:
        return list(self.trees_by_config)

    def predict_qpdf(self, config: int, state: StateVector) -> QHistogram:
        return predict_qpdf(self, config, state)

    def predict_all(self, state: StateVector) -> dict:
        return {c: predict_qpdf(self, c, state) for c in self.configs}


def predict_qpdf(forest: Forest, config: int, state: StateVector) -> QHistogram:
    """Multiple-leaves marginalization.

    Within each tree the reached leaves are mixed by their stored priors,
    renormalized over the reached set; trees then contribute equally.  With
    nothing masked exactly one leaf per tree is reached and this reduces to
    the plain forest prediction.
    """
    if config not in forest.trees_by_config:
        raise KeyError("no trees for configuration %r" % (config,))
    mix = np.zeros(forest.edges.size - 1)
    trees = forest.trees_by_config[config]
    for tree in trees:
        leaves = reached_leaves(tree, state.values, state.missing)
        priors = np.array([lf.prior for lf in leaves])
        weights = priors / priors.sum()
        for lf, w in zip(leaves, weights):
            mix += w * lf.histogram.mass
    return QHistogram.from_weights(forest.edges, mix / len(trees))


def predict_mean_observed(forest: Forest, config: int, X: np.ndarray) -> np.ndarray:
    """Batched expected q for fully observed feature rows.

    Vectorized single-path descent; rows must carry no missing values (use
    predict_qpdf for masked queries).
    """
    if config not in forest.trees_by_config:
        raise KeyError("no trees for configuration %r" % (config,))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.zeros(X.shape[0])
    trees = forest.trees_by_config[config]
    for tree in trees:
        acc = np.empty(X.shape[0])
        stack = [(tree, np.arange(X.shape[0]))]
        while stack:
            node, ids = stack.pop()
            if ids.size == 0:
                continue
            if isinstance(node, Leaf):
                acc[ids] = node.histogram.mean()
            else:
                goes_left = X[ids, node.feature] <= node.threshold
                stack.append((node.left, ids[goes_left]))
                stack.append((node.right, ids[~goes_left]))
        out += acc
    return out / len(trees)


def train_forest(data_by_config: dict, n_trees: int = DEFAULT_N_TREES,
                 min_samples: int = DEFAULT_MIN_SAMPLES,
                 max_depth: int = DEFAULT_MAX_DEPTH,
                 seed: int = 0, bins: int = DEFAULT_Q_BINS) -> Forest:
    """Train per-configuration tree ensembles on bootstrap resamples.

    ``data_by_config`` maps a configuration id to (values, missing, q)
    arrays.  Trees are built one after another, each on a resample drawn
    from a generator seeded by (seed, config, tree index), so identical
    seeds give bit-identical forests.
    """
    if not data_by_config:
        raise ValueError("no training data")
    all_q = []
    for c, (values, missing, q) in sorted(data_by_config.items()):
        if np.asarray(q).size == 0:
            raise ValueError("configuration %r has no training samples" % (c,))
        all_q.append(np.asarray(q, dtype=float))
    edges = make_edges(np.concatenate(all_q), bins=bins)

    trees_by_config = {}
    for c in sorted(data_by_config):
        values, missing, q = (np.asarray(a) for a in data_by_config[c])
        m = values.shape[0]
        trees = []
        for t in range(n_trees):
            rng = np.random.default_rng([seed, int(c), t])
            pick = rng.integers(0, m, size=m) if m > 1 else np.zeros(1, dtype=int)
            trees.append(train_tree(values[pick], missing[pick], q[pick], edges,
                                    min_samples=min_samples, max_depth=max_depth))
        trees_by_config[c] = trees
    return Forest(trees_by_config, edges)


# --- serialization -------------------------------------------------------

FOREST_FORMAT = "adaptrav-forest v1"


def forest_to_text(forest: Forest) -> str:
    lines = [FOREST_FORMAT]
    lines.append("edges " + " ".join(repr(float(e)) for e in forest.edges))
    lines.append("configs %d" % len(forest.trees_by_config))
    for c, trees in forest.trees_by_config.items():
        lines.append("config %d trees %d" % (c, len(trees)))
        for tree in trees:
            records = []
            _write_node(tree, records)
            lines.append("tree %d" % len(records))
            lines.extend(records)
    return "\n".join(lines) + "\n"


def _write_node(node, records):
    if isinstance(node, Leaf):
        records.append("L %r %s" % (float(node.prior),
                                    " ".join(repr(float(v)) for v in node.histogram.mass)))
    else:
        records.append("S %d %r" % (node.feature, float(node.threshold)))
        _write_node(node.left, records)
        _write_node(node.right, records)


def forest_from_text(text: str) -> Forest:
    lines = text.strip().splitlines()
    if lines[0].strip() != FOREST_FORMAT:
        raise ValueError("unrecognized forest file format: %r" % lines[0])
    edges = np.array([float(t) for t in lines[1].split()[1:]])
    pos = 3
    n_configs = int(lines[2].split()[1])
    trees_by_config = {}
    for _ in range(n_configs):
        hdr = lines[pos].split()
        config, n_trees = int(hdr[1]), int(hdr[3])
        pos += 1
        trees = []
        for _ in range(n_trees):
            count = int(lines[pos].split()[1])
            pos += 1
            node, used = _read_node(lines[pos:pos + count], 0, edges)
            assert used == count
            pos += count
            trees.append(node)
        trees_by_config[config] = trees
    return Forest(trees_by_config, edges)


def _read_node(records, i, edges):
    parts = records[i].split()
    if parts[0] == "L":
        prior = float(parts[1])
        mass = np.array([float(t) for t in parts[2:]])
        return Leaf(QHistogram(edges, mass), prior), i + 1
    feature, threshold = int(parts[1]), float(parts[2])
    left, i = _read_node(records, i + 1, edges)
    right, i = _read_node(records, i, edges)
    return Split(feature, threshold, left, right), i


def save_forest(path, forest: Forest) -> None:
    with open(path, "w") as fh:
        fh.write(forest_to_text(forest))


def load_forest(path) -> Forest:
    with open(path) as fh:
        return forest_from_text(fh.read())
