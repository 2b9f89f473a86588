"""Tactile terrain exploration: probing strategies and the explore loop.

When no flipper configuration passes the safety gate, the arm measures
missing elevation bins one at a time until some configuration is safe or
nothing is left to measure.  Probing is simulated by revealing ground-truth
heights.  Three bin-selection strategies: uniform random, smallest ARD
length scale of the best GP model, and a learned policy (regression forest
over bin actions, trained on synthetic roll-outs with DAgger-style mixing).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dem import DEM, Grid, StateVector, flat_occlusion_order, occlude_state_front, split_state
from .dataset import QSample, Transition
from .forest import Forest, predict_mean_observed, train_forest
from .gp import ard_values, predict_uncertain
from .policy import DEFAULT_EPSILON, Chosen, lsq_interpolate, safety, select_action

EXPLORATION_SENTINEL = -1.0


@dataclass(frozen=True)
class TTEState:
    """Exploration state: the AT state plus the set of still-missing bins."""

    state: StateVector
    grid: Grid

    @property
    def missing_bins(self) -> tuple:
        pdim = self.grid.proprio_dim
        return tuple(int(b) for b in np.flatnonzero(self.state.missing[pdim:]))

    def reveal(self, bin_index: int, height: float) -> "TTEState":
        pos = self.grid.bin_to_state_index(bin_index)
        if not self.state.missing[pos]:
            raise ValueError("bin %d is not missing" % bin_index)
        values = self.state.values.copy()
        missing = self.state.missing.copy()
        values[pos] = height
        missing[pos] = False
        return TTEState(StateVector(values, missing), self.grid)


@dataclass(frozen=True)
class ProbeRecord:
    step: int
    bin: int
    revealed_height: float
    best_safety: float
    chosen_config: int | None


@dataclass(frozen=True)
class SafeFound:
    config: int
    n_probes: int


@dataclass(frozen=True)
class Exhausted:
    n_probes: int


@dataclass(frozen=True)
class ExplorationTrace:
    probes: tuple
    outcome: object

    def format_log(self) -> str:
        lines = []
        for p in self.probes:
            chosen = "-" if p.chosen_config is None else str(p.chosen_config)
            lines.append("%d %d %r %r %s"
                         % (p.step, p.bin, p.revealed_height, p.best_safety, chosen))
        return "\n".join(lines)


def encode_exploration_state(state: StateVector, grid: Grid) -> StateVector:
    """Fully observed feature encoding for the exploration q model.

    Missing values are replaced by a sentinel and the binary DEM mask is
    appended, so the exploration forest never sees masked features itself.
    """
    values = state.values.copy()
    values[state.missing] = EXPLORATION_SENTINEL
    mask = state.missing[grid.proprio_dim:].astype(float)
    return StateVector(np.concatenate([values, mask]))


def missing_bins_of_encoded(encoded: StateVector, grid: Grid) -> list[int]:
    mask = encoded.values[grid.n_features:]
    return [int(b) for b in np.flatnonzero(mask > 0.5)]


def random_strategy(tte_state: TTEState, rng: np.random.Generator) -> int:
    missing = tte_state.missing_bins
    if not missing:
        raise ValueError("no missing bins left to explore")
    return int(missing[rng.integers(len(missing))])


class RandomStrategy:
    """Uniform choice over missing bins, reproducible per seed and call."""

    def __init__(self, seed: int = 0):
        self._rng = np.random.default_rng(seed)

    def __call__(self, tte_state: TTEState) -> int:
        return random_strategy(tte_state, self._rng)


class ArdStrategy:
    """Probe the bin the best GP model is most sensitive to.

    Estimates every configuration's QPDF with uncertain-input prediction
    (missing bins at their plane-fit value with the prior height variance),
    takes the model with the highest mean, and among the missing bins picks
    the one with the smallest ARD length scale.
    """

    def __init__(self, gp_models: dict, grid: Grid, height_var: float):
        self.gp_models = dict(gp_models)
        self.grid = grid
        self.height_var = height_var

    def __call__(self, tte_state: TTEState) -> int:
        missing = tte_state.missing_bins
        if not missing:
            raise ValueError("no missing bins left to explore")
        state = tte_state.state
        mean_vec, cov = fill_with_plane(state, self.grid, self.height_var)
        best_c, best_mean = None, -np.inf
        for c in sorted(self.gp_models):
            pred = predict_uncertain(self.gp_models[c], mean_vec, cov)
            if pred.mean > best_mean:
                best_c, best_mean = c, pred.mean
        ard = ard_values(self.gp_models[best_c])
        best_bin, best_val = None, np.inf
        for b in missing:
            v = ard[self.grid.bin_to_state_index(b)]
            if v < best_val:
                best_bin, best_val = b, v
        return int(best_bin)


def fill_with_plane(state: StateVector, grid: Grid, height_var: float):
    """Plane-fit completion of a masked state plus a diagonal covariance
    carrying the prior height variance on the missing dimensions."""
    proprio, dem = split_state(state, grid)
    filled = lsq_interpolate(dem)
    mean_vec = np.concatenate([proprio.as_vector(), filled.heights.ravel()])
    cov = np.zeros((grid.n_features, grid.n_features))
    for pos in np.flatnonzero(state.missing):
        cov[pos, pos] = height_var
    return mean_vec, cov


class RlStrategy:
    """Probe the bin with the highest learned exploration q."""

    def __init__(self, exploration_forest: Forest, grid: Grid):
        self.forest = exploration_forest
        self.grid = grid

    def __call__(self, tte_state: TTEState) -> int:
        missing = tte_state.missing_bins
        if not missing:
            raise ValueError("no missing bins left to explore")
        encoded = encode_exploration_state(tte_state.state, self.grid)
        best_bin, best_q = missing[0], -np.inf
        for b in missing:
            if b not in self.forest.trees_by_config:
                continue  # bin never probed during training
            q = self.forest.predict_qpdf(b, encoded).mean()
            if q > best_q:
                best_bin, best_q = b, q
        return int(best_bin)


def explore_until_safe(initial: TTEState, ground_truth: DEM, strategy,
                       qpdf_fn, epsilon: float = DEFAULT_EPSILON,
                       max_probes: int | None = None) -> ExplorationTrace:
    """Reveal bins until the safety condition holds for some configuration.

    ``qpdf_fn`` maps a state vector to per-configuration QPDFs.  Stops with
    SafeFound as soon as select_action passes the gate, or with Exhausted
    when no missing bins remain (or ``max_probes`` is hit), which is when
    manual control would be requested from the operator.
    """
    grid = initial.grid
    if not ground_truth.fully_observed():
        raise ValueError("ground truth DEM must be fully observed")
    gt_flat = ground_truth.heights.ravel()
    visible = ~initial.state.missing[grid.proprio_dim:]
    if not np.allclose(initial.state.values[grid.proprio_dim:][visible],
                       gt_flat[visible], rtol=0.0, atol=1e-9):
        raise ValueError("ground truth disagrees with the visible state")

    cur = initial
    probes = []
    n = 0
    decision = select_action(qpdf_fn(cur.state), epsilon)
    while True:
        if isinstance(decision, Chosen):
            return ExplorationTrace(tuple(probes), SafeFound(decision.config, n))
        missing = cur.missing_bins
        if not missing or (max_probes is not None and n >= max_probes):
            return ExplorationTrace(tuple(probes), Exhausted(n))
        b = strategy(cur)
        if b not in missing:
            raise ValueError("strategy picked a non-missing bin %d" % b)
        h = float(gt_flat[b])
        cur = cur.reveal(b, h)
        n += 1
        qpdfs = qpdf_fn(cur.state)
        decision = select_action(qpdfs, epsilon)
        best_s = max(safety(qpdfs[c]) for c in qpdfs)
        chosen = decision.config if isinstance(decision, Chosen) else None
        probes.append(ProbeRecord(n - 1, b, h, best_s, chosen))


def behavior_bin(rng: np.random.Generator, mix: float, learned, tte_state: TTEState) -> int:
    """DAgger mixing: the learned policy with probability ``mix``, uniform
    random otherwise (always random when no policy is learned yet)."""
    if learned is not None and rng.random() < mix:
        return learned(tte_state)
    return random_strategy(tte_state, rng)


def train_rl_strategy(full_states, qpdf_fn, grid: Grid,
                      epsilon: float = DEFAULT_EPSILON,
                      occlude_bins: int | None = None,
                      episodes: int = 5, rollouts_per_episode: int = 2000,
                      alpha: float = 0.5, gamma: float = 0.8,
                      q_iters: int = 5, seed: int = 0, mix: float = 0.5,
                      n_trees: int = 8, min_samples: int = 10,
                      max_depth: int = 10,
                      reward_on_exhausted: float = 0.0) -> Forest:
    """Learn a probing policy from synthetically occluded roll-outs.

    Episode 0 collects roll-outs with the random strategy; later episodes
    mix the learned policy in with probability ``mix`` per decision.  After
    each episode the q targets of all collected transitions are updated with
    the Q-learning recurrence (terminal reward 1/n on success) and a
    regression forest over (state, bin) pairs is refit on them.
    """
    full_states = list(full_states)
    if not full_states:
        raise ValueError("no training states")
    if occlude_bins is None:
        occlude_bins = grid.n_bins // 2
    if not 1 <= occlude_bins <= grid.n_bins:
        raise ValueError("occlude_bins must leave at least one bin to explore")

    trajectories: list[list[Transition]] = []
    exploration_forest: Forest | None = None
    for ep in range(episodes):
        rng = np.random.default_rng([seed, ep])
        learned = (None if exploration_forest is None
                   else RlStrategy(exploration_forest, grid))
        for _ in range(rollouts_per_episode):
            state0 = full_states[int(rng.integers(len(full_states)))]
            trans = _rollout(state0, qpdf_fn, grid, epsilon, occlude_bins,
                             rng, mix if ep > 0 else 0.0, learned,
                             reward_on_exhausted)
            if trans:
                trajectories.append(trans)
        samples = _exploration_q_targets(trajectories, grid, alpha, gamma,
                                         q_iters, exploration_forest)
        exploration_forest = _fit_exploration_forest(samples, n_trees,
                                                     min_samples, max_depth,
                                                     seed * 1009 + ep)
    return exploration_forest


def _rollout(state0: StateVector, qpdf_fn, grid, epsilon, occlude_bins,
             rng, mix, learned, reward_on_exhausted) -> list[Transition]:
    cur = TTEState(occlude_state_front(state0, grid, occlude_bins), grid)
    gt = state0.values[grid.proprio_dim:]
    steps = []
    while True:
        decision = select_action(qpdf_fn(cur.state), epsilon)
        missing = cur.missing_bins
        if isinstance(decision, Chosen) or not missing:
            safe = isinstance(decision, Chosen)
            break
        b = behavior_bin(rng, mix, learned, cur)
        nxt = cur.reveal(b, float(gt[b]))
        steps.append((cur, b, nxt))
        cur = nxt
    n = len(steps)
    if n == 0:
        return []
    final_reward = (1.0 / n) if safe else reward_on_exhausted
    out = []
    for i, (st, b, nxt) in enumerate(steps):
        last = i == n - 1
        out.append(Transition(
            encode_exploration_state(st.state, grid), b,
            encode_exploration_state(nxt.state, grid), s=1, pitch=0.0,
            roughness=0.0, terminal=last,
            reward=final_reward if last else 0.0))
    return out


def _exploration_q_targets(trajectories, grid, alpha, gamma, iters,
                           prev_forest) -> list[QSample]:
    """Q-learning recurrence over exploration roll-outs.

    Same update as dataset.q_targets but with the max term restricted to
    bins still missing at the next state, and with the previous episode's
    forest evaluated in batch for pairs absent from the table.
    """
    transitions = [t for trj in trajectories for t in trj]
    rewards = np.array([t.reward for t in transitions])
    qs = rewards.copy()

    nonterm = [i for i, t in enumerate(transitions) if not t.terminal]
    next_states = np.array([transitions[i].next_state.values for i in nonterm])
    valid_bins = [missing_bins_of_encoded(transitions[i].next_state, grid)
                  for i in nonterm]
    all_bins = sorted({b for bins in valid_bins for b in bins})
    forest_next = {}
    if prev_forest is not None and nonterm:
        for b in all_bins:
            if b in prev_forest.trees_by_config:
                forest_next[b] = predict_mean_observed(prev_forest, b, next_states)

    keys = [(t.action, t.state.key()) for t in transitions]
    next_keys = [t.next_state.key() for t in transitions]

    for _ in range(1, iters):
        sums: dict = {}
        counts: dict = {}
        for k, q in zip(keys, qs):
            sums[k] = sums.get(k, 0.0) + q
            counts[k] = counts.get(k, 0) + 1
        table = {k: sums[k] / counts[k] for k in sums}

        new_qs = qs.copy()
        for row, i in enumerate(nonterm):
            best = -np.inf
            for b in valid_bins[row]:
                v = table.get((b, next_keys[i]))
                if v is None:
                    col = forest_next.get(b)
                    v = float(col[row]) if col is not None else 0.0
                best = max(best, v)
            cur = table[keys[i]]
            new_qs[i] = qs[i] + alpha * (rewards[i] + gamma * best - cur)
        for i, t in enumerate(transitions):
            if t.terminal:
                new_qs[i] = qs[i] + alpha * (rewards[i] - table[keys[i]])
        if float(np.max(np.abs(new_qs - qs))) < 1e-6:
            qs = new_qs
            break
        qs = new_qs
    return [QSample(t.state, t.action, float(q)) for t, q in zip(transitions, qs)]


def _fit_exploration_forest(samples, n_trees, min_samples, max_depth, seed) -> Forest:
    by_bin: dict = {}
    for smp in samples:
        by_bin.setdefault(smp.action, []).append(smp)
    data = {}
    for b, group in sorted(by_bin.items()):
        values = np.array([g.state.values for g in group])
        missing = np.zeros(values.shape, dtype=bool)
        q = np.array([g.q for g in group])
        data[b] = (values, missing, q)
    return train_forest(data, n_trees=n_trees, min_samples=min_samples,
                        max_depth=max_depth, seed=seed)
