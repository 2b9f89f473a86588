"""Traversal trajectories, rewards and Q-value target computation.

Targets are the discounted-return estimates the QPDF models are trained on.
The iteration keeps a per-transition q estimate and sweeps the recurrence

    q[t] += alpha * (r[t] + gamma * max_a' Q(a', x[t+1]) - Q(a[t], x[t]))

re-aggregating Q between sweeps (group-by mean over identical state-action
pairs, falling back to a caller-supplied model for unseen pairs).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dem import CONFIGS, StateVector

PITCH_THRESHOLD = 0.5       # rad, penalty-free below
ROUGHNESS_THRESHOLD = 2.5   # m/s^2, penalty-free below
DEFAULT_REWARD_WEIGHTS = (5.0, 1.0, 1.0)


def reward(s: int, pitch: float, roughness: float,
           weights: tuple = DEFAULT_REWARD_WEIGHTS) -> float:
    """Weighted sum of the user label and the pitch/roughness penalties.

    Penalties are zero below their thresholds and linear above.  The user
    weight defaults high enough that a -1 label dominates, which is what
    makes negative q mean unsafe downstream.
    """
    w_user, w_pitch, w_rough = weights
    if w_user < 0 or w_pitch < 0 or w_rough < 0:
        raise ValueError("reward weights must be >= 0")
    if s not in (-1, 1):
        raise ValueError("user label must be -1 or +1")
    pitch_pen = max(0.0, abs(pitch) - PITCH_THRESHOLD)
    rough_pen = max(0.0, roughness - ROUGHNESS_THRESHOLD)
    return w_user * s - w_pitch * pitch_pen - w_rough * rough_pen


@dataclass(frozen=True, eq=False)
class Transition:
    state: StateVector
    action: int
    next_state: StateVector
    s: int                       # bipolar user label for (action, state)
    pitch: float
    roughness: float
    terminal: bool = False
    reward: float | None = None  # explicit override (exploration rollouts)

    def __post_init__(self):
        if self.s not in (-1, 1):
            raise ValueError("user label must be -1 or +1")


@dataclass(frozen=True, eq=False)
class Trajectory:
    transitions: tuple

    def __post_init__(self):
        trs = tuple(self.transitions)
        for a, b in zip(trs, trs[1:]):
            if not a.next_state.equals(b.state):
                raise ValueError("trajectory is not chained: next_state mismatch")
        object.__setattr__(self, "transitions", trs)

    def __len__(self):
        return len(self.transitions)

    def __iter__(self):
        return iter(self.transitions)


@dataclass(frozen=True, eq=False)
class QSample:
    state: StateVector
    action: int
    q: float

    def __post_init__(self):
        if not np.isfinite(self.q):
            raise ValueError("q must be finite")


class QTable:
    """Exact group-by mean of q over identical (action, state) pairs."""

    def __init__(self, table: dict):
        self._table = dict(table)

    def __call__(self, action: int, state: StateVector) -> float:
        key = (action, state.key())
        if key not in self._table:
            raise KeyError("no q estimate for action %r at this state" % (action,))
        return self._table[key]

    def get(self, action, state, default=None):
        return self._table.get((action, state.key()), default)

    def __len__(self):
        return len(self._table)


def tabular_q(samples) -> QTable:
    """Aggregate samples into a Q table (unbiased mean per cell).

    Only sensible when states come from a finite set; continuous pipelines
    fit a regression model instead.
    """
    sums: dict = {}
    counts: dict = {}
    for smp in samples:
        key = (smp.action, smp.state.key())
        sums[key] = sums.get(key, 0.0) + smp.q
        counts[key] = counts.get(key, 0) + 1
    return QTable({k: sums[k] / counts[k] for k in sums})


def _zero_q(action, state):
    return 0.0


def q_targets(trajectories, alpha: float = 0.5, gamma: float = 0.8,
              q_prev=None, iters: int = 20, tol: float = 1e-4,
              actions=CONFIGS,
              weights: tuple = DEFAULT_REWARD_WEIGHTS) -> list[QSample]:
    """Iterate the Q-learning recurrence over recorded trajectories.

    ``q_prev`` seeds Q lookups for state-action pairs absent from the data
    (zero when omitted).  ``actions`` gives the candidate set for the max
    term, either a fixed iterable or a callable(next_state) for state
    dependent action sets.  Iteration stops early once the largest absolute
    q change falls below ``tol``.  Terminal transitions use a zero max term.
    """
    if not 0.0 <= alpha <= 1.0 or not 0.0 <= gamma <= 1.0:
        raise ValueError("alpha and gamma must lie in [0, 1]")
    if q_prev is None:
        q_prev = _zero_q
    transitions = [t for trj in trajectories for t in trj]
    if not transitions:
        return []
    rewards = [reward_of(t, weights) for t in transitions]
    qs = list(rewards)  # iteration 1: q := r

    action_set = actions if callable(actions) else (lambda _state, _a=tuple(actions): _a)

    for _ in range(1, iters):
        table = tabular_q(QSample(t.state, t.action, q)
                          for t, q in zip(transitions, qs))

        def q_fn(action, state):
            v = table.get(action, state)
            return q_prev(action, state) if v is None else v

        max_change = 0.0
        new_qs = []
        for t, q, r in zip(transitions, qs, rewards):
            if t.terminal:
                best_next = 0.0
            else:
                best_next = max(q_fn(a, t.next_state) for a in action_set(t.next_state))
            delta = alpha * (r + gamma * best_next - q_fn(t.action, t.state))
            new_qs.append(q + delta)
            max_change = max(max_change, abs(delta))
        qs = new_qs
        if max_change < tol:
            break

    return [QSample(t.state, t.action, q) for t, q in zip(transitions, qs)]


def reward_of(t: Transition, weights: tuple = DEFAULT_REWARD_WEIGHTS) -> float:
    if t.reward is not None:
        return t.reward
    return reward(t.s, t.pitch, t.roughness, weights)


# --- dataset file format -------------------------------------------------
#
# header:  n rows cols proprio_dim
# record:  traj_id step action s pitch roughness v1..vn w1..wn
# with NaN tokens at missing positions; the last record of each trajectory
# is terminal.

def save_dataset(path, trajectories, grid) -> None:
    n = grid.n_features
    with open(path, "w") as fh:
        fh.write("%d %d %d %d\n" % (n, grid.rows, grid.cols, grid.proprio_dim))
        for tid, trj in enumerate(trajectories):
            for step, t in enumerate(trj):
                fields = ["%d" % tid, "%d" % step, "%d" % t.action, "%d" % t.s,
                          repr(float(t.pitch)), repr(float(t.roughness))]
                fields += _state_tokens(t.state)
                fields += _state_tokens(t.next_state)
                fh.write(" ".join(fields) + "\n")


def _state_tokens(state: StateVector) -> list[str]:
    return ["NaN" if m else repr(float(v))
            for v, m in zip(state.values, state.missing)]


def _state_from_tokens(tokens) -> StateVector:
    vals = np.array([float(t) for t in tokens])
    missing = np.isnan(vals)
    return StateVector(vals, missing)


def load_dataset(path):
    """Returns (trajectories, (n, rows, cols, proprio_dim))."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    n, rows, cols, pdim = (int(x) for x in lines[0].split())
    by_traj: dict = {}
    for ln in lines[1:]:
        toks = ln.split()
        tid, step, action, s = int(toks[0]), int(toks[1]), int(toks[2]), int(toks[3])
        pitch, rough = float(toks[4]), float(toks[5])
        state = _state_from_tokens(toks[6:6 + n])
        nxt = _state_from_tokens(toks[6 + n:6 + 2 * n])
        by_traj.setdefault(tid, []).append(
            (step, state, action, nxt, s, pitch, rough))
    trajectories = []
    for tid in sorted(by_traj):
        recs = sorted(by_traj[tid])
        trans = []
        for i, (step, state, action, nxt, s, pitch, rough) in enumerate(recs):
            trans.append(Transition(state, action, nxt, s, pitch, rough,
                                    terminal=(i == len(recs) - 1)))
        trajectories.append(Trajectory(tuple(trans)))
    return trajectories, (n, rows, cols, pdim)
