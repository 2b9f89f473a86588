"""Synthetic obstacle corpus with programmatic safety annotations.

Stands in for a manually driven and manually labeled traversal dataset.
Each course is a terrain strip (flat ground, a pallet, a staircase or a
rubble patch); the robot walks the strip one bin row per step, sees the DEM
window ahead of it, and an annotation rule assigns the safe flipper
configuration for every visited situation:

  L-shape (3)  while climbing or when an upward jump is within the horizon
  I-shape (1)  while descending or just before a drop
  U-soft  (4)  on rough debris
  U-hard  (5)  on elevated flat ground (obstacle top)
  V-shape (2)  otherwise (plain flat ground)

Annotation rules (first match wins); at a class boundary where two
configurations are genuinely both fine the state carries both labels, with
"hold" meaning the steady-state config for the current ground (V-shape on
low ground, U-hard on an obstacle top):

  U-soft  (4)    on debris, or debris starting within 4 rows (compliance
                 must be set before contact)
  L+U (3, 5)     cresting onto an obstacle top (pitched or just arrived)
  L-shape (3)    while climbing, or an upward jump within 3 rows
  I-shape (1)    a drop within 2 rows
  I+V (1, 2)     while descending, or just after reaching the bottom
  I or hold      drop 3..6 rows out: prepare early or hold on
  U-soft or hold debris 5..6 rows out
  L or hold      upward jump 4..6 rows out
  U-hard  (5)    on elevated flat ground (obstacle top)
  V-shape (2)    otherwise (plain flat ground)

Trajectories pick a safe action most of the time with occasional uniform
exploration; a step executed with an unsafe action ends the trajectory (the
operator recovers the robot), which keeps the q values of forbidden actions
negative.  Proprioception carries the climbing/roughness signal (pitch,
currents, configuration echo) but cannot see obstacles ahead; those only
show in the DEM, which is what makes the occlusion experiments meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dem import CONFIGS, DEM, Grid, Proprio, StateVector, assemble_state, quantize_heights
from .dataset import Trajectory, Transition

JUMP = 0.10              # m, height step that demands preparation
IMMINENT = 3             # rows, upward jump this close requires L-shape now
ASCEND_HORIZON = 6       # rows, jump within this range allows the hold too
DESCEND_COMMIT = 2       # rows, drop this close requires I-shape now
DITCH_COMMIT = 3         # rows, on low ground an edge is committed earlier
                         # (nosing into a ditch is unforgiving)
DESCEND_HORIZON = 6      # rows, drop within this range allows the hold too
ROUGH_HORIZON = 4        # rows, debris this close requires U-soft
ROUGH_BUFFER = 6         # rows, debris 5..6 out: U-soft or the hold
CLIMB_PITCH = 0.08       # m over two rows, on-slope detector; labels must
                         # not remember farther back than the pitch feature
LATERAL_STD = 0.055      # m, per-row lateral spread marking debris
ELEVATED = 0.10          # m, obstacle-top level
TEXTURE = 0.05           # m, natural ground roughness quantum (0..2 per bin)
RUBBLE_AMP = 0.25        # m, default debris height spread

FLIPPER_ANGLES = {
    1: (0.0, 0.0, 0.0, 0.0),
    2: (-0.7, -0.7, 0.7, 0.7),
    3: (-1.2, -1.2, 0.3, 0.3),
    4: (0.5, 0.5, -0.5, -0.5),
    5: (0.5, 0.5, -0.5, -0.5),
}
COMPLIANCE = {1: (0.6, 0.6), 2: (0.6, 0.6), 3: (0.6, 0.6),
              4: (0.2, 0.2), 5: (0.9, 0.9)}


@dataclass(frozen=True, eq=False)
class AnnotatedState:
    """Fully observed state with a bipolar label for every configuration."""

    state: StateVector
    labels: np.ndarray   # 5 entries of +-1, indexed by config - 1

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int)
        if labels.shape != (len(CONFIGS),) or not np.isin(labels, (-1, 1)).all():
            raise ValueError("labels must be five bipolar entries")
        if not (labels == 1).any():
            raise ValueError("at least one configuration must be labeled safe")
        labels = labels.copy(); labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    def label_of(self, config: int) -> int:
        return int(self.labels[config - 1])

    def safe_configs(self) -> list[int]:
        return [c for c in CONFIGS if self.label_of(c) == 1]


def build_strip(segments, cols: int, vres: float, seed: int) -> np.ndarray:
    """Compose a terrain strip from (kind, length, params) segments.

    ``flat`` holds the current level, ``rise``/``drop`` step it by params
    height (in one go or as stairs via ``steps``), ``rubble`` fills the
    segment with random debris on top of the current level.  All ground
    carries one quantum of natural texture, so the strips are never
    perfectly planar; everything is quantized at the end.
    """
    rng = np.random.default_rng([17, seed])
    rows = []
    level = 0.0
    for kind, length, params in segments:
        if kind == "flat":
            block = np.full((length, cols), level)
        elif kind == "rise" or kind == "drop":
            height = params.get("height", 0.15)
            steps = params.get("steps", 1)
            sign = 1.0 if kind == "rise" else -1.0
            block = np.empty((length, cols))
            per = max(1, length // steps)
            for k in range(steps):
                level += sign * height / steps
                a, b = k * per, (k + 1) * per if k < steps - 1 else length
                block[a:b, :] = level
        elif kind == "rubble":
            amp = params.get("amp", RUBBLE_AMP)
            block = level + amp * rng.random((length, cols))
        else:
            raise ValueError("unknown segment kind %r" % kind)
        rows.append(block)
    strip = np.vstack(rows)
    strip = strip + TEXTURE * rng.integers(0, 3, size=strip.shape)
    return quantize_heights(strip, vres)


def _row_mean(strip: np.ndarray, p: int) -> float:
    return float(strip[p].mean())


def _rubble_row(strip: np.ndarray, r: int) -> bool:
    # debris varies laterally over contiguous rows; pallets and stairs are
    # laterally uniform, stray measurement bumps are isolated
    if float(strip[r].std()) < LATERAL_STD:
        return False
    lo, hi = max(0, r - 1), min(strip.shape[0] - 1, r + 1)
    return (float(strip[lo].std()) >= LATERAL_STD
            or float(strip[hi].std()) >= LATERAL_STD)


def annotate(strip: np.ndarray, p: int) -> np.ndarray:
    """Bipolar labels for all five configurations at strip position p.

    Look-ahead rules are anchored to the terrain right at the robot's nose
    (row p+1, the first DEM row) so every threshold decision is a function
    of what the exteroceptive features can actually see; the under-robot
    signals (slope, debris) are mirrored by pitch and motor currents.
    """
    h_nose = _row_mean(strip, p + 1)
    climb = _row_mean(strip, p) - _row_mean(strip, p - 2)
    on_rubble = any(_rubble_row(strip, r) for r in range(max(0, p - 1), p + 2))
    d_rubble = next((d for d in range(1, ROUGH_BUFFER + 1)
                     if _rubble_row(strip, p + d)), None)

    d_up = d_down = None
    for d in range(2, max(ASCEND_HORIZON, DESCEND_HORIZON) + 1):
        ahead = _row_mean(strip, p + d)
        if d_up is None and d <= ASCEND_HORIZON and ahead - h_nose >= JUMP:
            d_up = d
        if d_down is None and d <= DESCEND_HORIZON and ahead - h_nose <= -JUMP:
            d_down = d

    hold = 5 if h_nose >= ELEVATED else 2   # steady config for this ground
    if on_rubble or (d_rubble is not None and d_rubble <= ROUGH_HORIZON):
        safe = (4,)
    elif climb >= CLIMB_PITCH and h_nose >= ELEVATED and d_up is None:
        safe = (3, 5)          # cresting onto the top
    elif climb >= CLIMB_PITCH or (d_up is not None and d_up <= IMMINENT):
        safe = (3,)
    elif d_down is not None and d_down <= (DITCH_COMMIT if hold == 2
                                           else DESCEND_COMMIT):
        safe = (1,)            # edge ahead: flatten flippers before it
    elif climb <= -CLIMB_PITCH:
        safe = (1, 2)          # descending / rolling out at the bottom
    elif d_down is not None:
        safe = (1, hold)       # drop off an obstacle: prepare or hold on
    elif d_rubble is not None:
        safe = (hold, 4)       # debris far ahead, either is fine
    elif d_up is not None:
        safe = (hold, 3)       # jump far ahead, either is fine
    elif h_nose >= ELEVATED:
        safe = (5,)
    else:
        safe = (2,)
    safe = tuple(sorted(set(safe)))
    labels = -np.ones(len(CONFIGS), dtype=int)
    for c in safe:
        labels[c - 1] = 1
    return labels


def synth_proprio(strip: np.ndarray, p: int, echo_config: int, grid: Grid,
                  rng: np.random.Generator) -> Proprio:
    """Proprioception at strip position p.

    ``echo_config`` is the flipper configuration currently held by the
    operator; it lags the situation by a couple of steps, so it is a noisy
    class signal at segment boundaries.  Pitch and motor currents carry the
    on-obstacle signal but cannot see anything ahead of the tracks.
    """
    h = _row_mean(strip, p)
    climb = h - _row_mean(strip, p - 2)
    rough_here = any(_rubble_row(strip, r) for r in range(max(0, p - 1), p + 2))
    working = abs(climb) >= CLIMB_PITCH or rough_here
    pitch = float(np.arctan2(climb, 2.0 * grid.resolution)) + rng.normal(0.0, 0.04)
    roll = rng.normal(0.0, 0.03) + (rng.normal(0.0, 0.12) if rough_here else 0.0)
    current = 1.0 + 1.4 * (abs(climb) >= CLIMB_PITCH) + 2.4 * rough_here
    return Proprio(
        speed_desired=0.3,
        speed_actual=0.3 - 0.1 * working + rng.normal(0.0, 0.02),
        roll=roll,
        pitch=pitch,
        flipper_angles=tuple(np.array(FLIPPER_ANGLES[echo_config]) + rng.normal(0.0, 0.05, 4)),
        compliance=tuple(np.array(COMPLIANCE[echo_config]) + rng.normal(0.0, 0.02, 2)),
        flipper_currents=tuple(current + rng.normal(0.0, 0.3, 4)),
        current_config=echo_config,
    )


def _window(strip: np.ndarray, p: int, grid: Grid) -> DEM:
    heights = strip[p + 1:p + 1 + grid.rows]
    return DEM(heights, np.zeros_like(heights, dtype=bool),
               grid.resolution, grid.vertical_resolution)


def _flat(n):
    return ("flat", n, {})


# dense obstacle mix: hidden terrain is genuinely unpredictable from the
# visible rows, and varied course endings (flat, on-plateau, mid-climb,
# on-rubble) keep the end-of-recording discounting from biasing any one
# configuration's targets
COURSE_ROSTER = (
    (_flat(24),),
    (_flat(11), ("rise", 1, {"height": 0.15}), _flat(8),
     ("drop", 1, {"height": 0.15}), _flat(10), ("rubble", 6, {}), _flat(9)),
    (_flat(10), ("rise", 1, {"height": 0.2}), _flat(10),
     ("drop", 1, {"height": 0.2}), _flat(9), ("rise", 1, {"height": 0.15}),
     _flat(9)),
    (_flat(10), ("rise", 9, {"height": 0.45, "steps": 3}), _flat(6),
     ("drop", 9, {"height": 0.45, "steps": 3}), _flat(10)),
    (_flat(9), ("rise", 15, {"height": 0.75, "steps": 5})),
    (_flat(9), ("rubble", 8, {}), _flat(8), ("rise", 1, {"height": 0.15}),
     _flat(10)),
    (_flat(9), ("rubble", 14, {"amp": 0.3}),),
    (_flat(10), ("drop", 1, {"height": 0.15}), _flat(8),
     ("rise", 1, {"height": 0.15}), _flat(7), ("rubble", 5, {}), _flat(9)),
    (("rise", 1, {"height": 0.15}), _flat(11), ("drop", 1, {"height": 0.15}),
     _flat(8), ("rise", 1, {"height": 0.2}), _flat(10)),
    (_flat(8), ("rise", 1, {"height": 0.2}), _flat(13)),
)


def make_course(segments, grid: Grid, seed: int, explore_rate: float = 0.2):
    """Walk one course; returns (trajectories, annotated states)."""
    strip = build_strip(segments, grid.cols, grid.vertical_resolution, seed)
    rng = np.random.default_rng([23, seed])
    p_start = 2
    p_end = strip.shape[0] - max(grid.rows, ASCEND_HORIZON) - 1

    trajectories = []
    annotated = []
    p = p_start
    while p <= p_end:
        # new trajectory; the operator starts in V-shape
        action_history = [2, 2, 2]
        cur_state = assemble_state(
            synth_proprio(strip, p, _echo(action_history, rng), grid, rng),
            _window(strip, p, grid))
        transitions = []
        while p <= p_end:
            labels = annotate(strip, p)
            annotated.append(AnnotatedState(cur_state, labels))
            safe = [c for c in CONFIGS if labels[c - 1] == 1]
            if rng.random() < explore_rate:
                action = int(rng.integers(1, len(CONFIGS) + 1))
            else:
                # prefer the currently held configuration while permitted
                held = action_history[-1]
                action = held if held in safe else int(safe[rng.integers(len(safe))])
            s = int(labels[action - 1])
            bad = s == -1
            on_rubble = any(_rubble_row(strip, r) for r in range(max(0, p - 1), p + 2))
            pitch_exec = abs(synth_pitch(strip, p, grid)) + (0.35 if bad else 0.0)
            rough_exec = (0.5 + 2.8 * on_rubble + (2.2 if bad else 0.0)
                          + rng.normal(0.0, 0.2))
            terminal = bad or (p + 1 > p_end)
            next_p = min(p + 1, p_end)
            action_history.append(action)
            next_state = assemble_state(
                synth_proprio(strip, next_p, _echo(action_history, rng), grid, rng),
                _window(strip, next_p, grid))
            transitions.append(Transition(cur_state, action, next_state, s,
                                          pitch_exec, max(0.0, rough_exec), terminal))
            p += 1
            if terminal:
                break
            cur_state = next_state
        trajectories.append(Trajectory(tuple(transitions)))
    return trajectories, annotated


def _echo(action_history, rng: np.random.Generator) -> int:
    """Configuration the operator is actually holding: the commanded action
    from one to four steps back (switching is slow and often late)."""
    lag = int(rng.integers(1, 4))
    return action_history[-min(lag, len(action_history))]


def synth_pitch(strip: np.ndarray, p: int, grid: Grid) -> float:
    climb = _row_mean(strip, p) - _row_mean(strip, p - 2)
    return float(np.arctan2(climb, 2.0 * grid.resolution))


def make_corpus(grid: Grid, seed: int = 0, repeats: int = 4,
                explore_rate: float = 0.2):
    """Full training corpus: all courses repeated with distinct seeds.

    Deterministic for fixed arguments.  Returns (trajectories, annotated).
    """
    trajectories = []
    annotated = []
    course_id = 0
    for rep in range(repeats):
        for segments in COURSE_ROSTER:
            trj, ann = make_course(segments, grid, seed * 100003 + course_id,
                                   explore_rate=explore_rate)
            trajectories.extend(trj)
            annotated.extend(ann)
            course_id += 1
    return trajectories, annotated


# --- annotated-state file ------------------------------------------------
#
# header:  n rows cols proprio_dim
# record:  l1 l2 l3 l4 l5 v1..vn   (fully observed states)

def save_annotated(path, states, grid: Grid) -> None:
    with open(path, "w") as fh:
        fh.write("%d %d %d %d\n" % (grid.n_features, grid.rows, grid.cols,
                                    grid.proprio_dim))
        for st in states:
            fields = ["%d" % v for v in st.labels]
            fields += [repr(float(v)) for v in st.state.values]
            fh.write(" ".join(fields) + "\n")


def load_annotated(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    n, rows, cols, pdim = (int(x) for x in lines[0].split())
    states = []
    for ln in lines[1:]:
        toks = ln.split()
        labels = np.array([int(t) for t in toks[:5]])
        values = np.array([float(t) for t in toks[5:5 + n]])
        states.append(AnnotatedState(StateVector(values), labels))
    return states, (n, rows, cols, pdim)
