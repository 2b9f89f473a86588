"""Digital elevation maps, synthetic terrain and state-vector assembly.

The DEM is a fixed grid of terrain heights in front of the robot.  Row 0 is
the row nearest the robot, row ``rows - 1`` the farthest ahead; columns run
left to right.  Bins covered by the missing mask keep their ground-truth
height internally (so the simulation can reveal them later), but any state
vector assembled from the map carries NaN at masked positions so a model can
never read through the mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PROPRIO_DIM = 15

TERRAIN_KINDS = ("flat", "pallet", "staircase", "rubble")

# EUR-1 pallet: 800 x 1200 x 140 mm
PALLET_HEIGHT = 0.14
PALLET_LENGTH_BINS = 12


@dataclass(frozen=True)
class Grid:
    """Grid geometry shared by DEMs, state vectors and the experiment code."""

    rows: int = 20
    cols: int = 5
    resolution: float = 0.10
    vertical_resolution: float = 0.05
    proprio_dim: int = PROPRIO_DIM

    @property
    def n_bins(self) -> int:
        return self.rows * self.cols

    @property
    def n_features(self) -> int:
        return self.proprio_dim + self.n_bins

    def bin_to_state_index(self, bin_index: int) -> int:
        return self.proprio_dim + bin_index

    def state_index_to_bin(self, state_index: int) -> int:
        return state_index - self.proprio_dim


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.flags.writeable = False
    return a


def quantize_heights(heights: np.ndarray, vertical_resolution: float) -> np.ndarray:
    """Snap heights to integer multiples of the vertical resolution (half up)."""
    return np.floor(np.asarray(heights, dtype=float) / vertical_resolution + 0.5) * vertical_resolution


@dataclass(frozen=True)
class DEM:
    """Terrain height grid with a per-bin missing mask.

    Heights are kept under the mask as ground truth for the reveal protocol;
    they never leak into assembled state vectors.
    """

    heights: np.ndarray
    missing: np.ndarray
    resolution: float = 0.10
    vertical_resolution: float = 0.05

    def __post_init__(self):
        heights = np.asarray(self.heights, dtype=float)
        missing = np.asarray(self.missing, dtype=bool)
        if heights.ndim != 2 or heights.size == 0:
            raise ValueError("heights must be a non-empty 2-d array")
        if missing.shape != heights.shape:
            raise ValueError("missing mask shape %s != heights shape %s"
                             % (missing.shape, heights.shape))
        if not np.isfinite(heights[~missing]).all():
            raise ValueError("observed heights must be finite")
        object.__setattr__(self, "heights", _readonly(heights))
        object.__setattr__(self, "missing", _readonly(missing))

    @property
    def rows(self) -> int:
        return self.heights.shape[0]

    @property
    def cols(self) -> int:
        return self.heights.shape[1]

    @property
    def n_bins(self) -> int:
        return self.heights.size

    def fully_observed(self) -> bool:
        return not self.missing.any()

    def visible_heights(self) -> np.ndarray:
        """Heights with NaN written over masked bins (model-facing view)."""
        out = self.heights.copy()
        out[self.missing] = np.nan
        return out

    def with_missing(self, missing: np.ndarray) -> "DEM":
        return DEM(self.heights, missing, self.resolution, self.vertical_resolution)


def occlusion_order(rows: int, cols: int) -> list[tuple[int, int]]:
    """Bin coordinates in front-occlusion fill order.

    Fills the farthest-ahead row first, left to right within each row.
    """
    order = []
    for r in range(rows - 1, -1, -1):
        for c in range(cols):
            order.append((r, c))
    return order


def flat_occlusion_order(rows: int, cols: int) -> list[int]:
    """Front-occlusion fill order as row-major flat bin indices."""
    return [r * cols + c for r, c in occlusion_order(rows, cols)]


def occlude_state_front(state: "StateVector", grid: Grid, i: int) -> "StateVector":
    """Front-occlude a fully observed state vector directly.

    Same protocol as occlude_front, applied to the DEM block of an
    assembled state; ground truth under the new mask is dropped (NaN).
    """
    if not 0 <= i <= grid.n_bins:
        raise ValueError("occlusion count %d out of range [0, %d]" % (i, grid.n_bins))
    values = state.values.copy()
    missing = state.missing.copy()
    for b in flat_occlusion_order(grid.rows, grid.cols)[:i]:
        pos = grid.bin_to_state_index(b)
        missing[pos] = True
        values[pos] = np.nan
    return StateVector(values, missing)


def occlude_front(dem: DEM, i: int) -> DEM:
    """Mark the ``i`` bins farthest ahead of the robot as missing."""
    if not 0 <= i <= dem.n_bins:
        raise ValueError("occlusion count %d out of range [0, %d]" % (i, dem.n_bins))
    missing = dem.missing.copy()
    for r, c in occlusion_order(dem.rows, dem.cols)[:i]:
        missing[r, c] = True
    return dem.with_missing(missing)


def reveal(dem: DEM, bins) -> DEM:
    """Clear the missing flag on the given flat (row-major) bin indices."""
    missing = dem.missing.copy()
    flat = missing.ravel()
    for b in bins:
        if not 0 <= b < dem.n_bins:
            raise ValueError("bin index %d out of range" % b)
        flat[b] = False
    return dem.with_missing(flat.reshape(dem.missing.shape))


def generate_terrain(kind: str, params: dict | None = None, seed: int = 0,
                     grid: Grid = Grid()) -> DEM:
    """Synthesize a fully observed DEM of the given obstacle kind.

    Deterministic for a fixed (kind, params, seed); heights are quantized to
    the grid's vertical resolution.
    """
    params = dict(params or {})
    rows, cols = grid.rows, grid.cols
    if kind not in TERRAIN_KINDS:
        raise ValueError("unknown terrain kind %r (expected one of %s)"
                         % (kind, ", ".join(TERRAIN_KINDS)))
    rng = np.random.default_rng([TERRAIN_KINDS.index(kind), seed])
    if kind == "flat":
        heights = np.zeros((rows, cols))
    elif kind == "pallet":
        height = float(params.pop("height", PALLET_HEIGHT))
        length = int(params.pop("length_bins", PALLET_LENGTH_BINS))
        start = params.pop("start_row", None)
        if height <= 0:
            raise ValueError("pallet height must be > 0")
        if length < 1:
            raise ValueError("pallet length_bins must be >= 1")
        if start is None:
            start = max(0, (rows - length) // 2)
        heights = np.zeros((rows, cols))
        heights[start:start + length, :] = height
    elif kind == "staircase":
        steps = int(params.pop("steps", 3))
        step_height = float(params.pop("step_height", PALLET_HEIGHT))
        depth = int(params.pop("step_depth_bins", 4))
        start = int(params.pop("start_row", 2))
        if steps < 1:
            raise ValueError("staircase step count must be >= 1")
        if step_height <= 0 or depth < 1:
            raise ValueError("staircase step_height must be > 0 and depth >= 1")
        heights = np.zeros((rows, cols))
        for k in range(steps):
            heights[start + k * depth:, :] = (k + 1) * step_height
    elif kind == "rubble":
        amp = float(params.pop("amp", 0.10))
        base = float(params.pop("base", 0.0))
        if amp < 0:
            raise ValueError("rubble noise amplitude must be >= 0")
        heights = base + amp * rng.random((rows, cols))
    if params:
        raise ValueError("unknown %s parameters: %s" % (kind, sorted(params)))
    heights = quantize_heights(heights, grid.vertical_resolution)
    return DEM(heights, np.zeros((rows, cols), dtype=bool),
               grid.resolution, grid.vertical_resolution)


# canonical flipper angle presets per configuration (front-left, front-right,
# rear-left, rear-right), used by the synthetic corpus
CONFIGS = (1, 2, 3, 4, 5)
CONFIG_NAMES = {1: "I-shape", 2: "V-shape", 3: "L-shape", 4: "U-soft", 5: "U-hard"}


@dataclass(frozen=True)
class Proprio:
    """Proprioceptive half of the state (always fully observed)."""

    speed_desired: float = 0.0
    speed_actual: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    flipper_angles: tuple = (0.0, 0.0, 0.0, 0.0)
    compliance: tuple = (0.0, 0.0)
    flipper_currents: tuple = (0.0, 0.0, 0.0, 0.0)
    current_config: int = 2

    def __post_init__(self):
        if len(self.flipper_angles) != 4 or len(self.flipper_currents) != 4:
            raise ValueError("flipper_angles and flipper_currents must have 4 entries")
        if len(self.compliance) != 2:
            raise ValueError("compliance must have 2 entries")
        if self.current_config not in CONFIGS:
            raise ValueError("current_config must be in %s" % (CONFIGS,))
        vec = self.as_vector()
        if not np.isfinite(vec).all():
            raise ValueError("proprioceptive features must be finite")

    def as_vector(self) -> np.ndarray:
        """Canonical 15-feature ordering, fixed across the whole pipeline."""
        return np.array(
            [self.speed_desired, self.speed_actual, self.roll, self.pitch,
             *self.flipper_angles, *self.compliance, *self.flipper_currents,
             float(self.current_config)])

    @classmethod
    def from_vector(cls, v) -> "Proprio":
        v = np.asarray(v, dtype=float)
        if v.shape != (PROPRIO_DIM,):
            raise ValueError("expected a %d-vector" % PROPRIO_DIM)
        return cls(speed_desired=v[0], speed_actual=v[1], roll=v[2], pitch=v[3],
                   flipper_angles=tuple(v[4:8]), compliance=tuple(v[8:10]),
                   flipper_currents=tuple(v[10:14]), current_config=int(round(v[14])))


@dataclass(frozen=True, eq=False)
class StateVector:
    """Feature vector plus missing mask.

    Layout for assembled states: proprio features first, then row-major DEM
    heights.  Values at masked positions are NaN; the mask can only be true
    on DEM positions.
    """

    values: np.ndarray
    missing: np.ndarray = field(default=None)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        missing = (np.zeros(values.shape, dtype=bool) if self.missing is None
                   else np.asarray(self.missing, dtype=bool))
        if values.ndim != 1 or missing.shape != values.shape:
            raise ValueError("values and missing must be 1-d arrays of equal length")
        if not np.isfinite(values[~missing]).all():
            raise ValueError("observed state values must be finite")
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "missing", _readonly(missing))

    def __len__(self) -> int:
        return self.values.size

    def key(self) -> bytes:
        """Stable hashable identity for tabular aggregation."""
        return self.values.tobytes() + self.missing.tobytes()

    def equals(self, other: "StateVector") -> bool:
        return (np.array_equal(self.values, other.values, equal_nan=True)
                and np.array_equal(self.missing, other.missing))


def assemble_state(proprio: Proprio, dem: DEM) -> StateVector:
    """Concatenate proprio features with the DEM's visible heights."""
    values = np.concatenate([proprio.as_vector(), dem.visible_heights().ravel()])
    missing = np.concatenate([np.zeros(PROPRIO_DIM, dtype=bool), dem.missing.ravel()])
    return StateVector(values, missing)


def split_state(state: StateVector, grid: Grid) -> tuple[Proprio, DEM]:
    """Inverse of assemble_state.

    Masked heights come back as NaN under the mask; ground truth hidden by an
    occlusion cannot be recovered from a state vector by design.
    """
    if len(state) != grid.n_features:
        raise ValueError("state length %d does not match grid (%d expected)"
                         % (len(state), grid.n_features))
    proprio = Proprio.from_vector(state.values[:grid.proprio_dim])
    heights = state.values[grid.proprio_dim:].reshape(grid.rows, grid.cols).copy()
    missing = state.missing[grid.proprio_dim:].reshape(grid.rows, grid.cols)
    heights[missing] = 0.0  # placeholder under the mask; still flagged missing
    dem = DEM(heights, missing, grid.resolution, grid.vertical_resolution)
    return proprio, dem


def dem_to_text(dem: DEM) -> str:
    """Flat text record: header ``rows cols resolution vres`` then row-major
    heights with a NaN token for missing bins."""
    header = "%d %d %r %r" % (dem.rows, dem.cols, dem.resolution, dem.vertical_resolution)
    visible = dem.visible_heights().ravel()
    body = " ".join("NaN" if math.isnan(v) else repr(v) for v in visible)
    return header + "\n" + body + "\n"


def dem_from_text(text: str) -> DEM:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) < 2:
        raise ValueError("DEM record needs a header line and a data line")
    hdr = lines[0].split()
    rows, cols = int(hdr[0]), int(hdr[1])
    resolution, vres = float(hdr[2]), float(hdr[3])
    tokens = " ".join(lines[1:]).split()
    if len(tokens) != rows * cols:
        raise ValueError("expected %d height entries, got %d" % (rows * cols, len(tokens)))
    flat = np.array([float(t) for t in tokens])
    missing = np.isnan(flat)
    flat = flat.copy()
    flat[missing] = 0.0
    return DEM(flat.reshape(rows, cols), missing.reshape(rows, cols), resolution, vres)


def save_dem(path, dem: DEM) -> None:
    with open(path, "w") as fh:
        fh.write(dem_to_text(dem))


def load_dem(path) -> DEM:
    with open(path) as fh:
        return dem_from_text(fh.read())
