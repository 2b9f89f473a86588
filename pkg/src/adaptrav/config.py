"""Flat key=value configuration for the experiment harness and CLI."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .dem import Grid


@dataclass(frozen=True)
class Config:
    # grid
    rows: int = 20
    cols: int = 5
    resolution: float = 0.10
    vertical_resolution: float = 0.05
    # learning
    seed: int = 0
    alpha: float = 0.5
    gamma: float = 0.8
    q_iters: int = 20
    q_optimism: float = 1.0
    epsilon: float = 0.8
    w_user: float = 5.0
    w_pitch: float = 1.0
    w_rough: float = 1.0
    # forest
    forest_trees: int = 32
    forest_min_samples: int = 5
    forest_max_depth: int = 12
    q_bins: int = 40
    # gaussian process
    gp_restarts: int = 5
    gp_max_iters: int = 200
    gp_max_points: int = 500
    gibbs_samples: int = 300
    gibbs_burn_in: int = 50
    gibbs_mixture_safety: int = 0
    # exploration learning
    tte_episodes: int = 5
    tte_rollouts: int = 2000
    tte_trees: int = 8
    tte_min_samples: int = 10
    tte_max_depth: int = 10
    # experiments
    eval_seeds: int = 10
    occlusion_levels: tuple = tuple(range(0, 101, 10))
    occlusion_fraction: float = 0.5
    corpus_repeats: int = 4
    explore_rate: float = 0.2

    @property
    def grid(self) -> Grid:
        return Grid(self.rows, self.cols, self.resolution, self.vertical_resolution)

    @property
    def reward_weights(self) -> tuple:
        return (self.w_user, self.w_pitch, self.w_rough)


def _parse_value(raw: str, kind):
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is tuple:
        return tuple(int(t) for t in raw.split(",") if t.strip())
    raise TypeError("unsupported config field type %r" % kind)


def load_config(path) -> Config:
    fields = {f.name: f.type for f in dataclasses.fields(Config)}
    types = {f.name: type(getattr(Config(), f.name)) for f in dataclasses.fields(Config)}
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError("%s:%d: expected key=value" % (path, lineno))
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in fields:
                raise ValueError("%s:%d: unknown config key %r" % (path, lineno, key))
            values[key] = _parse_value(val, types[key])
    return Config(**values)


def save_config(path, cfg: Config) -> None:
    with open(path, "w") as fh:
        for f in dataclasses.fields(Config):
            v = getattr(cfg, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            fh.write("%s=%s\n" % (f.name, v))
