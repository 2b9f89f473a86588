"""Success-rate metric, occlusion robustness sweep and exploration curves.

The occlusion sweep front-occludes every annotated state at a grid of
percentages and records, per marginalization method, the fraction of states
where the chosen configuration is annotated safe (the gate is disabled for
this metric, matching the plain argmax policy).  The exploration curve fixes
50 percent front occlusion and measures success as bins are revealed one at
a time by a probing strategy, continuing past the point where a safe action
exists.  Both experiments repeat over training seeds and report mean curves
with quartile bands.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import AnnotatedState
from .dataset import q_targets
from .dem import Grid, StateVector, assemble_state, occlude_state_front, split_state
from .forest import Forest, train_forest
from .gp import (GPModel, SmoothnessPrior, gibbs_marginalize, predict,
                 predict_uncertain, train_gp)
from .policy import argmax_config, lsq_interpolate, select_action, Chosen
from .tte import ArdStrategy, RandomStrategy, RlStrategy, TTEState, fill_with_plane, train_rl_strategy

METHODS = ("forest-marginal", "gp-rq-gibbs", "gp-se-uncertain",
           "lsq-forest", "lsq-gp")
STRATEGIES = ("random", "ard", "rl")
DEFAULT_LEVELS = tuple(range(0, 101, 10))


@dataclass(frozen=True)
class CurvePoint:
    method: str
    x: float
    success_rate: float
    q25: float
    q75: float


def success_rate(states, policy_fn) -> float:
    """Fraction of states whose chosen configuration is annotated safe."""
    states = list(states)
    if not states:
        raise ValueError("success rate needs at least one state")
    hits = 0
    for st in states:
        c = policy_fn(st.state)
        if c is not None and st.label_of(c) == 1:
            hits += 1
    return hits / len(states)


# --- q training data ------------------------------------------------------

def training_data(trajectories, alpha: float, gamma: float, iters: int,
                  weights=(5.0, 1.0, 1.0), q_prev=None):
    """Per-configuration (values, missing, q) arrays from raw trajectories.

    ``q_prev`` seeds the value of state-action pairs absent from the data;
    an optimistic constant keeps end-of-recording truncation from biasing
    the targets of whatever configuration happened to be driven last.
    """
    samples = q_targets(trajectories, alpha=alpha, gamma=gamma, iters=iters,
                        weights=weights, q_prev=q_prev)
    by_config: dict = {}
    for smp in samples:
        by_config.setdefault(smp.action, []).append(smp)
    data = {}
    for c in sorted(by_config):
        group = by_config[c]
        values = np.array([g.state.values for g in group])
        missing = np.array([g.state.missing for g in group])
        data[c] = (values, missing, np.array([g.q for g in group]))
    return data


def fit_prior(states, grid: Grid) -> SmoothnessPrior:
    grids = [st.state.values[grid.proprio_dim:].reshape(grid.rows, grid.cols)
             for st in states]
    return SmoothnessPrior.fit(grids, grid)


# --- marginalization methods ----------------------------------------------

def plane_fill_state(state: StateVector, grid: Grid) -> StateVector:
    proprio, dem = split_state(state, grid)
    return assemble_state(proprio, lsq_interpolate(dem))


def make_qpdf_fn(method: str, *, forest: Forest = None, gps: dict = None,
                 grid: Grid = None, prior: SmoothnessPrior = None,
                 gibbs_samples: int = 300, gibbs_burn_in: int = 50,
                 gibbs_seed: int = 0, gibbs_collapse: bool = True):
    """Per-configuration QPDF estimator for one marginalization method."""
    if method == "forest-marginal":
        return forest.predict_all
    if method == "lsq-forest":
        def fn(state):
            return forest.predict_all(plane_fill_state(state, grid))
        return fn
    if method == "lsq-gp":
        def fn(state):
            filled = plane_fill_state(state, grid)
            return {c: predict(gps[c], filled.values) for c in sorted(gps)}
        return fn
    if method == "gp-se-uncertain":
        def fn(state):
            mean_vec, cov = fill_with_plane(state, grid, prior.height_var)
            return {c: predict_uncertain(gps[c], mean_vec, cov)
                    for c in sorted(gps)}
        return fn
    if method == "gp-rq-gibbs":
        def fn(state):
            return {c: gibbs_marginalize(gps[c], state, prior,
                                         n_samples=gibbs_samples,
                                         burn_in=gibbs_burn_in,
                                         seed=gibbs_seed,
                                         collapse=gibbs_collapse)
                    for c in sorted(gps)}
        return fn
    raise ValueError("unknown method %r (expected one of %s)"
                     % (method, ", ".join(METHODS)))


def policy_from_qpdfs(qpdf_fn, epsilon: float | None = None):
    """Configuration chooser; gate disabled when epsilon is None."""
    def policy(state):
        qpdfs = qpdf_fn(state)
        if epsilon is None:
            return argmax_config(qpdfs)
        decision = select_action(qpdfs, epsilon)
        return decision.config if isinstance(decision, Chosen) else None
    return policy


# --- experiments -----------------------------------------------------------

def occlusion_sweep(states, qpdf_fns: dict, grid: Grid,
                    levels=DEFAULT_LEVELS, epsilon: float | None = None):
    """Success rate per method at each front-occlusion percentage.

    Nested masks by construction; the x axis is the percentage of occluded
    bins so differently shaped grids stay comparable.
    """
    rows = []
    for pct in levels:
        occ = int(round(pct / 100.0 * grid.n_bins))
        masked = [AnnotatedState(occlude_state_front(st.state, grid, occ), st.labels)
                  for st in states]
        for method in sorted(qpdf_fns):
            rate = success_rate(masked, policy_from_qpdfs(qpdf_fns[method], epsilon))
            rows.append((method, float(pct), rate))
    return rows


def tte_curve(states, qpdf_fn, make_strategy, grid: Grid,
              occlusion_fraction: float = 0.5):
    """Success rate as a function of revealed-bin count at fixed occlusion.

    The reveal order is produced by the strategy state by state; success is
    evaluated with the plain argmax policy, and exploration continues even
    after a safe configuration exists.
    """
    n_occ = int(round(occlusion_fraction * grid.n_bins))
    hits = np.zeros(n_occ + 1)
    states = list(states)
    for idx, st in enumerate(states):
        strategy = make_strategy(idx)
        gt = st.state.values[grid.proprio_dim:]
        cur = TTEState(occlude_state_front(st.state, grid, n_occ), grid)
        for k in range(n_occ + 1):
            c = argmax_config(qpdf_fn(cur.state))
            if st.label_of(c) == 1:
                hits[k] += 1
            if k < n_occ:
                b = strategy(cur)
                cur = cur.reveal(b, float(gt[b]))
    rates = hits / len(states)
    return [(float(k), float(r)) for k, r in enumerate(rates)]


def aggregate_curves(per_seed_rows) -> list[CurvePoint]:
    """Collapse repeated (method, x, rate) rows into mean and quartiles."""
    bucket: dict = {}
    for rows in per_seed_rows:
        for method, x, rate in rows:
            bucket.setdefault((method, x), []).append(rate)
    points = []
    for (method, x) in sorted(bucket):
        vals = np.array(bucket[(method, x)])
        points.append(CurvePoint(method, x, float(vals.mean()),
                                 float(np.percentile(vals, 25)),
                                 float(np.percentile(vals, 75))))
    return points


def write_csv(path, points) -> None:
    with open(path, "w") as fh:
        fh.write("method,x,success_rate,q25,q75\n")
        for p in points:
            fh.write("%s,%r,%r,%r,%r\n" % (p.method, p.x, p.success_rate,
                                           p.q25, p.q75))


def optimistic_prior(cfg):
    """Constant Q seed for unobserved pairs: a scaled safe-driving value."""
    if cfg.q_optimism <= 0 or cfg.gamma >= 1.0:
        return None
    level = cfg.q_optimism * cfg.w_user / (1.0 - cfg.gamma)
    return lambda action, state: level


def train_models(trajectories, cfg, seed: int, need_forest: bool,
                 gp_kinds: set):
    """Train the per-configuration QPDF models one experiment seed needs."""
    data = training_data(trajectories, cfg.alpha, cfg.gamma, cfg.q_iters,
                         weights=cfg.reward_weights,
                         q_prev=optimistic_prior(cfg))
    models = {}
    if need_forest:
        models["forest"] = train_forest(
            data, n_trees=cfg.forest_trees, min_samples=cfg.forest_min_samples,
            max_depth=cfg.forest_max_depth, seed=seed, bins=cfg.q_bins)
    for kind in sorted(gp_kinds):
        gps = {}
        for c, (values, _missing, q) in data.items():
            gps[c] = train_gp(values, q, kind=kind, seed=seed,
                              restarts=cfg.gp_restarts,
                              max_iters=cfg.gp_max_iters,
                              max_points=cfg.gp_max_points)
        models[kind] = gps
    return models


def method_requirements(methods):
    need_forest = any(m in ("forest-marginal", "lsq-forest") for m in methods)
    gp_kinds = set()
    if "gp-se-uncertain" in methods:
        gp_kinds.add("se")
    if "gp-rq-gibbs" in methods or "lsq-gp" in methods:
        gp_kinds.add("rq")
    return need_forest, gp_kinds


def run_occlusion_experiment(trajectories, annotated, grid: Grid, cfg,
                             methods=METHODS) -> list[CurvePoint]:
    """Train per seed, sweep occlusion per method, aggregate quartiles."""
    need_forest, gp_kinds = method_requirements(methods)
    prior = fit_prior(annotated, grid)
    per_seed = []
    for k in range(cfg.eval_seeds):
        seed = cfg.seed + k
        models = train_models(trajectories, cfg, seed, need_forest, gp_kinds)
        qpdf_fns = {}
        for m in methods:
            qpdf_fns[m] = make_qpdf_fn(
                m, forest=models.get("forest"),
                gps=models.get("rq") if m in ("gp-rq-gibbs", "lsq-gp") else models.get("se"),
                grid=grid, prior=prior,
                gibbs_samples=cfg.gibbs_samples, gibbs_burn_in=cfg.gibbs_burn_in,
                gibbs_seed=seed, gibbs_collapse=not cfg.gibbs_mixture_safety)
        per_seed.append(occlusion_sweep(annotated, qpdf_fns, grid,
                                        levels=cfg.occlusion_levels))
    return aggregate_curves(per_seed)


def run_tte_experiment(trajectories, annotated, grid: Grid, cfg,
                       strategies=STRATEGIES) -> list[CurvePoint]:
    """Exploration curves at 50 percent occlusion for each strategy.

    Forest-backed success for random and rl, GP-SE-backed for ard (the ARD
    strategy is defined by the GP's length scales).
    """
    prior = fit_prior(annotated, grid)
    per_seed = []
    for k in range(cfg.eval_seeds):
        seed = cfg.seed + k
        need_se = "ard" in strategies
        models = train_models(trajectories, cfg, seed, True,
                              {"se"} if need_se else set())
        forest = models["forest"]
        forest_fn = make_qpdf_fn("forest-marginal", forest=forest)
        rows = []
        for strat in strategies:
            if strat == "random":
                curve = tte_curve(
                    annotated, forest_fn,
                    lambda idx: RandomStrategy(seed * 100 + idx), grid,
                    occlusion_fraction=cfg.occlusion_fraction)
                rows += [("forest+random", x, r) for x, r in curve]
            elif strat == "rl":
                expl = train_rl_strategy(
                    [st.state for st in annotated], forest_fn, grid,
                    epsilon=cfg.epsilon,
                    occlude_bins=int(round(cfg.occlusion_fraction * grid.n_bins)),
                    episodes=cfg.tte_episodes,
                    rollouts_per_episode=cfg.tte_rollouts,
                    alpha=cfg.alpha, gamma=cfg.gamma, seed=seed,
                    n_trees=cfg.tte_trees, min_samples=cfg.tte_min_samples,
                    max_depth=cfg.tte_max_depth)
                curve = tte_curve(
                    annotated, forest_fn,
                    lambda idx: RlStrategy(expl, grid), grid,
                    occlusion_fraction=cfg.occlusion_fraction)
                rows += [("forest+rl", x, r) for x, r in curve]
            elif strat == "ard":
                gps = models["se"]
                se_fn = make_qpdf_fn("gp-se-uncertain", gps=gps, grid=grid,
                                     prior=prior)
                curve = tte_curve(
                    annotated, se_fn,
                    lambda idx: ArdStrategy(gps, grid, prior.height_var), grid,
                    occlusion_fraction=cfg.occlusion_fraction)
                rows += [("gp-se+ard", x, r) for x, r in curve]
                curve = tte_curve(
                    annotated, se_fn,
                    lambda idx: RandomStrategy(seed * 100 + 7 * idx + 1), grid,
                    occlusion_fraction=cfg.occlusion_fraction)
                rows += [("gp-se+random", x, r) for x, r in curve]
            else:
                raise ValueError("unknown strategy %r" % strat)
        per_seed.append(rows)
    return aggregate_curves(per_seed)
