"""Experiment harness CLI.

Subcommands: gen-data, train, train-tte, eval-occlusion, eval-tte, simulate.
All outputs are deterministic for a fixed config file and seed.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import corpus, harness
from .config import Config, load_config
from .dataset import load_dataset, save_dataset
from .dem import Grid, occlude_state_front, split_state
from .forest import load_forest, save_forest, train_forest
from .gp import load_gp_set, save_gp_set, train_gp
from .policy import DEFAULT_EPSILON
from .tte import (ArdStrategy, RandomStrategy, RlStrategy, TTEState,
                  explore_until_safe, train_rl_strategy)

DATASET_FILE = "dataset.txt"
ANNOTATED_FILE = "annotated.txt"


def _load_cfg(args) -> Config:
    return load_config(args.config) if args.config else Config()


def _load_data(data_dir, cfg):
    trajectories, _meta = load_dataset(os.path.join(data_dir, DATASET_FILE))
    annotated, _meta = corpus.load_annotated(os.path.join(data_dir, ANNOTATED_FILE))
    return trajectories, annotated


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    grid = cfg.grid
    trajectories, annotated = corpus.make_corpus(
        grid, seed=cfg.seed, repeats=cfg.corpus_repeats,
        explore_rate=cfg.explore_rate)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(os.path.join(args.out, DATASET_FILE), trajectories, grid)
    corpus.save_annotated(os.path.join(args.out, ANNOTATED_FILE), annotated, grid)
    print("wrote %d trajectories, %d annotated states to %s"
          % (len(trajectories), len(annotated), args.out))
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    seed = cfg.seed if args.seed is None else args.seed
    trajectories, _annotated = _load_data(args.data, cfg)
    data = harness.training_data(trajectories, cfg.alpha, cfg.gamma,
                                 cfg.q_iters, weights=cfg.reward_weights)
    if args.model == "forest":
        model = train_forest(data, n_trees=cfg.forest_trees,
                             min_samples=cfg.forest_min_samples,
                             max_depth=cfg.forest_max_depth,
                             seed=seed, bins=cfg.q_bins)
        save_forest(args.out, model)
    else:
        kind = "se" if args.model == "gp-se" else "rq"
        gps = {c: train_gp(values, q, kind=kind, seed=seed,
                           restarts=cfg.gp_restarts, max_iters=cfg.gp_max_iters,
                           max_points=cfg.gp_max_points)
               for c, (values, _m, q) in sorted(data.items())}
        save_gp_set(args.out, gps)
    print("trained %s model -> %s" % (args.model, args.out))
    return 0


def cmd_train_tte(args) -> int:
    cfg = _load_cfg(args)
    grid = cfg.grid
    seed = cfg.seed if args.seed is None else args.seed
    _trajectories, annotated = _load_data(args.data, cfg)
    forest = load_forest(args.forest)
    expl = train_rl_strategy(
        [st.state for st in annotated], forest.predict_all, grid,
        epsilon=cfg.epsilon,
        occlude_bins=int(round(cfg.occlusion_fraction * grid.n_bins)),
        episodes=cfg.tte_episodes, rollouts_per_episode=cfg.tte_rollouts,
        alpha=cfg.alpha, gamma=cfg.gamma, seed=seed,
        n_trees=cfg.tte_trees, min_samples=cfg.tte_min_samples,
        max_depth=cfg.tte_max_depth)
    save_forest(args.out, expl)
    print("trained exploration policy -> %s" % args.out)
    return 0


def cmd_eval_occlusion(args) -> int:
    cfg = _load_cfg(args)
    trajectories, annotated = _load_data(args.data, cfg)
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    points = harness.run_occlusion_experiment(trajectories, annotated,
                                              cfg.grid, cfg, methods=methods)
    harness.write_csv(args.out, points)
    print("wrote %d curve points to %s" % (len(points), args.out))
    return 0


def cmd_eval_tte(args) -> int:
    cfg = _load_cfg(args)
    trajectories, annotated = _load_data(args.data, cfg)
    strategies = tuple(s.strip() for s in args.strategies.split(",") if s.strip())
    points = harness.run_tte_experiment(trajectories, annotated, cfg.grid, cfg,
                                        strategies=strategies)
    harness.write_csv(args.out, points)
    print("wrote %d curve points to %s" % (len(points), args.out))
    return 0


def cmd_simulate(args) -> int:
    cfg = _load_cfg(args)
    grid = cfg.grid
    seed = cfg.seed if args.seed is None else args.seed
    trajectories, annotated = _load_data(args.data, cfg)
    if args.forest:
        forest = load_forest(args.forest)
    else:
        data = harness.training_data(trajectories, cfg.alpha, cfg.gamma,
                                     cfg.q_iters, weights=cfg.reward_weights)
        forest = train_forest(data, n_trees=cfg.forest_trees,
                              min_samples=cfg.forest_min_samples,
                              max_depth=cfg.forest_max_depth,
                              seed=seed, bins=cfg.q_bins)
    st = annotated[args.state_index]
    occ = args.occlude if args.occlude is not None else grid.n_bins // 2
    masked = occlude_state_front(st.state, grid, occ)
    _proprio, gt_dem = split_state(st.state, grid)

    if args.strategy == "random":
        strategy = RandomStrategy(seed)
    elif args.strategy == "rl":
        if not args.tte_forest:
            raise SystemExit("--strategy rl needs --tte-forest")
        strategy = RlStrategy(load_forest(args.tte_forest), grid)
    elif args.strategy == "ard":
        data = harness.training_data(trajectories, cfg.alpha, cfg.gamma,
                                     cfg.q_iters, weights=cfg.reward_weights)
        gps = {c: train_gp(values, q, kind="se", seed=seed,
                           restarts=cfg.gp_restarts, max_iters=cfg.gp_max_iters,
                           max_points=cfg.gp_max_points)
               for c, (values, _m, q) in sorted(data.items())}
        prior = harness.fit_prior(annotated, grid)
        strategy = ArdStrategy(gps, grid, prior.height_var)
    else:
        raise SystemExit("unknown strategy %r" % args.strategy)

    trace = explore_until_safe(TTEState(masked, grid), gt_dem, strategy,
                               forest.predict_all, epsilon=cfg.epsilon)
    if args.verbose:
        print("state %d, %d bins occluded, strategy %s, epsilon %s"
              % (args.state_index, occ, args.strategy, cfg.epsilon))
    log = trace.format_log()
    if log:
        print(log)
    outcome = trace.outcome
    if hasattr(outcome, "config"):
        print("safe: config %d after %d probes" % (outcome.config, outcome.n_probes))
    else:
        print("exhausted after %d probes (manual control requested)"
              % outcome.n_probes)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adaptrav",
        description="Adaptive traversability experiments: QPDF models, "
                    "occlusion robustness and tactile exploration.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize the annotated corpus")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train QPDF models")
    p.add_argument("--data", required=True)
    p.add_argument("--model", choices=("forest", "gp-se", "gp-rq"),
                   default="forest")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-tte", help="train the exploration policy")
    p.add_argument("--data", required=True)
    p.add_argument("--forest", required=True,
                   help="trained QPDF forest file (safety model)")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_tte)

    p = sub.add_parser("eval-occlusion", help="occlusion robustness sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--methods", default=",".join(harness.METHODS))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_occlusion)

    p = sub.add_parser("eval-tte", help="exploration strategy curves")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--strategies", default=",".join(harness.STRATEGIES))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_tte)

    p = sub.add_parser("simulate", help="run one explore-until-safe trace")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--state-index", type=int, default=0)
    p.add_argument("--occlude", type=int, default=None)
    p.add_argument("--strategy", choices=("random", "ard", "rl"),
                   default="random")
    p.add_argument("--forest", default=None,
                   help="trained QPDF forest file (trained fresh when omitted)")
    p.add_argument("--tte-forest", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
