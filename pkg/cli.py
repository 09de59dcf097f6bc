"""
回路サイジング実験コマンド
学習・デプロイ・FoM比較・手法比較・ネットリスト確認をコマンドラインから実行
"""
import argparse
import dataclasses
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional

import networkx as nx
import numpy as np
import pandas as pd

from baselines import (
    Method,
    fom_objective,
    genetic_search,
    p2s_objective,
    random_search,
    results_row,
)
from chart import (
    create_deployment_chart,
    create_fom_chart,
    create_training_chart,
    save_figure,
)
from config import PACKAGE_DIR, ConfigError, RunConfig, config_from_dict, load_config
from env import (
    CIRCUITS,
    GOAL_PRESETS,
    EvaluatorError,
    Fidelity,
    SpecError,
    circuit_from_description,
    goal_from_mapping,
    out_of_range_specs,
    reward_terms,
    rng_stream,
    sample_goal,
)
from metrics import (
    aggregate_seeds,
    batches_per_window,
    fom_summary,
    moving_average,
    reward_trend,
    running_max,
    summarize_methods,
)
from netlist import (
    GraphError,
    NetlistError,
    build_graph,
    load_netlist,
    parameter_table,
    to_dot,
)
from policy import CheckpointError, Variant, load_checkpoint
from ppo import TrainingError, deploy, deployment_accuracy, train, train_fom
from storage import CHECKPOINT_FILE, ensure_dir, seed_dir, write_csv, write_records

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# 入力の誤り（終了コード2）と実行時の失敗（終了コード1）
INPUT_ERRORS = (ConfigError, NetlistError, GraphError, CheckpointError, SpecError)
RUN_ERRORS = (TrainingError, EvaluatorError)

# 報酬の傾向と学習曲線の平滑化に使うエピソード数
TREND_WINDOW_EPISODES = 100
TRAIN_SUMMARY_COLUMNS = ["seed", "final_accuracy", "final_mean_steps", "reward_first",
                         "reward_last", "checkpoint"]


def _config(args) -> RunConfig:
    return load_config(args.config, args.set, args.seed, args.episodes, args.out)


def _wall(config: RunConfig, secs: float) -> float:
    return secs if config.run.record_wall_time else math.nan


def _baseline_rngs(seed: int):
    """GA用とランダム探索用の独立な乱数（baselineストリームから分岐）"""
    children = rng_stream(seed, "baseline").bit_generator.seed_seq.spawn(2)
    return tuple(np.random.default_rng(s) for s in children)


def _print_table(df: pd.DataFrame):
    with pd.option_context("display.max_columns", None, "display.width", 160):
        print(df.to_string(index=False))


# ============================================
# train
# ============================================

def cmd_train(args) -> int:
    """シードごとに学習し、メトリクス・チェックポイント・集計グラフを出力"""
    config = _config(args)
    seeds = list(config.run.seeds)
    print(f"=== train: {config.run.circuit} / {config.policy.variant} "
          f"({config.ppo.episodes_total} episodes x {len(seeds)} seeds) ===")

    if config.run.jobs > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=config.run.jobs) as executor:
            futures = [executor.submit(train, config, seed) for seed in seeds]
            # 投入順に回収
            results = [f.result() for f in futures]
    else:
        results = [train(config, seed) for seed in seeds]

    summary = []
    for seed, result in zip(seeds, results):
        trend = reward_trend(result.metrics, TREND_WINDOW_EPISODES)
        summary.append({
            "seed": seed,
            "final_accuracy": result.final_accuracy,
            "final_mean_steps": result.final_mean_steps,
            "reward_first": trend["first"],
            "reward_last": trend["last"],
            "checkpoint": str(result.checkpoint_path),
        })
        print(f"seed {seed}: accuracy={result.final_accuracy:.3f} "
              f"mean_steps={result.final_mean_steps:.1f} "
              f"reward {trend['first']:.3f} -> {trend['last']:.3f}")

    out = ensure_dir(config.run.output_dir)
    write_records(summary, out / "train_summary.csv", TRAIN_SUMMARY_COLUMNS)

    window = batches_per_window(TREND_WINDOW_EPISODES, config.ppo.episodes_per_batch)
    frames = []
    for result in results:
        frame = result.metrics.copy()
        frame["mean_ep_reward"] = moving_average(frame["mean_ep_reward"], window)
        frames.append(frame)
    aggregates = {c: aggregate_seeds(frames, "episodes_cum", c)
                  for c in ("mean_ep_reward", "mean_ep_len", "deploy_acc")}
    fig = create_training_chart(
        aggregates, f"{config.run.circuit} {config.policy.variant} ({len(seeds)} seeds)")
    path = save_figure(fig, out / "training.svg")
    print(f"plot: {path}")
    return 0


# ============================================
# deploy
# ============================================

def _parse_goal(assignments: List[str]) -> Dict[str, float]:
    """`G=350 B=1.8e7 ...` → {仕様名: 値}"""
    goal = {}
    for item in assignments:
        if "=" not in item:
            raise SpecError(f"goal '{item}' must look like NAME=VALUE")
        name, value = item.split("=", 1)
        try:
            goal[name.strip()] = float(value)
        except ValueError:
            raise SpecError(f"goal {name}: '{value}' is not a number")
    return goal


def _checkpoint_env(checkpoint: str):
    """チェックポイントから方策・設定・デプロイ環境を復元"""
    policy, meta = load_checkpoint(checkpoint)
    setup = circuit_from_description(meta["circuit"])
    config = config_from_dict(meta["config"] or {})
    env = setup.make_env(config.env.deploy_fidelity or CIRCUITS[setup.name].deploy_fidelity,
                         config.env.max_episode_len or None, bonus=config.env.bonus,
                         initial_state=config.env.initial_state)
    return policy, setup, config, env


def cmd_deploy(args) -> int:
    """学習済み方策を目標に向けてデプロイし、トレースを出力"""
    policy, setup, config, env = _checkpoint_env(args.checkpoint)
    out = ensure_dir(args.out or Path(args.checkpoint).resolve().parent)
    seed = args.seed if args.seed is not None else config.run.seeds[0]
    if seed < 0:
        raise ConfigError(f"--seed: must be >= 0 (got {seed})")

    if args.sample:
        accuracy, mean_steps = deployment_accuracy(
            policy, env, args.sample, args.max_steps, rng_stream(seed, "eval"))
        print(f"=== deploy: {setup.name}, {args.sample} sampled goals ===")
        print(f"accuracy={accuracy:.3f} mean_steps={mean_steps:.1f}")
        write_records([{"n_goals": args.sample, "accuracy": accuracy, "mean_steps": mean_steps}],
                      out / "deploy_accuracy.csv")
        return 0

    if args.preset:
        if args.preset not in GOAL_PRESETS:
            raise SpecError(f"unknown preset '{args.preset}' (expected {sorted(GOAL_PRESETS)})")
        values = dict(GOAL_PRESETS[args.preset])
    elif args.goal:
        values = _parse_goal(args.goal)
    else:
        raise SpecError("deploy needs --goal, --preset or --sample")
    goal = goal_from_mapping(values, setup.defs)

    max_steps = args.max_steps
    unseen = out_of_range_specs(goal, setup.defs)
    if unseen:
        logger.warning("unseen specification: %s outside the training range", ", ".join(unseen))
        if max_steps is None:
            max_steps = max(env.max_episode_len, config.env.generalization_steps)

    result = deploy(policy, env, goal, max_steps)
    trace = pd.DataFrame(result.trace)
    write_csv(trace, out / "deploy_trace.csv")
    spec_names = [d.name for d in setup.defs]
    fig = create_deployment_chart(
        trace, spec_names, dict(zip(spec_names, goal)),
        f"{setup.name} deployment", [d.name for d in setup.defs if d.log_sampled])
    path = save_figure(fig, out / "deploy_trace.svg")

    status = "reached" if result.success else ("aborted" if result.aborted else "not reached")
    print(f"=== deploy: {setup.name} ===")
    print(f"goal {status} in {result.steps_used} steps")
    print(f"trace: {out / 'deploy_trace.csv'}")
    print(f"plot: {path}")
    return 0


# ============================================
# fom
# ============================================

def _curve(values: List[float], xs: Optional[List[int]] = None) -> pd.DataFrame:
    xs = xs if xs is not None else list(range(1, len(values) + 1))
    return pd.DataFrame({"x": xs, "fom": values})


def cmd_fom(args) -> int:
    """RLのFoM学習とGA・ランダム探索を同じFine評価予算で比較"""
    config = _config(args)
    if config.run.circuit != "rfpa":
        raise ConfigError("run.circuit: fom requires 'rfpa'")
    setup = config.circuit_setup()
    budget = config.fom.eval_budget
    fine = setup.evaluator(Fidelity.FINE)
    objective = fom_objective(fine, setup.defs)
    seeds = list(config.run.seeds)
    print(f"=== fom: {len(config.fom.variants)} variants x {len(seeds)} seeds, "
          f"budget {budget} fine evaluations ===")

    rows = []
    curves: Dict[str, List[pd.DataFrame]] = {}
    for variant in config.fom.variants:
        variant_config = dataclasses.replace(
            config, policy=dataclasses.replace(config.policy, variant=variant))
        for seed in seeds:
            out_dir = seed_dir(Path(config.run.output_dir) / variant, seed)
            result = train_fom(variant_config, seed, out_dir)
            if result.fom_evals > budget:
                logger.warning("%s seed %d used %d fine evaluations (budget %d)",
                               variant, seed, result.fom_evals, budget)
            rows.append({"method": variant, "seed": seed, "final_fom": result.final_fom,
                         "last_fom": result.last_fom, "evals_used": result.fom_evals,
                         "wall_secs": math.nan})
            curves.setdefault(variant, []).append(_curve(result.fom_curve))

    ga_config = dataclasses.replace(config.ga, eval_budget_cap=budget)
    for seed in seeds:
        rng_ga, rng_random = _baseline_rngs(seed)
        ga = genetic_search(objective, setup.space, ga_config, rng_ga,
                            target=None)
        rows.append({"method": Method.GA, "seed": seed, "final_fom": ga.best_r,
                     "last_fom": ga.best_r, "evals_used": ga.evals_used,
                     "wall_secs": _wall(config, ga.wall_secs)})
        curves.setdefault(Method.GA, []).append(_curve(ga.history, ga.history_evals))

        rnd = random_search(objective, setup.space, budget, rng_random,
                            target=None)
        rows.append({"method": Method.RANDOM, "seed": seed, "final_fom": rnd.best_r,
                     "last_fom": rnd.best_r, "evals_used": rnd.evals_used,
                     "wall_secs": _wall(config, rnd.wall_secs)})
        curves.setdefault(Method.RANDOM, []).append(_curve(running_max(rnd.history)))

    out = ensure_dir(config.run.output_dir)
    results = pd.DataFrame(rows, columns=["method", "seed", "final_fom", "last_fom", "evals_used",
                                          "wall_secs"])
    write_csv(results, out / "fom_results.csv")
    summary = fom_summary(results)
    write_csv(summary, out / "fom_summary.csv")
    _print_table(summary)

    medians = dict(zip(summary["method"], summary["median_fom"]))
    if Variant.GAT_FC in medians and Variant.GCN_FC in medians:
        if medians[Variant.GAT_FC] < medians[Variant.GCN_FC]:
            logger.warning("median FoM of gat_fc (%.4f) is below gcn_fc (%.4f)",
                           medians[Variant.GAT_FC], medians[Variant.GCN_FC])
    for variant in config.fom.variants:
        policy_fom = results[results["method"] == variant].set_index("seed")["final_fom"]
        random_fom = results[results["method"] == Method.RANDOM].set_index("seed")["final_fom"]
        wins = int((policy_fom >= random_fom.reindex(policy_fom.index)).sum())
        print(f"{variant} >= random: {wins}/{len(policy_fom)} seeds")

    aggregated = {method: aggregate_seeds(frames, "x", "fom") for method, frames in curves.items()}
    fig = create_fom_chart(aggregated, "Fine evaluations", "FoM optimization")
    path = save_figure(fig, out / "fom_curves.svg")
    print(f"plot: {path}")
    return 0


# ============================================
# compare
# ============================================

def _default_checkpoint(config: RunConfig) -> str:
    if config.compare.checkpoint:
        return config.compare.checkpoint
    return str(Path(config.run.output_dir) / f"seed_{config.run.seeds[0]}" / CHECKPOINT_FILE)


def cmd_compare(args) -> int:
    """サンプリングした目標で方策・GA・ランダム探索を比較"""
    config = _config(args)
    checkpoint = args.checkpoint or _default_checkpoint(config)
    policy, setup, _, env = _checkpoint_env(checkpoint)
    n_goals = args.n_goals or config.compare.n_goals
    seed = config.run.seeds[0]
    max_steps = config.compare.max_steps or None
    fine = setup.evaluator(Fidelity.FINE)
    print(f"=== compare: {setup.name}, {n_goals} goals ===")

    rng_goals = rng_stream(seed, "eval")
    rng_ga, rng_random = _baseline_rngs(seed)
    rows = []
    for k in range(n_goals):
        goal = sample_goal(rng_goals, setup.defs)
        result = deploy(policy, env, goal, max_steps)
        best_r = max(float(np.sum(reward_terms(
            np.array([row[d.name] for d in setup.defs]), goal, setup.defs)))
            for row in result.trace)
        rows.append(results_row(Method.POLICY, goal, setup.defs, result.success,
                                result.steps_used, best_r, math.nan))

        objective = p2s_objective(fine, goal, setup.defs)
        ga = genetic_search(objective, setup.space, config.ga, rng_ga)
        rows.append(results_row(Method.GA, goal, setup.defs, ga.success, ga.evals_used,
                                ga.best_r, _wall(config, ga.wall_secs)))
        rnd = random_search(objective, setup.space, config.compare.random_budget, rng_random)
        rows.append(results_row(Method.RANDOM, goal, setup.defs, rnd.success, rnd.evals_used,
                                rnd.best_r, _wall(config, rnd.wall_secs)))
        logger.info("goal %d/%d: policy=%s ga=%s random=%s", k + 1, n_goals,
                    result.success, ga.success, rnd.success)

    out = ensure_dir(config.run.output_dir)
    results = pd.DataFrame(rows)
    write_csv(results, out / "compare_results.csv")
    summary = summarize_methods(results, include_wall=config.run.record_wall_time)
    write_csv(summary, out / "compare_summary.csv")
    _print_table(summary)
    return 0


# ============================================
# inspect
# ============================================

def cmd_inspect(args) -> int:
    """ネットリストのグラフとパラメータ表を表示"""
    path = args.netlist or str(PACKAGE_DIR / CIRCUITS[args.circuit].netlist)
    graph = build_graph(load_netlist(path))
    names = [n.name for n in graph.nodes]

    print(f"=== {path} ===")
    print(f"nodes: {graph.n_nodes}")
    for i, node in enumerate(graph.nodes):
        print(f"  {i:2d} {node.name:<6} {node.kind}")
    print("adjacency:")
    print(pd.DataFrame(graph.adjacency.astype(int), index=names, columns=names).to_string())
    print(f"M = {graph.netlist.n_params}")
    _print_table(pd.DataFrame(parameter_table(graph.netlist)))

    if args.dot:
        Path(args.dot).write_text(to_dot(graph), encoding="utf-8")
        print(f"dot: {args.dot}")
    if args.graphml:
        nx.write_graphml(graph.graph, args.graphml)
        print(f"graphml: {args.graphml}")
    return 0


# ============================================
# 引数
# ============================================

def _common(parser: argparse.ArgumentParser, config: bool = True):
    if config:
        parser.add_argument("--config", help="TOML run configuration")
        parser.add_argument("--episodes", type=int, help="override ppo.episodes_total")
        parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                            help="override any config field")
    parser.add_argument("--seed", type=int, help="replace the seed list with one seed")
    parser.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="circuit-sizer",
                                     description="Graph RL transistor sizing experiments")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a policy per seed")
    _common(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("deploy", help="deploy a trained policy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--goal", nargs="+", metavar="NAME=VALUE")
    p.add_argument("--preset", help=f"one of {', '.join(sorted(GOAL_PRESETS))}")
    p.add_argument("--sample", type=int, help="report accuracy over N sampled goals")
    p.add_argument("--max-steps", type=int)
    _common(p, config=False)
    p.set_defaults(handler=cmd_deploy)

    p = sub.add_parser("fom", help="FoM optimization: RL vs GA vs random search")
    _common(p)
    p.set_defaults(handler=cmd_fom)

    p = sub.add_parser("compare", help="policy vs GA vs random search on sampled goals")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--n-goals", type=int)
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser("inspect", help="print the circuit graph of a netlist")
    p.add_argument("netlist", nargs="?")
    p.add_argument("--circuit", default="opamp", choices=sorted(CIRCUITS))
    p.add_argument("--dot", metavar="FILE")
    p.add_argument("--graphml", metavar="FILE")
    p.set_defaults(handler=cmd_inspect)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    debug = args.log_level == "DEBUG"
    try:
        return args.handler(args)
    except INPUT_ERRORS as e:
        if debug:
            logger.exception("input error")
        print(f"error: {e}", file=sys.stderr)
        return 2
    except RUN_ERRORS as e:
        if debug:
            logger.exception("run failed")
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
