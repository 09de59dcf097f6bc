"""
比較手法モジュール
遺伝的アルゴリズムとランダム探索（目標ごとにゼロから探索）
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from env import ParamSpace, SpecDef, fom_value, reward_terms

logger = logging.getLogger(__name__)


class Method:
    """結果CSVのmethod列"""
    POLICY = "policy"
    GA = "ga"
    RANDOM = "random"


@dataclass
class GaConfig:
    population_size: int = 20
    generations: int = 50
    tournament_k: int = 3
    crossover_rate: float = 0.9
    mutation_rate: float = 0.2
    mutation_step: int = 3
    seed: int = 0
    eval_budget_cap: int = 1000
    max_workers: int = 1

    def validate(self):
        """不正な値のフィールド名と理由のリスト"""
        problems = []
        if self.population_size < 2:
            problems.append(("population_size", "must be >= 2"))
        if self.generations < 1:
            problems.append(("generations", "must be >= 1"))
        if not 1 <= self.tournament_k <= max(self.population_size, 1):
            problems.append(("tournament_k", "must be in [1, population_size]"))
        for name in ("crossover_rate", "mutation_rate"):
            if not 0 <= getattr(self, name) <= 1:
                problems.append((name, "must be in [0, 1]"))
        if self.mutation_step < 1:
            problems.append(("mutation_step", "must be >= 1"))
        if self.eval_budget_cap < 1:
            problems.append(("eval_budget_cap", "must be >= 1"))
        if self.max_workers < 1:
            problems.append(("max_workers", "must be >= 1"))
        return problems


@dataclass
class SearchResult:
    best_params: np.ndarray
    best_r: float
    evals_used: int
    history: List[float] = field(default_factory=list)
    history_evals: List[int] = field(default_factory=list)
    success: bool = False
    wall_secs: float = math.nan


# ============================================
# 目的関数
# ============================================

def p2s_objective(evaluator: Callable[[np.ndarray], np.ndarray], goal: np.ndarray,
                  defs: Sequence[SpecDef]) -> Callable[[np.ndarray], float]:
    """クリップした正規化差分の和（0で目標達成）"""
    goal = np.asarray(goal, dtype=float)

    def objective(params: np.ndarray) -> float:
        return float(np.sum(reward_terms(evaluator(params), goal, defs)))

    return objective


def fom_objective(evaluator: Callable[[np.ndarray], np.ndarray],
                  defs: Sequence[SpecDef]) -> Callable[[np.ndarray], float]:
    """FoM = P + 3·E を最大化"""

    def objective(params: np.ndarray) -> float:
        return fom_value(evaluator(params), defs)

    return objective


def _evaluate(objective: Callable[[np.ndarray], float], members: np.ndarray,
              max_workers: int) -> np.ndarray:
    """個体群を評価（並列時も投入順で返す）"""
    if max_workers <= 1 or len(members) <= 1:
        return np.array([objective(m) for m in members])
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        return np.array(list(executor.map(objective, members)))


# ============================================
# 遺伝的アルゴリズム
# ============================================

def _tournament(rng: np.random.Generator, fitness: np.ndarray, k: int) -> int:
    contenders = rng.choice(len(fitness), size=min(k, len(fitness)), replace=False)
    return int(contenders[np.argmax(fitness[contenders])])


def _mutate(child: np.ndarray, space: ParamSpace, config: GaConfig,
            rng: np.random.Generator) -> np.ndarray:
    """遺伝子ごとに ±k·Δx（kは1..mutation_step）を加えて境界でクランプ"""
    genes = rng.random(space.size) < config.mutation_rate
    k = rng.integers(1, config.mutation_step + 1, size=space.size)
    sign = rng.choice(np.array([-1.0, 1.0]), size=space.size)
    return space.clamp(child + genes * sign * k * space.step)


def genetic_search(objective: Callable[[np.ndarray], float], space: ParamSpace,
                   config: GaConfig, rng: Optional[np.random.Generator] = None,
                   target: Optional[float] = 0.0) -> SearchResult:
    """
    遺伝的アルゴリズムで目的関数を最大化

    トーナメント選択・一様交叉・±k·Δxの変異・エリート1個体。
    best_r が target 以上になるか評価回数が上限に達したら停止する。

    Args:
        objective: パラメータ → スコア（大きいほど良い）
        space: パラメータ空間
        config: GA設定
        rng: 乱数（省略時は config.seed）
        target: 早期終了の閾値（Noneなら早期終了なし）

    Returns:
        SearchResult（historyは世代ごとの最良スコア、history_evalsはその時点の累積評価回数）
    """
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    started = time.perf_counter()
    cap = config.eval_budget_cap

    n0 = min(config.population_size, cap)
    population = space.sample(rng, n0)
    fitness = _evaluate(objective, population, config.max_workers)
    evals = n0
    best = int(np.argmax(fitness))
    best_params, best_r = population[best].copy(), float(fitness[best])
    history = [best_r]
    history_evals = [evals]

    def reached() -> bool:
        return target is not None and best_r >= target

    for gen in range(1, config.generations):
        if reached() or evals >= cap:
            break
        elite = int(np.argmax(fitness))
        children = []
        while len(children) < config.population_size - 1:
            p1 = population[_tournament(rng, fitness, config.tournament_k)]
            p2 = population[_tournament(rng, fitness, config.tournament_k)]
            if rng.random() < config.crossover_rate:
                child = np.where(rng.random(space.size) < 0.5, p1, p2)
            else:
                child = p1.copy()
            children.append(_mutate(child, space, config, rng))

        children = np.array(children[:max(0, min(len(children), cap - evals))])
        if len(children):
            child_fitness = _evaluate(objective, children, config.max_workers)
            evals += len(children)
            population = np.vstack([population[elite:elite + 1], children])
            fitness = np.concatenate([fitness[elite:elite + 1], child_fitness])
        best = int(np.argmax(fitness))
        if fitness[best] > best_r:
            best_params, best_r = population[best].copy(), float(fitness[best])
        history.append(best_r)
        history_evals.append(evals)
        logger.debug("GA generation %d: best=%.6f evals=%d", gen, best_r, evals)

    return SearchResult(best_params, best_r, evals, history, history_evals, reached(),
                        time.perf_counter() - started)


# ============================================
# ランダム探索
# ============================================

def random_search(objective: Callable[[np.ndarray], float], space: ParamSpace,
                  budget: int, rng: np.random.Generator,
                  target: Optional[float] = 0.0) -> SearchResult:
    """
    境界内の一様サンプリングで最良点を記録

    Args:
        objective: パラメータ → スコア
        space: パラメータ空間
        budget: 評価回数の上限
        rng: 乱数
        target: 早期終了の閾値（Noneなら予算を使い切る）

    Returns:
        SearchResult（historyは評価ごとの最良スコア）
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    started = time.perf_counter()
    best_params, best_r = None, -math.inf
    history = []
    evals = 0
    for _ in range(budget):
        x = space.sample(rng)
        r = objective(x)
        evals += 1
        if r > best_r:
            best_params, best_r = x, float(r)
        history.append(best_r)
        if target is not None and best_r >= target:
            break
    success = target is not None and best_r >= target
    return SearchResult(best_params, best_r, evals, history, list(range(1, evals + 1)), success,
                        time.perf_counter() - started)


def results_row(method: str, goal: np.ndarray, defs: Sequence[SpecDef], success: bool,
                evals_used: int, best_r: float, wall_secs: float) -> Dict:
    """結果CSVの1行"""
    row = {"method": method}
    for d, v in zip(defs, goal):
        row[f"goal_{d.name}"] = float(v)
    row.update({"success": bool(success), "evals_used": int(evals_used),
                "best_r": float(best_r), "wall_secs": wall_secs})
    return row
