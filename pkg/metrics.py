"""
指標計算モジュール
移動平均・シード間集計・手法比較の要約表
"""
import math
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd


def moving_average(series: pd.Series, window: int) -> pd.Series:
    """
    単純移動平均（先頭は揃うまで部分平均）

    Args:
        series: 値の系列
        window: 窓幅

    Returns:
        移動平均のSeries
    """
    return series.rolling(window=max(1, int(window)), min_periods=1).mean()


def batches_per_window(window_episodes: int, episodes_per_batch: int) -> int:
    """エピソード数の窓をバッチ数に換算"""
    return max(1, int(math.ceil(window_episodes / max(1, episodes_per_batch))))


def reward_trend(metrics: pd.DataFrame, window_episodes: int = 100) -> Dict[str, float]:
    """
    学習初期と終盤のエピソード報酬の平均を比較

    Args:
        metrics: メトリクスCSVのDataFrame
        window_episodes: 比較に使うエピソード数

    Returns:
        {"first": 初期平均, "last": 終盤平均, "improved": 改善したか}
    """
    episodes = metrics["episodes_cum"].diff().fillna(metrics["episodes_cum"]).to_numpy()
    rewards = metrics["mean_ep_reward"].to_numpy()

    def weighted(order) -> float:
        total, count = 0.0, 0.0
        for i in order:
            if np.isnan(rewards[i]):
                continue
            take = min(episodes[i], window_episodes - count)
            if take <= 0:
                break
            total += rewards[i] * take
            count += take
        return total / count if count else math.nan

    first = weighted(range(len(rewards)))
    last = weighted(reversed(range(len(rewards))))
    return {"first": first, "last": last, "improved": bool(last > first)}


def aggregate_seeds(frames: Sequence[pd.DataFrame], x: str, column: str) -> pd.DataFrame:
    """
    シードごとの曲線をx列で揃えて平均・最小・最大を計算

    Args:
        frames: シードごとのDataFrame
        x: 横軸の列名
        column: 集計する列名

    Returns:
        x, mean, min, max 列のDataFrame
    """
    series = [f.set_index(x)[column].rename(i) for i, f in enumerate(frames) if column in f]
    if not series:
        return pd.DataFrame(columns=[x, "mean", "min", "max"])
    wide = pd.concat(series, axis=1).sort_index()
    out = pd.DataFrame({
        "mean": wide.mean(axis=1),
        "min": wide.min(axis=1),
        "max": wide.max(axis=1),
    })
    out.index.name = x
    return out.dropna(how="all").reset_index()


def summarize_methods(results: pd.DataFrame, include_wall: bool = False) -> pd.DataFrame:
    """
    手法ごとの設計精度と成功時の平均ステップ（評価回数）

    Args:
        results: method, success, evals_used, wall_secs 列を持つ結果
        include_wall: 平均実行時間の列を含めるか

    Returns:
        method, design_accuracy, mean_steps[, wall_secs] の表
    """
    rows = []
    for method, group in results.groupby("method", sort=False):
        success = group["success"].astype(bool)
        row = {
            "method": method,
            "design_accuracy": float(success.mean()),
            "mean_steps": float(group.loc[success, "evals_used"].mean()) if success.any() else math.nan,
        }
        if include_wall:
            row["wall_secs"] = float(group["wall_secs"].mean())
        rows.append(row)
    return pd.DataFrame(rows)


def fom_summary(results: pd.DataFrame) -> pd.DataFrame:
    """手法ごとの最終FoMの中央値・最良値と最大評価回数"""
    rows = []
    for method, group in results.groupby("method", sort=False):
        rows.append({
            "method": method,
            "median_fom": float(group["final_fom"].median()),
            "best_fom": float(group["final_fom"].max()),
            "median_last_fom": float(group["last_fom"].median()) if "last_fom" in group else math.nan,
            "max_evals_used": int(group["evals_used"].max()),
        })
    return pd.DataFrame(rows)


def running_max(values: List[float]) -> List[float]:
    return list(np.maximum.accumulate(np.asarray(values, dtype=float)))
