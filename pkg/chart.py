"""
チャート生成モジュール
Plotlyで学習曲線・デプロイ軌跡・FoM比較曲線を描画し、SVGで保存
"""
import logging
from pathlib import Path
from typing import Dict, Sequence

import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

logger = logging.getLogger(__name__)

COLORS = ['#2196F3', '#FF9800', '#26a69a', '#9C27B0', '#ef5350', '#607D8B']


def _band(fig: go.Figure, agg: pd.DataFrame, x: str, name: str, color: str,
          row: int, col: int = 1, show_legend: bool = True):
    """平均線と最小〜最大の帯"""
    fig.add_trace(
        go.Scatter(
            x=list(agg[x]) + list(agg[x])[::-1],
            y=list(agg['max']) + list(agg['min'])[::-1],
            fill='toself',
            fillcolor=color,
            opacity=0.2,
            line=dict(width=0),
            hoverinfo='skip',
            showlegend=False,
            name=f'{name} range'
        ),
        row=row, col=col
    )
    fig.add_trace(
        go.Scatter(
            x=agg[x],
            y=agg['mean'],
            mode='lines',
            name=name,
            line=dict(color=color, width=1.5),
            showlegend=show_legend
        ),
        row=row, col=col
    )


def create_training_chart(aggregates: Dict[str, pd.DataFrame], title: str) -> go.Figure:
    """
    学習曲線（シード平均 ± 範囲）

    Args:
        aggregates: 列名 → aggregate_seedsの出力（x列は episodes_cum）
        title: タイトル

    Returns:
        Plotly Figure
    """
    labels = {
        'mean_ep_reward': 'Mean episode reward',
        'mean_ep_len': 'Mean episode length',
        'deploy_acc': 'Deployment accuracy',
        'best_train_fom': 'Best FoM (training evaluator)',
        'policy_fom': 'Policy FoM (deployment evaluator)',
    }
    columns = [c for c in aggregates if not aggregates[c].empty]
    fig = make_subplots(
        rows=max(1, len(columns)), cols=1,
        shared_xaxes=True,
        vertical_spacing=0.06,
        subplot_titles=[labels.get(c, c) for c in columns]
    )
    for i, column in enumerate(columns, start=1):
        _band(fig, aggregates[column], 'episodes_cum', labels.get(column, column),
              COLORS[(i - 1) % len(COLORS)], row=i)

    if 'deploy_acc' in columns:
        row = columns.index('deploy_acc') + 1
        fig.update_yaxes(range=[0, 1.05], row=row, col=1)

    fig.update_layout(
        title=title,
        height=250 * max(1, len(columns)) + 100,
        template='plotly_white',
        showlegend=False
    )
    fig.update_xaxes(title_text='Episodes', row=max(1, len(columns)), col=1)
    return fig


def create_deployment_chart(trace: pd.DataFrame, spec_names: Sequence[str],
                            goal: Dict[str, float], title: str,
                            log_specs: Sequence[str] = ()) -> go.Figure:
    """
    デプロイ中の仕様の推移（目標は破線）

    Args:
        trace: step列と仕様列を持つトレース
        spec_names: 描画する仕様名
        goal: 仕様名 → 目標値
        title: タイトル
        log_specs: 対数軸で描く仕様名

    Returns:
        Plotly Figure
    """
    fig = make_subplots(
        rows=len(spec_names), cols=1,
        shared_xaxes=True,
        vertical_spacing=0.05,
        subplot_titles=list(spec_names)
    )
    for i, name in enumerate(spec_names, start=1):
        fig.add_trace(
            go.Scatter(
                x=trace['step'],
                y=trace[name],
                mode='lines+markers',
                name=name,
                line=dict(color=COLORS[(i - 1) % len(COLORS)], width=1.5),
                marker=dict(size=4)
            ),
            row=i, col=1
        )
        # 目標値
        fig.add_hline(y=goal[name], line_dash="dash", line_color="red", row=i, col=1)
        if name in log_specs:
            fig.update_yaxes(type='log', row=i, col=1)

    fig.update_layout(
        title=title,
        height=200 * len(spec_names) + 100,
        template='plotly_white',
        showlegend=False
    )
    fig.update_xaxes(title_text='Step', row=len(spec_names), col=1)
    return fig


def create_fom_chart(curves: Dict[str, pd.DataFrame], x_label: str, title: str) -> go.Figure:
    """
    手法ごとの最良FoMの推移

    Args:
        curves: 手法名 → x, mean, min, max 列のDataFrame（x列は 'x'）
        x_label: 横軸ラベル
        title: タイトル

    Returns:
        Plotly Figure
    """
    fig = make_subplots(rows=1, cols=1)
    for i, (method, agg) in enumerate(curves.items()):
        if agg.empty:
            continue
        _band(fig, agg, 'x', method, COLORS[i % len(COLORS)], row=1)
    fig.update_layout(
        title=title,
        height=450,
        template='plotly_white',
        showlegend=True,
        legend=dict(yanchor="bottom", y=0.01, xanchor="right", x=0.99)
    )
    fig.update_xaxes(title_text=x_label)
    fig.update_yaxes(title_text='FoM (P + 3E)')
    return fig


def save_figure(fig: go.Figure, path) -> Path:
    """
    SVGで保存（静的出力ができなければHTMLに切り替えて警告）

    Returns:
        書き出したファイルのパス
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fig.write_image(str(path), format='svg')
        return path
    except Exception as e:
        fallback = path.with_suffix('.html')
        logger.warning("static SVG export unavailable (%s); writing %s instead", e, fallback)
        fig.write_html(str(fallback), include_plotlyjs='cdn')
        return fallback
