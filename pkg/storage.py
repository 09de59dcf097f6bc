"""
永続化モジュール
出力ディレクトリ・JSON（チェックポイント）・CSV（メトリクス・トレース）の読み書き
"""
import json
import logging
import os
from pathlib import Path
from typing import Dict, List, Optional, Union

import pandas as pd

logger = logging.getLogger(__name__)


# ============================================
# 設定
# ============================================

OUTPUT_ENV_VAR = "CIRCUIT_SIZER_OUT"
DEFAULT_OUTPUT_DIR = "runs"

CHECKPOINT_FILE = "checkpoint.json"
PARTIAL_CHECKPOINT_FILE = "checkpoint.partial.json"
METRICS_FILE = "metrics.csv"

# 17桁でfloat64を正確に復元できる
CSV_FLOAT_FORMAT = "%.17g"


def default_output_dir() -> str:
    """環境変数があればそれを、なければ runs"""
    return os.getenv(OUTPUT_ENV_VAR) or DEFAULT_OUTPUT_DIR


def ensure_dir(path: Union[str, Path]) -> Path:
    """ディレクトリを作成"""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def seed_dir(output_dir: Union[str, Path], seed: int) -> Path:
    """シードごとの出力ディレクトリ"""
    return ensure_dir(Path(output_dir) / f"seed_{seed}")


# ============================================
# JSON
# ============================================

def load_json_file(filepath: Union[str, Path], default=None):
    """JSONファイルを読み込み（存在しなければdefault）"""
    filepath = Path(filepath)
    if not filepath.exists():
        return default
    with open(filepath, "r", encoding="utf-8") as f:
        return json.load(f)


def save_json_file(filepath: Union[str, Path], data):
    """JSONファイルに保存"""
    filepath = Path(filepath)
    ensure_dir(filepath.parent)
    tmp = filepath.with_suffix(filepath.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(data, f, ensure_ascii=False, indent=1)
    os.replace(tmp, filepath)
    logger.debug("wrote %s", filepath)


# ============================================
# CSV
# ============================================

def write_csv(df: pd.DataFrame, filepath: Union[str, Path]) -> Path:
    """
    CSVに保存（浮動小数は%.17g、NaNは空欄）

    Args:
        df: 保存するDataFrame
        filepath: 保存先

    Returns:
        保存先パス
    """
    filepath = Path(filepath)
    ensure_dir(filepath.parent)
    df.to_csv(filepath, index=False, float_format=CSV_FLOAT_FORMAT, na_rep="",
              lineterminator="\n")
    return filepath


def write_records(records: List[Dict], filepath: Union[str, Path],
                  columns: Optional[List[str]] = None) -> Path:
    """辞書のリストをCSVに保存"""
    df = pd.DataFrame.from_records(records, columns=columns)
    return write_csv(df, filepath)


def read_csv(filepath: Union[str, Path]) -> pd.DataFrame:
    """write_csvで書いたCSVを読み込み（空欄はNaN）"""
    return pd.read_csv(filepath, keep_default_na=False, na_values=[""],
                       float_precision="round_trip")
