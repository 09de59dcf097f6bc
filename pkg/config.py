"""
実行設定モジュール
TOML設定ファイルの読み込み・型変換・検証・コマンドライン上書き
"""
import logging
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import joblib
import toml

from baselines import GaConfig
from env import CIRCUITS, Fidelity, SpecDef, circuit_setup, CircuitSetup
from policy import PolicyConfig, SpecInput, Variant
from ppo import PPOConfig
from storage import default_output_dir

logger = logging.getLogger(__name__)

PACKAGE_DIR = Path(__file__).resolve().parent
INITIAL_STATES = ("midpoint", "netlist")


class ConfigError(ValueError):
    """設定エラー（フィールドのパスを含む）"""


@dataclass
class RunSection:
    circuit: str = "opamp"
    netlist: str = ""
    seeds: List[int] = field(default_factory=lambda: [0])
    output_dir: str = ""
    record_wall_time: bool = False
    jobs: int = 1


@dataclass
class EnvSection:
    train_fidelity: str = ""
    deploy_fidelity: str = ""
    max_episode_len: int = 0
    bonus: float = 10.0
    initial_state: str = "midpoint"
    generalization_steps: int = 100
    fom_refs: Dict[str, float] = field(default_factory=lambda: {"P": 2.0, "E": 0.5})


@dataclass
class CompareSection:
    n_goals: int = 30
    checkpoint: str = ""
    random_budget: int = 1000
    max_steps: int = 0


@dataclass
class FomSection:
    eval_budget: int = 1000
    variants: List[str] = field(default_factory=lambda: ["gcn_fc", "gat_fc"])


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    env: EnvSection = field(default_factory=EnvSection)
    specs: Dict[str, Dict[str, float]] = field(default_factory=dict)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    ga: GaConfig = field(default_factory=GaConfig)
    compare: CompareSection = field(default_factory=CompareSection)
    fom: FomSection = field(default_factory=FomSection)
    source: Optional[str] = None

    def spec_defs(self) -> Tuple[SpecDef, ...]:
        """[specs.X] の上書きを反映した仕様定義"""
        defs = []
        for d in CIRCUITS[self.run.circuit].specs:
            override = self.specs.get(d.name, {})
            defs.append(SpecDef(d.name, d.direction, d.unit,
                                float(override.get("lo", d.sample_lo)),
                                float(override.get("hi", d.sample_hi)),
                                d.log_sampled))
        return tuple(defs)

    def circuit_setup(self) -> CircuitSetup:
        text = Path(self.run.netlist).read_text(encoding="utf-8")
        return circuit_setup(self.run.circuit, text, self.spec_defs())

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop("source")
        return data

    def config_hash(self) -> str:
        return joblib.hash(self.to_dict())


SECTIONS = {
    "run": RunSection,
    "env": EnvSection,
    "policy": PolicyConfig,
    "ppo": PPOConfig,
    "ga": GaConfig,
    "compare": CompareSection,
    "fom": FomSection,
}


# ============================================
# 型変換
# ============================================

def _coerce(value: Any, typ, path: str):
    """注釈の型に合わせて値を変換"""
    origin = typing.get_origin(typ)
    if origin in (list, List):
        (item,) = typing.get_args(typ)
        if not isinstance(value, (list, tuple)):
            value = [value]
        return [_coerce(v, item, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin in (dict, Dict):
        _, item = typing.get_args(typ)
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a table, got {value!r}")
        return {str(k): _coerce(v, item, f"{path}.{k}") for k, v in value.items()}
    if typ is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{path}: expected true/false, got {value!r}")
    if typ is int:
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if typ is float:
        if isinstance(value, bool):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
    if typ is str:
        return str(value)
    return value


def _build_section(cls, data: Dict[str, Any], section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{section}] must be a table")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key '{key}' in [{section}]")
    kwargs = {k: _coerce(v, hints[k], f"{section}.{k}") for k, v in data.items()}
    return cls(**kwargs)


def _parse_value(text: str):
    """TOMLリテラルとして解釈し、失敗したら文字列"""
    try:
        return toml.loads(f"v = {text}")["v"]
    except toml.TomlDecodeError:
        return text


def apply_override(raw: Dict[str, Any], assignment: str):
    """`section.key=value` を生の設定辞書に反映"""
    if "=" not in assignment:
        raise ConfigError(f"override '{assignment}' must look like section.key=value")
    dotted, value = assignment.split("=", 1)
    parts = dotted.strip().split(".")
    if len(parts) < 2:
        raise ConfigError(f"override '{dotted}' must name section.key")
    node = raw
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override '{dotted}': '{part}' is not a table")
    node[parts[-1]] = _parse_value(value.strip())


# ============================================
# 読み込み
# ============================================

def _resolve_netlist(path: str, circuit: str, base_dir: Optional[Path]) -> str:
    """相対パスは設定ファイルのディレクトリ → カレントディレクトリの順で解決"""
    if not path:
        return str(PACKAGE_DIR / CIRCUITS[circuit].netlist)
    candidate = Path(path)
    if candidate.is_absolute():
        return str(candidate)
    if base_dir is not None and (base_dir / candidate).exists():
        return str(base_dir / candidate)
    return str(Path.cwd() / candidate)


def build_config(raw: Dict[str, Any], source: Optional[str] = None) -> RunConfig:
    """
    生の設定辞書からRunConfigを構築して検証

    Args:
        raw: TOMLを読み込んだ辞書
        source: 設定ファイルのパス（相対パス解決用）

    Returns:
        RunConfig
    """
    unknown = set(raw) - set(SECTIONS) - {"specs"}
    if unknown:
        raise ConfigError(f"unknown section(s) {sorted('[' + s + ']' for s in unknown)}")

    sections = {name: _build_section(cls, raw.get(name, {}), name)
                for name, cls in SECTIONS.items()}
    specs = raw.get("specs", {})
    if not isinstance(specs, dict):
        raise ConfigError("[specs] must contain [specs.<NAME>] tables")
    config = RunConfig(specs={}, source=source, **sections)

    circuit = config.run.circuit
    if circuit not in CIRCUITS:
        raise ConfigError(f"run.circuit: unknown circuit '{circuit}' (expected {sorted(CIRCUITS)})")
    spec_names = [d.name for d in CIRCUITS[circuit].specs]
    for name, table in specs.items():
        if name not in spec_names:
            raise ConfigError(f"unknown spec '[specs.{name}]' for {circuit} (expected {spec_names})")
        for key in table:
            if key not in ("lo", "hi"):
                raise ConfigError(f"unknown key '{key}' in [specs.{name}]")
        config.specs[name] = {k: _coerce(v, float, f"specs.{name}.{k}") for k, v in table.items()}

    base_dir = Path(source).resolve().parent if source else None
    config.run.netlist = _resolve_netlist(config.run.netlist, circuit, base_dir)
    config.run.output_dir = config.run.output_dir or default_output_dir()
    defaults = CIRCUITS[circuit]
    config.env.train_fidelity = config.env.train_fidelity or defaults.train_fidelity
    config.env.deploy_fidelity = config.env.deploy_fidelity or defaults.deploy_fidelity
    config.env.max_episode_len = config.env.max_episode_len or defaults.max_episode_len
    if "episodes_total" not in raw.get("ppo", {}):
        config.ppo.episodes_total = defaults.episodes_total
    validate(config)
    return config


def validate(config: RunConfig):
    """値の検証（失敗したらConfigError）"""
    if not Path(config.run.netlist).exists():
        raise ConfigError(f"run.netlist: file not found: {config.run.netlist}")
    if not config.run.seeds:
        raise ConfigError("run.seeds: at least one seed is required")
    negative = [s for s in config.run.seeds if s < 0]
    if negative:
        raise ConfigError(f"run.seeds: seeds must be >= 0 (got {negative})")
    if config.run.jobs < 1:
        raise ConfigError("run.jobs: must be >= 1")
    for key in ("train_fidelity", "deploy_fidelity"):
        if getattr(config.env, key) not in (Fidelity.COARSE, Fidelity.FINE):
            raise ConfigError(f"env.{key}: expected 'coarse' or 'fine'")
    if config.env.max_episode_len < 1:
        raise ConfigError("env.max_episode_len: must be >= 1")
    if config.env.initial_state not in INITIAL_STATES:
        raise ConfigError(f"env.initial_state: expected one of {INITIAL_STATES}")
    if config.env.generalization_steps < 1:
        raise ConfigError("env.generalization_steps: must be >= 1")
    if config.policy.variant not in Variant.ALL:
        raise ConfigError(f"policy.variant: expected one of {Variant.ALL}")
    if config.policy.spec_input not in SpecInput.ALL:
        raise ConfigError(f"policy.spec_input: expected one of {SpecInput.ALL}")
    if config.policy.gnn_layers < 1:
        raise ConfigError("policy.gnn_layers: must be >= 1")
    for variant in config.fom.variants:
        if variant not in Variant.ALL:
            raise ConfigError(f"fom.variants: unknown variant '{variant}'")
    if config.fom.eval_budget < 1:
        raise ConfigError("fom.eval_budget: must be >= 1")
    if config.compare.n_goals < 1:
        raise ConfigError("compare.n_goals: must be >= 1")
    if config.compare.random_budget < 1:
        raise ConfigError("compare.random_budget: must be >= 1")
    for section, cfg in (("ppo", config.ppo), ("ga", config.ga)):
        for name, reason in cfg.validate():
            raise ConfigError(f"{section}.{name}: {reason}")
    try:
        config.spec_defs()
    except ValueError as e:
        raise ConfigError(f"specs: {e}")


def load_config(path: Optional[str] = None, overrides: Optional[List[str]] = None,
                seed: Optional[int] = None, episodes: Optional[int] = None,
                out: Optional[str] = None) -> RunConfig:
    """
    設定ファイルを読み込み、上書きを適用

    Args:
        path: TOMLファイル（Noneなら既定値のみ）
        overrides: `section.key=value` のリスト
        seed: シードリストを置き換える単一シード
        episodes: ppo.episodes_total の上書き
        out: run.output_dir の上書き

    Returns:
        検証済みのRunConfig
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        try:
            raw = toml.load(path)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except toml.TomlDecodeError as e:
            raise ConfigError(f"{path}: {e}")
    for assignment in overrides or []:
        apply_override(raw, assignment)
    if seed is not None:
        raw.setdefault("run", {})["seeds"] = [seed]
    if episodes is not None:
        raw.setdefault("ppo", {})["episodes_total"] = episodes
    if out is not None:
        raw.setdefault("run", {})["output_dir"] = out
    return build_config(raw, path)


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    """チェックポイントに保存された設定から復元（netlistの存在は問わない）"""
    raw = {k: v for k, v in data.items() if k in SECTIONS or k == "specs"}
    sections = {name: _build_section(cls, raw.get(name, {}), name)
                for name, cls in SECTIONS.items()}
    return RunConfig(specs=dict(raw.get("specs", {})), **sections)
