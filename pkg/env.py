"""
回路設計環境モジュール
パラメータ空間・解析的評価器（オペアンプ / RFパワーアンプ）・報酬・エピソード環境
"""
import logging
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from netlist import CircuitGraph, Netlist, build_graph, node_features, parse_netlist

logger = logging.getLogger(__name__)


class Direction:
    """仕様の最適化方向"""
    MAXIMIZE = "maximize"
    MINIMIZE = "minimize"


class Action:
    """パラメータごとの行動（行列の列インデックス）"""
    DEC = 0
    KEEP = 1
    INC = 2
    N_CHOICES = 3


class Fidelity:
    """評価器の精度"""
    COARSE = "coarse"
    FINE = "fine"


class RewardMode:
    P2S = "p2s"
    FOM = "fom"


class SpecError(ValueError):
    """仕様ベクトルのエラー（非正値・長さ不一致）"""


class EvaluatorError(ValueError):
    """評価器のエラー（範囲外パラメータ・非有限出力）"""


@dataclass(frozen=True)
class SpecDef:
    """仕様1個の定義"""
    name: str
    direction: str
    unit: str
    sample_lo: float
    sample_hi: float
    log_sampled: bool = False

    def __post_init__(self):
        if not 0 < self.sample_lo < self.sample_hi:
            raise SpecError(
                f"spec {self.name}: need 0 < sample_lo < sample_hi "
                f"(got {self.sample_lo}, {self.sample_hi})")
        if self.direction not in (Direction.MAXIMIZE, Direction.MINIMIZE):
            raise SpecError(f"spec {self.name}: unknown direction '{self.direction}'")


OPAMP_SPECS = (
    SpecDef("G", Direction.MAXIMIZE, "V/V", 300.0, 500.0),
    SpecDef("B", Direction.MAXIMIZE, "Hz", 1e6, 2.5e7, log_sampled=True),
    SpecDef("PM", Direction.MAXIMIZE, "deg", 55.0, 60.0),
    SpecDef("P", Direction.MINIMIZE, "W", 1e-4, 1e-2, log_sampled=True),
)

RFPA_SPECS = (
    SpecDef("P", Direction.MAXIMIZE, "W", 2.0, 3.0),
    SpecDef("E", Direction.MAXIMIZE, "", 0.5, 0.6),
)

# FoM = P + 3·E、正規化報酬の基準値
FOM_WEIGHTS = {"P": 1.0, "E": 3.0}
FOM_REFS = {"P": 2.0, "E": 0.5}

# 汎化デプロイ用のゴールプリセット
GOAL_PRESETS = {
    "opamp-demo": {"G": 350.0, "B": 1.8e7, "PM": 55.0, "P": 4e-3},
    "opamp-unseen": {"G": 225.0, "B": 2.6e7, "PM": 65.0, "P": 6e-3},
    "rfpa-demo": {"P": 2.5, "E": 0.57},
    "rfpa-unseen": {"P": 2.9, "E": 0.69},
}

# 境界判定の許容誤差
BOUND_TOL = 1e-9


# ============================================
# パラメータ空間
# ============================================

@dataclass
class ParamSpace:
    """長さMのパラメータベクトルの境界・刻み幅"""
    names: Tuple[Tuple[str, str], ...]
    lo: np.ndarray
    hi: np.ndarray
    step: np.ndarray
    integer: np.ndarray
    init: np.ndarray

    @classmethod
    def from_netlist(cls, netlist: Netlist) -> "ParamSpace":
        specs = netlist.params
        return cls(
            names=tuple(p.key for p in specs),
            lo=np.array([p.lo for p in specs]),
            hi=np.array([p.hi for p in specs]),
            step=np.array([p.step for p in specs]),
            integer=np.array([p.integer for p in specs]),
            init=np.array([p.init for p in specs]),
        )

    @property
    def size(self) -> int:
        return len(self.names)

    def index(self, device: str, param: str) -> int:
        return self.names.index((device, param))

    def clamp(self, values: np.ndarray) -> np.ndarray:
        values = np.clip(values, self.lo, self.hi)
        return np.where(self.integer, np.round(values), values)

    def midpoint(self) -> np.ndarray:
        """境界の中点（フィンガー数は切り捨て）"""
        mid = (self.lo + self.hi) / 2.0
        return np.where(self.integer, np.floor(mid), mid)

    def initial(self, mode: str = "midpoint") -> np.ndarray:
        if mode == "midpoint":
            return self.midpoint()
        if mode == "netlist":
            return self.init.copy()
        raise ValueError(f"unknown initial state '{mode}'")

    def sample(self, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
        """境界内で一様サンプリング（整数パラメータは丸め）"""
        shape = (self.size,) if n is None else (n, self.size)
        values = rng.uniform(self.lo, self.hi, size=shape)
        return self.clamp(values)

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.lo) / (self.hi - self.lo)

    def check(self, values: np.ndarray):
        """範囲外ならEvaluatorError"""
        values = np.asarray(values, dtype=float)
        if values.shape[-1] != self.size:
            raise EvaluatorError(f"params length {values.shape[-1]} != M={self.size}")
        if not np.all(np.isfinite(values)):
            raise EvaluatorError("non-finite parameter value")
        tol = BOUND_TOL * np.maximum(1.0, np.abs(self.hi))
        low = values < self.lo - tol
        high = values > self.hi + tol
        if np.any(low | high):
            bad = np.argwhere(np.atleast_2d(low | high))[0][-1]
            device, pname = self.names[bad]
            raise EvaluatorError(
                f"parameter {device}.{pname} outside [{self.lo[bad]}, {self.hi[bad]}]")


def apply_action(params: np.ndarray, action: Sequence[int], space: ParamSpace) -> np.ndarray:
    """
    行動を適用してパラメータを更新

    Args:
        params: 現在のパラメータ
        action: 各パラメータの選択（DEC/KEEP/INC）
        space: パラメータ空間

    Returns:
        更新後のパラメータ（境界でクランプ）
    """
    action = np.asarray(action, dtype=int)
    if action.shape != (space.size,):
        raise ValueError(f"action length {action.shape} != M={space.size}")
    delta = (action - Action.KEEP) * space.step
    return space.clamp(np.asarray(params, dtype=float) + delta)


# ============================================
# 報酬
# ============================================

def _check_specs(values: np.ndarray, defs: Sequence[SpecDef], what: str) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.shape[-1] != len(defs):
        raise SpecError(f"{what}: length {values.shape[-1]} != {len(defs)} specs")
    if not np.all(np.isfinite(values)) or np.any(values <= 0):
        raise SpecError(f"{what}: spec values must be positive and finite ({values})")
    return values


def reward_terms(g_i: np.ndarray, g_star: np.ndarray, defs: Sequence[SpecDef]) -> np.ndarray:
    """
    仕様ごとの正規化差分（0でクリップ）

    最大化: min((g−g*)/(g+g*), 0)、最小化: min((g*−g)/(g*+g), 0)
    """
    g_i = _check_specs(g_i, defs, "intermediate specs")
    g_star = _check_specs(g_star, defs, "goal specs")
    sign = np.array([1.0 if d.direction == Direction.MAXIMIZE else -1.0 for d in defs])
    terms = sign * (g_i - g_star) / (g_i + g_star)
    return np.minimum(terms, 0.0)


def reward(g_i: np.ndarray, g_star: np.ndarray, defs: Sequence[SpecDef],
           bonus: float = 10.0) -> float:
    """
    ステップ報酬

    Args:
        g_i: 中間仕様
        g_star: 目標仕様
        defs: 仕様定義
        bonus: 目標達成時の報酬（置き換え）

    Returns:
        r<0ならr、全仕様達成ならbonus
    """
    r = float(np.sum(reward_terms(g_i, g_star, defs)))
    return r if r < 0 else float(bonus)


def goal_met(g_i: np.ndarray, g_star: np.ndarray, defs: Sequence[SpecDef]) -> bool:
    return float(np.sum(reward_terms(g_i, g_star, defs))) >= 0


def dominance_matrix(designs: np.ndarray, goals: np.ndarray,
                     defs: Sequence[SpecDef]) -> np.ndarray:
    """
    designs (D×N) が goals (K×N) を満たすかの K×D ブール行列
    """
    sign = np.array([1.0 if d.direction == Direction.MAXIMIZE else -1.0 for d in defs])
    d = designs[None, :, :] * sign
    g = goals[:, None, :] * sign
    return np.all(d >= g, axis=2)


def fom_value(specs: np.ndarray, defs: Sequence[SpecDef] = RFPA_SPECS) -> float:
    """FoM = P + 3·E（ログ表示用）"""
    specs = np.asarray(specs, dtype=float)
    return float(sum(FOM_WEIGHTS[d.name] * specs[..., i] for i, d in enumerate(defs)))


def fom_reward(specs: np.ndarray, refs: np.ndarray,
               defs: Sequence[SpecDef] = RFPA_SPECS) -> float:
    """
    FoM用の正規化報酬（クリップ・ボーナスなし）

    Args:
        specs: 中間仕様 (P, E)
        refs: 基準値 (P_r, E_r)
        defs: 仕様定義

    Returns:
        Σ w·(g−g_r)/(g+g_r)
    """
    specs = _check_specs(specs, defs, "specs")
    refs = _check_specs(refs, defs, "refs")
    weights = np.array([FOM_WEIGHTS[d.name] for d in defs])
    return float(np.sum(weights * (specs - refs) / (specs + refs)))


def sample_goal(rng: np.random.Generator, defs: Sequence[SpecDef]) -> np.ndarray:
    """
    サンプリング範囲から目標仕様を抽出（log_sampledは対数一様）
    """
    goal = np.empty(len(defs))
    for i, d in enumerate(defs):
        if d.log_sampled:
            goal[i] = math.exp(rng.uniform(math.log(d.sample_lo), math.log(d.sample_hi)))
        else:
            goal[i] = rng.uniform(d.sample_lo, d.sample_hi)
    return goal


def normalize_specs(values: np.ndarray, defs: Sequence[SpecDef]) -> np.ndarray:
    """サンプリング範囲で正規化（log_sampledは対数、[-5, 5]にクリップ）"""
    values = np.asarray(values, dtype=float)
    out = np.empty(len(defs))
    for i, d in enumerate(defs):
        v = max(values[i], 1e-300)
        if d.log_sampled:
            lo, hi, v = math.log(d.sample_lo), math.log(d.sample_hi), math.log(v)
        else:
            lo, hi = d.sample_lo, d.sample_hi
        out[i] = (v - lo) / (hi - lo)
    return np.clip(out, -5.0, 5.0)


def out_of_range_specs(goal: np.ndarray, defs: Sequence[SpecDef]) -> List[str]:
    """サンプリング範囲外の仕様名"""
    return [d.name for d, v in zip(defs, goal) if not d.sample_lo <= v <= d.sample_hi]


def goal_from_mapping(values: Dict[str, float], defs: Sequence[SpecDef]) -> np.ndarray:
    """{仕様名: 値} → 仕様ベクトル"""
    names = [d.name for d in defs]
    unknown = set(values) - set(names)
    if unknown:
        raise SpecError(f"unknown spec(s) {sorted(unknown)}; expected {names}")
    missing = [n for n in names if n not in values]
    if missing:
        raise SpecError(f"missing spec(s) {missing}")
    return _check_specs(np.array([float(values[n]) for n in names]), defs, "goal")


# ============================================
# 評価器
# ============================================

class OpAmpEvaluator:
    """
    2段オペアンプの一次モデル

    G = [gm1/((λp+λn)I1)]·[gm6/((λp+λn)I6)]、B = gm1/(2πCc)、
    PM = 90° − atan(B/p2) − atan(B/z)、P = VDD·(I_tail + I6)
    """

    K_I = 0.5e-6      # A / (um·finger)
    K_N = 2e-6        # A/V^2 / (um·finger)
    LAMBDA_P = 0.1
    LAMBDA_N = 0.1
    VDD = 1.0
    C_L = 1e-12
    PM_FLOOR = 0.1

    specs = OPAMP_SPECS

    def __init__(self, space: ParamSpace):
        self.space = space
        idx = space.index
        self._m1 = (idx("M1", "W"), idx("M1", "F"))
        self._m5 = (idx("M5", "W"), idx("M5", "F"))
        self._m6 = (idx("M6", "W"), idx("M6", "F"))
        self._m7 = (idx("M7", "W"), idx("M7", "F"))
        self._cc = idx("CC", "C")

    def _size(self, params: np.ndarray, pair: Tuple[int, int]) -> np.ndarray:
        return params[..., pair[0]] * params[..., pair[1]]

    def evaluate_batch(self, params: np.ndarray) -> np.ndarray:
        """
        バッチ評価

        Args:
            params: (..., M) のパラメータ

        Returns:
            (..., 4) の仕様 [G, B, PM, P]
        """
        params = np.asarray(params, dtype=float)
        self.space.check(params)

        i_tail = self.K_I * self._size(params, self._m5)
        i1 = i_tail / 2.0
        i6 = self.K_I * self._size(params, self._m7)
        gm1 = np.sqrt(2.0 * self.K_N * self._size(params, self._m1) * i1)
        gm6 = np.sqrt(2.0 * self.K_N * self._size(params, self._m6) * i6)
        lam = self.LAMBDA_P + self.LAMBDA_N
        gain = (gm1 / (lam * i1)) * (gm6 / (lam * i6))

        cc = params[..., self._cc] * 1e-12
        bandwidth = gm1 / (2.0 * np.pi * cc)
        p2 = gm6 / (2.0 * np.pi * self.C_L)
        z = gm6 / (2.0 * np.pi * cc)
        pm = 90.0 - np.degrees(np.arctan(bandwidth / p2)) - np.degrees(np.arctan(bandwidth / z))
        pm = np.maximum(pm, self.PM_FLOOR)
        power = self.VDD * (i_tail + i6)

        out = np.stack([gain, bandwidth, pm, power], axis=-1)
        if not np.all(np.isfinite(out)) or np.any(out <= 0):
            raise EvaluatorError(f"op-amp model produced invalid specs {out}")
        return out

    def __call__(self, params: np.ndarray) -> np.ndarray:
        return self.evaluate_batch(np.asarray(params, dtype=float))


class RfPaEvaluator:
    """
    RFパワーアンプの挙動モデル（Fine / Coarse の2精度）

    Fine: P = P_max(1−e^{−a·S_o})·σ(S_d/S_o)、E = E_max·exp(−b·ln²(S_d/(ρS_o)))
    Coarse: Fineに[0.9, 1.1]の滑らかな決定論的摂動を掛けたもの
    """

    P_MAX = 4.0
    E_MAX = 0.75
    A = 3e-3
    B = 2.0
    RHO = 3.0
    COARSE_SPREAD = 0.1
    N_SINUSOIDS = 4

    specs = RFPA_SPECS
    output_device = "M1"

    def __init__(self, space: ParamSpace, fidelity: str = Fidelity.FINE):
        if fidelity not in (Fidelity.COARSE, Fidelity.FINE):
            raise ValueError(f"unknown fidelity '{fidelity}'")
        self.space = space
        self.fidelity = fidelity
        devices = []
        for device, _ in space.names:
            if device not in devices:
                devices.append(device)
        if self.output_device not in devices:
            raise EvaluatorError("RF PA netlist needs an output device 'M1'")
        self._out = (space.index(self.output_device, "W"), space.index(self.output_device, "F"))
        self._drivers = [(space.index(d, "W"), space.index(d, "F"))
                         for d in devices if d != self.output_device]
        self._perturbations = [self._make_perturbation(d.name) for d in self.specs]

    def _make_perturbation(self, spec_name: str):
        """仕様名のCRC32で固定した低周波正弦波の和（|s| ≤ 1）"""
        rng = np.random.default_rng(zlib.crc32(spec_name.encode("utf-8")))
        directions = rng.dirichlet(np.ones(self.space.size), size=self.N_SINUSOIDS)
        freqs = rng.uniform(0.5, 1.5, size=self.N_SINUSOIDS)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=self.N_SINUSOIDS)
        amps = rng.normal(size=self.N_SINUSOIDS)
        amps = amps / np.sum(np.abs(amps))
        return directions, freqs, phases, amps

    def _perturbation(self, params: np.ndarray, k: int) -> np.ndarray:
        directions, freqs, phases, amps = self._perturbations[k]
        z = self.space.normalize(params) @ directions.T
        return np.sum(amps * np.sin(2.0 * np.pi * freqs * z + phases), axis=-1)

    def evaluate_batch(self, params: np.ndarray) -> np.ndarray:
        params = np.asarray(params, dtype=float)
        self.space.check(params)

        s_o = params[..., self._out[0]] * params[..., self._out[1]]
        s_d = sum(params[..., w] * params[..., f] for w, f in self._drivers)
        ratio = s_d / s_o
        drive = 1.0 - np.exp(-2.0 * ratio / self.RHO)
        power = self.P_MAX * (1.0 - np.exp(-self.A * s_o)) * drive
        eff = self.E_MAX * np.exp(-self.B * np.log(ratio / self.RHO) ** 2)
        out = np.stack([power, eff], axis=-1)

        if self.fidelity == Fidelity.COARSE:
            scale = np.stack([1.0 + self.COARSE_SPREAD * self._perturbation(params, k)
                              for k in range(len(self.specs))], axis=-1)
            out = out * scale

        if not np.all(np.isfinite(out)) or np.any(out <= 0):
            raise EvaluatorError(f"RF PA model produced invalid specs {out}")
        return out

    def __call__(self, params: np.ndarray) -> np.ndarray:
        return self.evaluate_batch(np.asarray(params, dtype=float))


def opamp_evaluate(params: np.ndarray, space: ParamSpace) -> np.ndarray:
    return OpAmpEvaluator(space)(params)


def rfpa_evaluate(params: np.ndarray, space: ParamSpace,
                  fidelity: str = Fidelity.FINE) -> np.ndarray:
    return RfPaEvaluator(space, fidelity)(params)


@dataclass(frozen=True)
class CircuitDef:
    """回路ファミリーごとの既定値"""
    name: str
    specs: Tuple[SpecDef, ...]
    netlist: str
    max_episode_len: int
    train_fidelity: str
    deploy_fidelity: str
    episodes_total: int


CIRCUITS = {
    "opamp": CircuitDef("opamp", OPAMP_SPECS, "netlists/opamp.net", 50,
                        Fidelity.FINE, Fidelity.FINE, 35000),
    "rfpa": CircuitDef("rfpa", RFPA_SPECS, "netlists/rfpa.net", 30,
                       Fidelity.COARSE, Fidelity.FINE, 3500),
}


def make_evaluator(circuit: str, space: ParamSpace, fidelity: str = Fidelity.FINE):
    """回路名から評価器を生成（オペアンプは精度の区別なし）"""
    if circuit == "opamp":
        return OpAmpEvaluator(space)
    if circuit == "rfpa":
        return RfPaEvaluator(space, fidelity)
    raise ValueError(f"unknown circuit '{circuit}'")


# ============================================
# エピソード環境
# ============================================

@dataclass
class EnvState:
    params: np.ndarray
    intermediate: np.ndarray
    goal: np.ndarray
    step_count: int = 0


@dataclass
class EpisodeResult:
    return_value: float
    steps_used: int
    success: bool
    trace: List[Dict] = field(default_factory=list)
    aborted: bool = False


@dataclass
class Observation:
    """方策への入力"""
    features: np.ndarray
    goal: np.ndarray
    intermediate: np.ndarray


class CircuitEnv:
    """
    目標条件付きの回路サイジング環境

    1エピソード = 初期状態から目標仕様へ向けて±Δxの行動を繰り返す。
    1インスタンスは同時に1エピソードのみ扱う。
    """

    def __init__(self, graph: CircuitGraph, defs: Sequence[SpecDef],
                 evaluator: Callable[[np.ndarray], np.ndarray],
                 max_episode_len: int, bonus: float = 10.0,
                 reward_mode: str = RewardMode.P2S,
                 fom_refs: Optional[np.ndarray] = None,
                 initial_state: str = "midpoint"):
        if max_episode_len < 1:
            raise ValueError("max_episode_len must be >= 1")
        self.graph = graph
        self.space = ParamSpace.from_netlist(graph.netlist)
        self.defs = tuple(defs)
        self.evaluator = evaluator
        self.max_episode_len = int(max_episode_len)
        self.bonus = float(bonus)
        self.reward_mode = reward_mode
        if fom_refs is None:
            fom_refs = np.array([FOM_REFS[d.name] for d in self.defs]) \
                if reward_mode == RewardMode.FOM else None
        self.fom_refs = fom_refs
        self.initial_state = initial_state
        self.state: Optional[EnvState] = None

    @property
    def n_params(self) -> int:
        return self.space.size

    def reset(self, goal: np.ndarray, params: Optional[np.ndarray] = None) -> EnvState:
        """初期状態（既定は境界の中点）で新しいエピソードを開始"""
        goal = _check_specs(goal, self.defs, "goal")
        if params is None:
            params = self.space.initial(self.initial_state)
        params = np.asarray(params, dtype=float)
        intermediate = self.evaluator(params)
        self.state = EnvState(params, intermediate, goal, 0)
        return self.state

    def compute_reward(self, specs: np.ndarray, goal: np.ndarray) -> float:
        if self.reward_mode == RewardMode.FOM:
            return fom_reward(specs, self.fom_refs, self.defs)
        return reward(specs, goal, self.defs, self.bonus)

    def step(self, action: Sequence[int]) -> Tuple[EnvState, float, bool]:
        """
        行動を1ステップ適用

        Args:
            action: 長さMの行動ベクトル

        Returns:
            (新しい状態, 報酬, 終了フラグ)
        """
        state = self.state
        if state is None:
            raise RuntimeError("reset() must be called before step()")
        if state.step_count >= self.max_episode_len:
            raise RuntimeError("episode already reached max_episode_len")

        params = apply_action(state.params, action, self.space)
        intermediate = self.evaluator(params)
        r = self.compute_reward(intermediate, state.goal)
        step_count = state.step_count + 1
        self.state = EnvState(params, intermediate, state.goal, step_count)

        reached = self.reward_mode == RewardMode.P2S and r == self.bonus
        done = reached or step_count >= self.max_episode_len
        return self.state, r, done

    def observe(self, state: Optional[EnvState] = None) -> Observation:
        state = state or self.state
        return Observation(
            features=node_features(self.graph, state.params),
            goal=normalize_specs(state.goal, self.defs),
            intermediate=normalize_specs(state.intermediate, self.defs),
        )


# ============================================
# 回路セットアップと乱数ストリーム
# ============================================

RNG_STREAMS = ("env", "policy-init", "sampler", "minibatch", "eval", "baseline")


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """実行シードと名前付きサブストリームから独立な乱数生成器を作る"""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])
    return np.random.default_rng(ss)


@dataclass
class CircuitSetup:
    """ネットリスト・グラフ・仕様定義・パラメータ空間の組"""
    name: str
    netlist_text: str
    graph: CircuitGraph
    defs: Tuple[SpecDef, ...]
    space: ParamSpace

    def evaluator(self, fidelity: str = Fidelity.FINE):
        return make_evaluator(self.name, self.space, fidelity)

    def make_env(self, fidelity: str = Fidelity.FINE, max_episode_len: Optional[int] = None,
                 bonus: float = 10.0, reward_mode: str = RewardMode.P2S,
                 fom_refs: Optional[np.ndarray] = None,
                 initial_state: str = "midpoint") -> CircuitEnv:
        if max_episode_len is None:
            max_episode_len = CIRCUITS[self.name].max_episode_len
        return CircuitEnv(self.graph, self.defs, self.evaluator(fidelity), max_episode_len,
                          bonus=bonus, reward_mode=reward_mode, fom_refs=fom_refs,
                          initial_state=initial_state)

    def describe(self) -> Dict:
        """チェックポイントに保存する回路情報"""
        return {
            "name": self.name,
            "netlist": self.netlist_text,
            "specs": [{"name": d.name, "direction": d.direction, "unit": d.unit,
                       "sample_lo": d.sample_lo, "sample_hi": d.sample_hi,
                       "log_sampled": d.log_sampled} for d in self.defs],
        }


def circuit_setup(name: str, netlist_text: str,
                  defs: Optional[Sequence[SpecDef]] = None) -> CircuitSetup:
    """
    回路名とネットリスト本文からセットアップを構築

    Args:
        name: opamp / rfpa
        netlist_text: ネットリスト本文
        defs: 仕様定義（省略時は回路ごとの既定）

    Returns:
        CircuitSetup
    """
    if name not in CIRCUITS:
        raise ValueError(f"unknown circuit '{name}' (expected one of {sorted(CIRCUITS)})")
    graph = build_graph(parse_netlist(netlist_text))
    space = ParamSpace.from_netlist(graph.netlist)
    setup = CircuitSetup(name, netlist_text, graph, tuple(defs or CIRCUITS[name].specs), space)
    # 評価器がネットリストのデバイス名に対応しているか確認
    setup.evaluator(Fidelity.FINE)
    return setup


def circuit_from_description(circuit: Dict) -> CircuitSetup:
    """チェックポイントの回路情報から復元"""
    defs = tuple(SpecDef(**d) for d in circuit["specs"])
    return circuit_setup(circuit["name"], circuit["netlist"], defs)
