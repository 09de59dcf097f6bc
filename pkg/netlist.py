"""
ネットリスト解析モジュール
行指向のネットリストを読み込み、回路グラフ・ノード特徴量・正規化隣接行列を生成
"""
import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import networkx as nx
import numpy as np

logger = logging.getLogger(__name__)


# デバイス種別とノード種別（one-hotの順序は固定）
DEVICE_KINDS = ("NMOS", "PMOS", "RES", "CAP", "IND")
SUPPLY_KINDS = ("SUPPLY", "GND", "BIAS")
NODE_KINDS = DEVICE_KINDS + SUPPLY_KINDS
TRANSISTOR_KINDS = ("NMOS", "PMOS")

# パラメータ特徴の長さ（トランジスタ: 幅・フィンガー数）
FEATURE_PARAM_WIDTH = 2


class NetlistError(ValueError):
    """ネットリストの構文・意味エラー"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GraphError(ValueError):
    """グラフ構築エラー"""


@dataclass(frozen=True)
class ParamSpec:
    """調整可能パラメータ1個分の定義"""
    device: str
    name: str
    init: float
    lo: float
    hi: float
    step: float
    integer: bool = False
    log_scale: bool = False

    @property
    def key(self) -> Tuple[str, str]:
        return (self.device, self.name)


@dataclass(frozen=True)
class Device:
    name: str
    kind: str
    terminals: Tuple[str, ...]
    params: Tuple[ParamSpec, ...]

    @property
    def is_transistor(self) -> bool:
        return self.kind in TRANSISTOR_KINDS


@dataclass(frozen=True)
class SupplyNode:
    """電源・グラウンド・バイアスノード"""
    name: str
    kind: str
    net: str
    volts: float


@dataclass(frozen=True)
class Netlist:
    devices: Tuple[Device, ...]
    supplies: Tuple[SupplyNode, ...]
    ports: Tuple[str, ...] = ()

    @property
    def params(self) -> Tuple[ParamSpec, ...]:
        """宣言順に並べた全パラメータ"""
        return tuple(p for d in self.devices for p in d.params)

    @property
    def n_params(self) -> int:
        return len(self.params)

    def param_lookup(self) -> Dict[Tuple[str, str], int]:
        """(デバイス名, パラメータ名) → グローバルインデックス"""
        return {p.key: i for i, p in enumerate(self.params)}


@dataclass(frozen=True)
class GraphNode:
    name: str
    kind: str
    kind_onehot: np.ndarray
    param_slots: Tuple[int, ...] = ()
    volts: float = 0.0


@dataclass
class CircuitGraph:
    """回路グラフ（デバイスノード → 電源ノードの順）"""
    nodes: Tuple[GraphNode, ...]
    adjacency: np.ndarray
    param_index: Dict[Tuple[int, int], int]
    netlist: Netlist
    graph: nx.Graph = field(repr=False, default=None)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_features(self) -> int:
        return len(NODE_KINDS) + FEATURE_PARAM_WIDTH


# ============================================
# ネットリスト解析
# ============================================

def _parse_float(token: str, line_no: int, what: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise NetlistError(f"invalid number for {what}: '{token}'", line_no)
    if not math.isfinite(value):
        raise NetlistError(f"non-finite value for {what}: '{token}'", line_no)
    return value


def _parse_param_clauses(tokens: List[str], device: str, kind: str,
                         line_no: int) -> Tuple[ParamSpec, ...]:
    """
    `PARAM p=v BOUNDS lo hi STEP d` の繰り返しを解析

    Args:
        tokens: 最初のPARAM以降のトークン
        device: デバイス名
        kind: デバイス種別
        line_no: 行番号（エラー表示用）

    Returns:
        ParamSpecのタプル
    """
    specs = []
    i = 0
    while i < len(tokens):
        clause = tokens[i:i + 7]
        if (len(clause) < 7 or clause[0].upper() != "PARAM"
                or clause[2].upper() != "BOUNDS" or clause[5].upper() != "STEP"):
            raise NetlistError(
                "expected 'PARAM <name>=<init> BOUNDS <min> <max> STEP <dx>'", line_no)
        if "=" not in clause[1]:
            raise NetlistError(f"expected <name>=<init>, got '{clause[1]}'", line_no)
        pname, init_token = clause[1].split("=", 1)
        if not pname:
            raise NetlistError("empty parameter name", line_no)
        init = _parse_float(init_token, line_no, f"{device}.{pname} init")
        lo = _parse_float(clause[3], line_no, f"{device}.{pname} min")
        hi = _parse_float(clause[4], line_no, f"{device}.{pname} max")
        step = _parse_float(clause[6], line_no, f"{device}.{pname} step")
        if lo >= hi:
            raise NetlistError(f"bound min >= max for {device}.{pname} ({lo} >= {hi})", line_no)
        if step <= 0:
            raise NetlistError(f"step must be positive for {device}.{pname}", line_no)
        if not lo <= init <= hi:
            raise NetlistError(f"init {init} outside [{lo}, {hi}] for {device}.{pname}", line_no)

        slot = len(specs)
        is_transistor = kind in TRANSISTOR_KINDS
        # トランジスタの2番目のスロットはフィンガー数（整数）
        integer = is_transistor and slot == 1
        if integer and not all(float(v).is_integer() for v in (init, lo, hi, step)):
            raise NetlistError(f"finger count {device}.{pname} must use integer values", line_no)
        if not is_transistor and lo <= 0:
            raise NetlistError(f"passive value {device}.{pname} must be positive", line_no)
        specs.append(ParamSpec(device, pname, init, lo, hi, step,
                               integer=integer, log_scale=not is_transistor))
        i += 7
    return tuple(specs)


def parse_netlist(text: str) -> Netlist:
    """
    ネットリスト文字列を解析

    文法（#以降はコメント）:
        DEVICE <name> <kind> <net>... PARAM <p>=<init> BOUNDS <min> <max> STEP <dx> ...
        SUPPLY VDD <net> <volts> / SUPPLY GND <net> / BIAS <name> <net> <volts>
        PORT <net>...   （外部端子ネットの宣言）

    Args:
        text: ネットリスト本文

    Returns:
        Netlist
    """
    devices: List[Device] = []
    supplies: List[SupplyNode] = []
    ports: List[str] = []
    names = set()

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        keyword = tokens[0].upper()

        if keyword == "DEVICE":
            if len(tokens) < 4:
                raise NetlistError("DEVICE needs a name, a kind and at least one net", line_no)
            name, kind = tokens[1], tokens[2].upper()
            if kind not in DEVICE_KINDS:
                raise NetlistError(f"unknown device kind '{tokens[2]}'", line_no)
            if name in names:
                raise NetlistError(f"duplicate device name '{name}'", line_no)
            upper = [t.upper() for t in tokens]
            first_param = upper.index("PARAM") if "PARAM" in upper else len(tokens)
            terminals = tuple(tokens[3:first_param])
            if not terminals:
                raise NetlistError(f"device '{name}' has no terminals", line_no)
            params = _parse_param_clauses(tokens[first_param:], name, kind, line_no)
            expected = 2 if kind in TRANSISTOR_KINDS else 1
            if len(params) != expected:
                raise NetlistError(
                    f"{kind} '{name}' needs exactly {expected} PARAM clause(s), got {len(params)}",
                    line_no)
            names.add(name)
            devices.append(Device(name, kind, terminals, params))

        elif keyword == "SUPPLY":
            if len(tokens) < 3:
                raise NetlistError("SUPPLY needs a kind and a net", line_no)
            which = tokens[1].upper()
            if which == "VDD":
                if len(tokens) != 4:
                    raise NetlistError("expected 'SUPPLY VDD <net> <volts>'", line_no)
                supply = SupplyNode("VDD", "SUPPLY", tokens[2],
                                    _parse_float(tokens[3], line_no, "VDD volts"))
            elif which == "GND":
                if len(tokens) != 3:
                    raise NetlistError("expected 'SUPPLY GND <net>'", line_no)
                supply = SupplyNode("GND", "GND", tokens[2], 0.0)
            else:
                raise NetlistError(f"unknown supply '{tokens[1]}' (VDD or GND)", line_no)
            if supply.name in names:
                raise NetlistError(f"duplicate node name '{supply.name}'", line_no)
            names.add(supply.name)
            supplies.append(supply)

        elif keyword == "BIAS":
            if len(tokens) != 4:
                raise NetlistError("expected 'BIAS <name> <net> <volts>'", line_no)
            if tokens[1] in names:
                raise NetlistError(f"duplicate node name '{tokens[1]}'", line_no)
            names.add(tokens[1])
            supplies.append(SupplyNode(tokens[1], "BIAS", tokens[2],
                                       _parse_float(tokens[3], line_no, "bias volts")))

        elif keyword == "PORT":
            if len(tokens) < 2:
                raise NetlistError("PORT needs at least one net", line_no)
            ports.extend(tokens[1:])

        else:
            raise NetlistError(f"unknown statement '{tokens[0]}'", line_no)

    if not devices:
        raise NetlistError("no devices")

    return Netlist(tuple(devices), tuple(supplies), tuple(ports))


def load_netlist(path) -> Netlist:
    """ファイルからネットリストを読み込み"""
    text = Path(path).read_text(encoding="utf-8")
    return parse_netlist(text)


# ============================================
# グラフ構築
# ============================================

def _onehot(kind: str) -> np.ndarray:
    vec = np.zeros(len(NODE_KINDS))
    vec[NODE_KINDS.index(kind)] = 1.0
    return vec


def build_graph(netlist: Netlist) -> CircuitGraph:
    """
    ネットリストから回路グラフを構築

    ノード = デバイス ∪ {VDD, GND, 各バイアス}。
    2ノードが1本以上のネットを共有するとき辺を張る。

    Args:
        netlist: 解析済みネットリスト

    Returns:
        CircuitGraph
    """
    nodes: List[GraphNode] = []
    param_index: Dict[Tuple[int, int], int] = {}
    net_members: Dict[str, List[int]] = {}
    terminal_count: Dict[str, int] = {}

    g = 0
    for device in netlist.devices:
        idx = len(nodes)
        slots = []
        for slot in range(len(device.params)):
            param_index[(idx, slot)] = g
            slots.append(g)
            g += 1
        nodes.append(GraphNode(device.name, device.kind, _onehot(device.kind), tuple(slots)))
        for net in device.terminals:
            terminal_count[net] = terminal_count.get(net, 0) + 1
            members = net_members.setdefault(net, [])
            if idx not in members:
                members.append(idx)

    supply_nets = set()
    for supply in netlist.supplies:
        idx = len(nodes)
        nodes.append(GraphNode(supply.name, supply.kind, _onehot(supply.kind), (), supply.volts))
        supply_nets.add(supply.net)
        members = net_members.setdefault(supply.net, [])
        if idx not in members:
            members.append(idx)

    # 1端子にしか現れず、電源にもPORTにも宣言されていないネットは未宣言扱い
    declared = supply_nets | set(netlist.ports)
    for device in netlist.devices:
        for net in device.terminals:
            if terminal_count[net] < 2 and net not in declared:
                raise GraphError(
                    f"device '{device.name}' references undeclared net '{net}'")

    graph = nx.Graph()
    for i, node in enumerate(nodes):
        graph.add_node(i, name=node.name, kind=node.kind)
    for net, members in net_members.items():
        for a, b in combinations(members, 2):
            graph.add_edge(a, b)

    adjacency = nx.to_numpy_array(graph, nodelist=list(range(len(nodes))), dtype=float)
    adjacency = (adjacency > 0).astype(float)
    np.fill_diagonal(adjacency, 0.0)

    return CircuitGraph(tuple(nodes), adjacency, param_index, netlist, graph)


# ============================================
# 特徴量と隣接行列
# ============================================

def normalize_params(netlist: Netlist, params: np.ndarray) -> np.ndarray:
    """
    パラメータを境界で[0,1]に正規化（受動素子は対数スケール）

    Args:
        netlist: ネットリスト
        params: 長さMのパラメータベクトル（先頭次元にバッチ可）

    Returns:
        正規化済みパラメータ
    """
    specs = netlist.params
    lo = np.array([p.lo for p in specs])
    hi = np.array([p.hi for p in specs])
    log_mask = np.array([p.log_scale for p in specs])
    values = np.asarray(params, dtype=float)

    safe = np.where(log_mask, np.maximum(values, 1e-300), 1.0)
    num = np.where(log_mask, np.log(safe) - np.log(lo), values - lo)
    den = np.where(log_mask, np.log(hi) - np.log(lo), hi - lo)
    return num / den


def node_features(graph: CircuitGraph, params: np.ndarray,
                  supply_voltages: Optional[Dict[str, float]] = None) -> np.ndarray:
    """
    ノード特徴行列 X（n×m）を生成

    各行 = 種別one-hot ++ ゼロ埋めパラメータ。電源行は (電圧, 0)。
    電圧は回路中の最大電源電圧の絶対値でスケーリングする。

    Args:
        graph: 回路グラフ
        params: 長さMのパラメータベクトル
        supply_voltages: 電源名 → 電圧の上書き

    Returns:
        特徴行列
    """
    params = np.asarray(params, dtype=float)
    m_total = graph.netlist.n_params
    if params.ndim != 1 or params.shape[0] != m_total:
        raise ValueError(f"params length {params.shape} != M={m_total}")

    volts = {n.name: n.volts for n in graph.nodes if n.kind in SUPPLY_KINDS}
    if supply_voltages:
        volts.update(supply_voltages)
    scale = max([abs(v) for v in volts.values()] + [0.0])
    if scale == 0.0:
        scale = 1.0

    normalized = normalize_params(graph.netlist, params)
    n_kinds = len(NODE_KINDS)
    X = np.zeros((graph.n_nodes, graph.n_features))
    for i, node in enumerate(graph.nodes):
        X[i, :n_kinds] = node.kind_onehot
        if node.kind in SUPPLY_KINDS:
            X[i, n_kinds] = volts[node.name] / scale
        else:
            for slot, g in enumerate(node.param_slots):
                X[i, n_kinds + slot] = normalized[g]
    return X


def normalized_adjacency(graph: CircuitGraph) -> np.ndarray:
    """
    A* = D̂^{-1/2} (A + I) D̂^{-1/2}

    Args:
        graph: 回路グラフ

    Returns:
        対称なn×n行列
    """
    return normalize_adjacency_matrix(graph.adjacency)


def normalize_adjacency_matrix(adjacency: np.ndarray) -> np.ndarray:
    a_hat = np.asarray(adjacency, dtype=float) + np.eye(adjacency.shape[0])
    d_inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
    return a_hat * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]


def parameter_table(netlist: Netlist) -> List[Dict]:
    """inspect表示用のパラメータ一覧"""
    rows = []
    for i, p in enumerate(netlist.params):
        rows.append({
            "index": i,
            "device": p.device,
            "param": p.name,
            "init": p.init,
            "min": p.lo,
            "max": p.hi,
            "step": p.step,
            "integer": p.integer,
            "log_scale": p.log_scale,
        })
    return rows


def to_dot(graph: CircuitGraph) -> str:
    """Graphviz DOT形式の文字列を生成"""
    lines = ["graph circuit {"]
    for i, node in enumerate(graph.nodes):
        shape = "box" if node.kind in DEVICE_KINDS else "ellipse"
        lines.append(f'  n{i} [label="{node.name}\\n{node.kind}", shape={shape}];')
    rows, cols = np.nonzero(np.triu(graph.adjacency))
    for a, b in zip(rows, cols):
        lines.append(f"  n{a} -- n{b};")
    lines.append("}")
    return "\n".join(lines) + "\n"
