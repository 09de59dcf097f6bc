"""
方策ネットワークモジュール
回路グラフ（GCN / GAT）と仕様ベクトル（FCNN）を結合するActor-Critic
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import tensor as T
from netlist import CircuitGraph, normalize_adjacency_matrix
from storage import load_json_file, save_json_file
from tensor import Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1

# マスクされた注意スコア
ATTENTION_MASK = -1e9


class Variant:
    """方策のバリエーション"""
    GCN_FC = "gcn_fc"
    GAT_FC = "gat_fc"
    MLP_BASELINE = "mlp_baseline"
    ALL = ("gcn_fc", "gat_fc", "mlp_baseline")


class SpecInput:
    """FCNNへの仕様入力"""
    GOAL_AND_INTERMEDIATE = "goal_and_intermediate"
    GOAL_ONLY = "goal_only"
    ALL = ("goal_and_intermediate", "goal_only")


class CheckpointError(ValueError):
    """チェックポイントの形式・構成の不一致"""


@dataclass
class PolicyConfig:
    variant: str = Variant.GCN_FC
    gnn_layers: int = 2
    gnn_hidden: int = 32
    gat_heads: int = 4
    gat_head_dim: int = 8
    gat_slope: float = 0.2
    fcnn_layers: List[int] = field(default_factory=lambda: [32, 32])
    head_layers: List[int] = field(default_factory=lambda: [64, 64])
    spec_input: str = SpecInput.GOAL_AND_INTERMEDIATE
    share_trunk: bool = False
    action_init_scale: float = 0.01


@dataclass
class GraphInputs:
    """GNNに渡す隣接情報（正規化隣接行列と注意マスク）"""
    a_star: np.ndarray
    mask: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.a_star.shape[0]


def graph_inputs(graph: CircuitGraph) -> GraphInputs:
    adjacency = graph.adjacency
    mask = np.where(adjacency + np.eye(adjacency.shape[0]) > 0, 0.0, ATTENTION_MASK)
    return GraphInputs(normalize_adjacency_matrix(adjacency), mask)


@dataclass
class PolicyOutput:
    """
    方策出力

    logits / log_probs は (B·M, 3)、value は (B, 1)
    """
    logits: Tensor
    log_probs: Tensor
    value: Tensor
    batch: int
    n_params: int

    @property
    def action_probs(self) -> np.ndarray:
        probs = np.exp(self.log_probs.data).reshape(self.batch, self.n_params, 3)
        return probs[0] if self.batch == 1 else probs

    @property
    def values(self) -> np.ndarray:
        return self.value.data[:, 0].copy()

    def row_log_probs(self) -> np.ndarray:
        return self.log_probs.data.reshape(self.batch, self.n_params, 3)

    def log_prob_of(self, actions: np.ndarray) -> Tensor:
        """行動の同時対数確率 (B, 1)"""
        actions = np.asarray(actions, dtype=int).reshape(-1)
        picked = T.take(self.log_probs, actions)
        return T.sum_cols(T.reshape(picked, self.batch, self.n_params))

    def entropy(self) -> Tensor:
        """行ごとのエントロピーの和 (B, 1)"""
        p = T.exp(self.log_probs)
        ent = T.mul_scalar(T.sum_cols(T.mul(p, self.log_probs)), -1.0)
        return T.sum_cols(T.reshape(ent, self.batch, self.n_params))


# ============================================
# 層
# ============================================

def gcn_layer(H: Tensor, a_star: np.ndarray, W: Tensor) -> Tensor:
    """H' = tanh(A*·H·W)"""
    a_star = a_star if isinstance(a_star, Tensor) else Tensor(a_star)
    return T.tanh(T.matmul(T.matmul(a_star, H), W))


def gat_layer(H: Tensor, mask: np.ndarray, heads: Sequence[Tuple[Tensor, Tensor]],
              slope: float = 0.2) -> Tensor:
    """
    マルチヘッドグラフ注意層

    e_ij = LeakyReLU(aᵀ[W h_i ‖ W h_j]) を近傍（自己ループ含む）でsoftmaxし、
    tanh(Σ α_ij W h_j) をヘッド方向に連結する。

    Args:
        H: ノード特徴 (n, m)
        mask: 近傍なら0、それ以外は大きな負値の (n, n) 行列
        heads: (W_h (m, d), a_h (2d, 1)) のリスト
        slope: LeakyReLUの傾き

    Returns:
        (n, d·heads)
    """
    n = H.rows
    mask_t = Tensor(mask)
    ones_col = Tensor(np.ones((n, 1)))
    ones_row = Tensor(np.ones((1, n)))
    outputs = []
    for W, a in heads:
        d = W.cols
        if a.shape != (2 * d, 1):
            raise T.ShapeError(f"attention vector shape {a.shape} != ({2 * d}, 1)")
        wh = T.matmul(H, W)
        src = T.matmul(wh, T.rows(a, slice(0, d)))
        dst = T.matmul(wh, T.rows(a, slice(d, 2 * d)))
        scores = T.add(T.matmul(src, ones_row), T.matmul(ones_col, T.transpose(dst)))
        scores = T.add(T.leaky_relu(scores, slope), mask_t)
        alpha = T.softmax_rows(scores)
        outputs.append(T.tanh(T.matmul(alpha, wh)))
    return outputs[0] if len(outputs) == 1 else T.concat_cols(*outputs)


def attention_weights(H: np.ndarray, mask: np.ndarray, W: np.ndarray, a: np.ndarray,
                      slope: float = 0.2) -> np.ndarray:
    """1ヘッド分の注意係数（検査・テスト用）"""
    wh = np.asarray(H) @ W
    d = W.shape[1]
    e = (wh @ a[:d]) + (wh @ a[d:]).T
    e = np.where(e > 0, e, slope * e) + mask
    e = np.exp(e - e.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def dense(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, W), b)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, scale: float = 1.0) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)) * scale


def mlp_hidden_width(n_nodes: int, n_features: int, config: PolicyConfig) -> int:
    """GCN分岐と同程度のパラメータ数になるMLP隠れ幅"""
    target = n_features * config.gnn_hidden + (config.gnn_layers - 1) * config.gnn_hidden ** 2
    flat = n_nodes * n_features
    # h² + (flat + 2)·h − target = 0 の正の解
    b = flat + 2
    h = (-b + np.sqrt(b * b + 4.0 * target)) / 2.0
    return max(4, int(round(h)))


# ============================================
# Actor-Critic
# ============================================

class ActorCritic:
    """
    グラフ分岐 + 仕様分岐 → 共有全結合層 → 行動ヘッド (M×3) / 価値ヘッド

    パラメータ名は "<net>/<group>/<layer>/<name>"。groupはgnn / fcnn / fc。
    share_trunk=Falseでは actor と critic が同じ構造の別ネットワークを持つ。
    """

    def __init__(self, config: PolicyConfig, n_nodes: int, n_features: int,
                 n_params: int, n_specs: int, rng: Optional[np.random.Generator] = None):
        if config.variant not in Variant.ALL:
            raise CheckpointError(f"unknown policy variant '{config.variant}'")
        if config.spec_input not in SpecInput.ALL:
            raise CheckpointError(f"unknown spec_input '{config.spec_input}'")
        self.config = config
        self.n_nodes = n_nodes
        self.n_features = n_features
        self.n_params = n_params
        self.n_specs = n_specs
        self.mlp_hidden = mlp_hidden_width(n_nodes, n_features, config)
        self.params: Dict[str, Tensor] = {}
        self._build(rng or np.random.default_rng(0))
        self._batch_cache: Dict[Tuple[int, int], Tuple[GraphInputs, Tuple[np.ndarray, ...]]] = {}

    # ---- 構築 ----

    @property
    def spec_width(self) -> int:
        if self.config.spec_input == SpecInput.GOAL_ONLY:
            return self.n_specs
        return 2 * self.n_specs

    @property
    def nets(self) -> Tuple[str, ...]:
        return ("trunk",) if self.config.share_trunk else ("actor", "critic")

    def _add(self, name: str, data: np.ndarray):
        self.params[name] = Tensor(data, requires_grad=True)

    def _build_trunk(self, net: str, rng: np.random.Generator) -> int:
        cfg = self.config
        if cfg.variant == Variant.GCN_FC:
            width = self.n_features
            for layer in range(cfg.gnn_layers):
                self._add(f"{net}/gnn/{layer}/W", _glorot(rng, width, cfg.gnn_hidden))
                width = cfg.gnn_hidden
            graph_width = width
        elif cfg.variant == Variant.GAT_FC:
            width = self.n_features
            for layer in range(cfg.gnn_layers):
                for h in range(cfg.gat_heads):
                    self._add(f"{net}/gnn/{layer}/head{h}/W", _glorot(rng, width, cfg.gat_head_dim))
                    self._add(f"{net}/gnn/{layer}/head{h}/a", _glorot(rng, 2 * cfg.gat_head_dim, 1))
                width = cfg.gat_heads * cfg.gat_head_dim
            graph_width = width
        else:
            width = self.n_nodes * self.n_features
            for layer in range(2):
                self._add(f"{net}/gnn/{layer}/W", _glorot(rng, width, self.mlp_hidden))
                self._add(f"{net}/gnn/{layer}/b", np.zeros((1, self.mlp_hidden)))
                width = self.mlp_hidden
            graph_width = width

        width = self.spec_width
        for layer, size in enumerate(cfg.fcnn_layers):
            self._add(f"{net}/fcnn/{layer}/W", _glorot(rng, width, size))
            self._add(f"{net}/fcnn/{layer}/b", np.zeros((1, size)))
            width = size

        width = graph_width + width
        for layer, size in enumerate(cfg.head_layers):
            self._add(f"{net}/fc/{layer}/W", _glorot(rng, width, size))
            self._add(f"{net}/fc/{layer}/b", np.zeros((1, size)))
            width = size
        return width

    def _build(self, rng: np.random.Generator):
        for net in self.nets:
            width = self._build_trunk(net, rng)
            if net in ("actor", "trunk"):
                self._add(f"{net}/fc/action/W",
                          _glorot(rng, width, 3 * self.n_params, self.config.action_init_scale))
                self._add(f"{net}/fc/action/b", np.zeros((1, 3 * self.n_params)))
            if net in ("critic", "trunk"):
                self._add(f"{net}/fc/value/W", _glorot(rng, width, 1))
                self._add(f"{net}/fc/value/b", np.zeros((1, 1)))

    def parameter_groups(self) -> Dict[str, List[str]]:
        """θ = {W_GNN, W_FCNN, W_FC} への分割"""
        groups = {"gnn": [], "fcnn": [], "fc": []}
        for name in self.params:
            groups[name.split("/")[1]].append(name)
        return groups

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def n_weights(self, prefix: str = "") -> int:
        return int(sum(p.data.size for n, p in self.params.items() if n.startswith(prefix)))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def descriptor(self) -> Dict:
        return {
            "variant": self.config.variant,
            "n_nodes": self.n_nodes,
            "n_features": self.n_features,
            "n_params": self.n_params,
            "n_specs": self.n_specs,
            "gnn_layers": self.config.gnn_layers,
            "gnn_hidden": self.config.gnn_hidden,
            "gat_heads": self.config.gat_heads,
            "gat_head_dim": self.config.gat_head_dim,
            "gat_slope": self.config.gat_slope,
            "fcnn_layers": list(self.config.fcnn_layers),
            "head_layers": list(self.config.head_layers),
            "spec_input": self.config.spec_input,
            "share_trunk": self.config.share_trunk,
            "mlp_hidden": self.mlp_hidden,
        }

    def copy_weights(self) -> Dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_weights(self, weights: Dict[str, np.ndarray]):
        missing = set(self.params) - set(weights)
        extra = set(weights) - set(self.params)
        if missing or extra:
            raise CheckpointError(
                f"weight names mismatch (missing {sorted(missing)}, unexpected {sorted(extra)})")
        for name, p in self.params.items():
            value = np.asarray(weights[name], dtype=float)
            if value.shape != p.shape:
                raise CheckpointError(f"weight '{name}' shape {value.shape} != {p.shape}")
            if not np.all(np.isfinite(value)):
                raise CheckpointError(f"weight '{name}' has non-finite entries")
            p.data = value.copy()

    # ---- 順伝播 ----

    def _batched_graph(self, gi: GraphInputs, batch: int):
        key = (id(gi), batch)
        entry = self._batch_cache.get(key)
        # エントリがgiを保持するのでidは再利用されない
        if entry is not None and entry[0] is gi:
            return entry[1]
        eye = np.eye(batch)
        n = gi.n_nodes
        block_mask = np.where(np.kron(eye, gi.mask == 0) > 0, 0.0, ATTENTION_MASK)
        readout = np.kron(eye, np.full((1, n), 1.0 / n))
        cached = (np.kron(eye, gi.a_star), block_mask, readout)
        if len(self._batch_cache) >= 8:
            self._batch_cache.clear()
        self._batch_cache[key] = (gi, cached)
        return cached

    def _graph_embedding(self, net: str, X: np.ndarray, gi: GraphInputs) -> Tensor:
        cfg = self.config
        batch, n, m = X.shape
        if cfg.variant == Variant.MLP_BASELINE:
            h = Tensor(X.reshape(batch, n * m))
            for layer in range(2):
                h = T.tanh(dense(h, self.params[f"{net}/gnn/{layer}/W"],
                                 self.params[f"{net}/gnn/{layer}/b"]))
            return h

        a_star, mask, readout = self._batched_graph(gi, batch)
        h = Tensor(X.reshape(batch * n, m))
        for layer in range(cfg.gnn_layers):
            if cfg.variant == Variant.GCN_FC:
                h = gcn_layer(h, a_star, self.params[f"{net}/gnn/{layer}/W"])
            else:
                heads = [(self.params[f"{net}/gnn/{layer}/head{k}/W"],
                          self.params[f"{net}/gnn/{layer}/head{k}/a"])
                         for k in range(cfg.gat_heads)]
                h = gat_layer(h, mask, heads, cfg.gat_slope)
        # ノード平均で読み出し
        return T.matmul(Tensor(readout), h)

    def _trunk(self, net: str, X: np.ndarray, gi: GraphInputs, spec: np.ndarray) -> Tensor:
        graph = self._graph_embedding(net, X, gi)
        s = Tensor(spec)
        for layer in range(len(self.config.fcnn_layers)):
            s = T.tanh(dense(s, self.params[f"{net}/fcnn/{layer}/W"],
                             self.params[f"{net}/fcnn/{layer}/b"]))
        h = T.concat_cols(graph, s)
        for layer in range(len(self.config.head_layers)):
            h = T.tanh(dense(h, self.params[f"{net}/fc/{layer}/W"],
                             self.params[f"{net}/fc/{layer}/b"]))
        return h

    def graph_embedding(self, X: np.ndarray, gi: GraphInputs) -> np.ndarray:
        """行動側ネットワークのグラフ埋め込み"""
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            X = X[None]
        return self._graph_embedding(self.nets[0], X, gi).data

    def forward(self, X: np.ndarray, gi: GraphInputs, spec: np.ndarray) -> PolicyOutput:
        """
        順伝播

        Args:
            X: ノード特徴 (n, m) または (B, n, m)
            gi: 隣接情報
            spec: 仕様入力 (k,) または (B, k)

        Returns:
            PolicyOutput
        """
        X = np.asarray(X, dtype=float)
        spec = np.asarray(spec, dtype=float)
        if X.ndim == 2:
            X = X[None]
        if spec.ndim == 1:
            spec = spec[None]
        batch = X.shape[0]
        if X.shape[1:] != (self.n_nodes, self.n_features):
            raise T.ShapeError(
                f"features {X.shape[1:]} != ({self.n_nodes}, {self.n_features})")
        if spec.shape != (batch, self.spec_width):
            raise T.ShapeError(f"spec input {spec.shape} != ({batch}, {self.spec_width})")

        if self.config.share_trunk:
            actor_h = critic_h = self._trunk("trunk", X, gi, spec)
            actor, critic = "trunk", "trunk"
        else:
            actor_h = self._trunk("actor", X, gi, spec)
            critic_h = self._trunk("critic", X, gi, spec)
            actor, critic = "actor", "critic"

        logits = dense(actor_h, self.params[f"{actor}/fc/action/W"],
                       self.params[f"{actor}/fc/action/b"])
        logits = T.reshape(logits, batch * self.n_params, 3)
        value = dense(critic_h, self.params[f"{critic}/fc/value/W"],
                      self.params[f"{critic}/fc/value/b"])
        return PolicyOutput(logits, T.log_softmax_rows(logits), value, batch, self.n_params)


def build_spec_input(goal: np.ndarray, intermediate: np.ndarray, mode: str) -> np.ndarray:
    """FCNN入力（正規化済み目標 [+ 中間仕様]）"""
    if mode == SpecInput.GOAL_ONLY:
        return np.asarray(goal, dtype=float)
    return np.concatenate([goal, intermediate]).astype(float)


def policy_forward(policy: ActorCritic, X: np.ndarray, gi: GraphInputs,
                   spec_input: np.ndarray) -> PolicyOutput:
    return policy.forward(X, gi, spec_input)


# ============================================
# 行動選択
# ============================================

def sample_action(out: PolicyOutput, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """
    各行を独立にサンプリング

    Returns:
        (行動ベクトル (M,), 同時対数確率)
    """
    probs = out.action_probs
    if probs.ndim != 2:
        raise ValueError("sample_action expects a single observation")
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    choices = np.minimum((u[:, None] >= cdf).sum(axis=1), 2)
    log_probs = out.row_log_probs()[0]
    return choices, float(np.sum(log_probs[np.arange(len(choices)), choices]))


def greedy_action(out: PolicyOutput) -> Tuple[np.ndarray, float]:
    """行ごとのargmax（デプロイ用）"""
    log_probs = out.row_log_probs()[0]
    choices = np.argmax(log_probs, axis=1)
    return choices, float(np.sum(log_probs[np.arange(len(choices)), choices]))


# ============================================
# チェックポイント
# ============================================

def save_checkpoint(policy: ActorCritic, path, config: Dict, config_hash: str,
                    circuit: Dict):
    """
    チェックポイントをJSONで保存

    Args:
        policy: 方策
        path: 保存先
        config: 解決済みの実行設定
        config_hash: 設定のハッシュ
        circuit: 回路情報（名前・ネットリスト本文）
    """
    weights = {name: {"shape": list(p.shape), "values": p.data.tolist()}
               for name, p in policy.params.items()}
    save_json_file(path, {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "descriptor": policy.descriptor(),
        "weights": weights,
        "config": config,
        "config_hash": config_hash,
        "circuit": circuit,
    })


def policy_from_descriptor(descriptor: Dict) -> ActorCritic:
    names = set(asdict(PolicyConfig()))
    config = PolicyConfig(**{k: v for k, v in descriptor.items() if k in names})
    return ActorCritic(config, descriptor["n_nodes"], descriptor["n_features"],
                       descriptor["n_params"], descriptor["n_specs"])


def load_checkpoint(path) -> Tuple[ActorCritic, Dict]:
    """
    チェックポイントを読み込み

    Returns:
        (方策, メタ情報 {config, config_hash, circuit, descriptor})
    """
    data = load_json_file(path)
    if data is None:
        raise CheckpointError(f"checkpoint not found: {path}")
    version = data.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format_version {version} != {CHECKPOINT_FORMAT_VERSION}")
    try:
        descriptor = data["descriptor"]
        policy = policy_from_descriptor(descriptor)
        weights = {}
        for name, entry in data["weights"].items():
            values = np.array(entry["values"], dtype=float).reshape(entry["shape"])
            weights[name] = values
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint {path}: {e}")
    if policy.descriptor() != descriptor:
        raise CheckpointError("architecture descriptor mismatch")
    policy.load_weights(weights)
    return policy, {k: data.get(k) for k in ("config", "config_hash", "circuit", "descriptor")}
