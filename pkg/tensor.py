"""
テンソル演算モジュール
2次元テンソル・逆伝播テープ（リバースモード自動微分）・Adam
"""
import threading
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np


class ShapeError(ValueError):
    """形状不一致"""


class TapeError(RuntimeError):
    """テープの誤用（記録なし・二重backward）"""


_local = threading.local()


def _tape_stack() -> List["Tape"]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Optional["Tape"]:
    """このスレッドで有効なテープ（なければNone）"""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """
    演算記録テープ

    `with Tape() as tape:` の中で勾配が必要な演算だけを記録する。
    backwardは記録の逆順に1回だけ走査する。テープはスレッドごと。
    """

    def __init__(self):
        self.nodes: List[Tuple["Tensor", Tuple["Tensor", ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, out: "Tensor", parents: Tuple["Tensor", ...], backward_fn: Callable):
        if self.consumed:
            raise TapeError("tape already used for backward; record on a new tape")
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append((out, parents, backward_fn))

    def backward(self, loss: "Tensor"):
        if loss.shape != (1, 1):
            raise ShapeError(f"loss must be 1x1, got {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")
        if self.consumed:
            raise TapeError("backward already called on this tape")
        self.consumed = True

        grads = {id(loss): np.ones((1, 1))}
        leaves = {}
        for out, parents, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            out.grad = g
            parent_grads = fn(g)
            for p, pg in zip(parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg
                if p._tape is not self:
                    leaves[key] = p

        # 葉テンソルは勾配を累積（zero_gradで明示的にリセット）
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


class Tensor:
    """float64の2次元テンソル"""

    def __init__(self, data, requires_grad: bool = False):
        data = np.array(data, dtype=np.float64)
        if data.ndim == 0:
            data = data.reshape(1, 1)
        elif data.ndim == 1:
            data = data.reshape(1, -1)
        elif data.ndim > 2:
            raise ShapeError(f"only 2-D tensors are supported, got {data.shape}")
        self.data = data
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.shape != (1, 1):
            raise ShapeError(f"loss must be 1x1, got {self.shape}")
        if self._tape is None:
            raise TapeError("loss was not recorded on a tape")
        self._tape.backward(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    def __neg__(self):
        return mul_scalar(self, -1.0)


def _const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    """演算結果を生成し、必要ならテープに記録"""
    requires_grad = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires_grad)
    tape = current_tape()
    if tape is not None and requires_grad:
        tape.record(out, parents, backward_fn)
    return out


def _row_broadcast(a: Tensor, b: Tensor, op: str):
    """bがaと同形状か1×cの行ベクトルであることを確認"""
    if a.shape == b.shape:
        return False
    if b.rows == 1 and b.cols == a.cols:
        return True
    raise ShapeError(f"{op}: cannot broadcast {b.shape} to {a.shape}")


# ============================================
# 線形演算
# ============================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _const(a), _const(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    """加算（bは同形状または行ベクトル）"""
    a, b = _const(a), _const(b)
    if a.rows == 1 and b.rows > 1 and a.cols == b.cols:
        a, b = b, a
    bcast = _row_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (g, g.sum(axis=0, keepdims=True) if bcast else g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _const(a), _const(b)
    bcast = _row_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (g, -(g.sum(axis=0, keepdims=True) if bcast else g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """要素積（bは同形状または行ベクトル）"""
    a, b = _const(a), _const(b)
    bcast = _row_broadcast(a, b, "mul")

    def backward(g):
        gb = g * a.data
        return g * b.data, gb.sum(axis=0, keepdims=True) if bcast else gb

    return _make(a.data * b.data, (a, b), backward)


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + float(c), (a,), lambda g: (g,))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    if rows * cols != a.data.size:
        raise ShapeError(f"reshape: {a.shape} -> ({rows}, {cols})")
    shape = a.shape
    return _make(a.data.reshape(rows, cols), (a,), lambda g: (g.reshape(shape),))


def concat_cols(*tensors: Tensor) -> Tensor:
    tensors = tuple(_const(t) for t in tensors)
    rows = {t.rows for t in tensors}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.cols for t in tensors])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=1), tensors, backward)


def rows(a: Tensor, index) -> Tensor:
    """行の取り出し（インデックス配列またはスライス）"""
    index = np.atleast_1d(np.arange(a.rows)[index])
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward)


def take(a: Tensor, cols: Sequence[int]) -> Tensor:
    """各行から1列ずつ取り出して (r, 1) を返す"""
    cols = np.asarray(cols, dtype=int)
    if cols.shape != (a.rows,):
        raise ShapeError(f"take: need {a.rows} column indices, got {cols.shape}")
    r = np.arange(a.rows)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[r, cols] = g[:, 0]
        return (full,)

    return _make(a.data[r, cols].reshape(-1, 1), (a,), backward)


# ============================================
# 要素ごとの非線形演算
# ============================================

def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    return _make(np.where(x > 0, x, slope * x), (a,),
                 lambda g: (g * np.where(x > 0, 1.0, slope),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def min_elementwise(a: Tensor, b: Tensor) -> Tensor:
    a, b = _const(a), _const(b)
    if a.shape != b.shape:
        raise ShapeError(f"min_elementwise: {a.shape} vs {b.shape}")
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (g * pick_a, g * ~pick_a))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """クリップ（勾配は範囲の内側のみ）"""
    x = a.data
    inside = (x > lo) & (x < hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


# ============================================
# 行ごとの演算と縮約
# ============================================

def softmax_rows(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    return _make(y, (a,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


def log_softmax_rows(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return _make(y, (a,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def mean_rows(a: Tensor) -> Tensor:
    """行方向の平均 → (1, c)"""
    n = a.rows
    return _make(a.data.mean(axis=0, keepdims=True), (a,),
                 lambda g: (np.repeat(g, n, axis=0) / n,))


def sum(a: Tensor) -> Tensor:  # noqa: A001
    shape = a.shape
    return _make(np.array([[a.data.sum()]]), (a,),
                 lambda g: (np.full(shape, g[0, 0]),))


def sum_cols(a: Tensor) -> Tensor:
    """列方向の和 → (r, 1)"""
    c = a.cols
    return _make(a.data.sum(axis=1, keepdims=True), (a,),
                 lambda g: (np.repeat(g, c, axis=1),))


def mean(a: Tensor) -> Tensor:
    return mul_scalar(sum(a), 1.0 / a.data.size)


# ============================================
# Adam
# ============================================

@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros(p.shape) for p in params],
                   [np.zeros(p.shape) for p in params], 0)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """
    Adam更新（バイアス補正あり）。paramsはその場で更新される

    Args:
        params: パラメータテンソル
        grads: 勾配（Noneは0扱い）
        state: Adamの状態 (m, v, t)
        lr: 学習率
        beta1, beta2, eps: Adamの係数
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError("adam_step: params, grads and state lengths differ")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"adam_step: shape mismatch at {i}: {p.shape} vs {g.shape}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_grad_norm(grads: Sequence[Optional[np.ndarray]],
                   max_norm: float) -> Tuple[List[Optional[np.ndarray]], float]:
    """全体ノルムで勾配をクリップ"""
    total = float(np.sqrt(np.sum([np.sum(g * g) for g in grads if g is not None])))
    if max_norm is None or max_norm <= 0 or total <= max_norm:
        return list(grads), total
    scale = max_norm / (total + 1e-12)
    return [None if g is None else g * scale for g in grads], total
