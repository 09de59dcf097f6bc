"""
PPO学習モジュール
軌跡収集・GAE・クリップ付き方策損失・価値回帰、学習 / デプロイ / FoM学習
"""
import copy
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import tensor as T
from env import (
    CircuitEnv,
    EnvState,
    EpisodeResult,
    EvaluatorError,
    Observation,
    RewardMode,
    fom_value,
    rng_stream,
    sample_goal,
)
from policy import (
    ActorCritic,
    GraphInputs,
    build_spec_input,
    graph_inputs,
    greedy_action,
    sample_action,
    save_checkpoint,
)
from storage import (
    CHECKPOINT_FILE,
    METRICS_FILE,
    PARTIAL_CHECKPOINT_FILE,
    seed_dir,
    write_csv,
)
from tensor import Tape, Tensor

logger = logging.getLogger(__name__)


METRICS_COLUMNS = [
    "batch", "episodes_cum", "mean_ep_reward", "mean_ep_len",
    "policy_loss", "value_loss", "clip_frac", "deploy_acc", "wall_secs",
]
FOM_METRICS_COLUMNS = METRICS_COLUMNS + ["best_train_fom", "policy_fom"]


class TrainingError(RuntimeError):
    """学習中の非有限損失など"""


@dataclass
class PPOConfig:
    episodes_total: int = 35000
    episodes_per_batch: int = 20
    epochs_per_batch: int = 4
    minibatch_size: int = 64
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    lr: float = 3e-4
    value_coeff: float = 0.5
    entropy_coeff: float = 0.01
    max_grad_norm: float = 0.5
    eval_interval: int = 50
    eval_goals: int = 20
    final_eval_goals: int = 200

    def validate(self):
        """不正な値のフィールド名と理由のリスト"""
        problems = []
        if not 0 < self.gamma <= 1:
            problems.append(("gamma", "must be in (0, 1]"))
        if not 0 <= self.gae_lambda <= 1:
            problems.append(("gae_lambda", "must be in [0, 1]"))
        if self.clip_eps <= 0:
            problems.append(("clip_eps", "must be > 0"))
        if self.lr <= 0:
            problems.append(("lr", "must be > 0"))
        for name in ("episodes_total", "episodes_per_batch", "epochs_per_batch",
                     "minibatch_size", "eval_interval", "eval_goals", "final_eval_goals"):
            if getattr(self, name) < 1:
                problems.append((name, "must be >= 1"))
        return problems


@dataclass
class Trajectory:
    """1エピソード分の記録"""
    goal: np.ndarray
    features: List[np.ndarray] = field(default_factory=list)
    specs: List[np.ndarray] = field(default_factory=list)
    actions: List[np.ndarray] = field(default_factory=list)
    log_probs: List[float] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    terminal: bool = False
    aborted: bool = False
    designs: List[np.ndarray] = field(default_factory=list)
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.rewards))


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    mean_ratio: float
    clip_frac: float
    approx_kl: float


# ============================================
# エージェント
# ============================================

class PolicyAgent:
    """方策と観測の橋渡し（サンプリング / greedy）"""

    def __init__(self, policy: ActorCritic, gi: GraphInputs,
                 rng: Optional[np.random.Generator] = None, greedy: bool = False):
        self.policy = policy
        self.gi = gi
        self.rng = rng
        self.greedy = greedy

    def spec_input(self, obs: Observation) -> np.ndarray:
        return build_spec_input(obs.goal, obs.intermediate, self.policy.config.spec_input)

    def act(self, obs: Observation) -> Tuple[np.ndarray, float, float]:
        """(行動, 同時対数確率, 価値)"""
        out = self.policy.forward(obs.features, self.gi, self.spec_input(obs))
        if self.greedy:
            action, logp = greedy_action(out)
        else:
            action, logp = sample_action(out, self.rng)
        return action, logp, float(out.values[0])


def _as_agent(policy, env: CircuitEnv, greedy: bool = True,
              rng: Optional[np.random.Generator] = None):
    if isinstance(policy, ActorCritic):
        return PolicyAgent(policy, graph_inputs(env.graph), rng, greedy)
    return policy


# ============================================
# 軌跡収集とアドバンテージ
# ============================================

def run_episode(agent, env: CircuitEnv, goal: np.ndarray) -> Trajectory:
    """1エピソード実行（評価器エラーは警告して打ち切り）"""
    traj = Trajectory(goal=np.asarray(goal, dtype=float))
    try:
        state = env.reset(goal)
        done = False
        while not done:
            obs = env.observe(state)
            action, logp, value = agent.act(obs)
            spec = agent.spec_input(obs)
            # 評価が成功したステップだけを記録（全リストの長さを揃える）
            state, r, done = env.step(action)
            traj.features.append(obs.features)
            traj.specs.append(spec)
            traj.actions.append(action)
            traj.log_probs.append(logp)
            traj.values.append(value)
            traj.rewards.append(r)
            traj.designs.append(state.intermediate)
        traj.terminal = env.reward_mode == RewardMode.P2S and bool(traj.rewards) \
            and traj.rewards[-1] == env.bonus
    except EvaluatorError as e:
        logger.warning("evaluator error, episode aborted after %d steps: %s", len(traj), e)
        traj.aborted = True
    return traj


def collect_trajectories(policy, env_factory: Callable[[], CircuitEnv],
                         goals_sampler: Callable[[], np.ndarray], n_episodes: int,
                         rng: np.random.Generator) -> List[Trajectory]:
    """
    現在の方策でエピソードを収集

    Args:
        policy: ActorCriticまたはact()を持つエージェント
        env_factory: 環境の生成関数
        goals_sampler: 目標仕様のサンプラー
        n_episodes: エピソード数
        rng: 行動サンプリング用の乱数

    Returns:
        Trajectoryのリスト（打ち切られたものも含む）
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    env = env_factory()
    agent = _as_agent(policy, env, greedy=False, rng=rng)
    return [run_episode(agent, env, goals_sampler()) for _ in range(n_episodes)]


def compute_gae(rewards: Sequence[float], values: Sequence[float], terminal: bool,
                gamma: float, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    GAEでアドバンテージとリターンを計算

    終端・打ち切りのどちらでも最後のブートストラップ値は0。

    Args:
        rewards: 報酬列
        values: 価値推定列
        terminal: 終端に到達したか（打ち切りと同じ扱い）
        gamma: 割引率
        lam: GAEのλ

    Returns:
        (advantages, returns)
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if rewards.shape != values.shape:
        raise ValueError(f"rewards {rewards.shape} and values {values.shape} differ")
    n = len(rewards)
    advantages = np.zeros(n)
    last = 0.0
    for t in reversed(range(n)):
        next_value = values[t + 1] if t + 1 < n else 0.0
        delta = rewards[t] + gamma * next_value - values[t]
        last = delta + gamma * lam * last
        advantages[t] = last
    return advantages, advantages + values


def flatten_batch(trajectories: Sequence[Trajectory]) -> Dict[str, np.ndarray]:
    """軌跡をステップ単位の配列に平坦化"""
    used = [t for t in trajectories if len(t) > 0 and not t.aborted]
    if not used:
        return {}
    return {
        "features": np.stack([f for t in used for f in t.features]),
        "specs": np.stack([s for t in used for s in t.specs]),
        "actions": np.stack([a for t in used for a in t.actions]),
        "old_log_probs": np.array([lp for t in used for lp in t.log_probs]),
        "advantages": np.concatenate([t.advantages for t in used]),
        "returns": np.concatenate([t.returns for t in used]),
    }


# ============================================
# PPO更新
# ============================================

def ppo_loss(policy: ActorCritic, gi: GraphInputs, mb: Dict[str, np.ndarray],
             config: PPOConfig) -> Tuple[Tensor, Dict[str, float]]:
    """
    ミニバッチのPPO損失

    L = −mean(min(b·Â, clip(b, 1−ε, 1+ε)·Â)) − c_ent·H + c_v·MSE(V, R)
    """
    out = policy.forward(mb["features"], gi, mb["specs"])
    batch = out.batch
    new_lp = out.log_prob_of(mb["actions"])
    old_lp = Tensor(mb["old_log_probs"].reshape(batch, 1))
    adv = Tensor(mb["advantages"].reshape(batch, 1))
    returns = Tensor(mb["returns"].reshape(batch, 1))

    ratio = T.exp(T.sub(new_lp, old_lp))
    surr1 = T.mul(ratio, adv)
    surr2 = T.mul(T.clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps), adv)
    policy_loss = T.mul_scalar(T.mean(T.min_elementwise(surr1, surr2)), -1.0)

    err = T.sub(out.value, returns)
    value_loss = T.mean(T.mul(err, err))
    entropy = T.mean(out.entropy())

    loss = T.add(T.add(policy_loss, T.mul_scalar(entropy, -config.entropy_coeff)),
                 T.mul_scalar(value_loss, config.value_coeff))

    r = ratio.data[:, 0]
    log_ratio = new_lp.data[:, 0] - mb["old_log_probs"]
    stats = {
        "policy_loss": policy_loss.item(),
        "value_loss": value_loss.item(),
        "entropy": entropy.item(),
        "mean_ratio": float(np.mean(r)),
        "clip_frac": float(np.mean(np.abs(r - 1.0) > config.clip_eps)),
        "approx_kl": float(np.mean((r - 1.0) - log_ratio)),
    }
    return loss, stats


def ppo_update(policy: ActorCritic, gi: GraphInputs, batch: Dict[str, np.ndarray],
               config: PPOConfig, adam_state: T.AdamState,
               rng: np.random.Generator, batch_index: int = 0) -> UpdateStats:
    """
    エポック × ミニバッチでPPO更新

    Args:
        policy: 方策（その場で更新）
        gi: 隣接情報
        batch: flatten_batchの出力
        config: PPO設定
        adam_state: Adamの状態
        rng: ミニバッチ分割用の乱数
        batch_index: 診断メッセージ用のバッチ番号

    Returns:
        最終エポックの統計
    """
    n = len(batch["advantages"])
    adv = batch["advantages"]
    std = adv.std()
    batch = dict(batch)
    batch["advantages"] = (adv - adv.mean()) / (std if std > 1e-8 else 1.0)

    params = policy.parameters()
    history = []
    for _ in range(config.epochs_per_batch):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            mb = {k: v[idx] for k, v in batch.items()}
            policy.zero_grad()
            with Tape() as tape:
                loss, stats = ppo_loss(policy, gi, mb, config)
            if not np.isfinite(loss.item()):
                raise TrainingError(
                    f"non-finite loss at batch {batch_index}: policy_loss={stats['policy_loss']}, "
                    f"value_loss={stats['value_loss']}, entropy={stats['entropy']}, "
                    f"mean_ratio={stats['mean_ratio']}")
            tape.backward(loss)
            grads, _ = T.clip_grad_norm([p.grad for p in params], config.max_grad_norm)
            T.adam_step(params, grads, adam_state, lr=config.lr)
            history.append(stats)

    mean = {k: float(np.mean([h[k] for h in history])) for k in history[0]}
    eps = config.clip_eps
    if not 1 - 3 * eps <= mean["mean_ratio"] <= 1 + 3 * eps:
        logger.warning("batch %d: mean ratio %.4f outside [%.2f, %.2f]",
                       batch_index, mean["mean_ratio"], 1 - 3 * eps, 1 + 3 * eps)
    return UpdateStats(**mean)


# ============================================
# デプロイ
# ============================================

def _trace_row(env: CircuitEnv, step: int, state: EnvState, r: float) -> Dict:
    row = {"step": step, "reward": r}
    for d, v in zip(env.defs, state.intermediate):
        row[d.name] = float(v)
    for (device, pname), v in zip(env.space.names, state.params):
        row[f"{device}.{pname}"] = float(v)
    return row


def deploy(policy, env: CircuitEnv, goal: np.ndarray, max_steps: Optional[int] = None,
           greedy: bool = True, rng: Optional[np.random.Generator] = None) -> EpisodeResult:
    """
    学習済み方策で1つの目標へ向けてロールアウト

    Args:
        policy: ActorCriticまたはact()を持つエージェント
        env: 環境
        goal: 目標仕様
        max_steps: ステップ上限（省略時は環境の上限）
        greedy: argmaxで行動するか
        rng: サンプリング時の乱数

    Returns:
        EpisodeResult（traceは初期状態を含む各ステップの仕様とパラメータ）
    """
    env = copy.copy(env)
    if max_steps is not None:
        env.max_episode_len = int(max_steps)
    agent = _as_agent(policy, env, greedy=greedy, rng=rng)

    trace = []
    total = 0.0
    success = False
    steps = 0
    try:
        state = env.reset(goal)
        trace.append(_trace_row(env, 0, state, math.nan))
        done = False
        while not done:
            action, _, _ = agent.act(env.observe(state))
            state, r, done = env.step(action)
            steps += 1
            total += r
            trace.append(_trace_row(env, steps, state, r))
            if env.reward_mode == RewardMode.P2S and r == env.bonus:
                success = True
    except EvaluatorError as e:
        logger.warning("evaluator error during deployment after %d steps: %s", steps, e)
        return EpisodeResult(total, steps, False, trace, aborted=True)
    return EpisodeResult(total, steps, success, trace)


def deployment_accuracy(policy, env: CircuitEnv, n_goals: int, max_steps: Optional[int],
                        rng: np.random.Generator) -> Tuple[float, float]:
    """
    サンプリングした目標に対するデプロイ精度

    Returns:
        (成功率, 成功時の平均ステップ数。成功なしならnan)
    """
    if n_goals < 1:
        raise ValueError("n_goals must be >= 1")
    agent = _as_agent(policy, env, greedy=True)
    steps = []
    for _ in range(n_goals):
        result = deploy(agent, env, sample_goal(rng, env.defs), max_steps)
        if result.success:
            steps.append(result.steps_used)
    return len(steps) / n_goals, float(np.mean(steps)) if steps else math.nan


def fom_trace(policy, env: CircuitEnv, max_steps: Optional[int] = None) -> List[float]:
    """greedyロールアウトの各評価のFoM（初期状態を含む、長さ = 評価回数）"""
    goal = np.array([d.sample_lo for d in env.defs])
    result = deploy(policy, env, goal, max_steps)
    return [fom_value(np.array([row[d.name] for d in env.defs]), env.defs)
            for row in result.trace]


def fom_rollout(policy, env: CircuitEnv, max_steps: Optional[int] = None) -> List[float]:
    """greedyロールアウトの評価ごとの最良FoM"""
    return list(np.maximum.accumulate(fom_trace(policy, env, max_steps)))


# ============================================
# 学習ループ
# ============================================

@dataclass
class TrainResult:
    policy: ActorCritic
    metrics: pd.DataFrame
    final_accuracy: float
    final_mean_steps: float
    checkpoint_path: Optional[str] = None
    final_fom: Optional[float] = None
    last_fom: Optional[float] = None
    fom_evals: int = 0
    fom_curve: List[float] = field(default_factory=list)


def _n_batches(config: PPOConfig) -> int:
    return int(math.ceil(config.episodes_total / config.episodes_per_batch))


def train(run_config, seed: int, out_dir=None, fom: bool = False) -> TrainResult:
    """
    PPO学習（収集 → 更新を繰り返す）

    Args:
        run_config: config.RunConfig
        seed: 実行シード
        out_dir: 出力先（省略時は run.output_dir/seed_<seed>）
        fom: FoM報酬で学習するか

    Returns:
        TrainResult
    """
    setup = run_config.circuit_setup()
    ppo_cfg: PPOConfig = run_config.ppo
    env_cfg = run_config.env
    out_dir = seed_dir(run_config.run.output_dir, seed) if out_dir is None else out_dir

    rng_env = rng_stream(seed, "env")
    rng_init = rng_stream(seed, "policy-init")
    rng_sampler = rng_stream(seed, "sampler")
    rng_minibatch = rng_stream(seed, "minibatch")
    rng_eval = rng_stream(seed, "eval")

    graph = setup.graph
    policy = ActorCritic(run_config.policy, graph.n_nodes, graph.n_features,
                         setup.space.size, len(setup.defs), rng_init)
    gi = graph_inputs(graph)
    adam_state = T.AdamState.zeros_like(policy.parameters())

    reward_mode = RewardMode.FOM if fom else RewardMode.P2S
    max_len = env_cfg.max_episode_len or None
    fom_refs = np.array([env_cfg.fom_refs[d.name] for d in setup.defs]) if fom else None

    def make_env(fidelity):
        return setup.make_env(fidelity, max_len, bonus=env_cfg.bonus, reward_mode=reward_mode,
                              fom_refs=fom_refs, initial_state=env_cfg.initial_state)

    train_env = make_env(env_cfg.train_fidelity)
    deploy_env = make_env(env_cfg.deploy_fidelity)

    rows = []
    best_fom = -math.inf
    episodes_cum = 0
    started = time.perf_counter()
    n_batches = _n_batches(ppo_cfg)
    logger.info("seed %d: training %s/%s for %d batches (%d episodes)",
                seed, setup.name, run_config.policy.variant, n_batches, ppo_cfg.episodes_total)

    try:
        for b in range(1, n_batches + 1):
            n_ep = min(ppo_cfg.episodes_per_batch, ppo_cfg.episodes_total - episodes_cum)
            trajectories = collect_trajectories(
                policy, lambda: train_env, lambda: sample_goal(rng_env, setup.defs),
                n_ep, rng_sampler)
            episodes_cum += n_ep
            for traj in trajectories:
                if fom and traj.designs:
                    best_fom = max(best_fom, max(fom_value(d, setup.defs) for d in traj.designs))
                if traj.aborted:
                    continue
                traj.advantages, traj.returns = compute_gae(
                    traj.rewards, traj.values, traj.terminal, ppo_cfg.gamma, ppo_cfg.gae_lambda)

            batch = flatten_batch(trajectories)
            if batch:
                stats = ppo_update(policy, gi, batch, ppo_cfg, adam_state, rng_minibatch, b)
            else:
                logger.warning("batch %d: every episode aborted, skipping update", b)
                stats = UpdateStats(*([math.nan] * 6))

            used = [t for t in trajectories if not t.aborted]
            row = {
                "batch": b,
                "episodes_cum": episodes_cum,
                "mean_ep_reward": float(np.mean([t.episode_return for t in used])) if used else math.nan,
                "mean_ep_len": float(np.mean([len(t) for t in used])) if used else math.nan,
                "policy_loss": stats.policy_loss,
                "value_loss": stats.value_loss,
                "clip_frac": stats.clip_frac,
                "deploy_acc": math.nan,
                "wall_secs": time.perf_counter() - started if run_config.run.record_wall_time else math.nan,
            }
            evaluate_now = b % ppo_cfg.eval_interval == 0 or b == n_batches
            if fom:
                row["best_train_fom"] = best_fom
                row["policy_fom"] = math.nan
                if evaluate_now:
                    row["policy_fom"] = fom_rollout(policy, deploy_env)[-1]
            elif evaluate_now:
                row["deploy_acc"], _ = deployment_accuracy(
                    policy, deploy_env, ppo_cfg.eval_goals, None, rng_eval)
            rows.append(row)

            logger.info("seed %d batch %d/%d: episodes=%d reward=%.4f len=%.1f "
                        "pi_loss=%.4f v_loss=%.4f clip=%.3f ratio=%.3f",
                        seed, b, n_batches, episodes_cum, row["mean_ep_reward"],
                        row["mean_ep_len"], stats.policy_loss, stats.value_loss,
                        stats.clip_frac, stats.mean_ratio)
    except Exception:
        save_checkpoint(policy, f"{out_dir}/{PARTIAL_CHECKPOINT_FILE}", run_config.to_dict(),
                        run_config.config_hash(), setup.describe())
        if rows:
            write_csv(pd.DataFrame(rows), f"{out_dir}/{METRICS_FILE}")
        logger.error("seed %d: training aborted, partial checkpoint written to %s", seed, out_dir)
        raise

    columns = FOM_METRICS_COLUMNS if fom else METRICS_COLUMNS
    metrics = pd.DataFrame(rows, columns=columns)
    write_csv(metrics, f"{out_dir}/{METRICS_FILE}")
    checkpoint_path = f"{out_dir}/{CHECKPOINT_FILE}"
    save_checkpoint(policy, checkpoint_path, run_config.to_dict(), run_config.config_hash(),
                    setup.describe())

    result = TrainResult(policy, metrics, math.nan, math.nan, checkpoint_path)
    if fom:
        foms = fom_trace(policy, deploy_env)
        result.fom_curve = list(np.maximum.accumulate(foms))
        result.final_fom, result.fom_evals = result.fom_curve[-1], len(result.fom_curve)
        result.last_fom = foms[-1]
        logger.info("seed %d: best policy FoM %.4f, final state FoM %.4f (%d fine evaluations)",
                    seed, result.final_fom, result.last_fom, result.fom_evals)
    else:
        result.final_accuracy, result.final_mean_steps = deployment_accuracy(
            policy, deploy_env, ppo_cfg.final_eval_goals, None, rng_eval)
        logger.info("seed %d: final deployment accuracy %.3f over %d goals",
                    seed, result.final_accuracy, ppo_cfg.final_eval_goals)
    return result


def train_fom(run_config, seed: int, out_dir=None) -> TrainResult:
    """FoM報酬（ボーナスなし・固定長エピソード）で学習"""
    return train(run_config, seed, out_dir, fom=True)
