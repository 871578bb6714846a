"""Leader Reward advantage shaping and the two training phases."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NonFiniteGradientError, Tensor
from .checkpoint import Checkpoint
from .errors import ConfigError, ParameterError, TrainingDiverged
from .policy import SAMPLING, AttentionPolicy, PolicyConfig, RolloutBatch, leader_logprob_telemetry, rollout_batch
from .problems import HELD_KARP_MAX, TSP, held_karp, sample_instance

ORACLE_AUTO_MAX = 12


@dataclass
class TrainConfig:
    kind: str = TSP
    size: int = 10
    alpha: float | None = 5.0  # None: plain POMO advantages in the main phase
    batch_size: int = 32
    num_starts: int = 10
    steps_main: int = 2000
    steps_final: int = 0
    steps_tail: int = 0
    lr_main: float = 1e-3
    lr_final: float = 5.5e-5
    lr_tail: float = 5.5e-6
    lr_schedule: list = field(default_factory=list)  # [(step, multiplier)] within the main phase
    seed: int = 1
    report_interval: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def validate(self, phase: str = "main") -> None:
        if phase == "main" and self.alpha is not None:
            if not (math.isfinite(self.alpha) and self.alpha > 1):
                raise ConfigError(f"alpha must satisfy α>1 (finite) in the main phase, got {self.alpha}")
        for name in ("lr_main", "lr_final", "lr_tail"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.num_starts < 2:
            raise ConfigError("num_starts must be >= 2 (the shared baseline needs several rollouts)")
        for name in ("steps_main", "steps_final", "steps_tail"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.report_interval < 1:
            raise ConfigError("report_interval must be >= 1")
        for s, m in self.lr_schedule:
            if s < 0 or not m > 0:
                raise ConfigError(f"bad lr_schedule entry ({s}, {m})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_schedule"] = [list(x) for x in self.lr_schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["lr_schedule"] = [tuple(x) for x in d.get("lr_schedule", [])]
        return cls(**d)

    def main_lr(self, phase_step: int) -> float:
        mult = 1.0
        for s, m in sorted(self.lr_schedule):
            if phase_step >= s:
                mult = m
        return self.lr_main * mult


# ---------------------------------------------------------------- advantages


@dataclass
class AdvantageMatrix:
    values: np.ndarray
    leader_index: np.ndarray


def _centered(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 2:
        raise ParameterError(f"rewards must be a (B, N) matrix, got shape {r.shape}")
    if r.shape[1] < 2:
        raise ParameterError("need N >= 2 rollouts per instance for a mean baseline")
    # shifting by the first entry makes constant rows center to exact zeros
    shift = r[:, :1]
    d = r - shift
    return d - d.mean(axis=1, keepdims=True)


def baseline(rewards) -> np.ndarray:
    return np.asarray(rewards, dtype=np.float64).mean(axis=1)


def compute_advantage_main(rewards, alpha: float) -> AdvantageMatrix:
    """Non-leaders get ``(R - b) / alpha``, the leader keeps ``R - b``."""
    if not (math.isfinite(alpha) and alpha > 1):
        raise ParameterError(f"main-phase alpha must satisfy α>1 and be finite, got {alpha}")
    c = _centered(rewards)
    leader = c.argmax(axis=1)
    rows = np.arange(len(c))
    values = c / alpha
    values[rows, leader] = c[rows, leader]
    return AdvantageMatrix(values, leader)


def compute_advantage_eq1(rewards, alpha: float) -> AdvantageMatrix:
    """Multiplicative form: leader gets ``alpha * (R - b)``, others ``R - b``."""
    if not (math.isfinite(alpha) and alpha > 1):
        raise ParameterError(f"alpha must satisfy α>1 and be finite, got {alpha}")
    c = _centered(rewards)
    leader = c.argmax(axis=1)
    rows = np.arange(len(c))
    values = c.copy()
    values[rows, leader] = alpha * c[rows, leader]
    return AdvantageMatrix(values, leader)


def compute_advantage_final(rewards) -> AdvantageMatrix:
    """Only the leader carries signal (alpha = +inf)."""
    c = _centered(rewards)
    leader = c.argmax(axis=1)
    rows = np.arange(len(c))
    values = np.zeros_like(c)
    values[rows, leader] = c[rows, leader]
    return AdvantageMatrix(values, leader)


def compute_advantage_pomo(rewards) -> AdvantageMatrix:
    c = _centered(rewards)
    return AdvantageMatrix(c, c.argmax(axis=1))


def surrogate_loss(batch: RolloutBatch, adv: AdvantageMatrix) -> Tensor:
    """Negated policy-gradient objective ``-(1/BN) sum A * log p``; advantages are constants."""
    lp = batch.log_prob_tensor
    if lp is None:
        raise ParameterError("rollout batch was not recorded on a tape")
    if lp.shape != adv.values.shape:
        raise ad.DimensionError(f"log-prob shape {lp.shape} vs advantage shape {adv.values.shape}")
    if not np.all(np.isfinite(lp.data)):
        raise FloatingPointError("non-finite trajectory log-probability")
    B, N = lp.shape
    weights = np.asarray(adv.values, dtype=lp.dtype)
    return ad.mul(lp, weights).sum() * (-1.0 / (B * N))


# ---------------------------------------------------------------- entropy probe


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def _softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def entropy_gradient(logits, leader_index: int) -> float:
    """Closed form dH/dz_leader = p*(-ln p* - H)."""
    p = _softmax(logits)
    pl = p[leader_index]
    return float(pl * (-math.log(pl) - entropy(p)))


def entropy_probe(logits, leader_index: int, step_size: float = 1e-4) -> tuple[float, float]:
    """Entropy before and after raising the leader logit by ``step_size``."""
    z = np.asarray(logits, dtype=np.float64)
    before = entropy(_softmax(z))
    z2 = z.copy()
    z2[leader_index] += step_size
    return before, entropy(_softmax(z2))


# ---------------------------------------------------------------- training loops


@dataclass
class PhaseReport:
    step: int
    phase: str
    lr: float
    loss: float
    mean_reward: float
    best_of_N_gap: float | None
    entropy_mean: float
    leader_logprob: float
    max_logprob: float
    leader_below_max_frac: float
    cost_mean: float
    cost_variance: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    policy: AttentionPolicy
    adam: AdamState
    rng: np.random.Generator
    step: int = 0
    phase: str = "main"
    history: list = field(default_factory=list)

    def checkpoint(self, config: TrainConfig, metadata: dict | None = None) -> Checkpoint:
        return Checkpoint.capture(self.policy, self.adam, self.rng, self.phase, self.step, config.to_dict(), metadata)

    @classmethod
    def fresh(cls, config: TrainConfig, policy_config: PolicyConfig | None = None) -> "TrainState":
        pc = policy_config or PolicyConfig(kind=config.kind)
        policy = AttentionPolicy(pc, seed=config.seed)
        adam = AdamState(config.lr_main, config.adam_beta1, config.adam_beta2, config.adam_epsilon)
        return cls(policy, adam, np.random.default_rng(config.seed))

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, config: TrainConfig | None = None) -> "TrainState":
        adam = ckpt.adam_state()
        if adam is None:
            cfg = config or TrainConfig()
            adam = AdamState(cfg.lr_main, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon)
        rng = ckpt.rng() or np.random.default_rng((config or TrainConfig()).seed)
        return cls(ckpt.policy(), adam, rng, ckpt.step, ckpt.phase)


class _Accumulator:
    def __init__(self):
        self.rows = []
        self.leader_below = 0
        self.instances = 0

    def add(self, batch: RolloutBatch, loss: float):
        lead, mx = leader_logprob_telemetry(batch)
        costs = batch.costs
        self.leader_below += int((lead < mx).sum())
        self.instances += len(lead)
        self.rows.append((loss, batch.rewards.mean(), batch.entropy, lead.mean(), mx.mean(),
                          costs.mean(), costs.var(axis=1).mean()))

    def report(self, step, phase, lr, gap) -> PhaseReport:
        a = np.mean(np.array(self.rows, dtype=np.float64), axis=0)
        return PhaseReport(
            step=step, phase=phase, lr=lr, loss=float(a[0]), mean_reward=float(a[1]), best_of_N_gap=gap,
            entropy_mean=float(a[2]), leader_logprob=float(a[3]), max_logprob=float(a[4]),
            leader_below_max_frac=self.leader_below / max(self.instances, 1),
            cost_mean=float(a[5]), cost_variance=float(a[6]),
        )


def batch_gap(batch: RolloutBatch) -> float | None:
    """Mean best-of-N gap of a batch against Held-Karp optima."""
    inst = batch.instances
    if inst[0].kind != TSP or inst[0].num_nodes > HELD_KARP_MAX:
        return None
    opt = np.array([held_karp(i).optimal_cost for i in inst])
    return float((batch.costs.min(axis=1) / opt - 1.0).mean())


def _use_oracle(config: TrainConfig, oracle: bool | None) -> bool:
    if oracle is None:
        return config.kind == TSP and config.size <= ORACLE_AUTO_MAX
    return bool(oracle) and config.kind == TSP and config.size <= HELD_KARP_MAX


def _run_phase(
    state: TrainState,
    config: TrainConfig,
    schedule: list[tuple[int, float]],
    advantage: Callable[[np.ndarray], AdvantageMatrix],
    phase: str,
    oracle: bool,
    on_report: Callable[[PhaseReport], None] | None,
    on_step: Callable[[TrainState], None] | None,
) -> list[PhaseReport]:
    reports: list[PhaseReport] = []
    acc = _Accumulator()
    state.phase = phase
    for lr, n_steps in schedule:
        for _ in range(n_steps):
            instances = [sample_instance(config.kind, config.size, state.rng) for _ in range(config.batch_size)]
            with ad.Tape():
                try:
                    batch = rollout_batch(state.policy, instances, config.num_starts, SAMPLING, state.rng)
                    adv = advantage(batch.rewards)
                    loss = surrogate_loss(batch, adv)
                except FloatingPointError as exc:
                    raise TrainingDiverged(f"step {state.step + 1}: {exc}", state.checkpoint(config)) from exc
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(f"non-finite loss at step {state.step + 1}", state.checkpoint(config))
                grads = ad.backward(loss, state.policy.params)
            step_lr = lr(state) if callable(lr) else lr
            try:
                ad.adam_step(state.policy.params, grads, state.adam, learning_rate=step_lr)
            except NonFiniteGradientError as exc:
                raise TrainingDiverged(f"step {state.step + 1}: {exc}", state.checkpoint(config)) from exc
            state.step += 1
            acc.add(batch, float(loss.data))
            if state.step % config.report_interval == 0:
                rep = acc.report(state.step, phase, step_lr, batch_gap(batch) if oracle else None)
                reports.append(rep)
                state.history.append(rep)
                if on_report:
                    on_report(rep)
                acc = _Accumulator()
            if on_step:
                on_step(state)
    return reports


def train_main(
    config: TrainConfig,
    state: TrainState | None = None,
    oracle: bool | None = None,
    on_report=None,
    on_step=None,
    policy_config: PolicyConfig | None = None,
    until: int | None = None,
) -> tuple[Checkpoint, list[PhaseReport]]:
    """Main phase: sampled multi-start rollouts with Leader Reward (or plain POMO if ``alpha`` is None).

    Runs ``config.steps_main`` steps, or up to global step ``until`` when
    resuming.  The learning-rate schedule is indexed by global step.
    """
    config.validate("main")
    state = state or TrainState.fresh(config, policy_config)
    n_steps = config.steps_main if until is None else max(0, until - state.step)
    if config.alpha is None:
        advantage = compute_advantage_pomo
    else:
        alpha = config.alpha
        advantage = lambda r: compute_advantage_main(r, alpha)  # noqa: E731
    lr = lambda s: config.main_lr(s.step)  # noqa: E731
    reports = _run_phase(state, config, [(lr, n_steps)], advantage, "main",
                         _use_oracle(config, oracle), on_report, on_step)
    return state.checkpoint(config), reports


def train_final(
    config: TrainConfig,
    state: TrainState,
    oracle: bool | None = None,
    on_report=None,
    on_step=None,
) -> tuple[Checkpoint, list[PhaseReport]]:
    """Final phase: leader-only advantages at ``lr_final``, then an optional tail at ``lr_tail``."""
    config.validate("final")
    schedule = [(config.lr_final, config.steps_final), (config.lr_tail, config.steps_tail)]
    reports = _run_phase(state, config, schedule, compute_advantage_final, "final",
                         _use_oracle(config, oracle), on_report, on_step)
    state.phase = "final"
    return state.checkpoint(config), reports
