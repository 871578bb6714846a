"""Attention encoder-decoder policy with POMO multi-start rollouts."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParameterError
from .problems import (
    CVRP,
    TSP,
    BatchEnv,
    EnvState,
    ProblemInstance,
    batch_route_lengths,
    trim_cvrp,
)

GREEDY = "greedy"
SAMPLING = "sampling"
FORCED = "forced"


@dataclass(frozen=True)
class PolicyConfig:
    kind: str = TSP
    embed_dim: int = 64
    num_heads: int = 4
    num_encoder_layers: int = 2
    ff_dim: int = 128
    logit_clip: float = 10.0
    max_nodes: int = 256

    def __post_init__(self):
        if self.kind not in (TSP, CVRP):
            raise ParameterError(f"unknown problem kind {self.kind!r}")
        for name in ("embed_dim", "num_heads", "num_encoder_layers", "ff_dim", "max_nodes"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")
        if self.embed_dim % self.num_heads:
            raise ParameterError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if not self.logit_clip > 0:
            raise ParameterError("logit_clip must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Trajectory:
    actions: tuple[int, ...]
    log_prob: float
    reward: float
    start_node: int


@dataclass
class RolloutBatch:
    instances: list[ProblemInstance]
    actions: np.ndarray  # (B, N, T), CVRP rows padded with depot visits
    log_prob: np.ndarray  # (B, N)
    rewards: np.ndarray  # (B, N)
    start_nodes: np.ndarray  # (B, N)
    mode: str
    entropy: float = 0.0
    log_prob_tensor: Tensor | None = None

    @property
    def baseline(self) -> np.ndarray:
        return self.rewards.mean(axis=1)

    @property
    def costs(self) -> np.ndarray:
        return -self.rewards

    def trajectory(self, i: int, j: int) -> Trajectory:
        acts = self.actions[i, j].tolist()
        if self.instances[i].kind == CVRP:
            acts = trim_cvrp(acts)
        return Trajectory(tuple(acts), float(self.log_prob[i, j]), float(self.rewards[i, j]), int(self.start_nodes[i, j]))

    def trajectories(self, i: int) -> list[Trajectory]:
        return [self.trajectory(i, j) for j in range(self.actions.shape[1])]


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class AttentionPolicy:
    """POMO-style policy.  ``params`` maps names to leaf tensors."""

    def __init__(self, config: PolicyConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.params = self._init_params(np.random.default_rng(seed), dtype)

    def _init_params(self, rng, dtype) -> dict[str, Tensor]:
        c = self.config
        d, f = c.embed_dim, c.ff_dim
        p: dict[str, np.ndarray] = {}
        if c.kind == TSP:
            p["enc.embed.w"] = _uniform(rng, 2, (2, d), dtype)
            p["enc.embed.b"] = _uniform(rng, 2, (d,), dtype)
        else:
            p["enc.depot.w"] = _uniform(rng, 2, (2, d), dtype)
            p["enc.depot.b"] = _uniform(rng, 2, (d,), dtype)
            p["enc.cust.w"] = _uniform(rng, 3, (3, d), dtype)
            p["enc.cust.b"] = _uniform(rng, 3, (d,), dtype)
        for layer in range(c.num_encoder_layers):
            k = f"enc.{layer}."
            for w in ("wq", "wk", "wv", "wo"):
                p[k + w] = _uniform(rng, d, (d, d), dtype)
            p[k + "bo"] = _uniform(rng, d, (d,), dtype)
            p[k + "ln1.g"] = np.ones(d, dtype)
            p[k + "ln1.b"] = np.zeros(d, dtype)
            p[k + "ff1.w"] = _uniform(rng, d, (d, f), dtype)
            p[k + "ff1.b"] = _uniform(rng, d, (f,), dtype)
            p[k + "ff2.w"] = _uniform(rng, f, (f, d), dtype)
            p[k + "ff2.b"] = _uniform(rng, f, (d,), dtype)
            p[k + "ln2.g"] = np.ones(d, dtype)
            p[k + "ln2.b"] = np.zeros(d, dtype)
        if c.kind == TSP:
            p["dec.wq_first"] = _uniform(rng, d, (d, d), dtype)
        else:
            p["dec.w_load"] = _uniform(rng, d, (1, d), dtype)
        for w in ("wq_last", "wk", "wv", "wo"):
            p["dec." + w] = _uniform(rng, d, (d, d), dtype)
        p["dec.bo"] = _uniform(rng, d, (d,), dtype)
        return {name: Tensor(arr, requires_grad=True, name=name) for name, arr in p.items()}

    # ------------------------------------------------------------------ utils

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def decoder_param_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("dec.")]

    def copy(self) -> "AttentionPolicy":
        other = object.__new__(AttentionPolicy)
        other.config = self.config
        other.params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return other

    def astype(self, dtype) -> "AttentionPolicy":
        other = self.copy()
        for t in other.params.values():
            t.data = t.data.astype(dtype)
        return other

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = sorted(set(self.params) - set(arrays))
            extra = sorted(set(arrays) - set(self.params))
            raise ParameterError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        for k, arr in arrays.items():
            if arr.shape != self.params[k].shape:
                raise ParameterError(f"parameter {k!r}: shape {arr.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=self.dtype)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()

    def num_parameters(self) -> int:
        return sum(v.data.size for v in self.params.values())

    # ------------------------------------------------------------------ network

    def _inputs(self, instances: Sequence[ProblemInstance]):
        n = instances[0].num_nodes
        if n > self.config.max_nodes:
            raise ParameterError(f"instance size {n} exceeds policy support ({self.config.max_nodes})")
        for inst in instances:
            if inst.kind != self.config.kind:
                raise ParameterError(f"{inst.kind} instance given to a {self.config.kind} policy")
        coords = np.stack([inst.policy_coords() for inst in instances]).astype(self.dtype)
        dem = None
        if self.config.kind == CVRP:
            dem = np.stack([inst.demands / inst.capacity for inst in instances]).astype(self.dtype)
        return coords, dem

    def encode_batch(self, coords: np.ndarray, demand_frac: np.ndarray | None = None) -> Tensor:
        """Node embeddings ``(B, n, d)`` for raw input arrays."""
        c, p = self.config, self.params
        if c.kind == TSP:
            h = Tensor(coords) @ p["enc.embed.w"] + p["enc.embed.b"]
        else:
            feats = np.concatenate([coords, demand_frac[..., None]], axis=-1)
            is_depot = np.zeros(coords.shape[:2] + (1,), dtype=coords.dtype)
            is_depot[:, 0] = 1
            depot = Tensor(coords) @ p["enc.depot.w"] + p["enc.depot.b"]
            cust = Tensor(feats) @ p["enc.cust.w"] + p["enc.cust.b"]
            h = ad.mul(depot, is_depot) + ad.mul(cust, 1 - is_depot)
        B, n, d = h.shape
        H = c.num_heads
        dk = d // H
        for layer in range(c.num_encoder_layers):
            k = f"enc.{layer}."
            q = _heads(h @ p[k + "wq"], H)
            kk = _heads(h @ p[k + "wk"], H)
            v = _heads(h @ p[k + "wv"], H)
            att = ad.softmax((q @ kk.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk)))
            o = _merge(att @ v) @ p[k + "wo"] + p[k + "bo"]
            h = ad.layer_norm(h + o, p[k + "ln1.g"], p[k + "ln1.b"])
            ff = ad.relu(h @ p[k + "ff1.w"] + p[k + "ff1.b"]) @ p[k + "ff2.w"] + p[k + "ff2.b"]
            h = ad.layer_norm(h + ff, p[k + "ln2.g"], p[k + "ln2.b"])
        return h

    def encode(self, instance: ProblemInstance) -> Tensor:
        coords, dem = self._inputs([instance])
        h = self.encode_batch(coords, dem)
        return h.reshape(h.shape[1:])

    def decoder_cache(self, h: Tensor) -> "_Cache":
        p = self.params
        H = self.config.num_heads
        cache = _Cache(
            h=h,
            k=_heads(h @ p["dec.wk"], H),
            v=_heads(h @ p["dec.wv"], H),
            single_key=h.transpose(0, 2, 1),
            q_first=(h @ p["dec.wq_first"]) if self.config.kind == TSP else None,
        )
        return cache

    def decode(self, cache: "_Cache", current, first, load, mask) -> Tensor:
        """Log-probabilities ``(B, M, n)`` of the next action for every row."""
        c, p = self.config, self.params
        d = cache.h.shape[-1]
        H = c.num_heads
        q = ad.gather_rows(cache.h, current) @ p["dec.wq_last"]
        if c.kind == TSP:
            q = q + ad.gather_rows(cache.q_first, first)
        else:
            q = q + ad.mul(p["dec.w_load"], load[..., None].astype(cache.h.dtype))
        qh = _heads(q, H)
        scores = (qh @ cache.k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d // H))
        att = ad.masked_softmax(scores, mask[:, None])
        glimpse = _merge(att @ cache.v) @ p["dec.wo"] + p["dec.bo"]
        logits = (glimpse @ cache.single_key) * (1.0 / math.sqrt(d))
        clipped = ad.tanh(logits) * c.logit_clip
        return ad.masked_log_softmax(clipped, mask)


@dataclass
class _Cache:
    h: Tensor
    k: Tensor
    v: Tensor
    single_key: Tensor
    q_first: Tensor | None


def _heads(x: Tensor, H: int) -> Tensor:
    B, M, d = x.shape
    return x.reshape(B, M, H, d // H).transpose(0, 2, 1, 3)


def _merge(x: Tensor) -> Tensor:
    B, H, M, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, M, H * dk)


# ---------------------------------------------------------------------- API


def select_start_nodes(instance: ProblemInstance, N: int) -> np.ndarray:
    limit = instance.num_customers
    if not 1 <= N <= limit:
        raise ParameterError(f"number of starts must be in [1, {limit}], got {N}")
    if instance.kind == TSP:
        return np.arange(N)
    return np.arange(1, N + 1)


def decode_step(policy: AttentionPolicy, embeddings: Tensor, state: EnvState, instance: ProblemInstance) -> np.ndarray:
    """Action distribution for a single environment state."""
    if state.done:
        raise ParameterError("state is terminal")
    if instance.kind == TSP and not state.route:
        raise ParameterError("the TSP start node is selected, not decoded")
    mask = state.feasible(instance)
    if not mask.any():
        raise ad.InfeasibilityError("empty feasible set")
    h = embeddings if embeddings.ndim == 3 else embeddings.reshape((1,) + embeddings.shape)
    cache = policy.decoder_cache(h)
    first = state.route[0] if state.route else 0
    load = np.array([[state.remaining / instance.capacity if instance.kind == CVRP else 0.0]])
    logp = policy.decode(
        cache,
        np.array([[max(state.current, 0)]]),
        np.array([[first]]),
        load,
        mask[None, None],
    )
    return np.exp(logp.data[0, 0].astype(np.float64))


@dataclass
class _RunOutput:
    actions: np.ndarray
    log_prob: Tensor
    rewards: np.ndarray
    entropy: float


def _sample(logp: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    p = np.exp(logp.astype(np.float64))
    c = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[:-1])
    a = (c <= (u * c[..., -1])[..., None]).sum(axis=-1)
    last = mask.shape[-1] - 1 - np.argmax(mask[..., ::-1], axis=-1)
    return np.minimum(a, last)


def run_policy(
    policy: AttentionPolicy,
    instances: Sequence[ProblemInstance],
    prefix: np.ndarray,
    mode: str,
    rng: np.random.Generator | None = None,
    forced: np.ndarray | None = None,
    cache: "_Cache | None" = None,
) -> _RunOutput:
    """Core batched rollout.

    ``prefix`` (B, M, t) holds actions applied without scoring (start nodes,
    or beam prefixes).  In ``forced`` mode the remaining actions come from
    ``forced`` (B, M, T) and only their log-probabilities are computed.  Under
    an active tape the summed log-probability is differentiable.
    """
    prefix = np.asarray(prefix, dtype=np.int64)
    B, M, t0 = prefix.shape
    coords, dem = policy._inputs(instances)
    if cache is None:
        cache = policy.decoder_cache(policy.encode_batch(coords, dem))
    env = BatchEnv.for_instances(instances, M)
    for t in range(t0):
        env.step(prefix[..., t])
    n = coords.shape[1]
    max_steps = n if instances[0].kind == TSP else 2 * n + 1
    total: Tensor | None = None
    ent_sum = 0.0
    ent_cnt = 0
    t = t0
    while not env.done.all():
        if t >= max_steps:
            raise RuntimeError("rollout did not terminate")
        mask = env.mask()
        load = env.remaining / env.capacity if env.kind == CVRP else None
        logp = policy.decode(cache, env.current, env.first, load, mask)
        ld = logp.data
        if not np.isfinite(np.where(mask, ld, 0.0)).all():
            raise FloatingPointError(f"non-finite action log-probabilities at step {t}")
        if mode == GREEDY:
            action = ld.argmax(axis=-1)
        elif mode == SAMPLING:
            action = _sample(ld, mask, rng)
        elif mode == FORCED:
            if t >= forced.shape[-1]:
                raise ParameterError("forced action sequence ended before the episode")
            action = forced[..., t]
            if not np.take_along_axis(mask, action[..., None], -1).all():
                raise ParameterError(f"forced action infeasible at step {t}")
        else:
            raise ParameterError(f"unknown rollout mode {mode!r}")
        active = ~env.done
        if active.any():
            p = np.exp(ld.astype(np.float64))
            h = -np.where(mask, p * np.where(mask, ld, 0.0), 0.0).sum(axis=-1)
            ent_sum += float(h[active].sum())
            ent_cnt += int(active.sum())
        chosen = ad.take_along_last(logp, action)
        total = chosen if total is None else total + chosen
        env.step(action, check=False)
        t += 1
    actions = env.action_array()
    if total is None:
        total = Tensor(np.zeros((B, M), dtype=policy.dtype))
    rewards = -batch_route_lengths(np.stack([i.coords for i in instances]), actions, instances[0].kind)
    return _RunOutput(actions, total, rewards, ent_sum / max(ent_cnt, 1))


def start_prefix(instances: Sequence[ProblemInstance], N: int) -> np.ndarray:
    starts = np.stack([select_start_nodes(inst, N) for inst in instances])
    return starts[..., None]


def rollout_batch(
    policy: AttentionPolicy,
    instances: Sequence[ProblemInstance],
    num_starts: int,
    mode: str,
    rng: np.random.Generator | None = None,
) -> RolloutBatch:
    prefix = start_prefix(instances, num_starts)
    out = run_policy(policy, instances, prefix, mode, rng)
    lp = out.log_prob
    return RolloutBatch(
        instances=list(instances),
        actions=out.actions,
        log_prob=lp.data.astype(np.float64),
        rewards=out.rewards,
        start_nodes=prefix[..., 0],
        mode=mode,
        entropy=out.entropy,
        log_prob_tensor=lp if lp.requires_grad else None,
    )


def rollout(
    policy: AttentionPolicy,
    instance: ProblemInstance,
    start_nodes: Sequence[int],
    mode: str,
    rng: np.random.Generator | None = None,
) -> list[Trajectory]:
    prefix = np.asarray(start_nodes, dtype=np.int64)[None, :, None]
    out = run_policy(policy, [instance], prefix, mode, rng)
    batch = RolloutBatch([instance], out.actions, out.log_prob.data.astype(np.float64), out.rewards, prefix[..., 0], mode)
    return batch.trajectories(0)


def next_log_probs(
    policy: AttentionPolicy,
    instances: Sequence[ProblemInstance],
    prefix: np.ndarray,
    cache: "_Cache | None" = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Replay ``prefix`` (B, M, t) and return next-step log-probs, feasibility mask and done flags."""
    prefix = np.asarray(prefix, dtype=np.int64)
    coords, dem = policy._inputs(instances)
    if cache is None:
        cache = policy.decoder_cache(policy.encode_batch(coords, dem))
    env = BatchEnv.for_instances(instances, prefix.shape[1])
    for t in range(prefix.shape[-1]):
        env.step(prefix[..., t])
    mask = env.mask()
    load = env.remaining / env.capacity if env.kind == CVRP else None
    if env.kind == TSP and env.done.all():
        return np.zeros(mask.shape), mask, env.done
    safe = mask | ~mask.any(axis=-1, keepdims=True)
    logp = policy.decode(cache, env.current, env.first, load, safe)
    return logp.data, mask, env.done


def trajectory_log_prob(policy: AttentionPolicy, instances: Sequence[ProblemInstance], actions: np.ndarray) -> Tensor:
    """Differentiable log-probability of frozen action sequences ``(B, N, T)``."""
    actions = np.asarray(actions, dtype=np.int64)
    return run_policy(policy, instances, actions[..., :1], FORCED, forced=actions).log_prob


def leader_logprob_telemetry(batch: RolloutBatch) -> tuple[np.ndarray, np.ndarray]:
    """Per instance: log-prob of the best-reward trajectory and the max log-prob."""
    leader = batch.rewards.argmax(axis=1)
    lead_lp = batch.log_prob[np.arange(len(leader)), leader]
    return lead_lp, batch.log_prob.max(axis=1)
