"""Evaluation strategies: greedy (with x8 augmentation), sampling, SGBS, EAS and their interleaving."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .checkpoint import Checkpoint
from .errors import ParameterError
from .policy import (
    GREEDY,
    SAMPLING,
    AttentionPolicy,
    next_log_probs,
    run_policy,
    start_prefix,
)
from .problems import (
    CVRP,
    TSP,
    ProblemInstance,
    batch_route_lengths,
    dihedral_coords,
    gap,
    trim_cvrp,
)
from .training import compute_advantage_main

STRATEGIES = ("greedy", "greedy_aug8", "sampling", "sgbs", "eas", "sgbs_eas")

# default search settings per problem kind: (beta, sgbs_gamma, eas iterations per SGBS pass, eas alpha)
KIND_DEFAULTS = {TSP: (10, 10, 20, 40.0), CVRP: (4, 4, 3, 10.0)}

# rows x nodes x heads budget for one batched forward pass
_CHUNK_BUDGET = 2_000_000


@dataclass
class EvalConfig:
    strategy: str = "greedy"
    K: int = 128
    sgbs_beta: int = 10
    sgbs_gamma: int = 10
    eas_iters: int = 100
    eas_iters_per_sgbs: int = 20
    eas_alpha: float = 40.0
    eas_lr: float = 1e-4
    time_budget: float | None = None
    num_starts: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if self.K < 1:
            raise ParameterError(f"K must be >= 1, got {self.K}")
        if self.sgbs_beta < 1:
            raise ParameterError(f"sgbs_beta must be >= 1, got {self.sgbs_beta}")
        if self.sgbs_gamma < 2:
            raise ParameterError(f"sgbs_gamma must be >= 2, got {self.sgbs_gamma}")
        if self.eas_iters < 0 or self.eas_iters_per_sgbs < 1:
            raise ParameterError("eas_iters must be >= 0 and eas_iters_per_sgbs >= 1")
        if not (math.isfinite(self.eas_alpha) and self.eas_alpha > 1):
            raise ParameterError(f"eas_alpha must satisfy α>1, got {self.eas_alpha}")
        if not self.eas_lr > 0:
            raise ParameterError("eas_lr must be positive")
        if self.time_budget is not None and not self.time_budget > 0:
            raise ParameterError("time_budget must be positive")

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> "EvalConfig":
        beta, gamma, per_sgbs, alpha = KIND_DEFAULTS[kind]
        base = dict(sgbs_beta=beta, sgbs_gamma=gamma, eas_iters_per_sgbs=per_sgbs, eas_alpha=alpha)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EvalResult:
    strategy: str
    instance_ids: list[str]
    costs: np.ndarray
    solutions: list[tuple[int, ...]]
    optima: list[float | None]
    wall_clock: float
    k_curve: dict[int, float] = field(default_factory=dict)
    k_curve_gap: dict[int, float | None] = field(default_factory=dict)
    candidates: list[np.ndarray] | None = None

    @property
    def gaps(self) -> list[float | None]:
        return [gap(float(c), o) for c, o in zip(self.costs, self.optima)]

    @property
    def mean_gap(self) -> float | None:
        g = [x for x in self.gaps if x is not None]
        return float(np.mean(g)) if g else None

    @property
    def mean_cost(self) -> float:
        return float(np.mean(self.costs)) if len(self.costs) else float("nan")

    def records(self) -> list[dict]:
        return [
            {
                "id": iid,
                "strategy": self.strategy,
                "cost": float(c),
                "optimum": o,
                "gap": g,
                "solution": list(s),
            }
            for iid, c, o, g, s in zip(self.instance_ids, self.costs, self.optima, self.gaps, self.solutions)
        ]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def k_curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["K", "mean_cost", "mean_gap"])
        for k in sorted(self.k_curve):
            g = self.k_curve_gap.get(k)
            w.writerow([k, repr(self.k_curve[k]), "n/a" if g is None else repr(g)])
        return buf.getvalue()

    def summary(self) -> dict:
        known = sum(o is not None for o in self.optima)
        return {
            "strategy": self.strategy,
            "instances": len(self.instance_ids),
            "mean_cost": self.mean_cost,
            "mean_gap": self.mean_gap,
            "instances_with_optimum": known,
            "wall_clock": self.wall_clock,
        }


# ------------------------------------------------------------------ helpers


def as_policy(model) -> AttentionPolicy:
    if isinstance(model, AttentionPolicy):
        return model
    if isinstance(model, Checkpoint):
        return model.policy()
    raise ParameterError(f"expected a policy or checkpoint, got {type(model).__name__}")


def uses_rounding(instance: ProblemInstance) -> bool:
    """Instances read from library files are scored with integer-rounded edges."""
    return instance.scale_hint is not None


def solution_costs(instance: ProblemInstance, actions: np.ndarray) -> np.ndarray:
    """Cost of each row of ``actions`` (M, T) in the instance's own units."""
    actions = np.asarray(actions, dtype=np.int64)
    return batch_route_lengths(instance.coords[None], actions[None], instance.kind, uses_rounding(instance))[0]


def _clean(instance: ProblemInstance, row: np.ndarray) -> tuple[int, ...]:
    acts = [int(a) for a in row]
    return tuple(trim_cvrp(acts) if instance.kind == CVRP else acts)


def _groups(instances: Sequence[ProblemInstance]) -> dict[tuple, list[int]]:
    out: dict[tuple, list[int]] = {}
    for i, inst in enumerate(instances):
        out.setdefault((inst.kind, inst.num_nodes), []).append(i)
    return out


def _chunk_size(rows: int, n: int, heads: int) -> int:
    return max(1, _CHUNK_BUDGET // max(1, rows * n * heads))


def _num_starts(instance: ProblemInstance, requested: int | None) -> int:
    limit = instance.num_customers
    return limit if requested is None else min(requested, limit)


def _check_support(policy: AttentionPolicy, instances: Sequence[ProblemInstance]) -> None:
    for inst in instances:
        if inst.num_nodes > policy.config.max_nodes:
            raise ParameterError(
                f"instance {inst.id!r} has {inst.num_nodes} nodes, policy supports {policy.config.max_nodes}"
            )
        if inst.kind != policy.config.kind:
            raise ParameterError(f"{inst.kind} instance {inst.id!r} given to a {policy.config.kind} policy")


def _policy_view(instance: ProblemInstance, coords: np.ndarray | None = None) -> ProblemInstance:
    """Instance in policy coordinates; actions index the same nodes as the original."""
    c = instance.policy_coords() if coords is None else coords
    return ProblemInstance(instance.kind, c, instance.demands, instance.capacity, instance.id)


def _best(instance: ProblemInstance, cand: np.ndarray) -> tuple[float, tuple[int, ...], np.ndarray]:
    costs = solution_costs(instance, cand)
    j = int(np.argmin(costs))
    return float(costs[j]), _clean(instance, cand[j]), costs


def _pad_rows(rows: list[np.ndarray], fill: int = 0) -> np.ndarray:
    T = max(r.shape[-1] for r in rows)
    out = []
    for r in rows:
        if r.shape[-1] < T:
            r = np.concatenate([r, np.full(r.shape[:-1] + (T - r.shape[-1],), fill, dtype=r.dtype)], axis=-1)
        out.append(r)
    return np.concatenate(out, axis=0)


def best_of_k_curve(costs: np.ndarray, ks: Sequence[int]) -> np.ndarray:
    """Expected best-of-k cost per instance, estimated from all K samples.

    Uses the order-statistic estimator ``sum_i c_(i) C(K-i, k-1) / C(K, k)``,
    i.e. the average of the minimum over every k-subset.  It equals the mean at
    k=1, the minimum at k=K and is non-increasing in k.
    """
    c = np.sort(np.asarray(costs, dtype=np.float64), axis=-1)
    K = c.shape[-1]
    out = []
    for k in ks:
        if not 1 <= k <= K:
            raise ParameterError(f"k={k} outside [1, {K}]")
        if k == 1:
            out.append(c.mean(axis=-1))
            continue
        total = math.comb(K, k)
        w = np.array([math.comb(K - i, k - 1) / total for i in range(1, K + 1)])
        est = c @ w
        out.append(np.maximum(est, c[..., 0]))
    return np.stack(out, axis=-1)


def curve_points(K: int) -> list[int]:
    pts = [1 << i for i in range(K.bit_length()) if (1 << i) <= K]
    if pts[-1] != K:
        pts.append(K)
    return pts


def _optima(instances, optima) -> list[float | None]:
    if optima is None:
        return [None] * len(instances)
    if isinstance(optima, dict):
        return [optima.get(inst.id) for inst in instances]
    out = [None if o is None else float(o) for o in optima]
    if len(out) != len(instances):
        raise ParameterError("optima list length does not match instance count")
    return out


# ------------------------------------------------------------------ greedy


def greedy_candidates(policy: AttentionPolicy, instances: Sequence[ProblemInstance], augment: bool,
                      num_starts: int | None = None) -> list[np.ndarray]:
    """All multi-start greedy solutions, one (A*N, T) array per instance."""
    _check_support(policy, instances)
    A = 8 if augment else 1
    out: list[np.ndarray | None] = [None] * len(instances)
    for (_, n), idx in _groups(instances).items():
        N = _num_starts(instances[idx[0]], num_starts)
        step = _chunk_size(A * N, n, policy.config.num_heads)
        for lo in range(0, len(idx), step):
            part = idx[lo:lo + step]
            views = []
            for i in part:
                pc = instances[i].policy_coords()
                coords = dihedral_coords(pc) if augment else pc[None]
                views += [_policy_view(instances[i], c) for c in coords]
            res = run_policy(policy, views, start_prefix(views, N), GREEDY)
            acts = res.actions.reshape(len(part), A * N, -1)
            for j, i in enumerate(part):
                out[i] = acts[j]
    return out  # type: ignore[return-value]


def eval_greedy(model, instances: Sequence[ProblemInstance], augment: bool = False, optima=None,
                num_starts: int | None = None, keep_candidates: bool = False) -> EvalResult:
    policy = as_policy(model)
    t0 = time.perf_counter()
    cands = greedy_candidates(policy, instances, augment, num_starts)
    costs, sols = [], []
    for inst, cand in zip(instances, cands):
        c, s, _ = _best(inst, cand)
        costs.append(c)
        sols.append(s)
    return EvalResult(
        strategy="greedy_aug8" if augment else "greedy",
        instance_ids=[i.id for i in instances],
        costs=np.array(costs),
        solutions=sols,
        optima=_optima(instances, optima),
        wall_clock=time.perf_counter() - t0,
        candidates=cands if keep_candidates else None,
    )


# ------------------------------------------------------------------ sampling


def sample_candidates(policy: AttentionPolicy, instances: Sequence[ProblemInstance], K: int,
                      rng: np.random.Generator, num_starts: int | None = None) -> list[np.ndarray]:
    """K sampled solutions per instance, start nodes assigned round-robin."""
    if K < 1:
        raise ParameterError(f"K must be >= 1, got {K}")
    _check_support(policy, instances)
    out: list[np.ndarray | None] = [None] * len(instances)
    for (_, n), idx in _groups(instances).items():
        N = _num_starts(instances[idx[0]], num_starts)
        step = _chunk_size(K, n, policy.config.num_heads)
        for lo in range(0, len(idx), step):
            part = idx[lo:lo + step]
            views = [_policy_view(instances[i]) for i in part]
            starts = start_prefix(views, N)[:, np.arange(K) % N]
            res = run_policy(policy, views, starts, SAMPLING, rng)
            for j, i in enumerate(part):
                out[i] = res.actions[j]
    return out  # type: ignore[return-value]


def eval_sampling(model, instances: Sequence[ProblemInstance], K: int, rng: np.random.Generator,
                  optima=None, num_starts: int | None = None, keep_candidates: bool = False) -> EvalResult:
    policy = as_policy(model)
    t0 = time.perf_counter()
    cands = sample_candidates(policy, instances, K, rng, num_starts)
    opts = _optima(instances, optima)
    ks = curve_points(K)
    costs, sols, curves = [], [], []
    for inst, cand in zip(instances, cands):
        c, s, all_costs = _best(inst, cand)
        costs.append(c)
        sols.append(s)
        curves.append(best_of_k_curve(all_costs, ks))
    curves_arr = np.array(curves).reshape(len(instances), len(ks))
    k_curve = {k: float(curves_arr[:, j].mean()) if len(instances) else float("nan") for j, k in enumerate(ks)}
    k_gap: dict[int, float | None] = {}
    known = [i for i, o in enumerate(opts) if o is not None]
    for j, k in enumerate(ks):
        k_gap[k] = float(np.mean([curves_arr[i, j] / opts[i] - 1.0 for i in known])) if known else None
    return EvalResult(
        strategy="sampling",
        instance_ids=[i.id for i in instances],
        costs=np.array(costs),
        solutions=sols,
        optima=opts,
        wall_clock=time.perf_counter() - t0,
        k_curve=k_curve,
        k_curve_gap=k_gap,
        candidates=cands if keep_candidates else None,
    )


# ------------------------------------------------------------------ SGBS


@dataclass
class SearchResult:
    best_cost: float
    best_solution: tuple[int, ...]
    beam: list[tuple[int, ...]]
    candidates: np.ndarray  # (C, T) every completed solution seen
    candidate_costs: np.ndarray


def sgbs(model, instance: ProblemInstance, beta: int, sgbs_gamma: int, num_starts: int | None = None,
         cache=None) -> SearchResult:
    """Simulation-guided beam search, one beam of width ``beta`` per start node.

    Every beam entry expands to its ``sgbs_gamma - 1`` most probable feasible
    actions, each child is scored by a greedy completion and the best ``beta``
    children per start survive.  The plain multi-start greedy rollouts are
    part of the candidate set.
    """
    if beta < 1 or sgbs_gamma < 2:
        raise ParameterError(f"need beta >= 1 and sgbs_gamma >= 2, got {beta}, {sgbs_gamma}")
    policy = as_policy(model)
    _check_support(policy, [instance])
    view = [_policy_view(instance)]
    N = _num_starts(instance, num_starts)
    if cache is None:
        coords, dem = policy._inputs(view)
        cache = policy.decoder_cache(policy.encode_batch(coords, dem))
    greedy = run_policy(policy, view, start_prefix(view, N), GREEDY, cache=cache).actions[0]
    found = [greedy]
    width = sgbs_gamma - 1

    prefix = start_prefix(view, N)[0][:, None, :]  # (N, beta, t)
    prefix = np.repeat(prefix, beta, axis=1)
    alive = np.zeros((N, beta), dtype=bool)
    alive[:, 0] = True
    completion = np.repeat(greedy[:, None, :], beta, axis=1)
    n = instance.num_nodes
    max_len = n if instance.kind == TSP else 2 * n + 1
    while True:
        t = prefix.shape[-1]
        flat = prefix.reshape(1, N * beta, t)
        logp, mask, done = next_log_probs(policy, view, flat, cache)
        logp, mask, done = logp[0].reshape(N, beta, n), mask[0].reshape(N, beta, n), done[0].reshape(N, beta)
        if (done | ~alive).all() or t >= max_len:
            break
        # children: top `width` feasible actions of unfinished entries; finished entries carry over as-is
        order = np.argsort(np.where(mask, -logp, np.inf), axis=-1, kind="stable")
        if order.shape[-1] < width:
            order = np.concatenate([order, np.repeat(order[..., :1], width - order.shape[-1], -1)], -1)
        order = order[..., :width]
        ok = np.take_along_axis(mask, order, -1) & (alive & ~done)[..., None]
        ok[..., n:] = False
        carry = alive & done
        child_act = order.copy()
        child_act[..., 0] = np.where(carry, 0, child_act[..., 0])
        ok[..., 0] |= carry
        # pruned children replay a feasible placeholder and are scored -inf
        child_act = np.where(ok, child_act, child_act[..., :1])
        kids = np.concatenate(
            [np.repeat(prefix[:, :, None, :], width, axis=2), child_act[..., None]], axis=-1
        ).reshape(N, beta * width, t + 1)
        ok = ok.reshape(N, beta * width)
        comp = run_policy(policy, view, kids.reshape(1, N * beta * width, t + 1), GREEDY, cache=cache).actions[0]
        comp = comp.reshape(N, beta * width, -1)
        scores = np.where(ok, -solution_costs(instance, comp.reshape(N * beta * width, -1)).reshape(N, -1), -np.inf)
        found.append(comp[ok])
        # an entry whose children are all pruned drops out; its greedy completion is already a candidate
        pick = np.argsort(-scores, axis=-1, kind="stable")[:, :beta]
        prefix = np.take_along_axis(kids, pick[..., None], 1)
        completion = np.take_along_axis(comp, pick[..., None], 1)
        alive = np.take_along_axis(ok, pick, 1)
    beam_rows = completion[alive]
    cand = _pad_rows([np.asarray(f) for f in found if len(f)] + [beam_rows])
    costs = solution_costs(instance, cand)
    j = int(np.argmin(costs))
    return SearchResult(
        best_cost=float(costs[j]),
        best_solution=_clean(instance, cand[j]),
        beam=[_clean(instance, r) for r in beam_rows],
        candidates=cand,
        candidate_costs=costs,
    )


# ------------------------------------------------------------------ EAS


class _ActiveSearch:
    """Per-instance test-time adaptation of the decoder with Leader Reward advantages."""

    def __init__(self, policy: AttentionPolicy, instance: ProblemInstance, eas_alpha: float, eas_lr: float,
                 rng: np.random.Generator, num_starts: int | None = None):
        self.instance = instance
        self.view = [_policy_view(instance)]
        self.policy = policy.copy()
        self.names = self.policy.decoder_param_names()
        self.initial = {k: self.policy.params[k].data.copy() for k in self.names}
        self.alpha = eas_alpha
        self.rng = rng
        self.N = _num_starts(instance, num_starts)
        self.adam = AdamState(learning_rate=eas_lr)
        coords, dem = self.policy._inputs(self.view)
        self.embeddings = Tensor(self.policy.encode_batch(coords, dem).data)
        self.prefix = start_prefix(self.view, self.N)
        greedy = run_policy(self.policy, self.view, self.prefix, GREEDY, cache=self.cache()).actions[0]
        self.found = [greedy]
        self.best_cost, self.best_solution, _ = _best(instance, greedy)
        self.history = [self.best_cost]
        self.iterations = 0
        self.reverted = False

    def cache(self):
        return self.policy.decoder_cache(self.embeddings)

    def offer(self, cost: float, solution: tuple[int, ...], rows: np.ndarray | None = None) -> None:
        if rows is not None and len(rows):
            self.found.append(rows)
        if cost < self.best_cost:
            self.best_cost, self.best_solution = cost, solution

    def step(self) -> bool:
        """One sampling round and decoder update; returns False once adaptation has been abandoned."""
        if self.reverted:
            return False
        tunable = {k: self.policy.params[k] for k in self.names}
        with ad.Tape():
            out = run_policy(self.policy, self.view, self.prefix, SAMPLING, self.rng, cache=self.cache())
            adv = compute_advantage_main(-solution_costs(self.instance, out.actions[0])[None], self.alpha)
            lp = out.log_prob
            loss = ad.mul(lp, adv.values.astype(lp.dtype)).sum() * (-1.0 / self.N)
            finite = bool(np.isfinite(loss.data))
            grads = ad.backward(loss, tunable) if finite else None
        cost, sol, _ = _best(self.instance, out.actions[0])
        self.offer(cost, sol, out.actions[0])
        self.iterations += 1
        try:
            if grads is None:
                raise ad.NonFiniteGradientError("non-finite loss")
            ad.adam_step(tunable, grads, self.adam)
        except ad.NonFiniteGradientError:
            for k, v in self.initial.items():
                self.policy.params[k].data = v.copy()
            self.reverted = True
        self.history.append(self.best_cost)
        return not self.reverted

    def candidates(self) -> np.ndarray:
        return _pad_rows(self.found)


@dataclass
class AdaptResult:
    best_cost: float
    best_solution: tuple[int, ...]
    params: dict[str, np.ndarray]
    history: list[float]
    iterations: int
    reverted: bool
    sgbs_passes: int = 0
    candidates: np.ndarray | None = None


def _finish(search: _ActiveSearch, passes: int = 0) -> AdaptResult:
    cand = search.candidates()
    return AdaptResult(
        best_cost=search.best_cost,
        best_solution=search.best_solution,
        params={k: search.policy.params[k].data.copy() for k in search.names},
        history=list(search.history),
        iterations=search.iterations,
        reverted=search.reverted,
        sgbs_passes=passes,
        candidates=cand,
    )


def eas_leader(model, instance: ProblemInstance, iters: int, eas_alpha: float, eas_lr: float,
               rng: np.random.Generator, num_starts: int | None = None,
               time_budget: float | None = None) -> AdaptResult:
    """Efficient active search on the decoder parameters, seeded with the greedy incumbent."""
    if iters < 0:
        raise ParameterError("iters must be >= 0")
    t0 = time.perf_counter()
    search = _ActiveSearch(as_policy(model), instance, eas_alpha, eas_lr, rng, num_starts)
    for _ in range(iters):
        if time_budget is not None and time.perf_counter() - t0 >= time_budget:
            break
        if not search.step():
            break
    return _finish(search)


def sgbs_eas_interleaved(model, instance: ProblemInstance, config: EvalConfig,
                         rng: np.random.Generator) -> AdaptResult:
    """Alternate ``eas_iters_per_sgbs`` EAS rounds with one SGBS pass on the adapted policy.

    Both share one incumbent.  The loop stops after ``config.eas_iters`` EAS
    rounds or once ``config.time_budget`` seconds have elapsed (checked before
    every round).
    """
    t0 = time.perf_counter()
    search = _ActiveSearch(as_policy(model), instance, config.eas_alpha, config.eas_lr, rng, config.num_starts)
    passes = 0

    def out_of_time():
        return config.time_budget is not None and time.perf_counter() - t0 >= config.time_budget

    while search.iterations < config.eas_iters and not out_of_time():
        if not search.step():
            break
        if search.iterations % config.eas_iters_per_sgbs == 0 and not out_of_time():
            res = sgbs(search.policy, instance, config.sgbs_beta, config.sgbs_gamma, config.num_starts,
                       cache=search.cache())
            search.offer(res.best_cost, res.best_solution, res.candidates)
            search.history[-1] = search.best_cost
            passes += 1
    return _finish(search, passes)


# ------------------------------------------------------------------ dispatch


def evaluate(model, instances: Sequence[ProblemInstance], config: EvalConfig,
             rng: np.random.Generator | None = None, optima=None) -> EvalResult:
    """Run ``config.strategy`` on every instance.  The model is never mutated."""
    policy = as_policy(model)
    rng = rng if rng is not None else np.random.default_rng(0)
    s = config.strategy
    if s in ("greedy", "greedy_aug8"):
        return eval_greedy(policy, instances, s == "greedy_aug8", optima, config.num_starts)
    if s == "sampling":
        return eval_sampling(policy, instances, config.K, rng, optima, config.num_starts)
    _check_support(policy, instances)
    t0 = time.perf_counter()
    costs, sols = [], []
    for inst in instances:
        if s == "sgbs":
            r = sgbs(policy, inst, config.sgbs_beta, config.sgbs_gamma, config.num_starts)
            costs.append(r.best_cost)
            sols.append(r.best_solution)
        elif s == "eas":
            a = eas_leader(policy, inst, config.eas_iters, config.eas_alpha, config.eas_lr, rng, config.num_starts,
                           config.time_budget)
            costs.append(a.best_cost)
            sols.append(a.best_solution)
        else:
            a = sgbs_eas_interleaved(policy, inst, config, rng)
            costs.append(a.best_cost)
            sols.append(a.best_solution)
    return EvalResult(
        strategy=s,
        instance_ids=[i.id for i in instances],
        costs=np.array(costs),
        solutions=sols,
        optima=_optima(instances, optima),
        wall_clock=time.perf_counter() - t0,
    )
