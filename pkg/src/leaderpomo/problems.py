"""TSP / CVRP instances, environments, rewards, exact oracles and file formats."""

from __future__ import annotations

import itertools
import json
import math
import re
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ContractError, FeasibilityError, ParameterError, ParseError, SizeError

TSP = "tsp"
CVRP = "cvrp"
KINDS = (TSP, CVRP)

MIN_NODES = {TSP: 3, CVRP: 2}
MAX_SAMPLED_NODES = 64
HELD_KARP_MAX = 20
BRUTE_FORCE_MAX = 10

# capacity by number of customers; sizes between table rows take the next larger row
CVRP_CAPACITY = {10: 20, 20: 30, 50: 40, 100: 50}
DEMAND_LOW, DEMAND_HIGH = 1, 9


def cvrp_capacity(n_customers: int) -> int:
    for size in sorted(CVRP_CAPACITY):
        if n_customers <= size:
            return CVRP_CAPACITY[size]
    return CVRP_CAPACITY[max(CVRP_CAPACITY)]


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    kind: str
    coords: np.ndarray
    demands: np.ndarray | None = None
    capacity: int | None = None
    id: str = ""
    scale_hint: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown problem kind {self.kind!r}")
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ParameterError(f"coords must have shape (n, 2), got {coords.shape}")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        if self.kind == TSP:
            if len(coords) < MIN_NODES[TSP]:
                raise ParameterError(f"TSP needs at least {MIN_NODES[TSP]} nodes, got {len(coords)}")
            return
        if self.demands is None or self.capacity is None:
            raise ParameterError("CVRP instance needs demands and capacity")
        demands = np.asarray(self.demands, dtype=np.int64)
        if demands.shape != (len(coords),):
            raise ParameterError(f"demands shape {demands.shape} does not match {len(coords)} nodes")
        if len(coords) - 1 < MIN_NODES[CVRP]:
            raise ParameterError(f"CVRP needs at least {MIN_NODES[CVRP]} customers")
        if self.capacity <= 0:
            raise ParameterError("capacity must be positive")
        if demands[0] != 0:
            raise ParameterError("depot demand must be 0")
        if (demands[1:] < 0).any():
            raise ParameterError("demands must be non-negative")
        if (demands > self.capacity).any():
            bad = int(np.argmax(demands > self.capacity))
            raise ParameterError(f"demand {demands[bad]} of node {bad} exceeds capacity {self.capacity}")
        demands.setflags(write=False)
        object.__setattr__(self, "demands", demands)
        object.__setattr__(self, "capacity", int(self.capacity))

    @property
    def num_nodes(self) -> int:
        return len(self.coords)

    @property
    def num_customers(self) -> int:
        return len(self.coords) - 1 if self.kind == CVRP else len(self.coords)

    def policy_coords(self) -> np.ndarray:
        """Coordinates as seen by the policy: raw files are shifted and scaled into [0,1]^2."""
        if self.scale_hint is None:
            return self.coords
        lo = self.coords.min(axis=0)
        return (self.coords - lo) / self.scale_hint

    def with_coords(self, coords: np.ndarray, suffix: str = "") -> "ProblemInstance":
        return replace(self, coords=coords, id=self.id + suffix)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ProblemInstance):
            return NotImplemented
        same_dem = (self.demands is None and other.demands is None) or (
            self.demands is not None and other.demands is not None and np.array_equal(self.demands, other.demands)
        )
        return (
            self.kind == other.kind
            and self.id == other.id
            and self.capacity == other.capacity
            and self.scale_hint == other.scale_hint
            and np.array_equal(self.coords, other.coords)
            and same_dem
        )

    __hash__ = None  # type: ignore[assignment]

    def to_json(self) -> dict:
        out = {"kind": self.kind, "id": self.id, "coords": self.coords.tolist()}
        if self.kind == CVRP:
            out["demands"] = self.demands.tolist()
            out["capacity"] = self.capacity
        if self.scale_hint is not None:
            out["scale_hint"] = self.scale_hint
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ProblemInstance":
        return cls(
            kind=obj["kind"],
            coords=np.asarray(obj["coords"], dtype=np.float64),
            demands=None if obj.get("demands") is None else np.asarray(obj["demands"]),
            capacity=obj.get("capacity"),
            id=obj.get("id", ""),
            scale_hint=obj.get("scale_hint"),
        )


def save_instances(path, instances: Sequence[ProblemInstance]) -> None:
    with open(path, "w") as f:
        json.dump([inst.to_json() for inst in instances], f)


def load_instances(path) -> list[ProblemInstance]:
    with open(path) as f:
        data = json.load(f)
    if isinstance(data, dict):
        data = [data]
    return [ProblemInstance.from_json(obj) for obj in data]


def sample_instance(kind: str, n: int, rng: np.random.Generator, id: str = "") -> ProblemInstance:
    """Uniform instance; ``n`` counts cities for TSP and customers for CVRP."""
    if kind not in KINDS:
        raise ParameterError(f"unknown problem kind {kind!r}")
    if not MIN_NODES[kind] <= n <= MAX_SAMPLED_NODES:
        raise ParameterError(f"{kind} size must be in [{MIN_NODES[kind]}, {MAX_SAMPLED_NODES}], got {n}")
    if kind == TSP:
        return ProblemInstance(TSP, rng.random((n, 2)), id=id)
    coords = rng.random((n + 1, 2))
    demands = np.concatenate([[0], rng.integers(DEMAND_LOW, DEMAND_HIGH + 1, size=n)])
    return ProblemInstance(CVRP, coords, demands, cvrp_capacity(n), id=id)


def generate_instances(kind: str, n: int, count: int, seed: int) -> list[ProblemInstance]:
    rng = np.random.default_rng(seed)
    return [sample_instance(kind, n, rng, id=f"{kind}{n}-s{seed}-{i}") for i in range(count)]


# ---------------------------------------------------------------------------
# environment


def feasible_mask(kind, visited, current, remaining, demands, done):
    """Feasible next nodes for any leading batch shape.

    ``visited`` (..., n) bool; ``current``/``remaining``/``done`` (...);
    ``demands`` broadcastable to ``visited`` (CVRP only).
    """
    if kind == TSP:
        return ~visited
    cust = ~visited & (demands <= np.asarray(remaining)[..., None])
    cust[..., 0] = False
    at_depot = np.asarray(current) == 0
    done = np.asarray(done)
    cust &= ~done[..., None]
    cust[..., 0] = ~at_depot | done
    return cust


@dataclass
class EnvState:
    visited: np.ndarray
    current: int
    remaining: int
    route: list[int] = field(default_factory=list)
    done: bool = False

    def feasible(self, instance: ProblemInstance) -> np.ndarray:
        return feasible_mask(instance.kind, self.visited, self.current, self.remaining, instance.demands, self.done)


def initial_state(instance: ProblemInstance) -> EnvState:
    visited = np.zeros(instance.num_nodes, dtype=bool)
    if instance.kind == TSP:
        return EnvState(visited, current=-1, remaining=0)
    return EnvState(visited, current=0, remaining=instance.capacity)


def step(state: EnvState, action: int, instance: ProblemInstance) -> EnvState:
    """Apply ``action`` and return the successor state (input is not mutated)."""
    action = int(action)
    if state.done:
        raise FeasibilityError("episode already finished")
    if not 0 <= action < instance.num_nodes:
        raise FeasibilityError(f"action {action} outside node range 0..{instance.num_nodes - 1}")
    visited = state.visited.copy()
    if instance.kind == TSP:
        if visited[action]:
            raise FeasibilityError(f"mask violation: node {action} already visited")
        visited[action] = True
        return EnvState(visited, action, 0, state.route + [action], bool(visited.all()))
    mask = state.feasible(instance)
    if not mask[action]:
        if action == 0:
            why = "depot is masked directly after a depot visit"
        elif visited[action]:
            why = f"customer {action} already visited"
        else:
            why = f"demand {instance.demands[action]} of customer {action} exceeds remaining capacity {state.remaining}"
        raise FeasibilityError(f"mask violation: {why}")
    if action == 0:
        remaining = instance.capacity
        done = bool(visited[1:].all())
    else:
        visited[action] = True
        remaining = state.remaining - int(instance.demands[action])
        done = False
    return EnvState(visited, action, remaining, state.route + [action], done)


def replay(actions: Sequence[int], instance: ProblemInstance) -> EnvState:
    state = initial_state(instance)
    for a in actions:
        state = step(state, a, instance)
    return state


class BatchEnv:
    """Vectorized environment over ``(B, M)`` rollouts of ``B`` same-size instances.

    TSP rows finish together; CVRP rows that are done keep taking the depot,
    which is then their only feasible action.
    """

    def __init__(self, kind: str, batch: int, rows: int, n: int, demands=None, capacity=None):
        self.kind = kind
        self.visited = np.zeros((batch, rows, n), dtype=bool)
        self.done = np.zeros((batch, rows), dtype=bool)
        self.first = np.full((batch, rows), -1, dtype=np.int64)
        if kind == TSP:
            self.current = np.full((batch, rows), -1, dtype=np.int64)
            self.remaining = np.zeros((batch, rows), dtype=np.int64)
            self.demands = None
            self.capacity = None
        else:
            self.demands = np.asarray(demands, dtype=np.int64)[:, None, :]
            self.capacity = np.asarray(capacity, dtype=np.int64)[:, None]
            self.current = np.zeros((batch, rows), dtype=np.int64)
            self.remaining = np.broadcast_to(self.capacity, (batch, rows)).copy()
        self.actions: list[np.ndarray] = []

    @classmethod
    def for_instances(cls, instances: Sequence[ProblemInstance], rows: int) -> "BatchEnv":
        kind = instances[0].kind
        n = instances[0].num_nodes
        if any(i.kind != kind or i.num_nodes != n for i in instances):
            raise ParameterError("a batch must hold instances of one kind and size")
        if kind == TSP:
            return cls(kind, len(instances), rows, n)
        return cls(
            kind, len(instances), rows, n,
            demands=np.stack([i.demands for i in instances]),
            capacity=np.array([i.capacity for i in instances]),
        )

    def mask(self) -> np.ndarray:
        return feasible_mask(self.kind, self.visited, self.current, self.remaining, self.demands, self.done)

    def step(self, action: np.ndarray, check: bool = True) -> None:
        action = np.asarray(action, dtype=np.int64)
        b, m = np.indices(action.shape)
        if check and not self.mask()[b, m, action].all():
            raise FeasibilityError("mask violation in batched step")
        if self.kind == TSP:
            self.visited[b, m, action] = True
            self.done = self.visited.all(axis=-1)
        else:
            to_depot = action == 0
            self.visited[b, m, action] |= ~to_depot
            dem = np.take_along_axis(np.broadcast_to(self.demands, self.visited.shape), action[..., None], -1)[..., 0]
            self.remaining = np.where(to_depot, self.capacity, self.remaining - dem)
            self.done = to_depot & self.visited[..., 1:].all(axis=-1)
        if (self.first < 0).all():
            self.first = action.copy()
        self.current = action
        self.actions.append(action)

    def action_array(self) -> np.ndarray:
        return np.stack(self.actions, axis=-1)


# ---------------------------------------------------------------------------
# costs


def _path(actions: Sequence[int], kind: str) -> np.ndarray:
    a = np.asarray(actions, dtype=np.int64)
    if kind == TSP:
        return np.concatenate([a, a[:1]])
    return np.concatenate([[0], a])


def edge_lengths(coords: np.ndarray, path: np.ndarray, rounded: bool = False) -> np.ndarray:
    pts = coords[path]
    d = np.sqrt(((pts[1:] - pts[:-1]) ** 2).sum(axis=-1))
    return np.floor(d + 0.5) if rounded else d


def route_length(actions: Sequence[int], instance: ProblemInstance, rounded: bool = False) -> float:
    """Total Euclidean length; ``rounded`` applies the TSPLib nint rule per edge."""
    return float(edge_lengths(instance.coords, _path(actions, instance.kind), rounded).sum())


def check_complete(actions: Sequence[int], instance: ProblemInstance) -> None:
    if instance.kind == TSP:
        if sorted(int(a) for a in actions) != list(range(instance.num_nodes)):
            raise ContractError("TSP solution must visit every node exactly once")
        return
    try:
        state = replay(actions, instance)
    except FeasibilityError as exc:
        raise ContractError(f"infeasible CVRP solution: {exc}") from None
    if not state.done:
        raise ContractError("incomplete CVRP solution: customers left or vehicle not back at depot")


def reward(actions: Sequence[int], instance: ProblemInstance) -> float:
    check_complete(actions, instance)
    return -route_length(actions, instance)


def batch_route_lengths(coords: np.ndarray, actions: np.ndarray, kind: str, rounded: bool = False) -> np.ndarray:
    """Route lengths for ``actions`` (B, M, T) on ``coords`` (B, n, 2)."""
    B, M, T = actions.shape
    if kind == TSP:
        path = np.concatenate([actions, actions[..., :1]], axis=-1)
    else:
        path = np.concatenate([np.zeros((B, M, 1), dtype=actions.dtype), actions], axis=-1)
    pts = coords[np.arange(B)[:, None, None], path]
    d = np.sqrt(((pts[..., 1:, :] - pts[..., :-1, :]) ** 2).sum(axis=-1))
    return (np.floor(d + 0.5) if rounded else d).sum(axis=-1)


def trim_cvrp(actions: Sequence[int]) -> list[int]:
    """Drop the depot padding a finished CVRP row accumulates in batched rollouts."""
    a = [int(x) for x in actions]
    while len(a) >= 2 and a[-1] == 0 and a[-2] == 0:
        a.pop()
    return a


# ---------------------------------------------------------------------------
# augmentation

_DIHEDRAL = (
    ("identity", lambda x, y: (x, y)),
    ("rot90", lambda x, y: (1 - y, x)),
    ("rot180", lambda x, y: (1 - x, 1 - y)),
    ("rot270", lambda x, y: (y, 1 - x)),
    ("flip_diag", lambda x, y: (y, x)),
    ("flip_x", lambda x, y: (1 - x, y)),
    ("flip_y", lambda x, y: (x, 1 - y)),
    ("flip_anti", lambda x, y: (1 - y, 1 - x)),
)
DIHEDRAL_NAMES = tuple(name for name, _ in _DIHEDRAL)


def dihedral_coords(coords: np.ndarray) -> np.ndarray:
    """Stack of the 8 unit-square symmetries of ``coords`` (..., 2) -> (8, ..., 2)."""
    x, y = coords[..., 0], coords[..., 1]
    return np.stack([np.stack(f(x, y), axis=-1) for _, f in _DIHEDRAL])


def augment_8(instance: ProblemInstance) -> list[ProblemInstance]:
    return [
        instance.with_coords(c, suffix="" if k == 0 else f"/{DIHEDRAL_NAMES[k]}")
        for k, c in enumerate(dihedral_coords(instance.coords))
    ]


# ---------------------------------------------------------------------------
# exact oracles


@dataclass(frozen=True)
class OracleResult:
    optimal_cost: float
    optimal_tour: tuple[int, ...]
    method: str


def distance_matrix(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1))


def canonical_tour(tour: Sequence[int]) -> tuple[int, ...]:
    """Rotate to start at node 0 and orient so the second node is the smaller neighbour."""
    t = [int(x) for x in tour]
    k = t.index(0)
    t = t[k:] + t[:k]
    if len(t) > 2 and t[1] > t[-1]:
        t = [t[0]] + t[1:][::-1]
    return tuple(t)


def _tsp_only(instance: ProblemInstance, limit: int, name: str) -> None:
    if instance.kind != TSP:
        raise ParameterError(f"{name} solves TSP instances only")
    if instance.num_nodes > limit:
        raise SizeError(f"{name} supports n <= {limit}, got n = {instance.num_nodes}")


def held_karp(instance: ProblemInstance) -> OracleResult:
    """Exact TSP optimum by bitmask dynamic programming, processed in popcount layers."""
    _tsp_only(instance, HELD_KARP_MAX, "held_karp")
    n = instance.num_nodes
    D = distance_matrix(instance.coords)
    m = n - 1  # node k+1 <-> bit k; node 0 is the fixed start
    full = 1 << m
    masks = np.arange(full, dtype=np.int64)
    popcount = np.zeros(full, dtype=np.int64)
    for b in range(m):
        popcount += (masks >> b) & 1
    dp = np.full((full, m), np.inf)
    parent = np.full((full, m), -1, dtype=np.int8)
    for j in range(m):
        dp[1 << j, j] = D[0, j + 1]
    inner = D[1:, 1:]
    for k in range(2, m + 1):
        layer = masks[popcount == k]
        for j in range(m):
            sel = layer[(layer >> j) & 1 == 1]
            cand = dp[sel ^ (1 << j)] + inner[:, j][None, :]
            best = cand.argmin(axis=1)
            dp[sel, j] = cand[np.arange(len(sel)), best]
            parent[sel, j] = best
    closing = dp[full - 1] + D[1:, 0]
    last = int(closing.argmin())
    tour = []
    mask = full - 1
    while last >= 0:
        tour.append(last + 1)
        prev = int(parent[mask, last])
        mask ^= 1 << last
        last = prev
    tour = canonical_tour([0] + tour[::-1])
    return OracleResult(route_length(tour, instance), tour, "held_karp")


def brute_force(instance: ProblemInstance) -> OracleResult:
    """Exhaustive search over all tours with node 0 fixed first."""
    _tsp_only(instance, BRUTE_FORCE_MAX, "brute_force")
    n = instance.num_nodes
    D = distance_matrix(instance.coords)
    perms = np.array(list(itertools.permutations(range(1, n))), dtype=np.int64)
    cost = D[0, perms[:, 0]] + D[perms[:, :-1], perms[:, 1:]].sum(axis=1) + D[perms[:, -1], 0]
    best = perms[int(cost.argmin())]
    tour = canonical_tour([0, *best.tolist()])
    return OracleResult(route_length(tour, instance), tour, "brute_force")


# ---------------------------------------------------------------------------
# TSPLib / CVRPLib

_HEADER = re.compile(r"^\s*([A-Z_]+)\s*:\s*(.*?)\s*$")
_SECTIONS = {"NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION", "EDGE_WEIGHT_SECTION", "DISPLAY_DATA_SECTION"}


def _scan(text: str):
    """Split a TSPLib-family file into header fields and numbered section lines."""
    header: dict[str, str] = {}
    sections: dict[str, list[tuple[int, str]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line == "EOF":
            break
        key = line.split(":")[0].strip() if ":" in line else line.split()[0]
        if key in _SECTIONS:
            current = key
            sections[current] = []
            continue
        m = _HEADER.match(line)
        if m and not line[0].isdigit() and not line[0] == "-":
            header[m.group(1)] = m.group(2)
            current = None
            continue
        if current is None:
            raise ParseError(f"line {lineno}: unexpected content {line!r}")
        sections[current].append((lineno, line))
    return header, sections


def _coords(rows, expect: int | None) -> tuple[list[int], np.ndarray]:
    ids, pts = [], []
    for lineno, line in rows:
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"line {lineno}: malformed coordinate line {line!r}")
        try:
            ids.append(int(parts[0]))
            pts.append((float(parts[1]), float(parts[2])))
        except ValueError:
            raise ParseError(f"line {lineno}: malformed coordinate line {line!r}") from None
    if expect is not None and len(pts) != expect:
        raise ParseError(f"DIMENSION is {expect} but {len(pts)} coordinates were given")
    if sorted(ids) != list(range(1, len(ids) + 1)):
        raise ParseError("node ids must be 1..n")
    order = np.argsort(ids, kind="stable")
    return sorted(ids), np.asarray(pts, dtype=np.float64)[order]


def _extent(coords: np.ndarray) -> float:
    span = float((coords.max(axis=0) - coords.min(axis=0)).max())
    return span if span > 0 else 1.0


def _dimension(header) -> int | None:
    if "DIMENSION" not in header:
        return None
    try:
        return int(header["DIMENSION"])
    except ValueError:
        raise ParseError(f"bad DIMENSION {header['DIMENSION']!r}") from None


def parse_tsplib(text: str) -> ProblemInstance:
    header, sections = _scan(text)
    kind = header.get("TYPE", "TSP").split()[0]
    if kind != "TSP":
        raise ParseError(f"unsupported TYPE {kind!r}, expected TSP")
    ewt = header.get("EDGE_WEIGHT_TYPE")
    if ewt != "EUC_2D":
        raise ParseError(f"unsupported EDGE_WEIGHT_TYPE {ewt!r}; only EUC_2D is supported")
    if "NODE_COORD_SECTION" not in sections:
        raise ParseError("missing NODE_COORD_SECTION")
    _, coords = _coords(sections["NODE_COORD_SECTION"], _dimension(header))
    return ProblemInstance(TSP, coords, id=header.get("NAME", ""), scale_hint=_extent(coords))


def parse_cvrplib(text: str) -> ProblemInstance:
    header, sections = _scan(text)
    kind = header.get("TYPE", "CVRP").split()[0]
    if kind != "CVRP":
        raise ParseError(f"unsupported TYPE {kind!r}, expected CVRP")
    if header.get("EDGE_WEIGHT_TYPE") != "EUC_2D":
        raise ParseError(f"unsupported EDGE_WEIGHT_TYPE {header.get('EDGE_WEIGHT_TYPE')!r}")
    if "CAPACITY" not in header:
        raise ParseError("missing CAPACITY")
    try:
        capacity = int(header["CAPACITY"])
    except ValueError:
        raise ParseError(f"bad CAPACITY {header['CAPACITY']!r}") from None
    for sec in ("NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION"):
        if sec not in sections:
            raise ParseError(f"missing {sec}")
    dim = _dimension(header)
    _, coords = _coords(sections["NODE_COORD_SECTION"], dim)
    demands = np.zeros(len(coords), dtype=np.int64)
    seen = set()
    for lineno, line in sections["DEMAND_SECTION"]:
        parts = line.split()
        try:
            node, dem = int(parts[0]), int(parts[1])
        except (ValueError, IndexError):
            raise ParseError(f"line {lineno}: malformed demand line {line!r}") from None
        if not 1 <= node <= len(coords) or len(parts) != 2:
            raise ParseError(f"line {lineno}: malformed demand line {line!r}")
        demands[node - 1] = dem
        seen.add(node)
    if len(seen) != len(coords):
        raise ParseError("DEMAND_SECTION does not cover every node")
    depots = []
    for lineno, line in sections["DEPOT_SECTION"]:
        try:
            v = int(line.split()[0])
        except ValueError:
            raise ParseError(f"line {lineno}: malformed depot line {line!r}") from None
        if v == -1:
            break
        depots.append(v)
    if len(depots) != 1:
        raise ParseError(f"expected exactly one depot, got {len(depots)}")
    d = depots[0] - 1
    order = [d] + [i for i in range(len(coords)) if i != d]
    coords, demands = coords[order], demands[order]
    if demands[0] != 0:
        raise ParseError(f"depot has non-zero demand {demands[0]}")
    return ProblemInstance(CVRP, coords, demands, capacity, id=header.get("NAME", ""), scale_hint=_extent(coords))


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def format_tsplib(instance: ProblemInstance) -> str:
    lines = [
        f"NAME : {instance.id}",
        "TYPE : TSP",
        f"DIMENSION : {instance.num_nodes}",
        "EDGE_WEIGHT_TYPE : EUC_2D",
        "NODE_COORD_SECTION",
    ]
    lines += [f"{i + 1} {_num(x)} {_num(y)}" for i, (x, y) in enumerate(instance.coords)]
    return "\n".join(lines + ["EOF", ""])


def format_cvrplib(instance: ProblemInstance) -> str:
    lines = [
        f"NAME : {instance.id}",
        "TYPE : CVRP",
        f"DIMENSION : {instance.num_nodes}",
        "EDGE_WEIGHT_TYPE : EUC_2D",
        f"CAPACITY : {instance.capacity}",
        "NODE_COORD_SECTION",
    ]
    lines += [f"{i + 1} {_num(x)} {_num(y)}" for i, (x, y) in enumerate(instance.coords)]
    lines.append("DEMAND_SECTION")
    lines += [f"{i + 1} {int(d)}" for i, d in enumerate(instance.demands)]
    lines += ["DEPOT_SECTION", "1", "-1", "EOF", ""]
    return "\n".join(lines)


def gap(cost: float, optimum: float | None) -> float | None:
    if optimum is None or not math.isfinite(optimum) or optimum <= 0:
        return None
    return cost / optimum - 1.0
