"""Run configuration: sectioned ``key = value`` text files with strict key checking."""

from __future__ import annotations

import configparser
import hashlib
import re
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError, ParameterError
from .inference import KIND_DEFAULTS, EvalConfig
from .policy import PolicyConfig
from .problems import KINDS
from .training import TrainConfig

_KEY = re.compile(r"^[a-z][a-z0-9_]*$")
_OFF = {"off", "none", "pomo"}


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _optional(conv):
    def parse(text: str):
        return None if text.strip().lower() in ("", "none", "auto") else conv(text)
    return parse


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


def _alpha(text: str) -> float | None:
    return None if text.strip().lower() in _OFF else float(text)


def _schedule(text: str) -> list[tuple[int, float]]:
    """``"1500:0.1, 1800:0.01"`` -> [(1500, 0.1), (1800, 0.01)]."""
    out = []
    for part in text.replace(",", " ").split():
        step, _, mult = part.partition(":")
        if not mult:
            raise ValueError(f"schedule entry {part!r} is not step:multiplier")
        out.append((int(step), float(mult)))
    return out


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        if value and isinstance(value[0], tuple):
            return ", ".join(f"{s}:{m!r}" for s, m in value)
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# section -> key -> parser
SCHEMA: dict[str, dict] = {
    "problem": {"kind": str, "size": int},
    "model": {
        "embed_dim": int, "num_heads": int, "num_encoder_layers": int, "ff_dim": int,
        "logit_clip": float, "max_nodes": int,
    },
    "train": {
        "alpha": _alpha, "batch_size": int, "num_starts": int, "steps_main": int, "steps_final": int,
        "steps_tail": int, "lr_main": float, "lr_final": float, "lr_tail": float, "lr_schedule": _schedule,
        "seed": int, "report_interval": int, "checkpoint_interval": int, "adam_beta1": float,
        "adam_beta2": float, "adam_epsilon": float, "oracle": _optional(_bool),
    },
    "eval": {
        "strategy": str, "k": int, "sgbs_beta": int, "sgbs_gamma": int, "eas_iters": int,
        "eas_iters_per_sgbs": int, "eas_alpha": float, "eas_lr": float, "time_budget": _optional(float),
        "num_starts": _optional(int), "eval_count": int, "eval_seed": int,
    },
    "sweep": {"alphas": _float_list, "gammas": _float_list},
}


@dataclass
class RunConfig:
    """Effective configuration with every default resolved."""

    kind: str = "tsp"
    size: int = 10
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    alpha_given: bool = True
    checkpoint_interval: int = 500
    oracle: bool | None = None
    eval: EvalConfig = field(default_factory=EvalConfig)
    eval_count: int = 200
    eval_seed: int = 9001
    sweep_alphas: list[float] = field(default_factory=list)
    sweep_gammas: list[float] = field(default_factory=list)

    def require_alpha(self) -> None:
        """The main phase needs an explicit Leader Reward setting."""
        if not self.alpha_given:
            raise ConfigError(
                "[train] alpha: missing; the main phase needs Leader Reward alpha with α>1 "
                "(write 'alpha = off' for plain POMO)"
            )
        self.train.validate("main")

    def with_overrides(self, seed: int | None = None, alpha=None, strategy: str | None = None,
                       K: int | None = None, time_budget: float | None = None) -> "RunConfig":
        cfg = replace(self, train=replace(self.train), eval=replace(self.eval))
        if seed is not None:
            cfg.train.seed = seed
        if alpha is not None:
            cfg.train.alpha = _alpha(str(alpha))
            cfg.alpha_given = True
        ev = {}
        if strategy is not None:
            ev["strategy"] = strategy
        if K is not None:
            ev["K"] = K
        if time_budget is not None:
            ev["time_budget"] = time_budget
        if ev:
            try:
                cfg.eval = replace(cfg.eval, **ev)
            except ParameterError as exc:
                raise ConfigError(str(exc)) from None
        return cfg

    def to_text(self) -> str:
        """Canonical echo of the effective configuration (parseable by :func:`parse_config`)."""
        t, e, p = self.train, self.eval, self.policy
        sections = {
            "problem": {"kind": self.kind, "size": self.size},
            "model": {k: getattr(p, k) for k in SCHEMA["model"]},
            "train": {
                **{k: getattr(t, k) for k in SCHEMA["train"] if hasattr(t, k)},
                "alpha": t.alpha if t.alpha is not None else "off",
                "checkpoint_interval": self.checkpoint_interval,
                "oracle": "auto" if self.oracle is None else self.oracle,
            },
            "eval": {
                **{k: getattr(e, k) for k in SCHEMA["eval"] if hasattr(e, k)},
                "k": e.K, "eval_count": self.eval_count, "eval_seed": self.eval_seed,
            },
            "sweep": {"alphas": self.sweep_alphas, "gammas": self.sweep_gammas},
        }
        if not self.alpha_given:
            del sections["train"]["alpha"]
        lines = []
        for sec, kv in sections.items():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {_fmt(kv[k])}" for k in SCHEMA[sec] if k in kv]
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep case so uppercase keys can be rejected
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values: dict[str, dict] = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{sec}] (expected one of {', '.join(SCHEMA)})")
        values[sec] = {}
        for key, raw in cp.items(sec):
            if not _KEY.match(key):
                raise ConfigError(f"{source}: [{sec}] {key}: keys must be lowercase snake_case")
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{source}: [{sec}] {key}: unknown key")
            try:
                values[sec][key] = SCHEMA[sec][key](raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: [{sec}] {key}: {exc}") from None
    return _build(values, source)


def _build(values: dict[str, dict], source: str) -> RunConfig:
    prob = values.get("problem", {})
    kind = prob.get("kind", "tsp")
    if kind not in KINDS:
        raise ConfigError(f"{source}: [problem] kind: must be one of {', '.join(KINDS)}")
    size = prob.get("size", 10)
    if size < 2:
        raise ConfigError(f"{source}: [problem] size: must be >= 2")
    try:
        policy = PolicyConfig(kind=kind, **values.get("model", {}))
    except ParameterError as exc:
        raise ConfigError(f"{source}: [model] {exc}") from None

    tr = dict(values.get("train", {}))
    alpha_given = "alpha" in tr
    ckpt_every = tr.pop("checkpoint_interval", 500)
    oracle = tr.pop("oracle", None)
    # POMO uses one rollout per node; default to that when not given
    starts_default = size
    train_fields = {f.name for f in fields(TrainConfig)}
    train = TrainConfig(kind=kind, size=size, num_starts=tr.pop("num_starts", starts_default),
                        **{k: v for k, v in tr.items() if k in train_fields})
    if not alpha_given:
        train.alpha = None
    try:
        train.validate("final")
        if alpha_given:
            train.validate("main")
    except ConfigError as exc:
        raise ConfigError(f"{source}: [train] {exc}") from None
    if train.num_starts > size:
        raise ConfigError(f"{source}: [train] num_starts: {train.num_starts} exceeds size {size}")
    if ckpt_every < 1:
        raise ConfigError(f"{source}: [train] checkpoint_interval: must be >= 1")

    ev = dict(values.get("eval", {}))
    count = ev.pop("eval_count", 200)
    eval_seed = ev.pop("eval_seed", 9001)
    if "k" in ev:
        ev["K"] = ev.pop("k")
    try:
        evc = EvalConfig.for_kind(kind, **ev)
    except ParameterError as exc:
        raise ConfigError(f"{source}: [eval] {exc}") from None

    sw = values.get("sweep", {})
    return RunConfig(
        kind=kind, size=size, policy=policy, train=train, alpha_given=alpha_given,
        checkpoint_interval=ckpt_every, oracle=oracle, eval=evc, eval_count=count, eval_seed=eval_seed,
        sweep_alphas=sw.get("alphas", []), sweep_gammas=sw.get("gammas", []),
    )


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def default_config(kind: str = "tsp", size: int = 10) -> RunConfig:
    return parse_config(f"[problem]\nkind = {kind}\nsize = {size}\n")


__all__ = ["RunConfig", "parse_config", "load_config", "default_config", "SCHEMA", "KIND_DEFAULTS"]
