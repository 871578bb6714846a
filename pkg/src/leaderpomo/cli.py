"""Command-line entry points: train, finalize, eval, oracle, sweep."""

from __future__ import annotations

import argparse
import contextlib
import csv
import datetime as dt
import hashlib
import io
import json
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint
from .config import RunConfig, default_config, load_config
from .errors import CheckpointError, ConfigError, ParameterError, ParseError, TrainingDiverged
from .inference import EvalResult, eval_greedy, evaluate, sample_candidates, solution_costs
from .problems import (
    CVRP,
    HELD_KARP_MAX,
    TSP,
    ProblemInstance,
    generate_instances,
    held_karp,
    load_instances,
    parse_cvrplib,
    parse_tsplib,
)
from .training import PhaseReport, TrainState, train_final, train_main

OUT_DIR_ENV = "LEADERPOMO_OUT_DIR"
DATA_DIR = Path(__file__).parent / "data"
REFERENCE_OPTIMA = DATA_DIR / "reference_optima.json"


def log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ------------------------------------------------------------------ manifest


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    seeds: dict
    config_digest: str
    config_text: str
    code_version: str = __version__
    started: str = field(default_factory=_now)
    finished: str = ""
    files: dict[str, str] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def finish(self, out_dir: Path) -> Path:
        """Hash every file in ``out_dir`` (except the manifest) and write ``manifest.json``."""
        self.finished = _now()
        self.files = {
            str(p.relative_to(out_dir)): sha256_file(p)
            for p in sorted(out_dir.rglob("*"))
            if p.is_file() and p.name != "manifest.json"
        }
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def verify_manifest(out_dir) -> list[str]:
    """Files whose content no longer matches the manifest (empty list when all match)."""
    out_dir = Path(out_dir)
    man = json.loads((out_dir / "manifest.json").read_text())
    bad = []
    for name, digest in man["files"].items():
        p = out_dir / name
        if not p.is_file() or sha256_file(p) != digest:
            bad.append(name)
    return bad


# ------------------------------------------------------------------ helpers


@contextlib.contextmanager
def deterministic_mode(enabled: bool):
    """Pin BLAS to one thread so floating-point reductions run in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def _out_dir(args, command: str) -> Path:
    base = args.out_dir or os.environ.get(OUT_DIR_ENV) or os.path.join("runs", command)
    path = Path(base)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(args, kind: str | None = None, size: int | None = None) -> RunConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = default_config(kind or TSP, size or 10)
    return cfg.with_overrides(
        seed=getattr(args, "seed", None),
        alpha=getattr(args, "alpha", None) if args.command == "train" else None,
        strategy=getattr(args, "strategy", None),
        K=getattr(args, "K", None),
        time_budget=getattr(args, "time_budget", None),
    )


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow(["n/a" if x is None else (repr(x) if isinstance(x, float) else x) for x in r])


def load_reference(path) -> dict[str, float]:
    """``{id: cost}`` or ``{id: {"cost": ...}}`` (the oracle command's output)."""
    raw = json.loads(Path(path).read_text())
    out = {}
    for k, v in raw.items():
        out[k] = float(v["cost"] if isinstance(v, dict) else v)
    return out


def read_library_dir(path, kind: str) -> list[ProblemInstance]:
    path = DATA_DIR if str(path) == "builtin" else Path(path)
    suffix, parse = (".tsp", parse_tsplib) if kind == TSP else (".vrp", parse_cvrplib)
    files = sorted(p for p in path.iterdir() if p.suffix.lower() == suffix)
    out = []
    for f in files:
        try:
            out.append(parse(f.read_text()))
        except ParseError as exc:
            raise ParseError(f"{f}: {exc}") from None
    return out


def reference_optima(instances, reference: dict[str, float] | None, exact: bool = True) -> list[float | None]:
    """Known optimum per instance: reference file first, then Held-Karp for small TSP."""
    out = []
    for inst in instances:
        if reference and inst.id in reference:
            out.append(reference[inst.id])
        elif exact and inst.kind == TSP and inst.num_nodes <= HELD_KARP_MAX:
            out.append(held_karp(inst).optimal_cost)
        else:
            out.append(None)
    return out


def held_out(cfg: RunConfig) -> list[ProblemInstance]:
    return generate_instances(cfg.kind, cfg.size, cfg.eval_count, cfg.eval_seed)


def _check_compatible(ckpt: Checkpoint, cfg: RunConfig) -> None:
    if ckpt.policy_config != cfg.policy.to_dict():
        diff = sorted(k for k in ckpt.policy_config if ckpt.policy_config[k] != cfg.policy.to_dict().get(k))
        raise CheckpointError(f"checkpoint policy_config is incompatible with the config (differs in {diff})")


def _report_writer(path: Path):
    def on_report(rep: PhaseReport):
        with open(path, "a") as f:
            f.write(json.dumps(rep.to_dict(), sort_keys=True) + "\n")
        gap = "n/a" if rep.best_of_N_gap is None else f"{100 * rep.best_of_N_gap:.3f}%"
        log(f"[{rep.phase}] step {rep.step} lr {rep.lr:.3g} cost {rep.cost_mean:.4f} gap {gap} "
            f"leader<max {rep.leader_below_max_frac:.2f}")
    return on_report


# ------------------------------------------------------------------ train / finalize


def run_train(cfg: RunConfig, out: Path, resume: Path | None = None) -> Checkpoint:
    cfg.require_alpha()
    reports = out / "reports.jsonl"
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    if resume is not None:
        base = Checkpoint.load(resume)
        _check_compatible(base, cfg)
        if base.phase != "main":
            raise CheckpointError("can only resume training from a main-phase checkpoint")
        state = TrainState.from_checkpoint(base, cfg.train)
    else:
        state = TrainState.fresh(cfg.train, cfg.policy)
        reports.write_text("")

    def on_step(s: TrainState):
        if s.step % cfg.checkpoint_interval == 0:
            s.checkpoint(cfg.train).save(ckpt_dir / f"step_{s.step:07d}.bin")

    target = cfg.train.steps_main
    ckpt, _ = train_main(cfg.train, state, cfg.oracle, _report_writer(reports), on_step, until=target)
    ckpt.save(out / "checkpoint.bin")
    return ckpt


def final_schedule(cfg: RunConfig) -> list[dict]:
    t = cfg.train
    return [{"lr": t.lr_final, "steps": t.steps_final}, {"lr": t.lr_tail, "steps": t.steps_tail}]


def run_finalize(cfg: RunConfig, base: Checkpoint, out: Path) -> Checkpoint:
    if base.phase == "final":
        log("warning: checkpoint is already final-phase; finalizing again")
    _check_compatible(base, cfg)
    state = TrainState.from_checkpoint(base, cfg.train)
    reports = out / "reports_final.jsonl"
    reports.write_text("")
    ckpt, _ = train_final(cfg.train, state, cfg.oracle, _report_writer(reports))
    ckpt.metadata = dict(base.metadata, finalized_from_step=base.step, final_schedule=final_schedule(cfg))
    ckpt.save(out / "checkpoint_final.bin")
    return ckpt


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, "train")
    man = RunManifest("train", {"seed": cfg.train.seed}, cfg.digest(), cfg.to_text())
    with deterministic_mode(args.deterministic):
        ckpt = run_train(cfg, out, Path(args.resume) if args.resume else None)
    man.extra = {"final_step": ckpt.step, "deterministic": bool(args.deterministic), "resumed_from": args.resume}
    man.finish(out)
    print(f"trained to step {ckpt.step}; checkpoint {out / 'checkpoint.bin'}")
    return 0


def cmd_finalize(args) -> int:
    base = Checkpoint.load(args.checkpoint)
    cfg = _config(args, base.policy_config["kind"], base.train_config.get("size"))
    out = _out_dir(args, "finalize")
    man = RunManifest("finalize", {"seed": cfg.train.seed}, cfg.digest(), cfg.to_text())
    with deterministic_mode(args.deterministic):
        ckpt = run_finalize(cfg, base, out)
    man.extra = {"schedule": final_schedule(cfg), "input_checkpoint": sha256_file(args.checkpoint),
                 "deterministic": bool(args.deterministic)}
    man.finish(out)
    print(f"final-phase checkpoint {out / 'checkpoint_final.bin'} (step {ckpt.step})")
    return 0


# ------------------------------------------------------------------ eval


def load_source(args, cfg: RunConfig) -> tuple[list[ProblemInstance], dict[str, float] | None]:
    reference = load_reference(args.optima) if args.optima else None
    if args.tsplib:
        if reference is None:
            reference = load_reference(REFERENCE_OPTIMA)
        return read_library_dir(args.tsplib, TSP), reference
    if args.cvrplib:
        if reference is None:
            reference = load_reference(REFERENCE_OPTIMA)
        return read_library_dir(args.cvrplib, CVRP), reference
    if args.instances:
        return load_instances(args.instances), reference
    count = args.count if args.count is not None else cfg.eval_count
    seed = args.instance_seed if args.instance_seed is not None else cfg.eval_seed
    return generate_instances(cfg.kind, cfg.size, count, seed), reference


def write_eval(out: Path, res: EvalResult) -> None:
    (out / "results.jsonl").write_text(res.to_jsonl())
    s = res.summary()
    _write_csv(out / "summary.csv", list(s), [list(s.values())])
    if res.k_curve:
        (out / "kcurve.csv").write_text(res.k_curve_csv())


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    pc = ckpt.policy_config
    cfg = _config(args, pc["kind"], ckpt.train_config.get("size"))
    instances, reference = load_source(args, cfg)
    out = _out_dir(args, "eval")
    man = RunManifest("eval", {"eval_seed": cfg.eval_seed, "seed": cfg.train.seed}, cfg.digest(), cfg.to_text())
    opt = reference_optima(instances, reference)
    with deterministic_mode(args.deterministic):
        res = evaluate(ckpt.policy(), instances, cfg.eval, np.random.default_rng(cfg.train.seed), opt)
    write_eval(out, res)
    man.extra = {"strategy": res.strategy, "checkpoint": sha256_file(args.checkpoint), "summary": res.summary()}
    man.finish(out)
    for rec in res.records():
        g = "n/a" if rec["gap"] is None else f"{100 * rec['gap']:.4f}%"
        log(f"{rec['id'] or '-'}: cost {rec['cost']:.4f} gap {g}")
    mg = res.mean_gap
    print(f"{res.strategy}: {len(instances)} instances, mean cost {res.mean_cost:.6f}, "
          f"mean gap {'n/a' if mg is None else f'{100 * mg:.4f}%'}")
    return 0


# ------------------------------------------------------------------ oracle


def run_oracle(instances) -> dict:
    out = {}
    for i, inst in enumerate(instances):
        key = inst.id or str(i)
        if inst.kind != TSP or inst.num_nodes > HELD_KARP_MAX:
            log(f"skipping {key}: exact oracle covers TSP with at most {HELD_KARP_MAX} nodes")
            continue
        r = held_karp(inst)
        out[key] = {"cost": r.optimal_cost, "tour": list(r.optimal_tour)}
    return out


def cmd_oracle(args) -> int:
    if args.instances:
        instances = load_instances(args.instances)
    elif args.tsplib:
        instances = read_library_dir(args.tsplib, TSP)
    else:
        cfg = _config(args)
        count = args.count if args.count is not None else cfg.eval_count
        seed = args.instance_seed if args.instance_seed is not None else cfg.eval_seed
        instances = generate_instances(TSP, cfg.size, count, seed)
    out = _out_dir(args, "oracle")
    man = RunManifest("oracle", {"instance_seed": args.instance_seed}, "", "")
    optima = run_oracle(instances)
    (out / "optima.json").write_text(json.dumps(optima, indent=1, sort_keys=True) + "\n")
    man.finish(out)
    print(f"{len(optima)} optima written to {out / 'optima.json'}")
    return 0


# ------------------------------------------------------------------ sweeps


def _float_list(text: str | None) -> list[float]:
    return [] if not text else [float(x) for x in text.replace(",", " ").split()]


def greedy_gap(ckpt: Checkpoint, instances, opt) -> tuple[float, float | None]:
    res = eval_greedy(ckpt.policy(), instances, False, opt)
    return res.mean_cost, res.mean_gap


def sample_stats(ckpt: Checkpoint, instances, K: int, seed: int) -> dict:
    """Single-sample mean cost ``mu`` and mean per-instance sampled-cost variance ``sigma``."""
    rng = np.random.default_rng(seed)
    cands = sample_candidates(ckpt.policy(), instances, K, rng)
    costs = np.stack([solution_costs(i, c) for i, c in zip(instances, cands)])
    return {"mu": float(costs.mean()), "sigma": float(costs.var(axis=1).mean()), "costs": costs}


def run_alpha_sweep(cfg: RunConfig, alphas: list[float], out: Path) -> list[dict]:
    if len(alphas) < 2:
        raise ConfigError("alpha sweep needs at least two values")
    rows = []
    instances = held_out(cfg)
    opt = reference_optima(instances, None)
    for a in alphas:
        c = cfg.with_overrides(alpha=a)
        reps: list[PhaseReport] = []
        ckpt, reps = train_main(c.train, None, cfg.oracle, None, None, c.policy)
        tag = "off" if c.train.alpha is None else f"{a:g}"
        _write_csv(out / f"curve_alpha_{tag}.csv", ["step", "mean_reward", "best_of_N_gap"],
                   [[r.step, r.mean_reward, r.best_of_N_gap] for r in reps])
        cost, gap = greedy_gap(ckpt, instances, opt)
        rows.append({"alpha": tag, "cost": cost, "gap": gap})
        log(f"alpha {tag}: cost {cost:.4f} gap {gap}")
    _write_csv(out / "alpha_summary.csv", ["alpha", "cost", "gap"], [list(r.values()) for r in rows])
    return rows


def run_gamma_sweep(cfg: RunConfig, base: Checkpoint, gammas: list[float], out: Path) -> list[dict]:
    """One final phase per learning rate; Table-6 style row (cost, gap, mu, sigma)."""
    if not gammas:
        raise ConfigError("gamma sweep needs at least one learning rate")
    instances = held_out(cfg)
    opt = reference_optima(instances, None)
    rows = []
    K = cfg.eval.K
    variants = [("pre-final", base)]
    for g in gammas:
        train = replace(cfg.train, lr_final=g)
        state = TrainState.from_checkpoint(base, train)
        ckpt, _ = train_final(train, state, cfg.oracle)
        variants.append((f"{g:g}", ckpt))
    for name, ck in variants:
        cost, gap = greedy_gap(ck, instances, opt)
        st = sample_stats(ck, instances, K, cfg.eval_seed)
        rows.append({"lr_final": name, "cost": cost, "gap": gap, "mu": st["mu"], "sigma": st["sigma"]})
        log(f"lr_final {name}: cost {cost:.4f} gap {gap} mu {st['mu']:.4f} sigma {st['sigma']:.5f}")
    _write_csv(out / "gamma_summary.csv", ["lr_final", "cost", "gap", "mu", "sigma"], [list(r.values()) for r in rows])
    return rows


ABLATION_ROWS = (("LR", True, True), ("w/o main", False, True), ("w/o final", True, False), ("neither", False, False))


def run_ablation(cfg: RunConfig, out: Path, alpha: float | None = None,
                 mains: dict[bool, Checkpoint] | None = None) -> list[dict]:
    """Four-way ablation: Leader Reward in the main phase and/or the final phase.

    ``mains`` may supply already-trained main-phase checkpoints keyed by
    whether Leader Reward was used.
    """
    alpha = alpha if alpha is not None else (cfg.train.alpha or 5.0)
    instances = held_out(cfg)
    opt = reference_optima(instances, None)
    mains = dict(mains or {})
    for lr_main in (True, False):
        if lr_main not in mains:
            c = cfg.with_overrides(alpha=alpha if lr_main else "off")
            mains[lr_main], _ = train_main(c.train, None, cfg.oracle, None, None, c.policy)
    rows = []
    for name, use_main, use_final in ABLATION_ROWS:
        ck = mains[use_main]
        if use_final:
            state = TrainState.from_checkpoint(ck, cfg.train)
            ck, _ = train_final(cfg.train, state, cfg.oracle)
        cost, gap = greedy_gap(ck, instances, opt)
        rows.append({"variant": name, "leader_main": use_main, "final_phase": use_final, "cost": cost, "gap": gap})
    order = sorted(rows, key=lambda r: (r["gap"] if r["gap"] is not None else r["cost"]))
    _write_csv(out / "ablation.csv", ["variant", "leader_main", "final_phase", "cost", "gap"],
               [list(r.values()) for r in rows])
    log("ablation ordering (best first): " + " < ".join(r["variant"] for r in order))
    return rows


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, "sweep")
    man = RunManifest("sweep", {"seed": cfg.train.seed, "eval_seed": cfg.eval_seed}, cfg.digest(), cfg.to_text())
    with deterministic_mode(args.deterministic):
        if args.ablation:
            rows = run_ablation(cfg, out)
            kind = "ablation"
        elif args.sweep_gamma is not None or (cfg.sweep_gammas and args.alpha is None):
            gammas = _float_list(args.sweep_gamma) or cfg.sweep_gammas
            if args.checkpoint:
                base = Checkpoint.load(args.checkpoint)
                _check_compatible(base, cfg)
            else:
                cfg.require_alpha()
                base, _ = train_main(cfg.train, None, cfg.oracle, None, None, cfg.policy)
            rows = run_gamma_sweep(cfg, base, gammas, out)
            kind = "gamma"
        else:
            alphas = _float_list(args.alpha) or cfg.sweep_alphas
            rows = run_alpha_sweep(cfg, alphas, out)
            kind = "alpha"
    man.extra = {"sweep": kind, "rows": rows}
    man.finish(out)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(rows[0]))
    for r in rows:
        w.writerow(r.values())
    print(buf.getvalue(), end="")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="leaderpomo", description="Leader Reward POMO training and evaluation")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="run configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--deterministic", action="store_true", help="single-threaded BLAS for bit-identical reruns")
        sp.add_argument("--out-dir", help=f"output directory (default ${OUT_DIR_ENV} or runs/<command>)")

    def source(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--tsplib", help="directory of .tsp files ('builtin' for the bundled ones)")
        g.add_argument("--cvrplib", help="directory of .vrp files")
        g.add_argument("--instances", help="instance JSON file")
        sp.add_argument("--count", type=int, help="number of generated instances")
        sp.add_argument("--instance-seed", type=int, help="seed for generated instances")

    t = sub.add_parser("train", help="main training phase")
    common(t, config_required=True)
    t.add_argument("--alpha", help="Leader Reward alpha (> 1) or 'off' for plain POMO")
    t.add_argument("--resume", help="main-phase checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("finalize", help="final training phase (leader-only advantages)")
    common(f)
    f.add_argument("--checkpoint", required=True)
    f.set_defaults(func=cmd_finalize)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--strategy", choices=["greedy", "greedy_aug8", "sampling", "sgbs", "eas", "sgbs_eas"])
    e.add_argument("--K", type=int, help="samples per instance for sampling")
    e.add_argument("--time-budget", type=float, help="seconds per instance for EAS strategies")
    e.add_argument("--optima", help="reference optima JSON (id -> cost)")
    source(e)
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("oracle", help="exact optima for small TSP instances")
    common(o)
    source(o)
    o.set_defaults(func=cmd_oracle)

    s = sub.add_parser("sweep", help="alpha sweep, final-phase learning-rate sweep, or ablation")
    common(s, config_required=True)
    s.add_argument("--alpha", help="comma-separated alpha values")
    s.add_argument("--sweep-gamma", help="comma-separated final-phase learning rates")
    s.add_argument("--checkpoint", help="main-phase checkpoint for --sweep-gamma")
    s.add_argument("--ablation", action="store_true", help="four-way Leader Reward ablation")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ParseError, ParameterError) as exc:
        log(f"error: {exc}")
        return 2
    except TrainingDiverged as exc:
        log(f"error: {exc}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
