"""Command-line pipeline: offline data, surrogate, imitation, policy search, evaluation, comparison.

Every command reads one YAML config.  Outputs go to the configured run
directory and carry the config hash so results can be traced back to the
exact settings that produced them.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import baseline, gridsim, surrogate
from .datasets import load_jsonl, save_jsonl
from .gridsim import GridConfig, GridModel, Task, TrajectoryLog
from .neuralnet import RecurrentPolicyNet, TrainingDiverged, flatten
from .pars import (
    GroundTruth, ParsConfig, ParsTrainer, PolicyController, load_policy, read_reports,
    rollout_batch, save_policy, write_reports,
)
from .reward import RewardParams, shed_amounts, step_reward

log = logging.getLogger("mbpars")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

MODEL_BASED = "mb"
MODEL_FREE = "mf"
# settings that change how a run executes but not what it computes
_EXECUTION_ONLY = {("pars", "workers"), ("out",)}


class ConfigError(ValueError):
    pass


@dataclass
class TaskSpec:
    train_load_scales: tuple[float, ...] = (1.0, 1.15, 0.85)
    train_fault_buses: tuple[int, ...] = (0, 2, 4)
    test_load_scales: tuple[float, ...] = (1.0, 1.15, 0.85, 0.92)
    test_fault_buses: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    fault_start: float = 1.0
    fault_duration: float = 0.1

    def build(self) -> tuple[list[Task], list[Task]]:
        mk = lambda scales, buses: [  # noqa: E731
            Task(float(s), int(b), self.fault_start, self.fault_duration) for s in scales for b in buses
        ]
        return mk(self.train_load_scales, self.train_fault_buses), mk(self.test_load_scales, self.test_fault_buses)


@dataclass
class DataSpec:
    episodes_per_task: int = 20
    noise_std: float = 0.03
    M: int = 5


@dataclass
class SurrogateSpec:
    hidden: tuple[int, ...] = (128, 64, 64)
    delta_max_v: float = 1.0
    delta_max_p: float = 0.25
    epochs: int = 300
    lr: float = 3e-3
    lr_decay: float = 0.985
    batch_size: int = 256
    val_threshold: float = 5e-4
    exact_load: bool = True


@dataclass
class ImitationSpec:
    epochs: int = 40
    lr: float = 3e-3
    batch_size: int = 16
    truncation: int = 20


@dataclass
class CompareSpec:
    threshold_frac: float = 0.95


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    backend: str = MODEL_BASED
    use_imitation: bool = True
    grid: GridConfig = field(default_factory=GridConfig)
    tasks: TaskSpec = field(default_factory=TaskSpec)
    data: DataSpec = field(default_factory=DataSpec)
    surrogate: SurrogateSpec = field(default_factory=SurrogateSpec)
    imitation: ImitationSpec = field(default_factory=ImitationSpec)
    reward: RewardParams = field(default_factory=RewardParams)
    pars: dict = field(default_factory=dict)
    compare: CompareSpec = field(default_factory=CompareSpec)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def pars_config(self) -> ParsConfig:
        return ParsConfig(seed=self.seed, **self.pars)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pars"] = asdict(self.pars_config())
        return d

    @property
    def hash(self) -> str:
        d = self.to_dict()
        for path in _EXECUTION_ONLY:
            node = d
            for key in path[:-1]:
                node = node[key]
            node.pop(path[-1], None)
        blob = json.dumps(d, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_SECTIONS = {
    "grid": GridConfig,
    "tasks": TaskSpec,
    "data": DataSpec,
    "surrogate": SurrogateSpec,
    "imitation": ImitationSpec,
    "reward": RewardParams,
    "compare": CompareSpec,
}


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _section(cls, raw, name: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**{k: _tuplify(v) for k, v in raw.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from exc


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    raw = dict(raw or {})
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {k: raw[k] for k in ("seed", "out", "backend", "use_imitation") if k in raw}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _section(cls, raw.get(name), name)
    pars_raw = raw.get("pars") or {}
    if not isinstance(pars_raw, dict):
        raise ConfigError("section 'pars' must be a mapping")
    bad = set(pars_raw) - {f.name for f in fields(ParsConfig)} | ({"seed"} & set(pars_raw))
    if bad:
        raise ConfigError(f"unknown keys in 'pars': {sorted(bad)}")
    kwargs["pars"] = dict(pars_raw)
    cfg = ExperimentConfig(**kwargs)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.backend not in (MODEL_BASED, MODEL_FREE):
        raise ConfigError(f"backend must be {MODEL_BASED!r} or {MODEL_FREE!r}")
    if not isinstance(cfg.seed, int):
        raise ConfigError("seed must be an integer")
    try:
        grid = gridsim.build_grid(cfg.grid)
        train, test = cfg.tasks.build()
        for t in train + test:
            if not 0 <= t.fault_bus < grid.n_buses:
                raise ConfigError(f"fault bus {t.fault_bus} outside the {grid.n_buses}-bus grid")
        cfg.pars_config()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if cfg.data.M < 1 or cfg.data.episodes_per_task < 1 or cfg.data.noise_std < 0:
        raise ConfigError("data: need M >= 1, episodes_per_task >= 1, noise_std >= 0")
    if cfg.data.M >= grid.n_steps:
        raise ConfigError("data: M must be shorter than an episode")
    if not 0 < cfg.compare.threshold_frac <= 1:
        raise ConfigError("compare.threshold_frac must lie in (0, 1]")


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return config_from_dict({})
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)


# -- shared artefact paths ------------------------------------------------------


def _paths(out: Path) -> dict[str, Path]:
    return {
        "offline": out / "offline.jsonl",
        "offline_csv": out / "offline.csv",
        "offline_summary": out / "offline_summary.json",
        "surrogate": out / "surrogate.json",
        "surrogate_loss": out / "surrogate_loss.csv",
        "surrogate_meta": out / "surrogate_meta.json",
        "bc": out / "bc_policy.json",
        "bc_loss": out / "bc_loss.csv",
        "bc_meta": out / "bc_meta.json",
    }


def run_tag(cfg: ExperimentConfig) -> str:
    return f"{cfg.backend}{'_il' if cfg.use_imitation else ''}_seed{cfg.seed}"


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def _write_loss_csv(path: Path, history: dict, config_hash: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for i, (a, b) in enumerate(zip(history["train"], history["val"])):
            w.writerow([i, repr(float(a)), repr(float(b))])


# -- commands ---------------------------------------------------------------------


def cmd_gen_data(cfg: ExperimentConfig) -> Path:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    p = _paths(out)
    grid = gridsim.build_grid(cfg.grid)
    train, _ = cfg.tasks.build()
    ds = baseline.generate_offline(grid, train, cfg.data.episodes_per_task, cfg.data.noise_std, cfg.data.M, cfg.seed)
    save_jsonl(ds, p["offline"])
    per_task = {}
    per_episode = len(ds) // max(len(train) * cfg.data.episodes_per_task, 1)
    for t in train:
        per_task[f"load{t.load_scale}_bus{t.fault_bus}"] = per_episode * cfg.data.episodes_per_task
    summary = {
        "config_hash": cfg.hash,
        "tuples": len(ds),
        "tuples_per_task": per_task,
        "ground_truth_samples": baseline.offline_samples(ds),
    }
    _write_json(p["offline_summary"], summary)
    log.info("offline dataset: %d tuples", len(ds))
    return p["offline"]


def _offline(cfg: ExperimentConfig):
    p = _paths(cfg.out_dir)
    if not p["offline"].exists():
        raise ConfigError(f"offline dataset {p['offline']} not found; run gen-data first")
    return load_jsonl(p["offline"])


def cmd_train_surrogate(cfg: ExperimentConfig) -> Path:
    p = _paths(cfg.out_dir)
    ds = _offline(cfg)
    grid = gridsim.build_grid(cfg.grid)
    s = cfg.surrogate
    model = surrogate.build_surrogate(
        grid.n_buses, grid.n_controlled, s.hidden, s.delta_max_v, s.delta_max_p, cfg.data.M, grid.dt,
        seed=cfg.seed, data=ds, exact_load=s.exact_load,
    )
    t0 = time.perf_counter()
    model, report = surrogate.train_offline(
        model, ds, s.epochs, cfg.seed, lr=s.lr, batch_size=s.batch_size, lr_decay=s.lr_decay,
    )
    seconds = time.perf_counter() - t0
    model.meta["config_hash"] = cfg.hash
    surrogate.save_surrogate(model, p["surrogate"])
    _write_loss_csv(p["surrogate_loss"], {"train": report.train_loss, "val": report.val_loss}, cfg.hash)
    _write_json(p["surrogate_meta"], {
        "config_hash": cfg.hash, "train_seconds": seconds, "final_val_loss": report.final_val,
        "val_threshold": s.val_threshold, "below_threshold": bool(report.final_val < s.val_threshold),
    })
    log.info("surrogate val loss %.3g after %d epochs (%.1fs)", report.final_val, s.epochs, seconds)
    return p["surrogate"]


def cmd_imitate(cfg: ExperimentConfig) -> Path:
    p = _paths(cfg.out_dir)
    ds = _offline(cfg)
    grid = gridsim.build_grid(cfg.grid)
    pc = cfg.pars_config()
    stats = baseline.observation_stats(ds)
    net = RecurrentPolicyNet(grid.obs_dim, pc.hidden, grid.n_controlled, seed=cfg.seed)
    im = cfg.imitation
    t0 = time.perf_counter()
    net, hist = baseline.imitate(net, ds, im.epochs, cfg.seed, stats, im.lr, im.batch_size, truncation=im.truncation)
    seconds = time.perf_counter() - t0
    save_policy(p["bc"], flatten(net), stats, net, config_hash=cfg.hash, source="imitation")
    _write_loss_csv(p["bc_loss"], hist, cfg.hash)
    _write_json(p["bc_meta"], {"config_hash": cfg.hash, "train_seconds": seconds, "final_val_loss": hist["val"][-1]})
    return p["bc"]


def _read_seconds(path: Path) -> float:
    return float(json.loads(path.read_text(encoding="utf-8"))["train_seconds"]) if path.exists() else 0.0


def cmd_train_policy(cfg: ExperimentConfig, callback=None) -> Path:
    """Full policy search; returns the path of the iteration report CSV."""
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    p = _paths(out)
    grid = gridsim.build_grid(cfg.grid)
    train, _ = cfg.tasks.build()
    pc = cfg.pars_config()
    model = offline = theta0 = stats = None
    offline_samples = 0
    wall_offset = 0.0
    if cfg.backend == MODEL_BASED:
        if not p["surrogate"].exists():
            raise ConfigError(f"model-based training needs {p['surrogate']}; run train-surrogate first")
        model = surrogate.load_surrogate(p["surrogate"])
        if model.n_voltage != grid.n_buses or model.n_controlled != grid.n_controlled:
            raise ConfigError("surrogate checkpoint does not match the grid")
        offline = _offline(cfg)
        wall_offset += _read_seconds(p["surrogate_meta"])
    if cfg.use_imitation:
        if not p["bc"].exists():
            cmd_imitate(cfg)
        theta0, stats, template, _ = load_policy(p["bc"])
        if template.n_in != grid.obs_dim or template.n_out != grid.n_controlled or template.n_hidden != pc.hidden:
            raise ConfigError("imitation checkpoint does not match the policy layout")
        wall_offset += _read_seconds(p["bc_meta"])
    if cfg.backend == MODEL_BASED or cfg.use_imitation:
        if offline is None:
            offline = _offline(cfg)
        offline_samples = baseline.offline_samples(offline)
    trainer = ParsTrainer(
        grid, train, pc, theta0=theta0, stats=stats, model=model,
        offline=offline if cfg.backend == MODEL_BASED else None,
        reward_params=cfg.reward, offline_samples=offline_samples, wall_offset=wall_offset,
    )
    tag = run_tag(cfg)
    ckpt_dir = out / f"checkpoints_{tag}"
    ckpt_dir.mkdir(exist_ok=True)

    def on_iter(rep, tr):
        if rep.surrogate_diverged:
            log.warning("surrogate retrain diverged at iteration %d", rep.iteration)
        if pc.checkpoint_every and rep.iteration % pc.checkpoint_every == 0:
            save_policy(ckpt_dir / f"theta_{rep.iteration:04d}.json", tr.state.theta, tr.state.stats,
                        tr.template, config_hash=cfg.hash, iteration=rep.iteration)
        if callback:
            callback(rep, tr)

    reports = trainer.run(on_iter)
    report_path = out / f"report_{tag}.csv"
    write_reports(reports, report_path, f"config_hash={cfg.hash}")
    save_policy(out / f"policy_{tag}.json", trainer.state.theta, trainer.state.stats, trainer.template,
                config_hash=cfg.hash, iteration=trainer.state.iteration, backend=cfg.backend,
                use_imitation=cfg.use_imitation)
    return report_path


@dataclass
class Evaluation:
    tasks: list[Task]
    returns: np.ndarray
    shed: np.ndarray
    v_recovery: np.ndarray

    @property
    def passed(self) -> np.ndarray:
        return self.v_recovery >= 0.95

    @property
    def mean_reward(self) -> float:
        return float(self.returns.mean())

    @property
    def pass_rate(self) -> float:
        return float(self.passed.mean())


def evaluate_policy(grid: GridModel, tasks: Sequence[Task], theta, stats, template,
                    reward_params: RewardParams = RewardParams()):
    """Deterministic ground-truth evaluation of one policy on every task."""
    ctrl = PolicyController(template, np.tile(theta, (len(tasks), 1)), stats)
    res = rollout_batch(GroundTruth(grid), list(tasks), ctrl, reward_params, collect=True)
    return Evaluation(list(tasks), res.returns, res.shed_total, res.v_recovery), res


def cmd_evaluate(cfg: ExperimentConfig, policy_path: str | Path) -> Path:
    policy_path = Path(policy_path)
    if not policy_path.exists():
        raise ConfigError(f"policy checkpoint {policy_path} not found")
    theta, stats, template, _ = load_policy(policy_path)
    grid = gridsim.build_grid(cfg.grid)
    if template.n_in != grid.obs_dim or template.n_out != grid.n_controlled:
        raise ConfigError("policy checkpoint does not match the grid")
    _, test = cfg.tasks.build()
    ev, res = evaluate_policy(grid, test, theta, stats, template, cfg.reward)
    out = cfg.out_dir / f"eval_{policy_path.stem}"
    traj_dir = out / "trajectories"
    traj_dir.mkdir(parents=True, exist_ok=True)
    table = out / "rewards.csv"
    with open(table, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={cfg.hash}\n")
        w = csv.writer(fh)
        w.writerow(["task", "load_scale", "fault_bus", "reward", "shed_pu", "v_min_at_recovery", "passed"])
        for i, t in enumerate(test):
            w.writerow([i, t.load_scale, t.fault_bus, repr(float(ev.returns[i])), repr(float(ev.shed[i])),
                        repr(float(ev.v_recovery[i])), int(ev.passed[i])])
    for i, t in enumerate(test):
        _dump_trajectory(grid, t, res, i, cfg.reward, traj_dir / f"task{i:02d}_load{t.load_scale}_bus{t.fault_bus}.csv")
    _write_json(out / "summary.json", {
        "config_hash": cfg.hash, "policy": str(policy_path), "mean_reward": ev.mean_reward,
        "pass_rate": ev.pass_rate, "n_tasks": len(test),
    })
    return table


def _dump_trajectory(grid, task, res, i, reward_params, path) -> None:
    """Replay the recorded actions on the deterministic ground truth and write the episode."""
    states = gridsim.simulate(grid, task, res.actions[i])
    L_c = grid.L[list(grid.controlled)]
    logbook = TrajectoryLog(grid)
    for k, a in enumerate(res.actions[i]):
        shed, invalid = shed_amounts(states[k].P, a, L_c, task.load_scale, reward_params.p_eps)
        r = step_reward(states[k + 1].V, shed, invalid, states[k + 1].t, task.t_pf, reward_params)
        logbook.add(states[k], a, r)
    logbook.add(states[-1], None, None)
    logbook.to_csv(path)


# -- comparison ---------------------------------------------------------------------


@dataclass
class Curve:
    label: str
    iterations: np.ndarray
    reward: np.ndarray
    samples: np.ndarray
    wall: np.ndarray
    n_seeds: int


def average_curves(label: str, reports: Sequence[list[dict]]) -> Curve:
    n = min(len(r) for r in reports)
    if n == 0:
        raise ValueError(f"empty report for {label}")
    col = lambda key: np.array([[row[key] for row in r[:n]] for r in reports], dtype=float)  # noqa: E731
    return Curve(label, np.arange(n), col("mean_eval_reward").mean(0), col("ground_truth_samples").mean(0),
                 col("wall_seconds").mean(0), len(reports))


def convergence_threshold(best: float, frac: float) -> float:
    """``frac`` of the best reward; for negative rewards the threshold lies below the best."""
    return best * frac if best >= 0 else best - (1.0 - frac) * abs(best)


def first_crossing(curve: Curve, threshold: float) -> int | None:
    hit = np.flatnonzero(curve.reward >= threshold)
    return int(hit[0]) if len(hit) else None


def compare_curves(curves: Sequence[Curve], threshold_frac: float = 0.95, reference: str | None = None) -> list[dict]:
    if len(curves) < 2:
        raise ConfigError("comparison needs at least two runs")
    best = max(float(c.reward.max()) for c in curves)
    thr = convergence_threshold(best, threshold_frac)
    rows = []
    for c in curves:
        k = first_crossing(c, thr)
        rows.append({
            "label": c.label, "n_seeds": c.n_seeds, "best_reward": float(c.reward.max()),
            "final_reward": float(c.reward[-1]), "threshold": thr, "converged": k is not None,
            "iteration": k if k is not None else -1,
            "samples_to_threshold": float(c.samples[k]) if k is not None else float("nan"),
            "seconds_to_threshold": float(c.wall[k]) if k is not None else float("nan"),
        })
    ref = next((r for r in rows if r["label"] == reference), rows[0]) if reference else rows[0]
    for r in rows:
        r["sample_ratio"] = _ratio(r["samples_to_threshold"], ref["samples_to_threshold"])
        r["time_ratio"] = _ratio(r["seconds_to_threshold"], ref["seconds_to_threshold"])
    return rows


def _ratio(a: float, b: float) -> float:
    if not (np.isfinite(a) and np.isfinite(b)) or b == 0:
        return float("nan")
    return a / b


def cmd_compare(cfg: ExperimentConfig, runs: Sequence[str], reference: str | None = None) -> Path:
    """``runs`` are ``label=path`` items; repeated labels are averaged as seeds."""
    grouped: dict[str, list] = {}
    for item in runs:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).stem, item
        if not Path(path).exists():
            raise ConfigError(f"report {path} not found")
        grouped.setdefault(label, []).append(read_reports(path))
    curves = [average_curves(label, reps) for label, reps in grouped.items()]
    rows = compare_curves(curves, cfg.compare.threshold_frac, reference)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    path = out / "compare.csv"
    cols = ["label", "n_seeds", "best_reward", "final_reward", "threshold", "converged", "iteration",
            "samples_to_threshold", "seconds_to_threshold", "sample_ratio", "time_ratio"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_hash={cfg.hash}\n")
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    for r in rows:
        status = "converged" if r["converged"] else "non-convergent"
        print(f"{r['label']}: {status}, samples {r['samples_to_threshold']:.0f}, ratio {r['sample_ratio']:.3f}")
    return path


# -- CLI ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mbpars", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        return p

    common(sub.add_parser("gen-data", help="collect noisy UVLS episodes"))
    common(sub.add_parser("train-surrogate", help="fit the dynamics model on offline data"))
    common(sub.add_parser("imitate", help="behaviour-clone the offline actions"))
    tp = common(sub.add_parser("train-policy", help="run the random-search policy optimiser"))
    tp.add_argument("--backend", choices=[MODEL_BASED, MODEL_FREE])
    tp.add_argument("--no-imitation", action="store_true")
    tp.add_argument("--workers", type=int)
    tp.add_argument("--iterations", type=int, help="override H")
    ev = common(sub.add_parser("evaluate", help="ground-truth evaluation on the test tasks"))
    ev.add_argument("--policy", required=True)
    cp = common(sub.add_parser("compare", help="samples and time to the convergence threshold"))
    cp.add_argument("runs", nargs="+", help="LABEL=report.csv (repeat a label to average seeds)")
    cp.add_argument("--reference", help="label used as the ratio denominator")
    return ap


def _apply_flags(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    if getattr(args, "backend", None):
        cfg = replace(cfg, backend=args.backend)
    if getattr(args, "no_imitation", False):
        cfg = replace(cfg, use_imitation=False)
    extra = {}
    if getattr(args, "workers", None) is not None:
        extra["workers"] = args.workers
    if getattr(args, "iterations", None) is not None:
        extra["H"] = args.iterations
    if extra:
        cfg = replace(cfg, pars={**cfg.pars, **extra})
    validate(cfg)
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _apply_flags(load_config(args.config), args)
        if args.command == "gen-data":
            path = cmd_gen_data(cfg)
        elif args.command == "train-surrogate":
            path = cmd_train_surrogate(cfg)
        elif args.command == "imitate":
            path = cmd_imitate(cfg)
        elif args.command == "train-policy":
            path = cmd_train_policy(cfg)
        elif args.command == "evaluate":
            path = cmd_evaluate(cfg, args.policy)
        else:
            path = cmd_compare(cfg, args.runs, args.reference)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
