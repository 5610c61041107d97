"""Command-line driver: ``tta <subcommand> [--config PATH] [--seed N] [--out DIR] [--threads N]``.

Checkpoints live under ``<out>/checkpoints/<config-hash>/`` and are reused
when present, so ``addition`` after ``finetune`` does not retrain. Every run
writes its outputs atomically plus a JSON manifest next to them.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .autodiff import ContractError, LayoutError, NumericError
from .bench import METHODS, pretrained_theta0, task_addition, task_negation
from .checkpoint import VERSION as CHECKPOINT_VERSION
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, canonical_json, config_hash, default_config, load_config
from .disentangle import grid_scan, linearized_eval, nonlinear_eval
from .fileio import atomic_write_text, csv_text
from .models import init_params, make_model
from .spectral import spectral_report, verify_basis
from .tasks import build_suite
from .taskvec import TaskVector
from .training import finetune_linearized, finetune_nonlinear

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_CHECKPOINT = 0, 1, 2, 3
MODES = ("nonlinear", "linearized")
CSV_FORMAT_VERSION = 1


class MissingCheckpoint(Exception):
    pass


# ---------------------------------------------------------------------------
# run context


@dataclass
class Context:
    cfg: ExperimentConfig
    out: Path
    threads: int
    theta0_path: Path | None = None
    written: dict = field(default_factory=dict)
    _suite: object = None
    _base: object = None

    @property
    def seed(self) -> int:
        return self.cfg.seed

    @property
    def ckpt_dir(self) -> Path:
        return self.out / "checkpoints" / config_hash(self.cfg)[:16]

    @property
    def suite(self):
        if self._suite is None:
            self._suite = build_suite(replace(self.cfg.suite, seed=self.seed))
        return self._suite

    def write(self, name: str, text: str) -> Path:
        path = atomic_write_text(self.out / name, text)
        self.written[name] = hashlib.sha256(text.encode("utf-8")).hexdigest()
        return path

    # -- θ0 -----------------------------------------------------------------

    def theta0(self, init: str = "pretrained"):
        """Load θ0 from ``--theta0`` or the checkpoint directory, else compute it."""
        if self.theta0_path is not None:
            if not self.theta0_path.is_file():
                raise MissingCheckpoint(f"checkpoint not found: {self.theta0_path}")
            return load_checkpoint(self.theta0_path), None
        path = self.ckpt_dir / "theta0.tta"
        if path.is_file():
            return load_checkpoint(path), None
        if init == "random":
            theta0, losses = init_params(self.cfg.model, self.seed), []
        else:
            theta0, losses = pretrained_theta0(self.cfg.setup(), self.suite, self.seed)
        save_checkpoint(path, theta0)
        return theta0, losses

    def base(self):
        if self._base is None:
            self._base = make_model(self.cfg.model, self.seed, self.theta0()[0])
        return self._base

    # -- τ ------------------------------------------------------------------

    def tau_path(self, mode: str, task: int) -> Path:
        return self.ckpt_dir / f"tau_{mode}_task{task}.tta"

    def _train(self, mode: str, task: int):
        fn = finetune_nonlinear if mode == "nonlinear" else finetune_linearized
        ft = replace(self.cfg.finetune, seed=self.seed)
        return fn(self.base(), self.suite.split(task, "train"), ft, self.suite.split(task, "test"))

    def finetune(self, mode: str, task: int):
        run = self._train(mode, task)
        save_checkpoint(self.tau_path(mode, task), run.tau)
        return run

    def taus(self, mode: str, tasks) -> list[TaskVector]:
        """Task vectors for ``tasks``, fine-tuning (in parallel) those not on disk."""
        tasks = list(tasks)
        missing = [t for t in tasks if not self.tau_path(mode, t).is_file()]
        if missing:
            self.base()  # build θ0 once before fanning out
            if self.threads > 1 and len(missing) > 1:
                with ThreadPoolExecutor(max_workers=self.threads) as pool:
                    runs = list(pool.map(lambda t: self._train(mode, t), missing))
            else:
                runs = [self._train(mode, t) for t in missing]
            for t, run in zip(missing, runs):  # single writer
                save_checkpoint(self.tau_path(mode, t), run.tau)
        out = []
        for t in tasks:
            pv = load_checkpoint(self.tau_path(mode, t))
            out.append(TaskVector(pv.layout, pv.values, mode))
        return out


def _check_task(ctx: Context, task: int, what: str = "task") -> int:
    n = len(ctx.suite.specs)
    if not 0 <= task < n:
        raise ConfigError(f"{what}: {task} is out of range for a {n}-task suite")
    return task


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain(ctx: Context, args) -> int:
    if ctx.theta0_path is not None:
        raise ConfigError("--theta0: pretrain computes θ0 and cannot take one")
    path = ctx.ckpt_dir / "theta0.tta"
    if path.is_file():
        path.unlink()  # recompute on request
    theta0, losses = ctx.theta0(args.init)
    ctx.written[str(path.relative_to(ctx.out))] = _file_hash(path)
    ctx.write("pretrain_metrics.csv",
              csv_text(["step", "loss"], [(i, float(v)) for i, v in enumerate(losses)]))
    print(f"theta0 ({args.init}) -> {path}")
    return EXIT_OK


def cmd_finetune(ctx: Context, args) -> int:
    task = _check_task(ctx, args.task, "--task")
    run = ctx.finetune(args.mode, task)
    path = ctx.tau_path(args.mode, task)
    ctx.written[str(path.relative_to(ctx.out))] = _file_hash(path)
    stem = f"finetune_{args.mode}_task{task}"
    ctx.write(f"{stem}.csv", csv_text(["step", "loss"], [(i, float(v)) for i, v in enumerate(run.losses)]))
    ctx.write(f"{stem}_summary.csv", csv_text(["quantity", "value"], [
        ("test_accuracy", float(run.test_accuracy)),
        ("tau_norm", float(np.linalg.norm(run.tau.values))),
    ]))
    print(f"task {task} ({args.mode}): test accuracy {run.test_accuracy:.4f}")
    return EXIT_OK


def _kind(method: str) -> str:
    return "linearized" if method == "linearized" else "nonlinear"


def cmd_addition(ctx: Context, args) -> int:
    tasks = range(len(ctx.suite.specs))
    taus = ctx.taus(_kind(args.method), tasks)
    res = task_addition(ctx.base(), taus, ctx.suite, ctx.cfg.mixing.search_grid, args.method)
    rows = [(res.method, res.alpha, t, res.accuracies[t], res.single_accuracies[t],
             res.normalized_accuracy, res.absolute_accuracy, res.heldout_objective) for t in tasks]
    ctx.write(f"addition_{args.method}.csv", csv_text(
        ["method", "alpha", "task", "accuracy", "single_accuracy", "normalized_accuracy",
         "absolute_accuracy", "heldout_objective"], rows))
    print(f"addition ({args.method}): alpha={res.alpha:g} "
          f"normalized={res.normalized_accuracy:.4f} absolute={res.absolute_accuracy:.4f}")
    return EXIT_OK


NEGATION_FIELDS = ("method", "target_task", "control_task", "alpha", "target_accuracy",
                   "control_accuracy", "pretrained_target_accuracy", "pretrained_control_accuracy",
                   "heldout_control_accuracy", "heldout_threshold", "feasible")


def cmd_negation(ctx: Context, args) -> int:
    control = ctx.suite.control
    targets = [t for t in range(len(ctx.suite.specs)) if t != control]
    taus = ctx.taus(_kind(args.method), targets)
    base, grid = ctx.base(), ctx.cfg.mixing.search_grid
    results = [task_negation(base, tau, ctx.suite, t, control, grid, args.method)
               for t, tau in zip(targets, taus)]
    ctx.write(f"negation_{args.method}.csv",
              csv_text(NEGATION_FIELDS, [[getattr(r, f) for f in NEGATION_FIELDS] for r in results]))
    for r in results:
        print(f"negation ({args.method}) task {r.target_task}: alpha={r.alpha:g} "
              f"target {r.pretrained_target_accuracy:.3f}->{r.target_accuracy:.3f} "
              f"control {r.control_accuracy:.3f} feasible={r.feasible}")
    return EXIT_OK


def cmd_disentangle(ctx: Context, args) -> int:
    a, b = (_check_task(ctx, t, "--tasks") for t in args.tasks)
    if a == b:
        raise ConfigError("--tasks: the two tasks must differ")
    tau_a, tau_b = ctx.taus(_kind(args.method), [a, b])
    base = ctx.base()
    evaluate = nonlinear_eval(base) if args.method == "nonlinear" else linearized_eval(base)
    xi = ctx.cfg.xi
    grid = grid_scan(evaluate, base.params, tau_a, tau_b, xi.grid(), xi.samples_per_task, ctx.seed,
                     task_pair=(ctx.suite.specs[a], ctx.suite.specs[b]), method=args.method)
    ctx.write(f"disentangle_{args.method}_task{a}_task{b}.csv", grid.to_csv())
    print(f"disentangle ({args.method}) tasks {a},{b}: area(xi<0.05)={grid.area_below(0.05):.4f}")
    return EXIT_OK


def cmd_ntk(ctx: Context, args) -> int:
    train = _check_task(ctx, args.train_task, "--train-task")
    control = ctx.suite.control if args.control_task is None else args.control_task
    control = _check_task(ctx, control, "--control-task")
    if control == train:
        raise ConfigError("--control-task: must differ from --train-task")
    weights = args.weights or ctx.cfg.ntk.weights
    base = ctx.base()
    if weights == "finetuned":
        (tau,) = ctx.taus("nonlinear", [train])
        base = base.with_params(base.params.with_values(base.params.values + tau.values))
    n = ctx.cfg.ntk.points_per_task
    report = spectral_report(base, ctx.suite.split(train, "train").inputs[:n],
                             ctx.suite.split(control, "train").inputs[:n])
    stem = f"ntk_{weights}_train{train}_control{control}"
    ctx.write(f"{stem}.csv", report.to_csv())
    ctx.write(f"{stem}_summary.csv", csv_text(["quantity", "value"], [
        ("mean_train_energy", report.mean_train),
        ("mean_control_energy", report.mean_control),
        ("ratio", report.ratio),
        ("ratio_is_infinite", report.ratio_is_infinite),
    ]))
    print(f"local energy ratio train/control = {report.ratio:.4g}")
    return EXIT_OK


def cmd_verify_spectral(ctx: Context, args) -> int:
    check = verify_basis(args.basis, ctx.seed)
    ctx.write(f"verify_spectral_{args.basis}.csv", check.to_csv())
    verdict = "holds" if check.arithmetic_holds else "fails"
    print(f"{args.basis}: arithmetic {verdict} (max residual {max(check.residuals):.3g}, "
          f"violation {check.violation:.3g}); expected "
          f"{'holds' if check.expected else 'fails'} -> {'OK' if check.ok else 'MISMATCH'}")
    return EXIT_OK if check.ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# manifest


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(ctx: Context, command: str, argv_used: dict) -> Path:
    manifest = {
        "command": command,
        "arguments": argv_used,
        "config_hash": config_hash(ctx.cfg),
        "config": json.loads(canonical_json(ctx.cfg)),
        "seed": ctx.seed,
        "versions": {
            "tta": __version__,
            "checkpoint_format": CHECKPOINT_VERSION,
            "csv_format": CSV_FORMAT_VERSION,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "outputs": dict(sorted(ctx.written.items())),
    }
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    return atomic_write_text(ctx.out / f"manifest_{command}.json", text)


# ---------------------------------------------------------------------------
# argument parsing


def _threads(value) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config (seed is required in it)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", type=Path, help="output directory (default: config output_dir)")
    common.add_argument("--threads", type=_threads,
                        help="worker threads for independent fine-tuning runs (env TTA_THREADS)")
    common.add_argument("--theta0", type=Path, help="explicit θ0 checkpoint to use")

    p = argparse.ArgumentParser(prog="tta", description="Task arithmetic in the tangent space.")
    p.add_argument("--version", action="version", version=f"tta {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", parents=[common], help="compute and store θ0")
    s.add_argument("--init", choices=("pretrained", "random"), default="pretrained")

    s = sub.add_parser("finetune", parents=[common], help="fine-tune one task and store τ")
    s.add_argument("--task", type=int, required=True)
    s.add_argument("--mode", choices=MODES, default="nonlinear")

    for name in ("addition", "negation"):
        s = sub.add_parser(name, parents=[common], help=f"task {name} benchmark")
        s.add_argument("--method", choices=METHODS, default="nonlinear")

    s = sub.add_parser("disentangle", parents=[common], help="ξ over the α grid for a task pair")
    s.add_argument("--tasks", type=int, nargs=2, default=(0, 1), metavar=("A", "B"))
    s.add_argument("--method", choices=METHODS, default="nonlinear")

    s = sub.add_parser("ntk", parents=[common], help="local energy of the NTK eigenfunctions")
    s.add_argument("--train-task", type=int, default=0)
    s.add_argument("--control-task", type=int, default=None)
    s.add_argument("--weights", choices=("finetuned", "pretrained"), default=None)

    s = sub.add_parser("verify-spectral", parents=[common],
                       help="check task arithmetic on a localised or global basis")
    s.add_argument("basis", choices=("bump", "fourier"))
    return p


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "addition": cmd_addition,
    "negation": cmd_negation,
    "disentangle": cmd_disentangle,
    "ntk": cmd_ntk,
    "verify-spectral": cmd_verify_spectral,
}


def _resolve_threads(flag) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("TTA_THREADS")
    if env is None:
        return 1
    try:
        return _threads(env)
    except (ValueError, argparse.ArgumentTypeError):
        raise ConfigError(f"TTA_THREADS: expected a positive integer, got {env!r}") from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else default_config(0)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = args.out if args.out is not None else Path(cfg.output_dir)
        ctx = Context(cfg, out, _resolve_threads(args.threads), args.theta0)
        code = COMMANDS[args.command](ctx, args)
    except ConfigError as exc:
        print(f"tta: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingCheckpoint, FileNotFoundError) as exc:
        print(f"tta: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except CheckpointError as exc:
        print(f"tta: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (ContractError, LayoutError, NumericError) as exc:
        print(f"tta: {exc}", file=sys.stderr)
        return EXIT_FAIL
    used = {k: (str(v) if isinstance(v, Path) else list(v) if isinstance(v, tuple) else v)
            for k, v in sorted(vars(args).items()) if k not in ("config", "out", "threads")}
    write_manifest(ctx, args.command, used)
    return code


if __name__ == "__main__":
    sys.exit(main())
