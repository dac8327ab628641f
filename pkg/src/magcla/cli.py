"""Command line: ``magcla {train,eval,malfunction,compare,trace,make-trials}``.

Config files are JSON with optional ``"train"`` and ``"env"`` sections whose
keys mirror :class:`~magcla.trainer.TrainConfig` and
:class:`~magcla.env.EnvConfig`. Without ``--config`` training uses the
desk-scale budget (100 epochs x 10 cycles x 10 batches). Verbosity comes from
``MAGCLA_LOG_LEVEL`` (default ``WARNING``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .agents import AlgorithmVariant, Ensemble, checkpoint_meta
from .env import (TESTING_SEED, VALIDATION_SEED, EnvConfig, MalfunctionMask, bundled_trials, load_trials,
                  make_trials, save_trials)
from .evaluation import (compare_reports, eval_report, format_matrix, malfunction_suite,
                         read_report, trace_export, write_report)
from .trainer import TrainConfig, train

log = logging.getLogger("magcla")


class CliError(Exception):
    """Expected failure: reported as one diagnostic line and a nonzero exit."""


def load_config(path: Optional[str]) -> tuple[TrainConfig, EnvConfig]:
    if path is None:
        return TrainConfig.desk(), EnvConfig()
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict) or set(raw) - {"train", "env"}:
        raise CliError(f"config {path}: top level must be an object with 'train' and/or 'env'")
    try:
        train_cfg = TrainConfig.desk(**raw.get("train", {}))
        env_cfg = EnvConfig.from_dict(raw.get("env", {}))
    except (TypeError, ValueError) as exc:
        raise CliError(f"config {path}: {exc}") from exc
    return train_cfg, env_cfg


def prepare_out(out: str, manifest_name: str, force: bool) -> Path:
    path = Path(out)
    manifest = path / manifest_name
    if manifest.exists() and not force:
        try:
            done = json.loads(manifest.read_text()).get("completed", False)
        except (OSError, json.JSONDecodeError):
            done = False
        if done:
            raise CliError(f"{path} already holds a completed run; pass --force to overwrite")
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise CliError(f"output directory {path} is not writable")
    return path


def write_manifest(path: Path, name: str, command: str, args: argparse.Namespace, **extra) -> None:
    payload = {"artifact": "magcla", "version": __version__, "command": command,
               "args": {k: v for k, v in vars(args).items() if k != "func"}, "completed": True, **extra}
    (path / name).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))


def load_checkpoint(path: Optional[str]) -> tuple[Ensemble, dict]:
    if path is None:
        raise CliError("--checkpoint is required")
    if not Path(path).is_file():
        raise CliError(f"checkpoint {path} not found")
    try:
        return Ensemble.load(path), checkpoint_meta(path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}") from exc


def env_for(args, meta: dict) -> EnvConfig:
    if args.config is not None:
        return load_config(args.config)[1]
    if "env_config" in meta:
        return EnvConfig.from_dict(meta["env_config"])
    return EnvConfig()


def trials_for(args, default: str):
    if args.trials is None:
        return bundled_trials(default), f"bundled:{default}"
    try:
        return load_trials(args.trials), args.trials
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read trials {args.trials}: {exc}") from exc


def cmd_train(args) -> int:
    cfg, env_cfg = load_config(args.config)
    if args.variant is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "variant": AlgorithmVariant.parse(args.variant).label})
    if args.seeds:
        return train_many(args, [int(s) for s in args.seeds.split(",") if s.strip()])
    if args.seed is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    out = prepare_out(args.out, "manifest.json", args.force)
    trials = None
    if args.trials is not None:
        trials, _ = trials_for(args, "validation")
    result = train(cfg, env_cfg, out, trials)
    last = result.log.rows[-1]
    print(f"{cfg.variant} seed {cfg.seed}: final validation success {last.success_rate:.2f} "
          f"(epoch {last.epoch}); outputs in {out}")
    return 0


def train_many(args, seeds: list[int]) -> int:
    procs = []
    for seed in seeds:
        cmd = [sys.executable, "-m", "magcla", "train", "--seed", str(seed),
               "--out", str(Path(args.out) / f"seed_{seed}")]
        for flag in ("config", "variant", "trials"):
            if getattr(args, flag) is not None:
                cmd += [f"--{flag}", str(getattr(args, flag))]
        if args.force:
            cmd.append("--force")
        procs.append(subprocess.Popen(cmd))
    codes = [p.wait() for p in procs]
    failed = [s for s, c in zip(seeds, codes) if c != 0]
    if failed:
        raise CliError(f"training failed for seeds {failed}")
    return 0


def cmd_eval(args) -> int:
    ensemble, meta = load_checkpoint(args.checkpoint)
    env_cfg = env_for(args, meta)
    trials, source = trials_for(args, "testing")
    out = prepare_out(args.out, "eval_manifest.json", args.force)
    report = eval_report(ensemble, env_cfg, trials, checkpoint=str(args.checkpoint), trial_set=source)
    write_report(report, out / "eval_report.json")
    write_manifest(out, "eval_manifest.json", "eval", args)
    print(f"success rate {report['success_rate']:.2f} ({report['successes']}/{report['n']})")
    return 0


def cmd_malfunction(args) -> int:
    ensemble, meta = load_checkpoint(args.checkpoint)
    env_cfg = env_for(args, meta)
    trials, _ = trials_for(args, "testing")
    out = prepare_out(args.out, "malfunction_manifest.json", args.force)
    report = malfunction_suite(ensemble, env_cfg, trials, ensemble.variant.label)
    d = report.to_dict()
    d["checkpoint"] = str(args.checkpoint)
    write_report(d, out / "malfunction_report.json")
    with open(out / "malfunction_report.csv", "w") as fh:
        fh.write("test,sr,rd\n")
        for row in report.table_rows()[:-1]:
            fh.write(",".join(row) + "\n")
    write_manifest(out, "malfunction_manifest.json", "malfunction", args)
    for row in report.table_rows():
        print("  ".join(c.ljust(18) for c in row))
    return 0


def cmd_compare(args) -> int:
    if len(args.reports) < 2:
        raise CliError("compare needs at least two reports")
    reports = {}
    for path in args.reports:
        try:
            rep = read_report(path)
        except (OSError, ValueError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read report {path}: {exc}") from exc
        name = rep.get("variant") or Path(path).stem
        while name in reports:
            name += "'"
        reports[name] = rep
    result = compare_reports(reports)
    for key, matrix in result.items():
        print(f"{key} (two-tailed p, N-1 chi-squared)")
        print(format_matrix(matrix))
    if args.out is not None:
        out = prepare_out(args.out, "compare_manifest.json", args.force)
        (out / "compare.json").write_text(json.dumps(result, indent=2))
        write_manifest(out, "compare_manifest.json", "compare", args)
    return 0


def cmd_trace(args) -> int:
    ensemble, meta = load_checkpoint(args.checkpoint)
    env_cfg = env_for(args, meta)
    trials, _ = trials_for(args, "testing")
    if not 0 <= args.trial_index < len(trials):
        raise CliError(f"--trial-index {args.trial_index} outside 0..{len(trials) - 1}")
    n_parts = len(env_cfg.agent_slices())
    if args.disable is not None and not 0 <= args.disable < n_parts:
        raise CliError(f"--disable {args.disable} outside 0..{n_parts - 1}")
    out = prepare_out(args.out, "trace_manifest.json", args.force)
    mask = MalfunctionMask(args.disable)
    stem = "trace"
    trace_export(ensemble, env_cfg, trials[args.trial_index], mask, out / f"{stem}.csv", out / f"{stem}.svg")
    write_manifest(out, "trace_manifest.json", "trace", args)
    print(f"wrote {out / (stem + '.csv')}")
    return 0


def cmd_make_trials(args) -> int:
    out = prepare_out(args.out, "trials_manifest.json", args.force)
    # no seed reproduces the bundled sets; a seed derives both sets from it
    if args.seed is None:
        val_seed, test_seed = VALIDATION_SEED, TESTING_SEED
    else:
        val_seed, test_seed = (int(s) for s in np.random.SeedSequence(args.seed).generate_state(2))
    save_trials(make_trials(val_seed, args.n_validation), out / "validation_trials.csv")
    save_trials(make_trials(test_seed, args.n_testing), out / "testing_trials.csv")
    write_manifest(out, "trials_manifest.json", "make-trials", args)
    print(f"wrote {args.n_validation} validation and {args.n_testing} testing trials to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="magcla", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"magcla {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", default=".", help="output directory (created if absent)")
        p.add_argument("--trials", help="trial-set file (seed,goal per line)")
        p.add_argument("--force", action="store_true", help="overwrite a completed run")
        if checkpoint:
            p.add_argument("--checkpoint", help="ensemble checkpoint JSON")

    p = sub.add_parser("train", help="train one ensemble")
    common(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", help="comma-separated seeds, each trained in its own process")
    p.add_argument("--variant", help="{magcla,maddpg,ddpg}+{her,sher}")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="success rate on a trial set (default: bundled testing set)")
    common(p, checkpoint=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("malfunction", help="baseline plus one disabled-part test per agent")
    common(p, checkpoint=True)
    p.set_defaults(func=cmd_malfunction)

    p = sub.add_parser("compare", help="pairwise significance between reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("trace", help="export one trial's rollout as CSV and SVG")
    common(p, checkpoint=True)
    p.add_argument("--trial-index", type=int, default=0)
    p.add_argument("--disable", type=int, metavar="AGENT_ID")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("make-trials", help="generate validation (50) and testing (100) trial sets")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=".")
    p.add_argument("--force", action="store_true")
    p.add_argument("--n-validation", type=int, default=50)
    p.add_argument("--n-testing", type=int, default=100)
    p.set_defaults(func=cmd_make_trials)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("MAGCLA_LOG_LEVEL", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"magcla: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"magcla: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
