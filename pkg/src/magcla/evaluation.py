"""Test-set success, single-part malfunction tests, significance tests and rollout traces."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .agents import Ensemble
from .env import EnvConfig, MalfunctionMask, Trial, apply_malfunction, compute_reward, make_env
from .plotting import line_chart_svg
from .trainer import evaluate_trials

FIVE_FINGER_NAMES = ("thumb", "index", "middle", "ring", "little")


def part_names(env_config: EnvConfig) -> list[str]:
    slices = env_config.agent_slices()
    n_fingers = sum(1 for s in slices if s[2] == "finger")
    names = []
    for i, (_, _, role) in enumerate(slices):
        if role == "wrist":
            names.append("wrist")
        elif n_fingers == 5:
            names.append(FIVE_FINGER_NAMES[i])
        else:
            names.append(f"finger_{i}")
    return names


def success_rate(ensemble: Ensemble, env_config: EnvConfig, trials: Sequence[Trial],
                 mask: Optional[MalfunctionMask] = None) -> float:
    return evaluate_trials(ensemble, env_config, trials, mask).success_rate


def performance_reduction(sr0: float, sr: float) -> Optional[float]:
    """Relative drop ``(sr0 - sr) / sr0`` clamped at 0; ``None`` when ``sr0`` is 0."""
    if sr0 <= 0:
        return None
    return max(0.0, (sr0 - sr) / sr0)


def average_reduction(reductions: Sequence[Optional[float]]) -> Optional[float]:
    vals = [r for r in reductions if r is not None]
    if not vals or len(vals) != len(reductions):
        return None
    return float(np.mean(vals))


@dataclass
class MalfunctionRow:
    agent_id: Optional[int]
    name: str
    successes: int
    n: int
    sr: float
    rd: Optional[float]


@dataclass
class MalfunctionReport:
    baseline: MalfunctionRow
    rows: list[MalfunctionRow]
    average_rd: Optional[float]
    variant: str = ""

    @property
    def sr0(self) -> float:
        return self.baseline.sr

    def to_dict(self) -> dict:
        return {"kind": "malfunction", "variant": self.variant, "n": self.baseline.n,
                "successes": self.baseline.successes, "success_rate": self.baseline.sr,
                "baseline": asdict(self.baseline), "rows": [asdict(r) for r in self.rows],
                "average_rd": self.average_rd}

    @classmethod
    def from_dict(cls, d: dict) -> "MalfunctionReport":
        return cls(MalfunctionRow(**d["baseline"]), [MalfunctionRow(**r) for r in d["rows"]],
                   d["average_rd"], d.get("variant", ""))

    def table_rows(self) -> list[list[str]]:
        fmt = lambda v: "n/a" if v is None else f"{v:.2f}"
        out = [["baseline", f"{self.baseline.sr:.2f}", ""]]
        out += [[f"no {r.name}", f"{r.sr:.2f}", fmt(r.rd)] for r in self.rows]
        out.append(["average (fingers)", "", fmt(self.average_rd)])
        return out


def reductions_from_rates(sr0: float, finger_rates: Sequence[float]) -> tuple[list[Optional[float]], Optional[float]]:
    """Per-finger reductions and their mean, the arithmetic behind a malfunction table row."""
    rds = [performance_reduction(sr0, sr) for sr in finger_rates]
    return rds, average_reduction(rds)


def malfunction_suite(ensemble: Ensemble, env_config: EnvConfig, trials: Sequence[Trial],
                      variant: str = "") -> MalfunctionReport:
    """Baseline plus one test per hand part with that part pinned open/neutral.

    The wrist is reported but left out of the average reduction.
    """
    n = len(trials)
    base = evaluate_trials(ensemble, env_config, trials)
    base_succ = int(base.successes.sum())
    baseline = MalfunctionRow(None, "baseline", base_succ, n, base.success_rate, None)
    rows = []
    finger_rds = []
    for aid, (name, (_, _, role)) in enumerate(zip(part_names(env_config), env_config.agent_slices())):
        out = evaluate_trials(ensemble, env_config, trials, MalfunctionMask(aid))
        rd = performance_reduction(baseline.sr, out.success_rate)
        rows.append(MalfunctionRow(aid, name, int(out.successes.sum()), n, out.success_rate, rd))
        if role != "wrist":
            finger_rds.append(rd)
    return MalfunctionReport(baseline, rows, average_reduction(finger_rds), variant)


@dataclass
class SignificanceResult:
    chi2_n1: float
    p_two_tailed: float


def n1_chi2_two_tailed(successes1: int, n1: int, successes2: int, n2: int) -> SignificanceResult:
    """N-1 chi-squared test of two proportions, two-tailed.

    chi2 = (N - 1) (ad - bc)^2 / ((a+b)(c+d)(a+c)(b+d)), i.e. Pearson's
    statistic times (N-1)/N; p = 2 (1 - Phi(sqrt(chi2))) = erfc(sqrt(chi2 / 2)).
    """
    if n1 < 1 or n2 < 1:
        raise ValueError("group sizes must be >= 1")
    if not (0 <= successes1 <= n1 and 0 <= successes2 <= n2):
        raise ValueError("successes must lie in [0, n]")
    a, b = float(successes1), float(n1 - successes1)
    c, d = float(successes2), float(n2 - successes2)
    total = a + b + c + d
    denom = (a + b) * (c + d) * (a + c) * (b + d)
    if denom == 0.0:
        return SignificanceResult(0.0, 1.0)
    chi2 = (total - 1.0) * (a * d - b * c) ** 2 / denom
    return SignificanceResult(chi2, math.erfc(math.sqrt(chi2 / 2.0)))


def adaptability_counts(report: MalfunctionReport) -> tuple[int, int]:
    """Average finger reduction expressed as a count out of the trial count."""
    if report.average_rd is None:
        raise ValueError("report has no average reduction")
    n = report.baseline.n
    return int(round(report.average_rd * n)), n


def significance_matrix(counts: Mapping[str, tuple[int, int]]) -> dict[str, dict[str, Optional[float]]]:
    """Pairwise two-tailed p-values; the diagonal is ``None``."""
    names = list(counts)
    out: dict[str, dict[str, Optional[float]]] = {}
    for a in names:
        out[a] = {}
        for b in names:
            if a == b:
                out[a][b] = None
            else:
                out[a][b] = n1_chi2_two_tailed(*counts[a], *counts[b]).p_two_tailed
    return out


def format_matrix(matrix: Mapping[str, Mapping[str, Optional[float]]]) -> str:
    names = list(matrix)
    width = max(12, max(len(n) for n in names) + 2)
    lines = ["".ljust(width) + "".join(n.ljust(width) for n in names)]
    for a in names:
        cells = ["-".ljust(width) if matrix[a][b] is None else f"{matrix[a][b]:.1e}".ljust(width)
                 for b in names]
        lines.append(a.ljust(width) + "".join(cells))
    return "\n".join(lines)


# -- report files --

def eval_report(ensemble: Ensemble, env_config: EnvConfig, trials: Sequence[Trial], **meta) -> dict:
    out = evaluate_trials(ensemble, env_config, trials)
    return {"kind": "eval", "variant": ensemble.variant.label, "n": len(trials),
            "successes": int(out.successes.sum()), "success_rate": out.success_rate, **meta}


def write_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)


def read_report(path) -> dict:
    with open(path) as fh:
        d = json.load(fh)
    if d.get("kind") not in ("eval", "malfunction"):
        raise ValueError(f"{path}: not an eval or malfunction report")
    return d


def compare_reports(reports: Mapping[str, dict]) -> dict:
    """Significance matrices for generalizability and, if possible, adaptability."""
    gen = significance_matrix({k: (int(r["successes"]), int(r["n"])) for k, r in reports.items()})
    result = {"generalizability": gen}
    if all(r["kind"] == "malfunction" and r.get("average_rd") is not None for r in reports.values()):
        counts = {k: adaptability_counts(MalfunctionReport.from_dict(r)) for k, r in reports.items()}
        result["adaptability"] = significance_matrix(counts)
    return result


# -- traces --

def trace_columns(env_config: EnvConfig) -> list[str]:
    cols = ["step", "theta", "omega", "goal"]
    if env_config.kind == "rotation":
        cols += [f"grip_{i + 1}" for i in range(env_config.n_fingers)]
        if env_config.has_wrist:
            cols.append("wrist")
    cols.append("reward")
    cols += [f"act_{j}" for j in range(env_config.action_dim)]
    return cols


def trace_export(ensemble: Ensemble, env_config: EnvConfig, trial: Trial,
                 mask: Optional[MalfunctionMask], out_path, svg_path=None) -> list[list]:
    """Write one noise-free rollout as CSV, one row per step including the reset row.

    ``act_*`` columns hold the joint action that produced the row's state
    (zeros on the reset row); ``reward`` is ``compute_reward(theta, goal)``.
    """
    env = make_env(env_config)
    obs = env.reset(trial)
    records = []

    def record(step: int, reward: float) -> None:
        s = env.state
        row = [step, s.theta, s.omega, env.goal]
        if env_config.kind == "rotation":
            row += list(map(float, s.grip_positions))
            if env_config.has_wrist:
                row.append(s.wrist_tilt)
        row.append(reward)
        row += list(map(float, obs.prev_actions))
        records.append(row)

    record(0, compute_reward(env.state.theta, env.goal, env_config.success_threshold))
    step = 0
    while True:
        a = apply_malfunction(ensemble.act(obs.x, obs.desired_goal, obs.prev_actions), mask, env_config)
        obs, reward, terminal, _ = env.step(a)
        step += 1
        record(step, reward)
        if terminal:
            break
    try:
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(trace_columns(env_config))
            for row in records:
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    except OSError as exc:
        raise OSError(f"cannot write trace to {out_path}: {exc}") from exc
    if svg_path is not None:
        steps = [r[0] for r in records]
        line_chart_svg({"theta": (steps, [r[1] for r in records]), "goal": (steps, [r[3] for r in records])},
                       svg_path, title="object angle", xlabel="step", ylabel="rad",
                       y_range=(-math.pi, math.pi))
    return records


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in rec.items()} for rec in csv.DictReader(fh)]
