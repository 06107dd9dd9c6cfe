"""Quality metrics, timing harness, scenario checks and spectrum export."""

from __future__ import annotations

import csv
import json
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, LoopPEError
from .gauge import apply
from .net import Model
from .oracle import solve_exact
from .problem import AgentRecord, Instance, Permutation, build_vpp_constraints, check_feasibility, is_feasible_instance
from .training import Sample

__all__ = [
    "FEAS_TOL",
    "EQUIV_TOL",
    "optimality_gap",
    "relative_deviation",
    "median_time",
    "EvalRow",
    "TimingRow",
    "EvalReport",
    "summarize",
    "summarize_timing",
    "evaluate",
    "bench",
    "ScenarioCheck",
    "ScenarioRecord",
    "scenario_suite",
    "SpectrumExport",
    "export_spectrum",
    "write_report",
    "rows_from_csv",
]

FEAS_TOL = 1e-7
EQUIV_TOL = 1e-9
TIMING_REPEATS = 5


def optimality_gap(u, u_star) -> float:
    """``||u - u*||^2 / ||u*||^2``; falls back to ``||u||^2`` when ``u* = 0``."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    u_star = np.asarray(u_star, dtype=np.float64).reshape(-1)
    if u.shape != u_star.shape:
        raise ContractError(f"decision lengths differ: {u.size} vs {u_star.size}")
    den = math.fsum(u_star * u_star)
    num = math.fsum((u - u_star) ** 2)
    return num if den == 0.0 else num / den


def relative_deviation(a, b) -> float:
    """``max|a - b| / max|b|`` (absolute when ``b`` is all zeros)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = float(np.max(np.abs(a - b))) if a.size else 0.0
    scale = float(np.max(np.abs(b))) if b.size else 0.0
    return diff / scale if scale > 0 else diff


def median_time(fn: Callable[[], object], repeats: int = TIMING_REPEATS) -> float:
    """Median wall time in seconds of ``repeats`` calls, after one warm-up call."""
    fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class EvalRow:
    sample_id: int
    n_active: int
    optimality_gap: float
    feasibility_gap: float
    degenerate: bool  # u* = 0, gap is ||u||^2


@dataclass(frozen=True)
class TimingRow:
    sample_id: int
    n_active: int
    neural_time: float
    oracle_time: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    summary: dict
    timing: list[TimingRow] = field(default_factory=list)
    timing_summary: dict = field(default_factory=dict)


def _stats(values: Sequence[float]) -> dict:
    return {
        "average": math.fsum(values) / len(values),
        "minimum": min(values),
        "maximum": max(values),
    }


def summarize(rows: Sequence[EvalRow]) -> dict:
    """Gap statistics; every field is recomputable from ``rows``."""
    if not rows:
        raise ContractError("cannot summarize an empty report")
    gaps = [r.optimality_gap for r in rows]
    feas = [r.feasibility_gap for r in rows]
    return {
        "n_samples": len(rows),
        "gap_avg": math.fsum(gaps) / len(gaps),
        "gap_min": min(gaps),
        "gap_max": max(gaps),
        "feas_min": min(feas),
        "feas_avg": math.fsum(feas) / len(feas),
        "feas_max": max(feas),
        "n_degenerate": sum(1 for r in rows if r.degenerate),
        "feasible": max(feas) <= FEAS_TOL,
    }


def summarize_timing(rows: Sequence[TimingRow], noop_seconds: float | None = None) -> dict:
    """Average/minimum/maximum per method in milliseconds (oracle timed solve-only)."""
    if not rows:
        raise ContractError("cannot summarize empty timings")
    ms = 1e3
    out = {
        "unit": "ms",
        "repeats": TIMING_REPEATS,
        "oracle_scope": "solve only",
        "neural": _stats([r.neural_time * ms for r in rows]),
        "oracle": _stats([r.oracle_time * ms for r in rows]),
    }
    if noop_seconds is not None:
        neural_median = statistics.median(r.neural_time for r in rows)
        out["noop_median_ms"] = noop_seconds * ms
        out["noop_fraction_of_neural"] = noop_seconds / neural_median
        out["harness_overhead_ok"] = noop_seconds < 0.01 * neural_median
    return out


def _quality_row(model: Model, sample: Sample) -> EvalRow:
    inst = sample.instance
    u = apply(model, inst)
    u_star = np.asarray(sample.label.u_star, dtype=np.float64)
    feas = check_feasibility(build_vpp_constraints(inst), inst, u)
    degenerate = not np.any(u_star)
    return EvalRow(sample.sample_id, inst.n, optimality_gap(u, u_star), feas, bool(degenerate))


def _timing_row(model: Model, sample: Sample) -> TimingRow:
    inst = sample.instance
    neural = median_time(lambda: apply(model, inst))
    oracle = median_time(lambda: solve_exact(inst))
    return TimingRow(sample.sample_id, inst.n, neural, oracle)


def evaluate(model: Model, samples: Sequence[Sample], timing: bool = True, threads: int = 1) -> EvalReport:
    """Gap and feasibility per sample, plus median-of-5 timings when ``timing``.

    Quality rows may be computed on a worker pool; timings always run
    sequentially on the calling thread.
    """
    if not samples:
        raise ContractError("evaluation needs a non-empty sample set")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda s: _quality_row(model, s), samples))
    else:
        rows = [_quality_row(model, s) for s in samples]
    report = EvalReport(rows, summarize(rows))
    if timing:
        report.timing = [_timing_row(model, s) for s in samples]
        noop = median_time(lambda: None)
        report.timing_summary = summarize_timing(report.timing, noop)
    return report


def bench(model: Model, samples: Sequence[Sample], reference_n: int = 20) -> dict:
    """Timing table (average/minimum/maximum for both methods).

    Also reports the median neural time over samples with ``reference_n``
    agents; if none exist, the largest sample is used and its size recorded.
    """
    if not samples:
        raise ContractError("bench needs a non-empty sample set")
    rows = [_timing_row(model, s) for s in samples]
    summary = summarize_timing(rows, median_time(lambda: None))
    ref = [r for r in rows if r.n_active == reference_n]
    if not ref:
        largest = max(r.n_active for r in rows)
        ref = [r for r in rows if r.n_active == largest]
    summary["reference_n"] = ref[0].n_active
    summary["reference_neural_median_ms"] = statistics.median(r.neural_time for r in ref) * 1e3
    summary["n_samples"] = len(rows)
    return summary


# ---------------------------------------------------------------------------
# scenario suite


@dataclass(frozen=True)
class ScenarioCheck:
    name: str
    passed: bool
    detail: str


@dataclass
class ScenarioRecord:
    checks: list[ScenarioCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def tally(self) -> dict[str, tuple[int, int]]:
        """``{check name prefix: (passed, total)}``."""
        out: dict[str, list[int]] = {}
        for c in self.checks:
            key = c.name.split("[")[0]
            entry = out.setdefault(key, [0, 0])
            entry[0] += int(c.passed)
            entry[1] += 1
        return {k: (v[0], v[1]) for k, v in out.items()}


def _feasible_run(model: Model, inst: Instance) -> tuple[bool, str]:
    try:
        u = apply(model, inst)
    except LoopPEError as exc:
        return False, f"{type(exc).__name__}: {exc}"
    viol = check_feasibility(build_vpp_constraints(inst), inst, u)
    ok = u.shape == (inst.n,) and viol <= FEAS_TOL
    return ok, f"n={inst.n} violation={viol:.3g}"


def _fresh_agent(inst: Instance, rng: np.random.Generator) -> AgentRecord:
    taken = {str(a) for a in inst.agent_ids}
    k = 0
    while f"fresh-{k}" in taken:
        k += 1
    p_c = rng.uniform(float(inst.p_c.min()), float(inst.p_c.max()))
    p_d = rng.uniform(float(inst.p_d.min()), float(inst.p_d.max()))
    return AgentRecord(f"fresh-{k}", p_c, p_d)


def scenario_suite(
    model: Model,
    instance: Instance,
    perm: Permutation | None = None,
    rng: np.random.Generator | None = None,
) -> ScenarioRecord:
    """Reorder, drop each agent in turn, and append a fresh agent.

    Failures are recorded in the returned record, never raised.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    perm = Permutation.random(instance.n, rng) if perm is None else perm
    checks = []

    try:
        base = apply(model, instance)
        moved = apply(model, instance.permuted(perm))
        dev = relative_deviation(moved, perm.apply(base))
        checks.append(ScenarioCheck("reorder", dev <= EQUIV_TOL, f"relative deviation {dev:.3g}"))
    except LoopPEError as exc:
        checks.append(ScenarioCheck("reorder", False, f"{type(exc).__name__}: {exc}"))

    if instance.n > 1:
        for i in range(instance.n):
            reduced = instance.without(i)
            name = f"dropout[{instance.agent_ids[i]}]"
            if not is_feasible_instance(reduced):
                checks.append(ScenarioCheck(name, True, "reduced instance has no feasible dispatch; skipped"))
                continue
            ok, detail = _feasible_run(model, reduced)
            checks.append(ScenarioCheck(name, ok, detail))

    grown = instance.with_agent(_fresh_agent(instance, rng))
    ok, detail = _feasible_run(model, grown)
    checks.append(ScenarioCheck("scale-up", ok, detail))
    return ScenarioRecord(checks)


# ---------------------------------------------------------------------------
# spectrum


@dataclass(frozen=True)
class SpectrumExport:
    sample_ids: list[int]
    agent_ids: list[list]
    u_neural: list[np.ndarray]
    u_oracle: list[np.ndarray]

    def n_rows(self) -> int:
        return sum(len(a) for a in self.agent_ids)


def _spectrum(model: Model, samples: Sequence[Sample]) -> SpectrumExport:
    ids, agents, neural, oracle = [], [], [], []
    for s in samples:
        inst = s.instance
        fresh = solve_exact(inst)
        stored = np.asarray(s.label.u_star, dtype=np.float64)
        if not fresh.optimal or fresh.u_star.shape != stored.shape or np.max(np.abs(fresh.u_star - stored)) > 1e-9:
            raise ContractError(f"sample {s.sample_id}: stored label disagrees with the exact solver")
        ids.append(s.sample_id)
        agents.append(list(inst.agent_ids))
        neural.append(apply(model, inst))
        oracle.append(fresh.u_star)
    return SpectrumExport(ids, agents, neural, oracle)


def _plot_spectrum(spec: SpectrumExport, path: Path) -> None:
    import matplotlib
    from matplotlib.figure import Figure

    matplotlib.rcParams["svg.hashsalt"] = "loop-pe"
    width = max(6.0, min(40.0, 0.04 * spec.n_rows()))
    fig = Figure(figsize=(width, 3.5))
    ax = fig.add_subplot(1, 1, 1)
    start = 0
    for k, (un, uo) in enumerate(zip(spec.u_neural, spec.u_oracle)):
        x = np.arange(start, start + len(uo))
        ax.plot(x, uo, color="tab:blue", lw=1.0, label="oracle" if k == 0 else None)
        ax.plot(x, un, color="tab:orange", lw=0.0, marker=".", ms=2.5, label="neural" if k == 0 else None)
        start += len(uo)
        ax.axvline(start - 0.5, color="0.85", lw=0.5)
    ax.set_xlim(-0.5, start - 0.5)
    ax.set_xlabel("agent slot (samples concatenated)")
    ax.set_ylabel("dispatch [kW]")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})


def export_spectrum(model: Model, samples: Sequence[Sample], out_dir: str | Path, stem: str = "spectrum") -> SpectrumExport:
    """Write ``<stem>.csv`` (sample_id, agent_id, u_neural, u_oracle) and ``<stem>.svg``."""
    out_dir = Path(out_dir)
    spec = _spectrum(model, samples)
    with open(out_dir / f"{stem}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "agent_id", "u_neural", "u_oracle"])
        for sid, aids, un, uo in zip(spec.sample_ids, spec.agent_ids, spec.u_neural, spec.u_oracle):
            for a, x, y in zip(aids, un, uo):
                w.writerow([sid, a, repr(float(x)), repr(float(y))])
    _plot_spectrum(spec, out_dir / f"{stem}.svg")
    return spec


# ---------------------------------------------------------------------------
# files


def _dump_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_report(report: EvalReport, out_dir: str | Path) -> None:
    """Quality rows and summary, then timing rows and summary in separate files.

    ``report.csv``/``summary.json`` depend only on model and data; the timing
    files (``timing.csv``/``timing_summary.json``) carry wall-clock values.
    """
    out_dir = Path(out_dir)
    with open(out_dir / "report.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "n_active", "optimality_gap", "feasibility_gap", "degenerate"])
        for r in report.rows:
            w.writerow([r.sample_id, r.n_active, repr(r.optimality_gap), repr(r.feasibility_gap), int(r.degenerate)])
    _dump_json(out_dir / "summary.json", report.summary)
    if report.timing:
        with open(out_dir / "timing.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "n_active", "neural_time", "oracle_time"])
            for r in report.timing:
                w.writerow([r.sample_id, r.n_active, repr(r.neural_time), repr(r.oracle_time)])
        _dump_json(out_dir / "timing_summary.json", report.timing_summary)


def rows_from_csv(path: str | Path) -> list[EvalRow]:
    """Read ``report.csv`` back (used to recompute the summary)."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append(EvalRow(
                int(rec["sample_id"]), int(rec["n_active"]),
                float(rec["optimality_gap"]), float(rec["feasibility_gap"]), rec["degenerate"] == "1",
            ))
    return rows
