"""
Evaluation metrics over trajectories.

Per-task accuracy, dimension averages and the overall average, plus the
sim-vs-real alignment block: decision overlap, interval IoU between paired
runs, and tool latency. Values stay at full precision; rounding (half-up)
only happens when a report is formatted.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

import artifacts
import task_profiles
from action_protocol import ABSTAIN, AnswerShapeError, canonicalize_answer
from reward_model import FreeFormJudge, correctness, interval_iou, judge_free_form
from script_model import FreeText, GoldAnswer, Interval, gold_from_document
from workers.episode_engine import read_trajectory_log

logger = logging.getLogger("CVR.Eval")

DIMENSION_ORDER = ("C", "T", "M", "F")
WEIGHTINGS = ("unweighted", "instance")


@dataclass(frozen=True)
class ResultRecord:
    task_tag: str
    gold: GoldAnswer
    predicted: Any
    detail: Optional[float] = None


@dataclass(frozen=True)
class TaskResult:
    task_tag: str
    n: int
    accuracy: float
    mean_iou: Optional[float] = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"{self.task_tag}: n must be >= 1")
        if not 0.0 <= self.accuracy <= 100.0:
            raise ValueError(f"{self.task_tag}: accuracy {self.accuracy} outside [0, 100]")


@dataclass(frozen=True)
class AlignmentBlock:
    n_pairs: int
    decision_overlap_pct: Optional[float]
    mean_sim_real_iou: Optional[float]
    sim_latency_s: Optional[float]
    real_latency_s: Optional[float]
    speedup: Optional[float]
    unpaired_sim: Tuple[str, ...] = ()
    unpaired_real: Tuple[str, ...] = ()


@dataclass
class EvalReport:
    tasks: Dict[str, TaskResult]
    dimensions: Dict[str, float]
    overall: float
    weighting: str = "unweighted"
    alignment: Optional[AlignmentBlock] = None
    skipped: Dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class LatencyReport:
    mean_sim: float
    mean_real: float
    speedup: float


# --- AGGREGATION ---

def report_from_task_results(
    task_results: Sequence[TaskResult],
    dimension_map: Optional[Mapping[str, str]] = None,
    weighting: str = "unweighted",
) -> EvalReport:
    """Dimension and overall averages over the tasks that are present."""
    if weighting not in WEIGHTINGS:
        raise ValueError(f"weighting must be one of {WEIGHTINGS}")
    if not task_results:
        raise ValueError("No task results to aggregate")
    dimension_map = dimension_map or task_profiles.DEFAULT_DIMENSION_MAP
    tasks = {t.task_tag: t for t in task_results}
    unmapped = sorted(tag for tag in tasks if tag not in dimension_map)
    if unmapped:
        raise ValueError(f"Task tags without a dimension: {unmapped}")

    def _avg(results: List[TaskResult]) -> float:
        if weighting == "instance":
            return sum(t.accuracy * t.n for t in results) / sum(t.n for t in results)
        return sum(t.accuracy for t in results) / len(results)

    by_dim: Dict[str, List[TaskResult]] = {}
    for tag, result in tasks.items():
        by_dim.setdefault(dimension_map[tag], []).append(result)
    ordered = sorted(by_dim, key=lambda d: (DIMENSION_ORDER.index(d) if d in DIMENSION_ORDER else len(DIMENSION_ORDER), d))
    dimensions = {dim: _avg(by_dim[dim]) for dim in ordered}
    return EvalReport(tasks=tasks, dimensions=dimensions, overall=_avg(list(tasks.values())), weighting=weighting)


def aggregate(
    results: Sequence[ResultRecord],
    dimension_map: Optional[Mapping[str, str]] = None,
    *,
    weighting: str = "unweighted",
    iou_threshold: float = 0.5,
    judge: Optional[FreeFormJudge] = None,
) -> EvalReport:
    """
    Scores each (gold, predicted) pair and aggregates per task. Free-form
    golds are scored by `judge`; without one they are skipped and counted
    in `report.skipped`.
    """
    if not results:
        raise ValueError("No results to aggregate")
    dimension_map = dimension_map or task_profiles.DEFAULT_DIMENSION_MAP
    scores: Dict[str, List[float]] = {}
    ious: Dict[str, List[float]] = {}
    skipped: Dict[str, int] = {}
    for rec in results:
        tag = rec.task_tag.upper()
        if tag not in dimension_map:
            raise ValueError(f"Task tag {rec.task_tag!r} has no dimension")
        if isinstance(rec.gold, FreeText):
            if judge is None:
                skipped[tag] = skipped.get(tag, 0) + 1
                continue
            scores.setdefault(tag, []).append(judge_free_form(judge, rec.gold, rec.predicted))
            continue
        score, detail = correctness(rec.gold, rec.predicted, iou_threshold)
        scores.setdefault(tag, []).append(score)
        if isinstance(rec.gold, Interval):
            ious.setdefault(tag, []).append(detail if detail is not None else (rec.detail or 0.0))
    if skipped:
        logger.warning("⚠️ Skipped free-form results without a judge: %s", skipped)
    if not scores:
        raise ValueError("Every result was skipped; nothing to aggregate")

    task_results = [
        TaskResult(
            task_tag=tag,
            n=len(values),
            accuracy=100.0 * sum(values) / len(values),
            mean_iou=float(np.mean(ious[tag])) if tag in ious else None,
        )
        for tag, values in scores.items()
    ]
    report = report_from_task_results(task_results, dimension_map, weighting)
    report.skipped = skipped
    return report


# --- ALIGNMENT ---

def decision_overlap_rate(paired: Sequence[Tuple[Any, Any]]) -> float:
    if not paired:
        raise ValueError("decision_overlap_rate needs at least one pair")
    same = sum(1 for sim, real in paired if sim == real)
    return 100.0 * same / len(paired)


def sim_real_interval_alignment(paired: Sequence[Tuple[Interval, Interval]]) -> float:
    if not paired:
        raise ValueError("sim_real_interval_alignment needs at least one pair")
    return 100.0 * float(np.mean([interval_iou(sim, real) for sim, real in paired]))


def latency_report(sim_timings: Sequence[float], real_timings: Sequence[float]) -> LatencyReport:
    if not sim_timings or not real_timings:
        raise ValueError("latency_report needs timings from both runs")
    mean_sim = float(np.mean(sim_timings))
    mean_real = float(np.mean(real_timings))
    if mean_sim <= 0:
        raise ValueError("Mean simulator latency must be positive")
    return LatencyReport(mean_sim, mean_real, mean_real / mean_sim)


# --- LOGS ---

@dataclass(frozen=True)
class EpisodeRecord:
    script_id: str
    task_tag: Optional[str]
    task_type: str
    gold: Optional[GoldAnswer]
    predicted: Any
    error: Optional[str] = None
    tool_timings: Tuple[float, ...] = ()


def _predicted_from_wire(value: Any, task_type: str, script_id: str) -> Any:
    if value is None:
        return None
    if value == "ABSTAIN":
        return ABSTAIN
    try:
        return canonicalize_answer(value, task_type)
    except AnswerShapeError as exc:
        logger.warning("⚠️ %s: logged answer %r is not a %s answer (%s)", script_id, value, task_type, exc)
        return ABSTAIN


def _records_from_file(path: Path) -> List[EpisodeRecord]:
    records = []
    for ep in read_trajectory_log(path):
        task_type = ep.get("task_type") or "single_choice"
        sid = ep.get("script_id") or ""
        records.append(EpisodeRecord(
            script_id=sid,
            task_tag=ep.get("task_tag"),
            task_type=task_type,
            gold=gold_from_document(ep["gold"]) if ep.get("gold") else None,
            predicted=_predicted_from_wire(ep.get("final_answer"), task_type, sid),
            error=ep.get("error"),
            tool_timings=tuple(ep.get("tool_timings") or ()),
        ))
    return records


def records_from_logs(path: Path, max_workers: int = 4) -> List[EpisodeRecord]:
    """Episode summaries from one JSONL file or every .jsonl under a directory."""
    files = artifacts.list_files(Path(path), (".jsonl",))
    if not files:
        raise ValueError(f"No trajectory logs under {path}")
    with ThreadPoolExecutor(max_workers=max(1, min(max_workers, len(files)))) as executor:
        per_file = list(executor.map(_records_from_file, files))
    return [r for chunk in per_file for r in chunk]


def results_from_records(records: Sequence[EpisodeRecord]) -> List[ResultRecord]:
    """Scorable results; episodes without gold or task tag are left out."""
    out = []
    for rec in records:
        if rec.gold is None or not rec.task_tag:
            logger.warning("⚠️ %s has no gold or task tag; not scored", rec.script_id)
            continue
        out.append(ResultRecord(rec.task_tag, rec.gold, rec.predicted))
    return out


@dataclass(frozen=True)
class PairedRuns:
    pairs: Tuple[Tuple[EpisodeRecord, EpisodeRecord], ...]
    unpaired_sim: Tuple[str, ...]
    unpaired_real: Tuple[str, ...]


def _first_by_id(records: Sequence[EpisodeRecord], label: str) -> Dict[str, EpisodeRecord]:
    by_id: Dict[str, EpisodeRecord] = {}
    for rec in records:
        if rec.script_id in by_id:
            logger.warning("⚠️ Duplicate %s episode for %s; keeping the first", label, rec.script_id)
            continue
        by_id[rec.script_id] = rec
    return by_id


def pair_runs(sim_records: Sequence[EpisodeRecord], real_records: Sequence[EpisodeRecord]) -> PairedRuns:
    sim = _first_by_id(sim_records, "sim")
    real = _first_by_id(real_records, "real")
    shared = sorted(set(sim) & set(real))
    return PairedRuns(
        pairs=tuple((sim[sid], real[sid]) for sid in shared),
        unpaired_sim=tuple(sorted(set(sim) - set(real))),
        unpaired_real=tuple(sorted(set(real) - set(sim))),
    )


def alignment_block(paired: PairedRuns) -> AlignmentBlock:
    """Overlap over discrete answers, IoU over interval answers, latency over tool calls."""
    discrete, intervals = [], []
    for sim, real in paired.pairs:
        if sim.error or real.error:
            continue
        if sim.task_type == "interval":
            if isinstance(sim.predicted, Interval) and isinstance(real.predicted, Interval):
                intervals.append((sim.predicted, real.predicted))
            else:
                intervals.append(None)
        elif sim.task_type != "free_form":
            discrete.append((sim.predicted, real.predicted))
    iou = None
    if intervals:
        # a missing interval on either side scores 0
        ious = [interval_iou(*pair) if pair is not None else 0.0 for pair in intervals]
        iou = 100.0 * float(np.mean(ious))
    sim_t = [t for sim, _ in paired.pairs for t in sim.tool_timings]
    real_t = [t for _, real in paired.pairs for t in real.tool_timings]
    latency = latency_report(sim_t, real_t) if sim_t and real_t and np.mean(sim_t) > 0 else None
    if paired.unpaired_sim or paired.unpaired_real:
        logger.warning(
            "⚠️ Unpaired scripts: %d sim-only, %d real-only", len(paired.unpaired_sim), len(paired.unpaired_real),
        )
    return AlignmentBlock(
        n_pairs=len(paired.pairs),
        decision_overlap_pct=decision_overlap_rate(discrete) if discrete else None,
        mean_sim_real_iou=iou,
        sim_latency_s=latency.mean_sim if latency else None,
        real_latency_s=latency.mean_real if latency else None,
        speedup=latency.speedup if latency else None,
        unpaired_sim=paired.unpaired_sim,
        unpaired_real=paired.unpaired_real,
    )


# --- PRESENTATION ---

def present(value: Optional[float], places: int = 2) -> str:
    """Half-up rounding for display; the stored value is untouched."""
    if value is None:
        return "-"
    quantum = Decimal(1).scaleb(-places)
    return str(Decimal(f"{value:.9f}").quantize(quantum, rounding=ROUND_HALF_UP))


def format_report_table(report: EvalReport) -> str:
    lines = [f"{'Task':<8}{'N':>8}{'Acc':>10}{'IoU':>10}"]
    for tag in sorted(report.tasks):
        t = report.tasks[tag]
        lines.append(f"{tag:<8}{t.n:>8}{present(t.accuracy):>10}{present(t.mean_iou):>10}")
    lines.append("")
    for dim, value in report.dimensions.items():
        lines.append(f"{dim + '.Avg':<16}{present(value):>10}")
    lines.append(f"{'O.Avg':<16}{present(report.overall):>10}")
    if report.weighting != "unweighted":
        lines.append(f"({report.weighting}-weighted averages)")
    for tag, count in sorted(report.skipped.items()):
        lines.append(f"{tag}: {count} free-form results not scored (no judge)")
    if report.alignment is not None:
        lines.append("")
        lines.extend(format_alignment(report.alignment))
    return "\n".join(lines)


def format_alignment(block: AlignmentBlock) -> List[str]:
    lines = [
        f"Pairs: {block.n_pairs}",
        f"Decision Overlap Rate: {present(block.decision_overlap_pct, 1)}",
        f"Sim-to-Real IoU: {present(block.mean_sim_real_iou, 1)}",
        f"Sim Lat. (s): {present(block.sim_latency_s, 1)}",
        f"Real Lat. (s): {present(block.real_latency_s, 1)}",
        f"Speedup: {present(block.speedup, 2)}",
    ]
    if block.unpaired_sim or block.unpaired_real:
        lines.append(f"Unpaired: sim-only {list(block.unpaired_sim)}, real-only {list(block.unpaired_real)}")
    return lines


def report_to_dict(report: EvalReport) -> dict:
    payload = {
        "weighting": report.weighting,
        "tasks": {tag: asdict(t) for tag, t in sorted(report.tasks.items())},
        "dimensions": {f"{dim}.Avg": value for dim, value in report.dimensions.items()},
        "overall": report.overall,
        "skipped": dict(report.skipped),
    }
    if report.alignment is not None:
        payload["alignment"] = asdict(report.alignment)
    return payload
