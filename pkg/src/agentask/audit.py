"""Trace analytics: fault taxonomy, one-shot resolution, and overhead against a never-ask baseline."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .core import ASK_TYPES, AgentAskError, ErrorType, Trajectory, count_tokens


class ConfigMismatchError(AgentAskError):
    pass


@dataclass(frozen=True)
class TaxonomyReport:
    fractions: dict[ErrorType, float]
    counts: dict[ErrorType, int]
    labeled_edges: int
    unlabeled: int

    @property
    def faulted_edges(self) -> int:
        return sum(self.counts.values())


def annotate_distribution(traces: Iterable[Trajectory]) -> TaxonomyReport:
    """Share of each fault type among faulted, labelled edges.

    Edges without a gold label are counted in ``unlabeled`` and never guessed.
    """
    counts = {t: 0 for t in ASK_TYPES}
    labeled = unlabeled = 0
    for traj in traces:
        for rec in traj.records:
            if rec.gold_type is None:
                unlabeled += 1
                continue
            labeled += 1
            if rec.gold_type is not ErrorType.NONE:
                counts[rec.gold_type] += 1
    total = sum(counts.values())
    fractions = {t: c / total for t, c in counts.items() if c} if total else {}
    return TaxonomyReport(fractions, {t: c for t, c in counts.items() if c}, labeled, unlabeled)


@dataclass(frozen=True)
class ResolutionReport:
    rates: dict[ErrorType, float]
    asks: dict[ErrorType, int]
    absent: tuple[ErrorType, ...]

    def get(self, etype: ErrorType) -> Optional[float]:
        return self.rates.get(etype)


def one_shot_resolution(traces: Iterable[Trajectory]) -> ResolutionReport:
    """Per fault type, the fraction of asks on faulted edges that cleared the fault.

    One ask per edge is possible, so the first ask is the only ask. Types with
    no such asks are listed in ``absent`` and carry no rate.
    """
    asks = {t: 0 for t in ASK_TYPES}
    fixed = {t: 0 for t in ASK_TYPES}
    for traj in traces:
        for rec in traj.records:
            if rec.action.gate == 1 and rec.gold_type not in (None, ErrorType.NONE):
                asks[rec.gold_type] += 1
                fixed[rec.gold_type] += int(rec.residual_flag == 0)
    rates = {t: fixed[t] / asks[t] for t in ASK_TYPES if asks[t]}
    absent = tuple(t for t in ASK_TYPES if not asks[t])
    return ResolutionReport(rates, {t: n for t, n in asks.items() if n}, absent)


@dataclass(frozen=True)
class OverheadMetrics:
    accuracy: float
    latency_pct: float
    extra_cost_pct: float
    asks_per_episode: float
    episodes: int
    config_hash: str = ""

    def as_row(self) -> dict:
        return {"accuracy": self.accuracy, "latency_pct": self.latency_pct, "extra_cost_pct": self.extra_cost_pct,
                "asks_per_episode": self.asks_per_episode}


def trajectory_latency(traj: Trajectory) -> int:
    return sum(r.latency_units for r in traj.records)


def clarification_tokens(traj: Trajectory) -> int:
    return sum(r.cost_tokens for r in traj.records)


def total_tokens(traj: Trajectory) -> int:
    """Handoff message tokens plus any question and reply tokens."""
    return sum(count_tokens(r.state.message) for r in traj.records) + clarification_tokens(traj)


def _common_hash(traces: Sequence[Trajectory], what: str) -> str:
    hashes = {t.config_hash for t in traces}
    if len(hashes) > 1:
        raise ConfigMismatchError(f"{what} mix environment configs: {sorted(hashes)}")
    return hashes.pop() if hashes else ""


def overhead_metrics(traces: Sequence[Trajectory], baseline: Sequence[Trajectory]) -> OverheadMetrics:
    traces, baseline = list(traces), list(baseline)
    if not traces or not baseline:
        raise AgentAskError("overhead metrics need non-empty traces and baseline")
    h = _common_hash(traces, "traces")
    hb = _common_hash(baseline, "baseline traces")
    if h != hb:
        raise ConfigMismatchError(f"traces were recorded under config {h}, baseline under {hb}")
    n, nb = len(traces), len(baseline)
    acc = sum(t.terminal_score for t in traces) / n
    lat = sum(trajectory_latency(t) for t in traces) / n
    lat_b = sum(trajectory_latency(t) for t in baseline) / nb
    extra = sum(clarification_tokens(t) for t in traces) / n
    tok_b = sum(total_tokens(t) for t in baseline) / nb
    asks = sum(r.action.gate for t in traces for r in t.records) / n
    return OverheadMetrics(acc, 100.0 * lat / lat_b, 100.0 * extra / tok_b, asks, n, h)


# ---------------------------------------------------------------------------
# reports


@dataclass
class AuditReport:
    overhead: Optional[OverheadMetrics]
    taxonomy: TaxonomyReport
    resolution: ResolutionReport
    extra: dict = field(default_factory=dict)


def audit(traces: Sequence[Trajectory], baseline: Optional[Sequence[Trajectory]] = None) -> AuditReport:
    return AuditReport(
        overhead=overhead_metrics(traces, baseline) if baseline is not None else None,
        taxonomy=annotate_distribution(traces),
        resolution=one_shot_resolution(traces),
    )


def report_rows(report: AuditReport) -> list[dict]:
    """Flat (section, key, value) rows for CSV output."""
    rows = []
    if report.overhead is not None:
        for k, v in report.overhead.as_row().items():
            rows.append({"section": "overhead", "key": k, "value": v})
        rows.append({"section": "overhead", "key": "config_hash", "value": report.overhead.config_hash})
    for t in ASK_TYPES:
        rows.append({"section": "taxonomy", "key": t.value, "value": report.taxonomy.fractions.get(t, 0.0)})
    rows.append({"section": "taxonomy", "key": "unlabeled", "value": report.taxonomy.unlabeled})
    for t in ASK_TYPES:
        rate = report.resolution.get(t)
        rows.append({"section": "one_shot", "key": t.value, "value": "absent" if rate is None else rate})
    return rows


def write_csv(path_or_buf, rows: Sequence[Mapping], columns: Optional[Sequence[str]] = None) -> None:
    columns = list(columns or (rows[0].keys() if rows else []))
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="", encoding="utf-8") if own else path_or_buf
    try:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row.get(c, "") for c in columns})
    finally:
        if own:
            fh.close()


def text_summary(report: AuditReport) -> str:
    out = io.StringIO()
    if report.overhead is not None:
        o = report.overhead
        out.write(f"episodes        {o.episodes}\n")
        out.write(f"accuracy        {100 * o.accuracy:.2f}%\n")
        out.write(f"latency         {o.latency_pct:.1f} (never-ask = 100)\n")
        out.write(f"extra cost      {o.extra_cost_pct:.2f}%\n")
        out.write(f"asks/episode    {o.asks_per_episode:.3f}\n")
    tax = report.taxonomy
    out.write(f"faulted edges   {tax.faulted_edges} of {tax.labeled_edges} labelled, {tax.unlabeled} unlabelled\n")
    for t in ASK_TYPES:
        frac = tax.fractions.get(t, 0.0)
        rate = report.resolution.get(t)
        shown = "n/a (no asks)" if rate is None else f"{rate:.3f}"
        out.write(f"  {t.value:<3} share {100 * frac:5.1f}%   one-shot {shown}\n")
    return out.getvalue()
