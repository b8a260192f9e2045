"""Test-set metrics and statistical comparison machinery.

Micro-averaged F1/recall pool all (patient, class) decisions; AUPRC is
average precision over the pooled ranking with tied probabilities grouped
into single curve points. Confidence intervals come from a percentile
bootstrap over patients, and model pairs are compared with a z-test whose
standard errors derive from the CI widths, Bonferroni-adjusted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

CLASS_NAMES = ("nephropathy", "retinopathy", "neuropathy")

# 97.5% standard normal quantile used to convert CI half-widths to SEs.
Z_975 = 1.959964


class EvaluationError(Exception):
    """Base class for evaluation failures."""


class NoPositives(EvaluationError):
    """AUPRC requested with no positive labels."""


@dataclass
class PredictionSet:
    """Probabilities and binary labels for one model on one window."""

    probabilities: np.ndarray
    labels: np.ndarray
    window_years: int
    model_tag: str

    def __post_init__(self) -> None:
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.probabilities.shape != self.labels.shape:
            raise ValueError("probabilities and labels shapes differ")
        if self.probabilities.ndim != 2 or self.probabilities.shape[1] != len(CLASS_NAMES):
            raise ValueError(f"expected (N, {len(CLASS_NAMES)}) arrays")
        if self.probabilities.shape[0] < 1:
            raise ValueError("need at least one row")

    @property
    def n(self) -> int:
        return self.probabilities.shape[0]

    def resample(self, indices: np.ndarray) -> "PredictionSet":
        out = object.__new__(PredictionSet)
        out.probabilities = self.probabilities[indices]
        out.labels = self.labels[indices]
        out.window_years = self.window_years
        out.model_tag = self.model_tag
        return out


@dataclass(frozen=True)
class ClassCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def binarize_and_count(
    pred: PredictionSet, threshold: float = 0.5
) -> tuple[dict[str, ClassCounts], ClassCounts]:
    """Threshold probabilities (positive when >= threshold) and count
    confusion cells per class and pooled over all N x 3 decisions."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    decisions = pred.probabilities >= threshold
    truth = pred.labels.astype(bool)
    per_class: dict[str, ClassCounts] = {}
    for j, name in enumerate(CLASS_NAMES):
        d, t = decisions[:, j], truth[:, j]
        per_class[name] = ClassCounts(
            tp=int(np.sum(d & t)),
            fp=int(np.sum(d & ~t)),
            fn=int(np.sum(~d & t)),
            tn=int(np.sum(~d & ~t)),
        )
    pooled = ClassCounts(
        tp=sum(c.tp for c in per_class.values()),
        fp=sum(c.fp for c in per_class.values()),
        fn=sum(c.fn for c in per_class.values()),
        tn=sum(c.tn for c in per_class.values()),
    )
    return per_class, pooled


def _safe_ratio(num: float, den: float, flags: list[str], name: str) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


@dataclass
class MetricReport:
    micro_f1: float
    micro_recall: float
    micro_auprc: float
    per_class: dict[str, tuple[float, float]]  # name -> (f1, recall)
    threshold: float
    degenerate: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "micro_f1": self.micro_f1,
            "micro_recall": self.micro_recall,
            "micro_auprc": self.micro_auprc,
            "per_class": {
                name: {"f1": f1, "recall": recall}
                for name, (f1, recall) in self.per_class.items()
            },
            "threshold": self.threshold,
            "degenerate": list(self.degenerate),
        }


def micro_auprc(pred: PredictionSet) -> float:
    """Average precision over the pooled (probability, label) pairs.

    Pairs are ranked by descending probability; tied probabilities collapse
    into one precision/recall point. AP = sum_k (R_k - R_{k-1}) * P_k.
    Raises NoPositives when no label is set.
    """
    probs = pred.probabilities.ravel()
    labels = pred.labels.ravel()
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise NoPositives("micro AUPRC undefined without positive labels")
    order = np.argsort(-probs, kind="stable")
    probs, labels = probs[order], labels[order]
    # last index of each tie group
    boundary = np.nonzero(np.diff(probs))[0]
    group_ends = np.concatenate([boundary, [len(probs) - 1]])
    cum_tp = np.cumsum(labels)[group_ends]
    predicted = group_ends + 1
    precision = cum_tp / predicted
    recall = cum_tp / n_pos
    delta_recall = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(delta_recall * precision))


def metric_report(pred: PredictionSet, threshold: float = 0.5) -> MetricReport:
    """Micro and per-class F1/recall plus micro AUPRC at the given threshold.

    Metrics with an empty denominator report 0 and are listed in
    `degenerate` (AUPRC is degenerate when there are no positives).
    """
    per_class_counts, pooled = binarize_and_count(pred, threshold)
    flags: list[str] = []
    micro_f1 = _safe_ratio(
        2 * pooled.tp, 2 * pooled.tp + pooled.fp + pooled.fn, flags, "micro_f1"
    )
    micro_recall = _safe_ratio(pooled.tp, pooled.tp + pooled.fn, flags, "micro_recall")
    per_class: dict[str, tuple[float, float]] = {}
    for name, c in per_class_counts.items():
        f1 = _safe_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, flags, f"f1_{name}")
        recall = _safe_ratio(c.tp, c.tp + c.fn, flags, f"recall_{name}")
        per_class[name] = (f1, recall)
    try:
        auprc = micro_auprc(pred)
    except NoPositives:
        flags.append("micro_auprc")
        auprc = 0.0
    return MetricReport(
        micro_f1=micro_f1,
        micro_recall=micro_recall,
        micro_auprc=auprc,
        per_class=per_class,
        threshold=threshold,
        degenerate=tuple(flags),
    )


def _class_metric(name: str, kind: str, threshold: float) -> Callable[[PredictionSet], float]:
    j = CLASS_NAMES.index(name)

    def compute(pred: PredictionSet) -> float:
        d = pred.probabilities[:, j] >= threshold
        t = pred.labels[:, j].astype(bool)
        tp = int(np.sum(d & t))
        fp = int(np.sum(d & ~t))
        fn = int(np.sum(~d & t))
        if kind == "recall":
            return tp / (tp + fn) if tp + fn else 0.0
        den = 2 * tp + fp + fn
        return 2 * tp / den if den else 0.0

    return compute


def metric_function(name: str, threshold: float = 0.5) -> Callable[[PredictionSet], float]:
    """Resolve a named metric: micro_{f1,recall,auprc}, f1_<class>,
    recall_<class>."""
    if name == "micro_f1":
        return lambda p: metric_report(p, threshold).micro_f1
    if name == "micro_recall":
        return lambda p: metric_report(p, threshold).micro_recall
    if name == "micro_auprc":
        return micro_auprc
    for cls in CLASS_NAMES:
        if name == f"f1_{cls}":
            return _class_metric(cls, "f1", threshold)
        if name == f"recall_{cls}":
            return _class_metric(cls, "recall", threshold)
    raise KeyError(f"unknown metric {name!r}")


@dataclass
class BootstrapCI:
    point: float
    lo: float
    hi: float
    n_iterations: int
    seed: int
    redraws: int = 0

    def __post_init__(self) -> None:
        if self.lo > self.hi:
            raise ValueError("CI lower bound exceeds upper bound")

    def to_dict(self) -> dict:
        return {
            "point": self.point,
            "lo": self.lo,
            "hi": self.hi,
            "n_iterations": self.n_iterations,
            "seed": self.seed,
            "redraws": self.redraws,
        }


def bootstrap_ci(
    pred: PredictionSet,
    metric: str,
    n: int = 1000,
    seed: int = 0,
    threshold: float = 0.5,
) -> BootstrapCI:
    """95% percentile bootstrap CI for a named metric.

    Patients (rows) are resampled with replacement; iteration i draws from
    an RNG stream keyed by (seed, i), so results do not depend on execution
    order. Resamples where AUPRC is undefined (no positives) are redrawn and
    the redraw count reported.
    """
    if n < 100:
        raise ValueError("need at least 100 bootstrap iterations")
    compute = metric_function(metric, threshold)
    point = compute(pred)
    values = np.empty(n, dtype=np.float64)
    redraws = 0
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        attempt = 0
        while True:
            indices = rng.integers(0, pred.n, size=pred.n)
            try:
                values[i] = compute(pred.resample(indices))
                break
            except NoPositives:
                redraws += 1
                attempt += 1
                if attempt > 1000:
                    raise
                rng = np.random.default_rng([seed, i, 1000003 + attempt])
    lo, hi = np.percentile(values, [2.5, 97.5])
    return BootstrapCI(
        point=float(point),
        lo=float(lo),
        hi=float(hi),
        n_iterations=n,
        seed=seed,
        redraws=redraws,
    )


@dataclass
class ComparisonResult:
    z: float
    p_two_sided: float
    alpha_adjusted: float
    significant: bool
    m_comparisons: int

    def to_dict(self) -> dict:
        return {
            "z": self.z,
            "p_two_sided": self.p_two_sided,
            "alpha_adjusted": self.alpha_adjusted,
            "significant": self.significant,
            "m_comparisons": self.m_comparisons,
        }


def compare_models(a: BootstrapCI, b: BootstrapCI, m_comparisons: int) -> ComparisonResult:
    """z-test on the difference of two point estimates, with standard errors
    derived from the 95% CI widths and a Bonferroni-adjusted threshold.

    Zero-variance pairs with equal points define z = 0 (not significant).
    """
    if m_comparisons < 1:
        raise ValueError("m_comparisons must be >= 1")
    se_a = (a.hi - a.lo) / (2 * Z_975)
    se_b = (b.hi - b.lo) / (2 * Z_975)
    diff = a.point - b.point
    se = math.sqrt(se_a**2 + se_b**2)
    if se == 0.0:
        z = 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
    else:
        z = diff / se
    p = math.erfc(abs(z) / math.sqrt(2.0)) if math.isfinite(z) else 0.0
    alpha = 0.05 / m_comparisons
    return ComparisonResult(
        z=z,
        p_two_sided=p,
        alpha_adjusted=alpha,
        significant=p < alpha,
        m_comparisons=m_comparisons,
    )


@dataclass
class WindowReport:
    """Full report for one (model_tag, window): point metrics + CIs."""

    model_tag: str
    window_years: int
    report: MetricReport
    intervals: dict[str, BootstrapCI]

    def to_dict(self) -> dict:
        return {
            "model_tag": self.model_tag,
            "window_years": self.window_years,
            "metrics": self.report.to_dict(),
            "intervals": {k: ci.to_dict() for k, ci in self.intervals.items()},
        }


BOOTSTRAP_METRICS = (
    "micro_f1",
    "micro_recall",
    "micro_auprc",
    *(f"f1_{c}" for c in CLASS_NAMES),
    *(f"recall_{c}" for c in CLASS_NAMES),
)


def evaluate_predictions(
    pred: PredictionSet,
    threshold: float = 0.5,
    n_boot: int = 1000,
    seed: int = 0,
) -> WindowReport:
    """Point metrics plus a bootstrap CI for every reported metric."""
    report = metric_report(pred, threshold)
    intervals: dict[str, BootstrapCI] = {}
    for name in BOOTSTRAP_METRICS:
        if name == "micro_auprc" and "micro_auprc" in report.degenerate:
            continue
        intervals[name] = bootstrap_ci(pred, name, n=n_boot, seed=seed, threshold=threshold)
    return WindowReport(
        model_tag=pred.model_tag,
        window_years=pred.window_years,
        report=report,
        intervals=intervals,
    )


def _cell(ci: Optional[BootstrapCI], point: float, bold: bool = False) -> str:
    if ci is None:
        text = f"{point:.2f}"
    else:
        text = f"{ci.point:.2f} ({ci.lo:.2f}-{ci.hi:.2f})"
    return f"**{text}**" if bold else text


def render_class_table(reports: Sequence[WindowReport]) -> str:
    """Markdown table: per-class F1/recall plus micro-F1/AUPRC, one row per
    prediction window."""
    header = ["Time"]
    for name in CLASS_NAMES:
        header += [f"{name.capitalize()} F1", f"{name.capitalize()} Recall"]
    header += ["Micro-F1", "Micro-AUPRC"]
    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "---|" * len(header),
    ]
    for wr in sorted(reports, key=lambda r: r.window_years):
        row = [f"{wr.window_years} year"]
        for name in CLASS_NAMES:
            f1, recall = wr.report.per_class[name]
            row += [
                _cell(wr.intervals.get(f"f1_{name}"), f1),
                _cell(wr.intervals.get(f"recall_{name}"), recall),
            ]
        row.append(_cell(wr.intervals.get("micro_f1"), wr.report.micro_f1))
        row.append(_cell(wr.intervals.get("micro_auprc"), wr.report.micro_auprc))
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def compare_reports(
    reports_a: Sequence[WindowReport],
    reports_b: Sequence[WindowReport],
    m_comparisons: int,
    metrics: Sequence[str] = ("micro_f1", "micro_auprc"),
) -> list[dict]:
    """All pairwise (window, metric) comparisons between two models."""
    by_window_a = {r.window_years: r for r in reports_a}
    by_window_b = {r.window_years: r for r in reports_b}
    if sorted(by_window_a) != sorted(by_window_b):
        raise ValueError("reports cover different windows")
    rows: list[dict] = []
    for window in sorted(by_window_a):
        for metric in metrics:
            ci_a = by_window_a[window].intervals[metric]
            ci_b = by_window_b[window].intervals[metric]
            result = compare_models(ci_a, ci_b, m_comparisons)
            rows.append(
                {
                    "window_years": window,
                    "metric": metric,
                    "a": by_window_a[window].model_tag,
                    "b": by_window_b[window].model_tag,
                    "point_a": ci_a.point,
                    "point_b": ci_b.point,
                    **result.to_dict(),
                }
            )
    return rows


def render_comparison_table(
    reports_a: Sequence[WindowReport],
    reports_b: Sequence[WindowReport],
    comparisons: Sequence[dict],
    metrics: Sequence[str] = ("micro_f1", "micro_auprc"),
) -> str:
    """Markdown table comparing two models side by side; the better cell of
    a significant pair is bold."""
    tag_a = reports_a[0].model_tag
    tag_b = reports_b[0].model_tag
    sig = {
        (c["window_years"], c["metric"]): (c["significant"], c["z"]) for c in comparisons
    }
    by_window = {
        tag: {r.window_years: r for r in reports}
        for tag, reports in ((tag_a, reports_a), (tag_b, reports_b))
    }
    metric_names = {"micro_f1": "Micro-F1", "micro_auprc": "Micro-AUPRC"}
    header = ["Time"] + [
        f"{tag} {metric_names.get(m, m)}" for tag in (tag_a, tag_b) for m in metrics
    ]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for window in sorted(by_window[tag_a]):
        row = [f"{window} year"]
        for tag in (tag_a, tag_b):
            wr = by_window[tag][window]
            for m in metrics:
                significant, z = sig.get((window, m), (False, 0.0))
                wins = (z > 0) == (tag == tag_a) and z != 0.0
                row.append(_cell(wr.intervals.get(m), 0.0, bold=significant and wins))
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"
