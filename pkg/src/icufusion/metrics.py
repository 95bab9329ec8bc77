"""Evaluation metrics for imbalanced binary classification.

AUROC uses the rank-sum (Mann-Whitney) formulation: the fraction of
positive/negative pairs ranked concordantly, with tied pairs counted half.
AUPRC is average precision with tied scores grouped at each distinct
threshold; no interpolation is applied between precision/recall points, so
a set where every score ties evaluates exactly to the prevalence.

``brute_force_metrics`` recomputes both metrics by explicit enumeration
(every positive/negative pair; every distinct threshold from scratch) and
exists so the fast implementations can be checked against an independent
code path.  Keep it out of production loops: it is quadratic.

The module also houses ablation-report assembly (percent improvements over
a named baseline), per-race-group breakdowns, and a seeded power-iteration
PCA used to export 2-D projections of learned embeddings.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataError

# Fixed presentation order for ablation reports.
VARIANT_ORDER = ("ts_only", "notes_only", "expert_only", "ts_notes", "ts_notes_expert")

VARIANT_LABELS = {
    "ts_only": "Time-Series Only",
    "notes_only": "Clinical Notes Only (Text)",
    "expert_only": "Expert Opinion Only (Text)",
    "ts_notes": "Time-Series w/ Clinical Notes (Joint Fusion)",
    "ts_notes_expert": "Time-Series w/ Clinical Notes + Expert Opinion (Joint Fusion)",
}


@dataclass
class ScoredSet:
    """Parallel arrays of scores and labels, optionally tagged with episode
    ids and demographics for subgroup reporting."""

    scores: np.ndarray
    labels: np.ndarray
    episode_ids: Optional[Sequence[str]] = None
    demographics: Optional[Sequence] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.ndim != 1 or self.labels.ndim != 1:
            raise DataError("scores and labels must be 1-D")
        if self.scores.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"length mismatch: {self.scores.shape[0]} scores vs "
                f"{self.labels.shape[0]} labels"
            )
        if not np.all(np.isfinite(self.scores)):
            raise DataError("scores must be finite")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise DataError("labels must be 0 or 1")
        for attr in ("episode_ids", "demographics"):
            val = getattr(self, attr)
            if val is not None and len(val) != self.scores.shape[0]:
                raise DataError(f"{attr} length does not match scores")

    def __len__(self) -> int:
        return int(self.scores.shape[0])

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return len(self) - self.n_pos


def _require_both_classes(scored: ScoredSet, metric: str) -> None:
    if scored.n_pos == 0 or scored.n_neg == 0:
        raise DataError(
            f"{metric} undefined: need at least one positive and one negative "
            f"(got {scored.n_pos} positives, {scored.n_neg} negatives)"
        )


def auroc(scored: ScoredSet) -> float:
    """Area under the ROC curve via average ranks.

    Equals (concordant pairs + 0.5 * tied pairs) / (P * N).
    """
    _require_both_classes(scored, "AUROC")
    order = np.argsort(scored.scores, kind="stable")
    s = scored.scores[order]
    y = scored.labels[order]
    n = len(scored)
    # Average 1-based ranks within tie groups.
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    group_end = np.cumsum(counts)
    group_start = group_end - counts
    avg_rank = (group_start + group_end + 1) / 2.0  # mean of ranks start+1 .. end
    ranks = avg_rank[inverse]
    p = scored.n_pos
    rank_sum_pos = float(ranks[y == 1].sum())
    u = rank_sum_pos - p * (p + 1) / 2.0
    return u / (p * scored.n_neg)


def auprc(scored: ScoredSet) -> float:
    """Average precision with ties grouped at each distinct threshold.

    Sum over descending distinct scores of (R_k - R_{k-1}) * P_k, where P_k
    and R_k are precision and recall of the rule ``score >= threshold_k``.
    """
    if scored.n_pos == 0:
        raise DataError("AUPRC undefined: no positive labels")
    order = np.argsort(-scored.scores, kind="stable")
    s = scored.scores[order]
    y = scored.labels[order]
    # Last index of each distinct-score group in descending order.
    boundary = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    tp = np.cumsum(y)[boundary].astype(np.float64)
    predicted = (boundary + 1).astype(np.float64)
    precision = tp / predicted
    recall = tp / scored.n_pos
    recall_steps = np.diff(np.concatenate(([0.0], recall)))
    return float(np.sum(recall_steps * precision))


def brute_force_metrics(scored: ScoredSet) -> tuple[float, float]:
    """(AUROC, AUPRC) by explicit enumeration; test oracle only.

    AUROC enumerates every positive/negative pair.  AUPRC recomputes
    precision and recall from scratch at every distinct threshold.
    """
    if len(scored) > 10_000:
        raise DataError("brute_force_metrics is quadratic; refusing n > 10000")
    _require_both_classes(scored, "brute-force AUROC")
    pos = scored.scores[scored.labels == 1]
    neg = scored.scores[scored.labels == 0]
    greater = np.sum(pos[:, None] > neg[None, :])
    tied = np.sum(pos[:, None] == neg[None, :])
    roc = (float(greater) + 0.5 * float(tied)) / (len(pos) * len(neg))

    ap = 0.0
    prev_recall = 0.0
    for threshold in sorted(set(scored.scores.tolist()), reverse=True):
        predicted_pos = scored.scores >= threshold
        tp = int(np.sum(predicted_pos & (scored.labels == 1)))
        fp = int(np.sum(predicted_pos & (scored.labels == 0)))
        precision = tp / (tp + fp)
        recall = tp / len(pos)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return roc, ap


def improvement(metric: float, baseline: float) -> float:
    """Percent improvement of ``metric`` over ``baseline``.

    Returns the exact value 100 * (metric - baseline) / baseline; report
    rendering rounds to two decimals.
    """
    if baseline <= 0:
        raise DataError(f"improvement undefined for baseline {baseline!r} <= 0")
    return 100.0 * (metric - baseline) / baseline


@dataclass
class GroupMetrics:
    """Metrics for one demographic group; None when the group lacks a class."""

    n: int
    n_pos: int
    auroc: Optional[float]
    auprc: Optional[float]

    def to_json_dict(self) -> dict:
        return {"n": self.n, "n_pos": self.n_pos, "auroc": self.auroc, "auprc": self.auprc}


def subgroup_report(scored: ScoredSet) -> dict[str, GroupMetrics]:
    """Per-race-group AUROC/AUPRC.

    Groups missing a class get None metrics with counts, never a silent
    drop: missingness is part of the fairness report.
    """
    if scored.demographics is None:
        raise DataError("subgroup_report requires demographics on the scored set")
    groups: dict[str, list[int]] = {}
    for i, demo in enumerate(scored.demographics):
        groups.setdefault(demo.race, []).append(i)
    report = {}
    for race in sorted(groups):
        idx = np.asarray(groups[race])
        sub = ScoredSet(scored.scores[idx], scored.labels[idx])
        if sub.n_pos == 0 or sub.n_neg == 0:
            report[race] = GroupMetrics(len(sub), sub.n_pos, None, None)
        else:
            report[race] = GroupMetrics(len(sub), sub.n_pos, auroc(sub), auprc(sub))
    return report


def _power_iteration(x: np.ndarray, rng: np.random.Generator,
                     max_iter: int = 1000, tol: float = 1e-13) -> np.ndarray:
    """Leading right singular direction of a centered matrix."""
    k = x.shape[1]
    v = rng.standard_normal(k)
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = x.T @ (x @ v)
        norm = np.linalg.norm(w)
        if norm < 1e-300:
            break
        v_new = w / norm
        if np.linalg.norm(v_new - v) < tol:
            v = v_new
            break
        v = v_new
    # Deterministic sign: largest-magnitude coordinate is positive.
    pivot = int(np.argmax(np.abs(v)))
    if v[pivot] < 0:
        v = -v
    return v


def project_embeddings(vectors: np.ndarray, seed: int = 0) -> np.ndarray:
    """Project n x k vectors onto their top-2 principal directions.

    Columns are centered; directions are found by iterated power method
    with a seeded start, so output is deterministic.  Component 1 carries
    at least as much variance as component 2.  Zero-variance input returns
    zeros with a warning.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise DataError("project_embeddings expects a 2-D array")
    n, k = x.shape
    if n < 2 or k < 2:
        raise DataError(f"need n >= 2 and k >= 2, got shape {x.shape}")
    centered = x - x.mean(axis=0)
    if float(np.sum(centered**2)) < 1e-24:
        warnings.warn("zero-variance input; projection is all zeros", stacklevel=2)
        return np.zeros((n, 2))
    rng = np.random.default_rng(seed)
    v1 = _power_iteration(centered, rng)
    c1 = centered @ v1
    deflated = centered - np.outer(c1, v1)
    v2 = _power_iteration(deflated, rng)
    c2 = deflated @ v2
    if np.var(c2) > np.var(c1):
        c1, c2 = c2, c1
    return np.column_stack([c1, c2])


@dataclass
class VariantResult:
    variant: str
    auroc: float
    auprc: float
    auroc_improvement_pct: Optional[float] = None
    auprc_improvement_pct: Optional[float] = None

    def to_json_dict(self) -> dict:
        return {
            "variant": self.variant,
            "auroc": self.auroc,
            "auprc": self.auprc,
            "auroc_improvement_pct": self.auroc_improvement_pct,
            "auprc_improvement_pct": self.auprc_improvement_pct,
        }


@dataclass
class EvalReport:
    """Ablation-style report: one row per variant, improvements over a
    named baseline, and per-variant subgroup breakdowns."""

    baseline_variant: str
    rows: list[VariantResult] = field(default_factory=list)
    subgroups: dict[str, dict[str, GroupMetrics]] = field(default_factory=dict)

    @classmethod
    def from_scored_sets(cls, scored_by_variant: dict[str, ScoredSet],
                         baseline_variant: str = "ts_only",
                         include_subgroups: bool = True) -> "EvalReport":
        if baseline_variant not in scored_by_variant:
            raise DataError(f"baseline variant {baseline_variant!r} not evaluated")
        base_roc = auroc(scored_by_variant[baseline_variant])
        base_prc = auprc(scored_by_variant[baseline_variant])
        report = cls(baseline_variant=baseline_variant)
        ordered = [v for v in VARIANT_ORDER if v in scored_by_variant]
        ordered += [v for v in scored_by_variant if v not in VARIANT_ORDER]
        for variant in ordered:
            scored = scored_by_variant[variant]
            roc, prc = auroc(scored), auprc(scored)
            report.rows.append(VariantResult(
                variant=variant, auroc=roc, auprc=prc,
                auroc_improvement_pct=improvement(roc, base_roc),
                auprc_improvement_pct=improvement(prc, base_prc),
            ))
            if include_subgroups and scored.demographics is not None:
                report.subgroups[variant] = subgroup_report(scored)
        return report

    def row(self, variant: str) -> VariantResult:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    def to_json_dict(self) -> dict:
        return {
            "baseline_variant": self.baseline_variant,
            "rows": [r.to_json_dict() for r in self.rows],
            "subgroups": {
                variant: {race: gm.to_json_dict() for race, gm in groups.items()}
                for variant, groups in self.subgroups.items()
            },
        }

    def render_table(self) -> str:
        """Aligned text table: variant, AUROC, ΔAUROC%, AUPRC, ΔAUPRC%."""
        header = ("model", "AUROC", "ΔAUROC%", "AUPRC", "ΔAUPRC%")
        lines = []
        name_width = max(len(header[0]),
                         max((len(VARIANT_LABELS.get(r.variant, r.variant)) for r in self.rows),
                             default=0))
        fmt = f"{{:<{name_width}}}  {{:>7}}  {{:>8}}  {{:>7}}  {{:>8}}"
        lines.append(fmt.format(*header))
        for r in self.rows:
            lines.append(fmt.format(
                VARIANT_LABELS.get(r.variant, r.variant),
                f"{r.auroc:.4f}", f"{r.auroc_improvement_pct:.2f}",
                f"{r.auprc:.4f}", f"{r.auprc_improvement_pct:.2f}",
            ))
        return "\n".join(lines) + "\n"

    def render_subgroup_table(self, variant: str) -> str:
        groups = self.subgroups.get(variant)
        if not groups:
            return f"no subgroup data for {variant}\n"
        lines = [f"{'group':<24}  {'n':>6}  {'n_pos':>6}  {'AUROC':>7}  {'AUPRC':>7}"]
        for race, gm in groups.items():
            roc = f"{gm.auroc:.4f}" if gm.auroc is not None else "undef"
            prc = f"{gm.auprc:.4f}" if gm.auprc is not None else "undef"
            lines.append(f"{race:<24}  {gm.n:>6}  {gm.n_pos:>6}  {roc:>7}  {prc:>7}")
        return "\n".join(lines) + "\n"
