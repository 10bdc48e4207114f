"""Evaluation metrics: accuracy family, edit alignment, CR/AR, AP50.

Page text metrics align a hypothesis to its reference with unit-cost
Levenshtein and count substitutions, deletions, and insertions. When
several optimal alignments exist the backtrace prefers diagonal moves
(match/substitute) over deletions over insertions, which pins the S/D/I
split (and therefore CR) deterministically. Correct Rate ignores
insertions, Accurate Rate charges them and may go negative.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .geometry import BBox

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# accuracy family


def overall_accuracy(preds, labels) -> float:
    """Fraction of exact matches."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise DataError(f"preds shape {preds.shape} != labels shape {labels.shape}")
    if preds.size == 0:
        raise DataError("overall_accuracy needs at least one sample")
    return float((preds == labels).mean())


def balanced_accuracy(preds, labels, classes=None, warn_missing: bool = True) -> float:
    """Unweighted mean of per-class accuracies.

    Classes with no test samples are excluded (with a warning) rather than
    scored zero, since their per-class accuracy is undefined.
    """
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if classes is None:
        classes = np.unique(labels)
    per_class = []
    for c in classes:
        mask = labels == c
        if not mask.any():
            if warn_missing:
                log.warning("class %s has no test samples; excluded from balanced accuracy", c)
            continue
        per_class.append(float((preds[mask] == labels[mask]).mean()))
    if not per_class:
        raise DataError("no class has any test sample")
    return float(np.mean(per_class))


def subset_accuracy(preds, labels, subset) -> float | None:
    """Overall accuracy restricted to an index subset; None if it is empty."""
    subset = np.asarray(list(subset), dtype=np.intp)
    if subset.size == 0:
        log.warning("empty evaluation subset; accuracy undefined")
        return None
    preds = np.asarray(preds)[subset]
    labels = np.asarray(labels)[subset]
    return float((preds == labels).mean())


# ---------------------------------------------------------------------------
# edit alignment and CR/AR


@dataclass(frozen=True)
class AlignmentCounts:
    S: int  # substitutions
    D: int  # deletions (reference consumed without output)
    I: int  # insertions (output with no reference)
    N: int  # reference length

    @property
    def distance(self) -> int:
        return self.S + self.D + self.I


def edit_alignment(ref, hyp) -> AlignmentCounts:
    """Unit-cost Levenshtein alignment of hyp to ref.

    Backtrace preference at equal cost: diagonal (match/substitute), then
    deletion, then insertion. S + D + I equals the edit distance.
    """
    r, h = list(ref), list(hyp)
    n, m = len(r), len(h)
    dp = [list(range(m + 1))]
    for i in range(1, n + 1):
        ri = r[i - 1]
        prow = dp[i - 1]
        row = [i] + [0] * m
        for j in range(1, m + 1):
            best = prow[j - 1] + (ri != h[j - 1])
            if prow[j] + 1 < best:
                best = prow[j] + 1
            if row[j - 1] + 1 < best:
                best = row[j - 1] + 1
            row[j] = best
        dp.append(row)
    s = d = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i][j] == dp[i - 1][j - 1] + (r[i - 1] != h[j - 1]):
            s += r[i - 1] != h[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dp[i][j] == dp[i - 1][j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return AlignmentCounts(int(s), int(d), int(ins), n)


def page_cr_ar(c: AlignmentCounts) -> tuple[float, float]:
    """Correct Rate (N-S-D)/N and Accurate Rate 1-(S+D+I)/N (unclamped).

    AR is evaluated as (N-S-D-I)/N, the same quantity over a common
    denominator, so CR >= AR holds exactly in floating point.
    """
    if c.N < 1:
        raise DataError("CR/AR undefined for an empty reference")
    cr = (c.N - c.S - c.D) / c.N
    ar = (c.N - c.S - c.D - c.I) / c.N
    return float(cr), float(ar)


def corpus_macro_micro(counts: list[AlignmentCounts]) -> tuple[float, float, float, float]:
    """(Macro-CR, Macro-AR, Micro-CR, Micro-AR) over per-page counts.

    Macro averages per-page rates (pages with empty references are excluded
    with a warning); micro pools the counts before forming the rates.
    """
    if not counts:
        raise DataError("no pages to aggregate")
    crs, ars = [], []
    for c in counts:
        if c.N < 1:
            log.warning("page with empty reference excluded from macro CR/AR")
            continue
        cr, ar = page_cr_ar(c)
        crs.append(cr)
        ars.append(ar)
    if not crs:
        raise DataError("every page had an empty reference")
    total_n = sum(c.N for c in counts)
    total_sd = sum(c.S + c.D for c in counts)
    total_sdi = sum(c.S + c.D + c.I for c in counts)
    if total_n == 0:
        raise DataError("zero total reference length")
    return (
        float(np.mean(crs)),
        float(np.mean(ars)),
        float((total_n - total_sd) / total_n),
        float((total_n - total_sdi) / total_n),
    )


# ---------------------------------------------------------------------------
# detection average precision at IoU 0.5


def ap50(
    detections: dict[str, list[tuple[BBox, float]]],
    ground_truth: dict[str, list[BBox]],
    iou_threshold: float = 0.5,
) -> float | None:
    """Average precision of scored detections at the given IoU threshold.

    Detections are matched greedily in descending score order against the
    not-yet-matched ground truth of their page (highest IoU first). The
    precision-recall staircase is integrated exactly (all-points
    interpolation). Returns None when there is no ground truth at all.
    """
    total_gt = sum(len(v) for v in ground_truth.values())
    if total_gt == 0:
        log.warning("no ground-truth boxes; AP undefined")
        return None
    pool = []
    for page_id in sorted(detections):
        for i, (box, score) in enumerate(detections[page_id]):
            pool.append((-float(score), page_id, i, box))
    pool.sort(key=lambda t: (t[0], t[1], t[2]))
    if not pool:
        return 0.0
    matched: dict[str, set[int]] = {p: set() for p in ground_truth}
    tp = np.zeros(len(pool))
    for rank, (_, page_id, _, box) in enumerate(pool):
        gts = ground_truth.get(page_id, [])
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if j in matched.get(page_id, set()):
                continue
            iou = box.iou(gt)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_threshold:
            matched.setdefault(page_id, set()).add(best_j)
            tp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / total_gt
    precision = cum_tp / (cum_tp + cum_fp)
    # exact area under the precision envelope
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(np.diff(mrec) > 0)
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    """All evaluation numbers of one run, with their sample counts."""

    num_samples: int = 0
    overall_acc: float | None = None
    balanced_acc: float | None = None
    group_acc: dict[str, float | None] = field(default_factory=dict)  # head/mid/tail
    domain_acc: dict[str, float | None] = field(default_factory=dict)
    macro_cr: float | None = None
    macro_ar: float | None = None
    micro_cr: float | None = None
    micro_ar: float | None = None
    ap50: float | None = None
    num_pages: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "num_samples": self.num_samples,
            "num_pages": self.num_pages,
            "overall_acc": self.overall_acc,
            "balanced_acc": self.balanced_acc,
            "group_acc": self.group_acc,
            "domain_acc": self.domain_acc,
            "macro_cr": self.macro_cr,
            "macro_ar": self.macro_ar,
            "micro_cr": self.micro_cr,
            "micro_ar": self.micro_ar,
            "ap50": self.ap50,
            "warnings": self.warnings,
        }

    def to_table(self) -> str:
        rows = []

        def put(name, value):
            if value is None:
                rows.append((name, "absent"))
            else:
                rows.append((name, f"{value:.4f}"))

        put("overall accuracy", self.overall_acc)
        put("balanced accuracy", self.balanced_acc)
        for grp in ("head", "mid", "tail"):
            if grp in self.group_acc:
                put(f"{grp} accuracy", self.group_acc[grp])
        for dom in sorted(self.domain_acc):
            put(f"{dom} accuracy", self.domain_acc[dom])
        put("macro CR", self.macro_cr)
        put("macro AR", self.macro_ar)
        put("micro CR", self.micro_cr)
        put("micro AR", self.micro_ar)
        put("AP50", self.ap50)
        rows.append(("samples", str(self.num_samples)))
        rows.append(("pages", str(self.num_pages)))
        width = max(len(n) for n, _ in rows)
        return "\n".join(f"{n:<{width}}  {v}" for n, v in rows)


def char_eval_report(preds, labels, groups: dict[str, list[int]] | None = None,
                     domains: list[str] | None = None) -> EvalReport:
    """Build the single-character report: overall, balanced, group and domain accuracy."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    report = EvalReport(num_samples=int(labels.size))
    report.overall_acc = overall_accuracy(preds, labels)
    report.balanced_acc = balanced_accuracy(preds, labels)
    if groups:
        for name, cats in groups.items():
            idx = np.flatnonzero(np.isin(labels, list(cats)))
            acc = subset_accuracy(preds, labels, idx)
            if acc is None:
                report.warnings.append(f"group {name!r} empty in the evaluation split")
            report.group_acc[name] = acc
    if domains is not None:
        for dom in sorted(set(domains)):
            idx = [i for i, d in enumerate(domains) if d == dom]
            report.domain_acc[dom] = subset_accuracy(preds, labels, idx)
    return report


def page_eval_report(
    references: list[list[int]],
    hypotheses: list[list[int]],
    detections: dict[str, list[tuple[BBox, float]]] | None = None,
    ground_truth_boxes: dict[str, list[BBox]] | None = None,
) -> EvalReport:
    """Build the full-page report: macro/micro CR and AR, plus AP50 if scored
    detections and ground-truth boxes are supplied."""
    if len(references) != len(hypotheses):
        raise DataError(f"{len(references)} references vs {len(hypotheses)} hypotheses")
    counts = [edit_alignment(r, h) for r, h in zip(references, hypotheses)]
    report = EvalReport(num_pages=len(counts), num_samples=sum(c.N for c in counts))
    report.macro_cr, report.macro_ar, report.micro_cr, report.micro_ar = corpus_macro_micro(counts)
    if detections is not None and ground_truth_boxes is not None:
        report.ap50 = ap50(detections, ground_truth_boxes)
        if report.ap50 is None:
            report.warnings.append("AP50 undefined: no ground-truth boxes")
    return report
