"""Column-wise grouping and full-page transcription.

Boxes are grouped into vertical columns with an adaptive threshold: half
the mean box width by default. Boxes are visited in descending x1 order
(rightmost first) and join the first column whose anchor (the x1 of the
column's founding box) lies within the threshold; otherwise they found a
new column. Columns are then sorted top-to-bottom internally and
right-to-left overall, which defines the reading order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ThresholdError
from .geometry import BBox

log = logging.getLogger(__name__)


@dataclass
class ColumnGrouping:
    """Ordered columns of (box, payload) pairs.

    Columns are ordered by their first box's x1 descending (right to left);
    within a column, boxes are ordered by y1 ascending (top to bottom).
    """

    columns: list[list[tuple[BBox, object]]] = field(default_factory=list)

    @property
    def num_boxes(self) -> int:
        return sum(len(c) for c in self.columns)


def adaptive_threshold(boxes: list[BBox], factor: float = 0.5) -> float:
    """Mean width of the valid-width boxes, scaled by ``factor``.

    Boxes with x2 <= x1 contribute no width; with no valid boxes at all
    there is nothing to estimate and a ThresholdError is raised.
    """
    widths = [b.x2 - b.x1 for b in boxes if b.x2 > b.x1]
    if not widths:
        raise ThresholdError("no boxes with positive width; cannot estimate column threshold")
    return float(np.mean(widths)) * factor


def group_columns(boxes: list[BBox], payloads=None, factor: float = 0.5) -> ColumnGrouping:
    """Group boxes into right-to-left columns.

    Assignment compares each box's x1 against the founding box's x1 of each
    existing column (strictly less than the threshold joins it). Ties in
    the initial descending-x1 sort break by y1 ascending, then x2, for
    determinism; the output is invariant to the input ordering.
    """
    if payloads is None:
        payloads = list(range(len(boxes)))
    if len(payloads) != len(boxes):
        raise ValueError(f"{len(payloads)} payloads for {len(boxes)} boxes")
    if not boxes:
        return ColumnGrouping([])
    x_thr = adaptive_threshold(boxes, factor)
    items = sorted(
        zip(boxes, payloads), key=lambda bp: (-bp[0].x1, bp[0].y1, bp[0].x2, bp[0].y2)
    )
    columns: list[list[tuple[BBox, object]]] = []
    anchors: list[float] = []
    for box, payload in items:
        for ci, anchor in enumerate(anchors):
            if abs(box.x1 - anchor) < x_thr:
                columns[ci].append((box, payload))
                break
        else:
            columns.append([(box, payload)])
            anchors.append(box.x1)
    for col in columns:
        col.sort(key=lambda bp: bp[0].y1)  # stable, preserving assignment order on ties
    columns.sort(key=lambda col: -col[0][0].x1)
    return ColumnGrouping(columns)


def serialize_reading_order(grouping: ColumnGrouping) -> list:
    """Flatten a grouping into its payload sequence (columns in stored order)."""
    return [payload for col in grouping.columns for _, payload in col]


# ---------------------------------------------------------------------------
# page transcription


@dataclass
class PageTranscription:
    page_id: str
    columns: list[list[int]]  # category ids per column, reading order
    flat: list[int]
    per_box: list[tuple[BBox, int]]  # prediction per input box (input order)
    warnings: list[str] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "page_id": self.page_id,
            "columns": self.columns,
            "flat_text": self.flat,
        }


def _bilinear_resize(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape
    if (h, w) == (size, size):
        return image
    ys = (np.arange(size) + 0.5) * h / size - 0.5
    xs = (np.arange(size) + 0.5) * w / size - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = image[np.ix_(y0, x0)] * (1 - wx) + image[np.ix_(y0, x1)] * wx
    bot = image[np.ix_(y1, x0)] * (1 - wx) + image[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def crop_box(image: np.ndarray, box: BBox, size: int) -> tuple[np.ndarray, str | None]:
    """Cut a box out of a page (clamped to bounds) and resize to the model input."""
    h, w = image.shape
    x1, y1 = int(np.floor(box.x1)), int(np.floor(box.y1))
    x2, y2 = int(np.ceil(box.x2)), int(np.ceil(box.y2))
    cx1, cy1 = max(0, x1), max(0, y1)
    cx2, cy2 = min(w, x2), min(h, y2)
    warning = None
    if (cx1, cy1, cx2, cy2) != (x1, y1, x2, y2):
        warning = f"box ({x1},{y1},{x2},{y2}) clamped to page bounds {w}x{h}"
    if cx2 <= cx1 or cy2 <= cy1:
        return np.zeros((size, size)), warning or f"box ({x1},{y1},{x2},{y2}) empty after clamping"
    return _bilinear_resize(image[cy1:cy2, cx1:cx2], size), warning


def transcribe_page(
    page_image: np.ndarray,
    boxes: list[BBox],
    model,
    factor: float = 0.5,
    page_id: str = "",
    batch_size: int = 64,
) -> PageTranscription:
    """Recognize each box crop and serialize the page in reading order.

    The model only needs a ``read_crops(images) -> list of token lists``
    method; the first token of each crop is taken as its character. An
    empty box list yields an empty transcription.
    """
    if not boxes:
        return PageTranscription(page_id, [], [], [], [])
    size = model.enc_cfg.image_size if hasattr(model, "enc_cfg") else model.input_size
    warnings = []
    crops = []
    for box in boxes:
        crop, warning = crop_box(np.asarray(page_image, dtype=np.float64), box, size)
        crops.append(crop)
        if warning:
            warnings.append(f"{page_id}: {warning}")
            log.warning("%s: %s", page_id, warning)
    seqs = model.read_crops(np.stack(crops), batch_size=batch_size)
    preds = [int(s[0]) if s else -1 for s in seqs]
    grouping = group_columns(boxes, payloads=preds, factor=factor)
    columns = [[payload for _, payload in col] for col in grouping.columns]
    return PageTranscription(
        page_id=page_id,
        columns=columns,
        flat=serialize_reading_order(grouping),
        per_box=list(zip(boxes, preds)),
        warnings=warnings,
    )
