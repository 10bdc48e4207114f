"""Expert-activation statistics: recording, CSV export, utilization summary."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .model import Recognizer

CSV_VERSION = 1


@dataclass
class ActivationMatrix:
    """Selection counts for one adapter: counts[expert, category]."""

    adapter_index: int
    counts: np.ndarray  # (num_experts, num_categories) int64
    category_samples: np.ndarray  # (num_categories,) int64
    top_k: int

    @property
    def num_experts(self) -> int:
        return self.counts.shape[0]

    def normalized(self) -> np.ndarray:
        """Counts divided by per-category sample count (0 where unseen)."""
        denom = np.maximum(self.category_samples, 1).astype(np.float64)
        return self.counts / denom


def record_activations(
    model: Recognizer, images, categories, num_categories: int, batch_size: int = 64
) -> list[ActivationMatrix]:
    """Count how often each expert is selected per category over a dataset.

    Pure observation: runs the encoder with routing records on and mutates
    no parameters. For every category c with n_c samples, each adapter's
    counts column sums to top_k * n_c.
    """
    imgs = np.asarray(images, dtype=np.float64)
    cats = np.asarray(categories, dtype=np.int64)
    n_adapters = len(model.enc_cfg.adapter_layers) if model.enc_cfg.adapters_active else 0
    mats = [
        ActivationMatrix(
            j,
            np.zeros((model.enc_cfg.num_experts, num_categories), dtype=np.int64),
            np.zeros(num_categories, dtype=np.int64),
            model.enc_cfg.top_k,
        )
        for j in range(n_adapters)
    ]
    if n_adapters == 0:
        return mats
    for start in range(0, imgs.shape[0], batch_size):
        batch_cats = cats[start : start + batch_size]
        _, routing = model.encode(imgs[start : start + batch_size], record_routing=True)
        for j, recs in enumerate(routing):
            for cat, rec in zip(batch_cats, recs):
                mats[j].counts[list(rec.selected), cat] += 1
        for j in range(n_adapters):
            np.add.at(mats[j].category_samples, batch_cats, 1)
    return mats


def export_heatmap_csv(mats: list[ActivationMatrix], out_dir) -> list[str]:
    """Write one counts CSV and one normalized CSV per adapter.

    Rows are expert indices, columns category indices; the first column
    labels the expert. Returns the written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for mat in mats:
        for variant, table in (("counts", mat.counts), ("normalized", mat.normalized())):
            path = os.path.join(out_dir, f"adapter{mat.adapter_index}_{variant}.csv")
            with open(path, "w", newline="", encoding="utf-8") as fh:
                fh.write(f"# format_version: {CSV_VERSION}\n")
                writer = csv.writer(fh)
                writer.writerow(["expert"] + [f"cat{c}" for c in range(table.shape[1])])
                for e in range(table.shape[0]):
                    row = table[e].tolist() if variant == "counts" else [repr(float(v)) for v in table[e]]
                    writer.writerow([e] + row)
            paths.append(path)
    return paths


def read_heatmap_csv(path) -> np.ndarray:
    """Parse a CSV written by export_heatmap_csv back into its matrix."""
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("# format_version:"):
            raise FormatError(f"{path}: missing format version header")
        version = int(first.split(":", 1)[1])
        if version != CSV_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row[1:]] for row in reader]
    return np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)


def expert_utilization_summary(mats: list[ActivationMatrix], top_n: int = 5) -> dict:
    """Sparsity and overlap statistics per adapter.

    utilization: fraction of experts selected at least once; entropy: of the
    marginal expert-selection distribution (nats, log N at uniform);
    top_overlap: per adapter pair, how many of their top_n most-used
    experts coincide.
    """
    per_adapter = []
    tops = []
    for mat in mats:
        marginal = mat.counts.sum(axis=1).astype(np.float64)
        total = marginal.sum()
        utilization = float((marginal > 0).mean()) if marginal.size else 0.0
        if total > 0:
            p = marginal / total
            nz = p[p > 0]
            entropy = float(-(nz * np.log(nz)).sum())
        else:
            entropy = 0.0
        top = [int(e) for e in np.lexsort((np.arange(marginal.size), -marginal))[:top_n]]
        tops.append(set(top))
        per_adapter.append(
            {
                "adapter": mat.adapter_index,
                "utilization": utilization,
                "entropy": entropy,
                "top_experts": sorted(top),
            }
        )
    overlaps = {}
    for a in range(len(mats)):
        for b in range(a + 1, len(mats)):
            overlaps[f"{mats[a].adapter_index}-{mats[b].adapter_index}"] = len(tops[a] & tops[b])
    return {"adapters": per_adapter, "top_overlap": overlaps, "top_n": top_n}
