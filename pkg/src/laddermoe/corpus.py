"""Corpus assembly on disk: pages, crops, manifests, and loaders.

A corpus directory contains:

    corpus_meta.json   counts, retained categories, head/mid/tail sets
    pages/*.png        full-page rasters (8-bit grayscale)
    crops/*.png        single-character crops cut from the pages
    manifest.jsonl     one record per sample (first line is a header)
    boxes_gt.jsonl     ground-truth boxes per page, one record per line

Crops are cut from the final page rasters, so what the recognizer sees is
exactly the pixels under each ground-truth box.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DataError, FormatError
from .geometry import BBox
from .rng import rng_for
from .syndata import (
    DOMAINS,
    PageSample,
    filter_min_count,
    generate_page,
    sample_category_frequencies,
    split_chars,
    split_pages,
    stratify_head_mid_tail,
)

MANIFEST_VERSION = 1


@dataclass
class CorpusConfig:
    num_categories: int = 60
    zipf_s: float = 1.0
    total_crops: int = 3000
    chars_per_page: int = 12
    page_columns: int = 4
    page_width: int = 192
    page_height: int = 144
    glyph_size: int = 32
    noise_level: float = 0.25
    jitter: float = 0.6
    min_count_threshold: int = 10

    def validate(self) -> None:
        from .errors import ParameterError

        if self.num_categories < 3:
            raise ParameterError(f"num_categories must be >= 3, got {self.num_categories}")
        if self.total_crops < self.num_categories:
            raise ParameterError("total_crops must cover every category at least once")
        if self.chars_per_page < 1 or self.page_columns < 1:
            raise ParameterError("chars_per_page and page_columns must be >= 1")
        if not 0 <= self.noise_level <= 1 or not 0 <= self.jitter <= 1:
            raise ParameterError("noise_level and jitter must be in [0, 1]")
        if self.min_count_threshold < 0:
            raise ParameterError("min_count_threshold must be >= 0")


def save_png(image: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(image) * 255.0, 0, 255).round().astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_manifest(records: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format_version": MANIFEST_VERSION, "kind": "dataset-manifest"}) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    if header.get("format_version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {header.get('format_version')}")
    return [json.loads(ln) for ln in lines[1:]]


def write_box_file(pages: dict[str, list[dict]], path) -> None:
    """Write per-page box records: {page_id, x1, y1, x2, y2, [score], [category]}."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format_version": MANIFEST_VERSION, "kind": "boxes"}) + "\n")
        for page_id in sorted(pages):
            for rec in pages[page_id]:
                fh.write(json.dumps({"page_id": page_id, **rec}, sort_keys=True) + "\n")


def read_box_file(path) -> dict[str, list[dict]]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty box file")
    header = json.loads(lines[0])
    if header.get("kind") != "boxes" or header.get("format_version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: not a box file")
    pages: dict[str, list[dict]] = {}
    for ln in lines[1:]:
        rec = json.loads(ln)
        for key in ("page_id", "x1", "y1", "x2", "y2"):
            if key not in rec:
                raise FormatError(f"{path}: box record missing {key!r}: {ln}")
        pages.setdefault(rec["page_id"], []).append(rec)
    return pages


def build_corpus(cfg: CorpusConfig, seed: int, out_dir) -> dict:
    """Generate a full synthetic corpus under ``out_dir``; returns its metadata.

    Category counts follow the configured power law, categories at or below
    the retention threshold are discarded, pages are laid out from the
    retained instances, and crops are cut back out of the page rasters.
    Splits: pages 8:1:1 stratified by domain, crops 4:1:5 per category.
    """
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    pages_dir = os.path.join(out_dir, "pages")
    crops_dir = os.path.join(out_dir, "crops")
    os.makedirs(pages_dir, exist_ok=True)
    os.makedirs(crops_dir, exist_ok=True)

    counts = sample_category_frequencies(cfg.num_categories, cfg.zipf_s, cfg.total_crops, seed)
    retained = filter_min_count(counts, cfg.min_count_threshold)
    if not retained:
        raise DataError("no categories survive the minimum-count filter")
    rng = rng_for(seed, "corpus")
    instances = np.repeat(retained, counts[retained])
    instances = instances[rng.permutation(len(instances))]

    num_pages = math.ceil(len(instances) / cfg.chars_per_page)
    page_records, crop_records, boxes_out = [], [], {}
    crop_idx = 0
    for p in range(num_pages):
        chunk = instances[p * cfg.chars_per_page : (p + 1) * cfg.chars_per_page]
        domain = DOMAINS[p % len(DOMAINS)]
        n_cols = min(cfg.page_columns, max(1, math.ceil(len(chunk) / 3)))
        page = generate_page(
            len(chunk),
            n_cols,
            (cfg.page_width, cfg.page_height),
            cfg.jitter,
            int(rng.integers(0, 2**31 - 1)),
            categories=chunk.tolist(),
            domain=domain,
            glyph_size=cfg.glyph_size,
            noise_level=cfg.noise_level,
        )
        page_id = f"page_{p:05d}"
        save_png(page.image, os.path.join(pages_dir, page_id + ".png"))
        page_records.append(
            {
                "id": page_id,
                "kind": "page",
                "path": f"pages/{page_id}.png",
                "domain": domain,
                "categories": [int(c) for _, c in page.chars],
                "boxes": [b.as_list() for b, _ in page.chars],
            }
        )
        boxes_out[page_id] = [
            {"x1": b.x1, "y1": b.y1, "x2": b.x2, "y2": b.y2, "category": int(c)}
            for b, c in page.chars
        ]
        for box, cat in page.chars:
            crop = page.image[int(box.y1) : int(box.y2), int(box.x1) : int(box.x2)]
            crop_id = f"crop_{crop_idx:06d}"
            save_png(crop, os.path.join(crops_dir, crop_id + ".png"))
            crop_records.append(
                {
                    "id": crop_id,
                    "kind": "crop",
                    "path": f"crops/{crop_id}.png",
                    "domain": domain,
                    "category": int(cat),
                    "page_id": page_id,
                    "box": box.as_list(),
                }
            )
            crop_idx += 1

    page_split = split_pages([r["domain"] for r in page_records], seed=seed)
    crop_split = split_chars([r["category"] for r in crop_records], seed=seed)
    for rec, split in zip(page_records, page_split.assignment):
        rec["split"] = split
    for rec, split in zip(crop_records, crop_split.assignment):
        rec["split"] = split

    head, mid, tail = stratify_head_mid_tail({c: int(counts[c]) for c in retained})
    meta = {
        "format_version": MANIFEST_VERSION,
        "seed": seed,
        "config": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
        "counts": {str(c): int(counts[c]) for c in retained},
        "retained_categories": [int(c) for c in retained],
        "dropped_categories": [int(c) for c in range(cfg.num_categories) if c not in set(retained)],
        "head": [int(c) for c in head],
        "mid": [int(c) for c in mid],
        "tail": [int(c) for c in tail],
        "num_pages": num_pages,
        "num_crops": crop_idx,
        "domains": list(DOMAINS),
    }
    with open(os.path.join(out_dir, "corpus_meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    write_manifest(page_records + crop_records, os.path.join(out_dir, "manifest.jsonl"))
    write_box_file(boxes_out, os.path.join(out_dir, "boxes_gt.jsonl"))
    return meta


def load_meta(corpus_dir) -> dict:
    with open(os.path.join(corpus_dir, "corpus_meta.json"), encoding="utf-8") as fh:
        return json.load(fh)


@dataclass
class CropSet:
    images: np.ndarray  # (N, S, S)
    categories: np.ndarray  # (N,) corpus category ids
    domains: list[str]
    ids: list[str]


def load_crops(corpus_dir, split: str | None = None) -> CropSet:
    records = [r for r in read_manifest(os.path.join(corpus_dir, "manifest.jsonl")) if r["kind"] == "crop"]
    if split is not None:
        records = [r for r in records if r["split"] == split]
    if not records:
        raise DataError(f"no crops for split {split!r} in {corpus_dir}")
    images = np.stack([load_png(os.path.join(corpus_dir, r["path"])) for r in records])
    cats = np.array([r["category"] for r in records], dtype=np.int64)
    return CropSet(images, cats, [r["domain"] for r in records], [r["id"] for r in records])


@dataclass
class PageRecord:
    page_id: str
    image: np.ndarray
    boxes: list[BBox]
    categories: list[int]
    domain: str


def load_pages(corpus_dir, split: str | None = None) -> list[PageRecord]:
    records = [r for r in read_manifest(os.path.join(corpus_dir, "manifest.jsonl")) if r["kind"] == "page"]
    if split is not None:
        records = [r for r in records if r["split"] == split]
    return [
        PageRecord(
            r["id"],
            load_png(os.path.join(corpus_dir, r["path"])),
            [BBox(*b) for b in r["boxes"]],
            [int(c) for c in r["categories"]],
            r["domain"],
        )
        for r in records
    ]
