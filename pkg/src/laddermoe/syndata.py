"""Synthetic long-tailed glyph corpus: rendering, layout, filtering, splits.

Glyph shapes are procedural: each category id keys a fixed stroke pattern,
so the "font" is stable across corpora while noise and placement vary with
the seed. Three rendering styles stand in for acquisition domains: clean
dark-on-light ("tracing"), speckled light-on-dark ("rubbing"), and blurred
glyphs over a soft texture ("color"). Pages stack glyphs in right-to-left
columns read top-to-bottom, which is also the canonical label order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DataError, LayoutError, ParameterError
from .geometry import BBox

DOMAINS = ("color", "rubbing", "tracing")

_GLYPH_STYLE_KEY = 0x67C9  # fixed key so category -> stroke pattern never varies


# ---------------------------------------------------------------------------
# samples


@dataclass
class GlyphSample:
    image: np.ndarray  # (H, W) grayscale in [0, 1]
    category: int
    domain: str


@dataclass
class PageSample:
    image: np.ndarray  # (H, W) grayscale in [0, 1]
    chars: list[tuple[BBox, int]]  # canonical reading order
    domain: str


@dataclass
class SplitManifest:
    """Per-sample split assignment ('train' / 'val' / 'test')."""

    kind: str
    seed: int
    assignment: list[str]

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.assignment) == split)


# ---------------------------------------------------------------------------
# frequency model


def largest_remainder(quotas: np.ndarray, total: int) -> np.ndarray:
    """Round non-negative quotas to integers summing exactly to ``total``.

    Floors first, then hands out the leftover units by descending remainder
    (ties broken by lower index).
    """
    floors = np.floor(quotas).astype(np.int64)
    leftover = int(total - floors.sum())
    if leftover > 0:
        remainders = quotas - floors
        order = np.lexsort((np.arange(len(quotas)), -remainders))
        floors[order[:leftover]] += 1
    return floors


def sample_category_frequencies(num_categories: int, zipf_s: float, total: int, seed: int = 0) -> np.ndarray:
    """Per-category counts proportional to rank^(-s), summing exactly to total.

    Counts are non-increasing in rank. The procedure is deterministic; the
    seed argument is accepted for interface symmetry with the other
    generators and ignored.
    """
    if num_categories < 1 or total < num_categories or zipf_s < 0:
        raise ParameterError(
            f"need num_categories >= 1, total >= num_categories, s >= 0; "
            f"got {num_categories}, {total}, {zipf_s}"
        )
    ranks = np.arange(1, num_categories + 1, dtype=np.float64)
    weights = ranks**-zipf_s
    quotas = total * weights / weights.sum()
    return largest_remainder(quotas, total)


def filter_min_count(counts, threshold: int = 10) -> list[int]:
    """Category ids whose count strictly exceeds the threshold."""
    if isinstance(counts, dict):
        items = sorted(counts.items())
    else:
        items = list(enumerate(np.asarray(counts).tolist()))
    return [cat for cat, count in items if count > threshold]


def stratify_head_mid_tail(counts) -> tuple[list[int], list[int], list[int]]:
    """Cut categories into head/mid/tail thirds by descending frequency.

    Ties break by lower id; boundary at ceil(C/3) and 2*ceil(C/3).
    """
    if isinstance(counts, dict):
        items = list(counts.items())
    else:
        items = list(enumerate(np.asarray(counts).tolist()))
    if len(items) < 3:
        raise ParameterError(f"need at least 3 categories, got {len(items)}")
    ordered = [cat for cat, _ in sorted(items, key=lambda kv: (-kv[1], kv[0]))]
    b = math.ceil(len(ordered) / 3)
    return ordered[:b], ordered[b : 2 * b], ordered[2 * b :]


# ---------------------------------------------------------------------------
# splits


def _split_counts(n: int, ratios: tuple[int, int, int]) -> np.ndarray:
    quotas = n * np.asarray(ratios, dtype=np.float64) / sum(ratios)
    return largest_remainder(quotas, n)


def split_pages(domains, ratios: tuple[int, int, int] = (8, 1, 1), seed: int = 0) -> SplitManifest:
    """Assign pages to train/val/test, stratified by domain."""
    domains = list(domains)
    if not domains:
        raise DataError("no pages to split")
    from .rng import rng_for

    rng = rng_for(seed, "split-pages")
    assignment = [""] * len(domains)
    for dom in sorted(set(domains)):
        idx = np.array([i for i, d in enumerate(domains) if d == dom])
        idx = idx[rng.permutation(len(idx))]
        n_train, n_val, _ = _split_counts(len(idx), ratios)
        for j, i in enumerate(idx):
            assignment[i] = "train" if j < n_train else ("val" if j < n_train + n_val else "test")
    return SplitManifest("pages", seed, assignment)


def split_chars(categories, ratios: tuple[int, int, int] = (4, 1, 5), seed: int = 0) -> SplitManifest:
    """Assign crops to train/val/test independently inside each category.

    Every category needs at least 2 samples; largest-remainder rounding of
    a 4:1:5 ratio then guarantees at least one train and one test sample.
    """
    categories = np.asarray(list(categories))
    if categories.size == 0:
        raise DataError("no crops to split")
    from .rng import rng_for

    rng = rng_for(seed, "split-chars")
    assignment = [""] * len(categories)
    for cat in sorted(set(categories.tolist())):
        idx = np.flatnonzero(categories == cat)
        if len(idx) < 2:
            raise DataError(
                f"category {cat} has {len(idx)} sample(s); need >= 2 to cover train and test"
            )
        idx = idx[rng.permutation(len(idx))]
        n_train, n_val, n_test = _split_counts(len(idx), ratios)
        if n_train < 1 or n_test < 1:
            raise DataError(f"category {cat}: split {n_train}/{n_val}/{n_test} lacks coverage")
        for j, i in enumerate(idx):
            assignment[i] = "train" if j < n_train else ("val" if j < n_train + n_val else "test")
    return SplitManifest("chars", seed, assignment)


# ---------------------------------------------------------------------------
# glyph rendering


def _glyph_mask(category: int, size: int) -> np.ndarray:
    """Deterministic stroke pattern for a category: ink mask in [0, 1]."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([_GLYPH_STYLE_KEY, int(category), size])))
    mask = np.zeros((size, size))
    lattice = np.linspace(size * 0.15, size * 0.85, 5)
    n_strokes = int(rng.integers(6, 10))
    thickness = max(1, size // 16)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(n_strokes):
        a = rng.integers(0, 5, size=2)
        b = rng.integers(0, 5, size=2)
        while (b == a).all():
            b = rng.integers(0, 5, size=2)
        x0, y0 = lattice[a[0]], lattice[a[1]]
        x1, y1 = lattice[b[0]], lattice[b[1]]
        # distance from each pixel to the segment
        dx, dy = x1 - x0, y1 - y0
        length2 = dx * dx + dy * dy
        t = np.clip(((xx - x0) * dx + (yy - y0) * dy) / length2, 0.0, 1.0)
        dist = np.hypot(xx - (x0 + t * dx), yy - (y0 + t * dy))
        mask = np.maximum(mask, np.clip(1.0 + thickness - dist, 0.0, 1.0))
    return np.clip(mask, 0.0, 1.0)


def render_glyph(category: int, domain: str, noise_level: float, seed: int, size: int = 32) -> GlyphSample:
    """Render one glyph in a domain style; deterministic per argument tuple."""
    if domain not in DOMAINS:
        raise ParameterError(f"unknown domain {domain!r}, expected one of {DOMAINS}")
    if not 0.0 <= noise_level <= 1.0:
        raise ParameterError(f"noise_level must be in [0, 1], got {noise_level}")
    mask = _glyph_mask(category, size)
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([int(seed), int(category), DOMAINS.index(domain)]))
    )
    if domain == "tracing":
        img = 1.0 - 0.97 * mask
        img += noise_level * 0.12 * rng.normal(size=mask.shape)
    elif domain == "rubbing":
        img = 0.08 + 0.84 * mask
        speckle = rng.random(mask.shape)
        density = 0.04 + 0.10 * noise_level
        img = np.where(speckle < density, 0.55 + 0.4 * rng.random(mask.shape), img)
        img += noise_level * 0.10 * rng.normal(size=mask.shape)
    else:  # color: textured background, darker glyph, slight blur
        coarse = rng.random((4, 4))
        tex = gaussian_filter(np.kron(coarse, np.ones((size // 4, size // 4))), sigma=size / 10.0)
        lo, hi = tex.min(), tex.max()
        bg = 0.5 + 0.3 * ((tex - lo) / (hi - lo + 1e-12))
        img = bg * (1.0 - 0.8 * mask)
        img = gaussian_filter(img, sigma=0.4 + 0.8 * noise_level)
        img += noise_level * 0.08 * rng.normal(size=mask.shape)
    return GlyphSample(np.clip(img, 0.0, 1.0), int(category), domain)


def _page_background(domain: str, shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    if domain == "tracing":
        return np.ones(shape)
    if domain == "rubbing":
        return np.full(shape, 0.08) + 0.02 * rng.random(shape)
    coarse = rng.random((6, 6))
    reps = (math.ceil(shape[0] / 6), math.ceil(shape[1] / 6))
    tex = np.kron(coarse, np.ones(reps))[: shape[0], : shape[1]]
    tex = gaussian_filter(tex, sigma=min(shape) / 12.0)
    lo, hi = tex.min(), tex.max()
    return 0.5 + 0.3 * ((tex - lo) / (hi - lo + 1e-12))


def generate_page(
    num_chars: int,
    num_columns: int,
    page_size: tuple[int, int],
    jitter: float,
    seed: int,
    *,
    categories=None,
    num_categories: int = 10,
    domain: str = "tracing",
    glyph_size: int = 32,
    noise_level: float = 0.2,
) -> PageSample:
    """Lay glyphs out in right-to-left columns, top-to-bottom within each.

    jitter in [0, 1] scales positional wobble; at any value, the x-spread
    inside a column stays below half the glyph width, so grouping clean
    pages back into columns at the default 0.5 factor is exact. Records
    ground-truth boxes and the canonical reading order.
    """
    if num_chars < 1 or num_columns < 1:
        raise ParameterError(f"need num_chars >= 1 and num_columns >= 1, got {num_chars}, {num_columns}")
    if not 0.0 <= jitter <= 1.0:
        raise ParameterError(f"jitter must be in [0, 1], got {jitter}")
    width, height = page_size
    margin = max(4, glyph_size // 4)
    col_gap = max(8, glyph_size // 4)
    row_gap = max(4, glyph_size // 8)
    jitter_px = jitter * (glyph_size * 7.0 / 32.0)  # spread < half glyph width
    rows_cap = (height - 2 * margin + row_gap) // (glyph_size + row_gap)
    need_w = 2 * margin + num_columns * glyph_size + (num_columns - 1) * col_gap + 2 * math.ceil(jitter_px)
    per_col = math.ceil(num_chars / num_columns)
    if rows_cap < 1 or per_col > rows_cap or need_w > width:
        raise LayoutError(
            f"{num_chars} chars in {num_columns} columns do not fit a {width}x{height} page"
        )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x9A6E])))
    if categories is None:
        categories = rng.integers(0, num_categories, size=num_chars).tolist()
    elif len(categories) != num_chars:
        raise ParameterError(f"got {len(categories)} categories for {num_chars} characters")

    # rightmost columns fill first; remainder spreads over the rightmost ones
    base, extra = divmod(num_chars, num_columns)
    col_sizes = [base + (1 if c < extra else 0) for c in range(num_columns)]
    image = _page_background(domain, (height, width), rng)
    chars: list[tuple[BBox, int]] = []
    pos = 0
    for c, size_c in enumerate(col_sizes):
        col_x = width - margin - glyph_size - c * (glyph_size + col_gap) - math.ceil(jitter_px)
        for r in range(size_c):
            cat = int(categories[pos])
            dx = rng.uniform(-jitter_px, jitter_px)
            dy = rng.uniform(-jitter_px, jitter_px) * 0.5
            x1 = int(round(col_x + dx))
            y1 = int(round(margin + r * (glyph_size + row_gap) + dy))
            x1 = max(0, min(x1, width - glyph_size))
            y1 = max(0, min(y1, height - glyph_size))
            glyph_seed = int(rng.integers(0, 2**31 - 1))
            glyph = render_glyph(cat, domain, noise_level, glyph_seed, size=glyph_size)
            image[y1 : y1 + glyph_size, x1 : x1 + glyph_size] = glyph.image
            chars.append((BBox(x1, y1, x1 + glyph_size, y1 + glyph_size), cat))
            pos += 1
    return PageSample(np.clip(image, 0.0, 1.0), chars, domain)
