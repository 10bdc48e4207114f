import json
import os

import numpy as np
import pytest

from laddermoe import corpus as C
from laddermoe.errors import FormatError
from laddermoe.geometry import BBox


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus") / "c"
    cfg = C.CorpusConfig(
        num_categories=8, total_crops=160, chars_per_page=6, page_columns=2,
        page_width=120, page_height=160, glyph_size=32, min_count_threshold=2,
        noise_level=0.2,
    )
    meta = C.build_corpus(cfg, seed=11, out_dir=out)
    return out, meta


class TestBuildCorpus:
    def test_meta_contents(self, built):
        out, meta = built
        assert meta["num_crops"] == sum(meta["counts"].values())
        assert set(meta["head"]) | set(meta["mid"]) | set(meta["tail"]) == set(
            meta["retained_categories"]
        )
        assert os.path.exists(out / "corpus_meta.json")

    def test_all_files_exist(self, built):
        out, _ = built
        for rec in C.read_manifest(out / "manifest.jsonl"):
            assert os.path.exists(out / rec["path"]), rec["path"]
            assert rec["split"] in ("train", "val", "test")
            assert rec["domain"] in ("color", "rubbing", "tracing")

    def test_crop_matches_page_slice(self, built):
        out, _ = built
        pages = {p.page_id: p for p in C.load_pages(out)}
        crops = [r for r in C.read_manifest(out / "manifest.jsonl") if r["kind"] == "crop"]
        for rec in crops[:12]:
            page = pages[rec["page_id"]]
            x1, y1, x2, y2 = (int(v) for v in rec["box"])
            crop = C.load_png(out / rec["path"])
            np.testing.assert_array_equal(crop, page.image[y1:y2, x1:x2])

    def test_split_loading_partition(self, built):
        out, meta = built
        sizes = {s: len(C.load_crops(out, s).ids) for s in ("train", "val", "test")}
        assert sum(sizes.values()) == meta["num_crops"]
        assert sizes["train"] >= sizes["val"]

    def test_page_reading_order_matches_boxes(self, built):
        out, _ = built
        from laddermoe.transcribe import group_columns, serialize_reading_order

        for page in C.load_pages(out)[:10]:
            grouping = group_columns(page.boxes, payloads=page.categories)
            assert serialize_reading_order(grouping) == page.categories

    def test_deterministic_rebuild(self, built, tmp_path):
        out, meta = built
        cfg = C.CorpusConfig(
            num_categories=8, total_crops=160, chars_per_page=6, page_columns=2,
            page_width=120, page_height=160, glyph_size=32, min_count_threshold=2,
            noise_level=0.2,
        )
        meta2 = C.build_corpus(cfg, seed=11, out_dir=tmp_path / "again")
        assert meta == meta2
        assert (tmp_path / "again" / "manifest.jsonl").read_bytes() == (out / "manifest.jsonl").read_bytes()
        a = C.load_png(out / "pages" / "page_00000.png")
        b = C.load_png(tmp_path / "again" / "pages" / "page_00000.png")
        np.testing.assert_array_equal(a, b)


class TestPngRoundTrip:
    def test_quantized_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.random((16, 16))
        path = tmp_path / "x.png"
        C.save_png(img, path)
        loaded = C.load_png(path)
        assert np.abs(loaded - img).max() <= 0.5 / 255 + 1e-9
        C.save_png(loaded, tmp_path / "y.png")
        np.testing.assert_array_equal(C.load_png(tmp_path / "y.png"), loaded)


class TestManifestFormat:
    def test_version_header_required(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps({"format_version": 999}) + "\n")
        with pytest.raises(FormatError):
            C.read_manifest(path)

    def test_round_trip(self, tmp_path):
        records = [{"id": "a", "kind": "crop", "path": "x.png", "domain": "color",
                    "category": 3, "split": "train"}]
        path = tmp_path / "m.jsonl"
        C.write_manifest(records, path)
        assert C.read_manifest(path) == records


class TestBoxFile:
    def test_round_trip(self, tmp_path):
        pages = {
            "p0": [{"x1": 1, "y1": 2, "x2": 11, "y2": 12, "category": 4}],
            "p1": [{"x1": 0, "y1": 0, "x2": 5, "y2": 5, "score": 0.75}],
        }
        path = tmp_path / "boxes.jsonl"
        C.write_box_file(pages, path)
        loaded = C.read_box_file(path)
        assert loaded["p0"][0]["category"] == 4
        assert loaded["p1"][0]["score"] == 0.75

    def test_missing_field_rejected(self, tmp_path):
        path = tmp_path / "boxes.jsonl"
        path.write_text(
            json.dumps({"format_version": 1, "kind": "boxes"}) + "\n"
            + json.dumps({"page_id": "p", "x1": 0, "y1": 0, "x2": 5}) + "\n"
        )
        with pytest.raises(FormatError):
            C.read_box_file(path)

    def test_wrong_kind_rejected(self, tmp_path):
        path = tmp_path / "boxes.jsonl"
        path.write_text(json.dumps({"format_version": 1, "kind": "dataset-manifest"}) + "\n")
        with pytest.raises(FormatError):
            C.read_box_file(path)
