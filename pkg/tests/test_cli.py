import json
import os

import numpy as np
import pytest

from laddermoe import cli
from laddermoe.cli import UsageError, main, parse_and_validate


def tiny_config(tmp_path, **extra):
    cfg = {
        "out": str(tmp_path / "run"),
        "encoder": {"image_size": 16, "patch_size": 4, "embed_dim": 16, "depth": 2, "heads": 2,
                     "adapter_layers": [0, 1], "num_experts": 4, "top_k": 2, "expert_bottleneck": 4},
        "decoder": {"num_permutations": 3, "max_label_len": 2},
        "train": {"batch_size": 16, "plm_epochs": 1, "osf_epochs": 1, "pretrain_epochs": 3},
        "corpus": {"num_categories": 6, "total_crops": 120, "chars_per_page": 6, "page_columns": 2,
                    "page_width": 120, "page_height": 140, "glyph_size": 16, "min_count_threshold": 2},
    }
    cfg.update(extra)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


class TestParseAndValidate:
    def test_paper_scale_flags_accepted(self):
        cfg, args = parse_and_validate(["--experts", "36", "--top-k", "5", "synth"])
        assert cfg.encoder.num_experts == 36
        assert cfg.encoder.top_k == 5

    def test_top_k_zero_rejected(self):
        with pytest.raises(UsageError):
            parse_and_validate(["--top-k", "0", "synth"])

    def test_flag_beats_config_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"encoder": {"num_experts": 9}, "seed": 3}))
        cfg, _ = parse_and_validate(["--config", str(path), "--experts", "18", "synth"])
        assert cfg.encoder.num_experts == 18
        assert cfg.seed == 3  # file survives where no flag overrides

    def test_unknown_config_key_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"encoder": {"n_experts": 9}}))
        with pytest.raises(UsageError):
            parse_and_validate(["--config", str(path), "synth"])
        path.write_text(json.dumps({"optimizer": "adam"}))
        with pytest.raises(UsageError):
            parse_and_validate(["--config", str(path), "synth"])

    def test_adapter_layers_flag(self):
        cfg, _ = parse_and_validate(["--adapter-layers", "0,4,8,11", "synth"])
        assert cfg.encoder.adapter_layers == (0, 4, 8, 11)

    def test_paper_schedule_constants_accepted(self):
        cfg, _ = parse_and_validate(["--plm-epochs", "35", "--osf-epochs", "5",
                                     "--batch-size", "32", "--permutations", "12", "synth"])
        assert cfg.train.plm_epochs == 35 and cfg.train.osf_epochs == 5

    def test_env_var_out_root(self, monkeypatch):
        monkeypatch.setenv("LADDERMOE_OUT", "/tmp/somewhere")
        cfg, _ = parse_and_validate(["synth"])
        assert cfg.out == "/tmp/somewhere"

    def test_usage_error_exit_code(self, capsys):
        assert main(["--top-k", "0", "synth"]) == 2
        assert "usage error" in capsys.readouterr().err

    def test_unknown_subcommand_exit_code(self):
        with pytest.raises(SystemExit) as exc:
            main(["fly"])
        assert exc.value.code == 2


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth + pretrain + train once; several command tests share the artifacts."""
    tmp_path = tmp_path_factory.mktemp("cli")
    cfgfile = tiny_config(tmp_path)
    out = str(tmp_path / "run")
    data = os.path.join(out, "corpus")
    assert main(["--config", cfgfile, "synth"]) == 0
    assert main(["--config", cfgfile, "pretrain", "--data-dir", data]) == 0
    assert main(["--config", cfgfile, "train", "--data-dir", data,
                 "--backbone", os.path.join(out, "ckpt_pretrain.bin")]) == 0
    return cfgfile, out, data


class TestPipelineCommands:
    def test_synth_outputs(self, pipeline):
        _, out, data = pipeline
        assert os.path.exists(os.path.join(data, "corpus_meta.json"))
        assert os.path.exists(os.path.join(data, "manifest.jsonl"))
        assert os.path.exists(os.path.join(data, "boxes_gt.jsonl"))
        assert os.path.exists(os.path.join(out, "resolved_config.json"))
        assert os.path.exists(os.path.join(out, "inputs_synth.json"))

    def test_train_outputs(self, pipeline):
        _, out, _ = pipeline
        assert os.path.exists(os.path.join(out, "ckpt_plm.bin"))
        assert os.path.exists(os.path.join(out, "ckpt_final.bin"))
        stats = open(os.path.join(out, "train_stats.jsonl")).read().splitlines()
        assert json.loads(stats[0])["kind"] == "epoch-stats"
        assert len(stats) == 3  # header + 1 plm + 1 osf

    def test_eval_char_oracle_is_perfect(self, pipeline):
        cfgfile, out, data = pipeline
        assert main(["--config", cfgfile, "eval-char", "--data-dir", data,
                     "--ckpt", os.path.join(out, "ckpt_final.bin"), "--oracle"]) == 0
        report = json.load(open(os.path.join(out, "eval_char.json")))
        assert report["overall_acc"] == 1.0
        assert report["balanced_acc"] == 1.0

    def test_eval_char_model(self, pipeline):
        cfgfile, out, data = pipeline
        assert main(["--config", cfgfile, "eval-char", "--data-dir", data,
                     "--ckpt", os.path.join(out, "ckpt_final.bin")]) == 0
        report = json.load(open(os.path.join(out, "eval_char.json")))
        assert 0.0 <= report["overall_acc"] <= 1.0
        assert set(report["group_acc"]) == {"head", "mid", "tail"}

    def test_transcribe_and_eval_page(self, pipeline):
        cfgfile, out, data = pipeline
        ckpt = os.path.join(out, "ckpt_final.bin")
        assert main(["--config", cfgfile, "transcribe", "--data-dir", data, "--ckpt", ckpt]) == 0
        tr_path = os.path.join(out, "transcriptions.jsonl")
        lines = [json.loads(ln) for ln in open(tr_path).read().splitlines()]
        assert lines[0]["kind"] == "transcriptions"
        assert all("page_id" in rec and "flat_text" in rec for rec in lines[1:])
        assert main(["--config", cfgfile, "eval-page", "--data-dir", data,
                     "--transcriptions", tr_path]) == 0
        report = json.load(open(os.path.join(out, "eval_page.json")))
        for key in ("macro_cr", "macro_ar", "micro_cr", "micro_ar"):
            assert report[key] is not None

    def test_eval_page_with_scored_boxes_reports_ap50(self, pipeline, tmp_path):
        cfgfile, out, data = pipeline
        from laddermoe.corpus import read_box_file, write_box_file

        gt = read_box_file(os.path.join(data, "boxes_gt.jsonl"))
        scored = {
            pid: [{**{k: r[k] for k in ("x1", "y1", "x2", "y2")}, "score": 0.9} for r in recs]
            for pid, recs in gt.items()
        }
        det_path = str(tmp_path / "dets.jsonl")
        write_box_file(scored, det_path)
        assert main(["--config", cfgfile, "eval-page", "--data-dir", data,
                     "--transcriptions", os.path.join(out, "transcriptions.jsonl"),
                     "--boxes", det_path]) == 0
        report = json.load(open(os.path.join(out, "eval_page.json")))
        assert report["ap50"] == 1.0

    def test_analyze_experts(self, pipeline):
        cfgfile, out, data = pipeline
        assert main(["--config", cfgfile, "analyze-experts", "--data-dir", data,
                     "--ckpt", os.path.join(out, "ckpt_final.bin")]) == 0
        exp_dir = os.path.join(out, "experts")
        assert os.path.exists(os.path.join(exp_dir, "adapter0_counts.csv"))
        summary = json.load(open(os.path.join(exp_dir, "summary.json")))
        assert len(summary["adapters"]) == 2

    def test_report_determinism(self, pipeline, tmp_path):
        cfgfile, out, data = pipeline
        ckpt = os.path.join(out, "ckpt_final.bin")
        out2 = str(tmp_path / "again")
        assert main(["--config", cfgfile, "--out", out2, "eval-char",
                     "--data-dir", data, "--ckpt", ckpt]) == 0
        a = open(os.path.join(out, "eval_char.json")).read()
        b = open(os.path.join(out2, "eval_char.json")).read()
        assert a == b


class TestGradCheckCommand:
    def test_passes_on_tiny_model(self, tmp_path):
        out = str(tmp_path / "gc")
        assert main(["--out", out, "grad-check"]) == 0
        report = json.load(open(os.path.join(out, "gradcheck.json")))
        assert report["passed"] is True
        assert report["max_rel_error"] <= report["tol"]


class TestAblateCommand:
    def test_experts_axis_csv(self, tmp_path):
        cfgfile = tiny_config(tmp_path)
        out = str(tmp_path / "run")
        data = os.path.join(out, "corpus")
        assert main(["--config", cfgfile, "synth"]) == 0
        assert main(["--config", cfgfile, "ablate", "--data-dir", data,
                     "--axis", "experts", "--values", "0,4"]) == 0
        lines = open(os.path.join(out, "ablate_experts.csv")).read().splitlines()
        assert lines[0].startswith("# format_version:")
        assert lines[1].split(",")[0] == "axis"
        assert len(lines) == 4  # comment + header + 2 rows
        assert lines[2].startswith("experts,0,")
        assert lines[3].startswith("experts,4,")

    def test_bad_axis_value(self, tmp_path):
        cfgfile = tiny_config(tmp_path)
        out = str(tmp_path / "run")
        data = os.path.join(out, "corpus")
        assert main(["--config", cfgfile, "synth"]) == 0
        assert main(["--config", cfgfile, "ablate", "--data-dir", data,
                     "--axis", "top-k", "--values", "99"]) == 2
