"""Command-line entry point.

Subcommands: synth, pretrain, train, eval-char, transcribe, eval-page,
analyze-experts, grad-check, ablate. Configuration resolves with the
precedence CLI flag > config file > documented default; the fully resolved
configuration is echoed into the output directory, and every subcommand
writes a manifest of the input files it consumed (paths plus SHA-256).

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import analysis, corpus, metrics, training, transcribe
from .checkpoint import load_checkpoint, save_checkpoint
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .errors import LadderMoeError, ParameterError
from .geometry import BBox
from .model import Recognizer
from .tensor import finite_difference_check

log = logging.getLogger("laddermoe")

REPORT_VERSION = 1
ABLATION_AXES = ("experts", "top-k", "osf-epochs", "permutations")


class UsageError(Exception):
    """Bad flags or config values; maps to exit code 2."""


@dataclass
class RunConfig:
    seed: int = 0
    out: str = ""
    workers: int = 1
    lambda_factor: float = 0.5
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=lambda: DecoderConfig(vocab_size=0))
    train: training.TrainConfig = field(default_factory=training.TrainConfig)
    corpus: corpus.CorpusConfig = field(default_factory=corpus.CorpusConfig)

    def validate(self) -> None:
        if self.seed < 0:
            raise UsageError("seed: must be >= 0")
        if self.workers < 1:
            raise UsageError("workers: must be >= 1")
        if not 0 < self.lambda_factor:
            raise UsageError("lambda: must be > 0")
        try:
            self.encoder.validate()
            # vocab_size is derived from the corpus later; validate the rest
            if self.decoder.num_permutations < 1:
                raise ParameterError("num_permutations must be >= 1")
            if self.decoder.max_label_len < 1:
                raise ParameterError("max_label_len must be >= 1")
            self.train.validate()
            self.corpus.validate()
        except ParameterError as exc:
            raise UsageError(str(exc)) from exc

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out": self.out,
            "workers": self.workers,
            "lambda": self.lambda_factor,
            "encoder": dataclasses.asdict(self.encoder),
            "decoder": dataclasses.asdict(self.decoder),
            "train": dataclasses.asdict(self.train),
            "corpus": dataclasses.asdict(self.corpus),
        }


def _apply_section(obj, values: dict, section: str) -> None:
    fields = {f.name for f in dataclasses.fields(obj)}
    for key, value in values.items():
        if key not in fields:
            raise UsageError(f"unknown key {section}.{key}")
        if key == "adapter_layers":
            value = tuple(value)
        setattr(obj, key, value)


def parse_and_validate(argv) -> tuple[RunConfig, argparse.Namespace]:
    """Resolve the run configuration: CLI flag > config file > default."""
    parser = _build_parser()
    args = parser.parse_args(argv)
    cfg = RunConfig()
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from exc
        for key, value in file_cfg.items():
            if key == "seed":
                cfg.seed = int(value)
            elif key == "out":
                cfg.out = str(value)
            elif key == "workers":
                cfg.workers = int(value)
            elif key == "lambda":
                cfg.lambda_factor = float(value)
            elif key == "encoder":
                _apply_section(cfg.encoder, value, "encoder")
            elif key == "decoder":
                _apply_section(cfg.decoder, value, "decoder")
            elif key == "train":
                _apply_section(cfg.train, value, "train")
            elif key == "corpus":
                _apply_section(cfg.corpus, value, "corpus")
            else:
                raise UsageError(f"unknown key {key} in config file")

    overrides = {
        "seed": ("seed", int),
        "out": ("out", str),
        "workers": ("workers", int),
    }
    for flag, (attr, conv) in overrides.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, attr, conv(value))
    if args.lambda_factor is not None:
        cfg.lambda_factor = args.lambda_factor
    if args.experts is not None:
        cfg.encoder.num_experts = args.experts
    if args.top_k is not None:
        cfg.encoder.top_k = args.top_k
    if args.adapter_layers is not None:
        try:
            cfg.encoder.adapter_layers = tuple(int(v) for v in args.adapter_layers.split(",") if v != "")
        except ValueError as exc:
            raise UsageError(f"adapter-layers: expected comma-separated integers, got {args.adapter_layers!r}") from exc
    if args.permutations is not None:
        cfg.decoder.num_permutations = args.permutations
    if args.plm_epochs is not None:
        cfg.train.plm_epochs = args.plm_epochs
    if args.osf_epochs is not None:
        cfg.train.osf_epochs = args.osf_epochs
    if args.batch_size is not None:
        cfg.train.batch_size = args.batch_size
    if not cfg.out:
        cfg.out = os.environ.get("LADDERMOE_OUT", "out")
    cfg.train.seed = cfg.seed
    cfg.validate()
    return cfg, args


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="laddermoe",
        description="Synthesize a glyph corpus, train and evaluate the recognizer, "
        "transcribe pages, and analyze expert routing.",
    )
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="master seed (default 0)")
    parser.add_argument("--out", help="output directory (default $LADDERMOE_OUT or ./out)")
    parser.add_argument("--experts", type=int, help="experts per adapter (0 disables the adapters)")
    parser.add_argument("--top-k", dest="top_k", type=int, help="experts activated per sample")
    parser.add_argument("--adapter-layers", dest="adapter_layers", help="comma-separated encoder layer indices")
    parser.add_argument("--permutations", type=int, help="permutation count for masked training")
    parser.add_argument("--plm-epochs", dest="plm_epochs", type=int)
    parser.add_argument("--osf-epochs", dest="osf_epochs", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--lambda", dest="lambda_factor", type=float,
                        help="column grouping width factor (default 0.5)")
    parser.add_argument("--workers", type=int, help="parallel workers for generation/evaluation")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="generate the synthetic corpus")
    p = sub.add_parser("pretrain", help="pretrain and freeze the backbone")
    p.add_argument("--data-dir", required=True)
    p = sub.add_parser("train", help="run the permutation + ordered schedule")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--backbone", required=True, help="pretrain checkpoint")
    p.add_argument("--resume", help="schedule checkpoint to continue from")
    p = sub.add_parser("eval-char", help="single-character test report")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--oracle", action="store_true", help="score ground-truth labels as predictions")
    p = sub.add_parser("transcribe", help="transcribe pages from box files")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--boxes", help="box file (default: corpus ground truth)")
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p = sub.add_parser("eval-page", help="page-level CR/AR (and AP50 for scored boxes)")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--transcriptions", required=True)
    p.add_argument("--boxes", help="scored detection boxes for AP50")
    p = sub.add_parser("analyze-experts", help="expert activation heatmaps and summary")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    sub.add_parser("grad-check", help="finite-difference gradient audit on a tiny model")
    p = sub.add_parser("ablate", help="sweep one configuration axis")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    return parser


# ---------------------------------------------------------------------------
# provenance and report helpers


class Provenance:
    """Collects consumed input files and writes the per-run manifest."""

    def __init__(self):
        self.inputs: dict[str, str] = {}

    def record(self, path) -> str:
        path = str(path)
        if path not in self.inputs and os.path.isfile(path):
            digest = hashlib.sha256()
            with open(path, "rb") as fh:
                for chunk in iter(lambda: fh.read(65536), b""):
                    digest.update(chunk)
            self.inputs[path] = digest.hexdigest()
        return path

    def write(self, out_dir, command: str) -> None:
        payload = {
            "format_version": REPORT_VERSION,
            "command": command,
            "inputs": [{"path": p, "sha256": h} for p, h in sorted(self.inputs.items())],
        }
        with open(os.path.join(out_dir, f"inputs_{command.replace('-', '_')}.json"), "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)


def _write_json(payload: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _echo_config(cfg: RunConfig, command: str) -> None:
    os.makedirs(cfg.out, exist_ok=True)
    _write_json(
        {"format_version": REPORT_VERSION, "command": command, **cfg.to_dict()},
        os.path.join(cfg.out, "resolved_config.json"),
    )


def _token_maps(meta: dict) -> tuple[dict[int, int], list[int]]:
    """Corpus categories are remapped to dense token ids in retained order."""
    retained = [int(c) for c in meta["retained_categories"]]
    return {c: i for i, c in enumerate(retained)}, retained


def _load_crops_tokens(data_dir, split, cat_to_tok, prov: Provenance):
    prov.record(os.path.join(data_dir, "manifest.jsonl"))
    crops = corpus.load_crops(data_dir, None if split == "all" else split)
    tokens = np.array([cat_to_tok[int(c)] for c in crops.categories], dtype=np.intp)
    return crops, training.LabeledCrops.from_single_labels(crops.images, tokens)


def _model_from_ckpt(path, prov: Provenance) -> tuple[Recognizer, object]:
    prov.record(path)
    ckpt = load_checkpoint(path)
    model = Recognizer.init(ckpt.enc_cfg, ckpt.dec_cfg, seed=ckpt.train_cfg.seed)
    model.load_arrays(ckpt.params)
    return model, ckpt


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(cfg: RunConfig, args, prov: Provenance) -> int:
    if args.config:
        prov.record(args.config)
    corpus_dir = os.path.join(cfg.out, "corpus")
    meta = corpus.build_corpus(cfg.corpus, cfg.seed, corpus_dir)
    log.info(
        "corpus: %d pages, %d crops, %d categories retained",
        meta["num_pages"], meta["num_crops"], len(meta["retained_categories"]),
    )
    return 0


def _cmd_pretrain(cfg: RunConfig, args, prov: Provenance) -> int:
    meta = corpus.load_meta(args.data_dir)
    prov.record(os.path.join(args.data_dir, "corpus_meta.json"))
    cat_to_tok, retained = _token_maps(meta)
    cfg.decoder.vocab_size = len(retained) + 3
    _, train_set = _load_crops_tokens(args.data_dir, "train", cat_to_tok, prov)
    model = Recognizer.init(cfg.encoder, cfg.decoder, seed=cfg.seed)
    ckpt, stats = training.pretrain_backbone(train_set, model, cfg.train, num_classes=len(retained))
    path = os.path.join(cfg.out, "ckpt_pretrain.bin")
    save_checkpoint(ckpt, path)
    _write_stats(stats, os.path.join(cfg.out, "pretrain_stats.jsonl"))
    log.info("pretrain accuracy %.4f -> %s", ckpt.extra["train_accuracy"], path)
    return 0


def _write_stats(stats, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format_version": REPORT_VERSION, "kind": "epoch-stats"}) + "\n")
        for st in stats:
            fh.write(json.dumps(dataclasses.asdict(st), sort_keys=True) + "\n")


def _cmd_train(cfg: RunConfig, args, prov: Provenance) -> int:
    meta = corpus.load_meta(args.data_dir)
    prov.record(os.path.join(args.data_dir, "corpus_meta.json"))
    cat_to_tok, retained = _token_maps(meta)
    backbone = load_checkpoint(prov.record(args.backbone))
    cfg.decoder.vocab_size = len(retained) + 3
    _, train_set = _load_crops_tokens(args.data_dir, "train", cat_to_tok, prov)
    _, val_set = _load_crops_tokens(args.data_dir, "val", cat_to_tok, prov)
    model = Recognizer.init(cfg.encoder, cfg.decoder, seed=cfg.seed)
    model.load_arrays(backbone.params, prefix="backbone.")
    resume = load_checkpoint(prov.record(args.resume)) if args.resume else None
    final, stats = training.run_schedule(
        model, train_set, cfg.train, val_data=val_set, ckpt_dir=cfg.out, resume=resume
    )
    _write_stats(stats, os.path.join(cfg.out, "train_stats.jsonl"))
    log.info("schedule done: ordered val loss %.4f -> %s",
             final.extra.get("ordered_val_loss_after_osf") or float("nan"),
             os.path.join(cfg.out, "ckpt_final.bin"))
    return 0


def _groups_in_tokens(meta: dict, cat_to_tok: dict[int, int]) -> dict[str, list[int]]:
    return {
        name: [cat_to_tok[int(c)] for c in meta[name]]
        for name in ("head", "mid", "tail")
    }


def _cmd_eval_char(cfg: RunConfig, args, prov: Provenance) -> int:
    meta = corpus.load_meta(args.data_dir)
    prov.record(os.path.join(args.data_dir, "corpus_meta.json"))
    cat_to_tok, _ = _token_maps(meta)
    crops, test_set = _load_crops_tokens(args.data_dir, "test", cat_to_tok, prov)
    labels = test_set.labels[:, 0]
    if args.oracle:
        preds = labels.copy()
    else:
        model, _ = _model_from_ckpt(args.ckpt, prov)
        preds = model.predict_categories(crops.images, batch_size=cfg.train.batch_size)
    report = metrics.char_eval_report(
        preds, labels, groups=_groups_in_tokens(meta, cat_to_tok), domains=crops.domains
    )
    _write_json(report.to_dict(), os.path.join(cfg.out, "eval_char.json"))
    with open(os.path.join(cfg.out, "eval_char.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_table() + "\n")
    print(report.to_table())
    return 0


def _pages_for_split(data_dir, split, prov: Provenance):
    prov.record(os.path.join(data_dir, "manifest.jsonl"))
    return corpus.load_pages(data_dir, None if split == "all" else split)


def _cmd_transcribe(cfg: RunConfig, args, prov: Provenance) -> int:
    meta = corpus.load_meta(args.data_dir)
    prov.record(os.path.join(args.data_dir, "corpus_meta.json"))
    cat_to_tok, retained = _token_maps(meta)
    model, _ = _model_from_ckpt(args.ckpt, prov)
    pages = _pages_for_split(args.data_dir, args.split, prov)
    box_path = args.boxes or os.path.join(args.data_dir, "boxes_gt.jsonl")
    box_records = corpus.read_box_file(prov.record(box_path))
    out_path = os.path.join(cfg.out, "transcriptions.jsonl")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format_version": REPORT_VERSION, "kind": "transcriptions"}) + "\n")
        for page in pages:
            recs = box_records.get(page.page_id, [])
            boxes = [BBox(r["x1"], r["y1"], r["x2"], r["y2"]) for r in recs]
            result = transcribe.transcribe_page(
                page.image, boxes, model, factor=cfg.lambda_factor, page_id=page.page_id,
                batch_size=cfg.train.batch_size,
            )
            # predictions are dense token ids; report corpus category ids
            record = result.to_record()
            record["columns"] = [[retained[t] if 0 <= t < len(retained) else -1 for t in col]
                                 for col in record["columns"]]
            record["flat_text"] = [retained[t] if 0 <= t < len(retained) else -1 for t in record["flat_text"]]
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    log.info("wrote %s for %d pages", out_path, len(pages))
    return 0


def _cmd_eval_page(cfg: RunConfig, args, prov: Provenance) -> int:
    prov.record(os.path.join(args.data_dir, "manifest.jsonl"))
    with open(prov.record(args.transcriptions), encoding="utf-8") as fh:
        lines = [json.loads(ln) for ln in fh.read().splitlines() if ln.strip()]
    if not lines or lines[0].get("kind") != "transcriptions":
        raise LadderMoeError(f"{args.transcriptions}: not a transcription file")
    hyp_by_page = {rec["page_id"]: rec["flat_text"] for rec in lines[1:]}
    pages = {p.page_id: p for p in corpus.load_pages(args.data_dir)}
    refs, hyps = [], []
    for page_id in sorted(hyp_by_page):
        if page_id not in pages:
            raise LadderMoeError(f"transcribed page {page_id} missing from corpus")
        refs.append(pages[page_id].categories)
        hyps.append(hyp_by_page[page_id])
    detections = ground_truth = None
    if args.boxes:
        det_records = corpus.read_box_file(prov.record(args.boxes))
        if any("score" in r for recs in det_records.values() for r in recs):
            detections = {
                pid: [(BBox(r["x1"], r["y1"], r["x2"], r["y2"]), float(r.get("score", 1.0))) for r in recs]
                for pid, recs in det_records.items()
                if pid in hyp_by_page
            }
            ground_truth = {pid: pages[pid].boxes for pid in hyp_by_page}
    report = metrics.page_eval_report(refs, hyps, detections, ground_truth)
    _write_json(report.to_dict(), os.path.join(cfg.out, "eval_page.json"))
    with open(os.path.join(cfg.out, "eval_page.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_table() + "\n")
    print(report.to_table())
    return 0


def _cmd_analyze_experts(cfg: RunConfig, args, prov: Provenance) -> int:
    meta = corpus.load_meta(args.data_dir)
    prov.record(os.path.join(args.data_dir, "corpus_meta.json"))
    cat_to_tok, retained = _token_maps(meta)
    model, _ = _model_from_ckpt(args.ckpt, prov)
    crops, test_set = _load_crops_tokens(args.data_dir, args.split, cat_to_tok, prov)
    mats = analysis.record_activations(
        model, crops.images, test_set.labels[:, 0], num_categories=len(retained),
        batch_size=cfg.train.batch_size,
    )
    out_dir = os.path.join(cfg.out, "experts")
    paths = analysis.export_heatmap_csv(mats, out_dir)
    summary = analysis.expert_utilization_summary(mats)
    _write_json({"format_version": REPORT_VERSION, **summary}, os.path.join(out_dir, "summary.json"))
    log.info("wrote %d CSVs under %s", len(paths), out_dir)
    return 0


def _cmd_grad_check(cfg: RunConfig, args, prov: Provenance) -> int:
    from .decoder import make_sequential_mask
    from .training import freeze_partition

    enc_cfg = EncoderConfig(
        image_size=8, patch_size=4, embed_dim=8, depth=2, heads=2,
        adapter_layers=(0, 1), num_experts=4, top_k=2, expert_bottleneck=3, mlp_ratio=2.0,
    )
    dec_cfg = DecoderConfig(num_permutations=3, max_label_len=3, vocab_size=4 + 3)
    model = Recognizer.init(enc_cfg, dec_cfg, seed=cfg.seed)
    _, trainable = freeze_partition(model)
    rng = np.random.default_rng(cfg.seed + 1)
    # move off the zero-init point: gradients there are degenerately tiny
    # and drown in float64 cancellation noise of the difference quotient
    for n in sorted(trainable):
        t = model.params[n]
        t.array = t.array + rng.normal(0, 0.05, size=t.array.shape)
    images = rng.random((2, 8, 8))
    labels = np.array([[0, 2, 1], [3, 1, 2]], dtype=np.intp)
    lengths = np.array([3, 3], dtype=np.intp)
    mask = make_sequential_mask(3)

    def loss_fn():
        from .decoder import sequence_loss

        feats, _ = model.encode(images)
        logits = model.decode_train(feats, labels, mask)
        return sequence_loss(logits, labels, lengths, dec_cfg)

    params = {n: model.params[n] for n in sorted(trainable)}
    report = finite_difference_check(loss_fn, params, eps=1e-4, tol=1e-4)
    payload = {
        "format_version": REPORT_VERSION,
        "eps": report.eps,
        "tol": report.tol,
        "passed": report.passed,
        "max_rel_error": report.max_rel_error,
        "params": {p.name: p.max_rel_error for p in report.params},
    }
    _write_json(payload, os.path.join(cfg.out, "gradcheck.json"))
    print(report.summary())
    return 0 if report.passed else 1


def _cmd_ablate(cfg: RunConfig, args, prov: Provenance) -> int:
    try:
        values = [int(v) for v in args.values.split(",") if v != ""]
    except ValueError as exc:
        raise UsageError(f"values: expected comma-separated integers, got {args.values!r}") from exc
    if not values:
        raise UsageError("values: need at least one")
    meta = corpus.load_meta(args.data_dir)
    prov.record(os.path.join(args.data_dir, "corpus_meta.json"))
    cat_to_tok, retained = _token_maps(meta)
    cfg.decoder.vocab_size = len(retained) + 3
    crops_train, train_set = _load_crops_tokens(args.data_dir, "train", cat_to_tok, prov)
    _, val_set = _load_crops_tokens(args.data_dir, "val", cat_to_tok, prov)
    crops_test, test_set = _load_crops_tokens(args.data_dir, "test", cat_to_tok, prov)

    # the backbone never depends on the swept axis; pretrain once and reuse
    base_model = Recognizer.init(cfg.encoder, cfg.decoder, seed=cfg.seed)
    backbone_ckpt, _ = training.pretrain_backbone(
        train_set, base_model, cfg.train, num_classes=len(retained)
    )
    rows = []
    for value in values:
        enc = dataclasses.replace(cfg.encoder)
        dec = dataclasses.replace(cfg.decoder)
        train_cfg = dataclasses.replace(cfg.train)
        if args.axis == "experts":
            enc.num_experts = value
            if value:
                enc.top_k = min(enc.top_k, value)
        elif args.axis == "top-k":
            enc.top_k = value
        elif args.axis == "osf-epochs":
            train_cfg.osf_epochs = value
        else:
            dec.num_permutations = value
        try:
            enc.validate()
        except ParameterError as exc:
            raise UsageError(f"axis value {value}: {exc}") from exc
        model = Recognizer.init(enc, dec, seed=cfg.seed)
        model.load_arrays(backbone_ckpt.params, prefix="backbone.")
        training.run_schedule(model, train_set, train_cfg, val_data=val_set)
        preds = model.predict_categories(crops_test.images, batch_size=train_cfg.batch_size)
        report = metrics.char_eval_report(
            preds, test_set.labels[:, 0],
            groups=_groups_in_tokens(meta, cat_to_tok), domains=crops_test.domains,
        )
        rows.append((value, report))
        log.info("ablate %s=%d: overall %.4f balanced %.4f",
                 args.axis, value, report.overall_acc, report.balanced_acc)

    path = os.path.join(cfg.out, f"ablate_{args.axis.replace('-', '_')}.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# format_version: {REPORT_VERSION}\n")
        fh.write("axis,value,overall_acc,balanced_acc,head_acc,mid_acc,tail_acc\n")
        for value, rep in rows:
            fh.write(
                f"{args.axis},{value},{rep.overall_acc:.6f},{rep.balanced_acc:.6f},"
                f"{rep.group_acc.get('head', float('nan')):.6f},"
                f"{rep.group_acc.get('mid', float('nan')):.6f},"
                f"{rep.group_acc.get('tail', float('nan')):.6f}\n"
            )
    log.info("wrote %s", path)
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "pretrain": _cmd_pretrain,
    "train": _cmd_train,
    "eval-char": _cmd_eval_char,
    "transcribe": _cmd_transcribe,
    "eval-page": _cmd_eval_page,
    "analyze-experts": _cmd_analyze_experts,
    "grad-check": _cmd_grad_check,
    "ablate": _cmd_ablate,
}


def dispatch(cfg: RunConfig, args) -> int:
    """Run one subcommand; returns its exit code."""
    _echo_config(cfg, args.command)
    prov = Provenance()
    if args.config:
        prov.record(args.config)
    code = _COMMANDS[args.command](cfg, args, prov)
    prov.write(cfg.out, args.command)
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, args = parse_and_validate(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    try:
        return dispatch(cfg, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except LadderMoeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
