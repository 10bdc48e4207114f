"""laddermoe: a frozen-backbone glyph recognizer with ladder-side
mixture-of-experts adapters, permutation-trained sequence decoding,
column-wise page transcription, and long-tail evaluation tooling,
exercised end to end on a synthetic glyph corpus.

Subpackages of note:

    tensor      float64 tensors with tape-based reverse-mode autodiff
    encoder     ViT backbone + routed expert adapters with gated fusion
    decoder     permutation visibility masks and the sequence decoder
    training    Adam, backbone pretraining, the two-phase schedule
    syndata     procedural glyphs, page layout, filtering and splits
    corpus      on-disk corpus assembly (PNGs + JSONL manifests)
    transcribe  adaptive column grouping and page transcription
    metrics     accuracy family, Levenshtein CR/AR, AP50
    analysis    expert activation counting and CSV export
    cli         the `laddermoe` command
"""

__version__ = "0.1.0"
