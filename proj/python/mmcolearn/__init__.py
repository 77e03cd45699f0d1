"""Python bindings for the mmcl multimodal co-learning core."""

from ._core import (
    Index,
    MmclError,
    Model,
    cohen_kappa,
    cosine_align,
    cross_entropy,
    l1_align,
    load_manifest,
    mean_average_precision,
    nt_xent,
    otsu_crop,
    run_cli,
    synthesize_notes,
    tokenize,
    train,
    write_demo_corpus,
)

__all__ = [
    "Index",
    "MmclError",
    "Model",
    "cohen_kappa",
    "cosine_align",
    "cross_entropy",
    "l1_align",
    "load_manifest",
    "mean_average_precision",
    "nt_xent",
    "otsu_crop",
    "run_cli",
    "synthesize_notes",
    "tokenize",
    "train",
    "write_demo_corpus",
]
