"""Python access to the musicssl core: synthesis, features, metrics, encoder."""

from ._core import (
    DataError,
    UsageError,
    average_precision_macro,
    beat_f_measure,
    canonical_config,
    chroma,
    click_track,
    config_hash,
    dbn_decode,
    encode,
    key_score,
    mfcc,
    pitch_clip,
    roc_auc_macro,
)

__all__ = [
    "DataError",
    "UsageError",
    "average_precision_macro",
    "beat_f_measure",
    "canonical_config",
    "chroma",
    "click_track",
    "config_hash",
    "dbn_decode",
    "encode",
    "key_score",
    "mfcc",
    "pitch_clip",
    "roc_auc_macro",
]
