"""Small learned lossy codec used as a defense."""

from .codec import (
    CodecTrainConfig,
    LearnedCodec,
    RateModelError,
    build_codec,
    codec_forward,
    codec_rate,
    latents,
    pmf,
    reconstruction_mse,
    train_codec,
)

__all__ = [name for name in dir() if not name.startswith("_")]
