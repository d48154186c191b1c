"""JPEG as a defense: differentiable and bit-exact round trips plus a baseline bitstream."""

from .bitstream import bpp, decode_jpeg, encode_jpeg, jpeg_bitstream_size
from .codec import JpegConfig, jpeg_forward
from .tables import PAPER_QUALITIES, quant_table, quality_scale

__all__ = [
    "JpegConfig",
    "jpeg_forward",
    "encode_jpeg",
    "decode_jpeg",
    "jpeg_bitstream_size",
    "bpp",
    "quant_table",
    "quality_scale",
    "PAPER_QUALITIES",
]
