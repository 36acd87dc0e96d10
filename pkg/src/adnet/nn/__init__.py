from adnet.nn.blocks import (
    EGA,
    EGAB,
    ESAB,
    SGDB,
    SOBEL_BANK,
    Downsample,
    GatedFeedForward,
    Upsample,
    ega_forward,
    egab_forward,
    esab_forward,
    sgdb_forward,
)
from adnet.nn.module import Conv2d, LayerNorm2d, Module, parameter

__all__ = [
    "Conv2d", "Downsample", "EGA", "EGAB", "ESAB", "GatedFeedForward", "LayerNorm2d", "Module", "SGDB",
    "SOBEL_BANK", "Upsample", "ega_forward", "egab_forward", "esab_forward", "parameter", "sgdb_forward",
]
