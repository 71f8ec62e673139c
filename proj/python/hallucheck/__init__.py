"""Python bindings for the hallucheck C++ core.

Images are float32 arrays of shape (H, W, 3) with values in [0, 1].
"""

from ._core import (
    INTERM_LAYERS,
    LAST_LAYER,
    Backend,
    Error,
    ParseError,
    ProjectionBackend,
    ShapeMismatch,
    Unavailable,
    ValidationError,
    VitBackend,
    average_ranks,
    load_image,
    mse,
    parse_hs_response,
    psnr,
    resize_cubic,
    save_png,
    sharpness,
    spearman,
    ssd,
    ssim,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
