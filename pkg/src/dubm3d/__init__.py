"""Block-matching denoising with a learnable collaborative filter, plus the
classic two-stage baseline, a whole-image U-Net, a low-dose CT simulator and
the small autodiff engine they are trained with."""

__version__ = "0.1.0"
