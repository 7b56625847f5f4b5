"""The three denoising methods behind one entry point.

``du-bm3d`` is ``aggregate(unet(gather(x, plan(x))), plan(x))`` with uniform
group weights; ``bm3d-classic`` swaps the network for transform shrinkage;
``unet-image`` runs the same network on the whole image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .aggregation import aggregate_tensor
from .classic import bm3d
from .imageio import Image
from .matching import MatchConfig, MatchPlan, gather_stacks, plan_matches
from .unet import Descriptor, ModelParams, check_params, forward_image_tensor, forward_stack, init_params

METHODS = ("bm3d-classic", "du-bm3d", "unet-image")
LEARNED = ("du-bm3d", "unet-image")


@dataclass
class Model:
    """A learnable method: mode, network descriptor, parameters, matching setup."""

    mode: str
    descriptor: Descriptor
    params: ModelParams
    match: MatchConfig = field(default_factory=MatchConfig)

    def __post_init__(self):
        if self.mode not in LEARNED:
            raise ValueError(f"unknown model mode {self.mode!r}")
        check_params(self.params, self.descriptor)

    @classmethod
    def create(cls, mode: str, seed: int = 0, match: MatchConfig = MatchConfig(), width1=16, width2=32) -> Model:
        if mode == "du-bm3d":
            desc = Descriptor(channels=match.group_size, patch=match.patch, width1=width1, width2=width2)
        else:
            desc = Descriptor(channels=1, patch=0, width1=width1, width2=width2)
        return cls(mode, desc, init_params(desc, seed), match)

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward_tensor(self, noisy: np.ndarray, plan: MatchPlan | None = None) -> T.Tensor:
        """Differentiable prediction for one image (records on the active tape)."""
        if self.mode == "unet-image":
            return reshape_image(forward_image_tensor(self.params, noisy))
        if plan is None:
            plan = plan_matches(noisy, self.match)
        stacks = forward_stack(self.params, gather_stacks(noisy, plan), self.descriptor)
        return aggregate_tensor(stacks, plan)

    def __call__(self, img) -> np.ndarray:
        x = np.asarray(getattr(img, "pixels", img), dtype=np.float32)
        return self.forward_tensor(x).data


def reshape_image(t: T.Tensor) -> T.Tensor:
    return T.reshape(t, t.shape[-2:])


def denoise_pipeline(img, method: str, model: Model | None = None, sigma: float | None = None) -> Image:
    x = np.asarray(getattr(img, "pixels", img), dtype=np.float32)
    if method == "bm3d-classic":
        out = bm3d(x, sigma=sigma)
    elif method in LEARNED:
        if model is None:
            raise ValueError(f"method {method!r} needs a trained checkpoint")
        if model.mode != method:
            raise ValueError(f"checkpoint holds a {model.mode!r} model, not {method!r}")
        out = model(x)
    else:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if not np.isfinite(out).all():
        raise FloatingPointError(f"{method} produced non-finite pixels")
    return Image(out, range=getattr(img, "range", (0.0, 1.0)))
