"""Finite-difference audit of every parameter of a small seeded model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .block import BlockConfig
from .losses import LossWeights
from .network import ModelConfig, RFCNet
from .synthdata import SynthConfig, generate_tracklet
from .errors import NumericError
from .tensor import finite_diff_grad, max_relative_error, no_grad, relu_margin_probe

TOLERANCE = 1e-4
EPS = 1e-5
KINK_CLEARANCE = 1e-4


@dataclass
class GradcheckCase:
    model: RFCNet
    images: np.ndarray
    identities: np.ndarray
    keypoints: np.ndarray
    foreground: np.ndarray
    weights: LossWeights

    def loss(self):
        return self.model.loss(self.images, self.identities, self.keypoints, self.foreground,
                               self.weights).graph


def relu_clearance(case: GradcheckCase) -> float:
    """Smallest nonzero relu input over one forward pass of the case."""
    with no_grad(), relu_margin_probe() as margins:
        case.loss()
    return min(margins, default=np.inf)


def tiny_case(seed: int = 0, block: BlockConfig | None = None, frames: int = 2,
              channels: int = 8, weights: LossWeights | None = None,
              clearance: float = KINK_CLEARANCE, max_tries: int = 200) -> GradcheckCase:
    """Two identities x two tracklets of 32x16 images; one block after stage 1 (16x8 grid).

    Residual-branch scales and gate weights are moved away from their
    identity/kink initial values so every parameter receives gradient.
    Central differences straddling a relu kink are meaningless, so data
    seeds ``seed, seed + 1, ...`` are tried until every relu input clears
    zero by ``clearance``.
    """
    for attempt in range(max_tries):
        case = _build_case(seed + attempt, block, frames, channels, weights)
        if clearance <= 0 or relu_clearance(case) >= clearance:
            return case
    raise NumericError(f"no kink-free gradcheck case within {max_tries} seeds")


def _build_case(seed, block, frames, channels, weights) -> GradcheckCase:
    block = block or BlockConfig(arrangement="st", stages=(1,))
    synth = SynthConfig(num_identities=2, seed=seed, occlusion_prob=0.5)
    samples = [generate_tracklet(i, synth, tracklet=j, frames=frames) for i in range(2) for j in range(2)]
    config = ModelConfig(image_shape=(synth.height, synth.width, synth.channels), channels=(channels,),
                         num_identities=2, block=block)
    model = RFCNet(config, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for b in model.blocks.values():
        b.projection.gamma.data = rng.uniform(0.5, 1.5, b.projection.gamma.shape)
        b.projection.beta.data = rng.normal(0.0, 0.1, b.projection.beta.shape)
        if b.trfc is not None:
            b.trfc.weight_raw.data = rng.uniform(1e-3, 0.1, b.trfc.weight_raw.shape) * rng.choice(
                [1.0, -1.0], b.trfc.weight_raw.shape, p=[0.8, 0.2])
            b.trfc.bias.data = rng.normal(0.0, 0.1, b.trfc.bias.shape)
    return GradcheckCase(
        model=model,
        images=np.stack([s.images for s in samples]),
        identities=np.array([s.identity for s in samples]),
        keypoints=np.stack([s.keypoints for s in samples]),
        foreground=np.stack([s.foreground for s in samples]),
        weights=weights or LossWeights(),
    )


def check_parameters(case: GradcheckCase, eps: float = EPS, backward_hook=None) -> dict[str, float]:
    """Max relative error of reverse-mode vs central differences, per parameter name."""
    model = case.model
    model.zero_grad()
    case.loss().backward()
    if backward_hook is not None:
        backward_hook(model)
    errors = {}
    for p in model.parameters():
        analytic = p.grad.copy()
        numeric = finite_diff_grad(lambda _: case.loss(), p, eps)
        errors[p.name] = max_relative_error(analytic, numeric)
    return errors
