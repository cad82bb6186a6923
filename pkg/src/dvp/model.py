"""The full autoencoder: perception -> program -> renderer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dsl import EvalTrace, FunctionLibrary, LEARNABLE, Program, check_or_raise, eval_program, load_program
from .nn import Module
from .perception import Perception, perceive
from .renderer import RasterSettings, render, render_mask


@dataclass
class Output:
    recon: T.Tensor  # [B, 3, H, W]
    scene: object
    trace: EvalTrace
    latent: T.Tensor


class DVPModel(Module):
    def __init__(self, program: Program | str = "dvp-d", seed=0, channels_scale=1.0, image_size=64,
                 latent_dim=256, order=8, n_prototypes=8, raster: RasterSettings | None = None,
                 proto_jitter=0.1):
        if isinstance(program, str):
            program = load_program(program)
        self.program = check_or_raise(program)
        rng = np.random.default_rng(seed)
        self.perception = Perception.from_config(rng, channels_scale, image_size, latent_dim)
        names = [f for f in self.program.functions() if f in LEARNABLE]
        self.dsl = FunctionLibrary(rng, names, latent_dim, order, n_prototypes, proto_jitter)
        self.raster = raster or RasterSettings(height=image_size, width=image_size)
        self.config = dict(channels_scale=channels_scale, image_size=image_size, latent_dim=latent_dim,
                           order=order, n_prototypes=n_prototypes, seed=seed)

    @property
    def uses_prototypes(self):
        return self.dsl.has("Prototype")

    def interpret(self, images, tau=1.0, hard=False):
        """Latent and scene for a batch of images ``[B, 3, H, W]`` in [0, 1]."""
        z = perceive(self.perception, images)
        trace = EvalTrace()
        scene = eval_program(self.program, z, self.dsl, tau=tau, hard=hard, trace=trace)
        return z, scene, trace

    def __call__(self, images, tau=1.0, hard=False):
        z, scene, trace = self.interpret(images, tau, hard)
        return Output(render(scene, self.raster), scene, trace, z)

    def predict(self, images, batch_size=128, tau=1.0):
        """Eval-mode reconstructions, masks, colours and prototype weights as numpy arrays."""
        was = self.training
        self.eval()
        recon, masks, obj, bg, weights, logits = [], [], [], [], [], []
        try:
            with T.no_grad():
                for i in range(0, len(images), batch_size):
                    x = T.Tensor(images[i:i + batch_size])
                    out = self(x, tau=tau)
                    recon.append(out.recon.data)
                    masks.append(render_mask(out.scene, self.raster))
                    obj.append(out.scene.obj.data)
                    bg.append(out.scene.bg.data)
                    if out.trace.prototype_weights is not None:
                        weights.append(out.trace.prototype_weights.data)
                        logits.append(out.trace.prototype_logits.data)
        finally:
            self.train(was)
        cat = lambda xs: np.concatenate(xs) if xs else None
        return dict(recon=cat(recon), mask=cat(masks), obj=cat(obj), bg=cat(bg),
                    weights=cat(weights), logits=cat(logits))
