"""DSL value types."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from ..tensor import Tensor


class DslType(enum.Enum):
    Latent = "Latent"
    Double = "Double"
    Double2 = "(Double, Double)"
    Appearance = "Appearance"
    Shape = "Shape"
    Scene = "Scene"

    def __str__(self):
        return self.value


@dataclass
class Scene:
    """Batched scene: shape ``[B, 4, N]`` EFD coefficients, colours ``[B, 3]``."""

    shape: Tensor
    obj: Tensor
    bg: Tensor

    def __len__(self):
        return self.shape.shape[0]

    def __getitem__(self, i):
        from .. import tensor as T

        sl = slice(i, i + 1) if isinstance(i, int) else i
        return Scene(T.getitem(self.shape, sl), T.getitem(self.obj, sl), T.getitem(self.bg, sl))


def runtime_type(value) -> DslType:
    """Infer the DSL type of a batched runtime value (used by soundness checks)."""
    if isinstance(value, Scene):
        return DslType.Scene
    if isinstance(value, tuple) and len(value) == 2 and isinstance(value[0], Tensor):
        # Prototype returns (shape, weights)
        return runtime_type(value[0])
    if not isinstance(value, Tensor):
        raise TypeError(f"not a DSL value: {type(value).__name__}")
    shp = value.shape[1:]
    if len(shp) == 2 and shp[0] == 4:
        return DslType.Shape
    if shp == (1,):
        return DslType.Double
    if shp == (2,):
        return DslType.Double2
    if shp == (3,):
        return DslType.Appearance
    return DslType.Latent
