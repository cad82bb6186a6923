"""Differentiable evaluation of type-checked programs."""

from __future__ import annotations

from dataclasses import dataclass, field

from .. import tensor as T
from . import functions as F
from .parser import LEARNABLE, Call, Program, Var
from .types import Scene


class MissingParameters(KeyError):
    pass


@dataclass
class EvalTrace:
    """Per-call outputs of learnable functions, in evaluation order."""

    calls: list = field(default_factory=list)

    def outputs(self, fn):
        return [out for name, out in self.calls if name == fn]

    @property
    def prototype_weights(self):
        w = self.outputs("Prototype")
        return w[0][1] if w else None

    @property
    def prototype_logits(self):
        w = self.outputs("Prototype")
        return w[0][2] if w else None

    def base_shapes(self):
        """Shapes emitted by DescribeShape / Prototype before any transform."""
        out = list(self.outputs("DescribeShape"))
        out += [s for s, _, _ in self.outputs("Prototype")]
        return out


def eval_program(p: Program, z, params: F.FunctionLibrary, tau=1.0, hard=False, trace: EvalTrace | None = None):
    """Evaluate ``p`` bottom-up on latent batch ``z``; every AST node runs once."""
    z = T.as_tensor(z)
    for fn in p.functions():
        if fn in LEARNABLE and not params.has(fn):
            raise MissingParameters(f"no parameters for learnable function {fn}")
    trace = trace if trace is not None else EvalTrace()

    def ev(node):
        if isinstance(node, Var):
            return z
        args = [ev(a) for a in node.args]
        fn = node.fn
        if fn == "SceneCtor":
            return Scene(*args)
        if fn == "Scale":
            return F.scale_shape(*args)
        if fn == "Rotate":
            return F.rotate_shape(*args)
        mod = getattr(params, fn)
        if fn == "ObjectAppearance" or fn == "BackgroundAppearance":
            out = F.object_appearance(mod, args[0])
        elif fn == "Scaling":
            out = F.scaling(mod, args[0])
        elif fn == "Rotation":
            out = F.rotation(mod, args[0])
        elif fn == "DescribeShape":
            out = F.describe_shape(mod, args[0], params.order)
        elif fn == "Prototype":
            res = F.prototype(mod, args[0], tau=tau, hard=hard)
            trace.calls.append((fn, res))
            return res[0]
        else:  # pragma: no cover - parser rejects unknown names
            raise KeyError(fn)
        trace.calls.append((fn, out))
        return out

    return ev(p.root)


def eval_node(node: Call | Var, z, params, tau=1.0):
    """Evaluate a sub-expression of any type (used by soundness fuzzing)."""
    return eval_program(Program(node), z, params, tau=tau)
