"""Static type checking of parsed programs."""

from __future__ import annotations

from dataclasses import dataclass

from .parser import SIGNATURES, Call, Program, Span, Var
from .types import DslType


@dataclass
class TypeDiagnostic:
    message: str
    span: Span | None

    def __str__(self):
        return f"{self.span}: {self.message}" if self.span else self.message


def _ordinal(i):
    return f"argument {i}"


def typecheck(p: Program, root_type: DslType = DslType.Scene) -> list[TypeDiagnostic]:
    """Annotate every node with its type; return diagnostics (empty list means ok)."""
    errors: list[TypeDiagnostic] = []

    def infer(node):
        if isinstance(node, Var):
            node.type = DslType.Latent
            return node.type
        arg_types, result = SIGNATURES[node.fn]
        shown = "Scene constructor" if node.fn == "SceneCtor" else node.fn
        for i, (arg, want) in enumerate(zip(node.args, arg_types), start=1):
            got = infer(arg)
            if got is not None and got != want:
                errors.append(TypeDiagnostic(
                    f"{shown}: {_ordinal(i)} expects {want}, got {got}", arg.span))
        node.type = result
        return result

    got = infer(p.root)
    if root_type is not None and got != root_type:
        errors.append(TypeDiagnostic(f"program must return {root_type}, got {got}", p.root.span))
    return errors


def check_or_raise(p: Program, root_type: DslType = DslType.Scene) -> Program:
    errs = typecheck(p, root_type)
    if errs:
        raise TypeError("; ".join(str(e) for e in errs))
    return p
