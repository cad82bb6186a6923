"""Typed scene-description language: parsing, type checking, evaluation."""

from .functions import (
    FunctionLibrary,
    PrototypeBank,
    describe_shape,
    object_appearance,
    prototype,
    rotate_shape,
    rotation,
    scale_shape,
    scaling,
)
from .interpreter import EvalTrace, MissingParameters, eval_program
from .parser import (
    BUILTIN_PROGRAMS,
    DVP_D,
    DVP_P,
    LEARNABLE,
    SIGNATURES,
    Call,
    DslSyntaxError,
    Program,
    Var,
    load_program,
    parse_program,
    to_source,
)
from .typecheck import TypeDiagnostic, check_or_raise, typecheck
from .types import DslType, Scene, runtime_type

background_appearance = object_appearance
