"""Lexer, parser and printer for scene programs.

Surface syntax::

    program := [header] expr
    header  := NAME '(' 'z' ':' 'Latent' ')' ('->' | '→') 'Scene' '='
    expr    := 'z'
             | NAME '(' expr (',' expr)* ')'
             | '(' expr ',' expr ',' expr ')'      # Scene constructor

The optional header lets the program be written exactly as it is usually
typeset, e.g. ``P(z: Latent) -> Scene = (...)``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .types import DslType

# name -> (argument types, result type)
SIGNATURES = {
    "ObjectAppearance": ((DslType.Latent,), DslType.Appearance),
    "BackgroundAppearance": ((DslType.Latent,), DslType.Appearance),
    "Scaling": ((DslType.Latent,), DslType.Double),
    "Rotation": ((DslType.Latent,), DslType.Double2),
    "DescribeShape": ((DslType.Latent,), DslType.Shape),
    "Prototype": ((DslType.Latent,), DslType.Shape),
    "Scale": ((DslType.Shape, DslType.Double), DslType.Shape),
    "Rotate": ((DslType.Shape, DslType.Double2), DslType.Shape),
    "SceneCtor": ((DslType.Shape, DslType.Appearance, DslType.Appearance), DslType.Scene),
}
LEARNABLE = ("ObjectAppearance", "BackgroundAppearance", "Scaling", "Rotation", "DescribeShape", "Prototype")
ALIASES = {"Scene": "SceneCtor"}

DVP_D = "(Rotate(Scale(DescribeShape(z), Scaling(z)), Rotation(z)), ObjectAppearance(z), BackgroundAppearance(z))"
DVP_P = "(Rotate(Scale(Prototype(z), Scaling(z)), Rotation(z)), ObjectAppearance(z), BackgroundAppearance(z))"
BUILTIN_PROGRAMS = {"dvp-d": DVP_D, "dvp-p": DVP_P}


@dataclass(frozen=True)
class Span:
    line: int
    col: int
    end_line: int = 0
    end_col: int = 0

    def __str__(self):
        return f"line {self.line}, column {self.col}"


class DslSyntaxError(ValueError):
    def __init__(self, message, span: Span):
        super().__init__(f"{span}: {message}")
        self.message = message
        self.span = span


@dataclass(eq=True)
class Node:
    span: Span | None = field(default=None, compare=False, repr=False, kw_only=True)
    type: DslType | None = field(default=None, compare=False, repr=False, kw_only=True)

    def children(self):
        return ()

    def depth(self):
        kids = self.children()
        return 0 if not kids else 1 + max(k.depth() for k in kids)

    def walk(self):
        yield self
        for k in self.children():
            yield from k.walk()


@dataclass(eq=True)
class Var(Node):
    name: str = "z"


@dataclass(eq=True)
class Call(Node):
    fn: str = ""
    args: tuple = ()

    def children(self):
        return self.args


@dataclass
class Program:
    root: Node
    source: str = ""
    name: str | None = None

    def __eq__(self, other):
        return isinstance(other, Program) and self.root == other.root

    def depth(self):
        return self.root.depth()

    def functions(self):
        return [n.fn for n in self.root.walk() if isinstance(n, Call)]


_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<arrow>->|→)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[(),:=])
  | (?P<dollar>\$)
    """,
    re.VERBOSE,
)


@dataclass
class Token:
    kind: str
    text: str
    span: Span


def tokenize(text: str):
    tokens = []
    pos, line, col = 0, 1, 1
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise DslSyntaxError(f"unexpected character {text[pos]!r}", Span(line, col))
        kind = m.lastgroup
        s = m.group()
        if kind == "nl":
            line, col = line + 1, 1
        elif kind == "ws" or kind == "dollar":
            # '$' is tolerated so LaTeX-style '$z$' reads as 'z'
            col += len(s)
        else:
            tokens.append(Token(kind if kind != "punct" else s, s, Span(line, col, line, col + len(s))))
            col += len(s)
        pos = m.end()
    tokens.append(Token("eof", "", Span(line, col, line, col)))
    return tokens


class _Parser:
    def __init__(self, text):
        self.toks = tokenize(text)
        self.i = 0

    @property
    def tok(self):
        return self.toks[self.i]

    def advance(self):
        t = self.toks[self.i]
        self.i += 1
        return t

    def expect(self, kind, what=None):
        t = self.tok
        if t.kind != kind:
            found = "end of input" if t.kind == "eof" else repr(t.text)
            raise DslSyntaxError(f"expected {what or repr(kind)}, found {found}", t.span)
        return self.advance()

    def program(self):
        name = None
        if self._at_header():
            name = self.advance().text
            self.expect("(")
            self.expect("name", "'z'")
            self.expect(":")
            t = self.expect("name", "'Latent'")
            if t.text != "Latent":
                raise DslSyntaxError(f"program input must be Latent, not {t.text}", t.span)
            self.expect(")")
            self.expect("arrow", "'->'")
            t = self.expect("name", "'Scene'")
            if t.text != "Scene":
                raise DslSyntaxError(f"program must be declared as returning Scene, not {t.text}", t.span)
            self.expect("=")
        root = self.expr()
        if self.tok.kind != "eof":
            raise DslSyntaxError(f"unexpected {self.tok.text!r} after end of program", self.tok.span)
        return root, name

    def _at_header(self):
        t = self.toks
        i = self.i
        return (t[i].kind == "name" and t[i + 1].kind == "(" and t[i + 2].kind == "name"
                and t[i + 3].kind == ":")

    def expr(self):
        t = self.tok
        if t.kind == "name":
            self.advance()
            if self.tok.kind != "(":
                if t.text != "z":
                    raise DslSyntaxError(f"unknown variable {t.text!r}; the only input is 'z'", t.span)
                return Var("z", span=t.span)
            fn = ALIASES.get(t.text, t.text)
            if fn not in SIGNATURES:
                raise DslSyntaxError(f"unknown function {t.text!r}", t.span)
            self.advance()
            args = [self.expr()]
            while self.tok.kind == ",":
                self.advance()
                args.append(self.expr())
            close = self.expect(")", "')'")
            arity = len(SIGNATURES[fn][0])
            if len(args) != arity:
                raise DslSyntaxError(
                    f"{t.text} expects {arity} argument{'s' if arity != 1 else ''}, got {len(args)}", t.span)
            return Call(fn, tuple(args), span=Span(t.span.line, t.span.col, close.span.end_line, close.span.end_col))
        if t.kind == "(":
            self.advance()
            items = [self.expr()]
            while self.tok.kind == ",":
                self.advance()
                items.append(self.expr())
            close = self.expect(")", "')'")
            if len(items) != 3:
                raise DslSyntaxError(f"scene tuple needs 3 elements, got {len(items)}", t.span)
            return Call("SceneCtor", tuple(items), span=Span(t.span.line, t.span.col, close.span.end_line, close.span.end_col))
        found = "end of input" if t.kind == "eof" else repr(t.text)
        raise DslSyntaxError(f"expected an expression, found {found}", t.span)


def parse_program(text: str) -> Program:
    if not text or not text.strip():
        raise DslSyntaxError("empty program", Span(1, 1))
    root, name = _Parser(text).program()
    return Program(root, source=text, name=name)


def to_source(node) -> str:
    """Canonical text of a program or expression."""
    if isinstance(node, Program):
        node = node.root
    if isinstance(node, Var):
        return node.name
    if node.fn == "SceneCtor":
        return "(" + ", ".join(to_source(a) for a in node.args) + ")"
    return f"{node.fn}(" + ", ".join(to_source(a) for a in node.args) + ")"


def load_program(spec: str) -> Program:
    """Built-in name (``dvp-d``/``dvp-p``), a path to a UTF-8 file, or program text."""
    if spec in BUILTIN_PROGRAMS:
        prog = parse_program(BUILTIN_PROGRAMS[spec])
        prog.name = spec
        return prog
    from pathlib import Path

    p = Path(spec)
    if "(" not in spec and p.exists():
        return parse_program(p.read_text(encoding="utf-8"))
    return parse_program(spec)
