"""Small arithmetic expression language used by config files.

Grammar (usual precedence, ``^`` binds tightest and is right-associative)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?
    atom   := NUMBER | 'pi' | VARIABLE | FUNC '(' expr ')' | '(' expr ')'

Known variables: z1..z3, zp1..zp3, x1..x3, xi1..xi3, r.
Known functions: sin, cos, exp, sqrt, abs.

Expressions evaluate on scalars or numpy arrays (broadcasting applies).
"""

from __future__ import annotations

import numpy as np

VARIABLES = (
    "z1", "z2", "z3",
    "zp1", "zp2", "zp3",
    "x1", "x2", "x3",
    "xi1", "xi2", "xi3",
    "r",
)

FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "sqrt": np.sqrt,
    "abs": np.abs,
}


class ExpressionError(ValueError):
    """Parse or evaluation failure; carries the offending source span."""

    def __init__(self, message, text, pos, length=1):
        self.text = text
        self.pos = pos
        self.length = max(1, length)
        caret = " " * pos + "^" * self.length
        super().__init__(f"{message}\n  {text}\n  {caret}")


class _Token:
    __slots__ = ("kind", "value", "pos", "length")

    def __init__(self, kind, value, pos, length):
        self.kind = kind
        self.value = value
        self.pos = pos
        self.length = length


def _tokenize(text):
    tokens = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ch.isdigit() or (ch == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i
            seen_e = False
            while j < n:
                c = text[j]
                if c.isdigit() or c == ".":
                    j += 1
                elif c in "eE" and not seen_e:
                    seen_e = True
                    j += 1
                    if j < n and text[j] in "+-":
                        j += 1
                else:
                    break
            try:
                value = float(text[i:j])
            except ValueError:
                raise ExpressionError("malformed number", text, i, j - i) from None
            tokens.append(_Token("number", value, i, j - i))
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(_Token("ident", text[i:j], i, j - i))
            i = j
            continue
        if ch in "+-*/^()":
            tokens.append(_Token(ch, ch, i, 1))
            i += 1
            continue
        raise ExpressionError(f"unexpected character {ch!r}", text, i)
    tokens.append(_Token("end", None, n, 1))
    return tokens


class _Parser:
    def __init__(self, text):
        self.text = text
        self.tokens = _tokenize(text)
        self.k = 0
        self.used_variables = set()

    def peek(self):
        return self.tokens[self.k]

    def advance(self):
        tok = self.tokens[self.k]
        self.k += 1
        return tok

    def expect(self, kind, what):
        tok = self.peek()
        if tok.kind != kind:
            raise ExpressionError(f"expected {what}", self.text, tok.pos, tok.length)
        return self.advance()

    def parse(self):
        node = self.expr()
        tok = self.peek()
        if tok.kind != "end":
            raise ExpressionError("unexpected trailing input", self.text, tok.pos, tok.length)
        return node

    def expr(self):
        node = self.term()
        while self.peek().kind in ("+", "-"):
            op = self.advance().kind
            rhs = self.term()
            node = ("add" if op == "+" else "sub", node, rhs)
        return node

    def term(self):
        node = self.unary()
        while self.peek().kind in ("*", "/"):
            op = self.advance().kind
            rhs = self.unary()
            node = ("mul" if op == "*" else "div", node, rhs)
        return node

    def unary(self):
        if self.peek().kind == "-":
            self.advance()
            return ("neg", self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek().kind == "^":
            self.advance()
            # right-associative; exponent may carry its own unary minus
            exponent = self.unary()
            return ("pow", base, exponent)
        return base

    def atom(self):
        tok = self.peek()
        if tok.kind == "number":
            self.advance()
            return ("const", tok.value)
        if tok.kind == "(":
            self.advance()
            node = self.expr()
            closing = self.peek()
            if closing.kind != ")":
                raise ExpressionError("unclosed parenthesis", self.text, tok.pos, 1)
            self.advance()
            return node
        if tok.kind == "ident":
            self.advance()
            name = tok.value
            if name == "pi":
                return ("const", np.pi)
            if name in FUNCTIONS:
                opening = self.expect("(", f"'(' after function {name}")
                node = self.expr()
                closing = self.peek()
                if closing.kind != ")":
                    raise ExpressionError("unclosed parenthesis", self.text, opening.pos, 1)
                self.advance()
                return ("call", name, node)
            if name in VARIABLES:
                self.used_variables.add(name)
                return ("var", name)
            raise ExpressionError(f"unknown identifier {name!r}", self.text, tok.pos, tok.length)
        raise ExpressionError("expected a value", self.text, tok.pos, tok.length)


def _eval_node(node, env, text):
    kind = node[0]
    if kind == "const":
        return node[1]
    if kind == "var":
        name = node[1]
        if name not in env:
            raise ExpressionError(f"variable {name!r} is not defined in this context", text, 0, len(text))
        return env[name]
    if kind == "neg":
        return -_eval_node(node[1], env, text)
    if kind == "call":
        return FUNCTIONS[node[1]](_eval_node(node[2], env, text))
    a = _eval_node(node[1], env, text)
    b = _eval_node(node[2], env, text)
    if kind == "add":
        return a + b
    if kind == "sub":
        return a - b
    if kind == "mul":
        return a * b
    if kind == "div":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.true_divide(a, b)
        if not np.all(np.isfinite(out)):
            raise ExpressionError("division produced a non-finite value", text, 0, len(text))
        return out
    if kind == "pow":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.power(a, b)
        if not np.all(np.isfinite(out)):
            raise ExpressionError("power produced a non-finite value", text, 0, len(text))
        return out
    raise AssertionError(f"unhandled node {kind}")


class Expression:
    """Parsed expression; evaluate with a dict of variable values/arrays."""

    def __init__(self, text):
        parser = _Parser(text)
        self._ast = parser.parse()
        self.text = text
        self.variables = frozenset(parser.used_variables)

    def __call__(self, **env):
        out = _eval_node(self._ast, env, self.text)
        return np.asarray(out, dtype=float) if isinstance(out, np.ndarray) else float(out)

    def __repr__(self):
        return f"Expression({self.text!r})"

    def __eq__(self, other):
        return isinstance(other, Expression) and other.text == self.text

    def __hash__(self):
        return hash(self.text)


def parse_expression(text):
    """Parse ``text`` into an Expression; raises ExpressionError with a span."""
    return Expression(text)
