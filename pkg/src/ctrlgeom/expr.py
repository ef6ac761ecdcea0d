"""Small arithmetic expression language: parsing, evaluation, symbolic derivatives.

Vector fields are specified as strings over named state variables, e.g.
``"-sin(x1) + 2*x2"``.  Expressions are immutable trees; evaluation happens
in 64-bit floats and raises :class:`EvaluationError` on domain problems
(log of a nonpositive number, division by zero, non-finite results).
"""

from __future__ import annotations

import math
import re


class ExprError(Exception):
    """Base class for expression errors."""


class ParseError(ExprError):
    """Source text does not conform to the grammar; carries the offending position."""

    def __init__(self, message, position):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class UndeclaredVariableError(ExprError):
    """An identifier in the source is not among the declared variables."""

    def __init__(self, name, position):
        super().__init__(f"undeclared variable '{name}' (at position {position})")
        self.name = name
        self.position = position


class EvaluationError(ExprError):
    """Evaluation left the expression's domain or produced a non-finite value."""


UNARY_FUNCTIONS = ("sin", "cos", "tan", "exp", "log", "sqrt", "tanh", "abs")

# printer / parser precedence levels
_PREC_ADD = 1
_PREC_MUL = 2
_PREC_NEG = 3
_PREC_POW = 4
_PREC_ATOM = 5


class Expr:
    """Immutable expression tree node."""

    precedence = _PREC_ATOM

    def eval(self, env):
        """Evaluate at ``env`` (mapping variable name -> float)."""
        raise NotImplementedError

    def diff(self, var):
        """Symbolic partial derivative with respect to ``var``."""
        raise NotImplementedError

    def variables(self):
        """Set of variable names appearing in the tree."""
        raise NotImplementedError

    def __str__(self):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self})"


class Const(Expr):
    def __init__(self, value):
        self.value = float(value)

    @property
    def precedence(self):
        # repr of a negative constant starts with '-', which re-parses as
        # unary minus; report its precedence so parents parenthesize it
        if self.value < 0.0 or (self.value == 0.0 and math.copysign(1.0, self.value) < 0.0):
            return _PREC_NEG
        return _PREC_ATOM

    def eval(self, env):
        return self.value

    def diff(self, var):
        return Const(0.0)

    def variables(self):
        return frozenset()

    def __str__(self):
        return repr(self.value)


class Var(Expr):
    def __init__(self, name):
        self.name = name

    def eval(self, env):
        return env[self.name]

    def diff(self, var):
        return Const(1.0) if self.name == var else Const(0.0)

    def variables(self):
        return frozenset((self.name,))

    def __str__(self):
        return self.name


class Neg(Expr):
    precedence = _PREC_NEG

    def __init__(self, arg):
        self.arg = arg

    def eval(self, env):
        return -self.arg.eval(env)

    def diff(self, var):
        return Neg(self.arg.diff(var))

    def variables(self):
        return self.arg.variables()

    def __str__(self):
        # arguments binding looser than unary minus need parentheses
        if self.arg.precedence < _PREC_NEG:
            return f"-({self.arg})"
        return f"-{self.arg}"


class Call(Expr):
    """Application of one of the built-in unary functions."""

    def __init__(self, func, arg):
        if func not in UNARY_FUNCTIONS:
            raise ValueError(f"unknown function '{func}'")
        self.func = func
        self.arg = arg

    def eval(self, env):
        x = self.arg.eval(env)
        f = self.func
        if f == "log":
            if x <= 0.0:
                raise EvaluationError(f"log of nonpositive value {x!r}")
            return math.log(x)
        if f == "sqrt":
            if x < 0.0:
                raise EvaluationError(f"sqrt of negative value {x!r}")
            return math.sqrt(x)
        try:
            value = getattr(math, f)(x) if f != "abs" else abs(x)
        except (ValueError, OverflowError) as exc:
            raise EvaluationError(f"{f}({x!r}): {exc}") from exc
        return _finite(value, self)

    def diff(self, var):
        inner = self.arg.diff(var)
        a = self.arg
        f = self.func
        if f == "sin":
            outer = Call("cos", a)
        elif f == "cos":
            outer = Neg(Call("sin", a))
        elif f == "tan":
            outer = Div(Const(1.0), Pow(Call("cos", a), Const(2.0)))
        elif f == "exp":
            outer = Call("exp", a)
        elif f == "log":
            outer = Div(Const(1.0), a)
        elif f == "sqrt":
            outer = Div(Const(1.0), Mul(Const(2.0), Call("sqrt", a)))
        elif f == "tanh":
            outer = Sub(Const(1.0), Pow(Call("tanh", a), Const(2.0)))
        else:  # abs: a/|a|, undefined at 0 (division error at evaluation time)
            outer = Div(a, Call("abs", a))
        return Mul(outer, inner)

    def variables(self):
        return self.arg.variables()

    def __str__(self):
        return f"{self.func}({self.arg})"


class _Binary(Expr):
    op = "?"

    def __init__(self, lhs, rhs):
        self.lhs = lhs
        self.rhs = rhs

    def variables(self):
        return self.lhs.variables() | self.rhs.variables()

    def _wrap(self, child, needs_parens):
        return f"({child})" if needs_parens else str(child)

    def __str__(self):
        lhs = self._wrap(self.lhs, self.lhs.precedence < self.precedence)
        # right operand needs parens at equal precedence for the
        # left-associative operators (a - (b + c), a / (b * c))
        rhs = self._wrap(self.rhs, self.rhs.precedence <= self.precedence)
        return f"{lhs} {self.op} {rhs}"


class Add(_Binary):
    op = "+"
    precedence = _PREC_ADD

    def eval(self, env):
        return _finite(self.lhs.eval(env) + self.rhs.eval(env), self)

    def diff(self, var):
        return Add(self.lhs.diff(var), self.rhs.diff(var))


class Sub(_Binary):
    op = "-"
    precedence = _PREC_ADD

    def eval(self, env):
        return _finite(self.lhs.eval(env) - self.rhs.eval(env), self)

    def diff(self, var):
        return Sub(self.lhs.diff(var), self.rhs.diff(var))


class Mul(_Binary):
    op = "*"
    precedence = _PREC_MUL

    def eval(self, env):
        return _finite(self.lhs.eval(env) * self.rhs.eval(env), self)

    def diff(self, var):
        return Add(Mul(self.lhs.diff(var), self.rhs), Mul(self.lhs, self.rhs.diff(var)))


class Div(_Binary):
    op = "/"
    precedence = _PREC_MUL

    def eval(self, env):
        den = self.rhs.eval(env)
        if den == 0.0:
            raise EvaluationError(f"division by zero in '{self}'")
        return _finite(self.lhs.eval(env) / den, self)

    def diff(self, var):
        num = Sub(Mul(self.lhs.diff(var), self.rhs), Mul(self.lhs, self.rhs.diff(var)))
        return Div(num, Pow(self.rhs, Const(2.0)))


class Pow(_Binary):
    op = "^"
    precedence = _PREC_POW

    def eval(self, env):
        base = self.lhs.eval(env)
        exponent = self.rhs.eval(env)
        try:
            value = math.pow(base, exponent)
        except (ValueError, OverflowError) as exc:
            raise EvaluationError(f"'{self}': {exc}") from exc
        return _finite(value, self)

    def diff(self, var):
        u, v = self.lhs, self.rhs
        if isinstance(v, Const):
            # power rule; valid for negative bases, unlike the general formula
            return Mul(Mul(v, Pow(u, Const(v.value - 1.0))), u.diff(var))
        # u^v * (v' * log(u) + v * u'/u)
        return Mul(
            Pow(u, v),
            Add(Mul(v.diff(var), Call("log", u)), Mul(v, Div(u.diff(var), u))),
        )

    def __str__(self):
        # right-associative: parenthesize lhs at equal precedence, not rhs
        lhs = self._wrap(self.lhs, self.lhs.precedence <= self.precedence)
        rhs = self._wrap(self.rhs, self.rhs.precedence < self.precedence)
        return f"{lhs} {self.op} {rhs}"


def _finite(value, node):
    if not math.isfinite(value):
        raise EvaluationError(f"non-finite value {value!r} from '{node}'")
    return value


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^()]))"
)


def _tokenize(source):
    tokens = []
    pos = 0
    while pos < len(source):
        match = _TOKEN_RE.match(source, pos)
        if match is None or match.end() == pos:
            # skip pure whitespace tails
            if source[pos:].strip() == "":
                break
            raise ParseError(f"unexpected character {source[pos:].lstrip()[0]!r}", pos)
        kind = match.lastgroup
        tokens.append((kind, match.group(kind), match.start(kind)))
        pos = match.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    """Recursive descent over the token stream.

    Grammar (pow binds tighter than unary minus, and is right-associative):

        expression := term (('+'|'-') term)*
        term       := factor (('*'|'/') factor)*
        factor     := '-' factor | power
        power      := atom ('^' factor)?
        atom       := NUMBER | IDENT | IDENT '(' expression ')' | '(' expression ')'
    """

    def __init__(self, tokens, variables):
        self.tokens = tokens
        self.variables = variables
        self.index = 0

    def peek(self):
        return self.tokens[self.index]

    def advance(self):
        token = self.tokens[self.index]
        self.index += 1
        return token

    def expect_op(self, symbol):
        kind, text, pos = self.peek()
        if kind != "op" or text != symbol:
            raise ParseError(f"expected '{symbol}'", pos)
        return self.advance()

    def parse_expression(self):
        node = self.parse_term()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "+-":
                self.advance()
                rhs = self.parse_term()
                node = Add(node, rhs) if text == "+" else Sub(node, rhs)
            else:
                return node

    def parse_term(self):
        node = self.parse_factor()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "*/":
                self.advance()
                rhs = self.parse_factor()
                node = Mul(node, rhs) if text == "*" else Div(node, rhs)
            else:
                return node

    def parse_factor(self):
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.advance()
            return Neg(self.parse_factor())
        return self.parse_power()

    def parse_power(self):
        base = self.parse_atom()
        kind, text, _ = self.peek()
        if kind == "op" and text == "^":
            self.advance()
            return Pow(base, self.parse_factor())
        return base

    def parse_atom(self):
        kind, text, pos = self.advance()
        if kind == "number":
            return Const(float(text))
        if kind == "ident":
            next_kind, next_text, _ = self.peek()
            if next_kind == "op" and next_text == "(":
                if text not in UNARY_FUNCTIONS:
                    raise ParseError(f"unknown function '{text}'", pos)
                self.advance()
                arg = self.parse_expression()
                self.expect_op(")")
                return Call(text, arg)
            if text not in self.variables:
                raise UndeclaredVariableError(text, pos)
            return Var(text)
        if kind == "op" and text == "(":
            node = self.parse_expression()
            self.expect_op(")")
            return node
        raise ParseError(f"unexpected {text!r}" if text else "unexpected end of input", pos)


def parse(source, variables):
    """Parse ``source`` into an :class:`Expr` over the declared ``variables``.

    Parameters
    ----------
    source : str
        Expression text.  Standard precedence applies: ``^`` binds tightest
        (right-associative), then unary minus, then ``* /``, then ``+ -``.
    variables : sequence of str
        Declared variable names; must be nonempty and distinct.  Any other
        identifier (outside the function names) raises
        :class:`UndeclaredVariableError`.
    """
    names = list(variables)
    if not names:
        raise ValueError("variables must be nonempty")
    if len(set(names)) != len(names):
        raise ValueError("variable names must be distinct")
    parser = _Parser(_tokenize(source), frozenset(names))
    node = parser.parse_expression()
    kind, text, pos = parser.peek()
    if kind != "end":
        raise ParseError(f"trailing input {text!r}", pos)
    return node


def parse_vector(sources, variables):
    """Parse a list of expression strings with a shared variable set."""
    return [parse(s, variables) for s in sources]


def substitute(expr, name, value):
    """Return a copy of ``expr`` with variable ``name`` replaced by a constant."""
    if isinstance(expr, Var):
        return Const(value) if expr.name == name else expr
    if isinstance(expr, Const):
        return expr
    if isinstance(expr, Neg):
        return Neg(substitute(expr.arg, name, value))
    if isinstance(expr, Call):
        return Call(expr.func, substitute(expr.arg, name, value))
    return type(expr)(substitute(expr.lhs, name, value), substitute(expr.rhs, name, value))
