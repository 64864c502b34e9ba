"""Sparse multivariate polynomials over a shared variable registry.

A :class:`Polynomial` is an immutable map from exponent tuples (one slot per
registry variable) to real coefficients. Terms are kept in graded
lexicographic order whenever an order matters (display, bases, export).
"""
from __future__ import annotations

import math
import re
from itertools import combinations_with_replacement
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

__all__ = [
    "ZERO_TOL",
    "Monomial",
    "VariableRegistry",
    "Polynomial",
    "PolynomialParseError",
    "RegistryMismatchError",
    "UnknownVariableError",
    "parse_polynomial",
    "poly_arith",
    "differentiate",
    "substitute",
    "evaluate",
    "monomial_basis",
    "grlex_key",
]

ZERO_TOL = 1e-14

Monomial = tuple  # tuple[int, ...], one exponent per registry variable
Scalar = Union[int, float]


class UnknownVariableError(KeyError):
    pass


class RegistryMismatchError(ValueError):
    pass


class PolynomialParseError(ValueError):
    def __init__(self, msg, pos=None):
        if pos is not None:
            msg = f"{msg} (at offset {pos})"
        super().__init__(msg)
        self.pos = pos


def grlex_key(mono):
    """Sort key: total degree first, then lexicographic in registry order."""
    return (sum(mono), tuple(-a for a in mono))


class VariableRegistry:
    """Ordered, immutable list of distinct variable names."""

    __slots__ = ("_names", "_index")

    def __init__(self, names: Iterable[str]):
        names = tuple(names)
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate variable names in {names}")
        for name in names:
            if not re.fullmatch(r"[A-Za-z_][A-Za-z_0-9]*", name):
                raise ValueError(f"invalid variable name {name!r}")
        self._names = names
        self._index = {n: i for i, n in enumerate(names)}

    @property
    def names(self) -> tuple:
        return self._names

    def __len__(self):
        return len(self._names)

    def __iter__(self):
        return iter(self._names)

    def __contains__(self, name):
        return name in self._index

    def __eq__(self, other):
        return isinstance(other, VariableRegistry) and self._names == other._names

    def __hash__(self):
        return hash(self._names)

    def __repr__(self):
        return f"VariableRegistry({list(self._names)!r})"

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownVariableError(f"unknown variable {name!r}") from None

    def indices(self, names: Iterable[str]) -> list:
        return [self.index(n) for n in names]

    def unit(self, name: str) -> Monomial:
        mono = [0] * len(self._names)
        mono[self.index(name)] = 1
        return tuple(mono)

    def zero_monomial(self) -> Monomial:
        return (0,) * len(self._names)

    def var(self, name: str) -> "Polynomial":
        return Polynomial({self.unit(name): 1.0}, self)

    def const(self, value: Scalar) -> "Polynomial":
        return Polynomial({self.zero_monomial(): float(value)}, self)

    def zero(self) -> "Polynomial":
        return Polynomial({}, self)


class Polynomial:
    """Immutable sparse polynomial. Coefficients below ``ZERO_TOL`` are dropped."""

    __slots__ = ("_terms", "_registry", "_hash")

    def __init__(self, terms: Mapping[Monomial, float], registry: VariableRegistry):
        nvar = len(registry)
        clean = {}
        for mono, coef in terms.items():
            mono = tuple(int(a) for a in mono)
            if len(mono) != nvar:
                raise ValueError(f"monomial {mono} has wrong length for {registry!r}")
            if any(a < 0 for a in mono):
                raise ValueError(f"negative exponent in {mono}")
            coef = float(coef)
            if not math.isfinite(coef):
                raise ValueError(f"non-finite coefficient {coef} for {mono}")
            if abs(coef) >= ZERO_TOL:
                clean[mono] = coef
        self._terms = clean
        self._registry = registry
        self._hash = None

    @classmethod
    def _raw(cls, terms, registry):
        # trusted fast path: caller guarantees tuple keys of correct length
        p = cls.__new__(cls)
        p._terms = {m: c for m, c in terms.items() if abs(c) >= ZERO_TOL}
        p._registry = registry
        p._hash = None
        return p

    # -- accessors -----------------------------------------------------
    @property
    def registry(self) -> VariableRegistry:
        return self._registry

    @property
    def terms(self) -> Mapping[Monomial, float]:
        return dict(self._terms)

    def items(self):
        return self._terms.items()

    def monomials(self):
        return sorted(self._terms, key=grlex_key)

    def coefficient(self, mono: Monomial) -> float:
        return self._terms.get(tuple(mono), 0.0)

    def __len__(self):
        return len(self._terms)

    def is_zero(self) -> bool:
        return not self._terms

    @property
    def degree(self) -> int:
        return max((sum(m) for m in self._terms), default=0)

    def degree_in(self, names: Iterable[str]) -> int:
        idx = self._registry.indices(names)
        return max((sum(m[i] for i in idx) for m in self._terms), default=0)

    def variables(self) -> tuple:
        """Names of variables that actually occur, in registry order."""
        used = [False] * len(self._registry)
        for m in self._terms:
            for i, a in enumerate(m):
                if a:
                    used[i] = True
        return tuple(n for n, u in zip(self._registry.names, used) if u)

    def max_abs_coef(self) -> float:
        return max((abs(c) for c in self._terms.values()), default=0.0)

    # -- arithmetic ----------------------------------------------------
    def _coerce(self, other) -> "Polynomial":
        if isinstance(other, Polynomial):
            if other._registry != self._registry:
                raise RegistryMismatchError(
                    f"registry mismatch: {self._registry!r} vs {other._registry!r}")
            return other
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self._registry.const(float(other))
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        out = dict(self._terms)
        for m, c in other._terms.items():
            out[m] = out.get(m, 0.0) + c
        return Polynomial._raw(out, self._registry)

    __radd__ = __add__

    def __neg__(self):
        return Polynomial._raw({m: -c for m, c in self._terms.items()}, self._registry)

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self.scale(float(other))
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        out = {}
        for m1, c1 in self._terms.items():
            for m2, c2 in other._terms.items():
                m = tuple(a + b for a, b in zip(m1, m2))
                out[m] = out.get(m, 0.0) + c1 * c2
        return Polynomial._raw(out, self._registry)

    __rmul__ = __mul__

    def scale(self, s: float) -> "Polynomial":
        return Polynomial._raw({m: c * s for m, c in self._terms.items()}, self._registry)

    def __pow__(self, k: int):
        if not isinstance(k, (int, np.integer)) or k < 0:
            raise ValueError("polynomial powers must be non-negative integers")
        result = self._registry.const(1.0)
        base = self
        k = int(k)
        while k:
            if k & 1:
                result = result * base
            k >>= 1
            if k:
                base = base * base
        return result

    def __eq__(self, other):
        if isinstance(other, (int, float)):
            other = self._registry.const(other)
        if not isinstance(other, Polynomial):
            return NotImplemented
        return self._registry == other._registry and self._terms == other._terms

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((self._registry, frozenset(self._terms.items())))
        return self._hash

    def allclose(self, other, atol=1e-12, rtol=0.0) -> bool:
        diff = self - other
        scale = max(self.max_abs_coef(), other.max_abs_coef() if isinstance(other, Polynomial) else 0.0)
        return diff.max_abs_coef() <= atol + rtol * scale

    # -- calculus / evaluation ------------------------------------------
    def diff(self, name: str) -> "Polynomial":
        i = self._registry.index(name)
        out = {}
        for m, c in self._terms.items():
            a = m[i]
            if a:
                mm = m[:i] + (a - 1,) + m[i + 1:]
                out[mm] = out.get(mm, 0.0) + c * a
        return Polynomial._raw(out, self._registry)

    def subs(self, bindings: Mapping[str, Union["Polynomial", Scalar]]) -> "Polynomial":
        reg = self._registry
        bound = {}
        for name, val in bindings.items():
            i = reg.index(name)
            if isinstance(val, Polynomial):
                val = val.embed(reg)
            else:
                val = reg.const(float(val))
            bound[i] = val
        if not bound:
            return self
        power_cache = {}

        def power(i, k):
            key = (i, k)
            if key not in power_cache:
                power_cache[key] = bound[i] ** k
            return power_cache[key]

        acc = {}
        for m, c in self._terms.items():
            rest = tuple(0 if i in bound else a for i, a in enumerate(m))
            factor = Polynomial._raw({rest: c}, reg)
            for i in bound:
                if m[i]:
                    factor = factor * power(i, m[i])
            for mm, cc in factor._terms.items():
                acc[mm] = acc.get(mm, 0.0) + cc
        return Polynomial._raw(acc, reg)

    def embed(self, registry: VariableRegistry) -> "Polynomial":
        """Re-express over ``registry`` (a superset of the variables used)."""
        if registry == self._registry:
            return self
        used = self.variables()
        pos = [(self._registry.index(n), registry.index(n)) for n in used]
        out = {}
        nvar = len(registry)
        for m, c in self._terms.items():
            mm = [0] * nvar
            for i_old, i_new in pos:
                mm[i_new] = m[i_old]
            out[tuple(mm)] = c
        return Polynomial._raw(out, registry)

    def __call__(self, point):
        return evaluate(self, point)

    def evaluate_many(self, points) -> np.ndarray:
        """Evaluate at each row of ``points`` (shape ``(N, len(registry))``)."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != len(self._registry):
            raise ValueError(
                f"points must have shape (N, {len(self._registry)}), got {pts.shape}")
        if not self._terms:
            return np.zeros(pts.shape[0])
        monos = np.array(list(self._terms), dtype=np.int64)
        coefs = np.array(list(self._terms.values()))
        return monomial_matrix(pts, monos) @ coefs

    # -- display -------------------------------------------------------
    def __repr__(self):
        return f"Polynomial({self!s})"

    def __str__(self):
        if not self._terms:
            return "0"
        parts = []
        for k, m in enumerate(self.monomials()):
            c = self._terms[m]
            factors = []
            for name, a in zip(self._registry.names, m):
                if a == 1:
                    factors.append(name)
                elif a > 1:
                    factors.append(f"{name}^{a}")
            mag = format(abs(c), ".17g")
            body = "*".join(([mag] if (mag != "1" or not factors) else []) + factors)
            if k == 0:
                parts.append(("-" if c < 0 else "") + body)
            else:
                parts.append((" - " if c < 0 else " + ") + body)
        return "".join(parts)


def monomial_matrix(points: np.ndarray, monos: np.ndarray) -> np.ndarray:
    """Matrix ``V[i, j] = prod_k points[i, k] ** monos[j, k]``."""
    n_pts, nvar = points.shape
    out = np.ones((n_pts, monos.shape[0]))
    for k in range(nvar):
        col = monos[:, k]
        top = int(col.max()) if col.size else 0
        if top == 0:
            continue
        pw = np.ones((n_pts, top + 1))
        for a in range(1, top + 1):
            pw[:, a] = pw[:, a - 1] * points[:, k]
        out *= pw[:, col]
    return out


# -- parsing -----------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*^()]))")


def _tokenize(text):
    pos = 0
    tokens = []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise PolynomialParseError(f"unexpected character {text[pos:].strip()[:1]!r}", pos)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    tokens.append(("end", None, len(text)))
    return tokens


class _Parser:
    def __init__(self, text, registry):
        self.tokens = _tokenize(text)
        self.i = 0
        self.reg = registry

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op):
        kind, val, pos = self.take()
        if kind != "op" or val != op:
            raise PolynomialParseError(f"expected {op!r}, found {val!r}", pos)

    def parse(self):
        if self.peek()[0] == "end":
            raise PolynomialParseError("empty expression", 0)
        p = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise PolynomialParseError(f"unexpected token {val!r}", pos)
        return p

    def expr(self):
        p = self.term()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "+-":
                self.take()
                q = self.term()
                p = p + q if val == "+" else p - q
            else:
                return p

    def term(self):
        p = self.unary()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val == "*":
                self.take()
                p = p * self.unary()
            else:
                return p

    def unary(self):
        kind, val, _ = self.peek()
        if kind == "op" and val in "+-":
            self.take()
            p = self.unary()
            return -p if val == "-" else p
        return self.power()

    def power(self):
        base = self.atom()
        kind, val, _ = self.peek()
        if kind == "op" and val == "^":
            self.take()
            kind, val, pos = self.take()
            if kind == "op" and val == "-":
                raise PolynomialParseError("negative exponent", pos)
            if kind != "num" or not re.fullmatch(r"\d+", val):
                raise PolynomialParseError(f"exponent must be a non-negative integer, got {val!r}", pos)
            return base ** int(val)
        return base

    def atom(self):
        kind, val, pos = self.take()
        if kind == "num":
            return self.reg.const(float(val))
        if kind == "name":
            if val not in self.reg:
                raise UnknownVariableError(f"unknown identifier {val!r} at offset {pos}")
            return self.reg.var(val)
        if kind == "op" and val == "(":
            p = self.expr()
            self.expect_op(")")
            return p
        raise PolynomialParseError(f"unexpected token {val!r}", pos)


def parse_polynomial(text: str, registry: VariableRegistry) -> Polynomial:
    """Parse an infix expression (``+ - * ^``, parentheses, real literals)."""
    return _Parser(text, registry).parse()


# -- functional interface ------------------------------------------------------

def poly_arith(a: Polynomial, b, op: str) -> Polynomial:
    if op == "add":
        return a + a._coerce(b)
    if op == "sub":
        return a - a._coerce(b)
    if op == "mul":
        return a * a._coerce(b)
    if op == "scale":
        return a.scale(float(b))
    raise ValueError(f"unknown op {op!r}")


def differentiate(p: Polynomial, var: str) -> Polynomial:
    return p.diff(var)


def substitute(p: Polynomial, bindings) -> Polynomial:
    return p.subs(bindings)


def evaluate(p: Polynomial, point: Sequence[float]) -> float:
    point = np.asarray(point, dtype=float).ravel()
    if point.shape[0] != len(p.registry):
        raise ValueError(
            f"point has dimension {point.shape[0]}, registry has {len(p.registry)}")
    total = 0.0
    for m, c in p.items():
        term = c
        for x, a in zip(point, m):
            if a:
                term *= x ** a
        total += term
    return float(total)


def monomial_basis(registry: VariableRegistry, vars: Iterable[str], d: int) -> list:
    """All monomials of total degree <= d in ``vars``, graded-lex ordered."""
    if d < 0:
        raise ValueError("degree must be non-negative")
    idx = sorted(set(registry.indices(vars)))
    nvar = len(registry)
    basis = []
    for deg in range(d + 1):
        for combo in combinations_with_replacement(idx, deg):
            mono = [0] * nvar
            for i in combo:
                mono[i] += 1
            basis.append(tuple(mono))
    basis.sort(key=grlex_key)
    return basis
