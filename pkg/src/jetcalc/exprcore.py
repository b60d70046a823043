"""Immutable symbolic expression kernel.

Expressions are sympy trees over real-valued symbols (jet coordinates and
free parameters), applied transcendental atoms (sin, cos, tan, exp, log,
sqrt) and opaque function atoms such as ``V(y)`` or ``g11(q1, q2)`` together
with their formal partial derivatives.  The kernel provides a canonical
normal form (rational-polynomial canonicalization over the atoms, with no
trigonometric or exponential rewriting), formal partial differentiation,
simultaneous substitution and IEEE-double evaluation.

Everything here is pure and immutable; expressions can be shared freely
between threads.
"""

from __future__ import annotations

import math
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Iterable, Mapping

import sympy as sp
from sympy.core.function import AppliedUndef, UndefinedFunction

__all__ = [
    "Expr",
    "ExprError",
    "ZeroDenominatorError",
    "UnknownCoordinateError",
    "EvaluationError",
    "ALLOWED_FUNCTIONS",
    "sym",
    "syms",
    "rational",
    "opaque",
    "div",
    "normalize",
    "is_zero",
    "partial",
    "substitute",
    "evaluate",
    "atoms_of",
    "free_symbols",
]

#: The expression type.  Exprs are plain sympy expressions built from the
#: factories below; all symbols carry the ``real=True`` assumption.
Expr = sp.Expr


class ExprError(Exception):
    """Base class for expression-kernel errors."""


class ZeroDenominatorError(ExprError):
    """Division by a symbolically-zero denominator."""


class UnknownCoordinateError(ExprError):
    """Differentiation with respect to an undeclared coordinate."""


class EvaluationError(ExprError):
    """Unbound symbol or numeric domain violation during evaluation."""


#: Transcendental atoms admitted by the kernel (and the expression grammar).
ALLOWED_FUNCTIONS: dict[str, Callable[..., Expr]] = {
    "sin": sp.sin,
    "cos": sp.cos,
    "tan": sp.tan,
    "exp": sp.exp,
    "log": sp.log,
    "sqrt": sp.sqrt,
}

_BAD_ATOMS = (sp.zoo, sp.nan, sp.oo, -sp.oo)


def sym(name: str) -> sp.Symbol:
    """A real-valued symbol; the shared factory for all coordinates."""
    return sp.Symbol(name, real=True)


def syms(names: str | Iterable[str]) -> tuple[sp.Symbol, ...]:
    """Several symbols at once, from an iterable or whitespace-split string."""
    if isinstance(names, str):
        names = names.split()
    return tuple(sym(n) for n in names)


def rational(p: int, q: int = 1) -> Expr:
    """An exact rational constant."""
    if q == 0:
        raise ZeroDenominatorError("zero denominator")
    return sp.Rational(p, q)


def opaque(name: str, *args: Expr) -> Expr:
    """An opaque function atom, e.g. ``opaque("V", y)`` for V(y).

    Partial derivatives of opaque atoms stay symbolic
    (``partial(V(y), y)`` is the atom V'(y)); mixed partials are
    canonically sorted, so the order of differentiation never matters.
    """
    if not args:
        raise ExprError(f"opaque atom {name!r} needs at least one argument")
    return sp.Function(name, real=True)(*args)


def div(a: Expr, b: Expr) -> Expr:
    """Quotient a/b, rejecting symbolically-zero denominators."""
    b = sp.sympify(b)
    if is_zero(b):
        raise ZeroDenominatorError("zero denominator")
    return sp.sympify(a) / b


def _is_atomic(e: Expr) -> bool:
    """Generators of the polynomial normal form: symbols and applied atoms."""
    return isinstance(e, (sp.Symbol, AppliedUndef, sp.Derivative)) or (
        isinstance(e, sp.Function) and not isinstance(e, AppliedUndef)
    )


def _needs_fraction_normal(e: Expr) -> bool:
    """True when the expanded form still has a composite denominator.

    Negative integer powers of sums (e.g. ``(x + 1)**-1`` from a metric
    determinant) defeat plain expansion; those expressions are pushed
    through :func:`sympy.cancel` into a canonical p/q form.  Negative
    powers of atomic generators are ordinary monomial factors and need no
    extra work.
    """
    for p in e.atoms(sp.Pow):
        exp = p.exp
        if exp.is_Integer and exp < 0 and not _is_atomic(p.base):
            return True
    return False


def _check_finite(e: Expr) -> Expr:
    if e.has(*_BAD_ATOMS):
        raise ZeroDenominatorError("zero denominator")
    return e


@lru_cache(maxsize=8192)
def _normalize_cached(e: Expr) -> Expr:
    ex = sp.expand(_check_finite(e))
    if _needs_fraction_normal(ex):
        ex = sp.cancel(ex)
    return _check_finite(ex)


def normalize(e: Expr) -> Expr:
    """Canonical normal form.

    Sums of products of powers of atoms with exact rational coefficients;
    rational functions with composite denominators are reduced to a
    canonical quotient of coprime expanded polynomials.  Idempotent, and
    algebraically equal rational expressions over identical atoms map to
    the identical tree.  Deliberately performs no trigonometric or
    exponential rewriting; identities such as sin**2 + cos**2 = 1 are left
    to the numeric zero tester in :mod:`jetcalc.oracle`.
    """
    return _normalize_cached(sp.sympify(e))


def is_zero(e: Expr) -> bool:
    """Whether the normal form of ``e`` is the zero expression."""
    return normalize(e) == sp.S.Zero


def _resolve_symbol(e: Expr, c: sp.Symbol | str) -> sp.Symbol:
    if isinstance(c, sp.Symbol):
        return c
    name = str(c)
    for s in e.free_symbols:
        if s.name == name:
            return s
    raise UnknownCoordinateError(f"unknown coordinate: {name}")


def partial(e: Expr, c: sp.Symbol | str) -> Expr:
    """Formal partial derivative, all other jet coordinates held fixed.

    ``c`` may be a symbol (absent symbols differentiate to zero) or a name,
    which must occur in ``e``.  Linear, satisfies the Leibniz rule, and
    commutes with itself on coordinate pairs.
    """
    e = sp.sympify(e)
    s = _resolve_symbol(e, c)
    return normalize(sp.diff(e, s))


def substitute(
    e: Expr,
    bindings: Mapping[sp.Symbol | str, Expr],
    *,
    jet_symbols: Iterable[sp.Symbol] | None = None,
    allow_partial: bool = False,
) -> Expr:
    """Simultaneous substitution followed by :func:`normalize`.

    Keys are symbols (or their names); opaque atoms can be rebound by
    mapping the bare function name to a ``sympy.Lambda`` of matching arity,
    in which case pending formal derivatives are evaluated.  When
    ``jet_symbols`` is given, the bindings must cover every one of those
    symbols occurring in ``e`` unless ``allow_partial`` is set.
    """
    e = sp.sympify(e)
    sym_map: dict[sp.Symbol, Expr] = {}
    fun_map: dict[UndefinedFunction, sp.Lambda] = {}
    heads = {f.func for f in e.atoms(AppliedUndef)}
    heads_by_name = {str(h): h for h in heads}
    for k, v in bindings.items():
        if isinstance(k, UndefinedFunction):
            fun_map[k] = v
        elif isinstance(k, sp.Symbol):
            sym_map[k] = sp.sympify(v)
        elif str(k) in heads_by_name:
            fun_map[heads_by_name[str(k)]] = v
        else:
            sym_map[sym(str(k))] = sp.sympify(v)
    if jet_symbols is not None and not allow_partial:
        required = set(jet_symbols) & e.free_symbols
        missing = required - set(sym_map)
        if missing:
            names = ", ".join(sorted(s.name for s in missing))
            raise ExprError(f"substitution not closed over jet coordinates: {names}")
    out = e.xreplace(sym_map)
    for head, lam in fun_map.items():
        out = out.subs(head, lam)
    if fun_map:
        out = out.doit()
    return normalize(out)


# ---------------------------------------------------------------------------
# Numeric evaluation


OpaqueRule = Callable[..., float] | Mapping[tuple[int, ...], Callable[..., float]]


def _opaque_lookup(rules, name: str, counts: tuple[int, ...]):
    rule = rules.get(name)
    if rule is None:
        raise EvaluationError(f"unbound opaque atom: {name}")
    if callable(rule):
        if any(counts):
            raise EvaluationError(
                f"no derivative rule of order {counts} bound for opaque atom {name}"
            )
        return rule
    fn = rule.get(counts)
    if fn is None:
        raise EvaluationError(
            f"no derivative rule of order {counts} bound for opaque atom {name}"
        )
    return fn


def evaluate(e: Expr, pt: Mapping[sp.Symbol | str, float | OpaqueRule]) -> float:
    """IEEE-double evaluation of ``e`` at a point.

    ``pt`` binds every free symbol to a number.  Opaque atoms are bound by
    name either to a plain callable (the function value) or to a mapping
    from per-argument derivative counts to callables, e.g.
    ``{"V": {(0,): v, (1,): vp}}``.  Raises :class:`EvaluationError` on
    unbound symbols and numeric domain violations.
    """
    values: dict[str, float] = {}
    rules: dict[str, OpaqueRule] = {}
    for k, v in pt.items():
        if callable(v) or isinstance(v, Mapping):
            rules[str(k)] = v
        else:
            values[k.name if isinstance(k, sp.Symbol) else str(k)] = float(v)

    def rec(node: Expr) -> float:
        if node is sp.pi:
            return math.pi
        if node is sp.E:
            return math.e
        if isinstance(node, (sp.Integer, sp.Rational, sp.Float)):
            return float(node)
        if isinstance(node, sp.Symbol):
            try:
                return values[node.name]
            except KeyError:
                raise EvaluationError(f"unbound symbol: {node.name}") from None
        if isinstance(node, sp.Add):
            return math.fsum(rec(a) for a in node.args)
        if isinstance(node, sp.Mul):
            out = 1.0
            for a in node.args:
                out *= rec(a)
            return out
        if isinstance(node, sp.Pow):
            base, expo = rec(node.base), rec(node.exp)
            try:
                if base == 0.0 and expo < 0:
                    raise ZeroDivisionError
                if base < 0 and expo != int(expo):
                    raise ValueError
                return math.pow(base, expo)
            except (ValueError, ZeroDivisionError, OverflowError) as err:
                raise EvaluationError(f"numeric domain error: {base}**{expo}") from err
        if isinstance(node, sp.Function) and not isinstance(node, AppliedUndef):
            name = type(node).__name__
            fn = getattr(math, name, None)
            if name == "sqrt":
                fn = math.sqrt
            if fn is None:
                raise EvaluationError(f"cannot evaluate function: {name}")
            arg = rec(node.args[0])
            try:
                return fn(arg)
            except ValueError as err:
                raise EvaluationError(f"numeric domain error: {name}({arg})") from err
        if isinstance(node, AppliedUndef):
            args = [rec(a) for a in node.args]
            fn = _opaque_lookup(rules, type(node).__name__, (0,) * len(node.args))
            return float(fn(*args))
        if isinstance(node, sp.Derivative):
            head = node.expr
            if not isinstance(head, AppliedUndef):
                raise EvaluationError(f"cannot evaluate derivative of {head}")
            counts = [0] * len(head.args)
            for var, cnt in node.variable_count:
                counts[head.args.index(var)] += int(cnt)
            args = [rec(a) for a in head.args]
            fn = _opaque_lookup(rules, type(head).__name__, tuple(counts))
            return float(fn(*args))
        raise EvaluationError(f"cannot evaluate node: {node}")

    out = rec(sp.sympify(e))
    if math.isnan(out) or math.isinf(out):
        raise EvaluationError(f"numeric domain error: result {out}")
    return out


def atoms_of(e: Expr) -> set[Expr]:
    """All generators of ``e``: symbols, opaque atoms and their derivatives."""
    e = sp.sympify(e)
    return set(e.free_symbols) | set(e.atoms(AppliedUndef)) | set(e.atoms(sp.Derivative))


def free_symbols(e: Expr) -> set[sp.Symbol]:
    """The free symbols of ``e`` (arguments of opaque atoms included)."""
    return set(sp.sympify(e).free_symbols)


def as_fraction(x) -> Expr:
    """Exact rational from int/Fraction/str ('3', '1/2'); floats refused."""
    if isinstance(x, float):
        raise ExprError("floating-point literals are not exact; use rationals")
    return sp.Rational(Fraction(x))
