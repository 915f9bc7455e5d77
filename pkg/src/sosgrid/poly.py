"""Sparse multivariate polynomial arithmetic.

Polynomials carry float64 coefficients keyed by monomials; variables are
small integer ids resolved to display names through a VariableRegistry.
Everything downstream (sector bounds, Lyapunov candidates, SOS constraint
expressions) is built from these values.  All values are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

from typing import Iterable, Mapping, Sequence

# Coefficients smaller than this are dropped after every operation so term
# maps never accumulate float dust.
COEFF_EPS = 1e-14


class PolyError(ValueError):
    pass


class VariableRegistry:
    """Maps dense integer variable ids to display names and back."""

    def __init__(self):
        self._names: list[str] = []
        self._ids: dict[str, int] = {}

    def add(self, name: str) -> int:
        if name in self._ids:
            raise PolyError(f"variable {name!r} already registered")
        vid = len(self._names)
        self._names.append(name)
        self._ids[name] = vid
        return vid

    def add_all(self, names: Iterable[str]) -> list[int]:
        return [self.add(n) for n in names]

    def name(self, vid: int) -> str:
        try:
            return self._names[vid]
        except IndexError:
            raise PolyError(f"unknown variable id {vid}") from None

    def id(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise PolyError(f"unknown variable {name!r}") from None

    def __len__(self) -> int:
        return len(self._names)


class Monomial:
    """Product of variables with positive integer exponents.

    Stored as a sorted tuple of (variable_id, exponent) pairs; zero
    exponents are never stored, so the empty tuple is the constant 1.
    """

    __slots__ = ("exps", "_hash")

    def __init__(self, exps: Mapping[int, int] | Iterable[tuple[int, int]] = ()):
        items = exps.items() if isinstance(exps, Mapping) else exps
        kept = []
        for vid, e in items:
            if e < 0:
                raise PolyError(f"negative exponent {e} for variable {vid}")
            if e > 0:
                kept.append((int(vid), int(e)))
        kept.sort()
        self.exps = tuple(kept)
        self._hash = hash(self.exps)

    @staticmethod
    def one() -> "Monomial":
        return _ONE

    @staticmethod
    def var(vid: int, exp: int = 1) -> "Monomial":
        return Monomial(((vid, exp),))

    def degree(self) -> int:
        return sum(e for _, e in self.exps)

    def exponent(self, vid: int) -> int:
        for v, e in self.exps:
            if v == vid:
                return e
        return 0

    def variables(self) -> tuple[int, ...]:
        return tuple(v for v, _ in self.exps)

    def mul(self, other: "Monomial") -> "Monomial":
        if not self.exps:
            return other
        if not other.exps:
            return self
        merged: dict[int, int] = dict(self.exps)
        for v, e in other.exps:
            merged[v] = merged.get(v, 0) + e
        return Monomial(merged)

    def grlex_key(self) -> tuple:
        # Graded lexicographic: total degree first, then the exponent
        # sequence. Fixed ordering keeps serialized output stable.
        return (self.degree(), self.exps)

    def __eq__(self, other) -> bool:
        return isinstance(other, Monomial) and self.exps == other.exps

    def __hash__(self) -> int:
        return self._hash

    def __repr__(self) -> str:
        if not self.exps:
            return "1"
        return "*".join(f"x{v}^{e}" if e > 1 else f"x{v}" for v, e in self.exps)


_ONE = Monomial()


class Polynomial:
    """Immutable sparse polynomial with float coefficients."""

    __slots__ = ("terms",)

    def __init__(self, terms: Mapping[Monomial, float] | None = None):
        cleaned: dict[Monomial, float] = {}
        if terms:
            for m, c in terms.items():
                c = float(c)
                if abs(c) >= COEFF_EPS:
                    cleaned[m] = c
        self.terms = cleaned

    # -- constructors ------------------------------------------------------

    @staticmethod
    def zero() -> "Polynomial":
        return Polynomial()

    @staticmethod
    def constant(value: float) -> "Polynomial":
        return Polynomial({_ONE: value})

    @staticmethod
    def variable(vid: int) -> "Polynomial":
        return Polynomial({Monomial.var(vid): 1.0})

    @staticmethod
    def monomial(mono: Monomial, coeff: float = 1.0) -> "Polynomial":
        return Polynomial({mono: coeff})

    @staticmethod
    def linear(coeffs: Mapping[int, float], const: float = 0.0) -> "Polynomial":
        terms = {Monomial.var(v): c for v, c in coeffs.items()}
        terms[_ONE] = const
        return Polynomial(terms)

    # -- queries -----------------------------------------------------------

    def is_zero(self) -> bool:
        return not self.terms

    def degree(self) -> int:
        return max((m.degree() for m in self.terms), default=0)

    def variables(self) -> tuple[int, ...]:
        seen: set[int] = set()
        for m in self.terms:
            seen.update(m.variables())
        return tuple(sorted(seen))

    def coefficient(self, mono: Monomial) -> float:
        return self.terms.get(mono, 0.0)

    def sorted_terms(self) -> list[tuple[Monomial, float]]:
        return sorted(self.terms.items(), key=lambda t: t[0].grlex_key())

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other) -> "Polynomial":
        other = _as_poly(other)
        merged = dict(self.terms)
        for m, c in other.terms.items():
            merged[m] = merged.get(m, 0.0) + c
        return Polynomial(merged)

    __radd__ = __add__

    def __neg__(self) -> "Polynomial":
        return Polynomial({m: -c for m, c in self.terms.items()})

    def __sub__(self, other) -> "Polynomial":
        return self + (-_as_poly(other))

    def __rsub__(self, other) -> "Polynomial":
        return _as_poly(other) + (-self)

    def __mul__(self, other) -> "Polynomial":
        if isinstance(other, (int, float)):
            return Polynomial({m: c * other for m, c in self.terms.items()})
        other = _as_poly(other)
        out: dict[Monomial, float] = {}
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                m = m1.mul(m2)
                out[m] = out.get(m, 0.0) + c1 * c2
        return Polynomial(out)

    __rmul__ = __mul__

    def __pow__(self, n: int) -> "Polynomial":
        if n < 0:
            raise PolyError("negative powers unsupported")
        out = Polynomial.constant(1.0)
        base = self
        while n:
            if n & 1:
                out = out * base
            base = base * base
            n >>= 1
        return out

    # -- calculus / composition --------------------------------------------

    def diff(self, vid: int) -> "Polynomial":
        out: dict[Monomial, float] = {}
        for m, c in self.terms.items():
            e = m.exponent(vid)
            if e == 0:
                continue
            reduced = {v: x for v, x in m.exps if v != vid}
            if e > 1:
                reduced[vid] = e - 1
            mono = Monomial(reduced)
            out[mono] = out.get(mono, 0.0) + c * e
        return Polynomial(out)

    def substitute_linear(
        self,
        matrix: Sequence[Sequence[float]],
        in_vars: Sequence[int],
        out_vars: Sequence[int],
    ) -> "Polynomial":
        """Compose with linear forms: in_vars[i] := sum_j matrix[i][j] * out_vars[j].

        Variables not listed in in_vars pass through unchanged.
        """
        if len(matrix) != len(in_vars):
            raise PolyError(
                f"substitution matrix has {len(matrix)} rows for {len(in_vars)} variables"
            )
        forms: dict[int, Polynomial] = {}
        for row, vid in zip(matrix, in_vars):
            if len(row) != len(out_vars):
                raise PolyError(
                    f"substitution row length {len(row)} != {len(out_vars)} output variables"
                )
            forms[vid] = Polynomial.linear(
                {ov: float(cf) for ov, cf in zip(out_vars, row)}
            )
        result = Polynomial.zero()
        for m, c in self.terms.items():
            term = Polynomial.constant(c)
            for v, e in m.exps:
                if v in forms:
                    term = term * forms[v] ** e
                else:
                    term = term * Polynomial.monomial(Monomial.var(v, e))
            result = result + term
        return result

    def evaluate(self, point: Mapping[int, float] | Sequence[float]) -> float:
        getter = point.get if isinstance(point, Mapping) else None
        total = 0.0
        for m, c in self.terms.items():
            val = c
            for v, e in m.exps:
                if getter is not None:
                    x = getter(v)
                    if x is None:
                        raise PolyError(f"no value supplied for variable {v}")
                else:
                    if v >= len(point):
                        raise PolyError(f"no value supplied for variable {v}")
                    x = point[v]
                val *= x**e
            total += val
        return total

    # -- serialization -------------------------------------------------------

    def to_json(self, registry: VariableRegistry) -> list[dict]:
        return [
            {
                "exponents": {registry.name(v): e for v, e in m.exps},
                "coeff": c,
            }
            for m, c in self.sorted_terms()
        ]

    @staticmethod
    def from_json(data: Iterable[Mapping], registry: VariableRegistry) -> "Polynomial":
        terms: dict[Monomial, float] = {}
        for entry in data:
            mono = Monomial(
                {registry.id(n): int(e) for n, e in entry["exponents"].items()}
            )
            terms[mono] = terms.get(mono, 0.0) + float(entry["coeff"])
        return Polynomial(terms)

    def format(self, registry: VariableRegistry | None = None) -> str:
        if not self.terms:
            return "0"
        parts = []
        for m, c in self.sorted_terms():
            if registry is None:
                mono = repr(m)
            else:
                mono = "*".join(
                    f"{registry.name(v)}^{e}" if e > 1 else registry.name(v)
                    for v, e in m.exps
                )
            parts.append(f"{c:+.12g}" + (f"*{mono}" if mono and mono != "1" else ""))
        return " ".join(parts)

    def max_coeff_diff(self, other: "Polynomial") -> float:
        monos = set(self.terms) | set(other.terms)
        return max(
            (abs(self.terms.get(m, 0.0) - other.terms.get(m, 0.0)) for m in monos),
            default=0.0,
        )

    def __repr__(self) -> str:
        return f"Polynomial({self.format()})"


def _as_poly(value) -> Polynomial:
    if isinstance(value, Polynomial):
        return value
    if isinstance(value, (int, float)):
        return Polynomial.constant(float(value))
    raise PolyError(f"cannot coerce {type(value).__name__} to Polynomial")


class PolyVector:
    """Fixed-length ordered vector of polynomials (one entry per edge)."""

    __slots__ = ("entries",)

    def __init__(self, entries: Iterable[Polynomial]):
        self.entries = tuple(entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, idx: int) -> Polynomial:
        return self.entries[idx]

    def __iter__(self):
        return iter(self.entries)

    def evaluate(self, point) -> list[float]:
        return [p.evaluate(point) for p in self.entries]


def gradient(p: Polynomial, variables: Sequence[int]) -> PolyVector:
    """Gradient of p with respect to an ordered variable list."""
    missing = set(p.variables()) - set(variables)
    if missing:
        raise PolyError(f"gradient variable list misses ids {sorted(missing)}")
    return PolyVector(p.diff(v) for v in variables)


def monomials_up_to(
    variables: Sequence[int],
    degree: int,
    parity: str = "all",
    include_constant: bool = True,
) -> list[Monomial]:
    """All monomials over `variables` with total degree <= degree.

    parity="even" keeps only even total degrees. Output is graded-lex sorted.
    """
    if parity not in ("all", "even"):
        raise PolyError(f"unknown parity {parity!r}")
    out: list[Monomial] = []

    def rec(idx: int, remaining: int, current: list[tuple[int, int]]):
        if idx == len(variables):
            mono = Monomial(current)
            d = mono.degree()
            if d == 0 and not include_constant:
                return
            if parity == "even" and d % 2 == 1:
                return
            out.append(mono)
            return
        for e in range(remaining + 1):
            if e:
                current.append((variables[idx], e))
            rec(idx + 1, remaining - e, current)
            if e:
                current.pop()

    rec(0, degree, [])
    out.sort(key=Monomial.grlex_key)
    return out


def poly_close(p: Polynomial, q: Polynomial, tol: float = 1e-12) -> bool:
    return p.max_coeff_diff(q) <= tol
