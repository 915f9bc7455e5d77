"""SOS programming layer.

Declares decision polynomials (unknown coefficients become free SDP
scalars), imposes sum-of-squares constraints on expressions that are affine
in those coefficients, and compiles everything into a single block-diagonal
SDP by Gram-matrix coefficient matching:

    p(x) = z(x)^T Q z(x),  Q >= 0

with one equality per matched monomial.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .poly import (
    Monomial,
    Polynomial,
    PolyError,
    VariableRegistry,
    monomials_up_to,
)
from .sdp import (
    FEASIBLE,
    SdpConstraint,
    SdpOutcome,
    SdpProblem,
    SolverSettings,
    eigen_min,
    solve_feasibility,
)

GRAM_EIG_TOL = 1e-7
RESIDUAL_TOL = 1e-6
COEFF_ROUND = 1e-10  # resolved coefficients below this are rounded to zero


class SosError(ValueError):
    pass


class CompileInfeasible(SosError):
    """A monomial with nonzero constant coefficient has no Gram pair and no
    decision term: the constraint cannot be satisfied by any Gram matrix."""


@dataclass(frozen=True)
class _Affine:
    """const + sum(lin[d] * decision_d); the coefficient of one monomial."""

    const: float
    lin: tuple[tuple[int, float], ...]

    def is_pure_const(self) -> bool:
        return not self.lin


class AffinePoly:
    """Polynomial whose coefficients are affine in decision scalars."""

    __slots__ = ("terms",)

    def __init__(self, terms: Mapping[Monomial, tuple[float, dict[int, float]]] | None = None):
        self.terms: dict[Monomial, tuple[float, dict[int, float]]] = {}
        if terms:
            for m, (c, lin) in terms.items():
                self._put(m, c, lin)

    def _put(self, m: Monomial, const: float, lin: Mapping[int, float]):
        kept = {d: v for d, v in lin.items() if abs(v) >= 1e-14}
        if abs(const) >= 1e-14 or kept:
            self.terms[m] = (const, dict(kept))

    @staticmethod
    def from_poly(p: Polynomial) -> "AffinePoly":
        out = AffinePoly()
        for m, c in p.terms.items():
            out.terms[m] = (c, {})
        return out

    def __add__(self, other) -> "AffinePoly":
        other = _as_affine(other)
        out = AffinePoly()
        out.terms = {m: (c, dict(lin)) for m, (c, lin) in self.terms.items()}
        for m, (c, lin) in other.terms.items():
            c0, l0 = out.terms.get(m, (0.0, {}))
            merged = dict(l0)
            for d, v in lin.items():
                merged[d] = merged.get(d, 0.0) + v
            out.terms[m] = (c0 + c, merged)
        out._clean()
        return out

    def __neg__(self) -> "AffinePoly":
        out = AffinePoly()
        out.terms = {
            m: (-c, {d: -v for d, v in lin.items()}) for m, (c, lin) in self.terms.items()
        }
        return out

    def __sub__(self, other) -> "AffinePoly":
        return self + (-_as_affine(other))

    def mul_poly(self, p: Polynomial) -> "AffinePoly":
        """Multiply by a constant-coefficient polynomial (keeps affinity)."""
        out = AffinePoly()
        acc: dict[Monomial, tuple[float, dict[int, float]]] = {}
        for m1, (c1, lin1) in self.terms.items():
            for m2, c2 in p.terms.items():
                m = m1.mul(m2)
                c0, l0 = acc.get(m, (0.0, {}))
                c0 += c1 * c2
                if lin1:
                    l0 = dict(l0)
                    for d, v in lin1.items():
                        l0[d] = l0.get(d, 0.0) + v * c2
                acc[m] = (c0, l0)
        out.terms = acc
        out._clean()
        return out

    def scale(self, a: float) -> "AffinePoly":
        out = AffinePoly()
        out.terms = {
            m: (c * a, {d: v * a for d, v in lin.items()})
            for m, (c, lin) in self.terms.items()
        }
        return out

    def diff(self, vid: int) -> "AffinePoly":
        out = AffinePoly()
        acc: dict[Monomial, tuple[float, dict[int, float]]] = {}
        for m, (c, lin) in self.terms.items():
            e = m.exponent(vid)
            if e == 0:
                continue
            reduced = {v: x for v, x in m.exps if v != vid}
            if e > 1:
                reduced[vid] = e - 1
            mono = Monomial(reduced)
            c0, l0 = acc.get(mono, (0.0, {}))
            c0 += c * e
            l0 = dict(l0)
            for d, v in lin.items():
                l0[d] = l0.get(d, 0.0) + v * e
            acc[mono] = (c0, l0)
        out.terms = acc
        out._clean()
        return out

    def _clean(self):
        dead = []
        for m, (c, lin) in self.terms.items():
            lin2 = {d: v for d, v in lin.items() if abs(v) >= 1e-14}
            if abs(c) < 1e-14 and not lin2:
                dead.append(m)
            else:
                self.terms[m] = (c, lin2)
        for m in dead:
            del self.terms[m]

    def variables(self) -> tuple[int, ...]:
        seen: set[int] = set()
        for m in self.terms:
            seen.update(m.variables())
        return tuple(sorted(seen))

    def degree(self) -> int:
        return max((m.degree() for m in self.terms), default=0)

    def resolve(self, values: Mapping[int, float]) -> Polynomial:
        """Substitute decision values, yielding a concrete polynomial."""
        out: dict[Monomial, float] = {}
        for m, (c, lin) in self.terms.items():
            val = c + sum(v * values[d] for d, v in lin.items())
            out[m] = val
        return Polynomial(out)


def _as_affine(x) -> AffinePoly:
    if isinstance(x, AffinePoly):
        return x
    if isinstance(x, Polynomial):
        return AffinePoly.from_poly(x)
    if isinstance(x, (int, float)):
        return AffinePoly.from_poly(Polynomial.constant(float(x)))
    raise SosError(f"cannot use {type(x).__name__} in an SOS expression")


@dataclass(frozen=True)
class DecisionPoly:
    """Unknown polynomial: one free SDP scalar per basis monomial."""

    name: str
    variables: tuple[int, ...]
    basis: tuple[Monomial, ...]
    coeff_ids: tuple[int, ...]

    def as_affine(self) -> AffinePoly:
        out = AffinePoly()
        for m, d in zip(self.basis, self.coeff_ids):
            out.terms[m] = (0.0, {d: 1.0})
        return out

    def degree_bound(self) -> int:
        return max((m.degree() for m in self.basis), default=0)


@dataclass
class SosConstraintDecl:
    name: str
    expr: AffinePoly
    gram_basis: tuple[Monomial, ...]


@dataclass(frozen=True)
class SosCertificate:
    """Validated feasibility witness: resolved decisions + PSD Gram per constraint."""

    decisions: dict[str, Polynomial]
    decision_values: dict[int, float]
    grams: tuple[np.ndarray, ...]
    gram_bases: tuple[tuple[Monomial, ...], ...]
    constraint_names: tuple[str, ...]
    residual: float

    def to_json(self, registry: VariableRegistry) -> dict:
        return {
            "decisions": {
                name: poly.to_json(registry) for name, poly in self.decisions.items()
            },
            "constraints": [
                {
                    "name": name,
                    "gram_basis": [
                        {registry.name(v): e for v, e in m.exps} for m in basis
                    ],
                    "gram": [list(row) for row in gram],
                }
                for name, basis, gram in zip(
                    self.constraint_names, self.gram_bases, self.grams
                )
            ],
            "residual": self.residual,
        }


class CertificateError(SosError):
    """Witness failed re-validation; caller treats the program as not certified."""


class SosProgram:
    def __init__(self, registry: VariableRegistry):
        self.registry = registry
        self.decisions: list[DecisionPoly] = []
        self.constraints: list[SosConstraintDecl] = []
        self.equalities: list[tuple[AffinePoly, str]] = []
        self._n_coeffs = 0

    # -- declarations --------------------------------------------------------

    def declare_poly(
        self,
        variables: Sequence[int],
        degree_bound: int,
        parity: str = "all",
        vanish_at_origin: bool = False,
        name: str | None = None,
    ) -> DecisionPoly:
        if degree_bound < 1 and vanish_at_origin:
            raise SosError("degree bound 0 with vanish_at_origin leaves an empty basis")
        basis = monomials_up_to(
            variables, degree_bound, parity=parity, include_constant=not vanish_at_origin
        )
        if not basis:
            raise SosError("empty decision basis")
        ids = tuple(range(self._n_coeffs, self._n_coeffs + len(basis)))
        self._n_coeffs += len(basis)
        dp = DecisionPoly(
            name or f"p{len(self.decisions)}", tuple(variables), tuple(basis), ids
        )
        self.decisions.append(dp)
        return dp

    def add_sos_constraint(
        self,
        expression,
        gram_basis: Sequence[Monomial] | None = None,
        newton_reduce: bool = False,
        name: str | None = None,
    ) -> int:
        """Constrain expression (affine in decisions) to be SOS.

        The Gram basis defaults to all monomials of degree <= ceil(deg/2) in
        the expression's variables.  newton_reduce shrinks it to monomials z
        with 2z inside the Newton polytope of the expression support, which
        never changes feasibility (any SOS decomposition already lives there).
        """
        expr = _as_affine(expression)
        if not expr.terms:
            raise SosError("empty SOS expression")
        if gram_basis is None:
            variables = expr.variables()
            half = (expr.degree() + 1) // 2
            basis = monomials_up_to(variables, half)
            if newton_reduce:
                basis = newton_polytope_filter(basis, list(expr.terms.keys()))
        else:
            basis = list(gram_basis)
        if not basis:
            raise SosError("empty Gram basis")
        cid = len(self.constraints)
        decl = SosConstraintDecl(name or f"sos{cid}", expr, tuple(basis))
        self.constraints.append(decl)
        self._check_matchable(decl)
        return cid

    def add_poly_equality(self, lhs, rhs=0.0, name: str | None = None) -> None:
        """Pin an affine expression to a fixed polynomial, coefficient-wise."""
        diff = _as_affine(lhs) - _as_affine(rhs)
        self.equalities.append((diff, name or f"eq{len(self.equalities)}"))

    def _check_matchable(self, decl: SosConstraintDecl) -> None:
        products = set()
        basis = decl.gram_basis
        for i in range(len(basis)):
            for j in range(i, len(basis)):
                products.add(basis[i].mul(basis[j]))
        for m, (c, lin) in decl.expr.terms.items():
            if m not in products and not lin and abs(c) > 1e-12:
                raise CompileInfeasible(
                    f"constraint {decl.name!r}: monomial {m!r} (coeff {c:g}) "
                    f"cannot be produced by any Gram pair"
                )

    # -- compilation ---------------------------------------------------------

    def compile(self) -> SdpProblem:
        if not self.constraints:
            raise SosError("program has no SOS constraints")
        blocks = tuple(len(c.gram_basis) for c in self.constraints)
        cons: list[SdpConstraint] = []
        for b, decl in enumerate(self.constraints):
            basis = decl.gram_basis
            pair_map: dict[Monomial, list[tuple[int, int, float]]] = {}
            for i in range(len(basis)):
                for j in range(i, len(basis)):
                    m = basis[i].mul(basis[j])
                    pair_map.setdefault(m, []).append((i, j, 1.0 if i == j else 2.0))
            monos = set(pair_map) | set(decl.expr.terms)
            for m in sorted(monos, key=Monomial.grlex_key):
                entries = tuple(
                    (b, i, j, c) for i, j, c in pair_map.get(m, ())
                )
                const, lin = decl.expr.terms.get(m, (0.0, {}))
                free = tuple((d, -v) for d, v in sorted(lin.items()))
                if not entries and not free:
                    if abs(const) > 1e-12:
                        raise CompileInfeasible(
                            f"constraint {decl.name!r}: unmatchable monomial {m!r}"
                        )
                    continue
                cons.append(SdpConstraint(entries, free, const))
        for expr, eq_name in self.equalities:
            for m in sorted(expr.terms, key=Monomial.grlex_key):
                const, lin = expr.terms[m]
                free = tuple((d, v) for d, v in sorted(lin.items()))
                if not free:
                    if abs(const) > 1e-12:
                        raise CompileInfeasible(
                            f"equality {eq_name!r}: contradictory row for {m!r}"
                        )
                    continue
                cons.append(SdpConstraint((), free, -const))
        return SdpProblem(blocks, self._n_coeffs, tuple(cons))

    def solve(self, settings: SolverSettings | None = None) -> SdpOutcome:
        return solve_feasibility(self.compile(), settings)

    # -- certificate extraction ----------------------------------------------

    def extract_certificate(self, outcome: SdpOutcome) -> SosCertificate:
        if outcome.verdict != FEASIBLE or outcome.witness is None:
            raise CertificateError("no witness to extract (verdict was not Feasible)")
        values: dict[int, float] = {}
        for dp in self.decisions:
            for d in dp.coeff_ids:
                v = float(outcome.witness.free[d])
                values[d] = 0.0 if abs(v) < COEFF_ROUND else v
        for d in range(self._n_coeffs):
            values.setdefault(d, 0.0)
        decisions = {dp.name: dp.as_affine().resolve(values) for dp in self.decisions}

        grams = []
        worst = 0.0
        for decl, gram in zip(self.constraints, outcome.witness.blocks):
            if eigen_min(gram) < -GRAM_EIG_TOL:
                raise CertificateError(
                    f"Gram matrix for {decl.name!r} lost positive semidefiniteness"
                )
            target = decl.expr.resolve(values)
            recon = gram_polynomial(decl.gram_basis, gram)
            worst = max(worst, target.max_coeff_diff(recon))
            grams.append(gram.copy())
        if worst > RESIDUAL_TOL:
            raise CertificateError(f"reconstruction residual {worst:g} exceeds 1e-6")
        return SosCertificate(
            decisions,
            values,
            tuple(grams),
            tuple(c.gram_basis for c in self.constraints),
            tuple(c.name for c in self.constraints),
            worst,
        )


def gram_polynomial(basis: Sequence[Monomial], gram: np.ndarray) -> Polynomial:
    """Expand z^T Q z into a polynomial."""
    out: dict[Monomial, float] = {}
    n = len(basis)
    for i in range(n):
        for j in range(i, n):
            c = gram[i, j] * (1.0 if i == j else 2.0)
            if c == 0.0:
                continue
            m = basis[i].mul(basis[j])
            out[m] = out.get(m, 0.0) + c
    return Polynomial(out)


def newton_polytope_filter(
    candidates: Sequence[Monomial], support: Sequence[Monomial]
) -> list[Monomial]:
    """Keep candidates z with 2*z inside the Newton polytope of the support.

    Exact reduction (Reznick): every SOS decomposition of a polynomial with
    this support uses only such monomials.
    """
    if not support:
        return []
    vids = sorted({v for m in list(candidates) + list(support) for v in m.variables()})
    idx = {v: k for k, v in enumerate(vids)}
    dim = len(vids)

    def vec(m: Monomial) -> np.ndarray:
        x = np.zeros(dim)
        for v, e in m.exps:
            x[idx[v]] = e
        return x

    pts = np.array([vec(m) for m in support])
    kept = []
    tests = np.array([2.0 * vec(m) for m in candidates])
    inside = _points_in_hull(tests, pts)
    for m, ok in zip(candidates, inside):
        if ok:
            kept.append(m)
    return kept


def _points_in_hull(tests: np.ndarray, pts: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Membership of each test point in conv(pts); LP fallback for flat hulls."""
    npts = pts.shape[0]
    if npts == 1:
        return np.array([bool(np.all(np.abs(t - pts[0]) <= tol)) for t in tests])
    try:
        from scipy.spatial import ConvexHull

        try:
            hull = ConvexHull(pts)
        except Exception:
            hull = ConvexHull(pts, qhull_options="QJ Pp")
        eqs = hull.equations  # facet normals: n.x + d <= 0 inside
        vals = tests @ eqs[:, :-1].T + eqs[:, -1]
        return np.all(vals <= 1e-7, axis=1)
    except Exception:
        pass
    from scipy.optimize import linprog

    out = np.zeros(len(tests), dtype=bool)
    A_eq = np.vstack([pts.T, np.ones(npts)])
    for k, t in enumerate(tests):
        b_eq = np.concatenate([t, [1.0]])
        res = linprog(
            np.zeros(npts), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs"
        )
        out[k] = res.status == 0
    return out


def sos_basis_count(n_vars: int, degree: int, parity: str = "all", include_constant: bool = True) -> int:
    """Closed-form count check used by tests: C(n+d, d) filtered."""
    total = 0
    for d in range(degree + 1):
        if parity == "even" and d % 2 == 1:
            continue
        if d == 0 and not include_constant:
            continue
        total += math.comb(d + n_vars - 1, n_vars - 1) if n_vars > 0 else (1 if d == 0 else 0)
    return total
