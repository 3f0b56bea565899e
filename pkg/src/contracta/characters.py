"""Characters of partial contractions, their ordering and the case predicates.

A character records which factors the gradient factors hit and how the
free indices spread over the real factors.  Four levels exist (weak,
simple, double, refined) and each is a function of the next finer one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from .expr import (
    Contraction,
    ExprError,
    Factor,
    IndexRef,
    LinComb,
    splice,
    stats,
    validate_acceptable,
)

LEVELS = ("weak", "simple", "double", "refined")
MARKS = ("none", "*", "**")
_SENTINEL = (-1, -1)


class CharacterError(ValueError):
    """Input outside the domain of a character operation."""


# ------------------------------------------------------------------ values


@dataclass(frozen=True)
class WeakChar:
    omega_sets: tuple[tuple[int, tuple[int, ...]], ...]
    curv_sets: tuple[tuple[int, ...], ...]

    def to_json(self) -> dict:
        return {
            "level": "weak",
            "L1": [{"omega": h, "phi": list(s)} for h, s in self.omega_sets],
            "L2": [list(s) for s in self.curv_sets],
        }


@dataclass(frozen=True)
class SimpleChar:
    L1: tuple[tuple[int, tuple[int, ...]], ...]
    L2: tuple[tuple[int, ...], ...]
    L3: tuple[tuple[int, tuple[int, ...]], ...]

    def weak(self) -> WeakChar:
        curv = list(self.L2) + [tuple(sorted((a, *s))) for a, s in self.L3]
        return WeakChar(self.L1, tuple(sorted(curv)))

    def defining_set(self) -> frozenset[int]:
        """Labels of the tilde gradients sitting on S* i-slots."""
        return frozenset(a for a, _ in self.L3)

    def to_json(self) -> dict:
        return {
            "level": "simple",
            "L1": [{"omega": h, "phi": list(s)} for h, s in self.L1],
            "L2": [list(s) for s in self.L2],
            "L3": [{"tilde": a, "primed": list(s)} for a, s in self.L3],
        }


@dataclass(frozen=True)
class RefinedDoubleChar:
    """Free-index counts aligned with the simple character's lists.

    ``H2`` and ``H3`` hold ``(count, mark)`` pairs.  At the double level
    every mark is ``"none"`` and ``refined`` is false.
    """

    simple: SimpleChar
    H1: tuple[int, ...]
    H2: tuple[tuple[int, str], ...]
    H3: tuple[tuple[int, str], ...]
    refined: bool = True

    def double(self) -> "RefinedDoubleChar":
        if not self.refined:
            return self
        return _assemble(
            self.simple,
            [(h, s, n) for (h, s), n in zip(self.simple.L1, self.H1)],
            [(s, n, "none") for s, (n, _) in zip(self.simple.L2, self.H2)],
            [(a, s, n, "none") for (a, s), (n, _) in zip(self.simple.L3, self.H3)],
            refined=False,
        )

    def to_json(self) -> dict:
        out = self.simple.to_json()
        out["level"] = "refined" if self.refined else "double"
        out["H1"] = list(self.H1)
        if self.refined:
            out["H2"] = [{"free": n, "mark": m} for n, m in self.H2]
            out["H3"] = [{"free": n, "mark": m} for n, m in self.H3]
        else:
            out["H2"] = [n for n, _ in self.H2]
            out["H3"] = [n for n, _ in self.H3]
        return out


def _assemble(simple, om, cr, sr, refined: bool) -> RefinedDoubleChar:
    om = sorted(om)
    cr = sorted(cr, key=lambda r: (r[0], r[1], MARKS.index(r[2])))
    sr = sorted(sr, key=lambda r: (r[0], r[1], r[2], MARKS.index(r[3])))
    return RefinedDoubleChar(
        simple,
        tuple(n for _, _, n in om),
        tuple((n, m) for _, n, m in cr),
        tuple((n, m) for _, _, n, m in sr),
        refined,
    )


def character_from_json(data: dict):
    level = data["level"]
    L1 = tuple((e["omega"], tuple(e["phi"])) for e in data["L1"])
    if level == "weak":
        return WeakChar(L1, tuple(tuple(s) for s in data["L2"]))
    simple = SimpleChar(
        L1,
        tuple(tuple(s) for s in data["L2"]),
        tuple((e["tilde"], tuple(e["primed"])) for e in data["L3"]),
    )
    if level == "simple":
        return simple
    if level == "double":
        return RefinedDoubleChar(
            simple,
            tuple(data["H1"]),
            tuple((n, "none") for n in data["H2"]),
            tuple((n, "none") for n in data["H3"]),
            refined=False,
        )
    if level == "refined":
        return RefinedDoubleChar(
            simple,
            tuple(data["H1"]),
            tuple((e["free"], e["mark"]) for e in data["H2"]),
            tuple((e["free"], e["mark"]) for e in data["H3"]),
        )
    raise CharacterError(f"unknown character level {level!r}")


def downgrade(ch, level: str):
    """Project a character onto a coarser level."""
    if level not in LEVELS:
        raise CharacterError(f"unknown level {level!r}")
    if isinstance(ch, RefinedDoubleChar):
        if level == "refined":
            if not ch.refined:
                raise CharacterError("a double character carries no marks")
            return ch
        if level == "double":
            return ch.double()
        ch = ch.simple
    if isinstance(ch, SimpleChar):
        if level == "simple":
            return ch
        if level == "weak":
            return ch.weak()
    if isinstance(ch, WeakChar) and level == "weak":
        return ch
    raise CharacterError(f"cannot refine a character to level {level!r}")


# ------------------------------------------------------------ field access


def _partner_factor(c: Contraction, ref: IndexRef) -> Factor | None:
    q = c.partner(ref)
    return None if q is None else c.factors[q.pos]


def _phis_on(c: Contraction, pos: int, kinds=("ph", "ph'", "ph~")) -> list[tuple[str, Factor]]:
    out = []
    for r in c.refs(pos):
        g = _partner_factor(c, r)
        if g is not None and g.kind in kinds:
            out.append((r.slot, g))
    return out


def _labels_on(c: Contraction, pos: int, kinds=("ph", "ph'", "ph~")) -> tuple[int, ...]:
    return tuple(sorted(g.label for _, g in _phis_on(c, pos, kinds)))


def _special(f: Factor, slot: str) -> bool:
    if f.kind == "CR":
        return slot in ("i", "j", "k", "l")
    if f.kind == "SR":
        return slot in ("k", "l")
    return False


def _frees_on(c: Contraction, pos: int, counted: Iterable[IndexRef] | None = None) -> list[str]:
    counted = c.free if counted is None else counted
    return [r.slot for r in counted if r.pos == pos]


def _mark(f: Factor, frees: list[str]) -> str:
    return MARKS[min(2, sum(1 for s in frees if _special(f, s)))]


def real_positions(c: Contraction) -> list[int]:
    return [p for p, f in enumerate(c.factors) if not f.is_gradient]


def is_simple_factor(c: Contraction, pos: int) -> bool:
    """S* factors touching no primed phi and Omegas touching no phi."""
    f = c.factors[pos]
    if f.kind == "SR":
        return not _phis_on(c, pos, ("ph'",))
    if f.kind == "Om":
        return not _phis_on(c, pos)
    return True


# ------------------------------------------------------------- characters


def _check_form(c: Contraction, level: str):
    v = validate_acceptable(c, "form2")
    if not v and level == "weak":
        v = validate_acceptable(c, "form1")
    if not v:
        raise CharacterError("contraction is not acceptable: " + "; ".join(v.failures))


def _weak(c: Contraction) -> WeakChar:
    om, curv = [], []
    for p, f in enumerate(c.factors):
        if f.kind == "Om":
            om.append((f.label, _labels_on(c, p)))
        elif f.is_curvature:
            curv.append(_labels_on(c, p))
    return WeakChar(tuple(sorted(om)), tuple(sorted(curv)))


def _simple(c: Contraction) -> SimpleChar:
    L1, L2, L3 = [], [], []
    for p, f in enumerate(c.factors):
        if f.kind == "Om":
            L1.append((f.label, _labels_on(c, p)))
        elif f.kind == "CR":
            L2.append(_labels_on(c, p))
        elif f.kind == "SR":
            tildes = _labels_on(c, p, ("ph~",))
            if len(tildes) != 1:
                raise CharacterError(f"S* factor f{p + 1} lacks its tilde gradient")
            L3.append((tildes[0], _labels_on(c, p, ("ph'",))))
    return SimpleChar(tuple(sorted(L1)), tuple(sorted(L2)), tuple(sorted(L3)))


def _double(c: Contraction, alpha: int | None, refined: bool) -> RefinedDoubleChar:
    counted = c.free if alpha is None else c.free[:alpha]
    om, cr, sr = [], [], []
    for p, f in enumerate(c.factors):
        frees = _frees_on(c, p, counted)
        if f.is_curvature:
            if ("i" in frees and "j" in frees) or ("k" in frees and "l" in frees):
                raise CharacterError(
                    f"f{p + 1} has an antisymmetric pair of free indices"
                )
        mark = _mark(f, frees) if refined else "none"
        if f.kind == "Om":
            om.append((f.label, _labels_on(c, p), len(frees)))
        elif f.kind == "CR":
            cr.append((_labels_on(c, p), len(frees), mark))
        elif f.kind == "SR":
            tilde = _labels_on(c, p, ("ph~",))[0]
            sr.append((tilde, _labels_on(c, p, ("ph'",)), len(frees), mark))
    return _assemble(_simple(c), om, cr, sr, refined)


def compute_character(c: Contraction, level: str = "refined", alpha: int | None = None,
                      strict: bool = True):
    """The character of ``c`` at ``level``.

    With ``alpha`` only the first ``alpha`` free indices are counted.
    ``strict=False`` skips the acceptability check.
    """
    if level not in LEVELS:
        raise CharacterError(f"unknown level {level!r}")
    if alpha is not None and not 0 <= alpha <= c.rank:
        raise CharacterError(f"alpha={alpha} exceeds the rank {c.rank}")
    if strict:
        _check_form(c, level)
    if level == "weak":
        return _weak(c)
    if level == "simple":
        return _simple(c)
    return _double(c, alpha, level == "refined")


# ---------------------------------------------------------------- ordering


class Order(Enum):
    PRECEDENT = "Precedent"
    SUBSEQUENT = "Subsequent"
    EQUIPOLENT = "Equipolent"


def _desc(items) -> list:
    return sorted(items, reverse=True)


def arranged(k: RefinedDoubleChar) -> tuple[list, list, list]:
    """The star-decreasing rearrangement of the three count lists.

    Entries are ``(mark rank, count)``, so sorting decreasingly puts double
    marks first, then single marks, then unmarked entries.  S* entries of
    factors touching a primed phi precede the others.
    """
    h3 = [(MARKS.index(m), n) for n, m in k.H3]
    touched = [e for e, (_, s) in zip(h3, k.simple.L3) if s]
    untouched = [e for e, (_, s) in zip(h3, k.simple.L3) if not s]
    h2 = _desc((MARKS.index(m), n) for n, m in k.H2)
    h1 = _desc((0, n) for n in k.H1)
    return _desc(touched) + _desc(untouched), h2, h1


def _lex(a: list, b: list) -> int:
    size = max(len(a), len(b))
    a = a + [_SENTINEL] * (size - len(a))
    b = b + [_SENTINEL] * (size - len(b))
    return (a > b) - (a < b)


def refined_key(k: RefinedDoubleChar) -> tuple:
    """A sort key whose order agrees with ``compare_refined``."""
    return tuple(tuple(x) for x in arranged(k))


def compare_refined(k1: RefinedDoubleChar, k2: RefinedDoubleChar) -> Order:
    if k1.simple != k2.simple:
        raise CharacterError("refined characters with different simple parts are not comparable")
    for a, b in zip(arranged(k1), arranged(k2)):
        s = _lex(a, b)
        if s > 0:
            return Order.PRECEDENT
        if s < 0:
            return Order.SUBSEQUENT
    return Order.EQUIPOLENT


def is_simply_subsequent(c: Contraction, kappa: SimpleChar) -> bool:
    """Some tilde label of ``kappa`` sits on a derivative slot in ``c``."""
    if _weak(c) != kappa.weak():
        raise CharacterError("weak character of the field differs from that of kappa")
    wanted = kappa.defining_set()
    for p, f in enumerate(c.factors):
        derivs = f.derivative_slots()
        for slot, g in _phis_on(c, p):
            if g.label in wanted and slot in derivs:
                return True
    return False


@dataclass(frozen=True)
class Partition:
    characters: tuple[RefinedDoubleChar, ...]
    classes: tuple[tuple[int, ...], ...]
    maximal: tuple[int, ...]

    def maximal_terms(self) -> list[int]:
        return sorted(t for z in self.maximal for t in self.classes[z])


def partition_maximal(fields: LinComb) -> Partition:
    """Group terms by refined character and mark the maximal classes."""
    chars: list[RefinedDoubleChar] = []
    groups: list[list[int]] = []
    for t, (_, c) in enumerate(fields.terms):
        k = compute_character(c, "refined", strict=False)
        if k in chars:
            groups[chars.index(k)].append(t)
        else:
            chars.append(k)
            groups.append([t])
    maximal = tuple(
        z for z, k in enumerate(chars)
        if not any(compare_refined(k, o) is Order.SUBSEQUENT for o in chars)
    )
    return Partition(tuple(chars), tuple(tuple(g) for g in groups), maximal)


# --------------------------------------------------------------- forbidden


@dataclass(frozen=True)
class Trace:
    value: bool
    clauses: tuple[tuple[str, bool], ...] = ()

    def __bool__(self) -> bool:
        return self.value

    def failed(self) -> list[str]:
        return [name for name, ok in self.clauses if not ok]


def _cr_all_derivs_on_phi(c: Contraction, p: int) -> bool:
    f = c.factors[p]
    return all(
        (g := _partner_factor(c, IndexRef(p, s))) is not None and g.kind == "ph"
        for s in f.derivative_slots()
    )


def is_forbidden(c: Contraction) -> Trace:
    """The forbidden-field test, which only applies when S* factors exist."""
    st = stats(c)
    if st.sigma2 == 0:
        return Trace(False, (("sigma2 > 0", False),))
    many = st.sigma2 > 1
    clauses = []
    cr_ok, om_ok, sr_ok = True, True, True
    some_special = False
    for p, f in enumerate(c.factors):
        frees = _frees_on(c, p)
        if f.kind == "CR":
            ok = _cr_all_derivs_on_phi(c, p)
            if many:
                ok = ok and len(frees) <= 1 and all(_special(f, s) for s in frees)
            else:
                ok = ok and not frees
            cr_ok = cr_ok and ok
        elif f.kind == "Om":
            ok = f.arity == 2
            if many:
                if is_simple_factor(c, p):
                    ok = ok and len(frees) <= 1
                else:
                    ok = ok and len(_phis_on(c, p)) == 1 and not frees
            else:
                ok = ok and is_simple_factor(c, p) and not frees
            om_ok = om_ok and ok
        elif f.kind == "SR":
            ok = f.arity == 0 and is_simple_factor(c, p)
            special = [s for s in frees if _special(f, s)]
            some_special = some_special or bool(special)
            if many:
                ok = ok and len(frees) <= 1
            else:
                ok = ok and len(frees) == 1 and len(special) == 1
            sr_ok = sr_ok and ok
        elif not f.is_gradient:
            clauses.append((f"no {f.kind} factors", False))
    clauses += [
        ("curvature factors saturated by phi", cr_ok),
        ("Omega factors of order two", om_ok),
        ("S* factors underived and simple", sr_ok),
    ]
    if many:
        clauses.append(("some S* factor has a special free index", some_special))
    return Trace(all(ok for _, ok in clauses), tuple(clauses))


# --------------------------------------------------------------- removable


def _on_phi(c: Contraction, ref: IndexRef) -> bool:
    g = _partner_factor(c, ref)
    return g is not None and g.is_phi


def _candidate(c: Contraction, ref: IndexRef) -> bool:
    return not c.is_free(ref) and not _on_phi(c, ref)


def _one_of(c: Contraction, p: int, a: str, b: str) -> list[IndexRef]:
    for s in (a, b):
        if _candidate(c, IndexRef(p, s)):
            return [IndexRef(p, s)]
    return []


def _standard_removable(c: Contraction, p: int) -> list[IndexRef]:
    f = c.factors[p]
    free = set(_frees_on(c, p))
    if f.kind == "Om":
        cands = [IndexRef(p, s) for s in f.slots if _candidate(c, IndexRef(p, s))]
        return cands[: max(0, f.arity - 2)]
    if f.kind == "CR":
        out = [IndexRef(p, s) for s in f.derivative_slots() if _candidate(c, IndexRef(p, s))]
        nfd = sum(1 for s in f.derivative_slots() if s in free)
        ij_free = bool(free & {"i", "j"})
        kl_free = bool(free & {"k", "l"})
        if nfd >= 2:
            if not ij_free:
                out += _one_of(c, p, "i", "j")
            if not kl_free:
                out += _one_of(c, p, "k", "l")
        elif nfd == 1:
            if not ij_free:
                out += _one_of(c, p, "i", "j")
            elif not kl_free:
                out += _one_of(c, p, "k", "l")
        return out
    if f.kind == "SR":
        block = [*f.derivative_slots(), "j"]
        cands = [IndexRef(p, s) for s in block if _candidate(c, IndexRef(p, s))]
        out = cands[: f.arity]
        if not free & {"k", "l"} and f.arity > 0 and free:
            out += _one_of(c, p, "k", "l")
        return out
    return []


def _omega_removable(c: Contraction, p: int) -> list[IndexRef]:
    f = c.factors[p]
    if f.is_curvature:
        return [IndexRef(p, s) for s in f.derivative_slots() if _candidate(c, IndexRef(p, s))]
    if f.kind == "Om":
        def held(ref):
            g = _partner_factor(c, ref)
            return c.is_free(ref) or (g is not None and (g.is_phi or g.kind == "OmA"))
        cands = [IndexRef(p, s) for s in f.slots if not held(IndexRef(p, s))]
        return cands[: max(0, f.arity - 2)]
    return []


def removable_indices(c: Contraction, regime: str = "standard") -> frozenset[IndexRef]:
    """Indices that may be dropped by the removal rules of each regime.

    Where a rule allows one of two internal slots, the first eligible slot
    of the pair is reported.
    """
    if regime == "standard":
        rule = _standard_removable
    elif regime == "omega_pair":
        rule = _omega_removable
    else:
        raise CharacterError(f"unknown regime {regime!r}")
    return frozenset(r for p in range(len(c.factors)) for r in rule(c, p))


# ---------------------------------------------------------- equation context


class ContextError(CharacterError):
    """An equation context whose terms break its invariants."""


@dataclass(frozen=True)
class EquationContext:
    mu: int
    L_mu: LinComb
    L_gt_mu: LinComb
    J: LinComb
    kappa_simp: SimpleChar
    key: tuple[int, int, int, int]
    options: dict = field(default_factory=dict, compare=False)

    @classmethod
    def build(cls, fields: LinComb, J: LinComb | None = None, **options) -> "EquationContext":
        terms = fields.terms
        if not terms:
            raise ContextError("an equation context needs at least one tensor field")
        mu = min(c.rank for _, c in terms)
        low = [(q, c) for q, c in terms if c.rank == mu]
        high = [(q, c) for q, c in terms if c.rank > mu]
        kappa = _simple(low[0][1])
        ctx = cls(mu, LinComb(tuple(low)), LinComb(tuple(high)), J or LinComb(()),
                  kappa, _key(low[0][1]), dict(options))
        ctx.check()
        return ctx

    def check(self):
        for _, c in self.L_mu.terms:
            if c.rank != self.mu:
                raise ContextError(f"field of rank {c.rank} among the {self.mu}-fields")
            if _simple(c) != self.kappa_simp:
                raise ContextError("fields with different simple characters")
        for _, c in self.L_gt_mu.terms:
            if c.rank <= self.mu:
                raise ContextError("higher-rank list holds a field of minimal rank")
        for _, c in (*self.L_mu.terms, *self.L_gt_mu.terms):
            if _key(c) != self.key:
                raise ContextError("fields with different induction parameters")

    def fields(self) -> list[Contraction]:
        return [c for _, c in self.L_mu.terms]


def _key(c: Contraction) -> tuple[int, int, int, int]:
    st = stats(c)
    return (st.mu - st.weight, st.sigma, st.u, st.sigma1 + st.sigma2)


# -------------------------------------------------------------- case logic


def _free_count(c: Contraction, p: int) -> int:
    return len(_frees_on(c, p))


def _special_count(c: Contraction, p: int) -> int:
    f = c.factors[p]
    return sum(1 for s in _frees_on(c, p) if _special(f, s))


def classify_kind(ctx: EquationContext) -> str:
    fields = ctx.fields()
    if any(f.kind == "SR" and _special_count(c, p)
           for c in fields for p, f in enumerate(c.factors)):
        return "I"
    if any(f.kind == "CR" and _special_count(c, p)
           for c in fields for p, f in enumerate(c.factors)):
        return "II"
    return "III"


@dataclass(frozen=True)
class CriticalSelection:
    case: str
    fields: tuple[int, ...]
    critical: dict
    second: dict
    crucial: dict
    M: int
    M_prime: int | None
    label: int | None = None
    subcase: str | None = None


def _pick_by_label(fields: dict[int, Contraction], cands: dict[int, list[int]], kinds):
    """Smallest label of a ``kinds`` gradient on a candidate, and its holders."""
    labels = [g.label for t, ps in cands.items() for p in ps
              for _, g in _phis_on(fields[t], p, kinds)]
    if not labels:
        return None, {}
    best = min(labels)
    out = {}
    for t, ps in cands.items():
        hit = [p for p in ps
               if best in [g.label for _, g in _phis_on(fields[t], p, kinds)]]
        if hit:
            out[t] = tuple(hit)
    return best, out


def _untouched_cr(c: Contraction) -> tuple[int, ...]:
    return tuple(p for p, f in enumerate(c.factors)
                 if f.kind == "CR" and not _phis_on(c, p, ("ph",)))


def _third_rule(fields: dict[int, Contraction], allowed: dict[int, list[int]]):
    """Selection among factors of maximal free count, Omega labels first."""
    M = max((_free_count(fields[t], p) for t, ps in allowed.items() for p in ps), default=0)
    top = {t: [p for p in ps if _free_count(fields[t], p) == M] for t, ps in allowed.items()}
    top = {t: ps for t, ps in top.items() if ps}
    oms = [fields[t].factors[p].label for t, ps in top.items() for p in ps
           if fields[t].factors[p].kind == "Om"]
    if oms:
        h = min(oms)
        sel = {t: tuple(p for p in ps if fields[t].factors[p].kind == "Om"
                        and fields[t].factors[p].label == h) for t, ps in top.items()}
        return M, h, {t: ps for t, ps in sel.items() if ps}
    label, sel = _pick_by_label(fields, top, ("ph", "ph~"))
    if sel:
        return M, label, sel
    sel = {t: tuple(p for p in _untouched_cr(fields[t]) if p in allowed[t]) for t in top}
    return M, None, {t: ps for t, ps in sel.items() if ps}


def select_critical_factors(ctx: EquationContext, case: str) -> CriticalSelection:
    part = partition_maximal(ctx.L_mu)
    fields = {t: ctx.L_mu.terms[t][1] for t in part.maximal_terms()}
    if case == "I":
        cands = {t: [p for p, f in enumerate(c.factors)
                     if f.kind == "SR" and _special_count(c, p)] for t, c in fields.items()}
        if not any(cands.values()):
            raise CharacterError("case I needs an S* factor with a special free index")
        M = max(_free_count(fields[t], p) for t, ps in cands.items() for p in ps)
        top = {t: [p for p in ps if _free_count(fields[t], p) == M] for t, ps in cands.items()}
        label, crit = _pick_by_label(fields, top, ("ph'",))
        if not crit:
            label, crit = _pick_by_label(fields, top, ("ph~",))
        if not crit:
            raise CharacterError("candidate S* factors touch no primed or tilde gradient")
        return CriticalSelection("I", tuple(crit), crit, crit, crit, M, None, label)
    if case == "II":
        two = {t: [p for p, f in enumerate(c.factors)
                   if f.kind == "CR" and _special_count(c, p) >= 2] for t, c in fields.items()}
        sub = "A"
        cands = two
        if not any(two.values()):
            sub = "B"
            cands = {t: [p for p, f in enumerate(c.factors)
                         if f.kind == "CR" and _special_count(c, p) == 1]
                     for t, c in fields.items()}
        if not any(cands.values()):
            raise CharacterError("case II needs a curvature factor with a special free index")
        M = max(_free_count(fields[t], p) for t, ps in cands.items() for p in ps)
        top = {t: [p for p in ps if _free_count(fields[t], p) == M] for t, ps in cands.items()}
        label, crit = _pick_by_label(fields, top, ("ph",))
        if not crit:
            crit = {t: _untouched_cr(fields[t]) for t in fields if _untouched_cr(fields[t])}
        return CriticalSelection("II", tuple(crit), crit, crit, crit, M, None, label, sub)
    if case == "III":
        allowed = {t: real_positions(c) for t, c in fields.items()}
        M, label, crit = _third_rule(fields, allowed)
        if all(len(ps) == 1 for ps in crit.values()):
            rest = {t: [p for p in allowed[t] if p not in crit[t]] for t in crit}
            _, _, second = _third_rule({t: fields[t] for t in crit}, rest)
        else:
            second = crit
        m2 = max((_free_count(fields[t], p) for t, ps in second.items() for p in ps),
                 default=0)
        sub = "A" if m2 >= 2 else "B"
        crucial = second if sub == "A" else crit
        return CriticalSelection("III", tuple(crit), crit, second, crucial, M, m2, label, sub)
    raise CharacterError(f"unknown case {case!r}")


@dataclass(frozen=True)
class CaseReport:
    case: str
    subcase: str | None
    delicate: bool
    critical: tuple[int, ...]
    selection: CriticalSelection
    delicate_star: tuple[int, ...] = ()

    def summary(self) -> str:
        case = self.case + (self.subcase or "") if self.case == "II" else self.case
        crit = ",".join(f"f{p + 1}" for p in self.critical) or "-"
        text = f"case {case}, delicate={str(self.delicate).lower()}, critical={crit}"
        if self.case == "III":
            text += f", subcase={self.subcase}"
        return text

    def to_json(self) -> dict:
        s = self.selection
        return {
            "case": self.case,
            "subcase": self.subcase,
            "delicate": self.delicate,
            "critical": [f"f{p + 1}" for p in self.critical],
            "M": s.M,
            "M_prime": s.M_prime,
            "label": s.label,
            "fields": list(s.fields),
            "delicate_star": list(self.delicate_star),
        }


def _delicate_form(c: Contraction, p: int) -> bool:
    """Critical S* factor with free k, bound l and a block of free or primed slots."""
    f = c.factors[p]
    free = set(_frees_on(c, p))
    if "k" not in free or "l" in free:
        return False
    for s in [*f.derivative_slots(), "j"]:
        g = _partner_factor(c, IndexRef(p, s))
        if s not in free and not (g is not None and g.kind == "ph'"):
            return False
    return True


def _l_on_special(c: Contraction, p: int) -> bool:
    q = c.partner(IndexRef(p, "l"))
    if q is None:
        return False
    g = c.factors[q.pos]
    return g.kind == "SR" and g.arity == 0 and q.slot in ("k", "l")


def classify_case(ctx: EquationContext) -> CaseReport:
    case = classify_kind(ctx)
    sel = select_critical_factors(ctx, case)
    first = sel.fields[0] if sel.fields else None
    critical = sel.critical.get(first, ()) if first is not None else ()
    delicate = False
    star: tuple[int, ...] = ()
    if case == "I" and sel.fields:
        delicate = all(
            not removable_indices(ctx.L_mu.terms[t][1])
            and all(_delicate_form(ctx.L_mu.terms[t][1], p) for p in sel.critical[t])
            for t in sel.fields
        )
        star = tuple(t for t in sel.fields
                     if any(_l_on_special(ctx.L_mu.terms[t][1], p) for p in sel.critical[t]))
    return CaseReport(case, sel.subcase, delicate, critical, sel, star)


# ------------------------------------------------------------ special sets


@dataclass(frozen=True)
class SpecialFlags:
    in_Lstar: bool
    in_Lplus: bool
    in_LdblPlus: bool


def special_set_flags(c: Contraction, ctx: EquationContext | None = None,
                      x: int | None = None) -> SpecialFlags:
    """Membership in the three special index sets.

    ``x`` is the label of the chosen Omega factor for the first set.
    """
    star = x is not None and any(
        f.kind == "Om" and f.label == x and f.arity == 2
        and all(c.is_free(IndexRef(p, s)) for s in f.slots)
        for p, f in enumerate(c.factors)
    )
    last = c.free[-1] if c.free else None
    plus = last is not None and last.slot == "j" and c.factors[last.pos].kind == "SR" \
        and c.factors[last.pos].arity == 0
    mu = ctx.mu if ctx is not None else None
    dbl = mu is not None and c.rank > mu and any(
        f.kind == "SR" and f.arity == 0
        and c.is_free(IndexRef(p, "j")) and c.is_free(IndexRef(p, "k"))
        for p, f in enumerate(c.factors)
    )
    return SpecialFlags(star, plus, dbl)


# -------------------------------------------------------------- bad fields


def _erase_y(c: Contraction) -> tuple[Contraction, bool]:
    ys = [p for p, f in enumerate(c.factors) if f.kind == "Y"]
    if len(ys) != 1:
        raise CharacterError("expected exactly one Y factor")
    p = ys[0]
    f = c.factors[p]
    has_free = f.arity == 1 and c.is_free(IndexRef(p, "d1"))
    return splice(c, [p], [], orphans="free"), has_free


def _erase_omega_pair(c: Contraction) -> tuple[Contraction, bool]:
    ws = [p for p, f in enumerate(c.factors) if f.kind == "OmA" and f.arity == 0]
    if len(ws) != 1:
        raise CharacterError("expected exactly one underived omega pair")
    p = ws[0]
    has_free = any(c.is_free(IndexRef(p, s)) for s in ("a", "b"))
    return splice(c, [p], [], orphans="free"), has_free


def is_bad(c: Contraction, regime: str = "Y") -> Trace:
    """Whether ``c`` is one of the excluded fields of the Y or omega regime."""
    if regime == "Y":
        core, has_free = _erase_y(c)
        clauses = [("gradient Y carries a free index", has_free)]
        srs = [p for p, f in enumerate(core.factors) if f.kind == "SR"]
        clauses.append(("no removable indices", not removable_indices(core)))
        clauses.append(("S* factors simple", all(is_simple_factor(core, p) for p in srs)))
        if not srs:
            clauses.append(("no free indices", core.rank == 0))
        else:
            held = True
            for p, f in enumerate(core.factors):
                if f.kind == "Om" and f.arity == 2:
                    n = sum(1 for s in f.slots
                            if core.is_free(IndexRef(p, s)) or _on_phi(core, IndexRef(p, s)))
                    held = held and n <= 1
            clauses.append(("second-order Omegas hold at most one free or phi slot", held))
            clauses.append((
                "curvature factors carry at most one special free index",
                all(_free_count(core, p) <= 1 and _free_count(core, p) == _special_count(core, p)
                    for p, f in enumerate(core.factors) if f.kind == "CR"),
            ))
        return Trace(all(ok for _, ok in clauses), tuple(clauses))
    if regime == "omega_pair":
        core, has_free = _erase_omega_pair(c)
        clauses = [
            ("omega pair carries a free index", has_free),
            ("no removable indices", not removable_indices(core, "omega_pair")),
            ("S* factors simple", all(is_simple_factor(core, p)
                                      for p, f in enumerate(core.factors) if f.kind == "SR")),
        ]
        return Trace(all(ok for _, ok in clauses), tuple(clauses))
    raise CharacterError(f"unknown regime {regime!r}")


# ------------------------------------------------------------------- gates


GATES = ("petermichel", "petermichel3", "obote", "vanderbi", "vanderbi3",
         "addition", "additiongen", "appendix")


@dataclass(frozen=True)
class GateVerdict:
    lemma: str
    clauses: tuple[tuple[str, bool, str], ...]

    @property
    def ok(self) -> bool:
        return all(ok for _, ok, _ in self.clauses)

    def __bool__(self) -> bool:
        return self.ok

    def clause(self, name: str) -> bool:
        for n, ok, _ in self.clauses:
            if n == name:
                return ok
        raise KeyError(name)


def _same(values) -> bool:
    values = list(values)
    return all(v == values[0] for v in values)


def _distinguished(c: Contraction, h: int) -> int | None:
    for p, f in enumerate(c.factors):
        if f.kind == "Om" and f.label == h:
            return p
    return None


def _saturated(c: Contraction, p: int) -> bool:
    return all(_on_phi(c, IndexRef(p, s)) for s in c.factors[p].slots)


def erased_forbidden(c: Contraction, h: int) -> bool:
    """Erase the phi-saturated Omega labelled ``h`` and test for a forbidden field."""
    from .rewrite import erase_factor

    return bool(is_forbidden(erase_factor(c, _distinguished(c, h))))


def _safe_simple(c: Contraction):
    try:
        return _simple(c)
    except CharacterError:
        return None


def hypothesis_gate(fields: LinComb, lemma: str, omega: int | None = None,
                    alpha: int | None = None) -> GateVerdict:
    """Check the stated side conditions of a lemma's input equation.

    ``omega`` names the distinguished Omega label and ``alpha`` the rank
    threshold where the lemma uses one.
    """
    if lemma not in GATES:
        raise CharacterError(f"unknown lemma {lemma!r}")
    terms = [c for _, c in fields.terms]
    if not terms:
        raise CharacterError("the gate needs at least one tensor field")
    out: list[tuple[str, bool, str]] = []

    def add(name, ok, detail=""):
        out.append((name, bool(ok), detail))

    sig = [stats(c).sigma for c in terms]
    add("common length", _same(sig), f"sigma={sorted(set(sig))}")
    add("common simple character", _same(_safe_simple(c) for c in terms))

    if lemma in ("petermichel", "petermichel3"):
        if omega is None:
            raise CharacterError(f"{lemma} needs the distinguished Omega label")
        add("common rank", _same(c.rank for c in terms))
        holders = [_distinguished(c, omega) for c in terms]
        add("distinguished factor saturated by phi",
            all(p is not None and _saturated(c, p) for c, p in zip(terms, holders)))
        if lemma == "petermichel":
            add("length at least four", min(sig) >= 4)
            ok = out[-2][1] and not any(erased_forbidden(c, omega) for c in terms)
            add("no forbidden field after erasure", ok)
        else:
            add("length three", set(sig) == {3})
            add("removable index in every field", all(removable_indices(c) for c in terms))
    elif lemma == "obote":
        alpha = min(c.rank for c in terms) if alpha is None else alpha
        add("length at least four", min(sig) >= 4)
        add("ranks at least alpha", all(c.rank >= alpha for c in terms))
        has_y = [sum(f.kind == "Y" for f in c.factors) == 1 for c in terms]
        add("one Y factor per field", all(has_y))
        add("no bad field of rank alpha",
            all(has_y) and not any(is_bad(c, "Y") for c in terms if c.rank == alpha))
    elif lemma in ("vanderbi", "vanderbi3"):
        alpha = min(c.rank for c in terms) if alpha is None else alpha
        add("ranks at least alpha", all(c.rank >= alpha for c in terms))
        pair = [sum(f.kind == "OmA" and f.arity == 0 for f in c.factors) == 1 for c in terms]
        add("one omega pair per field", all(pair))
        if lemma == "vanderbi":
            add("length at least four", min(sig) >= 4)
            add("no bad field of rank alpha",
                all(pair) and not any(is_bad(c, "omega_pair") for c in terms
                                      if c.rank == alpha))
        else:
            add("length three", set(sig) == {3})
            add("removable index in every real factor",
                all(removable_indices(c, "omega_pair") for c in terms))
    elif lemma in ("addition", "additiongen"):
        u = [stats(c).u for c in terms]
        add("common phi count", _same(u))
        extra = 1 if lemma == "addition" else max(3, alpha or 3)
        placed = True
        for c in terms:
            top = {f.label for f in c.factors if f.is_phi}
            new = [p for p, f in enumerate(c.factors)
                   if f.kind == "ph" and f.label > len(top) - extra]
            placed = placed and len(new) == extra and all(
                (q := c.partner(IndexRef(p, "a"))) is not None
                and c.factors[q.pos].kind in ("CR", "SR")
                for p in new)
        add("added gradients sit on curvature factors", placed)
        add("length at least three", min(sig) >= 3)
    elif lemma == "appendix":
        mu = min(c.rank for c in terms)
        low = LinComb(tuple((q, c) for q, c in fields.terms if c.rank == mu))
        part = partition_maximal(low)
        add("some maximal field is forbidden",
            any(is_forbidden(low.terms[t][1]) for t in part.maximal_terms()))
    return GateVerdict(lemma, tuple(out))


# --------------------------------------------------------- length three


def _pairs_between(c: Contraction, p: int, q: int) -> set[tuple[str, str]]:
    out = set()
    for a, b in c.pairs:
        if a.pos == p and b.pos == q:
            out.add((a.slot, b.slot))
        elif a.pos == q and b.pos == p:
            out.add((b.slot, a.slot))
    return out


def _touches_real(c: Contraction, p: int) -> list[IndexRef]:
    out = []
    for r in c.refs(p):
        q = c.partner(r)
        if q is not None and not c.factors[q.pos].is_gradient:
            out.append(r)
    return out


def _skeleton(c: Contraction, reals: list[int]) -> str:
    kinds = sorted(c.factors[p].kind for p in reals)
    oms = [p for p in reals if c.factors[p].kind == "Om"]
    if kinds == ["Om", "Om", "Om"]:
        return "foula1" if not any(_touches_real(c, p) for p in oms) else "none"
    if kinds in (["CR", "CR", "Om"], ["Om", "SR", "SR"]):
        kind = "CR" if "CR" in kinds else "SR"
        a, b = [p for p in reals if c.factors[p].kind == kind]
        links = _pairs_between(c, a, b)
        if kind == "CR" and links == {("j", "j"), ("l", "l")}:
            others = _touches_real(c, a) + _touches_real(c, b)
            return "foula2" if len(others) == 4 else "none"
        if kind == "SR" and links == {("l", "l")}:
            others = _touches_real(c, a) + _touches_real(c, b)
            return "foula3" if len(others) == 2 else "none"
    return "none"


def recognize_sigma3_special(c: Contraction) -> str:
    """Match the explicit length-three forms, or report ``none``.

    The base forms need one Omega with every slot on a phi.  A variant
    whose Omega carries a single derivative, either free or contracted
    into a derivative slot of another real factor, is reported as
    ``bravado-variant``.
    """
    reals = real_positions(c)
    if len(reals) != 3:
        raise CharacterError("recognizer expects three real factors")
    oms = [p for p in reals if c.factors[p].kind == "Om"]
    full = [p for p in oms if c.factors[p].arity >= 2 and _saturated(c, p)]
    first = [p for p in oms if c.factors[p].arity == 1]
    if first:
        p = first[0]
        ref = IndexRef(p, "d1")
        q = c.partner(ref)
        into = q is not None and q.slot in c.factors[q.pos].derivative_slots() \
            and not c.factors[q.pos].is_gradient
        if c.is_free(ref) or into:
            rest = [r for r in reals if r != p]
            kinds = sorted(c.factors[r].kind for r in rest)
            if kinds in (["Om", "Om"], ["CR", "CR"], ["SR", "SR"]):
                return "bravado-variant"
        return "none"
    if not full:
        return "none"
    try:
        return _skeleton(c, reals)
    except (ExprError, ValueError):
        return "none"
