"""Formal operations on contractions: divergences, Bianchi rewrites and
the substitution catalog.

Every operation maps a contraction, addressed at a site, to a linear
combination.  Outputs are returned raw: factor positions of untouched
factors are preserved so that sites can be traced through a chain of
rewrites.  Call ``LinComb.normalized`` to merge terms.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

from .expr import (
    KEEP,
    LINK,
    NEWFREE,
    OLD,
    UP,
    Contraction,
    ExprError,
    Factor,
    IndexRef,
    LinComb,
    Om,
    Phi,
    canonical_map,
    splice,
)


class RewriteError(ValueError):
    """The requested operation does not apply at the given site."""


class RewriteWarning(UserWarning):
    pass


# ----------------------------------------------------------------- helpers


def _collect(terms) -> LinComb:
    """Merge structurally identical terms without canonicalizing."""
    acc: dict[Contraction, Fraction] = {}
    for q, c in terms:
        acc[c] = acc.get(c, Fraction(0)) + Fraction(q)
    return LinComb(tuple((q, c) for c, q in acc.items() if q != 0))


def _retype(c: Contraction, changes: dict[int, Factor]) -> Contraction:
    """Swap factors for ones with the same slot names, keeping all pairings."""
    factors = list(c.factors)
    for pos, f in changes.items():
        if f.slots != factors[pos].slots:
            raise RewriteError(f"cannot retype {factors[pos]} as {f}")
        factors[pos] = f
    return Contraction(tuple(factors), c.pairs, c.free)


def _factor(c: Contraction, pos: int) -> Factor:
    if not 0 <= pos < len(c.factors):
        raise RewriteError(f"no factor at position {pos + 1}")
    return c.factors[pos]


def _neighbour(c: Contraction, pos: int, slot: str) -> tuple[int, Factor] | None:
    q = c.partner(IndexRef(pos, slot))
    if q is None:
        return None
    return q.pos, c.factors[q.pos]


def _grad_on(c: Contraction, pos: int, slot: str, kinds) -> int | None:
    """Position of the gradient factor of one of ``kinds`` paired to ``slot``."""
    nb = _neighbour(c, pos, slot)
    if nb is None or nb[1].kind not in kinds:
        return None
    return nb[0]


def _labels(c: Contraction) -> list[int]:
    return [f.label for f in c.factors if f.is_phi]


def _smallest_missing(labels) -> int:
    have = set(labels)
    h = 1
    while h in have:
        h += 1
    return h


def _block(f: Factor) -> list[str]:
    """The symmetric derivative block of a curvature factor."""
    if f.kind == "SR":
        return [f"r{s}" for s in range(1, f.arity + 1)] + ["j"]
    return [f"r{s}" for s in range(1, f.arity + 1)]


def _sr_tokens(attach: list[tuple], i, k, l) -> dict[str, tuple]:
    """Slot tokens of an S* factor whose block {r.., j} gets ``attach``."""
    nu = len(attach) - 1
    out = {f"r{s + 1}": attach[s] for s in range(nu)}
    out.update({"i": i, "j": attach[-1], "k": k, "l": l})
    return out


def _tracked(out: Contraction, **slots: IndexRef) -> tuple[Contraction, dict[str, str]]:
    """Canonical form of a rule output plus the new names of the given slots.

    Inverses read these names from the descriptor, since canonicalization
    mixes slots of one symmetric class.
    """
    out, moved = canonical_map(out)
    return out, {k: moved[r].slot for k, r in slots.items()}


def _shrunk(f: Factor, slot: str) -> tuple[Factor, dict[str, str]]:
    """Drop one derivative slot; returns the new factor and new->old slot names."""
    if f.kind in ("CR", "SR"):
        block = _block(f)
        if slot not in block:
            raise RewriteError(f"{slot} is not a derivative slot of {f}")
        rest = [s for s in block if s != slot]
        g = Factor(f.kind, f.arity - 1, f.label)
        mapping = dict(zip(_block(g), rest))
        for s in ("i", "j", "k", "l"):
            mapping.setdefault(s, s)
        return g, mapping
    if f.kind in ("Om", "Y", "Y1", "Y2", "OmA"):
        ds = list(f.derivative_slots())
        if slot not in ds:
            raise RewriteError(f"{slot} is not a derivative slot of {f}")
        if f.kind != "OmA" and f.arity < 2:
            raise RewriteError(f"{f} cannot lose its last derivative")
        rest = [s for s in ds if s != slot]
        g = Factor(f.kind, f.arity - 1, f.label)
        mapping = {f"d{n + 1}": s for n, s in enumerate(rest)}
        if f.kind == "OmA":
            mapping.update({"a": "a", "b": "b"})
        return g, mapping
    raise RewriteError(f"{f} carries no derivative slots")


def _grown(f: Factor) -> tuple[Factor, dict[str, str | None]]:
    """Prepend one derivative slot; the new slot maps to ``None``."""
    if f.is_gradient:
        raise RewriteError(f"{f} cannot take further derivatives")
    g = Factor(f.kind, f.arity + 1, f.label)
    ds = list(g.derivative_slots())
    mapping: dict[str, str | None] = {ds[0]: None}
    mapping.update(dict(zip(ds[1:], f.derivative_slots())))
    for s in g.slots:
        if s not in mapping:
            mapping[s] = s
    return g, mapping


# ------------------------------------------------------------ divergences


@dataclass(frozen=True)
class ExclusionPolicy:
    """Which factors a divergence index may not hit.

    ``forbid_owner`` excludes the factor carrying the erased free index,
    ``forbid_factors`` adds further exclusions and ``force_factor``
    restricts the derivative to one factor.
    """

    forbid_owner: bool = True
    forbid_factors: frozenset = field(default_factory=frozenset)
    force_factor: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "forbid_factors", frozenset(self.forbid_factors))
        if self.force_factor is not None and self.force_factor in self.forbid_factors:
            raise ValueError("force_factor cannot also be forbidden")


def divergence_targets(c: Contraction, free: IndexRef, policy: ExclusionPolicy) -> list[int]:
    out = []
    for pos, f in enumerate(c.factors):
        if f.is_gradient or pos in policy.forbid_factors:
            continue
        if policy.force_factor is not None and pos != policy.force_factor:
            continue
        if pos == free.pos and policy.forbid_owner:
            continue
        out.append(pos)
    return out


def _hit(c: Contraction, pos: int, pair_with: tuple) -> Contraction:
    """Add a derivative to factor ``pos`` whose new slot takes ``pair_with``."""
    g, mapping = _grown(c.factors[pos])
    tokens = {s: (pair_with if old is None else OLD(pos, old)) for s, old in mapping.items()}
    return splice(c, [pos], [(g, tokens)])


def xdiv_expand(c: Contraction, free: IndexRef, policy: ExclusionPolicy = ExclusionPolicy()) -> LinComb:
    """Divergence in one free index, one term per permitted target factor.

    The new derivative slot is the first slot of the target's derivative
    block and pairs with the slot that carried the erased free index.
    Gradient factors are never targets.  The owner term, in which the
    derivative hits the factor carrying ``free``, is an internal trace
    that a contraction cannot hold; it is left out with a warning.
    """
    free = IndexRef(*free)
    if free not in c.free:
        raise RewriteError(f"{free} is not a free index")
    targets = divergence_targets(c, free, policy)
    terms = []
    for pos in targets:
        if pos == free.pos:
            warnings.warn("the owner term is an internal trace and is omitted", RewriteWarning,
                          stacklevel=2)
            continue
        terms.append((1, _hit(c, pos, KEEP(free.pos, free.slot))))
    if not terms:
        warnings.warn("the exclusion policy leaves no target factor", RewriteWarning, stacklevel=2)
    return LinComb(tuple(terms))


# ------------------------------------------------------- Bianchi rewrites


@dataclass(frozen=True)
class Identity:
    """An exact relation ``lhs == rhs`` between linear combinations."""

    lhs: LinComb
    rhs: LinComb

    def difference(self) -> LinComb:
        return self.lhs - self.rhs


def _permuted(c: Contraction, pos: int, source: dict[str, str]) -> Contraction:
    """Replace factor ``pos`` by itself with slot s taking the attachment of source[s]."""
    f = c.factors[pos]
    tokens = {s: OLD(pos, source.get(s, s)) for s in f.slots}
    return splice(c, [pos], [(f, tokens)])


def koichi_site(c: Contraction) -> int:
    for pos, f in enumerate(c.factors):
        if f.kind == "CR" and _grad_on(c, pos, "i", ("ph", "ph'")) is not None \
                and _grad_on(c, pos, "k", ("up",)) is not None:
            return pos
    raise RewriteError("no curvature factor with i on a phi and k on an upsilon")


def bianchi_correction(c: Contraction, which: str, site: int | None = None) -> Identity:
    """One of the three Bianchi rewrites used to move slots of a curvature factor.

    Returns ``c - permuted == correction`` where ``permuted`` swaps two
    attachments of the site:

    * ``koichi1``: swap j and l; the correction moves k's partner to j.
    * ``koichi2``: swap r_m and j; the correction swaps r_m and i.
    * ``koichi3``: swap r_m and l; the correction is a five-slot reshuffle.
    """
    pos = koichi_site(c) if site is None else site
    f = _factor(c, pos)
    if f.kind != "CR" or _grad_on(c, pos, "i", ("ph", "ph'")) is None \
            or _grad_on(c, pos, "k", ("up",)) is None:
        raise RewriteError("site must be a curvature factor with i on a phi and k on an upsilon")
    m = f.arity
    rm = f"r{m}"
    if which == "koichi1":
        perm = {"j": "l", "l": "j"}
        corr = {"j": "k", "k": "j"}
    elif which in ("koichi2", "koichi3"):
        if m < 1:
            raise RewriteError(f"{which} needs at least one derivative on the site")
        if which == "koichi2":
            perm = {rm: "j", "j": rm}
            corr = {rm: "i", "i": rm}
        else:
            perm = {rm: "l", "l": rm}
            corr = {rm: "k", "i": rm, "j": "l", "k": "i", "l": "j"}
    else:
        raise RewriteError(f"unknown identity {which!r}")
    lhs = LinComb(((Fraction(1), c), (Fraction(-1), _permuted(c, pos, perm))))
    return Identity(lhs, LinComb.of(_permuted(c, pos, corr)))


def _swap_difference(c: Contraction, pos: int, w: tuple[str, ...], q: int) -> list:
    """Terms of T(w) - T(w with entries q, q+1 swapped) for a curvature factor.

    ``w`` lists, for each block position (r1..rm then j), the slot of the
    original factor whose attachment it takes.
    """
    m = c.factors[pos].arity
    x, y = w[q], w[q + 1]
    if q == m - 1:
        # second Bianchi: the innermost derivative and j trade places with i
        tokens = {f"r{s + 1}": OLD(pos, w[s]) for s in range(m - 1)}
        tokens.update({f"r{m}": OLD(pos, "i"), "i": OLD(pos, x), "j": OLD(pos, y),
                       "k": OLD(pos, "k"), "l": OLD(pos, "l")})
        return [(1, splice(c, [pos], [(Factor("CR", m), tokens)]))]
    outer = list(w[:q])
    inner = list(w[q + 2 : m])
    tail = [("i", "i"), ("j", w[m]), ("k", "k"), ("l", "l")]
    slots_T = [(f"inner{n}", s) for n, s in enumerate(inner)] + tail
    out = []
    for t in range(len(slots_T)):
        for size in range(len(outer) + 1):
            for S in itertools.combinations(range(len(outer)), size):
                on_p = [outer[s] for s in S]
                on_q = [outer[s] for s in range(len(outer)) if s not in S]
                p_tok = {f"r{n + 1}": OLD(pos, s) for n, s in enumerate(on_p)}
                p_tok.update({"i": OLD(pos, x), "j": OLD(pos, y), "k": OLD(pos, slots_T[t][1]),
                              "l": LINK("comm")})
                q_att = [OLD(pos, s) for s in on_q]
                q_att += [LINK("comm") if n == t else OLD(pos, s)
                          for n, (_, s) in enumerate(slots_T[: len(inner)])]
                mq = len(q_att)
                q_tok = {f"r{n + 1}": a for n, a in enumerate(q_att)}
                for n, (name, s) in enumerate(slots_T[len(inner):]):
                    q_tok[name] = LINK("comm") if len(inner) + n == t else OLD(pos, s)
                pieces = [(Factor("CR", len(on_p)), p_tok), (Factor("CR", mq), q_tok)]
                out.append((1, splice(c, [pos], pieces)))
    return out


def sstar_site(c: Contraction) -> int:
    for pos, f in enumerate(c.factors):
        if f.kind == "CR" and _grad_on(c, pos, "i", ("ph",)) is not None:
            return pos
    raise RewriteError("no curvature factor with its i-slot on a plain phi")


def sstar_decompose(c: Contraction, site: int | None = None, exact: bool = True) -> LinComb:
    """Write a curvature factor as its S* symmetrization plus corrections.

    The site's i-slot must contract against a plain phi.  The first term
    replaces the site by S* of the same order and the phi by its tilde
    version.  For each ordering of the block {r1..rm, j} the difference to
    the original ordering is split into adjacent transpositions.  Swapping
    r_m with j costs one term with the phi on a derivative slot (second
    Bianchi identity); swapping two derivatives costs commutator terms
    with an extra curvature factor, which ``exact=False`` drops.
    """
    pos = sstar_site(c) if site is None else site
    f = _factor(c, pos)
    phi = _grad_on(c, pos, "i", ("ph",))
    if f.kind != "CR" or phi is None:
        raise RewriteError("site must be a curvature factor with i on a plain phi")
    m = f.arity
    head = _retype(c, {pos: Factor("SR", m), phi: Phi(c.factors[phi].label, "~")})
    terms: list = [(1, head)]
    block = _block(f) + ["j"]
    order = {s: n for n, s in enumerate(block)}
    weight = Fraction(1, math.factorial(m + 1))
    for perm in itertools.permutations(block):
        w = list(perm)
        while True:
            q = next((q for q in range(m) if order[w[q]] > order[w[q + 1]]), None)
            if q is None:
                break
            w[q], w[q + 1] = w[q + 1], w[q]
            if q == m - 1 or exact:
                terms += [(weight * a, t) for a, t in _swap_difference(c, pos, tuple(w), q)]
    return _collect(terms)


# ----------------------------------------------------------- site surgery


def erase_factor(c: Contraction, site: int) -> Contraction:
    """Remove an Omega whose slots all hold phis, or a phi on a derivative slot."""
    f = _factor(c, site)
    if f.kind == "Om":
        partners = []
        for s in f.slots:
            q = c.partner(IndexRef(site, s))
            if q is None or not c.factors[q.pos].is_phi:
                raise RewriteError(f"slot {IndexRef(site, s)} is not contracted against a phi")
            partners.append(q.pos)
        return splice(c, [site, *partners], [])
    if f.is_phi:
        q = c.partner(IndexRef(site, "a"))
        if q is None:
            raise RewriteError("a free phi cannot be erased")
        host = c.factors[q.pos]
        if q.slot not in _block(host) and q.slot not in host.derivative_slots():
            raise RewriteError(f"phi sits on the internal slot {q}")
        g, mapping = _shrunk(host, q.slot)
        tokens = {s: OLD(q.pos, old) for s, old in mapping.items()}
        return splice(c, [site, q.pos], [(g, tokens)])
    raise RewriteError(f"{f} cannot be erased")


def migrate_free_index(c: Contraction, from_factor: int, to_factor: int,
                       free: IndexRef | None = None, allow_same: bool = False) -> Contraction:
    """Move a free derivative index from one factor onto another.

    The free derivative slot leaves ``from_factor``; ``to_factor`` gains a
    new first derivative slot whose index is appended to the free list.
    """
    src = _factor(c, from_factor)
    dst = _factor(c, to_factor)
    if from_factor == to_factor and not allow_same:
        raise RewriteError("migration onto the same factor is not allowed")
    if dst.is_gradient:
        raise RewriteError(f"{dst} cannot take a derivative")
    derivs = set(src.derivative_slots())
    if free is None:
        cands = [r for r in c.free if r.pos == from_factor]
        if not cands:
            raise RewriteError(f"factor {from_factor + 1} carries no free index")
        free = next((r for r in cands if r.slot in derivs), cands[0])
    free = IndexRef(*free)
    if free not in c.free or free.pos != from_factor:
        raise RewriteError(f"{free} is not a free index of factor {from_factor + 1}")
    if free.slot not in derivs:
        raise RewriteError(f"{free} is a special index and cannot migrate")
    g, mapping = _shrunk(src, free.slot)
    tokens = {s: OLD(from_factor, old) for s, old in mapping.items()}
    mid = splice(c, [from_factor], [(g, tokens)], orphans="free")
    return _hit(mid, to_factor, NEWFREE)


def symmetrize_free(lc: LinComb, mu: int, normalize: bool = True) -> LinComb:
    """Average over the orderings of the first ``mu`` free indices."""
    if mu <= 1:
        return lc.normalized() if normalize else lc
    weight = Fraction(1, math.factorial(mu))
    terms = []
    for q, c in lc.terms:
        if c.rank < mu:
            raise RewriteError(f"term of rank {c.rank} has fewer than {mu} free indices")
        for perm in itertools.permutations(c.free[:mu]):
            terms.append((q * weight, Contraction(c.factors, c.pairs, perm + c.free[mu:])))
    out = LinComb(tuple(terms))
    return out.normalized() if normalize else _collect(terms)


def riemann_reduce(lc: LinComb) -> LinComb:
    """Rewrite underived curvature factors in a basis modulo Riemann symmetries.

    For a CR[0] or SR[0] factor the attachments of j, k, l are permuted so
    that the partner order is (p1, p2, p3) or (p2, p1, p3), using the
    antisymmetry in k, l and the first Bianchi identity with i fixed.
    """
    out = []
    todo = [(q, c, 0) for q, c in lc.terms]
    while todo:
        q, c, start = todo.pop()
        pos = next((p for p in range(start, len(c.factors))
                    if c.factors[p].kind in ("CR", "SR") and c.factors[p].arity == 0), None)
        if pos is None:
            out.append((q, c))
            continue

        def rank(slot):
            r = IndexRef(pos, slot)
            p = c.partner(r)
            return (0, p.key) if p is not None else (1, c.free.index(r))

        by = sorted(("j", "k", "l"), key=rank)
        arr = tuple(by.index(s) for s in ("j", "k", "l"))
        table = {
            (0, 1, 2): [(1, (0, 1, 2))],
            (1, 0, 2): [(1, (1, 0, 2))],
            (0, 2, 1): [(-1, (0, 1, 2))],
            (1, 2, 0): [(-1, (1, 0, 2))],
            (2, 0, 1): [(-1, (0, 1, 2)), (1, (1, 0, 2))],
            (2, 1, 0): [(1, (0, 1, 2)), (-1, (1, 0, 2))],
        }
        for a, target in table[arr]:
            src = {s: by[t] for s, t in zip(("j", "k", "l"), target)}
            todo.append((q * a, _permuted(c, pos, src), pos + 1))
    return _collect(out)


# ------------------------------------------------------- substitution rules


@dataclass(frozen=True)
class RewriteRule:
    """A catalog rule applied at factor positions ``site`` (0-based)."""

    rule_id: str
    site: tuple[int, ...] = ()
    options: dict = field(default_factory=dict, hash=False, compare=False)


@dataclass
class Applied:
    result: LinComb
    descriptor: dict | None = None


def _one_site(c: Contraction, rule: RewriteRule, find) -> int:
    if len(rule.site) > 1:
        raise RewriteError(f"{rule.rule_id} takes a single factor site")
    if rule.site:
        pos = rule.site[0]
        _factor(c, pos)
        return pos
    for pos in range(len(c.factors)):
        try:
            find(pos)
            return pos
        except RewriteError:
            continue
    raise RewriteError(f"{rule.rule_id} has no admissible site")


def _need_tilde(c: Contraction, pos: int, kind: str, arity: int | None = None) -> int:
    f = c.factors[pos]
    if f.kind != kind or (arity is not None and f.arity != arity):
        want = kind if arity is None else f"{kind} with {arity} derivatives"
        raise RewriteError(f"site {f} is not {want}")
    t = _grad_on(c, pos, "i", ("ph~",))
    if t is None:
        raise RewriteError("the i-slot must hold a tilde phi")
    return t


def _to_y(c: Contraction, rule: RewriteRule) -> Applied:
    def check(pos):
        t = _need_tilde(c, pos, "SR")
        k = _grad_on(c, pos, "k", ("ph",))
        if k is None:
            raise RewriteError("the k-slot must hold a plain phi")
        return t, k

    pos = _one_site(c, rule, check)
    t, k = check(pos)
    f = c.factors[pos]
    d = [OLD(pos, s) for s in _block(f)] + [OLD(pos, "l")]
    y = Factor("Y", f.arity + 2)
    out = splice(c, [pos, t, k], [(y, {f"d{n + 1}": a for n, a in enumerate(d)})], at=0)
    out, names = _tracked(out, l=IndexRef(0, f"d{y.arity}"))
    desc = {"tilde": c.factors[t].label, "k_label": c.factors[k].label, **names}
    return Applied(LinComb.of(out), desc)


def _from_y(c: Contraction, rule: RewriteRule) -> Applied:
    def check(pos):
        f = c.factors[pos]
        if f.kind != "Y" or f.arity < 2:
            raise RewriteError("site must be a Y factor with at least two derivatives")

    pos = _one_site(c, rule, check)
    check(pos)
    f = c.factors[pos]
    opts = dict(rule.options.get("descriptor") or {}, **rule.options)
    labels = _labels(c)
    tilde = int(opts.get("tilde", _smallest_missing(labels)))
    b = f.arity
    last = opts.get("l", f"d{b}")
    if last not in f.slots:
        raise RewriteError(f"Y has no slot {last!r}")
    attach = [OLD(pos, s) for s in f.slots if s != last]
    pieces = [(Factor("SR", b - 2), _sr_tokens(attach, LINK("i"), LINK("k"), OLD(pos, last))),
              (Phi(tilde, "~"), {"a": LINK("i")})]
    if opts.get("k") == "up":
        pieces.append((UP, {"a": LINK("k")}))
    else:
        k_label = int(opts.get("k_label", max(labels + [tilde]) + 1))
        pieces.append((Phi(k_label), {"a": LINK("k")}))
    return Applied(LinComb.of(splice(c, [pos], pieces)))


def _repl_omega(c: Contraction, rule: RewriteRule) -> Applied:
    pos = _one_site(c, rule, lambda p: _need_tilde(c, p, "SR"))
    t = _need_tilde(c, pos, "SR")
    f = c.factors[pos]
    removed, keep, gone = [], [], [t]
    for s in _block(f):
        g = _grad_on(c, pos, s, ("ph'", "up"))
        if g is None:
            keep.append(OLD(pos, s))
        else:
            removed.append([c.factors[g].kind, c.factors[g].label])
            gone.append(g)
    if not removed:
        raise RewriteError("no block slot holds a primed phi or an upsilon")
    B = len(keep)
    tokens = {f"d{n + 1}": a for n, a in enumerate(keep)}
    tokens.update({"a": OLD(pos, "l"), "b": OLD(pos, "k")})
    out = splice(c, [pos, *gone], [(Factor("OmA", B), tokens)])
    return Applied(LinComb.of(out), {"removed": removed, "tilde": c.factors[t].label})


def _omega_read(c: Contraction, rule: RewriteRule) -> Applied:
    def check(p):
        if c.factors[p].kind != "OmA":
            raise RewriteError("site must be an antisymmetrized Omega pair")

    pos = _one_site(c, rule, check)
    check(pos)
    desc = rule.options.get("descriptor")
    if not desc:
        raise RewriteError("OMEGA_READ needs the descriptor produced by REPL_OMEGA")
    f = c.factors[pos]
    removed = desc["removed"]
    attach = [LINK(("g", n)) for n in range(len(removed))]
    attach += [OLD(pos, f"d{s}") for s in range(1, f.arity + 1)]
    if not attach:
        raise RewriteError("nothing to rebuild the S* block from")
    pieces = [(Factor("SR", len(attach) - 1),
               _sr_tokens(attach, LINK("i"), OLD(pos, "b"), OLD(pos, "a"))),
              (Phi(int(desc["tilde"]), "~"), {"a": LINK("i")})]
    for n, (kind, label) in enumerate(removed):
        g = UP if kind == "up" else Factor(kind, 0, int(label))
        pieces.append((g, {"a": LINK(("g", n))}))
    return Applied(LinComb.of(splice(c, [pos], pieces)))


def _fresh_omega(c: Contraction, opts: dict) -> int:
    if "label" in opts:
        return int(opts["label"])
    return max([f.label for f in c.factors if f.kind == "Om"] + [0]) + 1


def _op_star(c: Contraction, rule: RewriteRule) -> Applied:
    opts = rule.options
    if len(rule.site) == 1 and _factor(c, rule.site[0]).kind == "OmA":
        pos = rule.site[0]
        f = c.factors[pos]
        B = f.arity
        if B == 0:
            return Applied(LinComb())
        h = _fresh_omega(c, opts)
        ds = [OLD(pos, f"d{s}") for s in range(1, B + 1)]
        terms = []
        for sign, first, last in ((1, "b", "a"), (-1, "a", "b")):
            seq = [OLD(pos, first)] + ds + [OLD(pos, last)]
            g = Om(h, B + 2)
            terms.append((sign * B, splice(c, [pos], [(g, {f"d{n + 1}": a for n, a in enumerate(seq)})])))
        return Applied(LinComb(tuple(terms)))
    if len(rule.site) != 2:
        raise RewriteError("OP_STAR takes (omega1, omega2) positions or one antisymmetrized pair")
    p1, p2 = rule.site
    w1, w2 = _factor(c, p1), _factor(c, p2)
    if w1.kind != "Om" or w2.kind != "Om" or w2.arity != 1:
        raise RewriteError("OP_STAR needs an Omega and a second Omega with one derivative")
    K = w1.arity
    if K == 1:
        return Applied(LinComb())
    h = _fresh_omega(c, opts)
    seq = [OLD(p2, "d1")] + [OLD(p1, f"d{s}") for s in range(1, K + 1)]
    g = Om(h, K + 1)
    out = splice(c, [p1, p2], [(g, {f"d{n + 1}": a for n, a in enumerate(seq)})])
    return Applied(LinComb.of(out, K - 1))


def _cut_sym(c: Contraction, rule: RewriteRule) -> Applied:
    def check(pos):
        f = c.factors[pos]
        if f.kind != "CR":
            raise RewriteError("site must be a generic curvature factor")
        i = _grad_on(c, pos, "i", ("ph",))
        if i is None:
            raise RewriteError("the i-slot must hold a plain phi")
        return i

    pos = _one_site(c, rule, check)
    i = check(pos)
    f = c.factors[pos]
    labels, keep, gone = [], [], []
    for s in _block(f):
        g = _grad_on(c, pos, s, ("ph",))
        if g is None:
            keep.append(OLD(pos, s))
        else:
            labels.append(c.factors[g].label)
            gone.append(g)
    keep += [OLD(pos, "j")]
    tilde = c.factors[i].label
    pieces = [(Factor("SR", len(keep) - 1), _sr_tokens(keep, LINK("i"), OLD(pos, "k"), OLD(pos, "l"))),
              (Phi(tilde, "~"), {"a": LINK("i")})]
    out, names = _tracked(splice(c, [pos, i, *gone], pieces, at=0), j=IndexRef(0, "j"))
    desc = {"phi_labels": labels, "upsilons": 0, "tilde": tilde, "generic": True, **names}
    return Applied(LinComb.of(out), desc)


def _add_back(c: Contraction, rule: RewriteRule) -> Applied:
    desc = dict(rule.options.get("descriptor") or {})
    for key in ("phi_labels", "upsilons", "generic"):
        if key in rule.options:
            desc[key] = rule.options[key]
    labels = [int(h) for h in desc.get("phi_labels", [])]
    ups = int(desc.get("upsilons", 0))
    generic = bool(desc.get("generic", False))
    if not labels and not ups:
        raise RewriteError("ADD_BACK needs at least one slot to re-attach")

    def check(pos):
        f = c.factors[pos]
        if f.kind != "SR":
            raise RewriteError("site must be an S* factor")
        return _need_tilde(c, pos, "SR")

    pos = _one_site(c, rule, check)
    t = check(pos)
    f = c.factors[pos]
    new = [LINK(("p", n)) for n in range(len(labels))] + [LINK(("u", n)) for n in range(ups)]
    j = desc.get("j", "j")
    if j not in _block(f):
        raise RewriteError(f"{j!r} is not a block slot")
    old = [OLD(pos, s) for s in _block(f) if s != j] + [OLD(pos, j)]
    grads = [(Phi(h, "" if generic else "'"), {"a": LINK(("p", n))}) for n, h in enumerate(labels)]
    grads += [(UP, {"a": LINK(("u", n))}) for n in range(ups)]
    tilde = c.factors[t].label
    if generic:
        block = new + old[:-1]
        tokens = {f"r{n + 1}": a for n, a in enumerate(block)}
        tokens.update({"i": LINK("i"), "j": old[-1], "k": OLD(pos, "k"), "l": OLD(pos, "l")})
        pieces = [(Factor("CR", len(block)), tokens), (Phi(tilde), {"a": LINK("i")})]
    else:
        pieces = [(Factor("SR", len(new) + len(old) - 1),
                   _sr_tokens(new + old, LINK("i"), OLD(pos, "k"), OLD(pos, "l"))),
                  (Phi(tilde, "~"), {"a": LINK("i")})]
    return Applied(LinComb.of(splice(c, [pos, t], pieces + grads)))


def _cut_y(c: Contraction, rule: RewriteRule) -> Applied:
    def check(pos):
        t = _need_tilde(c, pos, "SR")
        k = _grad_on(c, pos, "k", ("ph",))
        if k is None:
            raise RewriteError("the k-slot must hold a plain phi")
        return t, k

    pos = _one_site(c, rule, check)
    t, k = check(pos)
    f = c.factors[pos]
    primes, keep, gone = [], [], [t, k]
    for s in _block(f):
        g = _grad_on(c, pos, s, ("ph'",))
        if g is None:
            keep.append(OLD(pos, s))
        else:
            primes.append(c.factors[g].label)
            gone.append(g)
    d = keep + [OLD(pos, "l")]
    out = splice(c, [pos, *gone], [(Factor("Y", len(d)), {f"d{n + 1}": a for n, a in enumerate(d)})],
                 at=0)
    out, names = _tracked(out, l=IndexRef(0, f"d{len(d)}"))
    desc = {"primes": primes, "tilde": c.factors[t].label, "k_label": c.factors[k].label, **names}
    return Applied(LinComb.of(out), desc)


def _un_y(c: Contraction, rule: RewriteRule) -> Applied:
    def check(pos):
        f = c.factors[pos]
        if f.kind != "Y" or f.arity < 2:
            raise RewriteError("site must be a Y factor with at least two derivatives")

    pos = _one_site(c, rule, check)
    check(pos)
    f = c.factors[pos]
    desc = dict(rule.options.get("descriptor") or {})
    generic = bool(rule.options.get("generic", not desc))
    labels = _labels(c)
    primes = [int(h) for h in desc.get("primes", rule.options.get("primes", []))]
    tilde = int(desc.get("tilde", rule.options.get("tilde", _smallest_missing(labels + primes))))
    k_label = int(desc.get("k_label", rule.options.get(
        "k_label", max(labels + primes + [tilde]) + 1)))
    B = f.arity
    last = desc.get("l", rule.options.get("l", f"d{B}"))
    if last not in f.slots:
        raise RewriteError(f"Y has no slot {last!r}")
    new = [LINK(("p", n)) for n in range(len(primes))]
    ds = [OLD(pos, s) for s in f.slots if s != last]
    grads = [(Phi(h, "" if generic else "'"), {"a": LINK(("p", n))}) for n, h in enumerate(primes)]
    if generic:
        block = new + ds[:-1]
        tokens = {f"r{n + 1}": a for n, a in enumerate(block)}
        tokens.update({"i": LINK("i"), "j": ds[-1], "k": LINK("k"), "l": OLD(pos, last)})
        head = [(Factor("CR", len(block)), tokens), (Phi(tilde), {"a": LINK("i")})]
    else:
        head = [(Factor("SR", len(new) + len(ds) - 1),
                 _sr_tokens(new + ds, LINK("i"), LINK("k"), OLD(pos, last))),
                (Phi(tilde, "~"), {"a": LINK("i")})]
    pieces = head + [(Phi(k_label), {"a": LINK("k")})] + grads
    return Applied(LinComb.of(splice(c, [pos], pieces)))


def _omega_triple(c: Contraction, rule: RewriteRule, derived: bool) -> Applied:
    nu = 1 if derived else 0
    pos = _one_site(c, rule, lambda p: _need_tilde(c, p, "SR", nu))
    t = _need_tilde(c, pos, "SR", nu)
    lead = [OLD(pos, "r1")] if derived else []
    terms = []
    for sign, (x, y) in ((1, ("k", "l")), (-1, ("l", "k"))):
        pieces = [(Om(0, 1), {"d1": a}) for a in lead + [OLD(pos, "j"), OLD(pos, x)]]
        pieces.append((UP, {"a": OLD(pos, y)}))
        terms.append((sign, splice(c, [pos, t], pieces)))
    at = min(pos, t)
    count = len(lead) + 3
    desc = {"inserted": list(range(at, at + count)), "tilde": c.factors[t].label}
    return Applied(LinComb(tuple(terms)), desc)


def _omega_triple_inv(c: Contraction, rule: RewriteRule) -> Applied:
    if len(rule.site) != 3:
        raise RewriteError("OMEGA_TRIPLE_INV takes three positions: two omegas and an upsilon")
    kinds = [_factor(c, p) for p in rule.site]
    oms = [p for p, f in zip(rule.site, kinds) if f.kind == "Om" and f.label == 0 and f.arity == 1]
    ups = [p for p, f in zip(rule.site, kinds) if f.kind == "up"]
    if len(oms) != 2 or len(ups) != 1:
        raise RewriteError("site must hold two first derivatives of omega and one upsilon")
    a, b = oms
    (u,) = ups
    desc = rule.options.get("descriptor") or {}
    tilde = int(rule.options.get("tilde", desc.get("tilde", _smallest_missing(_labels(c)))))
    terms = []
    for x, y in ((a, b), (b, a)):
        tokens = {"i": LINK("i"), "j": OLD(x, "d1"), "k": OLD(y, "d1"), "l": OLD(u, "a")}
        pieces = [(Factor("SR", 0), tokens), (Phi(tilde, "~"), {"a": LINK("i")})]
        terms.append((Fraction(1, 3), splice(c, [a, b, u], pieces)))
    return Applied(LinComb(tuple(terms)))


def _y1y2_pair(c: Contraction, rule: RewriteRule) -> Applied:
    if len(rule.site) != 2:
        raise RewriteError("Y1Y2_PAIR takes the positions of two S* factors")
    p, q = rule.site
    tp = _need_tilde(c, p, "SR")
    tq = _need_tilde(c, q, "SR")
    if c.partner(IndexRef(p, "l")) != IndexRef(q, "l"):
        raise RewriteError("the two S* factors must be joined through their l-slots")
    pieces = []
    for pos, kind in ((p, "Y1"), (q, "Y2")):
        f = c.factors[pos]
        d = [OLD(pos, s) for s in _block(f)] + [OLD(pos, "k")]
        pieces.append((Factor(kind, len(d)), {f"d{n + 1}": a for n, a in enumerate(d)}))
    return Applied(LinComb.of(splice(c, [p, q, tp, tq], pieces)))


RULES = {
    "TO_Y": _to_y,
    "FROM_Y": _from_y,
    "REPL_OMEGA": _repl_omega,
    "OMEGA_READ": _omega_read,
    "OP_STAR": _op_star,
    "CUT_SYM": _cut_sym,
    "ADD_BACK": _add_back,
    "CUT_Y": _cut_y,
    "UN_Y": _un_y,
    "OMEGA_TRIPLE": lambda c, r: _omega_triple(c, r, False),
    "OMEGA_TRIPLE_D": lambda c, r: _omega_triple(c, r, True),
    "OMEGA_TRIPLE_INV": _omega_triple_inv,
    "Y1Y2_PAIR": _y1y2_pair,
}

INVERSES = {
    "TO_Y": "FROM_Y",
    "CUT_SYM": "ADD_BACK",
    "CUT_Y": "UN_Y",
    "REPL_OMEGA": "OMEGA_READ",
    "OMEGA_TRIPLE": "OMEGA_TRIPLE_INV",
}


def apply_rule(c: Contraction, rule: RewriteRule) -> Applied:
    """Apply a catalog rule and return its output with any descriptor."""
    fn = RULES.get(rule.rule_id)
    if fn is None:
        raise RewriteError(f"unknown rule {rule.rule_id!r}")
    try:
        return fn(c, rule)
    except ExprError as exc:
        raise RewriteError(f"{rule.rule_id}: {exc}") from exc


def apply_substitution(c: Contraction, rule: RewriteRule) -> LinComb:
    return apply_rule(c, rule).result
