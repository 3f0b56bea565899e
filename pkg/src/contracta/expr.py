"""Term algebra for partial contractions of curvature and scalar factors.

A contraction is a list of typed factors, a perfect matching on the
non-free index slots and an ordered list of free slots.  Linear
combinations carry exact rational coefficients.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Iterator, NamedTuple

CURV_KINDS = ("CR", "SR")
PHI_KINDS = ("ph", "ph'", "ph~")
Y_KINDS = ("Y", "Y1", "Y2")
KIND_ORDER = ("CR", "SR", "Om", "OmA", "Y", "Y1", "Y2", "ph", "ph'", "ph~", "up")
INTERNAL = ("i", "j", "k", "l")


class ExprError(ValueError):
    """Structural or syntactic problem with an expression."""

    def __init__(self, message: str, line: int | None = None, col: int | None = None):
        self.line = line
        self.col = col
        where = f"line {line}, column {col}: " if line is not None else ""
        super().__init__(where + message)


@dataclass(frozen=True, order=True)
class Factor:
    """One factor of a contraction.

    ``arity`` is the derivative count (m, v, b or B) and ``label`` the
    function label (Omega or phi index); unused fields stay 0.
    """

    kind: str
    arity: int = 0
    label: int = 0

    def __post_init__(self):
        if self.kind not in KIND_ORDER:
            raise ExprError(f"unknown factor kind {self.kind!r}")
        if self.arity < 0:
            raise ExprError(f"negative derivative count in {self.kind}")
        if self.kind == "Om" and self.arity < 1:
            raise ExprError("Om needs b >= 1")
        if self.kind in Y_KINDS and self.arity < 1:
            raise ExprError(f"{self.kind} needs B >= 1")

    @property
    def key(self) -> tuple[int, int, int]:
        return (KIND_ORDER.index(self.kind), self.label, self.arity)

    @cached_property
    def slots(self) -> tuple[str, ...]:
        if self.kind in CURV_KINDS:
            return tuple(f"r{s}" for s in range(1, self.arity + 1)) + INTERNAL
        if self.kind == "Om" or self.kind in Y_KINDS:
            return tuple(f"d{s}" for s in range(1, self.arity + 1))
        if self.kind == "OmA":
            return tuple(f"d{s}" for s in range(1, self.arity + 1)) + ("a", "b")
        return ("a",)

    @property
    def is_phi(self) -> bool:
        return self.kind in PHI_KINDS

    @property
    def is_gradient(self) -> bool:
        """True for the one-slot factors (phi flavours and upsilon)."""
        return self.kind in PHI_KINDS or self.kind == "up"

    @property
    def is_curvature(self) -> bool:
        return self.kind in CURV_KINDS

    def derivative_slots(self) -> tuple[str, ...]:
        if self.kind in CURV_KINDS:
            return self.slots[: self.arity]
        if self.kind == "Om" or self.kind in Y_KINDS or self.kind == "OmA":
            return self.slots[: self.arity]
        return ()

    def slot_class(self, slot: str) -> str:
        """Slots sharing a class are interchangeable (symmetric block)."""
        if self.kind == "CR" and slot[0] == "r":
            return "r"
        if self.kind == "SR" and (slot[0] == "r" or slot == "j"):
            return "r"
        if (self.kind == "Om" or self.kind in Y_KINDS) and slot[0] == "d":
            return "d"
        return slot

    def __str__(self) -> str:
        k = self.kind
        if k == "CR":
            return f"CR[m={self.arity}]"
        if k == "SR":
            return f"SR[v={self.arity}]"
        if k == "Om":
            return f"Om[h={self.label},b={self.arity}]"
        if k in Y_KINDS or k == "OmA":
            return f"{k}[B={self.arity}]"
        if k == "up":
            return "up"
        return f"{k}[{self.label}]"


def CR(m: int = 0) -> Factor:
    return Factor("CR", m)


def SR(v: int = 0) -> Factor:
    return Factor("SR", v)


def Om(h: int, b: int) -> Factor:
    return Factor("Om", b, h)


def Phi(h: int, flavor: str = "") -> Factor:
    return Factor("ph" + flavor, 0, h)


UP = Factor("up")


def slot_order(slot: str) -> tuple[int, int]:
    """Position of a slot name inside any factor's slot tuple."""
    if slot[0] in "rd" and slot[1:].isdigit():
        return (0, int(slot[1:]))
    if slot in INTERNAL:
        return (1, INTERNAL.index(slot))
    if slot in ("a", "b"):
        return (2, "ab".index(slot))
    return (3, 0)


class IndexRef(NamedTuple):
    """A slot of the factor at ``pos`` (0-based)."""

    pos: int
    slot: str

    @property
    def key(self) -> tuple[int, tuple[int, int]]:
        return (self.pos, slot_order(self.slot))

    def __str__(self) -> str:
        return f"f{self.pos + 1}.{self.slot}"


def _pair(a: IndexRef, b: IndexRef) -> tuple[IndexRef, IndexRef]:
    return (a, b) if a.key <= b.key else (b, a)


@dataclass(frozen=True)
class Contraction:
    factors: tuple[Factor, ...]
    pairs: frozenset
    free: tuple[IndexRef, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        object.__setattr__(self, "free", tuple(IndexRef(*r) for r in self.free))
        object.__setattr__(
            self, "pairs", frozenset(_pair(IndexRef(*a), IndexRef(*b)) for a, b in self.pairs)
        )
        self._validate()

    def _validate(self):
        seen: set[IndexRef] = set()
        for ref in self.endpoints():
            if not 0 <= ref.pos < len(self.factors):
                raise ExprError(f"index {ref} refers to a missing factor")
            if ref.slot not in self.factors[ref.pos].slots:
                raise ExprError(f"unknown slot {ref} for {self.factors[ref.pos]}")
            if ref in seen:
                raise ExprError(f"slot {ref} used twice")
            seen.add(ref)
        for a, b in self.pairs:
            if a.pos == b.pos:
                raise ExprError(f"intra-factor pair {a}-{b}")
        for pos, f in enumerate(self.factors):
            for s in f.slots:
                if IndexRef(pos, s) not in seen:
                    raise ExprError(f"slot {IndexRef(pos, s)} is neither paired nor free")
        for a, b in self.pairs:
            for x, y in ((a, b), (b, a)):
                fx, fy = self.factors[x.pos], self.factors[y.pos]
                if fx.kind == "SR" and x.slot == "i" and fy.kind != "ph~":
                    raise ExprError(f"S* slot {x} must pair with a tilde phi")
                if fx.kind == "ph~" and not (fy.kind == "SR" and y.slot == "i"):
                    raise ExprError(f"tilde phi {x} must pair with an S* i-slot")
        for ref in self.free:
            f = self.factors[ref.pos]
            if (f.kind == "SR" and ref.slot == "i") or f.kind == "ph~":
                raise ExprError(f"slot {ref} must pair with its tilde partner")

    def endpoints(self) -> Iterator[IndexRef]:
        for a, b in self.pairs:
            yield a
            yield b
        yield from self.free

    @cached_property
    def partners(self) -> dict[IndexRef, IndexRef]:
        out = {}
        for a, b in self.pairs:
            out[a] = b
            out[b] = a
        return out

    def partner(self, ref: IndexRef) -> IndexRef | None:
        return self.partners.get(ref)

    def refs(self, pos: int) -> list[IndexRef]:
        return [IndexRef(pos, s) for s in self.factors[pos].slots]

    def is_free(self, ref: IndexRef) -> bool:
        return ref in self.free

    @property
    def rank(self) -> int:
        return len(self.free)

    def sorted_pairs(self) -> list[tuple[IndexRef, IndexRef]]:
        return sorted(self.pairs, key=lambda p: (p[0].key, p[1].key))

    def __str__(self) -> str:
        fs = ", ".join(str(f) for f in self.factors)
        ps = ", ".join(f"{a}-{b}" for a, b in self.sorted_pairs())
        fr = ", ".join(str(r) for r in self.free)
        return f"contr({fs}; {ps}; {fr})"

    @cached_property
    def sort_key(self):
        return (
            tuple(f.key for f in self.factors),
            tuple((a.key, b.key) for a, b in self.sorted_pairs()),
            tuple(r.key for r in self.free),
        )


# ------------------------------------------------------------------ splice


def OLD(pos: int, slot: str) -> tuple:
    """Token: take over whatever slot ``slot`` of factor ``pos`` was attached to."""
    return ("old", pos, slot)


def LINK(key) -> tuple:
    """Token: the two slots carrying the same key are paired with each other."""
    return ("int", key)


NEWFREE = ("newfree",)


def KEEP(pos: int, slot: str) -> tuple:
    """Token: pair with a surviving slot that is currently free."""
    return ("kept", pos, slot)


def splice(
    c: Contraction,
    remove: Iterable[int],
    pieces: list[tuple[Factor, dict[str, tuple]]],
    at: int | None = None,
    orphans: str = "error",
) -> Contraction:
    """Replace the factors at ``remove`` by ``pieces``.

    Each piece maps its slots to tokens: ``OLD`` inherits an attachment of
    a removed slot (its partner, or its place in the free list), ``LINK``
    pairs two new slots and ``NEWFREE`` appends a free index.  Surviving
    slots whose partner was removed without being inherited are handled
    by ``orphans``: ``"error"``, ``"free"`` (appended to the free list) or
    ``"drop"`` (only allowed for gradient factors, which are then deleted).
    """
    remove = set(remove)
    kept = [p for p in range(len(c.factors)) if p not in remove]
    if at is None:
        first = min(remove) if remove else len(c.factors)
        at = sum(1 for p in kept if p < first)
    layout: list[tuple[str, int]] = [("k", p) for p in kept]
    layout[at:at] = [("n", n) for n in range(len(pieces))]
    newpos = {item: q for q, item in enumerate(layout)}

    inherited: dict[IndexRef, IndexRef] = {}
    links: dict = {}
    appended: list[IndexRef] = []
    captured: dict[IndexRef, IndexRef] = {}
    for n, (f, tokens) in enumerate(pieces):
        if set(tokens) != set(f.slots):
            raise ExprError(f"piece {f} must assign every slot exactly once")
        for s in f.slots:
            ref = IndexRef(newpos[("n", n)], s)
            tok = tokens[s]
            if tok[0] == "old":
                src = IndexRef(tok[1], tok[2])
                if src.pos not in remove:
                    raise ExprError(f"token refers to kept slot {src}")
                if src in inherited:
                    raise ExprError(f"slot {src} inherited twice")
                inherited[src] = ref
            elif tok[0] == "int":
                links.setdefault(tok[1], []).append(ref)
            elif tok[0] == "newfree":
                appended.append(ref)
            elif tok[0] == "kept":
                src = IndexRef(tok[1], tok[2])
                if src.pos in remove or src not in c.free or src in captured:
                    raise ExprError(f"slot {src} is not an available free index")
                captured[src] = ref
            else:
                raise ExprError(f"bad token {tok!r}")

    pairs = set()
    drop_kept: set[int] = set()
    orphan_free: list[IndexRef] = []

    def mapped(r: IndexRef) -> IndexRef:
        return IndexRef(newpos[("k", r.pos)], r.slot)

    for a, b in c.pairs:
        ra, rb = a.pos in remove, b.pos in remove
        if not ra and not rb:
            pairs.add((mapped(a), mapped(b)))
        elif ra and rb:
            if a in inherited and b in inherited:
                pairs.add((inherited[a], inherited[b]))
            elif a in inherited or b in inherited:
                raise ExprError(f"cannot inherit {a}-{b}: both ends removed")
        else:
            gone, stay = (a, b) if ra else (b, a)
            if gone in inherited:
                pairs.add((inherited[gone], mapped(stay)))
            elif orphans == "free":
                orphan_free.append(mapped(stay))
            elif orphans == "drop" and c.factors[stay.pos].is_gradient:
                drop_kept.add(stay.pos)
            else:
                raise ExprError(f"slot {stay} would be left dangling")
    for src, ref in captured.items():
        pairs.add((mapped(src), ref))
    for key, refs in links.items():
        if len(refs) != 2:
            raise ExprError(f"link {key!r} must join exactly two slots")
        pairs.add((refs[0], refs[1]))
    free = []
    for r in c.free:
        if r.pos in remove:
            if r in inherited:
                free.append(inherited[r])
            elif orphans not in ("free", "drop"):
                raise ExprError(f"free index {r} would be lost")
        elif r not in captured:
            free.append(mapped(r))
    for r in inherited:
        if r not in c.partners and r not in c.free:
            raise ExprError(f"slot {r} has no attachment")
    factors = [c.factors[p] if kind == "k" else pieces[p][0] for kind, p in layout]
    out = Contraction(tuple(factors), frozenset(pairs), tuple(free + orphan_free + appended))
    if drop_kept:
        idx = sorted(newpos[("k", p)] for p in drop_kept)
        out = splice(out, idx, [])
    return out


# ---------------------------------------------------------- canonical form


def _class_ranks(f: Factor) -> dict[str, int]:
    classes: list[str] = []
    for s in f.slots:
        c = f.slot_class(s)
        if c not in classes:
            classes.append(c)
    return {s: classes.index(f.slot_class(s)) for s in f.slots}


def _refine(c: Contraction, ranks) -> list[int]:
    keys = [f.key for f in c.factors]
    uniq = sorted(set(keys))
    colors = [uniq.index(k) for k in keys]
    freepos = {r: n for n, r in enumerate(c.free)}
    while True:
        sigs = []
        for p, f in enumerate(c.factors):
            links, frees = [], []
            for s in f.slots:
                r = IndexRef(p, s)
                q = c.partners.get(r)
                if q is None:
                    frees.append((ranks[p][s], freepos[r]))
                else:
                    links.append((ranks[p][s], colors[q.pos], ranks[q.pos][q.slot]))
            sigs.append((colors[p], tuple(sorted(links)), tuple(sorted(frees))))
        uniq = sorted(set(sigs))
        new = [uniq.index(s) for s in sigs]
        if len(set(new)) == len(set(colors)):
            return new
        colors = new


def canonicalize(c: Contraction) -> Contraction:
    """Deterministic representative modulo factor order and symmetric blocks."""
    return canonical_map(c)[0]


def canonical_map(c: Contraction) -> tuple[Contraction, dict[IndexRef, IndexRef]]:
    """The canonical form together with the slot each old slot moved to."""
    ranks = [_class_ranks(f) for f in c.factors]
    colors = _refine(c, ranks)
    groups: dict[tuple, list[int]] = {}
    for p in sorted(range(len(c.factors)), key=lambda p: (c.factors[p].key, colors[p])):
        groups.setdefault((c.factors[p].key, colors[p]), []).append(p)
    cells = [groups[k] for k in sorted(groups)]

    def enc(new, r):
        return (new[r.pos], ranks[r.pos][r.slot])

    best = None
    for choice in itertools.product(*(itertools.permutations(g) for g in cells)):
        order = [p for cell in choice for p in cell]
        new = {old: n for n, old in enumerate(order)}
        edges = tuple(sorted(tuple(sorted((enc(new, a), enc(new, b)))) for a, b in c.pairs))
        frees = tuple(enc(new, r) for r in c.free)
        if best is None or (edges, frees) < best[0]:
            best = ((edges, frees), order)
    order = best[1]
    new = {old: n for n, old in enumerate(order)}
    factors = tuple(c.factors[p] for p in order)

    pools: dict[tuple[int, int], list[str]] = {}
    for n, f in enumerate(factors):
        rk = _class_ranks(f)
        for s in f.slots:
            pools.setdefault((n, rk[s]), []).append(s)
    used = {k: 0 for k in pools}
    moved: dict[IndexRef, IndexRef] = {}

    def take(old):
        end = enc(new, old)
        s = pools[end][used[end]]
        used[end] += 1
        moved[old] = IndexRef(end[0], s)
        return moved[old]

    ends = sorted((tuple(sorted((a, b), key=lambda r: enc(new, r))) for a, b in c.pairs),
                  key=lambda e: (enc(new, e[0]), enc(new, e[1])))
    pairs = frozenset(_pair(take(a), take(b)) for a, b in ends)
    free = tuple(take(r) for r in c.free)
    for p, f in enumerate(c.factors):
        for s in f.slots:
            if IndexRef(p, s) not in moved:
                take(IndexRef(p, s))
    return Contraction(factors, pairs, free), moved


def relabel(c: Contraction, order: list[int]) -> Contraction:
    """Permute factors: the new position n holds old factor ``order[n]``."""
    new = {old: n for n, old in enumerate(order)}
    pairs = frozenset((IndexRef(new[a.pos], a.slot), IndexRef(new[b.pos], b.slot)) for a, b in c.pairs)
    free = tuple(IndexRef(new[r.pos], r.slot) for r in c.free)
    return Contraction(tuple(c.factors[p] for p in order), pairs, free)


# ------------------------------------------------------------- linear combos


@dataclass(frozen=True)
class LinComb:
    terms: tuple[tuple[Fraction, Contraction], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple((Fraction(q), c) for q, c in self.terms))

    @classmethod
    def of(cls, c: Contraction, coeff=1) -> "LinComb":
        return cls(((Fraction(coeff), c),))

    def __add__(self, other: "LinComb") -> "LinComb":
        return LinComb(self.terms + other.terms)

    def __neg__(self) -> "LinComb":
        return self.scale(-1)

    def __sub__(self, other: "LinComb") -> "LinComb":
        return self + (-other)

    def scale(self, q) -> "LinComb":
        q = Fraction(q)
        return LinComb(tuple((q * a, c) for a, c in self.terms))

    def __iter__(self):
        return iter(self.terms)

    def __len__(self) -> int:
        return len(self.terms)

    def normalized(self) -> "LinComb":
        acc: dict[Contraction, Fraction] = {}
        for q, c in self.terms:
            k = canonicalize(c)
            acc[k] = acc.get(k, Fraction(0)) + q
        items = [(q, c) for c, q in acc.items() if q != 0]
        items.sort(key=lambda t: (t[1].sort_key, t[0]))
        return LinComb(tuple(items))

    def is_zero(self) -> bool:
        return not self.normalized().terms

    def __str__(self) -> str:
        return format_lincomb(self)


def _coeff_prefix(q: Fraction, first: bool) -> str:
    mag = abs(q)
    body = "" if mag == 1 else f"{mag} * "
    if first:
        return ("-" if q < 0 else "") + body
    return ("- " if q < 0 else "+ ") + body


def format_lincomb(lc: LinComb) -> str:
    if not lc.terms:
        return "0"
    lines = [_coeff_prefix(q, n == 0) + str(c) for n, (q, c) in enumerate(lc.terms)]
    return "\n".join(lines)


# ------------------------------------------------------------------- parser

_TOKEN = re.compile(
    r"(?P<ws>\s+)|(?P<num>\d+)|(?P<name>[A-Za-z_][A-Za-z0-9_]*['~]?)|(?P<op>[()\[\],;.\-+*/=])"
)


class _Tok(NamedTuple):
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str, line0: int = 1) -> list[_Tok]:
    out = []
    pos, line, col = 0, line0, 1
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ExprError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        tok = m.group()
        if kind != "ws":
            out.append(_Tok(kind, tok, line, col))
        nl = tok.count("\n")
        if nl:
            line += nl
            col = len(tok) - tok.rfind("\n")
        else:
            col += len(tok)
        pos = m.end()
    out.append(_Tok("eof", "", line, col))
    return out


class _Parser:
    def __init__(self, text: str, line0: int = 1):
        self.toks = _tokenize(text, line0)
        self.i = 0

    @property
    def cur(self) -> _Tok:
        return self.toks[self.i]

    def fail(self, msg: str, tok: _Tok | None = None):
        tok = tok or self.cur
        raise ExprError(msg, tok.line, tok.col)

    def take(self, text: str | None = None, kind: str | None = None) -> _Tok:
        t = self.cur
        if (text is not None and t.text != text) or (kind is not None and t.kind != kind):
            want = text if text is not None else kind
            self.fail(f"expected {want!r}, found {t.text or 'end of input'!r}")
        self.i += 1
        return t

    def accept(self, text: str) -> bool:
        if self.cur.text == text and self.cur.kind != "eof":
            self.i += 1
            return True
        return False

    def integer(self) -> int:
        return int(self.take(kind="num").text)

    def rational(self) -> Fraction:
        n = self.integer()
        if self.accept("/"):
            d = self.integer()
            if d == 0:
                self.fail("zero denominator")
            return Fraction(n, d)
        return Fraction(n)

    def lincomb(self) -> LinComb:
        if self.cur.text == "0" and self.toks[self.i + 1].kind == "eof":
            self.i += 1
            return LinComb()
        terms = [self.term(first=True)]
        while self.cur.kind != "eof":
            terms.append(self.term(first=False))
        return LinComb(tuple(terms))

    def term(self, first: bool) -> tuple[Fraction, Contraction]:
        sign = 1
        if self.accept("-"):
            sign = -1
        elif not self.accept("+") and not first:
            self.fail("expected '+' or '-' between terms")
        q = Fraction(1)
        if self.cur.kind == "num":
            q = self.rational()
            self.take("*")
        return sign * q, self.contraction()

    def contraction(self) -> Contraction:
        start = self.take("contr")
        self.take("(")
        factors = [self.factor()]
        while self.accept(","):
            factors.append(self.factor())
        self.take(";")
        pairs = []
        if self.cur.text != ";":
            pairs.append(self.pair())
            while self.accept(","):
                pairs.append(self.pair())
        self.take(";")
        free = []
        if self.cur.text != ")":
            free.append(self.ref())
            while self.accept(","):
                free.append(self.ref())
        self.take(")")
        if len(set(free)) != len(free):
            self.fail("duplicate free index", start)
        try:
            return Contraction(tuple(factors), frozenset(pairs), tuple(free))
        except ExprError as e:
            raise ExprError(str(e), start.line, start.col) from None

    def _param(self, name: str) -> int:
        self.take(name)
        self.take("=")
        return self.integer()

    def factor(self) -> Factor:
        t = self.take(kind="name")
        try:
            if t.text == "up":
                return UP
            self.take("[")
            if t.text == "CR":
                f = Factor("CR", self._param("m"))
            elif t.text == "SR":
                f = Factor("SR", self._param("v"))
            elif t.text == "Om":
                h = self._param("h")
                self.take(",")
                f = Factor("Om", self._param("b"), h)
            elif t.text in Y_KINDS or t.text == "OmA":
                f = Factor(t.text, self._param("B"))
            elif t.text in PHI_KINDS:
                f = Factor(t.text, 0, self.integer())
            else:
                self.fail(f"unknown factor {t.text!r}", t)
            self.take("]")
            return f
        except ExprError as e:
            if e.line is None:
                raise ExprError(str(e), t.line, t.col) from None
            raise

    def ref(self) -> IndexRef:
        t = self.take(kind="name")
        if not re.fullmatch(r"f[1-9][0-9]*", t.text):
            self.fail(f"expected factor reference like f1, found {t.text!r}", t)
        self.take(".")
        s = self.take(kind="name")
        return IndexRef(int(t.text[1:]) - 1, s.text)

    def pair(self) -> tuple[IndexRef, IndexRef]:
        a = self.ref()
        self.take("-")
        return (a, self.ref())


def parse(text: str, line0: int = 1) -> LinComb:
    """Parse one linear combination; errors carry line and column."""
    p = _Parser(text, line0)
    lc = p.lincomb()
    p.take(kind="eof")
    return lc


def parse_contraction(text: str) -> Contraction:
    lc = parse(text)
    if len(lc.terms) != 1 or lc.terms[0][0] != 1:
        raise ExprError("expected a single contraction")
    return lc.terms[0][1]


@dataclass
class Stanza:
    name: str | None
    lhs: LinComb
    rhs: LinComb | None = None
    line: int = 1
    meta: dict = field(default_factory=dict)


def _strip_comment(line: str) -> str:
    n = line.find("#")
    return line if n < 0 else line[:n] + " " * (len(line) - n)


def parse_stanzas(text: str) -> list[Stanza]:
    """Split a file into blank-line separated stanzas.

    A stanza may start with an ``@name`` line and may contain a line
    holding only ``=`` separating a left and right side.
    """
    lines = [_strip_comment(x) for x in text.splitlines()]
    blocks: list[list[tuple[int, str]]] = []
    cur: list[tuple[int, str]] = []
    for n, x in enumerate(lines, start=1):
        if x.strip():
            cur.append((n, x))
        elif cur:
            blocks.append(cur)
            cur = []
    if cur:
        blocks.append(cur)
    out = []
    for block in blocks:
        name = None
        meta = {}
        while block and block[0][1].strip().startswith("@"):
            head = block.pop(0)[1].strip()[1:].split()
            if not head:
                raise ExprError("empty stanza header")
            if name is None:
                name = head[0]
            for kv in head[1:]:
                k, _, v = kv.partition("=")
                meta[k] = v
        if not block:
            raise ExprError(f"stanza {name} has no expression")
        sides: list[list[tuple[int, str]]] = [[]]
        for n, x in block:
            if x.strip() == "=":
                sides.append([])
            else:
                sides[-1].append((n, x))
        if len(sides) > 2 or not all(sides):
            raise ExprError("malformed equation stanza", block[0][0], 1)
        parsed = [parse("\n".join(x for _, x in side), side[0][0]) for side in sides]
        out.append(
            Stanza(name, parsed[0], parsed[1] if len(parsed) == 2 else None, block[0][0], meta)
        )
    return out


def format_stanza(st: Stanza) -> str:
    head = []
    if st.name is not None:
        extra = "".join(f" {k}={v}" for k, v in st.meta.items())
        head.append(f"@{st.name}{extra}")
    body = [format_lincomb(st.lhs)]
    if st.rhs is not None:
        body += ["=", format_lincomb(st.rhs)]
    return "\n".join(head + body)


# -------------------------------------------------------------- statistics


@dataclass(frozen=True)
class Stats:
    sigma: int
    sigma1: int
    sigma2: int
    p: int
    u: int
    weight: int
    mu: int


def stats(c: Contraction) -> Stats:
    kinds = [f.kind for f in c.factors]
    s1 = kinds.count("CR")
    s2 = kinds.count("SR")
    p = kinds.count("Om")
    extra = sum(1 for k in kinds if k in Y_KINDS or k == "OmA")
    u = sum(1 for k in kinds if k in PHI_KINDS)
    slots = sum(len(f.slots) for f in c.factors)
    return Stats(s1 + s2 + p + extra, s1, s2, p, u, 2 * (s1 + s2) - slots, len(c.free))


# ------------------------------------------------------------ acceptability


@dataclass(frozen=True)
class Verdict:
    ok: bool
    failures: tuple[str, ...] = ()

    def __bool__(self) -> bool:
        return self.ok


CLAUSES = {
    1: "free indices sit on curvature or Omega factors",
    2: "plain phi factors contract against allowed slots",
    3: "every Omega carries at least two derivatives",
    4: "tilde phi factors contract against S* i-slots",
    5: "primed phi factors contract against S* derivative or j slots",
    6: "phi labels are exactly 1..u",
    7: "only factor kinds of the chosen form occur",
}


def validate_acceptable(c: Contraction, form: str = "form2") -> Verdict:
    """Check the placement rules for acceptable contractions.

    ``form1`` allows CR, Om and plain phi factors with phi on any slot of a
    curvature or Omega factor; ``form2`` adds S* factors and the primed and
    tilde phi flavours, with plain phi restricted to derivative slots.
    """
    if form not in ("form1", "form2"):
        raise ValueError(f"unknown form {form!r}")
    allowed = {"CR", "Om", "ph"} if form == "form1" else {"CR", "SR", "Om", *PHI_KINDS}
    bad: set[int] = set()
    if any(f.kind not in allowed for f in c.factors):
        bad.add(7)
    for r in c.free:
        if c.factors[r.pos].kind not in ("CR", "SR", "Om"):
            bad.add(1)
    labels = []
    for pos, f in enumerate(c.factors):
        if f.kind == "Om" and f.arity < 2:
            bad.add(3)
        if not f.is_phi:
            continue
        labels.append(f.label)
        q = c.partner(IndexRef(pos, "a"))
        tgt = c.factors[q.pos] if q is not None else None
        if f.kind == "ph":
            if tgt is None or tgt.kind not in ("CR", "Om"):
                bad.add(2)
            elif form == "form2" and q.slot not in tgt.derivative_slots():
                bad.add(2)
        elif f.kind == "ph~":
            if tgt is None or tgt.kind != "SR" or q.slot != "i":
                bad.add(4)
        elif tgt is None or tgt.kind != "SR" or tgt.slot_class(q.slot) != "r":
            bad.add(5)
    if sorted(labels) != list(range(1, len(labels) + 1)):
        bad.add(6)
    fails = tuple(f"clause {n}: {CLAUSES[n]}" for n in sorted(bad))
    return Verdict(not bad, fails)


def clause_numbers(v: Verdict) -> set[int]:
    return {int(s.split(":")[0].split()[1]) for s in v.failures}


def phi_partner(c: Contraction, ref: IndexRef) -> Factor | None:
    """The gradient factor paired to ``ref``, if any."""
    q = c.partner(ref)
    if q is None:
        return None
    f = c.factors[q.pos]
    return f if f.is_gradient else None


def saturate(c: Contraction, count: int | None = None) -> Contraction:
    """Contract the first ``count`` free indices with fresh upsilon factors."""
    frees = c.free if count is None else c.free[:count]
    pieces = [(UP, {"a": KEEP(r.pos, r.slot)}) for r in frees]
    return splice(c, [], pieces)


def total_slots(c: Contraction) -> int:
    return sum(len(f.slots) for f in c.factors)


def iter_terms(lcs: Iterable[LinComb]) -> Iterator[Contraction]:
    for lc in lcs:
        for _, c in lc.terms:
            yield c
