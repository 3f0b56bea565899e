"""Acceptance checks shared by the command line and the test suite."""

from __future__ import annotations

import random
import time
import warnings
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources

from . import characters as ch
from .expr import (
    Contraction,
    Factor,
    IndexRef,
    LinComb,
    Phi,
    UP,
    canonicalize,
    format_lincomb,
    parse,
    parse_contraction,
    parse_stanzas,
    saturate,
    stats,
)
from .generate import permuted, random_field, random_skeleton, realize
from .oracle import (
    check_identity,
    check_weight_scaling,
    divergence_value,
    evaluate,
    owner_trace_value,
    random_env,
    required_order,
    saturated_value,
    self_test,
)
from .rewrite import (
    ExclusionPolicy,
    INVERSES,
    RewriteRule,
    RewriteWarning,
    apply_rule,
    bianchi_correction,
    erase_factor,
    riemann_reduce,
    sstar_decompose,
    symmetrize_free,
    xdiv_expand,
)


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} {self.name} ({self.seconds:.2f}s){': ' + self.detail if self.detail else ''}"

    def to_json(self) -> dict:
        return {"name": self.name, "ok": self.ok, "detail": self.detail,
                "seconds": round(self.seconds, 3)}


def _timed(name, fn) -> Check:
    t = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crash is a failed check, reported with its message
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return Check(name, bool(ok), detail, time.perf_counter() - t)


def fixture_text(name: str) -> str:
    return resources.files("contracta").joinpath("fixtures", name).read_text()


def fixture_names() -> list[str]:
    root = resources.files("contracta").joinpath("fixtures")
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".txt"))


def fixture_stanzas(name: str):
    return parse_stanzas(fixture_text(name))


def siblings(rng: random.Random, count: int, max_free: int = 3, free_rate: float = 0.3,
             **skeleton) -> list[Contraction]:
    """``count`` random fields sharing one skeleton, hence one simple character."""
    while True:
        sk = random_skeleton(rng, **skeleton)
        try:
            return [realize(rng, sk, max_free, free_rate) for _ in range(count)]
        except ValueError:
            continue


# ------------------------------------------------------------ oracle laws


def oracle_selftest(trials: int = 8, seed: int = 0) -> list[Check]:
    """Classical curvature identities on random envs in dimensions 4 to 6."""
    def run():
        failed = []
        for t in range(trials):
            n = (4, 5, 6)[t % 3]
            res = self_test(n, seed + t, order=5)
            failed += [f"{k}@n={n},seed={seed + t}" for k, ok in res.items() if not ok]
        return not failed, ", ".join(failed) or f"{trials} envs, all residuals zero"
    return [_timed("oracle self-test", run)]


# ------------------------------------------------------------- exact rules


def _curvature_site(m: int) -> Contraction:
    """A curvature factor whose every slot meets a different gradient."""
    rs = ", ".join(f"f1.r{s}-f{5 + s}.d1" for s in range(1, m + 1))
    oms = ", ".join(f"Om[h={s},b=1]" for s in range(1, m + 1))
    return parse_contraction(
        f"contr(CR[m={m}], ph[1], up, Om[h=7,b=1], Om[h=8,b=1]{', ' + oms if oms else ''}; "
        f"f1.i-f2.a, f1.k-f3.a, f1.j-f4.d1, f1.l-f5.d1{', ' + rs if rs else ''}; )"
    )


DIV_FIELD = ("contr(CR[m=0], Om[h=1,b=3], Om[h=2,b=3]; f1.i-f2.d1, f1.j-f3.d1, "
             "f1.k-f2.d2, f1.l-f3.d2; f2.d3, f3.d3)")
TRIPLE_SITE = ("contr(SR[v=0], ph~[1], Om[h=1,b=1], Om[h=2,b=1], Om[h=3,b=1]; "
               "f1.i-f2.a, f1.j-f3.d1, f1.k-f4.d1, f1.l-f5.d1; )")
SYM_FIELD = "contr(CR[m=1], Om[h=1,b=3]; f1.i-f2.d1, f1.j-f2.d2, f1.k-f2.d3; f1.r1, f1.l)"


def full_divergence_check(c: Contraction, seeds=(0, 1, 2), n: int = 8) -> tuple[bool, str]:
    """Divergence of a field against its expansion plus the owner trace.

    The oracle differentiates the evaluated field; the expansion side sums
    every term with the derivative on a non-owner factor and adds the
    trace term of the owner factor.
    """
    free = c.free[0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RewriteWarning)
        terms = xdiv_expand(c, free, ExclusionPolicy(forbid_owner=False))
    order = required_order(LinComb.of(c)) + 2
    nonzero = False
    for s in seeds:
        env = random_env(n, order, s, linear=True)
        lhs = divergence_value(c, free, env)
        rhs = saturated_value(terms, env) + owner_trace_value(c, free, env)
        if lhs != rhs:
            return False, f"seed {s}: {lhs} != {rhs}"
        nonzero = nonzero or lhs != 0
    return True, f"{len(terms)} terms, nonzero={nonzero}"


def nonvanishing(lc: LinComb, n: int, seeds, linear: bool = False) -> bool:
    """``lc`` is nonzero on at least one random env, so a check is not vacuous."""
    order = required_order(lc)
    return any(evaluate(lc, random_env(n, order, s, linear=linear)) != 0 for s in seeds)


def _identity(name, lhs, rhs, trials, seed, linear=False, probes=None) -> Check:
    """``lhs == rhs`` exactly, with every probe combination nonzero."""
    def run():
        v = check_identity(lhs, rhs, trials=trials, seed=seed, linear=linear)
        if not v.ok:
            return False, f"dims={v.dims} witness={v.witness}"
        seeds = range(seed, seed + trials)
        for probe in probes if probes is not None else [lhs]:
            if not nonvanishing(probe, v.dims[0], seeds, linear):
                return False, f"dims={v.dims}: both sides vanish identically"
        return True, f"dims={v.dims}, nonzero"
    return _timed(name, run)


def omega_triple_roundtrip(c: Contraction) -> LinComb:
    """Apply OMEGA_TRIPLE and then its inverse on every produced term."""
    fwd = apply_rule(c, RewriteRule("OMEGA_TRIPLE"))
    back = LinComb(())
    for q, t in fwd.result.terms:
        rule = RewriteRule("OMEGA_TRIPLE_INV", tuple(fwd.descriptor["inserted"]),
                           {"descriptor": fwd.descriptor})
        back = back + apply_rule(t, rule).result.scale(q)
    return back


def exact_rules(trials: int = 8, seed: int = 0, heavy: bool = True) -> list[Check]:
    out = []
    for m in (1, 2, 3) if heavy else (1, 2):
        c = _curvature_site(m)
        out.append(_identity(f"sstar_decompose m={m}", LinComb.of(c), sstar_decompose(c),
                             trials, seed))
    for which in ("koichi1", "koichi2", "koichi3"):
        for m in (1, 2):
            idt = bianchi_correction(_curvature_site(m), which)
            out.append(_identity(f"{which} m={m}", idt.lhs - idt.rhs, LinComb(()), trials, seed,
                                 probes=[idt.lhs, idt.rhs]))
    out.append(_timed("full divergence vs expansion",
                      lambda: full_divergence_check(parse_contraction(DIV_FIELD))))
    tri = parse_contraction(TRIPLE_SITE)
    out.append(_identity("OMEGA_TRIPLE defining instance", omega_triple_roundtrip(tri),
                         LinComb.of(tri), trials, seed))
    lc = LinComb.of(parse_contraction(SYM_FIELD))
    sym = symmetrize_free(lc, 2, normalize=False)
    sat = lambda x: LinComb(tuple((q, saturate(t)) for q, t in x.terms))  # noqa: E731
    out.append(_identity("symmetrize_free with common upsilon", sat(lc), sat(sym), trials, seed))
    return out


# ----------------------------------------------------------- weight scaling


def weight_scaling(count: int = 20, seed: int = 0, n: int = 3) -> list[Check]:
    def run():
        rng = random.Random(seed)
        bad, nonzero = [], 0
        for k in range(count):
            c = saturate(random_field(rng, max_sigma=4, max_depth=3, max_free=2))
            env = random_env(n, required_order(LinComb.of(c)), seed + k)
            nonzero += evaluate(LinComb.of(c), env) != 0
            for t in (Fraction(2), Fraction(1, 2)):
                if not check_weight_scaling(c, t, env):
                    bad.append(f"{c} t={t}")
        return not bad, "; ".join(bad) or f"{count} fields, {nonzero} nonzero"
    return [_timed("weight scaling", run)]


# --------------------------------------------------------- xdiv structure


def xdiv_structure(count: int = 50, seed: int = 0) -> list[Check]:
    def run():
        rng = random.Random(seed)
        bad = []
        done = 0
        while done < count:
            c = random_field(rng, max_sigma=4, min_sigma=2)
            if not c.free:
                continue
            done += 1
            free = rng.choice(c.free)
            sigma = stats(c).sigma
            others = [p for p, f in enumerate(c.factors) if not f.is_gradient and p != free.pos]
            forbid = frozenset(rng.sample(others, rng.randint(0, len(others))))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RewriteWarning)
                plain = xdiv_expand(c, free)
                excl = xdiv_expand(c, free, ExclusionPolicy(forbid_factors=forbid))
            if len(plain) != sigma - 1:
                bad.append(f"{c}: {len(plain)} terms, sigma={sigma}")
            if len(excl) != sigma - 1 - len(forbid):
                bad.append(f"{c}: {len(excl)} terms with {len(forbid)} exclusions")
            grads = sorted(f for f in c.factors if f.is_gradient)
            for _, t in (*plain.terms, *excl.terms):
                if sorted(f for f in t.factors if f.is_gradient) != grads:
                    bad.append(f"{t}: gradient factor changed")
        return not bad, "; ".join(bad[:3]) or f"{count} fields"
    return [_timed("xdiv structure", run)]


# --------------------------------------------------------- character laws


def character_laws(count: int = 1000, pairs: int = 1000, seed: int = 0) -> list[Check]:
    def invariance():
        rng = random.Random(seed)
        for _ in range(count):
            c = random_field(rng)
            d = canonicalize(permuted(rng, c))
            for level in ch.LEVELS:
                if ch.compute_character(c, level) != ch.compute_character(d, level):
                    return False, f"{c} at {level}"
        return True, f"{count} fields, four levels"

    def monotone():
        rng = random.Random(seed + 1)
        for _ in range(pairs):
            a, b = siblings(rng, 2, max_sigma=3)
            ka = [ch.compute_character(a, lv) for lv in reversed(ch.LEVELS)]
            kb = [ch.compute_character(b, lv) for lv in reversed(ch.LEVELS)]
            for n in range(3):
                if ka[n] == kb[n] and ka[n + 1] != kb[n + 1]:
                    return False, f"{a} / {b}"
            for lv, k in zip(reversed(ch.LEVELS), ka):
                if ch.downgrade(ka[0], lv) != k:
                    return False, f"downgrade to {lv} of {a}"
        return True, f"{pairs} pairs"

    def preorder():
        rng = random.Random(seed + 2)
        checked = 0
        while checked < pairs:
            ks = [ch.compute_character(c, "refined")
                  for c in siblings(rng, 3, max_sigma=3, max_depth=1, max_free=4, free_rate=0.5)]
            cmp = {(x, y): ch.compare_refined(ks[x], ks[y]) for x in range(3) for y in range(3)}
            flip = {ch.Order.PRECEDENT: ch.Order.SUBSEQUENT, ch.Order.SUBSEQUENT: ch.Order.PRECEDENT,
                    ch.Order.EQUIPOLENT: ch.Order.EQUIPOLENT}
            for x in range(3):
                if cmp[x, x] is not ch.Order.EQUIPOLENT:
                    return False, "not reflexive"
                for y in range(3):
                    if cmp[y, x] is not flip[cmp[x, y]]:
                        return False, "not antisymmetric"
                    for z in range(3):
                        ge = lambda p, q: cmp[p, q] is not ch.Order.SUBSEQUENT  # noqa: E731
                        if ge(x, y) and ge(y, z) and not ge(x, z):
                            return False, "not transitive"
                        eq = lambda p, q: cmp[p, q] is ch.Order.EQUIPOLENT  # noqa: E731
                        if eq(x, y) and eq(y, z) and not eq(x, z):
                            return False, "equipolence not transitive"
            checked += 3
        return True, f"{checked} pairs"

    return [_timed("character permutation invariance", invariance),
            _timed("character level monotonicity", monotone),
            _timed("refined comparison preorder", preorder)]


# --------------------------------------------------------------- predicates


FORBIDDEN_FIXTURES = "forbidden.txt"


def forbidden_fixtures() -> list[Check]:
    out = []
    for st in fixture_stanzas(FORBIDDEN_FIXTURES):
        c = st.lhs.terms[0][1]
        want = st.meta.get("forbidden") == "true"

        def run(c=c, want=want):
            tr = ch.is_forbidden(c)
            return bool(tr) == want, f"forbidden={bool(tr)} failed={tr.failed()}"
        out.append(_timed(f"forbidden fixture {st.name}", run))
    return out


def classify_fixtures() -> list[Check]:
    out = []
    for st in fixture_stanzas("classify.txt"):
        want = st.meta.get("expect", "").replace("_", " ").replace(";", ", ")

        def run(st=st, want=want):
            rep = ch.classify_case(ch.EquationContext.build(st.lhs))
            return rep.summary() == want, rep.summary()
        out.append(_timed(f"classify {st.name}", run))
    return out


def saturated_omega_input(rng: random.Random, forbidden_rate: float = 0.5) -> LinComb:
    """Random fields with a phi-saturated Omega for the erasure gate."""
    terms = []
    label = 9
    for _ in range(rng.randint(1, 3)):
        if rng.random() < forbidden_rate:
            (c,) = siblings(rng, 1, max_sigma=3, max_depth=0, phi_rate=0.9, min_sigma=2,
                            max_free=1, free_rate=0.4)
        else:
            c = random_field(rng, max_sigma=3, min_sigma=2)
        u = max([f.label for f in c.factors if f.is_phi] + [0])
        b = rng.choice((2, 2, 3))
        factors = list(c.factors) + [Factor("Om", b, label)]
        pairs = set(c.pairs)
        om = len(factors) - 1
        for s in range(b):
            if rng.random() < 0.9:
                factors.append(Phi(u + s + 1))
                pairs.add((IndexRef(om, f"d{s + 1}"), IndexRef(len(factors) - 1, "a")))
            else:
                factors.append(UP)
                pairs.add((IndexRef(om, f"d{s + 1}"), IndexRef(len(factors) - 1, "a")))
        terms.append((1, Contraction(tuple(factors), frozenset(pairs), c.free)))
    return LinComb(tuple(terms))


def gate_consistency(count: int = 50, seed: int = 0) -> list[Check]:
    def run():
        rng = random.Random(seed)
        flips = {True: 0, False: 0}
        for _ in range(count):
            lc = saturated_omega_input(rng)
            gate = ch.hypothesis_gate(lc, "petermichel", omega=9)
            direct = True
            for _, c in lc.terms:
                pos = next(p for p, f in enumerate(c.factors) if f.kind == "Om" and f.label == 9)
                if not all(c.factors[c.partner(r).pos].is_phi for r in c.refs(pos)):
                    direct = False
                    break
                if ch.is_forbidden(erase_factor(c, pos)):
                    direct = False
            got = gate.clause("no forbidden field after erasure")
            flips[got] += 1
            if got != direct:
                return False, f"gate={got} direct={direct} on {format_lincomb(lc)}"
        return True, f"{count} inputs, clause true {flips[True]} / false {flips[False]}"
    return [_timed("petermichel gate consistency", run)]


def predicates() -> list[Check]:
    return forbidden_fixtures() + classify_fixtures() + gate_consistency()


# --------------------------------------------------------------- round-trips


def _partner_om(factors, pairs, ref, rng, label_box):
    """Pair ``ref`` with a fresh second-order Omega whose other slot is free or on a phi."""
    om = len(factors)
    label_box[0] += 1
    factors.append(Factor("Om", 2, label_box[0]))
    pairs.add((ref, IndexRef(om, "d1")))
    return IndexRef(om, "d2")


def random_site(rng: random.Random, rule_id: str) -> Contraction:
    """A random admissible site for a forward catalog rule."""
    factors: list[Factor] = []
    pairs: set = set()
    free: list[IndexRef] = []
    open_ends: list[IndexRef] = []
    box = [100]
    labels = iter(rng.sample(range(1, 40), 39))

    def grad(ref, kind):
        factors.append(Phi(next(labels), kind) if kind != "up" else UP)
        pairs.add((ref, IndexRef(len(factors) - 1, "a")))

    def elsewhere(ref):
        if rng.random() < 0.3:
            free.append(ref)
        else:
            open_ends.append(_partner_om(factors, pairs, ref, rng, box))

    if rule_id in ("TO_Y", "CUT_Y", "OMEGA_TRIPLE"):
        nu = 0 if rule_id == "OMEGA_TRIPLE" else rng.randint(0, 2)
        factors.append(Factor("SR", nu))
        grad(IndexRef(0, "i"), "~")
        if rule_id == "OMEGA_TRIPLE":
            elsewhere(IndexRef(0, "k"))
        else:
            grad(IndexRef(0, "k"), "")
        for s in [*factors[0].derivative_slots(), "j"]:
            if rule_id == "CUT_Y" and s != "j" and rng.random() < 0.4:
                grad(IndexRef(0, s), "'")
            else:
                elsewhere(IndexRef(0, s))
        elsewhere(IndexRef(0, "l"))
    elif rule_id == "CUT_SYM":
        m = rng.randint(1, 3)
        factors.append(Factor("CR", m))
        grad(IndexRef(0, "i"), "")
        for n, s in enumerate(factors[0].derivative_slots()):
            if n == 0 or rng.random() < 0.5:
                grad(IndexRef(0, s), "")
            else:
                elsewhere(IndexRef(0, s))
        for s in ("j", "k", "l"):
            elsewhere(IndexRef(0, s))
    else:
        raise ValueError(f"no site generator for {rule_id}")
    for ref in open_ends:
        if rng.random() < 0.5:
            free.append(ref)
        else:
            grad(ref, "")
    return Contraction(tuple(factors), frozenset(pairs), tuple(free))


def roundtrip_equal(c: Contraction, rule_id: str) -> bool:
    """inverse after forward gives back ``c`` up to canonical form."""
    if rule_id == "OMEGA_TRIPLE":
        back = omega_triple_roundtrip(c)
        return riemann_reduce(back).normalized() == riemann_reduce(LinComb.of(c)).normalized()
    fwd = apply_rule(c, RewriteRule(rule_id))
    ((q, t),) = fwd.result.terms
    t = canonicalize(t)
    opts = {"descriptor": fwd.descriptor} if fwd.descriptor else {}
    back = apply_rule(t, RewriteRule(INVERSES[rule_id], (), opts)).result.scale(q)
    return back.normalized() == LinComb.of(c).normalized()


def roundtrips(count: int = 20, seed: int = 0) -> list[Check]:
    out = []
    for rule_id in ("TO_Y", "CUT_SYM", "CUT_Y", "OMEGA_TRIPLE"):
        def run(rule_id=rule_id):
            rng = random.Random(seed)
            for _ in range(count):
                c = random_site(rng, rule_id)
                if not roundtrip_equal(c, rule_id):
                    return False, str(c)
            return True, f"{count} sites"
        out.append(_timed(f"{INVERSES[rule_id]} after {rule_id}", run))
    return out


# -------------------------------------------------------------------- parser


def parser_roundtrip() -> list[Check]:
    def run():
        total = 0
        for name in fixture_names():
            for st in fixture_stanzas(name):
                for side in (st.lhs, st.rhs):
                    if side is None:
                        continue
                    total += 1
                    text = format_lincomb(side)
                    again = parse(text)
                    if format_lincomb(again) != text:
                        return False, f"{name}:{st.line} printing is not stable"
                    canon = side.normalized()
                    if parse(format_lincomb(canon)).normalized() != canon \
                            or format_lincomb(parse(format_lincomb(canon)).normalized()) \
                            != format_lincomb(canon):
                        return False, f"{name}:{st.line} canonical form is not stable"
        if total < 100:
            return False, f"only {total} stanza sides in the corpus"
        return True, f"{total} stanza sides"
    return [_timed("parser round-trip", run)]


# -------------------------------------------------------------------- index


SUITES = {
    "oracle-selftest": lambda: oracle_selftest(),
    "exact-rules": lambda: exact_rules(),
    "predicates": predicates,
    "orderings": lambda: character_laws(),
    "weights": lambda: weight_scaling(),
    "xdiv": lambda: xdiv_structure(),
    "roundtrips": lambda: roundtrips(),
    "parser": parser_roundtrip,
}


def run_suite(name: str) -> list[Check]:
    if name == "all":
        return [c for key in SUITES for c in SUITES[key]()]
    if name not in SUITES:
        raise KeyError(name)
    return SUITES[name]()
