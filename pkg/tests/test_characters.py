import random

import pytest
from hypothesis import given, settings, strategies as st

from contracta import characters as ch
from contracta.expr import IndexRef, LinComb, canonicalize, parse_contraction, stats
from contracta.generate import permuted, random_field
from contracta.suites import fixture_stanzas, siblings

P = parse_contraction
SSTAR_K = "contr(SR[v=0], ph~[1], Om[h=1,b=2]; f1.i-f2.a, f1.j-f3.d1, f1.l-f3.d2; f1.k)"
# the same S* block with a derivative; free k is special, free j is not
BLOCK_K = "contr(SR[v=1], ph~[1], Om[h=1,b=2]; f1.i-f2.a, f1.j-f3.d1, f1.l-f3.d2; f1.r1, f1.k)"
BLOCK_J = "contr(SR[v=1], ph~[1], Om[h=1,b=2]; f1.i-f2.a, f1.k-f3.d1, f1.l-f3.d2; f1.r1, f1.j)"
# the free index sits on the first or on the second Omega
FREE_ON_1 = ("contr(CR[m=0], Om[h=1,b=3], Om[h=2,b=3], ph[1]; f1.i-f2.d1, f1.j-f3.d1, f1.k-f2.d2, "
             "f1.l-f3.d2, f3.d3-f4.a; f2.d3)")
SPLIT_A = ("contr(SR[v=1], ph~[1], Om[h=1,b=2], Om[h=2,b=2]; f1.i-f2.a, f1.j-f3.d1, f1.l-f3.d2, "
           "f1.k-f4.d1; f1.r1, f4.d2)")
SPLIT_B = ("contr(SR[v=1], ph~[1], Om[h=1,b=2], Om[h=2,b=2]; f1.i-f2.a, f1.k-f3.d1, f1.l-f3.d2, "
           "f1.j-f4.d1; f1.r1, f4.d2)")


def _fixture(name, file="forbidden.txt"):
    return next(s for s in fixture_stanzas(file) if s.name == name)


def test_refined_character_of_special_sstar_field():
    k = ch.compute_character(P(SSTAR_K))
    assert k.to_json()["H3"] == [{"free": 1, "mark": "*"}]
    assert k.to_json()["L3"] == [{"tilde": 1, "primed": []}]
    assert ch.compare_refined(k, k) is ch.Order.EQUIPOLENT


def test_character_json_round_trip():
    for level in ch.LEVELS:
        k = ch.compute_character(P(BLOCK_K), level)
        assert ch.character_from_json(k.to_json()) == k


def test_special_free_index_precedes():
    ka, kb = ch.compute_character(P(BLOCK_K)), ch.compute_character(P(BLOCK_J))
    assert ka.to_json()["H3"] == [{"free": 2, "mark": "*"}]
    assert kb.to_json()["H3"] == [{"free": 2, "mark": "none"}]
    assert ch.compare_refined(ka, kb) is ch.Order.PRECEDENT
    assert ch.compare_refined(kb, ka) is ch.Order.SUBSEQUENT
    part = ch.partition_maximal(LinComb.of(P(BLOCK_K)) + LinComb.of(P(BLOCK_J)))
    assert part.classes == ((0,), (1,))
    assert part.maximal == (0,)


def test_distinct_fields_can_be_equipolent():
    a, b = P(SPLIT_A), P(SPLIT_B)
    assert canonicalize(a) != canonicalize(b)
    ka, kb = ch.compute_character(a), ch.compute_character(b)
    assert ch.compare_refined(ka, kb) is ch.Order.EQUIPOLENT
    part = ch.partition_maximal(LinComb.of(a) + LinComb.of(b))
    assert part.classes == ((0, 1),) and part.maximal_terms() == [0, 1]


def test_h1_records_the_omega_holding_the_free_index():
    assert ch.compute_character(P(FREE_ON_1)).to_json()["H1"] == [1, 0]


def test_different_simple_parts_are_incomparable():
    other = FREE_ON_1.replace("f3.d3-f4.a; f2.d3", "f2.d3-f4.a; f3.d3")
    k1, k2 = ch.compute_character(P(FREE_ON_1)), ch.compute_character(P(other))
    assert k2.to_json()["H1"] == [0, 1]
    with pytest.raises(ch.CharacterError):
        ch.compare_refined(k1, k2)


def test_downgrade_agrees_with_direct_computation():
    c = P(BLOCK_K)
    top = ch.compute_character(c, "refined")
    for level in ch.LEVELS:
        assert ch.downgrade(top, level) == ch.compute_character(c, level)


def test_simply_subsequent():
    c = P(SSTAR_K)
    kappa = ch.compute_character(c, "simple")
    assert not ch.is_simply_subsequent(c, kappa)
    moved = P("contr(CR[m=1], ph[1], Om[h=1,b=2]; f1.r1-f2.a, f1.j-f3.d1, f1.l-f3.d2; f1.i, f1.k)")
    assert ch.is_simply_subsequent(moved, kappa)


def test_simply_subsequent_needs_a_tilde_label():
    c = P(FREE_ON_1)
    kappa = ch.compute_character(c, "simple")
    assert not kappa.defining_set()
    assert not ch.is_simply_subsequent(c, kappa)


def test_simply_subsequent_rejects_other_weak_character():
    with pytest.raises(ch.CharacterError):
        ch.is_simply_subsequent(P(FREE_ON_1), ch.compute_character(P(SSTAR_K), "simple"))


def test_forbidden_fixtures():
    for s in fixture_stanzas("forbidden.txt"):
        want = s.meta["forbidden"] == "true"
        assert bool(ch.is_forbidden(s.lhs.terms[0][1])) == want, s.name


def test_forbidden_trace_names_the_failing_clause():
    tr = ch.is_forbidden(_fixture("omega_three_free").lhs.terms[0][1])
    assert tr.failed() == ["Omega factors of order two"]
    assert ch.is_forbidden(_fixture("no_sstar").lhs.terms[0][1]).failed() == ["sigma2 > 0"]


def test_removable_indices():
    assert not ch.removable_indices(P(SSTAR_K))
    c = P("contr(CR[m=2], Om[h=1,b=2], Om[h=9,b=2], ph[1], ph[2]; f1.r1-f2.d1, f1.r2-f2.d2, "
          "f3.d1-f4.a, f3.d2-f5.a; f1.i, f1.j, f1.k, f1.l)")
    assert ch.removable_indices(c) == {IndexRef(0, "r1"), IndexRef(0, "r2")}
    assert ch.removable_indices(P(BLOCK_K)) == {IndexRef(0, "j")}
    assert ch.removable_indices(P(BLOCK_J)) == {IndexRef(0, "k")}


@pytest.mark.parametrize("stanza", fixture_stanzas("classify.txt"), ids=lambda s: s.name)
def test_classify_fixtures(stanza):
    want = stanza.meta["expect"].replace("_", " ").replace(";", ", ")
    assert ch.classify_case(ch.EquationContext.build(stanza.lhs)).summary() == want


def test_case_three_picks_lowest_omega_label():
    s = _fixture("omega_label_first", "classify.txt")
    ctx = ch.EquationContext.build(s.lhs)
    sel = ch.select_critical_factors(ctx, "III")
    assert sel.critical == {0: (1,)}
    assert sel.label == 2 and sel.subcase == "B"


def test_context_rejects_mixed_simple_characters():
    other = FREE_ON_1.replace("f3.d3-f4.a; f2.d3", "f2.d3-f4.a; f3.d3")
    with pytest.raises(ch.ContextError):
        ch.EquationContext.build(LinComb.of(P(FREE_ON_1)) + LinComb.of(P(other)))


def test_special_set_flags():
    star = P("contr(CR[m=0], Om[h=1,b=2], Om[h=2,b=2]; f1.i-f3.d1, f1.j-f3.d2; f1.k, f1.l, f2.d1, f2.d2)")
    assert ch.special_set_flags(star, x=1).in_Lstar
    assert not ch.special_set_flags(star, x=2).in_Lstar
    plus = P("contr(SR[v=0], ph~[1], Om[h=1,b=2]; f1.i-f2.a, f1.k-f3.d1, f1.l-f3.d2; f1.j)")
    assert ch.special_set_flags(plus).in_Lplus
    assert ch.special_set_flags(P(FREE_ON_1), x=1) == ch.SpecialFlags(False, False, False)


def test_bad_field_y_regime():
    bad = P("contr(SR[v=0], ph~[1], Y[B=1], Om[h=1,b=2], Om[h=2,b=2]; f1.i-f2.a, f1.j-f4.d1, "
            "f1.l-f4.d2, f1.k-f5.d1; f3.d1, f5.d2)")
    assert ch.is_bad(bad, "Y")
    bound = P("contr(SR[v=0], ph~[1], Y[B=1], Om[h=1,b=2], Om[h=2,b=2]; f1.i-f2.a, f1.j-f4.d1, "
              "f1.k-f5.d1, f1.l-f4.d2, f3.d1-f5.d2; )")
    tr = ch.is_bad(bound, "Y")
    assert not tr and tr.failed() == ["gradient Y carries a free index"]


def test_bad_field_omega_regime():
    bad = P("contr(SR[v=0], ph~[1], OmA[B=0], Om[h=1,b=2]; f1.i-f2.a, f1.j-f4.d1, f1.l-f4.d2, "
            "f1.k-f3.a; f3.b)")
    assert ch.is_bad(bad, "omega_pair")
    removable = P("contr(CR[m=2], OmA[B=0], Om[h=1,b=2], Om[h=2,b=2]; f1.r1-f3.d1, f1.r2-f4.d1, "
                  "f1.i-f3.d2, f1.j-f4.d2, f1.k-f2.a; f1.l, f2.b)")
    assert ch.is_bad(removable, "omega_pair").failed() == ["no removable indices"]
    with pytest.raises(ch.CharacterError):
        ch.is_bad(P(SSTAR_K), "elsewhere")


SATURATED = ("contr(CR[m=2], Om[h=1,b=2], Om[h=9,b=2], ph[1], ph[2]; f1.r1-f2.d1, f1.r2-f2.d2, "
             "f3.d1-f4.a, f3.d2-f5.a; f1.i, f1.j, f1.k, f1.l)")


def test_gate_length_three_with_saturated_omega():
    v = ch.hypothesis_gate(LinComb.of(P(SATURATED)), "petermichel3", omega=9)
    assert v.ok


def test_gate_rejects_unsaturated_distinguished_omega():
    c = P("contr(CR[m=2], Om[h=1,b=2], Om[h=9,b=2], ph[1]; f1.r1-f2.d1, f1.r2-f3.d2, f3.d1-f4.a; "
          "f1.i, f1.j, f1.k, f1.l, f2.d2)")
    for lemma in ("petermichel", "petermichel3"):
        v = ch.hypothesis_gate(LinComb.of(c), lemma, omega=9)
        assert not v.clause("distinguished factor saturated by phi")
    with pytest.raises(ch.CharacterError):
        ch.hypothesis_gate(LinComb.of(c), "petermichel")


def test_gate_on_y_regime():
    bad = P("contr(SR[v=0], ph~[1], Y[B=1], Om[h=1,b=2], Om[h=2,b=2]; f1.i-f2.a, f1.j-f4.d1, "
            "f1.l-f4.d2, f1.k-f5.d1; f3.d1, f5.d2)")
    v = ch.hypothesis_gate(LinComb.of(bad), "obote")
    assert v.clause("one Y factor per field")
    assert not v.clause("no bad field of rank alpha")


def test_appendix_gate_on_forbidden_field():
    assert ch.hypothesis_gate(_fixture("base").lhs, "appendix").ok


def test_unknown_gate():
    with pytest.raises(ch.CharacterError):
        ch.hypothesis_gate(LinComb.of(P(SATURATED)), "nowhere")


@pytest.mark.parametrize("name,want", [
    ("cross_paired", "none"),
    ("three_omegas", "foula1"),
    ("two_curvatures_omega", "foula2"),
    ("two_sstar_omega", "foula3"),
    ("gradient_omega_free", "bravado-variant"),
])
def test_length_three_recognizer(name, want):
    c = _fixture(name, "examples.txt").lhs.terms[0][1]
    assert ch.recognize_sigma3_special(c) == want


def test_recognizer_needs_three_real_factors():
    with pytest.raises(ch.CharacterError):
        ch.recognize_sigma3_special(P(SSTAR_K))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_characters_invariant_under_relabelling(seed):
    rng = random.Random(seed)
    c = random_field(rng)
    d = canonicalize(permuted(rng, c))
    for level in ch.LEVELS:
        assert ch.compute_character(c, level) == ch.compute_character(d, level)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_equal_fine_levels_imply_equal_coarse_levels(seed):
    a, b = siblings(random.Random(seed), 2, max_sigma=3)
    ka = [ch.compute_character(a, lv) for lv in ch.LEVELS]
    kb = [ch.compute_character(b, lv) for lv in ch.LEVELS]
    for n in range(1, len(ch.LEVELS)):
        if ka[n] == kb[n]:
            assert ka[n - 1] == kb[n - 1]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_refined_comparison_is_a_total_preorder(seed):
    ks = [ch.compute_character(c, "refined")
          for c in siblings(random.Random(seed), 3, max_sigma=3, max_depth=1, max_free=4, free_rate=0.5)]
    ge = lambda x, y: ch.compare_refined(x, y) is not ch.Order.SUBSEQUENT  # noqa: E731
    for x in ks:
        assert ch.compare_refined(x, x) is ch.Order.EQUIPOLENT
        for y in ks:
            assert ge(x, y) or ge(y, x)
            for z in ks:
                if ge(x, y) and ge(y, z):
                    assert ge(x, z)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_forbidden_needs_sstar_factors(seed):
    c = random_field(random.Random(seed))
    if ch.is_forbidden(c):
        assert stats(c).sigma2 > 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_partition_has_a_maximal_class(seed):
    fields = siblings(random.Random(seed), 4, max_sigma=3, max_depth=1, max_free=4, free_rate=0.5)
    lc = LinComb(tuple((1, c) for c in fields))
    part = ch.partition_maximal(lc)
    assert part.maximal
    assert sorted(t for g in part.classes for t in g) == list(range(len(fields)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3))
def test_freeing_a_curvature_derivative_keeps_removable_indices(m):
    # frees of a bare curvature derivative block stay removable as the block grows
    r = ", ".join(f"f1.r{s}-f{s + 1}.d1" for s in range(1, m + 1))
    oms = "".join(f", Om[h={s},b=2]" for s in range(1, m + 1))
    closes = ", ".join(f"f{s + 1}.d2" for s in range(1, m + 1))
    c = P(f"contr(CR[m={m}]{oms}; {r}; f1.i, f1.j, f1.k, f1.l, {closes})")
    more = P(f"contr(CR[m={m + 1}]{oms}; {r}; f1.i, f1.j, f1.k, f1.l, f1.r{m + 1}, {closes})")
    assert ch.removable_indices(c) <= ch.removable_indices(more)
