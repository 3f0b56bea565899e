import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from contracta.expr import (
    ExprError,
    Factor,
    IndexRef,
    LinComb,
    canonical_map,
    canonicalize,
    clause_numbers,
    format_lincomb,
    format_stanza,
    parse,
    parse_contraction,
    parse_stanzas,
    saturate,
    stats,
    validate_acceptable,
)
from contracta.generate import permuted, random_field

EX1 = "contr(CR[m=0], Om[h=1,b=2], Om[h=2,b=2]; f1.i-f2.d1, f1.j-f2.d2, f1.k-f3.d1, f1.l-f3.d2; )"
EX2 = "contr(SR[v=0], ph~[1], Om[h=1,b=2]; f1.i-f2.a, f1.j-f3.d1, f1.l-f3.d2; f1.k)"


def test_parse_complete_contraction():
    c = parse_contraction(EX1)
    assert [f.kind for f in c.factors] == ["CR", "Om", "Om"]
    assert c.rank == 0
    assert len(c.pairs) == 4


def test_parse_field_with_special_free_index():
    c = parse_contraction(EX2)
    assert c.free == (IndexRef(0, "k"),)
    assert stats(c).mu == 1


def test_intra_factor_pair_rejected():
    with pytest.raises(ExprError, match="same factor|intra"):
        parse_contraction("contr(CR[m=0], ph[1]; f1.i-f1.j, f1.k-f2.a; f1.l)")


@pytest.mark.parametrize("bad", [
    "contr(CR[m=1]; f1.i-f1.x; )",
    "contr(CR[m=0]; f1.i-f2.a; )",
    "contr(XX[m=0]; ; )",
    "contr(CR[m=0], CR[m=0]; f1.i-f2.i, f1.j-f2.j, f1.k-f2.k; f1.l, f1.l)",
    "contr(CR[m=0]",
])
def test_malformed_input_raises_expr_error(bad):
    with pytest.raises(ExprError):
        parse(bad)


def test_error_carries_position():
    with pytest.raises(ExprError) as info:
        parse("\n  contr(CR[m=0]; f9.i-f1.j; )", 1)
    assert info.value.line == 2


def test_print_round_trips():
    c = parse_contraction(EX1)
    assert parse_contraction(str(c)) == c


def test_negative_fraction_coefficient():
    lc = LinComb.of(parse_contraction(EX1), Fraction(-3, 2))
    assert format_lincomb(lc).startswith("-3/2 * contr(")


def test_empty_lincomb_prints_zero():
    assert format_lincomb(LinComb()) == "0"


def test_omega_swap_same_canonical_form():
    c = parse_contraction(EX1)
    d = parse_contraction(
        "contr(Om[h=1,b=2], CR[m=0], Om[h=2,b=2]; f2.k-f1.d1, f2.l-f1.d2, f2.i-f3.d1, f2.j-f3.d2; )"
    )
    e = parse_contraction(
        "contr(CR[m=0], Om[h=1,b=2], Om[h=2,b=2]; f1.k-f2.d1, f1.l-f2.d2, f1.i-f3.d1, f1.j-f3.d2; )"
    )
    assert canonicalize(c) != canonicalize(d)
    assert canonicalize(d) == canonicalize(e)


def test_derivative_block_partners_commute():
    a = parse_contraction("contr(CR[m=2], ph[1], ph[2]; f1.r1-f2.a, f1.r2-f3.a; f1.i, f1.j, f1.k, f1.l)")
    b = parse_contraction("contr(CR[m=2], ph[1], ph[2]; f1.r1-f3.a, f1.r2-f2.a; f1.i, f1.j, f1.k, f1.l)")
    assert canonicalize(a) == canonicalize(b)


def test_riemann_slots_not_quotiented():
    a = parse_contraction("contr(CR[m=0], Om[h=1,b=2], Om[h=2,b=2]; f1.i-f2.d1, f1.j-f3.d1; f1.k, f1.l, f2.d2, f3.d2)")
    b = parse_contraction("contr(CR[m=0], Om[h=1,b=2], Om[h=2,b=2]; f1.i-f2.d1, f1.l-f3.d1; f1.k, f1.j, f2.d2, f3.d2)")
    assert canonicalize(a) != canonicalize(b)


def test_canonical_map_tracks_slots():
    c = parse_contraction(EX2)
    d, moved = canonical_map(c)
    assert d == canonicalize(c)
    for r in c.free:
        assert moved[r] in d.free


def test_acceptable_form1():
    assert validate_acceptable(parse_contraction(EX1), "form1").ok


def test_underived_omega_violates_clause_3():
    c = parse_contraction("contr(CR[m=0], Om[h=1,b=1], Om[h=2,b=2]; f1.i-f2.d1, f1.k-f3.d1, f1.l-f3.d2; f1.j)")
    v = validate_acceptable(c, "form1")
    assert not v.ok and 3 in clause_numbers(v)


def test_tilde_on_j_slot_violates_placement():
    # tilde placement is a structural invariant, so it fails at construction
    with pytest.raises(ExprError, match="tilde"):
        parse_contraction("contr(SR[v=0], ph~[1], Om[h=1,b=2]; f1.j-f2.a, f1.i-f3.d1, f1.l-f3.d2; f1.k)")


def test_primed_phi_on_internal_slot_violates_placement():
    c = parse_contraction(
        "contr(SR[v=0], ph~[1], ph'[2], Om[h=1,b=2]; f1.i-f2.a, f1.k-f3.a, f1.j-f4.d1, f1.l-f4.d2; )"
    )
    v = validate_acceptable(c)
    assert not v.ok and clause_numbers(v) == {5}


def test_stats_example_1():
    s = stats(parse_contraction(EX1))
    assert (s.sigma, s.sigma1, s.sigma2, s.p, s.u, s.mu, s.weight) == (3, 1, 0, 2, 0, 0, -6)


def test_stats_example_2():
    s = stats(parse_contraction(EX2))
    assert (s.sigma, s.sigma2, s.p, s.u, s.mu, s.weight) == (2, 1, 1, 1, 1, -5)


def test_saturate_removes_free_indices():
    c = saturate(parse_contraction(EX2))
    assert c.rank == 0
    assert c.factors[-1] == Factor("up")


def test_stanzas_with_headers_and_equations():
    text = "# comment\n@one k=v\ncontr(CR[m=0]; ; f1.i, f1.j, f1.k, f1.l)\n=\n0\n\n" + EX1 + "\n"
    sts = parse_stanzas(text)
    assert [s.name for s in sts] == ["one", None]
    assert sts[0].meta == {"k": "v"}
    assert sts[0].rhs is not None and not sts[0].rhs.terms
    assert parse_stanzas(format_stanza(sts[0]))[0].meta == {"k": "v"}


def test_linear_combination_normalizes():
    c = parse_contraction(EX1)
    lc = LinComb.of(c, 2) + LinComb.of(c, -2)
    assert lc.is_zero()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_canonical_form_ignores_factor_order(seed):
    rng = random.Random(seed)
    c = random_field(rng)
    assert canonicalize(permuted(rng, c)) == canonicalize(c)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_canonicalize_idempotent_and_printable(seed):
    c = canonicalize(random_field(random.Random(seed)))
    assert canonicalize(c) == c
    assert parse_contraction(str(c)) == c
    assert validate_acceptable(c).ok


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_weight_counts_slots(seed):
    c = random_field(random.Random(seed))
    s = stats(c)
    slots = sum(len(f.slots) for f in c.factors)
    assert s.weight == 2 * (s.sigma1 + s.sigma2) - slots
