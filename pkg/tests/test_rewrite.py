import random
import warnings

import pytest
from hypothesis import given, settings, strategies as st

from contracta.characters import compute_character, is_simply_subsequent
from contracta.expr import Factor, IndexRef, LinComb, canonicalize, parse_contraction, stats, validate_acceptable
from contracta.generate import random_field
from contracta.rewrite import (
    INVERSES,
    RULES,
    ExclusionPolicy,
    RewriteError,
    RewriteRule,
    RewriteWarning,
    apply_rule,
    apply_substitution,
    bianchi_correction,
    erase_factor,
    migrate_free_index,
    riemann_reduce,
    sstar_decompose,
    symmetrize_free,
    xdiv_expand,
)
from contracta.suites import _curvature_site, random_site, roundtrip_equal

SIGMA3 = "contr(CR[m=0], Om[h=1,b=2], Om[h=2,b=3]; f1.i-f2.d1, f1.j-f3.d1, f1.k-f3.d2, f1.l-f2.d2; f3.d3)"


def test_xdiv_plain_has_sigma_minus_one_terms():
    c = parse_contraction("contr(Om[h=1,b=3], CR[m=0], Om[h=2,b=2]; f1.d1-f2.i, f1.d2-f3.d1, f2.j-f3.d2; f1.d3, f2.k, f2.l)")
    assert len(xdiv_expand(c, c.free[0])) == 2


def test_xdiv_exclusion_drops_a_term():
    c = parse_contraction("contr(Om[h=1,b=3], CR[m=0], Om[h=2,b=2]; f1.d1-f2.i, f1.d2-f3.d1, f2.j-f3.d2; f1.d3, f2.k, f2.l)")
    out = xdiv_expand(c, c.free[0], ExclusionPolicy(forbid_factors={1}))
    assert len(out) == 1
    ((_, t),) = out.terms
    assert Factor("Om", 3, 2) in t.factors


def test_xdiv_new_slot_pairs_with_erased_index():
    c = parse_contraction(SIGMA3)
    ((_, t),) = xdiv_expand(c, c.free[0], ExclusionPolicy(forbid_factors={1})).terms
    assert t.rank == 0
    assert t.factors[0] == Factor("CR", 1)


def test_xdiv_empty_policy_warns():
    c = parse_contraction(SIGMA3)
    with pytest.warns(RewriteWarning):
        out = xdiv_expand(c, c.free[0], ExclusionPolicy(forbid_factors={0, 1}))
    assert len(out) == 0


def test_xdiv_unknown_free_index():
    c = parse_contraction(SIGMA3)
    with pytest.raises(RewriteError):
        xdiv_expand(c, IndexRef(0, "i"))


def test_xdiv_force_factor():
    c = parse_contraction(SIGMA3)
    out = xdiv_expand(c, c.free[0], ExclusionPolicy(force_factor=1))
    assert len(out) == 1


def test_sstar_m0_has_no_correction():
    c = _curvature_site(0)
    out = sstar_decompose(c)
    assert len(out) == 1
    ((q, t),) = out.terms
    assert q == 1
    assert [f.kind for f in t.factors][:2] == ["SR", "ph~"]


def test_sstar_m1_head_is_acceptable_and_corrections_subsequent():
    c = parse_contraction("contr(CR[m=1], ph[1], Om[h=1,b=2], Om[h=2,b=2]; f1.i-f2.a, f1.r1-f3.d1, "
                          "f1.j-f4.d1, f1.k-f3.d2, f1.l-f4.d2; )")
    out = sstar_decompose(c)
    heads = [t for _, t in out.terms if any(f.kind == "SR" for f in t.factors)]
    assert len(heads) == 1
    assert validate_acceptable(heads[0], "form2").ok
    kappa = compute_character(heads[0], "simple")
    for _, t in out.terms:
        if t is heads[0]:
            continue
        phi = next(p for p, f in enumerate(t.factors) if f.kind == "ph")
        q = t.partner(IndexRef(phi, "a"))
        assert q.slot in t.factors[q.pos].derivative_slots()
        assert is_simply_subsequent(t, kappa)


def test_koichi1_correction_moves_k_partner_to_j():
    site = _curvature_site(1)
    idt = bianchi_correction(site, "koichi1")
    ((q, corr),) = idt.rhs.terms
    assert q == 1
    assert corr.partner(IndexRef(0, "j")) == site.partner(IndexRef(0, "k"))
    assert corr.partner(IndexRef(0, "k")) == site.partner(IndexRef(0, "j"))
    assert len(idt.lhs) == 2


def test_koichi3_needs_a_derivative():
    with pytest.raises(RewriteError):
        bianchi_correction(_curvature_site(0), "koichi3")


def test_erase_phi_saturated_omega():
    c = parse_contraction("contr(CR[m=0], Om[h=1,b=2], ph[1], ph[2], Om[h=2,b=2]; f2.d1-f3.a, f2.d2-f4.a, "
                          "f1.i-f5.d1, f1.j-f5.d2; f1.k, f1.l)")
    d = erase_factor(c, 1)
    assert stats(d).sigma == stats(c).sigma - 1
    assert stats(d).u == stats(c).u - 2


def test_erase_phi_on_derivative_slot():
    c = parse_contraction("contr(CR[m=2], ph[1]; f1.r1-f2.a; f1.r2, f1.i, f1.j, f1.k, f1.l)")
    d = erase_factor(c, 1)
    assert d.factors == (Factor("CR", 1),)


def test_erase_rejects_orphaning_site():
    c = parse_contraction(SIGMA3)
    with pytest.raises(RewriteError):
        erase_factor(c, 1)


def test_migrate_free_index_to_omega():
    c = parse_contraction("contr(CR[m=2], Om[h=1,b=2], ph[1], ph[2]; f1.i-f3.a, f1.j-f2.d1, f1.k-f2.d2, "
                          "f1.l-f4.a; f1.r1, f1.r2)")
    d = migrate_free_index(c, 0, 1)
    assert Factor("CR", 1) in d.factors and Factor("Om", 3, 1) in d.factors
    assert d.rank == 2
    assert d.factors[d.free[-1].pos] == Factor("Om", 3, 1)
    assert stats(d).weight == stats(c).weight


def test_migrate_onto_same_factor_rejected():
    c = parse_contraction("contr(CR[m=2], Om[h=1,b=2], ph[1], ph[2]; f1.i-f3.a, f1.j-f2.d1, f1.k-f2.d2, "
                          "f1.l-f4.a; f1.r1, f1.r2)")
    with pytest.raises(RewriteError):
        migrate_free_index(c, 0, 0)


def test_migrate_special_index_rejected():
    c = parse_contraction(SIGMA3.replace("f1.l-f2.d2; f3.d3", "f2.d2-f3.d3; f1.l"))
    with pytest.raises(RewriteError):
        migrate_free_index(c, 0, 1)


def test_symmetrize_mu_one_is_identity():
    lc = LinComb.of(parse_contraction(SIGMA3))
    assert symmetrize_free(lc, 1) == lc.normalized()


def test_symmetrize_fixed_point():
    c = parse_contraction("contr(CR[m=0], Om[h=1,b=3]; f1.i-f2.d1, f1.j-f2.d2, f1.k-f2.d3; f1.l)")
    d = parse_contraction("contr(Om[h=1,b=2], Om[h=2,b=2]; f1.d1-f2.d1; f1.d2, f2.d2)")
    sym = LinComb.of(d) + LinComb(((1, parse_contraction("contr(Om[h=1,b=2], Om[h=2,b=2]; f1.d1-f2.d1; f2.d2, f1.d2)")),))
    assert symmetrize_free(sym, 2) == sym.normalized()
    assert symmetrize_free(LinComb.of(c), 1) == LinComb.of(c).normalized()


def test_to_y_on_underived_site():
    c = parse_contraction("contr(SR[v=0], ph~[1], ph[2], Om[h=1,b=2]; f1.i-f2.a, f1.k-f3.a, "
                          "f1.j-f4.d1, f1.l-f4.d2; )")
    out = apply_rule(c, RewriteRule("TO_Y"))
    ((q, t),) = out.result.terms
    assert Factor("Y", 2) in t.factors
    assert stats(t).weight == stats(c).weight + 2
    assert out.descriptor["tilde"] == 1 and out.descriptor["k_label"] == 2


def test_op_star_coefficient():
    two = parse_contraction("contr(Om[h=1,b=2], Om[h=2,b=1], Om[h=3,b=3]; f1.d1-f3.d1, f1.d2-f3.d2, "
                            "f2.d1-f3.d3; )")
    out = apply_rule(two, RewriteRule("OP_STAR", (0, 1))).result
    ((q, t),) = out.terms
    assert q == 1
    one = parse_contraction("contr(Om[h=1,b=1], Om[h=2,b=1], Om[h=3,b=2]; f1.d1-f3.d1, f2.d1-f3.d2; )")
    assert len(apply_rule(one, RewriteRule("OP_STAR", (0, 1))).result) == 0


def test_inapplicable_site_is_an_error():
    c = parse_contraction(SIGMA3)
    for rule_id in ("TO_Y", "FROM_Y", "CUT_SYM", "CUT_Y", "OMEGA_TRIPLE"):
        with pytest.raises(RewriteError):
            apply_substitution(c, RewriteRule(rule_id))


def test_unknown_rule():
    with pytest.raises(RewriteError):
        apply_rule(parse_contraction(SIGMA3), RewriteRule("NOPE"))


def test_repl_omega_round_trip():
    c = parse_contraction("contr(SR[v=2], ph~[1], ph'[2], up, Om[h=1,b=2]; f1.i-f2.a, f1.r1-f3.a, "
                          "f1.r2-f4.a, f1.j-f5.d1, f1.k-f5.d2; f1.l)")
    fwd = apply_rule(c, RewriteRule("REPL_OMEGA"))
    ((q, t),) = fwd.result.terms
    assert any(f.kind == "OmA" for f in t.factors)
    back = apply_rule(canonicalize(t), RewriteRule("OMEGA_READ", (), {"descriptor": fwd.descriptor}))
    assert back.result.scale(q).normalized() == LinComb.of(c).normalized()


def test_every_forward_rule_has_a_registered_inverse():
    for fwd, inv in INVERSES.items():
        assert fwd in RULES and inv in RULES


def test_riemann_reduce_keeps_value_shape():
    c = _curvature_site(0)
    out = riemann_reduce(LinComb.of(c))
    assert all(t.factors[0].kind == "CR" for _, t in out.terms)


@pytest.mark.parametrize("rule_id", ["TO_Y", "CUT_SYM", "CUT_Y", "OMEGA_TRIPLE"])
@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_inverse_after_forward_is_identity(rule_id, seed):
    assert roundtrip_equal(random_site(random.Random(seed), rule_id), rule_id)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_xdiv_counts_targets_and_spares_gradients(seed):
    rng = random.Random(seed)
    c = random_field(rng, min_sigma=2)
    if not c.free:
        return
    free = rng.choice(c.free)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RewriteWarning)
        out = xdiv_expand(c, free)
    assert len(out) == stats(c).sigma - 1
    grads = sorted(f for f in c.factors if f.is_gradient)
    for _, t in out.terms:
        assert sorted(f for f in t.factors if f.is_gradient) == grads
        assert stats(t).weight == stats(c).weight - 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_to_y_raises_weight_by_two(seed):
    c = random_site(random.Random(seed), "TO_Y")
    ((_, t),) = apply_rule(c, RewriteRule("TO_Y")).result.terms
    assert stats(t).weight == stats(c).weight + 2
