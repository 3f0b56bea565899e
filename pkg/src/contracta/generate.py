"""Random acceptable contractions for property checks and suites."""

from __future__ import annotations

import random
from dataclasses import dataclass

from .expr import Contraction, Factor, IndexRef, Phi, canonicalize


@dataclass(frozen=True)
class Skeleton:
    """Real factors plus the slots holding gradient factors.

    Every field realized from one skeleton has the same simple character.
    """

    factors: tuple[Factor, ...]
    grads: tuple[tuple[str, int, IndexRef], ...]


def random_skeleton(
    rng: random.Random,
    max_sigma: int = 4,
    max_depth: int = 2,
    sstar: bool = True,
    min_sigma: int = 1,
    phi_rate: float = 0.3,
) -> Skeleton:
    """Random real factors with phi, primed phi and tilde phi placements.

    ``max_depth`` bounds the derivative count of curvature factors and the
    excess of Omega factors over two.
    """
    sigma = rng.randint(min_sigma, max_sigma)
    kinds = [rng.choice(("CR", "SR", "Om") if sstar else ("CR", "Om")) for _ in range(sigma)]
    factors = []
    for n, k in enumerate(kinds):
        if k == "Om":
            factors.append(Factor("Om", 2 + rng.randint(0, max(0, max_depth - 1)), n + 1))
        else:
            factors.append(Factor(k, rng.randint(0, max_depth)))
    grads = []
    for p, f in enumerate(factors):
        for s in f.slots:
            ref = IndexRef(p, s)
            if f.kind == "SR" and s == "i":
                grads.append(("~", ref))
            elif f.kind == "SR" and f.slot_class(s) == "r" and rng.random() < phi_rate:
                grads.append(("'", ref))
            elif f.kind != "SR" and s in f.derivative_slots() and rng.random() < phi_rate:
                grads.append(("", ref))
    labels = list(range(1, len(grads) + 1))
    rng.shuffle(labels)
    return Skeleton(tuple(factors), tuple((fl, lab, ref) for (fl, ref), lab in zip(grads, labels)))


def _free_allowed(factors, free: list[IndexRef], ref: IndexRef) -> bool:
    if not factors[ref.pos].is_curvature:
        return True
    mine = {r.slot for r in free if r.pos == ref.pos}
    for a, b in (("i", "j"), ("k", "l")):
        if (ref.slot == a and b in mine) or (ref.slot == b and a in mine):
            return False
    return True


def realize(rng: random.Random, sk: Skeleton, max_free: int = 3, free_rate: float = 0.3,
            antisym_free: bool = False, tries: int = 50) -> Contraction:
    """Pair or free the slots left open by the skeleton."""
    taken = {ref for _, _, ref in sk.grads}
    open_slots = [IndexRef(p, s) for p, f in enumerate(sk.factors) for s in f.slots
                  if IndexRef(p, s) not in taken]
    for _ in range(tries):
        slots = list(open_slots)
        rng.shuffle(slots)
        free: list[IndexRef] = []
        rest: list[IndexRef] = []
        for ref in slots:
            if len(free) < max_free and rng.random() < free_rate and (
                antisym_free or _free_allowed(sk.factors, free, ref)
            ):
                free.append(ref)
            else:
                rest.append(ref)
        pairs = []
        ok = True
        while rest:
            a = rest.pop()
            mate = next((b for b in rest if b.pos != a.pos), None)
            if mate is not None:
                rest.remove(mate)
                pairs.append((a, mate))
            elif antisym_free or _free_allowed(sk.factors, free, a):
                free.append(a)
            else:
                ok = False
                break
        if not ok:
            continue
        factors = list(sk.factors)
        for flavor, label, ref in sk.grads:
            pairs.append((ref, IndexRef(len(factors), "a")))
            factors.append(Phi(label, flavor))
        return Contraction(tuple(factors), frozenset(pairs), tuple(free))
    raise ValueError("could not realize the skeleton")


def random_field(rng: random.Random, max_sigma: int = 4, max_depth: int = 2,
                 sstar: bool = True, max_free: int = 3, antisym_free: bool = False,
                 min_sigma: int = 1) -> Contraction:
    """A random contraction acceptable in the second form."""
    while True:
        sk = random_skeleton(rng, max_sigma, max_depth, sstar, min_sigma)
        try:
            return realize(rng, sk, max_free, antisym_free=antisym_free)
        except ValueError:
            continue


def permuted(rng: random.Random, c: Contraction) -> Contraction:
    """The same contraction with its factor list shuffled."""
    order = list(range(len(c.factors)))
    rng.shuffle(order)
    where = {old: new for new, old in enumerate(order)}
    factors = tuple(c.factors[o] for o in order)
    pairs = frozenset(
        (IndexRef(where[a.pos], a.slot), IndexRef(where[b.pos], b.slot)) for a, b in c.pairs
    )
    free = tuple(IndexRef(where[r.pos], r.slot) for r in c.free)
    return Contraction(factors, pairs, free)


def random_canonical(rng: random.Random, **kw) -> Contraction:
    return canonicalize(random_field(rng, **kw))
