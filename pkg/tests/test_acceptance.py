"""The nine acceptance criteria, one PASS/FAIL line each."""

import pytest

from contracta import suites

CRITERIA = [
    (1, "oracle self-test", lambda: suites.oracle_selftest(trials=8)),
    (2, "exact rewrite identities", lambda: suites.exact_rules(trials=8, heavy=True)),
    (3, "weight scaling", lambda: suites.weight_scaling(count=20)),
    (4, "divergence expansion structure", lambda: suites.xdiv_structure(count=50)),
    (5, "character laws", lambda: suites.character_laws(count=1000, pairs=1000)),
    (6, "forbidden fixtures", suites.forbidden_fixtures),
    (7, "rewrite round trips", lambda: suites.roundtrips(count=20)),
    (8, "gate consistency", lambda: suites.gate_consistency(count=50)),
    (9, "parser round trip", suites.parser_roundtrip),
]


@pytest.mark.parametrize("number,name,run", CRITERIA, ids=[f"c{n}" for n, _, _ in CRITERIA])
def test_criterion(number, name, run, capsys):
    checks = run()
    ok = bool(checks) and all(c.ok for c in checks)
    seconds = sum(c.seconds for c in checks)
    failed = [c.line() for c in checks if not c.ok]
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {name} "
              f"({len(checks)} checks, {seconds:.1f}s)")
    assert ok, "\n".join(failed)
