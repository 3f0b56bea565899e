"""Command line front end: ``contracta <verb> [options]``."""

from __future__ import annotations

import json
import os
import sys
import warnings
from pathlib import Path

import click

from . import characters as ch
from .expr import (
    ExprError,
    Stanza,
    canonicalize,
    format_lincomb,
    format_stanza,
    parse_stanzas,
)
from .oracle import OracleError, check_identity
from .rewrite import ExclusionPolicy, RewriteError, RewriteRule, RewriteWarning, apply_rule, xdiv_expand
from .suites import SUITES, run_suite

SCHEMA = 1


def _config(path: str | None) -> dict:
    """Defaults from a ``key = value`` file; later flags override them."""
    out = {}
    if path is None:
        return out
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise click.UsageError(f"{path}:{n}: expected key = value")
        out[key.strip()] = value.strip().strip('"')
    return out


class Ctx:
    def __init__(self, as_json: bool, out: str | None, config: dict):
        self.as_json = as_json
        self.out = out
        self.config = config
        self.lines: list[str] = []
        self.records: list[dict] = []

    def emit(self, line: str, record: dict | None = None):
        self.lines.append(line)
        if record is not None:
            self.records.append(record)

    def flush(self, command: str, ok: bool):
        if self.as_json:
            text = json.dumps({"schema": SCHEMA, "command": command, "ok": ok,
                               "results": self.records}, indent=2, sort_keys=True)
        else:
            text = "\n".join(self.lines)
        if self.out:
            Path(self.out).write_text(text + "\n")
        else:
            click.echo(text)


def _read(path: str) -> list[Stanza]:
    text = sys.stdin.read() if path == "-" else Path(path).read_text(encoding="utf-8")
    return parse_stanzas(text)


def _setting(ctx: Ctx, value, key: str, default):
    if value is not None:
        return value
    if key == "seed" and os.environ.get("CONTRACTA_SEED"):
        return int(os.environ["CONTRACTA_SEED"])
    return ctx.config.get(key, default)


def _site(text: str | None) -> tuple[int, ...]:
    if not text:
        return ()
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part.startswith("f") or not part[1:].isdigit() or int(part[1:]) < 1:
            raise click.BadParameter(f"site {part!r} must look like f1", param_hint="--site")
        out.append(int(part[1:]) - 1)
    return tuple(out)


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _terms(st: Stanza):
    return [c for _, c in st.lhs.terms]


def _label(st: Stanza, n: int) -> str:
    return st.name or f"stanza{n + 1}"


def run(verb, fn):
    """Run a verb body and translate outcomes into exit codes."""
    obj = click.get_current_context().obj
    try:
        ok = fn(obj)
    except (ExprError, RewriteError, ch.CharacterError, OracleError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    obj.flush(verb, ok)
    sys.exit(0 if ok else 1)


@click.group()
@click.option("--json", "as_json", is_flag=True, help="Write a JSON report.")
@click.option("--out", type=click.Path(dir_okay=False), help="Write the report to a file.")
@click.option("--config", type=click.Path(exists=True, dir_okay=False),
              help="key = value file with default dims, trials and seed.")
@click.pass_context
def main(context, as_json, out, config):
    """Partial contractions: characters, rewrites and exact identity checks."""
    context.obj = Ctx(as_json, out, _config(config))


@main.command()
@click.option("--input", "path", required=True, help="Stanza file, or - for stdin.")
def normalize(path):
    """Print every stanza in canonical form."""
    def body(obj):
        for st in _read(path):
            norm = Stanza(st.name, st.lhs.normalized(),
                          st.rhs.normalized() if st.rhs is not None else None, st.line, st.meta)
            obj.emit(format_stanza(norm) + "\n", {"name": st.name, "lhs": format_lincomb(norm.lhs),
                                                  "rhs": format_lincomb(norm.rhs) if norm.rhs else None})
        if obj.lines:
            obj.lines[-1] = obj.lines[-1].rstrip("\n")
        return True
    run("normalize", body)


@main.command()
@click.option("--input", "path", required=True)
@click.option("--level", type=click.Choice(ch.LEVELS), default="refined", show_default=True)
@click.option("--alpha", type=int, default=None, help="Count only the first alpha free indices.")
def character(path, level, alpha):
    """Character of every term."""
    def body(obj):
        for n, st in enumerate(_read(path)):
            for t, c in enumerate(_terms(st)):
                k = ch.compute_character(c, level, alpha)
                data = k.to_json()
                obj.emit(f"{_label(st, n)}[{t + 1}] {json.dumps(data, sort_keys=True)}",
                         {"name": _label(st, n), "term": t + 1, "character": data})
        return True
    run("character", body)


@main.command()
@click.option("--input", "path", required=True)
def compare(path):
    """Compare the refined characters of the two terms of each stanza.

    The two terms are the left and right sides of an equation stanza, or
    the first two terms of a plain stanza.
    """
    def body(obj):
        for n, st in enumerate(_read(path)):
            terms = _terms(st) + ([c for _, c in st.rhs.terms] if st.rhs is not None else [])
            if len(terms) < 2:
                raise ch.CharacterError(f"{_label(st, n)} needs two terms to compare")
            k1, k2 = (ch.compute_character(c, "refined") for c in terms[:2])
            order = ch.compare_refined(k1, k2)
            obj.emit(f"{_label(st, n)}: {order.value}",
                     {"name": _label(st, n), "order": order.value,
                      "first": k1.to_json(), "second": k2.to_json()})
        return True
    run("compare", body)


@main.command()
@click.option("--input", "path", required=True)
@click.option("--x", "omega", type=int, default=None, help="Omega label for the L* flag.")
def classify(path, omega):
    """Case analysis of each stanza read as an equation context."""
    def body(obj):
        for n, st in enumerate(_read(path)):
            ctx = ch.EquationContext.build(st.lhs)
            rep = ch.classify_case(ctx)
            flags = [ch.special_set_flags(c, ctx, omega) for _, c in st.lhs.terms]
            record = {"name": _label(st, n), **rep.to_json(),
                      "flags": [vars(f) for f in flags]}
            obj.emit(f"{_label(st, n)}: {rep.summary()}", record)
        return True
    run("classify", body)


@main.command()
@click.option("--input", "path", required=True)
@click.option("--free", "which", type=int, default=1, show_default=True,
              help="1-based position in the free list.")
@click.option("--forbid", default="", help="Factors the derivative may not hit, e.g. f2,f3.")
@click.option("--force", default=None, help="The only factor the derivative may hit.")
@click.option("--full", is_flag=True, help="Allow the owner factor (its term is omitted).")
def xdiv(path, which, forbid, force, full):
    """Divergence expansion in one free index of each term."""
    def body(obj):
        forced = _site(force)
        policy = ExclusionPolicy(forbid_owner=not full, forbid_factors=frozenset(_site(forbid)),
                                 force_factor=forced[0] if forced else None)
        for n, st in enumerate(_read(path)):
            for t, c in enumerate(_terms(st)):
                if not 1 <= which <= c.rank:
                    raise ch.CharacterError(f"{_label(st, n)} has no free index {which}")
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always", RewriteWarning)
                    lc = xdiv_expand(c, c.free[which - 1], policy)
                for w in caught:
                    click.echo(f"warning: {w.message}", err=True)
                obj.emit(f"@{_label(st, n)}\n{format_lincomb(lc)}\n",
                         {"name": _label(st, n), "term": t + 1, "terms": len(lc),
                          "result": format_lincomb(lc)})
        return True
    run("xdiv", body)


@main.command()
@click.option("--input", "path", required=True)
@click.option("--rule", "rule_id", required=True)
@click.option("--site", default=None, help="Factor positions, e.g. f1 or f1,f2.")
@click.option("--option", "options", multiple=True, help="Rule option key=value (JSON values).")
@click.option("--raw", is_flag=True, help="Print the result without canonicalizing it.")
def apply(path, rule_id, site, options, raw):
    """Apply a catalog rule to the single term of each stanza.

    The input term is canonicalized first so that sites refer to canonical
    positions.  A descriptor produced by the rule is stored in the output
    stanza header, and a descriptor found there is passed to the rule.
    """
    def body(obj):
        opts = {}
        for kv in options:
            k, sep, v = kv.partition("=")
            if not sep:
                raise click.BadParameter(f"option {kv!r} must be key=value", param_hint="--option")
            opts[k] = _value(v)
        for n, st in enumerate(_read(path)):
            terms = st.lhs.terms
            if len(terms) != 1:
                raise RewriteError(f"{_label(st, n)} must hold exactly one term")
            q, c = terms[0]
            meta = dict(st.meta)
            rule_opts = dict(opts)
            if "descriptor" in meta and "descriptor" not in rule_opts:
                rule_opts["descriptor"] = json.loads(meta.pop("descriptor"))
            applied = apply_rule(canonicalize(c), RewriteRule(rule_id, _site(site), rule_opts))
            result = applied.result.scale(q)
            if not raw:
                result = result.normalized()
            if applied.descriptor:
                meta["descriptor"] = json.dumps(applied.descriptor, separators=(",", ":"),
                                                sort_keys=True)
            out = Stanza(st.name, result, None, st.line, meta)
            obj.emit(format_stanza(out) + "\n",
                     {"name": _label(st, n), "result": format_lincomb(result),
                      "descriptor": applied.descriptor})
        if obj.lines:
            obj.lines[-1] = obj.lines[-1].rstrip("\n")
        return True
    run("apply", body)


@main.command()
@click.option("--input", "path", required=True)
@click.option("--dims", default=None, help='Dimension, or "auto" for the largest index count.')
@click.option("--trials", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--linear", is_flag=True, help="Keep first-order metric terms at the origin.")
def verify(path, dims, trials, seed, linear):
    """Exact randomized check of every ``lhs = rhs`` stanza."""
    def body(obj):
        d = _setting(obj, dims, "dims", "auto")
        d = d if d == "auto" else int(d)
        tr = int(_setting(obj, trials, "trials", 8))
        sd = int(_setting(obj, seed, "seed", 0))
        all_ok = True
        for n, st in enumerate(_read(path)):
            if st.rhs is None:
                raise ExprError(f"{_label(st, n)} is not an equation", st.line)
            v = check_identity(st.lhs, st.rhs, trials=tr, dims=d, seed=sd, linear=linear)
            all_ok = all_ok and v.ok
            obj.emit(f"{'PASS' if v.ok else 'FAIL'} {_label(st, n)} dims={v.dims}"
                     + ("" if v.ok else f" witness={v.witness}"),
                     {"name": _label(st, n), **v.to_json()})
        return all_ok
    run("verify", body)


@main.command()
@click.argument("name", type=click.Choice([*SUITES, "all"]))
def suite(name):
    """Run a built-in group of acceptance checks."""
    def body(obj):
        checks = run_suite(name)
        for c in checks:
            obj.emit(c.line(), c.to_json())
        passed = sum(c.ok for c in checks)
        obj.emit(f"{passed}/{len(checks)} checks passed")
        return passed == len(checks)
    run("suite", body)


if __name__ == "__main__":
    main()
