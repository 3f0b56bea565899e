import json

import pytest
from click.testing import CliRunner

from contracta.cli import main
from contracta.expr import format_stanza
from contracta.suites import fixture_stanzas, fixture_text


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def fixture_file(tmp_path):
    def write(name, text=None):
        path = tmp_path / name
        path.write_text(fixture_text(name) if text is None else text)
        return str(path)
    return write


def test_classify_prints_case_summaries(runner, fixture_file):
    res = runner.invoke(main, ["classify", "--input", fixture_file("classify.txt")])
    assert res.exit_code == 0
    lines = res.output.strip().splitlines()
    want = {s.name: s.meta["expect"].replace("_", " ").replace(";", ", ")
            for s in fixture_stanzas("classify.txt")}
    assert len(lines) == len(want)
    for line in lines:
        name, _, summary = line.partition(": ")
        assert summary == want[name]


def test_verify_passes_on_correction_identities(runner, fixture_file):
    res = runner.invoke(main, ["verify", "--input", fixture_file("koichi.txt"), "--trials", "3"])
    assert res.exit_code == 0, res.output
    assert all(line.startswith("PASS") for line in res.output.strip().splitlines())


def test_verify_fails_with_exit_code_one(runner, fixture_file):
    st = next(s for s in fixture_stanzas("koichi.txt") if s.name == "koichi1_m1")
    text = format_stanza(st).replace("\n=\n", "\n=\n2 * ", 1)
    res = runner.invoke(main, ["verify", "--input", fixture_file("broken.txt", text), "--trials", "3"])
    assert res.exit_code == 1
    assert res.output.startswith("FAIL")


def test_to_y_then_from_y_is_byte_identical(runner, fixture_file, tmp_path):
    st = next(s for s in fixture_stanzas("sites.txt") if s.name == "to_y_1")
    src = fixture_file("site.txt", format_stanza(st) + "\n")
    norm = runner.invoke(main, ["normalize", "--input", src])
    fwd = runner.invoke(main, ["apply", "--input", src, "--rule", "TO_Y"])
    assert fwd.exit_code == 0, fwd.output
    assert "descriptor=" in fwd.output
    mid = tmp_path / "mid.txt"
    mid.write_text(fwd.output)
    back = runner.invoke(main, ["apply", "--input", str(mid), "--rule", "FROM_Y"])
    assert back.exit_code == 0, back.output
    assert back.output == norm.output


def test_normalize_is_idempotent(runner, fixture_file, tmp_path):
    once = runner.invoke(main, ["normalize", "--input", fixture_file("corpus.txt")])
    assert once.exit_code == 0
    again_path = tmp_path / "again.txt"
    again_path.write_text(once.output)
    twice = runner.invoke(main, ["normalize", "--input", str(again_path)])
    assert twice.output == once.output


def test_malformed_input_exits_two(runner, fixture_file):
    res = runner.invoke(main, ["normalize", "--input", fixture_file("bad.txt", "contr(CR[m=0]; f1.q-f2.a; )\n")])
    assert res.exit_code == 2
    assert "error:" in res.output


def test_unknown_slot_exits_two(runner, fixture_file):
    res = runner.invoke(main, ["character", "--input",
                               fixture_file("bad.txt", "contr(CR[m=0], ph[1]; f1.zz-f2.a; f1.i, f1.j, f1.k, f1.l)\n")])
    assert res.exit_code == 2


def test_json_report_has_schema(runner, fixture_file):
    res = runner.invoke(main, ["--json", "character", "--input", fixture_file("classify.txt"),
                               "--level", "simple"])
    assert res.exit_code == 0, res.output
    data = json.loads(res.output)
    assert data["schema"] == 1 and data["command"] == "character" and data["ok"]
    assert all(r["character"]["level"] == "simple" for r in data["results"])


def test_out_option_writes_file(runner, fixture_file, tmp_path):
    out = tmp_path / "report.json"
    res = runner.invoke(main, ["--json", "--out", str(out), "compare", "--input",
                               fixture_file("pair.txt", fixture_text("examples.txt").split("@scaled_sum")[1]
                                            .split("@zero")[0])])
    assert res.exit_code == 0, res.output
    assert json.loads(out.read_text())["results"][0]["order"] == "Equipolent"


def test_seed_from_environment_and_config(runner, fixture_file, tmp_path):
    src = fixture_file("koichi.txt")
    cfg = tmp_path / "contracta.cfg"
    cfg.write_text("# defaults\ntrials = 2\nseed = 5\n")
    a = runner.invoke(main, ["--json", "--config", str(cfg), "verify", "--input", src])
    b = runner.invoke(main, ["--json", "verify", "--input", src, "--trials", "2"], env={"CONTRACTA_SEED": "5"})
    assert a.exit_code == 0 and b.exit_code == 0
    ra, rb = json.loads(a.output)["results"], json.loads(b.output)["results"]
    assert [r["seeds"] for r in ra] == [r["seeds"] for r in rb]


def test_bad_config_line(runner, fixture_file, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("trials\n")
    res = runner.invoke(main, ["--config", str(cfg), "verify", "--input", fixture_file("koichi.txt")])
    assert res.exit_code == 2


def test_xdiv_command(runner, fixture_file):
    text = "@s\ncontr(Om[h=1,b=3], CR[m=0], Om[h=2,b=2]; f1.d1-f2.i, f1.d2-f3.d1, f2.j-f3.d2; f1.d3, f2.k, f2.l)\n"
    res = runner.invoke(main, ["--json", "xdiv", "--input", fixture_file("x.txt", text), "--forbid", "f2"])
    assert res.exit_code == 0, res.output
    assert json.loads(res.output)["results"][0]["terms"] == 1


def test_suite_roundtrips(runner):
    res = runner.invoke(main, ["suite", "roundtrips"])
    assert res.exit_code == 0, res.output
    assert res.output.strip().splitlines()[-1].endswith("checks passed")
