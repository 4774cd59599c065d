import json
import re

import numpy as np
import pytest

from nlslab import cli_runner as C
from nlslab.errors import ValidationError

SMALL = {"grid": {"L": 20.0, "n_points": 256}, "potential": {"kind": "sech2", "depth": 2.0, "width": 1.0}}


def _write(tmp_path, name, obj):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


@pytest.fixture(scope="module")
def spectrum_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("spectrum")
    return C.run_experiment("spectrum", dict(SMALL), out=str(out))


@pytest.fixture(scope="module")
def stability_cfg():
    return {**SMALL, "evolution": {"dt": 0.002, "t_final": 0.4, "stride": 20},
            "params": {"branch_count": 6, "increments": False}}


# --- configuration --------------------------------------------------------------


def test_defaults_and_override_precedence(tmp_path, monkeypatch):
    cfg = C.resolve_config({**SMALL, "output_dir": "from-config"}, "spectrum")
    assert cfg["output_dir"] == "from-config"
    assert cfg["params"]["gap_eps"] == 1e-3 and cfg["evolution"]["scheme"] == "strang"
    monkeypatch.setenv(C.OUT_ENV, "from-env")
    assert C.resolve_config({**SMALL, "output_dir": "from-config"}, "spectrum")["output_dir"] == "from-env"
    assert C.resolve_config(SMALL, "spectrum", out="from-flag")["output_dir"] == "from-flag"
    assert C.resolve_config(SMALL, "spectrum", seed=7)["randomization"]["seeds"] == [7]


@pytest.mark.parametrize("raw, field", [
    ({"grid": {"n_points": 1000}}, "grid.n_points"),
    ({"grid": {"L": -1.0}}, "grid.L"),
    ({"grid": {"spacing": 0.1}}, "grid"),
    ({"bogus": 1}, "<root>"),
    ({"potential": {"kind": "square"}}, "potential.kind"),
    ({"randomization": {"law": "cauchy"}}, "randomization.law"),
    ({"params": {"nope": 1}}, "params.nope"),
    ({"tolerances": {"nope": 1.0}}, "tolerances.nope"),
    ({"experiment": "evolve"}, "experiment"),
    ({"branch": {"z_min": 0.2, "z_max": 0.1}}, "branch.z_min"),
])
def test_schema_errors_name_the_field(raw, field):
    with pytest.raises(ValidationError) as info:
        C.resolve_config(raw, "spectrum")
    assert f"config field {field}" in str(info.value)


def test_cli_exit_code_for_bad_config(tmp_path, capsys):
    path = _write(tmp_path, "bad.json", {"grid": {"n_points": 1000}})
    assert C.main(["spectrum", "--config", path, "--out", str(tmp_path / "o")]) == C.EXIT_SCHEMA
    assert "grid.n_points" in capsys.readouterr().err
    (tmp_path / "broken.json").write_text("{")
    assert C.main(["spectrum", "--config", str(tmp_path / "broken.json")]) == C.EXIT_SCHEMA


def test_cli_exit_code_for_missing_config(tmp_path):
    assert C.main(["spectrum", "--config", str(tmp_path / "absent.json")]) == C.EXIT_IO


def test_cli_unknown_subcommand():
    assert C.main(["frobnicate"]) == C.EXIT_SCHEMA


# --- artifacts ------------------------------------------------------------------


def test_fmt_round_trips():
    rng = np.random.default_rng(0)
    for x in rng.standard_normal(200) * 10.0 ** rng.integers(-300, 300, 200):
        assert float(C.fmt(x)) == x
    assert C.fmt(0.1) == "0.10000000000000001"
    assert C.fmt(3) == "3" and C.fmt(True) == "true" and C.fmt(np.int64(5)) == "5"


def test_array_sidecar_round_trip(tmp_path):
    w = C.ArtifactWriter(tmp_path)
    a = np.arange(6, dtype=float).reshape(2, 3) + 0.5j
    w.array("a", a)
    w.array("b", np.arange(4, dtype=np.int32))
    side = json.loads((tmp_path / "a.json").read_text())
    assert side == {"dtype": "complex128", "order": "row-major", "shape": [2, 3]}
    assert (tmp_path / "a.json").read_text() == '{"dtype": "complex128", "order": "row-major", "shape": [2, 3]}\n'
    raw = (tmp_path / "a.bin").read_bytes()
    assert raw == a.astype("<c16").tobytes(order="C") and len(raw) == 6 * 16
    assert np.array_equal(C.read_array(tmp_path / "a"), a)
    assert json.loads((tmp_path / "b.json").read_text())["dtype"] == "float64"
    assert np.array_equal(C.read_array(tmp_path / "b"), np.arange(4.0))


def test_csv_has_header_and_17_digits(tmp_path):
    w = C.ArtifactWriter(tmp_path)
    w.csv("s", ("t", "v"), [(0.1, 1 / 3), (2, np.float64(2.0))])
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines == ["t,v", "0.10000000000000001,0.33333333333333331", "2,2"]


def test_dat_is_two_column(tmp_path):
    w = C.ArtifactWriter(tmp_path)
    w.dat("d", [1.0, 2.0], [3.0, 4.0], ("x", "y"))
    lines = (tmp_path / "d.dat").read_text().splitlines()
    assert lines[0].startswith("#") and all(len(l.split()) == 2 for l in lines[1:])


# --- runs -----------------------------------------------------------------------


def test_spectrum_manifest(spectrum_run):
    m = spectrum_run.manifest
    assert spectrum_run.exit_code == C.EXIT_OK and m["status"] == "ok"
    names = {c["name"]: c for c in m["checks"]}
    assert names["gap"]["passed"] and names["simple_ground_state"]["passed"]
    assert names["e0"]["value"] < 0
    assert m["config"]["grid"] == {"L": 20.0, "n_points": 256, "d": 1}
    on_disk = json.loads((spectrum_run.directory / C.MANIFEST).read_text())
    assert on_disk["config"] == m["config"]
    assert {a["file"] for a in m["artifacts"]} >= {"eigenvalues.bin", "eigenvalues.json", "spectrum.csv",
                                                   "potential.dat", "phi0.bin"}
    assert C.read_manifest(spectrum_run.directory)["status"] == "ok"


def test_failing_check_gives_exit_one(tmp_path):
    res = C.run_experiment("spectrum", {**SMALL, "tolerances": {"gram_residual": 0.0}}, out=str(tmp_path))
    assert res.exit_code == C.EXIT_CHECKS and res.manifest["status"] == "failed-checks"


def test_numerical_failure_writes_manifest(tmp_path, monkeypatch):
    from nlslab.errors import NumericalError

    def explode(rc):
        rc.out.csv("partial", ("t",), [(0.0,)])
        raise NumericalError("non-finite field at t=1")

    monkeypatch.setitem(C.RUNNERS, "evolve", explode)
    res = C.run_experiment("evolve", SMALL, out=str(tmp_path))
    assert res.exit_code == C.EXIT_NUMERICAL
    m = C.read_manifest(tmp_path)
    assert m["status"] == "numerical-failure" and "non-finite" in m["error"]
    assert [a["file"] for a in m["artifacts"]] == ["partial.csv"]


def test_stability_seed_runs_are_byte_identical(tmp_path, stability_cfg):
    path = _write(tmp_path, "stab.json", stability_cfg)
    for d in ("a", "b"):
        code = C.main(["stability", "--config", path, "--seed", "7", "--out", str(tmp_path / d)])
        assert code in (C.EXIT_OK, C.EXIT_CHECKS)
    ma, mb = (json.loads((tmp_path / d / C.MANIFEST).read_text()) for d in ("a", "b"))
    assert ma["config"]["randomization"]["seeds"] == [7]
    assert [(a["file"], a["sha256"]) for a in ma["artifacts"]] == [(a["file"], a["sha256"]) for a in mb["artifacts"]]
    assert (tmp_path / "a" / "modulation_seed7.csv").read_bytes() == (tmp_path / "b" / "modulation_seed7.csv").read_bytes()


# --- report ---------------------------------------------------------------------


def test_empty_report(tmp_path, capsys):
    assert C.main(["report", "--out", str(tmp_path)]) == C.EXIT_OK
    s = json.loads(capsys.readouterr().out)
    assert s["runs"] == [] and s["n_checks"] == 0
    assert (tmp_path / "summary.csv").read_text().splitlines() == ["run,experiment,check,passed,value,tolerance"]


def test_report_merges_runs(tmp_path, spectrum_run, stability_cfg):
    stab = C.run_experiment("stability", {**stability_cfg, "randomization": {"seeds": [1, 2]}},
                            out=str(tmp_path / "stab"))
    s = C.report([spectrum_run.directory, stab.directory], out=tmp_path / "rep")
    assert s["n_checks"] == len(spectrum_run.manifest["checks"]) + len(stab.manifest["checks"])
    assert [z["seed"] for z in s["z_plus"]] == [1, 2]
    assert all(isinstance(z["converged"], bool) for z in s["z_plus"])
    rows = (tmp_path / "rep" / "summary.csv").read_text().splitlines()
    assert len(rows) == s["n_checks"] + 1


def test_report_detects_tampering(tmp_path, capsys):
    res = C.run_experiment("spectrum", SMALL, out=str(tmp_path / "r"))
    target = res.directory / "spectrum.csv"
    target.write_text(target.read_text() + "0,0\n")
    with pytest.raises(C.IntegrityError, match=re.escape(str(target))):
        C.read_manifest(res.directory)
    assert C.main(["report", str(res.directory)]) == C.EXIT_IO
    assert "checksum mismatch" in capsys.readouterr().err


def test_report_missing_manifest(tmp_path):
    with pytest.raises(C.IntegrityError, match="missing manifest"):
        C.report([tmp_path])
    (tmp_path / C.MANIFEST).write_text("not json")
    with pytest.raises(C.IntegrityError, match="corrupt manifest"):
        C.report([tmp_path])


def test_report_bilinear_slopes(tmp_path):
    d = tmp_path / "bil"
    w = C.ArtifactWriter(d)
    w.csv("bilinear_table", ("N", "M", "mean_ratio", "max_ratio", "mean_norm"),
          [(4, M, 1.0, 1.0, M**-0.5) for M in (16, 32, 64)])
    rc = C.RunContext({"experiment": "bilinear"}, w)
    C._write_manifest(d, {"experiment": "bilinear"}, rc, 0.0, "ok")
    s = C.report([d])
    assert s["bilinear_slopes"][4] == pytest.approx(-0.5, abs=1e-12)
