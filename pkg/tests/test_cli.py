import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from revman.cli import main

ROUTES = "".join(
    f'\n[[simulate.route]]\nname = "{n}"\ncapacity = 40\n' for n in ("Cote d'Azur", "Perpignan", "Cote basque", "Toulouse")
)
SMALL = f"""
[run]
seed = 5
{ROUTES}
[estimate]
n_boot = 5

[infer]
per_stratum = 30
n_sub = 200
"""


def _config(tmp, text, name="cfg.toml"):
    p = Path(tmp) / name
    p.write_text(text)
    return p


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = _config(tmp, SMALL)
    out = tmp / "out"
    code = main(["all", "--config", str(cfg), "--out", str(out)])
    return code, cfg, out


def test_full_chain(full_run, capsys):
    code, cfg, out = full_run
    assert code == 0
    for rel in ("data/panel.csv", "data/truth.json", "estimates.json", "bounds.csv", "scenarios.csv",
                "ik_curve.csv", "inference.json", "report/table.csv", "report/ik_curve.csv"):
        assert (out / rel).exists(), rel
    rows = list(csv.DictReader(open(out / "report/table.csv")))
    assert len(rows) == 16
    est = json.load(open(out / "estimates.json"))
    assert est["artifact"] == "estimates" and est["format_version"] == 1
    assert est["params"]["epsilon"] > 1
    inf = json.load(open(out / "inference.json"))
    assert [r["id"] for r in inf["results"]] == ["s.5", "f.1"]
    assert all(0 <= r["p_value_upper"] <= 1 for r in inf["results"])


def test_rerun_is_byte_identical(full_run, tmp_path):
    _, cfg, out = full_run
    out2 = tmp_path / "again"
    for stage in ("simulate", "estimate", "bounds"):
        assert main([stage, "--config", str(cfg), "--out", str(out2)]) == 0
    for rel in ("data/panel.csv", "data/covariates.csv", "estimates.json", "bounds.csv"):
        assert (out / rel).read_bytes() == (out2 / rel).read_bytes(), rel


def test_report_with_no_scenarios(full_run, tmp_path, capsys):
    _, _, out = full_run
    cfg = _config(tmp_path, "[counterfactual]\nscenarios = []\n")
    assert main(["report", "--config", str(cfg), "--out", str(out)]) == 0
    assert "(no scenarios)" in capsys.readouterr().out


def test_unknown_command():
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 2


def test_missing_artifact(tmp_path, capsys):
    assert main(["bounds", "--out", str(tmp_path / "empty")]) == 2
    err = capsys.readouterr().err
    assert "missing" in err and "run `revman simulate` first" in err


@pytest.mark.parametrize("text", [
    "[nonsense]\nx = 1\n",
    "[run]\nseed = -3\n",
    "[estimate]\nwhat = 1\n",
    "[simulate]\nepsilon = 0.9\n",
    "[counterfactual]\nscenarios = ['z.1']\n",
    "[[simulate.route]]\nname = 'Atlantis'\n",
    "[run\n",
])
def test_bad_config(tmp_path, text, capsys):
    assert main(["simulate", "--config", str(_config(tmp_path, text)), "--out", str(tmp_path / "o")]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "nope.toml")]) == 2


def test_zero_trains_give_header_only_panel(tmp_path):
    cfg = _config(tmp_path, "[simulate]\ntrain_scale = 0.0\n" + ROUTES)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    lines = (tmp_path / "o/data/panel.csv").read_text().splitlines()
    assert len(lines) == 1 and "train_id" in lines[0]


def test_python_dash_m():
    r = subprocess.run([sys.executable, "-m", "revman", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.startswith("revman ")
