import json
import os
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from stability_lab import cli
from stability_lab.lyapunov import read_pgm
from stability_lab.schemas import CONFIG, OUTPUT

CONFIGS = os.path.join(os.path.dirname(__file__), "..", "configs")


def _write(tmp_path, name, cfg):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def _tree_bytes(d):
    out = {}
    for name in sorted(os.listdir(d)):
        with open(os.path.join(d, name), "rb") as fh:
            out[name] = fh.read()
    return out


def test_schema_error_exits_2_with_json(tmp_path, capsys):
    cfg = _write(tmp_path, "bad.json", {"family": {"builtin": "quadratic"}, "rect": [0, 1]})
    code = cli.main(["lyap", "--config", cfg, "--out", str(tmp_path / "o")])
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "config" and "message" in err


def test_unreadable_config_exits_2(tmp_path, capsys):
    code = cli.main(["lyap", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)])
    assert code == 2


@pytest.mark.parametrize("command", ["web", "misiu"])
def test_seed_required(command, tmp_path):
    with open(os.path.join(CONFIGS, f"{command}_quadratic.json")) as fh:
        cfg = json.load(fh)
    del cfg["seed"]
    with pytest.raises(cli.ConfigError):
        cli.validate_config(command, cfg)


@pytest.mark.parametrize("name", sorted(os.listdir(CONFIGS)))
def test_shipped_configs_validate(name):
    with open(os.path.join(CONFIGS, name)) as fh:
        cfg = json.load(fh)
    cli.validate_config(name.split("_")[0], cfg)


def test_schemas_published(tmp_path):
    assert cli.main(["schemas", "--out", str(tmp_path)]) == 0
    for kind, table in (("config", CONFIG), ("output", OUTPUT)):
        for name, schema in table.items():
            with open(tmp_path / kind / f"{name}.json") as fh:
                assert json.load(fh) == schema
            jsonschema.Draft202012Validator.check_schema(schema)


def test_lyap_power_family(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["lyap", "--config", os.path.join(CONFIGS, "lyap_power.json"),
                     "--out", str(out)]) == 0
    obj = json.loads((out / "lyap.json").read_text())
    jsonschema.validate(obj, OUTPUT["lyap"])
    assert abs(obj["L_min"] - np.log(2)) < 1e-12 and abs(obj["L_max"] - np.log(2)) < 1e-12
    assert abs(obj["total_mass"]) < 1e-9
    L = read_pgm(str(out / "L.pgm"))
    assert L.shape == (64, 64)


def test_threads_env(monkeypatch):
    monkeypatch.setenv("STABILITY_LAB_THREADS", "3")
    assert cli.resolve_threads(None) == 3
    assert cli.resolve_threads(2) == 2
    monkeypatch.setenv("STABILITY_LAB_THREADS", "many")
    with pytest.raises(cli.ConfigError):
        cli.resolve_threads(None)
    monkeypatch.delenv("STABILITY_LAB_THREADS")
    assert cli.resolve_threads(None) == 1


def test_meta_records_config_hash(tmp_path):
    cfg = {"family": {"builtin": "power", "d": 3}, "rect": [-1, 1, -1, 1], "resolution": 8}
    obj = cli.run("lyap", cfg, str(tmp_path))
    assert obj["meta"]["config_sha256"] == cli.config_hash(cfg)
    assert abs(obj["L_max"] - np.log(3)) < 1e-12


def test_console_script_entry(tmp_path):
    cfg = _write(tmp_path, "c.json", {"family": {"builtin": "power"}, "rect": [-1, 1, -1, 1],
                                      "resolution": 4})
    res = subprocess.run([sys.executable, "-m", "stability_lab.cli", "lyap", "--config", cfg,
                          "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "o" / "lyap.json").exists()


def test_misiu_small_run(tmp_path):
    cfg = {"family": {"builtin": "quadratic"}, "rect": [-2.02, -1.98, -0.02, 0.02],
           "q": 2, "p": 1, "n_starts": 2, "seed": 1,
           "raster": {"rect": [-2.5, 1.5, -2, 2], "resolution": 128}}
    a = cli.run("misiu", cfg, str(tmp_path / "a"), threads=1)
    cli.run("misiu", cfg, str(tmp_path / "b"), threads=3)
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")
    assert len(a["hits"]) == 1 and a["hits"][0]["in_bifurcation"]


def test_mass_and_ram_outputs_validate(tmp_path):
    mass = {"family": {"builtin": "power"}, "windows": [{"disc": [0.1, 0.1, 0.1]}],
            "N_max": 6, "n_base": 4}
    obj = cli.run("mass", mass, str(tmp_path / "m"))
    assert obj["fits"][0]["verdict"] == "stable"
    ram = {"family": {"builtin": "quadratic"},
           "windows": [{"disc": [0.0, 0.0, 0.1], "ball": {"center": [0.5, 0.2], "radius": 0.2}}],
           "N_max": 8, "n_base": 8}
    obj = cli.run("ram", ram, str(tmp_path / "r"))
    assert len(obj["series"]) == 1
    assert (tmp_path / "r" / "series.csv").exists()
