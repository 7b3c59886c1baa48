import importlib.util
import json
import logging
from pathlib import Path

import pytest

from modules.Scenario import EXIT_CONFIG, EXIT_OK, load_preset

SCRIPT = Path(__file__).resolve().parent.parent / "wannier-stark.py"


@pytest.fixture(scope="module")
def cli():
    spec = importlib.util.spec_from_file_location("wannier_stark", SCRIPT)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def test_presets_command(cli, caplog):
    with caplog.at_level(logging.INFO):
        assert cli.main(["presets"]) == EXIT_OK
    assert "fig3-inphase:" in caplog.text


def test_no_command_prints_usage(cli):
    assert cli.main([]) == EXIT_OK


def test_scenario_source_is_required(cli):
    assert cli.main(["run"]) == EXIT_CONFIG
    assert cli.main(["run", "--preset", "fig3", "--config", "x.ini"]) == EXIT_CONFIG


def test_bad_config_exits_with_config_status(cli, tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[lattice]\nv0 = 2.5\nf = 0.5\nflavour = strange\n")
    assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path / "out")]) == EXIT_CONFIG
    assert cli.main(["run", "--config", str(tmp_path / "missing.ini")]) == EXIT_CONFIG
    assert cli.main(["run", "--preset", "fig9"]) == EXIT_CONFIG


def test_progress_lines(cli, capsys):
    cli._progress_set_total(4)
    cli._progress_step()
    cli._progress_step(3)
    lines = [line for line in capsys.readouterr().out.splitlines() if line.startswith("PROGRESS")]
    assert lines[0] == "PROGRESS 0.0000 0 4"
    assert lines[-1] == "PROGRESS 100.0000 4 4"


def test_sweep_cache(cli, tmp_path):
    config = load_preset("fig1-basis")
    cache_file = tmp_path / "sweep-cache.json"
    cli.load_sweep_cache(cache_file)
    assert not cli.should_skip_scenario("a", config, tmp_path / "a")
    (tmp_path / "a").mkdir()
    (tmp_path / "a" / "summary.json").write_text("{}")
    cli.mark_scenario_done("a", config, EXIT_OK, cache_file)
    assert cli.should_skip_scenario("a", config, tmp_path / "a")
    cli.save_sweep_cache(cache_file, force=True)
    assert json.loads(cache_file.read_text())["a"]["status"] == EXIT_OK
    cli.load_sweep_cache(cache_file, force=True)
    assert not cli.should_skip_scenario("a", config, tmp_path / "a")


def test_basis_command(cli, tmp_path):
    out = tmp_path / "basis"
    assert cli.main(["basis", "--preset", "fig1", "--out", str(out), "--check"]) == EXIT_OK
    assert (out / "couplings.json").exists()
    assert (out / "run.log").read_text().count("Couplings:") == 1


def test_sweep_reuses_finished_scenarios(cli, tmp_path, caplog):
    out = tmp_path / "sweep"
    args = ["sweep", "--preset", "fig1", "--vary", "packet.width=2,3", "--out", str(out)]
    assert cli.main(args) == EXIT_OK
    merged = json.loads((out / "sweep.json").read_text())
    assert sorted(merged) == ["width=2", "width=3"]
    assert all(entry["status"] == EXIT_OK for entry in merged.values())
    with caplog.at_level(logging.WARNING):
        assert cli.main(args) == EXIT_OK
    assert "Skipping 2 scenarios" in caplog.text
