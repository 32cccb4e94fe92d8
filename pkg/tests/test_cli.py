import csv
from pathlib import Path

import numpy as np
import pytest

from mqem import cli
from mqem.jumps import read_events

CONFIGS = Path(cli.__file__).parent / "configs"

SMALL_HEISENBERG = """
[model]
kind = heisenberg
gamma_R = 0.01
gamma_D = 0.01

[grid]
t_end = 2
dt = 0.01
output_dt = 0.5

[run]
trajectories = 300
seed = 5
steps = 10
"""

TWO_LEVEL = """
[model]
kind = two_level
omega = 1.0
rate_minus = 0.4
rate_z = -0.2
initial = plus

[grid]
t_end = 1
dt = 0.01
output_dt = 0.25

[run]
trajectories = 500
seed = 3
"""

QPROB = """
[qprob]
p = 0.1
samples = 2000
"""


def write(tmp_path, text, name="exp.ini"):
    path = tmp_path / name
    path.write_text(text)
    return path


def read_table(path):
    lines = path.read_text().splitlines()
    comments = [l for l in lines if l.startswith("#")]
    rows = list(csv.reader(l for l in lines if not l.startswith("#")))
    return comments, rows[0], np.array(rows[1:], dtype=float)


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        path = write(tmp_path, "[grid]\nt_end = 1\ndt = 0.1\ntend = 2\n")
        with pytest.raises(cli.ConfigError, match="tend"):
            cli.run("oracle", path, out=tmp_path / "o")

    def test_unknown_section_rejected(self):
        with pytest.raises(cli.ConfigError, match="modle"):
            cli.load_config("[modle]\nkind = heisenberg\n", "oracle")

    @pytest.mark.parametrize("text, key", [
        ("[grid]\nt_end = 1\ndt = 0.3\n", "dt"),
        ("[run]\ntrajectories = 0\n", "trajectories"),
        ("[run]\nfidelity = cubed\n", "fidelity"),
        ("[model]\nkind = ising\n", "kind"),
        ("[grid]\nt_end = x\n", "t_end"),
    ])
    def test_invalid_values_name_the_key(self, text, key):
        with pytest.raises(cli.ConfigError, match=key):
            cli.load_config(text, "oracle")

    def test_main_exit_code(self, tmp_path, capsys):
        path = write(tmp_path, "[run]\nbogus = 1\n")
        assert cli.main(["oracle", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
        assert "bogus" in capsys.readouterr().err

    def test_overrides(self):
        cfg = cli.load_config(SMALL_HEISENBERG, "mitigate", overrides={"trajectories": 7, "seed": None})
        assert cfg["run"]["trajectories"] == 7 and cfg.seed == 5

    @pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.ini")), ids=lambda p: p.stem)
    def test_shipped_configs_load(self, path):
        for sub in cli.SUBCOMMANDS:
            cli.load_config(path.read_text(), sub, path.parent)


class TestSubcommands:
    def test_oracle_zero_rates(self, tmp_path):
        text = SMALL_HEISENBERG.replace("0.01\ngamma_D = 0.01", "0\ngamma_D = 0") + "substeps = 4\n"
        out = tmp_path / "o"
        assert cli.main(["oracle", "--config", str(write(tmp_path, text)), "--out", str(out)]) == 0
        _, header, data = read_table(out / "oracle.csv")
        assert header == cli.COLUMNS["oracle.csv"]
        assert np.max(np.abs(data[:, 1] - 1)) <= 1e-8

    @pytest.mark.parametrize("sub, text, files", [
        ("oracle", TWO_LEVEL, ["oracle.csv"]),
        ("unravel", TWO_LEVEL, ["unravel.csv"]),
        ("cost", TWO_LEVEL, ["cost.csv"]),
        ("mitigate", SMALL_HEISENBERG, ["fidelity.csv"]),
        ("lv", SMALL_HEISENBERG, ["fidelity.csv"]),
        ("qprob", QPROB, ["qprob.csv"]),
    ])
    def test_outputs_follow_schema(self, tmp_path, sub, text, files):
        out = tmp_path / sub
        path = write(tmp_path, text)
        assert cli.run(sub, path, out=out) == 0
        cfg = cli.load_config(text, sub)
        for name in files:
            comments, header, data = read_table(out / name)
            assert comments == cli.header_lines(cfg)
            assert f"config_sha256={cfg.digest}" in comments[1] and f"seed={cfg.seed}" in comments[1]
            assert header == cli.COLUMNS[name]
            assert data.ndim == 2 and data.shape[1] == len(header)
            assert np.all(np.isfinite(data))
        for name in ("summary.txt", "manifest.txt"):
            assert (out / name).read_text().splitlines()[:2] == cli.header_lines(cfg)

    def test_mitigate_summary_reports_improvement(self, tmp_path):
        out = tmp_path / "m"
        cli.run("mitigate", write(tmp_path, SMALL_HEISENBERG), out=out)
        summary = (out / "summary.txt").read_text()
        assert "improvement" in summary

    def test_squared_fidelity_switch(self, tmp_path):
        plain, squared = tmp_path / "a", tmp_path / "b"
        cli.run("mitigate", write(tmp_path, SMALL_HEISENBERG), out=plain)
        text = SMALL_HEISENBERG.replace("steps = 10", "steps = 10\nfidelity = squared")
        cli.run("mitigate", write(tmp_path, text, "sq.ini"), out=squared)
        a = read_table(plain / "fidelity.csv")[2]
        b = read_table(squared / "fidelity.csv")[2]
        assert np.allclose(b[:, 1], a[:, 1] ** 2)

    def test_event_dump(self, tmp_path):
        text = SMALL_HEISENBERG.replace("steps = 10", "steps = 10\ndump_events = yes")
        out = tmp_path / "e"
        cli.run("mitigate", write(tmp_path, text), out=out)
        events = read_events(out / "events.csv")
        assert all(0 <= i < 300 for i in events)
        assert all(0 <= e.time <= 2 for evs in events.values() for e in evs)

    @pytest.mark.parametrize("sub", ["mitigate", "lv", "unravel"])
    def test_worker_count_does_not_change_output(self, tmp_path, sub):
        text = TWO_LEVEL if sub == "unravel" else SMALL_HEISENBERG
        path = write(tmp_path, text)
        name = "unravel.csv" if sub == "unravel" else "fidelity.csv"
        one, two = tmp_path / "w1", tmp_path / "w2"
        cli.main([sub, "--config", str(path), "--workers", "1", "--out", str(one), "--trajectories", "2500"])
        cli.main([sub, "--config", str(path), "--workers", "2", "--out", str(two), "--trajectories", "2500"])
        assert (one / name).read_text() == (two / name).read_text()
