import csv
import json
import shutil
import subprocess

import numpy as np
import pytest

from dsbayes.cli import (
    COMPARE_COLUMNS,
    TRACE_COLUMNS,
    ConfigError,
    load_config,
    main,
    parse_config,
    read_field,
)

SMALL = """
schema_version = 1
seed = 3
output = "{out}"

[problem]
kind = "fredholm1d"
n = 80
m = 50
{extra}
"""

IDENTITY = """
schema_version = 1
output = "{out}"

[problem]
kind = "dense"
G = [[1.0]]
y = [2.0]

[solver]
k_max = 1
"""


def _write(tmp_path, text, name="cfg.toml", out="out", **kw):
    path = tmp_path / name
    path.write_text(text.format(out=out, extra=kw.get("extra", "")))
    return path


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestConfig:
    def test_missing_file(self, tmp_path):
        assert main(["run", str(tmp_path / "nope.toml")]) == 2

    def test_unknown_key(self, tmp_path):
        path = _write(tmp_path, SMALL, extra="colour = 3")
        assert main(["run", str(path)]) == 2

    def test_bad_toml(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("schema_version = = 1")
        with pytest.raises(ConfigError):
            load_config(path)

    @pytest.mark.parametrize(
        "patch",
        [
            {"schema_version": 2},
            {"problem": {"preset": "nope"}},
            {"problem": {"preset": "fredholm-small", "kind": "fredholm1d"}},
            {"problem": {"kind": "fredholm1d", "n": 0}},
            {"problem": {"kind": "fredholm1d", "noise_level": -0.1}},
            {"solver": {"k_max": 0}},
            {"solver": {"stop_mode": "sometimes"}},
            {"solver": {"lambda_bracket": [5.0, 1.0]}},
            {"diagnostics": {"trace_seeds": "exact"}},
            {"compare": {"max_rank": -1}},
            {"seed": -1},
        ],
    )
    def test_invalid_values(self, patch):
        data = {"schema_version": 1, "problem": {"preset": "fredholm-small"}}
        data.update(patch)
        with pytest.raises(ConfigError):
            parse_config(data)

    def test_preset_default_seed(self):
        cfg = parse_config({"schema_version": 1, "problem": {"preset": "fredholm-small"}})
        assert cfg.seed == 3
        assert cfg.problem["n"] == 500


class TestRun:
    def test_identity_example(self, tmp_path):
        path = _write(tmp_path, IDENTITY)
        assert main(["run", str(path)]) == 0
        res = json.loads((tmp_path / "out" / "result.json").read_text())
        assert res["lambda"] == pytest.approx(1 / 3, rel=1e-7)
        assert res["k"] == 1

    def test_outputs(self, tmp_path):
        path = _write(tmp_path, SMALL)
        assert main(["run", str(path)]) == 0
        out = tmp_path / "out"
        rows = _csv(out / "trace.csv")
        assert rows[0] == TRACE_COLUMNS
        res = json.loads((out / "result.json").read_text())
        assert res["schema_version"] == 1 and res["n"] == 80 and res["m"] == 50
        assert len(rows) - 1 == res["k"]
        assert read_field(out / "mean.bin").shape == (80,)
        assert np.all(read_field(out / "variance.bin") >= 0)
        oracle = json.loads((out / "oracle.json").read_text())
        resolved = [s for s in oracle["steps"] if s["resolved"]]
        assert resolved and all(s["dF_ok"] and s["kl_ok"] for s in resolved)
        assert "solve_s" in json.loads((out / "timing.json").read_text())

    def test_deterministic(self, tmp_path):
        a = _write(tmp_path, SMALL, name="a.toml", out="a")
        b = _write(tmp_path, SMALL, name="b.toml", out="b")
        assert main(["run", str(a)]) == 0 and main(["run", str(b)]) == 0
        for name in ("trace.csv", "result.json", "mean.bin", "variance.bin", "oracle.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    @pytest.mark.filterwarnings("ignore:.*went negative:RuntimeWarning")
    def test_oracle_skipped_above_cap(self, tmp_path):
        path = _write(tmp_path, SMALL, extra="\n[diagnostics]\ndense_cap = 10\n")
        assert main(["run", str(path)]) == 0
        out = tmp_path / "out"
        assert not (out / "oracle.json").exists()
        assert json.loads((out / "result.json").read_text())["trace_seeds"]["mode"] == "hutchinson"

    def test_seeds_off(self, tmp_path):
        path = _write(tmp_path, SMALL, extra="\n[diagnostics]\ntrace_seeds = \"off\"\n")
        assert main(["run", str(path)]) == 0
        rows = _csv(tmp_path / "out" / "trace.csv")
        assert rows[1][TRACE_COLUMNS.index("dF_bound")] == "nan"


class TestCompare:
    def test_rank_zero_row_and_convergence(self, tmp_path):
        path = _write(tmp_path, SMALL)
        assert main(["compare-lis", str(path)]) == 0
        rows = _csv(tmp_path / "out" / "compare.csv")
        assert rows[0] == COMPARE_COLUMNS
        body = np.array(rows[1:], dtype=float)
        first = body[0]
        assert first[0] == 0
        assert first[1] == first[2] == 1.0  # both means are zero at rank 0
        assert first[3] == pytest.approx(first[4], rel=1e-10)
        assert first[5] == first[6]
        # at the last rank both approximations are close to the exact posterior
        assert body[-1, 5] < 1e-2 * body[0, 5]
        assert body[-1, 6] < 1e-2 * body[0, 6]

    def test_deterministic(self, tmp_path):
        a = _write(tmp_path, SMALL, name="a.toml", out="a")
        b = _write(tmp_path, SMALL, name="b.toml", out="b")
        assert main(["compare-lis", str(a)]) == 0 and main(["compare-lis", str(b)]) == 0
        assert (tmp_path / "a" / "compare.csv").read_bytes() == (tmp_path / "b" / "compare.csv").read_bytes()

    def test_dense_cap_exit_code(self, tmp_path):
        path = _write(tmp_path, SMALL, extra="\n[diagnostics]\ndense_cap = 10\n")
        assert main(["compare-lis", str(path)]) == 3


class TestMisc:
    def test_presets(self, capsys):
        assert main(["presets"]) == 0
        text = capsys.readouterr().out
        assert "fredholm-small" in text and "deblur-small" in text

    def test_threads_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DSBAYES_THREADS", "zero")
        assert main(["presets"]) == 2
        monkeypatch.setenv("DSBAYES_THREADS", "0")
        assert main(["presets"]) == 2
        monkeypatch.setenv("DSBAYES_THREADS", "2")
        assert main(["presets"]) == 0

    def test_usage_error(self):
        assert main(["frobnicate"]) == 2

    @pytest.mark.skipif(shutil.which("dsbayes") is None, reason="console script not installed")
    def test_console_script(self):
        proc = subprocess.run(["dsbayes", "presets"], capture_output=True, text=True, check=False)
        assert proc.returncode == 0
        assert "deblur-small" in proc.stdout
