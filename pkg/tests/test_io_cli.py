import json
import struct
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from neuraloi.autodiff import Tensor
from neuraloi.bench import ConfigError, load_config, run_benchmark, validate_config
from neuraloi.checkpoint import arrays_equal, load_checkpoint, save_checkpoint
from neuraloi.cli import main, read_obs
from neuraloi.io import (
    FormatError,
    decode_field,
    decode_params,
    encode_field,
    encode_params,
    read_field,
    read_params,
    write_field,
    write_params,
)
from neuraloi.solver import SolverModel
from neuraloi.spde import Field3D
from neuraloi.variational import ConvResPrior, VarCost, Weight

ROOT = Path(__file__).parent.parent
TINY = ROOT / "configs" / "tiny.json"
MINIMAL = ROOT / "configs" / "minimal_benchmark.json"
FIXTURE = Path(__file__).parent / "fixtures" / "oi_case"


def tree_bytes(d: Path) -> dict:
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------------------
# field and parameter files


def test_field_header_layout():
    buf = encode_field(np.arange(6.0).reshape(1, 2, 3), 0.5, 2.0, 3.0)
    assert buf[:4] == b"NOI1"
    code, ndims = struct.unpack_from("<QQ", buf, 4)
    assert (code, ndims) == (0, 3)
    assert struct.unpack_from("<3Q3d", buf, 20) == (1, 2, 3, 0.5, 2.0, 3.0)
    assert np.frombuffer(buf[68:], "<f8").tolist() == list(range(6))


def test_mask_is_bit_packed():
    m = np.zeros((1, 1, 10), bool)
    m[0, 0, [0, 9]] = True
    buf = encode_field(m)
    assert struct.unpack_from("<Q", buf, 4)[0] == 1
    assert buf[68:] == bytes([0b00000001, 0b00000010])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4))))
def test_field_round_trip_bit_exact(values):
    back, spacing = decode_field(encode_field(values, 1.5, 2.5, 0.25))
    assert back.tobytes() == values.tobytes() and spacing == (1.5, 2.5, 0.25)


@settings(max_examples=40, deadline=None)
@given(arrays(np.bool_, st.tuples(st.integers(1, 3), st.integers(1, 5), st.integers(1, 9))))
def test_mask_round_trip(mask):
    back, _ = decode_field(encode_field(mask))
    assert back.dtype == bool
    np.testing.assert_array_equal(back, mask)


def test_field_file_round_trip(tmp_path):
    f = Field3D(np.random.default_rng(0).normal(size=(2, 3, 4)), 2.0, 3.0, 0.5)
    write_field(tmp_path / "f.noi", f)
    g = read_field(tmp_path / "f.noi")
    assert g.values.tobytes() == f.values.tobytes() and (g.dx, g.dy, g.dt) == (2.0, 3.0, 0.5)
    write_field(tmp_path / "g.noi", g)
    assert (tmp_path / "f.noi").read_bytes() == (tmp_path / "g.noi").read_bytes()


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:-1],
    lambda b: b + b"\0",
    lambda b: b[:30],
    lambda b: b[:4] + struct.pack("<Q", 7) + b[12:],
])
def test_field_format_errors(mutate):
    buf = encode_field(np.zeros((1, 2, 2)))
    with pytest.raises(FormatError):
        decode_field(mutate(buf))


def test_field_file_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_field(tmp_path / "missing.noi")
    with pytest.raises(FormatError):
        encode_field(np.zeros((2, 2), dtype=np.int64))
    (tmp_path / "flat.noi").write_bytes(encode_field(np.zeros((2, 2))))
    with pytest.raises(FormatError):
        read_field(tmp_path / "flat.noi")


def test_params_round_trip(tmp_path):
    arrays_in = {"b": np.arange(3), "a": np.random.default_rng(1).normal(size=(2, 2))}
    write_params(tmp_path / "p.bin", "demo", arrays_in, {"k": 1})
    kind, arrays_out, meta = read_params(tmp_path / "p.bin")
    assert kind == "demo" and meta == {"k": 1}
    assert arrays_out["a"].tobytes() == arrays_in["a"].tobytes()
    assert arrays_out["b"].dtype == np.int64
    assert encode_params("demo", arrays_in, {"k": 1}) == (tmp_path / "p.bin").read_bytes()


def test_params_format_errors():
    buf = encode_params("demo", {"a": np.ones(3)})
    for bad in (b"NOPE" + buf[4:], buf[:-8], buf + b"\0", buf[:12] + b"[" + buf[13:]):
        with pytest.raises(FormatError):
            decode_params(bad)


def test_checkpoint_round_trip(tmp_path):
    model = SolverModel.create(3, hidden=4, seed=1, iterations=7)
    cost = VarCost(ConvResPrior.create(3, 4, rng=np.random.default_rng(2)), Weight.trainable(0.3))
    save_checkpoint(tmp_path, model, cost, {"seed": 1})
    model2, cost2, meta = load_checkpoint(tmp_path)
    assert meta["seed"] == 1 and model2.iterations == 7
    assert arrays_equal({k: v.data for k, v in model.parameters().items()},
                        {k: v.data for k, v in model2.parameters().items()})
    assert arrays_equal({k: v.data for k, v in cost.parameters().items()},
                        {k: v.data for k, v in cost2.parameters().items()})
    x = Tensor(np.random.default_rng(3).normal(size=(3, 5, 5)))
    assert cost2.prior(x).data.tobytes() == cost.prior(x).data.tobytes()


# ---------------------------------------------------------------------------
# configuration


def test_config_schema_rejections(tmp_path):
    cfg = load_config(TINY)
    bad = json.loads(json.dumps(cfg))
    bad["spde"]["alpha"] = 3
    with pytest.raises(ConfigError, match="spde/alpha"):
        validate_config(bad)
    bad = dict(cfg, unknown=1)
    with pytest.raises(ConfigError):
        validate_config(bad)
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "broken.json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")


# ---------------------------------------------------------------------------
# command line


def run(*argv) -> int:
    return main([str(a) for a in argv])


def test_simulate_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert run("simulate", TINY, "--seed", 5, "--out", tmp_path / d) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    run("simulate", TINY, "--seed", 6, "--out", tmp_path / "c")
    assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "c")
    assert read_field(tmp_path / "a" / "truth.noi").shape == (16, 8, 8)


def test_observe_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert run("observe", FIXTURE / "truth.noi", "--track-spacing", 3, "--sigma2", 0.01,
                   "--seed", 4, "--out", tmp_path / d) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    # the stored fixture was produced by the same command
    for name in ("mask.noi", "obs.noi", "obs.json"):
        assert (tmp_path / "a" / name).read_bytes() == (FIXTURE / name).read_bytes()
    obs = read_obs(tmp_path / "a")
    assert abs(obs.fraction - 1 / 3) < 0.1


def test_interpolate_oi_exact_matches_stored_oracle(tmp_path):
    assert run("interpolate", "--method", "oi-exact", "--config", TINY, "--obs", FIXTURE,
               "--truth", FIXTURE / "truth.noi", "--out", tmp_path) == 0
    got = json.loads((tmp_path / "metrics.json").read_text())
    want = json.loads((FIXTURE / "expected.json").read_text())["oi_score"]
    assert abs(got["oi_score"] - want) <= 1e-8 * abs(want)
    assert read_field(tmp_path / "reconstruction.noi").shape == (16, 8, 8)


def test_interpolate_gd_is_worse_and_deterministic(tmp_path):
    for d in ("a", "b"):
        assert run("interpolate", "--method", "oi-gd", "--config", TINY, "--obs", FIXTURE,
                   "--iterations", 10, "--out", tmp_path / d) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    gd = json.loads((tmp_path / "a" / "metrics.json").read_text())["oi_score"]
    assert gd > json.loads((FIXTURE / "expected.json").read_text())["oi_score"]
    lines = (tmp_path / "a" / "trace.csv").read_text().splitlines()
    assert lines[0] == "iteration,j_phi,grad_norm,mse_truth,mse_oi" and len(lines) == 11


def test_train_then_interpolate(tmp_path):
    for d in ("a", "b"):
        assert run("train", TINY, "--data", FIXTURE, "--out", tmp_path / d) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert (tmp_path / "a" / "history.csv").is_file()
    for d in ("ia", "ib"):
        assert run("interpolate", "--method", "solver", "--config", TINY, "--obs", FIXTURE,
                   "--model", tmp_path / "a", "--out", tmp_path / d) == 0
    assert tree_bytes(tmp_path / "ia") == tree_bytes(tmp_path / "ib")


def test_benchmark_minimal_config(tmp_path):
    for d in ("a", "b"):
        assert run("benchmark", MINIMAL, "--out", tmp_path / d) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    rows = report["rows"]
    assert [r["method"] for r in rows] == ["oi", "oi-gd", "oi-gd", "solver-l1"]
    assert "wall_time_cpu_seconds" not in report
    best = rows[0]["oi_score"]
    assert all(r["oi_score"] >= best * (1 - 1e-6) for r in rows)
    assert (tmp_path / "a" / "trace_oi-gd.csv").is_file()
    assert run("benchmark", MINIMAL, "--out", tmp_path / "t", "--timing") == 0
    assert "wall_time_cpu_s" in (tmp_path / "t" / "report.csv").read_text().splitlines()[0]


def test_benchmark_report_object():
    report = run_benchmark(load_config(MINIMAL))
    assert report.row("oi-gd", 20)["oi_score"] < report.row("oi-gd", 5)["oi_score"]
    with pytest.raises(KeyError):
        report.row("nothing")


def test_schema_failure_exits_before_work(tmp_path, capsys):
    cfg = json.loads(TINY.read_text())
    cfg["train"]["lr"] = -1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(cfg))
    for cmd in (["simulate", bad, "--out", tmp_path / "s"],
                ["train", bad, "--data", FIXTURE, "--out", tmp_path / "t"],
                ["benchmark", bad, "--out", tmp_path / "b"]):
        assert run(*cmd) == 2
        assert not any(tmp_path.glob(str(cmd[-1].name) + "/*"))
    assert "train/lr" in capsys.readouterr().err


def test_missing_files_give_path_errors(tmp_path, capsys):
    assert run("observe", tmp_path / "nope.noi", "--out", tmp_path / "o") == 2
    assert "nope.noi" in capsys.readouterr().err
    assert run("interpolate", "--method", "oi-exact", "--config", TINY, "--obs", tmp_path,
               "--out", tmp_path / "i") == 2
    assert "obs.json" in capsys.readouterr().err
    assert run("interpolate", "--method", "solver", "--config", TINY, "--obs", FIXTURE,
               "--out", tmp_path / "j") == 2
    assert run("--threads", 0, "simulate", TINY, "--out", tmp_path / "k") == 2


def test_grid_mismatch_is_config_error(tmp_path):
    cfg = json.loads(TINY.read_text())
    cfg["spde"]["nx"] = 9
    other = tmp_path / "other.json"
    other.write_text(json.dumps(cfg))
    assert run("interpolate", "--method", "oi-exact", "--config", other, "--obs", FIXTURE,
               "--out", tmp_path / "o") == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "neuraloi.cli", "simulate", str(TINY), "--seed", "5",
                           "--out", str(tmp_path / "p")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    run("simulate", TINY, "--seed", 5, "--out", tmp_path / "q")
    assert tree_bytes(tmp_path / "p") == tree_bytes(tmp_path / "q")
    proc = subprocess.run([sys.executable, "-m", "neuraloi.cli", "benchmark", str(tmp_path / "x.json"),
                           "--out", str(tmp_path / "r")], capture_output=True, text=True)
    assert proc.returncode == 2 and "x.json" in proc.stderr
