import csv
import json

import numpy as np
import pytest

from tpcsparse import cli
from tpcsparse import events as E
from tpcsparse import model as M

TINY = ["--set", "arch.stage_widths=4,4,8,8"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert run("gen", "gadget", "-n", 150, "-o", d / "g.tpce", "--seed", 1, "-q") == 0
    assert run("gen", "attpc", "-n", 120, "-o", d / "a.tpce", "--seed", 1, "-q") == 0
    assert run("train", "--data", d / "g.tpce", "-o", d / "m.ckpt", "--epochs", 2, "--seed", 1, "-q", *TINY) == 0
    assert run("train", "-o", d / "r.ckpt", "--init", "rand", "--epochs", 0, "--seed", 1, "-q", *TINY) == 0
    return d


# --- gen ---------------------------------------------------------------------------

def test_gen_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("gen", "gadget", "-n", 1000, "--seed", 7, "-o", tmp_path / f"{name}.tpce", "-q") == 0
    assert (tmp_path / "a.tpce").read_bytes() == (tmp_path / "b.tpce").read_bytes()


def test_gen_zero_events_is_usage_error(tmp_path, capsys):
    assert run("gen", "attpc", "-n", 0, "-o", tmp_path / "x.tpce") == cli.EXIT_USAGE
    assert not (tmp_path / "x.tpce").exists()


def test_gen_summary_matches_file(data, tmp_path, capsys):
    run("gen", "gadget", "-n", 80, "--seed", 2, "-o", tmp_path / "g.tpce", "-q")
    out = capsys.readouterr().out
    evs = E.read_events(tmp_path / "g.tpce")
    c3 = E.labels_of(evs, "class3")
    line = next(l for l in out.splitlines() if l.startswith("class mix"))
    assert line == (f"class mix: p800 {np.sum(c3 == 0)}, p1600 {np.sum(c3 == 1)}, a2000 {np.sum(c3 == 2)}, "
                    f"continuum {np.sum(c3 < 0)}")
    assert out.startswith(f"80 gadget events, {sum(len(e.points) for e in evs)} points")


def test_gen_threads_identical(tmp_path):
    run("gen", "attpc", "-n", 200, "--seed", 3, "--threads", 1, "-o", tmp_path / "a1.tpce", "-q")
    run("gen", "attpc", "-n", 200, "--seed", 3, "--threads", 4, "-o", tmp_path / "a4.tpce", "-q")
    assert (tmp_path / "a1.tpce").read_bytes() == (tmp_path / "a4.tpce").read_bytes()


def test_data_dir_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.DATA_ENV, str(tmp_path))
    assert run("gen", "attpc", "-n", 5, "-q") == 0
    assert (tmp_path / "attpc.tpce").is_file() and (tmp_path / "attpc.tpce.config.ini").is_file()


# --- configuration -------------------------------------------------------------------

def test_config_precedence(tmp_path, capsys):
    ini = tmp_path / "c.ini"
    ini.write_text("[gadget]\nnoise_rate = 5.0\njitter_mm = 0.3\n")
    run("gen", "gadget", "-n", 3, "--config", ini, "--set", "gadget.jitter_mm=0.2", "-o", tmp_path / "g.tpce")
    err = capsys.readouterr().err
    assert "noise_rate = 5.0  (file)" in err
    assert "jitter_mm = 0.2  (cli)" in err
    assert "points_per_mm = 3.0  (default)" in err
    assert "seed = 0  (run.seed)" in err


@pytest.mark.parametrize("argv", [
    ["--set", "gadget.nonsense=1"],
    ["--set", "nosection.x=1"],
    ["--set", "gadget.seed=4"],
    ["--set", "gadget.noise_rate=abc"],
    ["--set", "gadget.class_mix=0.5,0.5,0.5"],
])
def test_config_errors_exit_2(tmp_path, argv):
    assert run("gen", "gadget", "-n", 3, "-o", tmp_path / "g.tpce", "-q", *argv) == cli.EXIT_USAGE


def test_snapshot_replays_run(data, tmp_path):
    ini = data / "m.ckpt.config.ini"
    assert run("train", "--config", ini, "--data", data / "g.tpce", "-o", tmp_path / "m2.ckpt", "-q") == 0
    assert (tmp_path / "m2.ckpt").read_bytes() == (data / "m.ckpt").read_bytes()


# --- train ---------------------------------------------------------------------------

def test_history_rows_equal_epochs(data):
    with open(data / "m.ckpt.history.csv") as f:
        rows = list(csv.reader(f))
    assert len(rows) == 1 + 2
    js = json.loads((data / "m.ckpt.history.json").read_text())
    assert len(js["epochs"]) == 2


def test_rand_checkpoint_is_untrained(data):
    s = M.load_checkpoint(data / "r.ckpt")
    ref = M.init(M.ArchConfig(stage_widths=(4, 4, 8, 8), seed=1))
    assert all(np.array_equal(s.params[k], ref.params[k]) for k in ref.params)
    assert s.meta["init"] == "rand"
    rows = list(csv.reader(open(data / "r.ckpt.history.csv")))
    assert len(rows) == 1


def test_train_prints_excluded_count(data, tmp_path, capsys):
    run("train", "--data", data / "g.tpce", "-o", tmp_path / "m.ckpt", "--epochs", 1, "-q", *TINY)
    out = capsys.readouterr().out
    n_excl = int(np.sum(E.labels_of(E.read_events(data / "g.tpce"), "gate") < 0))
    assert f"{n_excl} excluded by gating" in out


def test_train_from_checkpoint(data, tmp_path):
    assert run("train", "--data", data / "g.tpce", "-o", tmp_path / "m.ckpt", "--init", "checkpoint",
               "--from", data / "m.ckpt", "--epochs", 1, "-q", *TINY) == 0
    assert run("train", "-o", tmp_path / "m.ckpt", "--init", "checkpoint", "-q") == cli.EXIT_USAGE


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_numerics_exit_4(data, tmp_path, capsys):
    rc = run("train", "--data", data / "g.tpce", "-o", tmp_path / "bad.ckpt", "--epochs", 2, "--lr", "1e38",
             "-q", *TINY)
    assert rc == cli.EXIT_NUMERICS
    assert "epoch 1, step" in capsys.readouterr().err
    assert not (tmp_path / "bad.ckpt").exists()


def test_train_on_attpc_file_rejected(data, tmp_path):
    assert run("train", "--data", data / "a.tpce", "-o", tmp_path / "m.ckpt", "--epochs", 1, "-q") == cli.EXIT_USAGE


# --- embed ---------------------------------------------------------------------------

def test_embed_rows_columns_and_repeatable(data, tmp_path):
    for name in ("e1.csv", "e2.csv"):
        assert run("embed", "--checkpoint", data / "m.ckpt", "--data", data / "a.tpce", "-o", tmp_path / name,
                   "-q") == 0
    assert (tmp_path / "e1.csv").read_bytes() == (tmp_path / "e2.csv").read_bytes()
    det, ids, X, labels = cli.read_embeddings(tmp_path / "e1.csv")
    assert det == "attpc" and len(ids) == 120 and X.shape == (120, 8)
    evs = E.read_events(data / "a.tpce")
    assert np.array_equal(labels["group"], E.labels_of(evs, "group"))


def test_embed_npz(data, tmp_path):
    assert run("embed", "--checkpoint", data / "m.ckpt", "--data", data / "g.tpce", "-o", tmp_path / "e.npz",
               "-q") == 0
    z = np.load(tmp_path / "e.npz")
    assert z["X"].shape == (150, 8) and len(z["gate"]) == 150


def test_embed_bad_checkpoint_exit_5(data, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes((data / "m.ckpt").read_bytes()[:100])
    assert run("embed", "--checkpoint", bad, "--data", data / "a.tpce", "-o", tmp_path / "e.csv",
               "-q") == cli.EXIT_CHECKPOINT


def test_missing_and_malformed_inputs_exit_3(data, tmp_path):
    assert run("embed", "--checkpoint", data / "m.ckpt", "--data", tmp_path / "none.tpce", "-o",
               tmp_path / "e.csv", "-q") == cli.EXIT_IO
    junk = tmp_path / "junk.tpce"
    junk.write_bytes(b"garbage!" * 10)
    assert run("embed", "--checkpoint", data / "m.ckpt", "--data", junk, "-o", tmp_path / "e.csv",
               "-q") == cli.EXIT_IO
    assert run("gen", "gadget", "-n", 2, "-o", tmp_path / "nodir" / "g.tpce", "-q") == cli.EXIT_IO


# --- probe ---------------------------------------------------------------------------

def test_probe_report(data, tmp_path, capsys):
    out = tmp_path / "rep"
    rc = run("probe", "--model", f"train={data / 'm.ckpt'}", "--model", f"rand={data / 'r.ckpt'}",
             "--gadget", data / "g.tpce", "--attpc", data / "a.tpce", "-o", out, "-q",
             "--set", "probe.max_iter=300")
    assert rc == 0
    rows = list(csv.DictReader(open(out / "report.csv")))
    assert {(r["task"], r["predictor"]) for r in rows} == {(t, p) for t in ("gadget-3class", "attpc-tracks")
                                                           for p in ("train", "rand", "naive")}
    pca = list(csv.reader(open(out / "pca_train_attpc-tracks.csv")))
    assert len(pca) == 121 and pca[0] == ["pca1", "pca2", "label"]
    assert (out / "report.json").stat().st_size > 0 and (out / "report.config.ini").is_file()
    assert "naive" in capsys.readouterr().out


def test_probe_attpc_grouping_from_embeddings(data, tmp_path):
    emb = tmp_path / "e.csv"
    run("embed", "--checkpoint", data / "m.ckpt", "--data", data / "a.tpce", "-o", emb, "-q")
    out = tmp_path / "rep"
    assert run("probe", "--embeddings", f"x={emb}", "--task", "attpc-tracks", "-o", out, "-q",
               "--set", "probe.max_iter=300") == 0
    labels = [int(r[2]) for r in list(csv.reader(open(out / "pca_x_attpc-tracks.csv")))[1:]]
    want = [E.track_group(e.n_tracks) for e in E.read_events(data / "a.tpce")]
    assert labels == want
    rows = list(csv.DictReader(open(out / "report.csv")))
    assert [r["predictor"] for r in rows] == ["x", "naive"]
    js = json.loads((out / "report.json").read_text())
    assert "x/attpc-tracks" in js["details"]


def test_probe_errors(data, tmp_path):
    ck = f"train={data / 'm.ckpt'}"
    assert run("probe", "--model", ck, "--task", "bogus", "-o", tmp_path / "r", "-q") == cli.EXIT_USAGE
    assert run("probe", "-o", tmp_path / "r", "-q") == cli.EXIT_USAGE
    assert run("probe", "--model", "nopath", "-o", tmp_path / "r", "-q") == cli.EXIT_USAGE
    emb = tmp_path / "e.csv"
    run("embed", "--checkpoint", data / "m.ckpt", "--data", data / "a.tpce", "-o", emb, "-q")
    assert run("probe", "--embeddings", f"x={emb}", "--task", "gadget-3class", "-o", tmp_path / "r",
               "-q") == cli.EXIT_USAGE


# --- selftest ------------------------------------------------------------------------

def test_selftest_passes(capsys):
    assert run("selftest", "-q") == 0
    assert "15/15 checks passed" in capsys.readouterr().out


@pytest.mark.parametrize("fault,name", [("conv", "conv k=3"), ("relu", "relu"), ("linear", "linear")])
def test_selftest_fault_named(fault, name, capsys):
    assert run("selftest", "-q", "--fault", fault) == cli.EXIT_FAIL
    err = capsys.readouterr().err
    assert err.startswith("FAILED:") and name in err and "end-to-end micro-model" in err
