"""Release criteria, one test each.  Every test prints a PASS/FAIL line.

Run just this file with ``pytest -v -s tests/test_acceptance.py``; criteria
3, 4 and 7 are end-to-end CLI runs and take several minutes together.
"""

import csv
import math
import time

import numpy as np
import pytest

from oracles import UNIT2, UNIT3, adam_reference, brute_pairs, dense_conv, kmap_pairs

from tpcsparse import analysis as A
from tpcsparse import checks, cli
from tpcsparse import layers as L
from tpcsparse import model as M
from tpcsparse import train as T
from tpcsparse.sparse import batch, build_kernel_map, pool_map


def run(*argv):
    return cli.main([str(a) for a in argv])


# --- 1: gradients ---------------------------------------------------------------------

def test_c1_gradient_checks(criterion):
    t0 = time.process_time()
    results = checks.layer_checks(seed=0)
    layer_worst = max(r.error for r in results)
    layers_ok = all(r.error < 1e-4 for r in results)
    e2e = checks._check_model(seed=0)
    cpu = time.process_time() - t0
    failed = [r.name for r in results if r.error >= 1e-4]
    ok = layers_ok and e2e < 1e-3 and cpu < 120
    criterion(1, "finite-difference gradients", ok,
              f"{len(results)} layer checks, worst {layer_worst:.1e} < 1e-4; end-to-end {e2e:.1e} < 1e-3; "
              f"{cpu:.1f} s CPU" + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok


# --- 2: oracles -----------------------------------------------------------------------

def test_c2_dense_and_brute_force_oracles(criterion):
    rng = np.random.default_rng(2)
    worst = 0.0
    coords_ok = True
    for e in range(100):
        sites = np.unique(rng.integers(0, 7, size=(int(rng.integers(1, 80)), 3)), axis=0)
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = batch([(sites, rng.standard_normal((len(sites), cin)))], np.float64)
        w = rng.standard_normal((27, cin, cout))
        stride = (1, 2, 3)[e % 3]
        y = L.sparse_conv_fwd(x, w, build_kernel_map(x, 3, stride))
        oc, ref = dense_conv(x.coords, x.feats, w, stride, 7)
        coords_ok &= np.array_equal(oc, y.coords)
        worst = max(worst, float(np.abs(y.feats - ref).max()))

    mismatches = checked = 0
    for n in (1, 17, 64, 120, 200):
        # n distinct (event, site) rows over two events, negative coordinates included
        pool = np.unique(np.column_stack([rng.integers(0, 2, 4 * n), rng.integers(-6, 6, size=(4 * n, 3))]), axis=0)
        rows = pool[rng.permutation(len(pool))[:n]]
        x = batch([(rows[rows[:, 0] == b, 1:], np.ones((np.sum(rows[:, 0] == b), 1)))
                   for b in np.unique(rows[:, 0])])
        assert len(x) == n
        for k, s in ((3, 1), (3, 2), (3, 3), (1, 2)):
            km = build_kernel_map(x, k, s)
            outs, pairs = brute_pairs(x.coords, 1, UNIT3 if k == 3 else [(0, 0, 0)], s)
            mismatches += km.out_coords.tolist() != [list(o) for o in outs] or kmap_pairs(km) != pairs
            checked += 1
        outs, pairs = brute_pairs(x.coords, 1, UNIT2, 2)
        mismatches += kmap_pairs(pool_map(x)) != pairs
        checked += 1
    ok = coords_ok and worst < 1e-6 and mismatches == 0
    criterion(2, "sparse vs dense oracle and brute-force kernel maps", ok,
              f"100 events in 7^3, max abs diff {worst:.1e} < 1e-6; {checked - mismatches}/{checked} maps exact, "
              f"N <= 200")
    assert ok


# --- 3: pretraining -------------------------------------------------------------------

@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    d = tmp_path_factory.mktemp("pretrain")
    t0 = time.perf_counter()
    rc_gen = run("gen", "gadget", "-n", 2000, "--seed", 0, "-o", d / "g.tpce", "-q")
    rc_train = run("train", "--data", d / "g.tpce", "-o", d / "m.ckpt", "--profile", "small", "--epochs", 15,
                   "--seed", 0, "-q")
    return d, rc_gen, rc_train, time.perf_counter() - t0


@pytest.mark.slow
def test_c3_desk_scale_pretraining(pretrained, criterion):
    d, rc_gen, rc_train, seconds = pretrained
    assert rc_gen == 0 and rc_train == 0
    with open(d / "m.ckpt.history.csv") as f:
        acc = [float(r["accuracy"]) for r in csv.DictReader(f)]
    best = max(acc)
    ok = len(acc) == 15 and best >= 0.98 and seconds < 600
    criterion(3, "desk-scale pretraining", ok,
              f"best val accuracy {best:.4f} >= 0.98 at epoch {acc.index(best) + 1}/15; "
              f"gen + train {seconds:.0f} s < 600 s")
    assert ok


# --- 4: probe ordering ----------------------------------------------------------------

@pytest.mark.slow
def test_c4_probe_ordering(pretrained, tmp_path, criterion):
    d = pretrained[0]
    assert run("gen", "gadget", "-n", 1500, "--seed", 100, "-o", tmp_path / "g.tpce", "-q") == 0
    assert run("gen", "attpc", "-n", 1500, "--seed", 100, "-o", tmp_path / "a.tpce", "-q") == 0
    assert run("train", "-o", tmp_path / "r.ckpt", "--init", "rand", "--epochs", 0, "--profile", "small",
               "--seed", 0, "-q") == 0
    assert run("probe", "--model", f"train={d / 'm.ckpt'}", "--model", f"rand={tmp_path / 'r.ckpt'}",
               "--gadget", tmp_path / "g.tpce", "--attpc", tmp_path / "a.tpce", "-o", tmp_path / "rep",
               "--seed", 0, "-q") == 0
    with open(tmp_path / "rep" / "report.csv") as f:
        rows = {(r["task"], r["predictor"]): r for r in csv.DictReader(f)}
    ok = True
    parts = []
    for task in A.TASKS:
        for col in ("accuracy", "f1_macro"):
            tr, ra, na = (float(rows[(task, p)][col]) for p in ("train", "rand", "naive"))
            ok &= tr >= ra >= na
            parts.append(f"{task} {col} {tr:.3f}/{ra:.3f}/{na:.3f}")
    gap = float(rows[("gadget-3class", "train")]["accuracy"]) - float(rows[("gadget-3class", "rand")]["accuracy"])
    ok &= gap >= 0.05
    criterion(4, "train >= rand >= naive ordering", ok,
              "train/rand/naive: " + "; ".join(parts) + f"; gadget accuracy gap {gap:.3f} >= 0.05")
    assert ok


# --- 5: naive arithmetic --------------------------------------------------------------

def test_c5_naive_baseline(criterion):
    y = np.repeat([0, 1, 2], 100)
    m = A.naive_baseline(y, y, 3)
    acc, f1 = f"{m.accuracy:.2f}", f"{m.macro_f1:.2f}"
    ok = acc == "0.33" and f1 == "0.17"
    criterion(5, "naive baseline on balanced 3-class", ok, f"accuracy {acc}, macro-F1 {f1}")
    assert ok


# --- 6: schedule and optimizer --------------------------------------------------------

def test_c6_schedule_optimizer_clip(criterion):
    lr0, lr13 = T.cosine_lr(0), T.cosine_lr(13)

    traces_ok = True
    for grads, wd in (([0.3, -1.2], 0.0), ([2.5, 0.1], 1e-4)):
        params, state = {"w": np.array([0.25])}, T.AdamState()
        got = []
        for g in grads:
            T.adam_step(params, {"w": np.array([g])}, state, 5e-4, wd)
            got.append(float(params["w"][0]))
        traces_ok &= got == adam_reference(0.25, grads, 5e-4, wd)

    state, x, y = checks.micro_model(0)
    logits, _, tape = M.forward(state, x, "train", return_tape=True)
    _, g = T.cross_entropy(logits, y)
    grads = M.backward(state, tape, g * 1e4)
    grads.pop("input")
    before = T.global_norm(grads)
    T.clip_grad_norm(grads, 1.0)
    after = T.global_norm(grads)

    ok = lr0 == 5e-4 and lr13 == 0.0 and traces_ok and before > 1.0 and after <= 1.0 + 1e-9
    criterion(6, "cosine schedule, Adam trace, gradient clipping", ok,
              f"lr(0) = {lr0:g}, lr(13) = {lr13:g}; two-step Adam exact: {traces_ok}; "
              f"norm {before:.3g} -> {after:.12f}")
    assert ok


# --- 7: determinism -------------------------------------------------------------------

def pipeline(root, threads):
    root.mkdir()
    common = ["--seed", 5, "--threads", threads, "-q"]
    assert run("gen", "gadget", "-n", 200, "-o", root / "g.tpce", *common) == 0
    assert run("gen", "attpc", "-n", 150, "-o", root / "a.tpce", *common) == 0
    assert run("train", "--data", root / "g.tpce", "-o", root / "m.ckpt", "--epochs", 2, *common) == 0
    assert run("train", "-o", root / "r.ckpt", "--init", "rand", "--epochs", 0, *common) == 0
    assert run("embed", "--checkpoint", root / "m.ckpt", "--data", root / "a.tpce", "-o", root / "e.csv",
               *common) == 0
    assert run("probe", "--model", f"train={root / 'm.ckpt'}", "--model", f"rand={root / 'r.ckpt'}",
               "--gadget", root / "g.tpce", "--attpc", root / "a.tpce", "-o", root / "rep",
               "--set", "probe.max_iter=2000", *common) == 0
    # config snapshots record the command line, which names the directory
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and not p.name.endswith(".config.ini")}


@pytest.mark.slow
def test_c7_determinism(tmp_path, criterion):
    a = pipeline(tmp_path / "a", 1)
    b = pipeline(tmp_path / "b", 1)
    c = pipeline(tmp_path / "c", 4)
    differ = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    reports = [k for k in a if k.startswith("rep/")]
    differ_mt = sorted(k for k in reports if a[k] != c.get(k))
    kinds = {k.rsplit(".", 1)[-1] for k in a}
    ok = not differ and not differ_mt and {"tpce", "ckpt", "csv", "json"} <= kinds
    criterion(7, "deterministic pipelines", ok,
              f"{len(a)} files bit-identical across two --threads 1 runs"
              + (f" except {differ}" if differ else "")
              + f"; {len(reports)} report files identical with --threads 4"
              + (f" except {differ_mt}" if differ_mt else ""))
    assert ok


# --- 8: variable length ---------------------------------------------------------------

def test_c8_variable_length_batch(criterion):
    rng = np.random.default_rng(8)
    big = np.unique(rng.integers(0, 200, size=(12_000, 3)), axis=0)
    big = big[rng.permutation(len(big))[:10_000]]
    events = [(np.array([[5, 5, 5]]), np.array([[1.0, 0.01, 0.01, 0.01]])),
              (big, np.column_stack([rng.uniform(0, 1, 10_000), big / 500.0]))]
    state = M.init(M.ArchConfig())
    before = {k: v.copy() for k, v in state.params.items()}
    x = batch(events, state.dtype)
    loss = T.train_step(state, T.AdamState(), x, np.array([0, 1]), 5e-4, T.OptimConfig(), 0)
    changed = sum(not np.array_equal(before[k], state.params[k]) for k in before)
    emb = M.embed(state, events)
    alone = np.vstack([M.embed(state, [e]) for e in events])
    ok = (len(x) == 10_001 and x.event_sizes().tolist() == [1, 10_000] and math.isfinite(loss) and changed > 0
          and emb.shape == (2, state.config.embed_dim) and np.isfinite(emb).all() and np.array_equal(emb, alone))
    criterion(8, "1-site and 10^4-site events in one batch", ok,
              f"{len(x)} rows, loss {loss:.3f}, {changed}/{len(before)} tensors updated, "
              f"embedding {emb.shape} equal to per-event embedding: {np.array_equal(emb, alone)}")
    assert ok


# --- 9: PCA ---------------------------------------------------------------------------

def test_c9_pca_properties(criterion):
    rng = np.random.default_rng(9)
    worst_orth = worst_shift = worst_rec = 0.0
    descending = True
    for d in (3, 8, 128):
        X = rng.standard_normal((300, d)) @ rng.standard_normal((d, d))
        p = A.fit_pca(X)
        worst_orth = max(worst_orth, np.abs(p.components @ p.components.T - np.eye(2)).max())
        descending &= bool(p.explained_variance[0] >= p.explained_variance[1])
        shift = rng.standard_normal(d) * 100
        ref = A.project(p, X)
        moved = A.project(A.fit_pca(X + shift), X + shift)
        worst_shift = max(worst_shift, np.abs(moved - ref).max() / max(1.0, np.abs(ref).max()))
        Y = rng.standard_normal((300, 2)) @ rng.standard_normal((2, d)) + rng.standard_normal(d)
        q = A.fit_pca(Y)
        worst_rec = max(worst_rec, np.abs(A.reconstruct(q, A.project(q, Y)) - Y).max())
    ok = worst_orth < 1e-10 and descending and worst_shift < 1e-8 and worst_rec < 1e-8
    criterion(9, "PCA properties", ok,
              f"orthonormality {worst_orth:.1e} < 1e-10; descending: {descending}; "
              f"translation {worst_shift:.1e} < 1e-8; rank-2 reconstruction {worst_rec:.1e} < 1e-8")
    assert ok
