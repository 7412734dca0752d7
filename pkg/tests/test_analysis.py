import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tpcsparse import analysis as A
from tpcsparse import events as E
from tpcsparse import model as M
from tpcsparse.errors import DegenerateData, TaskError


def emb(X, y):
    return A.EmbeddingSet(np.asarray(X, float), np.asarray(y))


# --- probe -----------------------------------------------------------------------------

def test_two_separable_points():
    tr = emb([[0.0, 1.0], [1.0, 0.0]], [0, 1])
    probe = A.fit_probe(tr)
    assert A.eval_probe(probe, tr).accuracy == 1.0


def test_separable_blobs_self_accuracy(rng):
    X = np.vstack([rng.normal(-3, 1, (40, 5)), rng.normal(3, 1, (40, 5)), rng.normal(0, 1, (40, 5)) + [0, 0, 0, 0, 12]])
    y = np.repeat([0, 1, 2], 40)
    probe = A.fit_probe(emb(X, y), max_iter=5000)
    assert A.eval_probe(probe, emb(X, y)).accuracy == 1.0


def test_shuffled_labels_at_chance(rng):
    X = rng.standard_normal((1000, 4))
    y = rng.integers(0, 2, 1000)
    probe = A.fit_probe(emb(X[:500], y[:500]), max_iter=3000)
    acc = A.eval_probe(probe, emb(X[500:], y[500:])).accuracy
    assert abs(acc - 0.5) < 3 * math.sqrt(0.25 / 500)


def test_duplicated_points_same_decision(rng):
    X = rng.standard_normal((60, 3))
    y = (X[:, 0] + 0.5 * rng.standard_normal(60) > 0).astype(int)
    a = A.fit_probe(emb(X, y), max_iter=3000)
    b = A.fit_probe(emb(np.vstack([X, X]), np.r_[y, y]), max_iter=3000)
    assert np.allclose(a.weights, b.weights, atol=1e-9) and np.allclose(a.bias, b.bias, atol=1e-9)
    assert np.array_equal(a.predict(X), b.predict(X))


def test_constant_embeddings_equal_naive():
    y_tr = np.array([0] * 30 + [1] * 50 + [2] * 20)
    y_te = np.array([0] * 10 + [1] * 10 + [2] * 10)
    probe = A.fit_probe(emb(np.ones((100, 4)), y_tr), max_iter=3000)
    m = A.eval_probe(probe, emb(np.ones((30, 4)), y_te), 3)
    n = A.naive_baseline(y_tr, y_te, 3)
    assert m.to_dict() == n.to_dict()


def test_probe_errors():
    with pytest.raises(TaskError):
        A.fit_probe(emb(np.ones((3, 2)), [1, 1, 1]))
    with pytest.raises(ValueError):
        emb([[np.nan, 0.0]], [0])


# --- naive -----------------------------------------------------------------------------

def test_naive_balanced_three_class():
    y = np.repeat([0, 1, 2], 50)
    m = A.naive_baseline(y, y)
    assert f"{m.accuracy:.2f}" == "0.33" and f"{m.macro_f1:.2f}" == "0.17"


def test_naive_single_class():
    assert A.naive_baseline([1, 1, 1], [1, 1]).accuracy == 1.0


def test_naive_mode_048():
    y = np.array([2] * 48 + [0] * 30 + [1] * 22)
    assert A.naive_baseline(y, y).accuracy == 0.48


# --- PCA -------------------------------------------------------------------------------

def test_pca_line():
    t = np.linspace(-3, 5, 50)
    p = A.fit_pca(np.column_stack([t, 2 * t]))
    assert np.allclose(p.components[0], np.array([1, 2]) / math.sqrt(5))
    assert math.isclose(p.explained_variance_ratio[0], 1.0)


def test_pca_isotropic(rng):
    p = A.fit_pca(rng.standard_normal((10_000, 2)))
    v = p.explained_variance
    assert abs(v[0] / v[1] - 1) < 0.05


def test_pca_rank2_reconstruction(rng):
    Z = rng.standard_normal((200, 2))
    X = Z @ rng.standard_normal((2, 7)) + rng.standard_normal(7)
    p = A.fit_pca(X)
    assert np.abs(A.reconstruct(p, A.project(p, X)) - X).max() < 1e-8


@given(st.integers(0, 10_000), st.integers(3, 9))
def test_pca_properties(seed, d):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((50, d)) @ rng.standard_normal((d, d))
    p = A.fit_pca(X)
    assert np.abs(p.components @ p.components.T - np.eye(2)).max() < 1e-10
    assert p.explained_variance[0] >= p.explained_variance[1]
    shift = rng.standard_normal(d) * 100
    q = A.fit_pca(X + shift)
    assert np.abs(A.project(q, X + shift) - A.project(p, X)).max() < 1e-8 * max(1.0, np.abs(A.project(p, X)).max())


def test_pca_degenerate():
    with pytest.raises(DegenerateData):
        A.fit_pca(np.ones((5, 3)))
    with pytest.raises(DegenerateData):
        A.fit_pca(np.ones((1, 3)))


# --- suite -----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def suite_inputs():
    models = {"train": M.init(M.ArchConfig(stage_widths=(4, 4, 8, 8), seed=1)),
              "rand": M.init(M.ArchConfig(stage_widths=(4, 4, 8, 8), seed=2))}
    data = {"gadget": E.gen_gadget(E.GadgetConfig(seed=3), 90), "attpc": E.gen_attpc(E.AttpcConfig(seed=3), 90)}
    return models, data


def test_suite_shape_and_determinism(suite_inputs):
    models, data = suite_inputs
    r1 = A.run_probe_suite(models, data, max_iter=500)
    r2 = A.run_probe_suite(models, data, max_iter=500)
    assert r1.to_json() == r2.to_json() and r1.to_csv() == r2.to_csv()
    table = r1.table()
    assert [(r["task"], r["predictor"]) for r in table] == [(t, p) for t in A.TASKS for p in A.PREDICTORS]
    rows = list(csv.reader(io.StringIO(r1.to_csv())))
    assert len(rows) == 1 + 6 and rows[0][2:4] == ["accuracy", "f1_macro"]
    js = json.loads(r1.to_json())
    assert set(js["naive"]) == set(A.TASKS)


def test_suite_pca_export(suite_inputs):
    models, data = suite_inputs
    r = A.run_probe_suite(models, data, tasks=("attpc-tracks",), max_iter=200)
    cell = r.cells[("rand", "attpc-tracks")]
    rows = list(csv.reader(io.StringIO(A.pca_csv(cell))))
    assert rows[0] == ["pca1", "pca2", "label"] and len(rows) - 1 == 90
    assert A.pca_svg(cell, E.GROUP_NAMES).startswith("<svg")


def test_attpc_task_grouping(suite_inputs):
    _, data = suite_inputs
    evs, y = A.task_labels("attpc-tracks", data["attpc"])
    assert np.array_equal(y, [E.track_group(e.n_tracks) for e in evs])
    evs, y = A.task_labels("gadget-3class", data["gadget"])
    assert (y >= 0).all() and len(evs) == sum(e.class3 >= 0 for e in data["gadget"])
    with pytest.raises(TaskError):
        A.task_labels("nope", [])


def test_suite_precomputed_embeddings(rng):
    e = A.EmbeddingSet(rng.standard_normal((60, 3)), np.repeat([0, 1, 2], 20), "gadget-3class", "x")
    r = A.run_probe_suite({}, {}, tasks=("gadget-3class",), embeddings={("x", "gadget-3class"): e}, max_iter=200)
    assert ("x", "gadget-3class") in r.cells and "gadget-3class" in r.naive
