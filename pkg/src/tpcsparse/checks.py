"""Numerical self-checks: finite-difference gradients and brute-force oracles.

Shared by ``tpcsparse selftest`` and the test suite.  Every check returns a
:class:`CheckResult`; nothing here raises on a failed comparison.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from itertools import product

import numpy as np

from . import layers as L
from . import model as M
from .sparse import CUBE3, SparseTensor, batch, build_kernel_map, pool_map
from .train import cross_entropy

FD_STEP = 1e-5
LAYER_TOL = 1e-4
MODEL_TOL = 1e-3
ORACLE_TOL = 1e-6


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float = 0.0
    exact: bool = False  # oracle comparison that must match exactly (tol 0)

    @property
    def passed(self) -> bool:
        if not np.isfinite(self.error):
            return False
        return self.error == 0 if self.exact else self.error < self.tol

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        tol = "exact" if self.exact else f"< {self.tol:.0e}"
        return f"{status}  {self.name:<28} max err {self.error:.3e} ({tol}, {self.seconds:.2f}s)"


def rel_err(analytic, numeric) -> float:
    """``max|a - n| / max(max|a|, max|n|)``; zero when both are identically zero."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    diff = np.abs(a - n).max(initial=0.0)
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)


def numeric_grad(f, x: np.ndarray, h: float = FD_STEP, index=None) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``x`` (perturbed in place).

    ``index`` limits the entries probed (flat indices); others are left at 0.
    """
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in (range(flat.size) if index is None else index):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def random_tensor(rng, n_sites: int, channels: int, box: int = 6, batch_size: int = 2, stride: int = 1):
    """Unique random sites on the ``stride`` lattice with float64 features."""
    pts = rng.integers(-box, box + 1, size=(n_sites, 4))
    pts[:, 0] = rng.integers(0, batch_size, size=n_sites)
    pts[:, 1:] *= stride
    coords = np.unique(pts, axis=0)
    # every batch index present
    extra = np.array([[b, 0, 0, 0] for b in range(batch_size)], dtype=np.int64)
    coords = np.unique(np.vstack([coords, extra]), axis=0)
    feats = rng.standard_normal((len(coords), channels))
    return SparseTensor(coords, feats, stride, batch_size)


def _timed(name, tol, fn, exact=False) -> CheckResult:
    t0 = time.perf_counter()
    err = fn()
    return CheckResult(name, float(err), tol, time.perf_counter() - t0, exact)


# --- per-layer gradient checks -------------------------------------------------------

def _check_conv(rng, k: int, stride: int) -> float:
    x = random_tensor(rng, 40, 3)
    kmap = build_kernel_map(x, k, stride)
    w = rng.standard_normal((kmap.volume, 3, 2))
    r = rng.standard_normal((kmap.n_out, 2))
    feats = x.feats.copy()

    def loss():
        return float((L.sparse_conv_fwd(x.replace(feats), w, kmap).feats * r).sum())

    gx, gw = L.sparse_conv_bwd(x.replace(feats), w, kmap, r)
    return max(rel_err(gx, numeric_grad(loss, feats)), rel_err(gw, numeric_grad(loss, w)))


def _check_bn(rng) -> float:
    x = random_tensor(rng, 30, 3)
    params = L.BNParams.init(3, np.float64)
    params.gamma[:] = rng.uniform(0.5, 1.5, 3)
    params.beta[:] = rng.standard_normal(3)
    feats = x.feats.copy()
    r = rng.standard_normal(feats.shape)

    def loss():
        return float((L.batchnorm_fwd(x.replace(feats), params, "train")[0].feats * r).sum())

    _, cache = L.batchnorm_fwd(x.replace(feats), params, "train")
    gx, gg, gb = L.batchnorm_bwd(cache, r)
    return max(rel_err(gx, numeric_grad(loss, feats)),
               rel_err(gg, numeric_grad(loss, params.gamma)),
               rel_err(gb, numeric_grad(loss, params.beta)))


def _check_elementwise(rng, fwd, bwd) -> float:
    f = rng.standard_normal((20, 3))
    f[np.abs(f) < 1e-3] = 0.5  # keep away from the ReLU kink
    r = rng.standard_normal(f.shape)
    return rel_err(bwd(f, r), numeric_grad(lambda: float((fwd(f) * r).sum()), f))


def _check_dropout(rng) -> float:
    f = rng.standard_normal((20, 3))
    r = rng.standard_normal(f.shape)
    _, mask = L.dropout_fwd(f, 0.5, 3, 0, 7, "train")
    loss = lambda: float((L.dropout_fwd(f, 0.5, 3, 0, 7, "train")[0] * r).sum())  # noqa: E731
    return rel_err(L.dropout_bwd(mask, r), numeric_grad(loss, f))


def _check_maxpool(rng) -> float:
    x = random_tensor(rng, 50, 3)
    kmap = pool_map(x)
    feats = x.feats.copy()
    r = rng.standard_normal((kmap.n_out, 3))

    def loss():
        return float((L.sparse_maxpool_fwd(x.replace(feats), kmap)[0].feats * r).sum())

    _, arg = L.sparse_maxpool_fwd(x.replace(feats), kmap)
    return rel_err(L.sparse_maxpool_bwd(arg, r, len(x)), numeric_grad(loss, feats))


def _check_global_pool(rng) -> float:
    x = random_tensor(rng, 30, 3, batch_size=3)
    feats = x.feats.copy()
    r = rng.standard_normal((3, 3))
    loss = lambda: float((L.global_maxpool_fwd(x.replace(feats))[0] * r).sum())  # noqa: E731
    _, arg = L.global_maxpool_fwd(x.replace(feats))
    return rel_err(L.global_maxpool_bwd(arg, r, len(x)), numeric_grad(loss, feats))


def _check_linear(rng) -> float:
    x = rng.standard_normal((4, 5))
    w = rng.standard_normal((5, 3))
    b = rng.standard_normal(3)
    r = rng.standard_normal((4, 3))
    loss = lambda: float((L.linear_fwd(x, w, b) * r).sum())  # noqa: E731
    gx, gw, gb = L.linear_bwd(x, w, r)
    return max(rel_err(gx, numeric_grad(loss, x)), rel_err(gw, numeric_grad(loss, w)),
               rel_err(gb, numeric_grad(loss, b)))


def _check_cross_entropy(rng) -> float:
    z = rng.standard_normal((5, 3)) * 3
    y = rng.integers(0, 3, 5)
    _, g = cross_entropy(z, y)
    return rel_err(g, numeric_grad(lambda: cross_entropy(z, y)[0], z))


# --- end-to-end ------------------------------------------------------------------------

def micro_model(seed: int = 0):
    """Tiny float64 ResNet14 and a 2-event batch spread wide enough to survive every stride."""
    cfg = M.ArchConfig(stage_widths=(4, 4, 4, 4), dropout_p=0.5, seed=seed, dtype="float64")
    state = M.init(cfg)
    rng = np.random.default_rng([seed, 77])
    for name in state.params:
        if name.endswith(".gamma"):
            state.params[name][:] = rng.uniform(0.5, 1.5, state.params[name].shape)
        elif name.endswith(".beta"):
            state.params[name][:] = 0.1 * rng.standard_normal(state.params[name].shape)
    events = []
    for _ in range(2):
        sites = np.unique(rng.integers(0, 400, size=(60, 3)), axis=0)
        events.append((sites, rng.standard_normal((len(sites), cfg.in_channels))))
    x = batch(events, np.float64)
    y = np.array([0, 1])
    return state, x, y


def _check_model(seed: int = 0, per_tensor: int = 12) -> float:
    state, x, y = micro_model(seed)
    step = 3

    def loss():
        logits, _ = M.forward(state, x, "train", step=step)
        return cross_entropy(logits, y)[0]

    logits, _, tape = M.forward(state, x, "train", step=step, return_tape=True)
    _, g = cross_entropy(logits, y)
    grads = M.backward(state, tape, g)
    rng = np.random.default_rng([seed, 78])
    worst = 0.0
    for name, p in state.params.items():
        an = grads[name].reshape(-1)
        # the largest analytic entry plus a random sample
        idx = np.unique(np.concatenate([[np.argmax(np.abs(an))],
                                        rng.choice(an.size, min(per_tensor, an.size), replace=False)]))
        num = numeric_grad(loss, p, index=idx).reshape(-1)
        worst = max(worst, rel_err(an[idx], num[idx]))
    feats = x.feats
    an = grads["input"].reshape(-1)
    idx = np.unique(np.concatenate([[np.argmax(np.abs(an))], rng.choice(an.size, per_tensor, replace=False)]))
    num = numeric_grad(loss, feats, index=idx).reshape(-1)
    return max(worst, rel_err(an[idx], num[idx]))


# --- oracles -------------------------------------------------------------------------

def dense_conv_oracle(x: SparseTensor, weight: np.ndarray, stride: int, box: int) -> np.ndarray:
    """Zero-padded dense 3D convolution evaluated at the sparse output sites.

    ``x`` must live on the unit lattice inside ``[0, box)^3``.
    """
    B, C = x.batch_size, x.channels
    grid = np.zeros((B, box + 2, box + 2, box + 2, C))
    b, i, j, k = x.coords.T
    grid[b, i + 1, j + 1, k + 1] = x.feats
    out_coords = np.unique(np.column_stack([b, (x.coords[:, 1:] // stride) * stride]), axis=0)
    ob, oi, oj, ok = out_coords.T
    out = np.zeros((len(out_coords), weight.shape[2]))
    for o, (di, dj, dk) in enumerate(CUBE3):
        out += grid[ob, oi + 1 + di, oj + 1 + dj, ok + 1 + dk] @ weight[o]
    return out_coords, out


def _check_dense(seed: int, n_events: int = 100, box: int = 7) -> float:
    rng = np.random.default_rng([seed, 91])
    worst = 0.0
    for e in range(n_events):
        n = int(rng.integers(1, 60))
        sites = np.unique(rng.integers(0, box, size=(n, 3)), axis=0)
        x = batch([(sites, rng.standard_normal((len(sites), 3)))], np.float64)
        w = rng.standard_normal((27, 3, 4))
        stride = (1, 2, 3)[e % 3]
        y = L.sparse_conv_fwd(x, w, build_kernel_map(x, 3, stride))
        oc, ref = dense_conv_oracle(x, w, stride, box)
        if not np.array_equal(oc, y.coords):
            return np.inf
        worst = max(worst, float(np.abs(ref - y.feats).max()))
    return worst


def brute_force_pairs(in_coords, out_coords, offsets) -> set:
    """All ``(offset, in_row, out_row)`` with ``in = out + offset``, by exhaustive search."""
    found = set()
    for o, off in enumerate(offsets):
        for q, oc in enumerate(out_coords):
            target = (oc[0], oc[1] + off[0], oc[2] + off[1], oc[3] + off[2])
            for p, ic in enumerate(in_coords):
                if tuple(ic) == target:
                    found.add((o, p, q))
    return found


def kmap_pairs(kmap) -> set:
    return {(o, int(p), int(q)) for o in range(kmap.volume) for p, q in zip(*kmap.pairs(o))}


def _check_kmap(seed: int, trials: int = 12) -> float:
    rng = np.random.default_rng([seed, 92])
    mismatches = 0
    for t in range(trials):
        stride_in = (1, 2)[t % 2]
        x = random_tensor(rng, int(rng.integers(1, 200)), 1, box=5, stride=stride_in)
        for k, s in ((3, 1), (3, 2), (3, 3), (1, 2)):
            km = build_kernel_map(x, k, s)
            offs = km.offsets.tolist()
            mismatches += kmap_pairs(km) != brute_force_pairs(x.coords.tolist(), km.out_coords.tolist(), offs)
        km = pool_map(x)
        mismatches += kmap_pairs(km) != brute_force_pairs(x.coords.tolist(), km.out_coords.tolist(),
                                                          km.offsets.tolist())
    return float(mismatches)


# --- fault injection -------------------------------------------------------------------

FAULTS = ("conv", "bn", "relu", "gelu", "maxpool", "linear")


@contextlib.contextmanager
def corrupted_backward(which: str | None):
    """Temporarily scale one layer's input gradient by 1.01 (negative control)."""
    if which is None:
        yield
        return
    if which not in FAULTS:
        raise ValueError(f"unknown fault {which!r}; expected one of {FAULTS}")
    names = {"conv": "sparse_conv_bwd", "bn": "batchnorm_bwd", "relu": "relu_bwd", "gelu": "gelu_bwd",
             "maxpool": "sparse_maxpool_bwd", "linear": "linear_bwd"}
    attr = names[which]
    orig = getattr(L, attr)

    def bad(*args, **kw):
        out = orig(*args, **kw)
        if isinstance(out, tuple):
            return (out[0] * 1.01,) + tuple(out[1:])
        return out * 1.01

    setattr(L, attr, bad)
    try:
        yield
    finally:
        setattr(L, attr, orig)


def layer_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng([seed, 90])
    out = [_timed(f"conv k={k} stride={s}", LAYER_TOL, lambda k=k, s=s: _check_conv(rng, k, s))
           for k, s in product((3,), (1, 2, 3))]
    out.append(_timed("conv k=1 stride=2", LAYER_TOL, lambda: _check_conv(rng, 1, 2)))
    out += [
        _timed("batchnorm (train)", LAYER_TOL, lambda: _check_bn(rng)),
        _timed("relu", LAYER_TOL, lambda: _check_elementwise(rng, L.relu_fwd, L.relu_bwd)),
        _timed("gelu", LAYER_TOL, lambda: _check_elementwise(rng, L.gelu_fwd, L.gelu_bwd)),
        _timed("dropout", LAYER_TOL, lambda: _check_dropout(rng)),
        _timed("sparse maxpool", LAYER_TOL, lambda: _check_maxpool(rng)),
        _timed("global maxpool", LAYER_TOL, lambda: _check_global_pool(rng)),
        _timed("linear", LAYER_TOL, lambda: _check_linear(rng)),
        _timed("cross-entropy", LAYER_TOL, lambda: _check_cross_entropy(rng)),
    ]
    return out


def run_all(seed: int = 0, fault: str | None = None) -> list[CheckResult]:
    with corrupted_backward(fault):
        results = layer_checks(seed)
        results.append(_timed("end-to-end micro-model", MODEL_TOL, lambda: _check_model(seed)))
    results.append(_timed("dense conv oracle", ORACLE_TOL, lambda: _check_dense(seed)))
    results.append(_timed("kernel map brute force", 0.0, lambda: _check_kmap(seed), exact=True))
    return results
