"""``tpcsparse`` command line: gen, train, embed, probe, selftest.

Configuration comes from three layers, highest first: command-line flags
(including ``--set section.key=value``), an INI file given with
``--config``, and built-in defaults.  The resolved values are printed at
startup and written next to every output as ``<output>.config.ini``.

Exit codes: 0 ok, 1 selftest failure, 2 usage/config/task error, 3 I/O or
file format error, 4 numerical failure, 5 checkpoint error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import analysis as A
from . import checks
from . import events as E
from . import model as M
from . import train as T
from .errors import (CheckpointError, ConfigError, FormatError, LabelError, NumericsError, TaskError,
                     TpcSparseError, UsageError)

log = logging.getLogger("tpcsparse")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO, EXIT_NUMERICS, EXIT_CHECKPOINT = 0, 1, 2, 3, 4, 5
DATA_ENV = "TPCSPARSE_DATA"


@dataclass
class ProbeConfig:
    C: float = 1.0
    max_iter: int = 20_000
    test_fraction: float = 0.2


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 0  # 0: all available cores
    val_fraction: float = 0.2
    profile: str = "small"


SECTIONS = {
    "run": RunConfig,
    "gadget": E.GadgetConfig,
    "attpc": E.AttpcConfig,
    "arch": M.ArchConfig,
    "optim": T.OptimConfig,
    "features": E.FeatureConfig,
    "probe": ProbeConfig,
}
# the run seed feeds every section that has one
_SEEDED = ("gadget", "attpc", "arch", "optim")


# --- value parsing ------------------------------------------------------------------

def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, E.Band):
        return f"{value.slope!r}, {value.intercept!r}, {value.halfwidth!r}"
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, default, key: str):
    text = text.strip()
    try:
        if isinstance(default, E.Band):
            slope, intercept, half = (float(v) for v in text.split(","))
            return E.Band(slope, intercept, half)
        if text.lower() == "none":
            if default is None or key in ("curvature_radius_mm", "fixed_direction"):
                return None
        if default is None:
            return tuple(float(v) for v in text.split(","))
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in text.split(","))
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {text!r}") from None


class Settings:
    """Section/key values with the layer each came from (default, file, cli)."""

    def __init__(self):
        self.values: dict[str, dict] = {}
        self.source: dict[tuple[str, str], str] = {}
        for sec, cls in SECTIONS.items():
            inst = cls()
            self.values[sec] = {f.name: getattr(inst, f.name) for f in fields(cls)}
            for f in fields(cls):
                self.source[(sec, f.name)] = "default"
        self.values["arch"]["stage_widths"] = M.SMALL_WIDTHS

    def set(self, section: str, key: str, text, origin: str):
        if section not in self.values:
            raise ConfigError(f"unknown config section [{section}]; known: {sorted(self.values)}")
        if key not in self.values[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]; known: {sorted(self.values[section])}")
        current = self.values[section][key]
        if isinstance(text, str):
            default = getattr(SECTIONS[section](), key)
            value = _parse(text, default if current is None else current, key)
        else:
            value = text
        self.values[section][key] = value
        self.source[(section, key)] = origin

    def load_file(self, path):
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            with open(path, encoding="utf-8") as f:
                cp.read_file(f)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        for sec in cp.sections():
            for key, text in cp.items(sec):
                self.set(sec, key, text, "file")

    def build(self, section: str):
        vals = dict(self.values[section])
        if section in _SEEDED:
            vals["seed"] = self.values["run"]["seed"]
        try:
            obj = SECTIONS[section](**vals)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{section}] {e}") from None
        if hasattr(obj, "validate"):
            obj.validate()
        return obj

    def ini(self, sections) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for sec in sections:
            # section seeds are derived from [run] seed, so the file stays loadable
            cp[sec] = {k: _format(v) for k, v in self.values[sec].items() if not (sec in _SEEDED and k == "seed")}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def describe(self, sections) -> str:
        lines = []
        for sec in sections:
            lines.append(f"[{sec}]")
            for k, v in self.values[sec].items():
                lines.append(f"  {k} = {_format(v)}  ({self.source[(sec, k)]})")
        return "\n".join(lines)


# --- helpers ----------------------------------------------------------------------

def _write_text(path, text: str) -> None:
    M.atomic_write(path, text.encode("utf-8"))


def _snapshot(settings: Settings, sections, out, args) -> None:
    header = [f"# tpcsparse {args.command}", "# " + " ".join(args.argv)]
    _write_text(f"{out}.config.ini", "\n".join(header) + "\n" + settings.ini(sections))


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _require_parent(path) -> Path:
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {parent}")
    return p


def _data_dir(args) -> Path:
    return Path(args.data_dir or os.environ.get(DATA_ENV) or ".")


def _threads(settings: Settings) -> int:
    n = settings.values["run"]["threads"]
    return n if n and n > 0 else (os.cpu_count() or 1)


def _tagged(items, what: str) -> dict:
    out = {}
    for item in items or []:
        tag, sep, path = item.partition("=")
        if not sep or not tag or not path:
            raise UsageError(f"{what} must look like TAG=PATH, got {item!r}")
        if tag in out:
            raise UsageError(f"duplicate {what} tag {tag!r}")
        out[tag] = path
    return out


# --- gen --------------------------------------------------------------------------

def gen_summary(detector: str, events) -> str:
    n_pts = sum(len(e.points) for e in events)
    lines = [f"{len(events)} {detector} events, {n_pts} points"]
    if detector == "gadget":
        c3 = E.labels_of(events, "class3")
        gate = E.labels_of(events, "gate")
        mix = ", ".join(f"{name} {int(np.sum(c3 == i))}" for i, name in enumerate(E.CLASS_NAMES))
        lines.append(f"class mix: {mix}, continuum {int(np.sum(c3 < 0))}")
        lines.append(f"gate labels: proton {int(np.sum(gate == E.PROTON))}, alpha {int(np.sum(gate == E.ALPHA))}, "
                     f"excluded {int(np.sum(gate == E.EXCLUDED))}")
    else:
        nt = E.labels_of(events, "n_tracks")
        grp = E.labels_of(events, "group")
        lines.append("tracks: " + ", ".join(f"{k}:{int(np.sum(nt == k))}" for k in range(6)))
        lines.append("groups: " + ", ".join(f"{name} {int(np.sum(grp == i))}" for i, name in enumerate(E.GROUP_NAMES)))
    return "\n".join(lines)


def cmd_gen(args, settings: Settings) -> int:
    if args.n < 1:
        raise UsageError("-n must be at least 1")
    det = args.detector
    out = _require_parent(args.out or _data_dir(args) / f"{det}.tpce")
    cfg = settings.build(det)
    threads = _threads(settings)
    gen = E.gen_gadget if det == "gadget" else E.gen_attpc
    events = gen(cfg, args.n, threads=threads)
    E.write_events(out, events, det)
    if args.csv:
        E.write_csv(_require_parent(args.csv), events)
    _snapshot(settings, ["run", det], out, args)
    print(gen_summary(det, events))
    print(f"wrote {out}")
    return EXIT_OK


# --- train ------------------------------------------------------------------------

def cmd_train(args, settings: Settings) -> int:
    out = _require_parent(args.out)
    optim = settings.build("optim")
    arch = settings.build("arch")
    fcfg = settings.build("features")
    run = settings.build("run")
    threads = _threads(settings)
    if args.init == "checkpoint":
        if not args.init_from:
            raise UsageError("--init checkpoint needs --from CHECKPOINT")
        state = M.load_checkpoint(args.init_from)
        fcfg = E.FeatureConfig.from_dict(state.meta.get("features"))
    else:
        state = M.init(arch)
    state.meta["features"] = fcfg.to_dict()
    sections = ["run", "arch", "optim", "features"]

    if optim.epochs == 0:
        state.meta["init"] = args.init
        M.save_checkpoint(state, out)
        _write_text(f"{out}.history.csv", T.history_csv([]))
        _snapshot(settings, sections, out, args)
        print(f"wrote untrained checkpoint {out}")
        return EXIT_OK

    data = _require_file(args.data or _data_dir(args) / "gadget.tpce")
    if E.file_detector(data) != "gadget":
        raise ConfigError(f"{data} holds {E.file_detector(data)} events; pretraining needs gadget events")
    events = E.read_events(data)
    labels = E.labels_of(events, "gate")
    keep = np.flatnonzero(labels >= 0)
    print(f"{len(events)} events, {len(events) - len(keep)} excluded by gating, {len(keep)} used")
    if len(keep) == 0:
        raise LabelError("no gated events to train on")
    events = [events[i] for i in keep]
    labels = labels[keep]
    tensors = E.prepare(events, fcfg, threads)
    tr, va = T.stratified_split(labels, run.val_fraction, run.seed)
    if len(va) == 0:
        raise ConfigError("validation split is empty; use more events or a larger val_fraction")
    t0 = time.perf_counter()
    best, history = T.train_loop(state, ([tensors[i] for i in tr], labels[tr]),
                                 ([tensors[i] for i in va], labels[va]), optim)
    best.meta["init"] = args.init
    M.save_checkpoint(best, out)
    _write_text(f"{out}.history.csv", T.history_csv(history))
    _write_text(f"{out}.history.json", T.history_json(history, best))
    _snapshot(settings, sections, out, args)
    last = history[-1]
    print(f"trained {len(history)} epochs in {time.perf_counter() - t0:.1f}s; "
          f"best epoch {best.meta['best_epoch']} val loss {best.meta['val_loss']:.4f} "
          f"accuracy {best.meta['val_accuracy']:.4f} macro-F1 {best.meta['val_macro_f1']:.4f}")
    print(f"final epoch: val loss {last.val_loss:.4f} accuracy {last.accuracy:.4f} macro-F1 {last.macro_f1:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


# --- embed ------------------------------------------------------------------------

LABEL_COLUMNS = {"gadget": ("gate", "class3"), "attpc": ("n_tracks", "group")}


def embeddings_csv(event_ids, X, label_cols: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["event_id"] + [f"e{i}" for i in range(X.shape[1])] + list(label_cols))
    cols = list(label_cols.values())
    for r, eid in enumerate(event_ids):
        w.writerow([int(eid)] + [repr(float(v)) for v in X[r]] + [int(c[r]) for c in cols])
    return buf.getvalue()


def read_embeddings(path):
    """Returns ``(detector, event_ids, X, {label column: values})``."""
    try:
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: not a text embeddings file ({e})") from None
    if not rows or rows[0][:1] != ["event_id"]:
        raise FormatError(f"{path}: missing embeddings header")
    head = rows[0]
    for det, cols in LABEL_COLUMNS.items():
        if tuple(head[-2:]) == cols:
            break
    else:
        raise FormatError(f"{path}: unknown label columns {head[-2:]}")
    body = rows[1:]
    try:
        data = np.array(body, dtype=np.float64).reshape(len(body), len(head))
    except ValueError:
        raise FormatError(f"{path}: malformed embeddings rows") from None
    labels = {c: data[:, len(head) - 2 + i].astype(np.int64) for i, c in enumerate(cols)}
    return det, data[:, 0].astype(np.int64), data[:, 1:-2], labels


def cmd_embed(args, settings: Settings) -> int:
    ckpt = _require_file(args.checkpoint)
    data = _require_file(args.data or _data_dir(args) / "gadget.tpce")
    out = _require_parent(args.out)
    state = M.load_checkpoint(ckpt)
    fcfg = E.FeatureConfig.from_dict(state.meta.get("features"))
    threads = _threads(settings)
    det = E.file_detector(data)
    events = E.read_events(data)
    X = M.embed(state, E.prepare(events, fcfg, threads), threads=threads)
    labels = {c: E.labels_of(events, c) for c in LABEL_COLUMNS[det]}
    ids = [e.event_id for e in events]
    if str(out).endswith(".npz"):
        buf = io.BytesIO()
        np.savez(buf, event_id=np.asarray(ids, np.int64), X=X, **labels)
        M.atomic_write(out, buf.getvalue())
    else:
        _write_text(out, embeddings_csv(ids, X, labels))
    print(f"embedded {len(events)} {det} events into {X.shape[1]} dims; wrote {out}")
    return EXIT_OK


# --- probe ------------------------------------------------------------------------

def _embedding_set(path, tag: str, task: str) -> A.EmbeddingSet:
    det, ids, X, labels = read_embeddings(_require_file(path))
    if det != A.TASK_DETECTOR[task]:
        raise TaskError(f"{path} holds {det} embeddings; task {task} needs {A.TASK_DETECTOR[task]}")
    if task == "gadget-3class":
        keep = labels["class3"] >= 0
        return A.EmbeddingSet(X[keep], labels["class3"][keep], task, tag, ids[keep])
    return A.EmbeddingSet(X, labels["group"], task, tag, ids)


def cmd_probe(args, settings: Settings) -> int:
    models = _tagged(args.model, "--model")
    emb_files = _tagged(args.embeddings, "--embeddings")
    if not models and not emb_files:
        raise UsageError("give at least one --model TAG=CHECKPOINT or --embeddings TAG=FILE")
    tasks = args.task or list(A.TASKS)
    for t in tasks:
        if t not in A.TASKS:
            raise TaskError(f"unknown task {t!r}; expected one of {A.TASKS}")
    out = Path(args.out)
    if not out.is_dir():
        if not out.parent.is_dir():
            raise FileNotFoundError(f"output directory parent does not exist: {out.parent}")
        out.mkdir()
    pcfg = settings.build("probe")
    run = settings.build("run")
    threads = _threads(settings)

    states = {tag: M.load_checkpoint(_require_file(p)) for tag, p in models.items()}
    datasets = {}
    need = {A.TASK_DETECTOR[t] for t in tasks}
    for det in sorted(need):
        path = getattr(args, det)
        if path is None and states:
            default = _data_dir(args) / f"{det}.tpce"
            path = default if default.is_file() else None
        if path is not None:
            p = _require_file(path)
            if E.file_detector(p) != det:
                raise ConfigError(f"{p} holds {E.file_detector(p)} events, expected {det}")
            datasets[det] = E.read_events(p)
    if states:
        missing = sorted(need - set(datasets))
        if missing:
            raise UsageError(f"checkpoints given but no event file for {', '.join(missing)} "
                             f"(use --{missing[0]} FILE)")
    embeddings = {(tag, t): _embedding_set(p, tag, t) for tag, p in emb_files.items() for t in tasks}
    report = A.run_probe_suite(states, datasets, tasks, C=pcfg.C, seed=run.seed, max_iter=pcfg.max_iter,
                               threads=threads, embeddings=embeddings,
                               test_fraction=pcfg.test_fraction)
    _write_text(out / "report.json", report.to_json())
    _write_text(out / "report.csv", report.to_csv())
    for (tag, task), cell in sorted(report.cells.items()):
        names = E.CLASS_NAMES if task == "gadget-3class" else E.GROUP_NAMES
        _write_text(out / f"pca_{tag}_{task}.csv", A.pca_csv(cell))
        _write_text(out / f"pca_{tag}_{task}.svg", A.pca_svg(cell, names))
    _snapshot(settings, ["run", "probe"], out / "report", args)
    print(format_table(report))
    print(f"wrote {out}")
    return EXIT_OK


def format_table(report: A.SuiteReport) -> str:
    lines = [f"{'task':<15} {'predictor':<9} {'accuracy':>9} {'F1 macro':>9} {'F1 wtd':>9}"]
    for r in report.table():
        lines.append(f"{r['task']:<15} {r['predictor']:<9} {r['accuracy']:>9.3f} {r['f1_macro']:>9.3f} "
                     f"{r['f1_weighted']:>9.3f}")
    return "\n".join(lines)


# --- selftest ---------------------------------------------------------------------

def cmd_selftest(args, settings: Settings) -> int:
    t0 = time.perf_counter()
    results = checks.run_all(settings.values["run"]["seed"], fault=args.fault)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    if failed:
        print("FAILED: " + "; ".join(failed), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (sections: " + ", ".join(SECTIONS) + ")")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="master seed [run] seed")
    common.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    common.add_argument("--data-dir", help=f"default data directory (env {DATA_ENV}, else cwd)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("-q", "--quiet", action="store_true", help="suppress the startup config dump")

    p = argparse.ArgumentParser(prog="tpcsparse", description="Sparse 3D CNNs for TPC events.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic event file")
    g.add_argument("detector", choices=("gadget", "attpc"))
    g.add_argument("-n", type=int, required=True, help="number of events")
    g.add_argument("-o", "--out", help="output event file (default: DATA_DIR/<detector>.tpce)")
    g.add_argument("--csv", help="also write the debug CSV (points) and its .labels.csv sidecar")

    t = sub.add_parser("train", parents=[common], help="pretrain on gated gadget events")
    t.add_argument("--data", help="gadget event file (default: DATA_DIR/gadget.tpce)")
    t.add_argument("-o", "--out", required=True, help="checkpoint path")
    t.add_argument("--init", choices=("rand", "checkpoint"), default="rand")
    t.add_argument("--from", dest="init_from", help="checkpoint to start from with --init checkpoint")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float, help="initial learning rate [optim] lr0")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--profile", choices=("small", "full"), help="stage widths (16,32,64,128) or (64,128,256,512)")
    t.add_argument("--dtype", choices=("float32", "float64"))

    e = sub.add_parser("embed", parents=[common], help="penultimate-layer embeddings")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="event file (default: DATA_DIR/gadget.tpce)")
    e.add_argument("-o", "--out", required=True, help="CSV (or .npz) output")

    pr = sub.add_parser("probe", parents=[common], help="linear probes, naive baseline and PCA")
    pr.add_argument("--model", action="append", metavar="TAG=CHECKPOINT")
    pr.add_argument("--embeddings", action="append", metavar="TAG=CSV", help="precomputed embeddings from `embed`")
    pr.add_argument("--gadget", help="gadget event file for gadget-3class")
    pr.add_argument("--attpc", help="attpc event file for attpc-tracks")
    pr.add_argument("--task", action="append", help=f"one of {', '.join(A.TASKS)} (repeatable; default all)")
    pr.add_argument("-o", "--out", required=True, help="report directory")

    s = sub.add_parser("selftest", parents=[common], help="gradient and oracle checks")
    s.add_argument("--fault", choices=checks.FAULTS, help=argparse.SUPPRESS)
    return p


def resolve(args) -> Settings:
    settings = Settings()
    if args.config:
        settings.load_file(_require_file(args.config))
    for item in args.set:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        settings.set(section.strip(), name.strip(), value, "cli")
    direct = {("run", "seed"): args.seed, ("run", "threads"): args.threads}
    if args.command == "train":
        direct.update({("optim", "epochs"): args.epochs, ("optim", "lr0"): args.lr,
                       ("optim", "batch_size"): args.batch_size, ("arch", "dtype"): args.dtype,
                       ("run", "profile"): args.profile})
    for (sec, key), value in direct.items():
        if value is not None:
            settings.set(sec, key, value, "cli")
    if settings.source[("arch", "stage_widths")] == "default":
        profile = settings.values["run"]["profile"]
        if profile not in ("small", "full"):
            raise ConfigError(f"[run] profile must be small or full, got {profile!r}")
        settings.values["arch"]["stage_widths"] = M.SMALL_WIDTHS if profile == "small" else M.DEFAULT_WIDTHS
    for sec in _SEEDED:
        if settings.source[(sec, "seed")] != "default":
            raise ConfigError(f"set the seed in [run] (or --seed), not in [{sec}]")
        settings.values[sec]["seed"] = settings.values["run"]["seed"]
        settings.source[(sec, "seed")] = "run.seed"
    return settings


_SHOWN = {"gen": lambda a: ["run", a.detector], "train": lambda a: ["run", "arch", "optim", "features"],
          "embed": lambda a: ["run"], "probe": lambda a: ["run", "probe"], "selftest": lambda a: ["run"]}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)
    args.argv = argv
    if args.verbose:
        level = logging.DEBUG if args.verbose > 1 else logging.INFO
    else:
        level = logging.INFO if args.command == "train" else logging.WARNING
    logging.basicConfig(level=level, format="%(message)s", stream=sys.stderr)
    handlers = {"gen": cmd_gen, "train": cmd_train, "embed": cmd_embed, "probe": cmd_probe,
                "selftest": cmd_selftest}
    try:
        settings = resolve(args)
        if not args.quiet:
            print("configuration (cli > file > default):\n" + settings.describe(_SHOWN[args.command](args)),
                  file=sys.stderr)
        # Worker threads split work by event or batch; BLAS stays single-threaded
        # so results are bit-identical for any --threads value.
        with threadpool_limits(limits=1):
            return handlers[args.command](args, settings)
    except (UsageError, ConfigError, TaskError, LabelError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NumericsError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERICS
    except (FormatError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except TpcSparseError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
