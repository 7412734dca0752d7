"""Synthetic GADGET-II-like and AT-TPC-like events, range-energy gating, event files.

Lengths are in mm.  GADGET point coordinates are mm times ``units_per_mm``
and AT-TPC coordinates are mm, so a voxel size of 0.05 gives 10^2 to 10^3
sites per event.  Energies and charges are in keV.  The simulator targets event topology (range-energy
bands, Bragg-like charge ramp, track multiplicity), not detector physics.
"""

from __future__ import annotations

import csv
import os
import struct
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np

from .errors import ConfigError, FormatError
from .sparse import SparseTensor, batch, quantize

PROTON, ALPHA = 0, 1
EXCLUDED = -1
CONTINUUM = -1
GADGET, ATTPC = 0, 1
DETECTORS = {"gadget": GADGET, "attpc": ATTPC}
CLASS_NAMES = ("p800", "p1600", "a2000")
GROUP_NAMES = ("0-2 tracks", "3 tracks", "4-5 tracks")


@dataclass
class Band:
    """Range-energy band: ``range_mm = slope * E_keV + intercept`` +/- ``halfwidth``."""

    slope: float
    intercept: float
    halfwidth: float

    def center(self, energy_kev):
        return self.slope * np.asarray(energy_kev) + self.intercept

    def contains(self, range_mm, energy_kev):
        return np.abs(np.asarray(range_mm) - self.center(energy_kev)) <= self.halfwidth


@dataclass
class GadgetConfig:
    seed: int = 0
    units_per_mm: float = 2.0  # coordinate units per mm of track
    vertex_radius_mm: float = 15.0
    vertex_half_length_mm: float = 15.0
    class_mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    class_energy_kev: tuple[float, float, float] = (800.0, 1600.0, 2000.0)
    energy_resolution: float = 0.03
    continuum_fraction: float = 0.1
    continuum_energy_kev: tuple[float, float] = (300.0, 500.0)
    proton_band: Band = field(default_factory=lambda: Band(0.024, -5.0, 1.5))
    alpha_band: Band = field(default_factory=lambda: Band(0.004, 2.0, 1.0))
    range_sigma_frac: float = 1 / 3
    points_per_mm: float = 3.0
    alpha_density_factor: float = 12.0
    bragg_amplitude: float = 4.0
    bragg_power: float = 3.0
    gain_sigma: float = 0.15
    charge_noise: float = 0.1
    jitter_mm: float = 0.7
    noise_rate: float = 3.0
    noise_charge_kev: float = 20.0
    fixed_direction: tuple[float, float, float] | None = None

    def validate(self) -> None:
        mix = np.asarray(self.class_mix, dtype=float)
        if len(mix) != 3 or np.any(mix < 0) or not np.isclose(mix.sum(), 1.0):
            raise ConfigError("class_mix must be three non-negative weights summing to 1")
        if not 0.0 <= self.continuum_fraction < 1.0:
            raise ConfigError("continuum_fraction must lie in [0, 1)")
        for b in (self.proton_band, self.alpha_band):
            if b.halfwidth <= 0:
                raise ConfigError("band halfwidth must be positive")
        e_lo = min(self.continuum_energy_kev[0], min(self.class_energy_kev) * (1 - 4 * self.energy_resolution))
        for name, b in (("proton", self.proton_band), ("alpha", self.alpha_band)):
            if b.center(e_lo) - b.halfwidth <= 0:
                raise ConfigError(f"{name} band gives non-positive ranges at {e_lo:.0f} keV")
        if self.points_per_mm <= 0 or self.alpha_density_factor <= 0:
            raise ConfigError("point densities must be positive")
        if min(self.jitter_mm, self.noise_rate, self.charge_noise, self.gain_sigma) < 0:
            raise ConfigError("noise parameters must be non-negative")


@dataclass
class AttpcConfig:
    seed: int = 0
    radius_mm: float = 60.0
    half_length_mm: float = 100.0
    vertex_z_mm: tuple[float, float] = (-60.0, 60.0)
    beam_spread_mm: float = 2.0
    max_tracks: int = 5
    track_length_mm: tuple[float, float] = (8.0, 30.0)
    curvature_radius_mm: tuple[float, float] | None = (15.0, 75.0)
    points_per_mm: float = 8.0
    charge_kev: float = 5.0
    charge_noise: float = 0.2
    jitter_mm: float = 0.7
    noise_rate: float = 4.0
    noise_charge_kev: float = 10.0

    def validate(self) -> None:
        lo, hi = self.track_length_mm
        if not 0 < lo <= hi:
            raise ConfigError("track_length_mm must be an increasing positive pair")
        if self.curvature_radius_mm is not None:
            r_lo, r_hi = self.curvature_radius_mm
            if not 0 < r_lo <= r_hi:
                raise ConfigError("curvature_radius_mm must be an increasing positive pair")
        if not 0 <= self.max_tracks <= 5:
            raise ConfigError("max_tracks must lie in [0, 5]")
        if self.points_per_mm <= 0:
            raise ConfigError("points_per_mm must be positive")


@dataclass(eq=False)
class GadgetEvent:
    points: np.ndarray  # (n, 4) float32 x, y, z, q
    particle: int
    class3: int
    energy_kev: float
    range_mm: float
    gate_label: int
    event_id: int = 0

    detector = "gadget"

    def label_block(self):
        return (self.particle, self.class3, self.gate_label, 0), (self.energy_kev, self.range_mm)


@dataclass(eq=False)
class AttpcEvent:
    points: np.ndarray
    n_tracks: int
    event_id: int = 0

    detector = "attpc"

    @property
    def group_label(self) -> int:
        return track_group(self.n_tracks)

    def label_block(self):
        return (self.n_tracks, self.group_label, 0, 0), (0.0, 0.0)


def track_group(n_tracks: int) -> int:
    """{0,1,2} -> 0, {3} -> 1, {4,5} -> 2."""
    if n_tracks <= 2:
        return 0
    return 1 if n_tracks == 3 else 2


def gate(range_mm, energy_kev, proton_band: Band, alpha_band: Band):
    """Proton/alpha label where exactly one band holds the point, else EXCLUDED."""
    in_p = proton_band.contains(range_mm, energy_kev)
    in_a = alpha_band.contains(range_mm, energy_kev)
    return np.where(in_p & ~in_a, PROTON, np.where(in_a & ~in_p, ALPHA, EXCLUDED)).astype(np.int64)


def gate_labels(events, proton_band: Band, alpha_band: Band) -> np.ndarray:
    r = np.array([e.range_mm for e in events], dtype=np.float64)
    e = np.array([e.energy_kev for e in events], dtype=np.float64)
    return gate(r, e, proton_band, alpha_band)


# --- generators ------------------------------------------------------------------

def _isotropic(rng) -> np.ndarray:
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def _noise_hits(rng, count, radius, half_length, q_max):
    r = radius * np.sqrt(rng.random(count))
    phi = rng.random(count) * 2 * np.pi
    z = (rng.random(count) * 2 - 1) * half_length
    q = rng.random(count) * q_max
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z, q])


def _gadget_one(cfg: GadgetConfig, index: int) -> GadgetEvent:
    rng = np.random.default_rng([cfg.seed, GADGET, index])
    if rng.random() < cfg.continuum_fraction:
        class3 = CONTINUUM
        particle = PROTON if rng.random() < 0.5 else ALPHA
        energy = rng.uniform(*cfg.continuum_energy_kev)
    else:
        class3 = int(rng.choice(3, p=np.asarray(cfg.class_mix, dtype=float)))
        particle = ALPHA if class3 == 2 else PROTON
        energy = cfg.class_energy_kev[class3] * (1 + cfg.energy_resolution * rng.standard_normal())
    band = cfg.alpha_band if particle == ALPHA else cfg.proton_band
    # truncated at the band edge so every event lies inside its own band
    dev = np.clip(rng.standard_normal() * band.halfwidth * cfg.range_sigma_frac,
                  -0.999 * band.halfwidth, 0.999 * band.halfwidth)
    range_mm = float(max(band.center(energy) + dev, 0.05))
    u = cfg.units_per_mm
    length = range_mm * u

    r = cfg.vertex_radius_mm * u * np.sqrt(rng.random())
    phi = rng.random() * 2 * np.pi
    vertex = np.array([r * np.cos(phi), r * np.sin(phi), rng.uniform(-1, 1) * cfg.vertex_half_length_mm * u])
    direction = (np.asarray(cfg.fixed_direction, float) / np.linalg.norm(cfg.fixed_direction)
                 if cfg.fixed_direction is not None else _isotropic(rng))

    density = cfg.points_per_mm * (cfg.alpha_density_factor if particle == ALPHA else 1.0)
    n = max(2, int(round(density * range_mm * u)))
    s = np.linspace(0.0, 1.0, n)
    xyz = vertex + np.outer(s * length, direction)
    if cfg.jitter_mm > 0:
        xyz = xyz + rng.standard_normal(xyz.shape) * cfg.jitter_mm * u
    profile = 1.0 + cfg.bragg_amplitude * s**cfg.bragg_power
    q = energy * profile / profile.sum()
    gain = np.exp(cfg.gain_sigma * rng.standard_normal()) if cfg.gain_sigma > 0 else 1.0
    q = q * gain
    if cfg.charge_noise > 0:
        q = np.maximum(q * (1 + cfg.charge_noise * rng.standard_normal(n)), 0.0)
    pts = np.column_stack([xyz, q])
    n_noise = rng.poisson(cfg.noise_rate) if cfg.noise_rate > 0 else 0
    if n_noise:
        noise = _noise_hits(rng, n_noise, cfg.vertex_radius_mm * u + length, cfg.vertex_half_length_mm * u + length,
                            cfg.noise_charge_kev)
        pts = np.vstack([pts, noise])
    label = int(gate(range_mm, energy, cfg.proton_band, cfg.alpha_band))
    return GadgetEvent(pts.astype(np.float32), particle, class3, float(energy), range_mm, label, index)


def _helix(vertex, direction, length, curvature, n):
    """Points along a helix with field along z; ``curvature`` is 1/radius of the transverse circle."""
    s = np.linspace(0.0, length, n)
    sin_t = np.hypot(direction[0], direction[1])
    alpha = np.arctan2(direction[1], direction[0])
    st = s * sin_t
    if curvature == 0.0:
        x = vertex[0] + st * np.cos(alpha)
        y = vertex[1] + st * np.sin(alpha)
    else:
        phase = curvature * st
        x = vertex[0] + (np.sin(alpha + phase) - np.sin(alpha)) / curvature
        y = vertex[1] - (np.cos(alpha + phase) - np.cos(alpha)) / curvature
    z = vertex[2] + s * direction[2]
    return np.column_stack([x, y, z])


def _attpc_one(cfg: AttpcConfig, index: int) -> AttpcEvent:
    rng = np.random.default_rng([cfg.seed, ATTPC, index])
    n_tracks = int(rng.integers(0, cfg.max_tracks + 1))
    vertex = np.array([rng.normal(0, cfg.beam_spread_mm), rng.normal(0, cfg.beam_spread_mm),
                       rng.uniform(*cfg.vertex_z_mm)])
    parts = []
    for _ in range(n_tracks):
        direction = _isotropic(rng)
        length = rng.uniform(*cfg.track_length_mm)
        if cfg.curvature_radius_mm is None:
            curvature = 0.0
        else:
            curvature = (1.0 if rng.random() < 0.5 else -1.0) / rng.uniform(*cfg.curvature_radius_mm)
        n = max(2, int(round(cfg.points_per_mm * length)))
        xyz = _helix(vertex, direction, length, curvature, n)
        if cfg.jitter_mm > 0:
            xyz = xyz + rng.standard_normal(xyz.shape) * cfg.jitter_mm
        q = cfg.charge_kev * np.maximum(1 + cfg.charge_noise * rng.standard_normal(n), 0.0)
        parts.append(np.column_stack([xyz, q]))
    n_noise = rng.poisson(cfg.noise_rate) if cfg.noise_rate > 0 else 0
    if n_tracks == 0:
        n_noise = max(n_noise, 1)
    if n_noise:
        parts.append(_noise_hits(rng, n_noise, cfg.radius_mm, cfg.half_length_mm, cfg.noise_charge_kev))
    return AttpcEvent(np.vstack(parts).astype(np.float32), n_tracks, index)


def _generate(one, cfg, n: int, threads: int, start: int):
    cfg.validate()
    if n < 0:
        raise ConfigError("event count must be non-negative")
    idx = range(start, start + n)
    if threads > 1 and n > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda i: one(cfg, i), idx, chunksize=32))
    return [one(cfg, i) for i in idx]


def gen_gadget(cfg: GadgetConfig, n: int, threads: int = 1, start: int = 0) -> list[GadgetEvent]:
    """Event ``i`` depends only on ``(cfg.seed, i)``, so any thread count gives the same list."""
    return _generate(_gadget_one, cfg, n, threads, start)


def gen_attpc(cfg: AttpcConfig, n: int, threads: int = 1, start: int = 0) -> list[AttpcEvent]:
    return _generate(_attpc_one, cfg, n, threads, start)


# --- binary event files ---------------------------------------------------------------

MAGIC = b"TPCE"
VERSION = 1
_HEADER = struct.Struct("<4sHHQ")
_RECORD = struct.Struct("<I4i2dI")


def _record_bytes(ev) -> bytes:
    ints, reals = ev.label_block()
    pts = np.ascontiguousarray(ev.points, dtype="<f4")
    return _RECORD.pack(ev.event_id, *ints, *reals, len(pts)) + pts.tobytes()


def write_events(path, events, detector: str | None = None) -> None:
    """Write atomically: a temp file in the target directory is renamed into place."""
    events = list(events)
    if detector is None:
        if not events:
            raise ValueError("detector kind needed for an empty file")
        detector = events[0].detector
    kind = DETECTORS[detector]
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_HEADER.pack(MAGIC, VERSION, kind, len(events)))
            for ev in events:
                if ev.detector != detector:
                    raise ValueError("mixed detector kinds in one file")
                f.write(_record_bytes(ev))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _make_event(kind, event_id, ints, reals, pts):
    if kind == GADGET:
        return GadgetEvent(pts, ints[0], ints[1], reals[0], reals[1], ints[2], event_id)
    return AttpcEvent(pts, ints[0], event_id)


def read_header(f) -> tuple[str, int]:
    raw = f.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header", 0)
    magic, version, kind, count = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported event file version {version} (expected {VERSION})", 4)
    names = {v: k for k, v in DETECTORS.items()}
    if kind not in names:
        raise FormatError(f"unknown detector kind {kind}", 6)
    return names[kind], count


def iter_events(path) -> Iterator[GadgetEvent | AttpcEvent]:
    """Stream events one record at a time; raises FormatError at the first bad byte."""
    with open(path, "rb") as f:
        detector, count = read_header(f)
        kind = DETECTORS[detector]
        offset = _HEADER.size
        for _ in range(count):
            raw = f.read(_RECORD.size)
            if len(raw) < _RECORD.size:
                raise FormatError("truncated record header", offset)
            event_id, *rest = _RECORD.unpack(raw)
            ints, reals, n = rest[:4], rest[4:6], rest[6]
            payload = f.read(16 * n)
            if len(payload) < 16 * n:
                raise FormatError(f"truncated point payload for event {event_id}", offset + _RECORD.size)
            pts = np.frombuffer(payload, dtype="<f4").reshape(n, 4).astype(np.float32)
            yield _make_event(kind, event_id, ints, reals, pts)
            offset += _RECORD.size + 16 * n
        if f.read(1):
            raise FormatError("trailing bytes after the last declared event", offset)


def read_events(path) -> list:
    return list(iter_events(path))


def file_detector(path) -> str:
    with open(path, "rb") as f:
        return read_header(f)[0]


# --- debug CSV ---------------------------------------------------------------------

def write_csv(path, events, labels_path=None) -> None:
    """One point per line ``event_id,x,y,z,q`` plus a sidecar label CSV."""
    labels_path = labels_path or f"{os.fspath(path)}.labels.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["event_id", "x", "y", "z", "q"])
        for ev in events:
            for row in ev.points:
                w.writerow([ev.event_id] + [repr(float(v)) for v in row])
    with open(labels_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["event_id", "detector", "i0", "i1", "i2", "i3", "r0", "r1"])
        for ev in events:
            ints, reals = ev.label_block()
            w.writerow([ev.event_id, ev.detector, *ints, *(repr(float(r)) for r in reals)])


def read_csv(path, labels_path=None) -> list:
    labels_path = labels_path or f"{os.fspath(path)}.labels.csv"
    points: dict[int, list] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            points.setdefault(int(row["event_id"]), []).append([float(row[k]) for k in "xyzq"])
    out = []
    with open(labels_path, newline="") as f:
        for row in csv.DictReader(f):
            eid = int(row["event_id"])
            ints = [int(row[f"i{k}"]) for k in range(4)]
            reals = [float(row["r0"]), float(row["r1"])]
            pts = np.asarray(points.get(eid, []), dtype=np.float32).reshape(-1, 4)
            out.append(_make_event(DETECTORS[row["detector"]], eid, ints, reals, pts))
    return out


# --- sparse ingestion ------------------------------------------------------------------

@dataclass
class FeatureConfig:
    """How voxel features ``(q, x, y, z)`` are built and scaled."""

    voxel_size: float = 0.05
    charge_scale: float = 10.0
    coord_scale: float = 500.0

    @classmethod
    def from_dict(cls, d: dict | None) -> "FeatureConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown feature keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def event_tensor(points: np.ndarray, fcfg: FeatureConfig):
    """Quantized sites and their 4 features: summed charge plus centroid coordinates."""
    sites, charge, centroid = quantize(points, fcfg.voxel_size, extra="centroid")
    feats = np.column_stack([charge / fcfg.charge_scale, centroid / fcfg.coord_scale])
    return sites, feats


def prepare(events, fcfg: FeatureConfig | None = None, threads: int = 1):
    fcfg = fcfg or FeatureConfig()
    if threads > 1 and len(events) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(lambda e: event_tensor(e.points, fcfg), events, chunksize=32))
    return [event_tensor(e.points, fcfg) for e in events]


def labels_of(events, kind: str) -> np.ndarray:
    """Label vector: ``gate``, ``particle``, ``class3``, ``n_tracks`` or ``group``."""
    attr = {"gate": "gate_label", "group": "group_label"}.get(kind, kind)
    return np.array([getattr(e, attr) for e in events], dtype=np.int64)


def to_sparse(events, voxel_size: float = 0.05, label: str | None = None, fcfg: FeatureConfig | None = None,
              dtype=np.float32) -> tuple[SparseTensor, np.ndarray]:
    if len(events) == 0:
        raise ValueError("no events")
    fcfg = fcfg or FeatureConfig(voxel_size=voxel_size)
    x = batch(prepare(events, fcfg), dtype)
    if label is None:
        label = "gate" if events[0].detector == "gadget" else "group"
    return x, labels_of(events, label)
