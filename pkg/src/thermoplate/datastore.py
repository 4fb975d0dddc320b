"""Dataset persistence: one binary file per sample plus a JSON manifest.

Sample container ("TESF"):

    magic   "TESF" (4 ASCII bytes)
    version u32 = 1, little-endian
    nx, ny  u32 each
    n_fields u32 = 6
    names   per field: length u8, ASCII bytes; always T,ux,uy,sxx,syy,sxy
    data    six row-major float64 little-endian arrays in name order

Round trips are bitwise.  The manifest records geometry, material, grid,
GRF config, master seed, the train/val/test split listings, and, once
fitted, normalization stats.  All writes go through a temp file + rename so
interrupted runs never leave half-written files.
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import (DEFAULT_SIDE, BoardGeometry, GridSpec, MaterialParams,
                       NodeClassField, build_grid)
from .grf import GrfConfig, sample_temperature
from .solver import FIELD_NAMES, FieldSample, generate_sample

SAMPLE_MAGIC = b"TESF"
SAMPLE_VERSION = 1
MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "val", "test")


class SampleFormatError(RuntimeError):
    """Base class for unreadable sample files."""


class BadMagicError(SampleFormatError):
    pass


class BadVersionError(SampleFormatError):
    pass


class TruncatedFileError(SampleFormatError):
    pass


class DatasetError(RuntimeError):
    """Inconsistent manifest or failed generation run."""


def _atomic_write(path: str, data: bytes):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_sample(path: str, sample: FieldSample):
    sample.validate()
    grid = sample.grid
    parts = [SAMPLE_MAGIC,
             struct.pack("<IIII", SAMPLE_VERSION, grid.nx, grid.ny, len(FIELD_NAMES))]
    for name in FIELD_NAMES:
        encoded = name.encode("ascii")
        parts.append(struct.pack("<B", len(encoded)))
        parts.append(encoded)
    for name in FIELD_NAMES:
        parts.append(np.ascontiguousarray(sample.field(name), dtype="<f8").tobytes())
    _atomic_write(path, b"".join(parts))


def _read_exact(fh, n: int, what: str, path: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"{path}: truncated while reading {what}")
    return data


def read_sample(path: str, h: float | None = None) -> FieldSample:
    """Read one sample; `h` supplies the grid spacing (the file stores only
    node counts).  Defaults to a 0.2 m board when omitted."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic", path) != SAMPLE_MAGIC:
            raise BadMagicError(f"{path}: not a sample file (bad magic)")
        version, nx, ny, n_fields = struct.unpack(
            "<IIII", _read_exact(fh, 16, "header", path))
        if version != SAMPLE_VERSION:
            raise BadVersionError(f"{path}: unsupported version {version}")
        if n_fields != len(FIELD_NAMES):
            raise SampleFormatError(f"{path}: expected {len(FIELD_NAMES)} fields, "
                                    f"found {n_fields}")
        names = []
        for _ in range(n_fields):
            ln = _read_exact(fh, 1, "name length", path)[0]
            names.append(_read_exact(fh, ln, "field name", path).decode("ascii"))
        if tuple(names) != FIELD_NAMES:
            raise SampleFormatError(f"{path}: unexpected field names {names}")
        arrays = {}
        for name in names:
            raw = _read_exact(fh, 8 * nx * ny, f"{name} data", path)
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(ny, nx).copy()
        if fh.read(1):
            raise SampleFormatError(f"{path}: trailing bytes after field data")
    if h is None:
        h = DEFAULT_SIDE / (nx - 1)
    grid = GridSpec(nx=nx, ny=ny, h=h)
    return FieldSample(grid=grid, **arrays)


@dataclass
class Manifest:
    """Dataset description; everything needed to rebuild grid, classes, and
    samples lives here, so sample files stay minimal."""

    board: BoardGeometry
    material: MaterialParams
    grid_nx: int
    grid_ny: int
    grf: GrfConfig
    master_seed: int
    splits: dict[str, list[str]] = field(default_factory=lambda: {s: [] for s in SPLITS})
    norm_stats: dict | None = None
    schema_version: int = 1

    def to_json(self) -> str:
        doc = {
            "schema_version": self.schema_version,
            "board": {"length": self.board.length, "height": self.board.height,
                      "holes": [list(hle) for hle in self.board.holes]},
            "material": {"youngs_E": self.material.youngs_E,
                         "poisson_mu": self.material.poisson_mu,
                         "alpha_expansion": self.material.alpha_expansion,
                         "k_thermal": self.material.k_thermal,
                         "T_ref": self.material.T_ref},
            "grid": {"nx": self.grid_nx, "ny": self.grid_ny},
            "grf": {"mean": self.grf.mean, "variance": self.grf.variance,
                    "length_scale": self.grf.length_scale,
                    "t_min": self.grf.t_min, "t_max": self.grf.t_max},
            "master_seed": self.master_seed,
            "splits": {s: sorted(self.splits.get(s, [])) for s in SPLITS},
            "norm_stats": self.norm_stats,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        doc = json.loads(text)
        if doc.get("schema_version") != 1:
            raise DatasetError(f"unsupported manifest schema {doc.get('schema_version')}")
        board = BoardGeometry(length=doc["board"]["length"],
                              height=doc["board"]["height"],
                              holes=tuple(tuple(h) for h in doc["board"]["holes"]))
        material = MaterialParams(**doc["material"])
        grf = GrfConfig(seed=0, **doc["grf"])
        manifest = cls(board=board, material=material,
                       grid_nx=doc["grid"]["nx"], grid_ny=doc["grid"]["ny"],
                       grf=grf, master_seed=doc["master_seed"],
                       splits={s: list(doc["splits"].get(s, [])) for s in SPLITS},
                       norm_stats=doc.get("norm_stats"))
        manifest.check_disjoint()
        return manifest

    def check_disjoint(self):
        for a in range(len(SPLITS)):
            for b in range(a + 1, len(SPLITS)):
                overlap = set(self.splits[SPLITS[a]]) & set(self.splits[SPLITS[b]])
                if overlap:
                    raise DatasetError(
                        f"splits {SPLITS[a]} and {SPLITS[b]} share files: "
                        f"{sorted(overlap)[:4]}")

    def build_grid(self) -> tuple[GridSpec, NodeClassField]:
        return build_grid(self.board, self.grid_nx, self.grid_ny)

    def matches(self, other: "Manifest") -> bool:
        return (self.board == other.board and self.material == other.material
                and self.grid_nx == other.grid_nx and self.grid_ny == other.grid_ny
                and self.grf == other.grf and self.master_seed == other.master_seed)


def save_manifest(out_dir: str, manifest: Manifest):
    _atomic_write(os.path.join(out_dir, MANIFEST_NAME),
                  manifest.to_json().encode("utf-8"))


def load_manifest(data_dir: str) -> Manifest:
    path = os.path.join(data_dir, MANIFEST_NAME)
    if not os.path.exists(path):
        raise DatasetError(f"{data_dir}: no {MANIFEST_NAME}")
    with open(path, "r", encoding="utf-8") as fh:
        manifest = Manifest.from_json(fh.read())
    for split in SPLITS:
        for name in manifest.splits[split]:
            if not os.path.exists(os.path.join(data_dir, name)):
                raise DatasetError(f"{data_dir}: listed file {name} is missing")
    return manifest


def load_split(data_dir: str, split: str,
               fallback: str | None = None) -> tuple[list[FieldSample], Manifest]:
    """Samples of one split; optionally falls back to another nonempty one."""
    manifest = load_manifest(data_dir)
    names = manifest.splits.get(split, [])
    if not names and fallback is not None:
        names = manifest.splits.get(fallback, [])
    grid, _ = manifest.build_grid()
    samples = [read_sample(os.path.join(data_dir, n), h=grid.h) for n in names]
    return samples, manifest


def _sample_name(seed: int) -> str:
    return f"sample_{seed:08d}.tesf"


def _generate_one(args) -> tuple[str, str | None]:
    board, material, nx, ny, grf, seed, out_dir = args
    grid, classes = build_grid(board, nx, ny)
    name = _sample_name(seed)
    try:
        temperature = sample_temperature(grid, GrfConfig(
            mean=grf.mean, variance=grf.variance, length_scale=grf.length_scale,
            t_min=grf.t_min, t_max=grf.t_max, seed=seed))
        pin = not board.holes
        sample = generate_sample(grid, classes, material, temperature,
                                 pin_rigid_modes=pin)
        write_sample(os.path.join(out_dir, name), sample)
        return name, None
    except Exception as exc:  # collected and reported by the caller
        return name, f"{type(exc).__name__}: {exc}"


def generate_dataset(board: BoardGeometry, material: MaterialParams, nx: int,
                     ny: int, grf: GrfConfig, n: int, out_dir: str,
                     master_seed: int, split: str = "train",
                     workers: int = 1) -> Manifest:
    """Generate n samples with per-sample seeds master_seed + i and record
    them under `split`.  Re-running with the same arguments rewrites
    byte-identical files.  Merging into an existing dataset requires equal
    geometry/material/grf configs and keeps splits disjoint."""
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    if n < 0:
        raise ValueError("n must be nonnegative")
    os.makedirs(out_dir, exist_ok=True)

    base_grf = GrfConfig(mean=grf.mean, variance=grf.variance,
                         length_scale=grf.length_scale, t_min=grf.t_min,
                         t_max=grf.t_max, seed=0)
    manifest = Manifest(board=board, material=material, grid_nx=nx, grid_ny=ny,
                        grf=base_grf, master_seed=master_seed)
    if os.path.exists(os.path.join(out_dir, MANIFEST_NAME)):
        existing = load_manifest(out_dir)
        if not existing.matches(Manifest(board=board, material=material,
                                         grid_nx=nx, grid_ny=ny, grf=base_grf,
                                         master_seed=existing.master_seed)):
            raise DatasetError(f"{out_dir}: existing dataset was generated with "
                               "a different configuration")
        manifest = existing

    build_grid(board, nx, ny)  # validate resolvability before any work
    jobs = [(board, material, nx, ny, base_grf, master_seed + i, out_dir)
            for i in range(n)]
    if workers > 1 and jobs:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_generate_one, jobs))
    else:
        results = [_generate_one(job) for job in jobs]

    failures = [(name, err) for name, err in results if err is not None]
    if failures:
        listing = "; ".join(f"{name}: {err}" for name, err in failures[:10])
        raise DatasetError(f"{len(failures)} of {n} samples failed: {listing}")

    new_names = [name for name, _ in results]
    for other in SPLITS:
        if other != split and set(new_names) & set(manifest.splits[other]):
            raise DatasetError(f"seed range overlaps files already in split {other!r}")
    manifest.splits[split] = sorted(set(manifest.splits[split]) | set(new_names))
    manifest.check_disjoint()
    save_manifest(out_dir, manifest)
    return manifest
