"""Datasets of SDE paths with random observation schedules: sampling, IO, splitting.

Directory layout (all text, lossless round trip):
  meta.json          model kind + named parameters, grid, sizes, seeds, format_version
  values.csv         path_id,grid_index,coord,value   (17-significant-digit decimals)
  observations.csv   path_id,grid_index,mask          (mask as bitstring, e.g. "11")

Rows are ordered by path_id, then grid_index, then coord.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path as FsPath

import numpy as np

from .sde import (
    STREAM_SCHEDULE,
    SdeModel,
    TimeGrid,
    model_from_params,
    path_stream,
    simulate_paths,
)

FORMAT_VERSION = "njode-dataset-1"


class DataError(ValueError):
    """Invalid, missing, or inconsistent dataset files."""


@dataclass(frozen=True)
class ObservationSchedule:
    """Sorted grid indices at which a path is observed, with per-coordinate masks.

    Index 0 is always present (the initial value is given); every mask has at
    least one set bit.
    """

    indices: np.ndarray  # (n,) int
    masks: np.ndarray    # (n, d_x) uint8

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.ndim != 1 or len(idx) == 0:
            raise DataError("schedule must contain at least the initial index")
        if idx[0] != 0:
            raise DataError("grid index 0 must be the first observation")
        if np.any(np.diff(idx) <= 0):
            raise DataError("observation indices must be strictly increasing")
        if self.masks.shape[0] != len(idx):
            raise DataError("one mask per observation required")
        if np.any(self.masks.sum(axis=1) == 0):
            raise DataError("every mask needs at least one observed coordinate")

    @property
    def n(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class SamplePath:
    """One realization on the grid: values are (d_x, steps+1), column per grid point."""

    path_id: int
    values: np.ndarray
    schedule: ObservationSchedule

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"path {self.path_id}: non-finite values")
        if self.schedule.masks.shape[1] != self.values.shape[0]:
            raise DataError(f"path {self.path_id}: mask width != value dimension")
        if self.schedule.indices[-1] >= self.values.shape[1]:
            raise DataError(f"path {self.path_id}: observation index beyond the grid")


@dataclass(frozen=True)
class Dataset:
    model: SdeModel
    grid: TimeGrid
    paths: list[SamplePath]
    master_seed: int
    obs_prob: float = 0.1
    mask_mode: str = "full"
    mask_prob: float = 1.0

    def __post_init__(self):
        ids = [p.path_id for p in self.paths]
        if len(set(ids)) != len(ids):
            raise DataError("path ids must be unique")

    @property
    def n_paths(self) -> int:
        return len(self.paths)

    @property
    def d_x(self) -> int:
        return self.model.d_x

    def path_ids(self) -> list[int]:
        return [p.path_id for p in self.paths]

    def subset(self, ids) -> "Dataset":
        """New dataset view holding only the given path ids (original ids kept)."""
        wanted = set(int(i) for i in ids)
        picked = [p for p in self.paths if p.path_id in wanted]
        if len(picked) != len(wanted):
            raise DataError("subset refers to unknown path ids")
        return Dataset(self.model, self.grid, picked, self.master_seed,
                       self.obs_prob, self.mask_mode, self.mask_prob)


def sample_observation_times(grid: TimeGrid, obs_prob: float, d_x: int,
                             mask_mode: str = "full", seed: int = 0,
                             mask_prob: float = 1.0) -> ObservationSchedule:
    """Random schedule: index 0 always, each later grid index kept w.p. obs_prob.

    ``mask_mode`` "full" sets every mask bit; "bernoulli" draws each coordinate
    bit w.p. ``mask_prob`` and redraws any all-zero mask.
    """
    if not 0.0 < obs_prob <= 1.0:
        raise ValueError("obs_prob must be in (0, 1]")
    if mask_mode not in ("full", "bernoulli"):
        raise ValueError(f"unknown mask_mode {mask_mode!r}")
    if mask_mode == "bernoulli" and not 0.0 < mask_prob <= 1.0:
        raise ValueError("mask_prob must be in (0, 1]")
    rng = np.random.Generator(np.random.Philox(key=seed))
    keep = rng.random(grid.steps) < obs_prob
    indices = np.concatenate([[0], 1 + np.flatnonzero(keep)])
    if mask_mode == "full":
        masks = np.ones((len(indices), d_x), dtype=np.uint8)
    else:
        masks = np.empty((len(indices), d_x), dtype=np.uint8)
        for i in range(len(indices)):
            while True:
                bits = (rng.random(d_x) < mask_prob).astype(np.uint8)
                if bits.any():
                    masks[i] = bits
                    break
    return ObservationSchedule(indices, masks)


def generate_dataset(model: SdeModel, grid: TimeGrid, n_paths: int, master_seed: int,
                     obs_prob: float = 0.1, mask_mode: str = "full",
                     mask_prob: float = 1.0, workers: int = 1) -> Dataset:
    """Simulate paths and draw their observation schedules.

    Output is bitwise identical for any ``workers`` value: every path consumes
    only its own keyed noise streams.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    chunks = _chunk_ranges(n_paths, workers)
    args = [(model, grid, lo, hi, master_seed, obs_prob, mask_mode, mask_prob)
            for lo, hi in chunks]
    if workers > 1 and len(chunks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_generate_chunk, args))
    else:
        results = [_generate_chunk(a) for a in args]
    paths = [p for chunk in results for p in chunk]
    return Dataset(model, grid, paths, master_seed, obs_prob, mask_mode, mask_prob)


def _chunk_ranges(n: int, workers: int) -> list[tuple[int, int]]:
    per = max(1, -(-n // max(1, workers)))
    return [(lo, min(lo + per, n)) for lo in range(0, n, per)]


def _generate_chunk(args) -> list[SamplePath]:
    model, grid, lo, hi, master_seed, obs_prob, mask_mode, mask_prob = args
    values = simulate_paths(model, grid, hi - lo, master_seed, first_path_id=lo)
    out = []
    for j in range(hi - lo):
        pid = lo + j
        sched_key = (master_seed << 64) | (pid << 4) | STREAM_SCHEDULE
        schedule = sample_observation_times(grid, obs_prob, model.d_x,
                                            mask_mode=mask_mode, seed=sched_key,
                                            mask_prob=mask_prob)
        out.append(SamplePath(pid, values[j].T.copy(), schedule))
    return out


def split_dataset(ds: Dataset, train_frac: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint train/test partition by path id, deterministic under ``seed``.

    Sizes are floor(N * train_frac) and the remainder; original ids are kept
    so downstream audits can trace every path back to the source dataset.
    """
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must be in (0, 1)")
    ids = np.array(ds.path_ids())
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(np.floor(len(ids) * train_frac))
    train_ids = ids[perm[:n_train]]
    test_ids = ids[perm[n_train:]]
    return ds.subset(train_ids), ds.subset(test_ids)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_dataset(ds: Dataset, out_dir) -> None:
    """Serialize to ``out_dir``; reading the result back is bitwise lossless."""
    out = FsPath(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "model_kind": ds.model.kind,
        "model_params": {k: v for k, v in ds.model.params().items()},
        "T": ds.grid.horizon,
        "K": ds.grid.steps,
        "N": ds.n_paths,
        "d_X": ds.d_x,
        "obs_prob": ds.obs_prob,
        "mask_mode": ds.mask_mode,
        "mask_prob": ds.mask_prob,
        "master_seed": ds.master_seed,
    }
    with open(out / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    ordered = sorted(ds.paths, key=lambda p: p.path_id)
    with open(out / "values.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path_id", "grid_index", "coord", "value"])
        for p in ordered:
            d_x, n_pts = p.values.shape
            for gi in range(n_pts):
                for c in range(d_x):
                    writer.writerow([p.path_id, gi, c, _fmt(p.values[c, gi])])
    with open(out / "observations.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path_id", "grid_index", "mask"])
        for p in ordered:
            for gi, mask in zip(p.schedule.indices, p.schedule.masks):
                writer.writerow([p.path_id, int(gi), "".join(str(int(b)) for b in mask)])


def read_dataset(in_dir) -> Dataset:
    """Load a dataset directory, validating schema and schedule invariants."""
    root = FsPath(in_dir)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise DataError(f"missing {meta_path}")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    for key in ("format_version", "model_kind", "model_params", "T", "K", "N",
                "d_X", "obs_prob", "master_seed"):
        if key not in meta:
            raise DataError(f"meta.json missing field {key!r}")
    if meta["format_version"] != FORMAT_VERSION:
        raise DataError(f"unsupported format_version {meta['format_version']!r}")
    model = model_from_params(meta["model_kind"], meta["model_params"])
    grid = TimeGrid(horizon=meta["T"], steps=meta["K"])
    n, d_x, k = int(meta["N"]), int(meta["d_X"]), grid.steps
    if model.d_x != d_x:
        raise DataError(f"meta d_X={d_x} contradicts model dimension {model.d_x}")

    values = {}
    for path in (root / "values.csv", root / "observations.csv"):
        if not path.exists():
            raise DataError(f"missing {path}")
    with open(root / "values.csv", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path_id", "grid_index", "coord", "value"]:
            raise DataError("values.csv: unexpected header")
        for row in reader:
            pid, gi, c = int(row[0]), int(row[1]), int(row[2])
            arr = values.get(pid)
            if arr is None:
                arr = values[pid] = np.full((d_x, k + 1), np.nan)
            if not (0 <= gi <= k and 0 <= c < d_x):
                raise DataError(f"values.csv: path {pid} has out-of-range cell ({gi},{c})")
            arr[c, gi] = float(row[3])

    schedules: dict[int, list[tuple[int, np.ndarray]]] = {}
    with open(root / "observations.csv", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path_id", "grid_index", "mask"]:
            raise DataError("observations.csv: unexpected header")
        for row in reader:
            pid, gi, bits = int(row[0]), int(row[1]), row[2]
            if len(bits) != d_x or set(bits) - {"0", "1"}:
                raise DataError(f"observations.csv: path {pid} has malformed mask {bits!r}")
            schedules.setdefault(pid, []).append(
                (gi, np.frombuffer(bits.encode(), dtype=np.uint8) - ord("0")))

    if len(values) != n:
        raise DataError(f"values.csv: expected {n} paths, found {len(values)}")
    paths = []
    for pid in sorted(values):
        arr = values[pid]
        if np.any(np.isnan(arr)):
            raise DataError(f"values.csv: path {pid} is missing grid cells")
        entries = schedules.get(pid)
        if not entries:
            raise DataError(f"observations.csv: path {pid} has no observations")
        indices = np.array([gi for gi, _ in entries])
        if np.any(np.diff(indices) <= 0):
            raise DataError(f"observations.csv: path {pid} indices are not increasing")
        masks = np.stack([m for _, m in entries])
        try:
            schedule = ObservationSchedule(indices, masks)
            paths.append(SamplePath(pid, arr, schedule))
        except DataError as exc:
            raise DataError(f"path {pid}: {exc}") from exc
    return Dataset(model, grid, paths, int(meta["master_seed"]), float(meta["obs_prob"]),
                   meta.get("mask_mode", "full"), float(meta.get("mask_prob", 1.0)))
