"""Training loop, evaluation cadence, convergence study, and run-directory exports.

Every random stream (split, init, per-epoch shuffle, dropout, study cells)
derives from the single config seed, so a run directory's config.json replays
the run exactly. Batch math is vectorized in lock-step over the paths of a
batch with fixed shapes and reduction order, which keeps all reported numbers
bitwise independent of the worker count.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path as FsPath

import numpy as np

from .data import Dataset, SamplePath, split_dataset
from .losses import (
    LossReport,
    batch_loss,
    oracle_loss_terms,
    oracle_path_values,
    per_path_terms,
)
from .model import BatchData, NeuralJumpODE, forward_batch
from .nn import AdamState, adam_step
from .autodiff import Tape
from .sde import NumericBlowupError, SdeModel, TimeGrid
from .util import derive_seed

CHECKPOINT_FORMAT = "njode-checkpoint-1-text17"

# seed-derivation domains
_SPLIT, _INIT, _EPOCH, _DROPOUT, _STUDY = 1, 2, 3, 4, 5

CONVENTIONS = {
    "weight_decay": "decoupled (params scaled by 1 - lr*wd before the Adam update)",
    "dropout": "inverted at train time; eval applies raw weights",
    "readout_residual": "adds the first d_y latent coordinates to the output",
    "loss_terms": "observation index 0 excluded; per-path mean over later observations",
    "masked_loss": "mask multiplies both norms",
    "metric_reduction": "squared errors summed over coordinates, averaged over grid and paths",
    "relative_difference": "(test loss - test oracle loss) / test oracle loss",
    "study_subsets": "nested: smaller train pools are prefixes of larger ones",
}


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 200
    lr: float = 0.001
    weight_decay: float = 0.0005
    hidden: int = 50
    latent: int = 10
    dropout: float = 0.1
    seed: int = 0
    mode: str = "full"  # or "masked"
    eval_every: int = 1
    train_frac: float = 0.8

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.mode not in ("full", "masked"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class StudyGrid:
    n1_values: list[int]
    m_values: list[int]
    repeats: int = 5
    n2: int = 4000

    def __post_init__(self):
        if sorted(self.n1_values) != list(self.n1_values) or sorted(self.m_values) != list(self.m_values):
            raise ValueError("n1_values and m_values must be sorted ascending")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


@dataclass
class StudyRow:
    n1: int
    m: int
    repeat: int
    min_metric: float
    last_metric: float
    mean_metric: float


class EvalContext:
    """Fixed test-set machinery reused across epochs.

    Oracle paths and the oracle loss depend only on the data, so they are
    computed once; each evaluation just runs the model forward in eval mode.
    """

    CHUNK = 1000

    def __init__(self, paths: list[SamplePath], grid: TimeGrid, sde_model: SdeModel,
                 use_masks: bool):
        self.paths = sorted(paths, key=lambda p: p.path_id)
        self.grid = grid
        self.use_masks = use_masks
        self.batches = [BatchData(self.paths[i:i + self.CHUNK], grid)
                        for i in range(0, len(self.paths), self.CHUNK)]
        self.oracle = np.stack([oracle_path_values(sde_model, p, grid) for p in self.paths])
        self.oracle_terms = oracle_loss_terms(self.paths, sde_model, grid)
        self.oracle_loss = float(self.oracle_terms.mean())

    def evaluate(self, model: NeuralJumpODE, epoch: int, train_loss: float) -> LossReport:
        terms = []
        metrics = []
        offset = 0
        for batch in self.batches:
            tape = Tape(record_ops=False)
            params = model.bind(tape)
            trace = forward_batch(model, tape, batch, params=params, record_grid=True)
            terms.append(per_path_terms(trace, use_masks=self.use_masks))
            n = batch.batch_size
            sq = ((self.oracle[offset:offset + n] - trace.y_grid) ** 2).sum(axis=2)
            metrics.append(sq.mean(axis=1))
            offset += n
        model_terms = np.concatenate(terms)
        test_loss = float(model_terms.mean())
        diff = model_terms - self.oracle_terms
        diff_se = float(diff.std(ddof=1) / np.sqrt(len(diff))) if len(diff) > 1 else 0.0
        return LossReport(
            epoch=epoch,
            train_loss=train_loss,
            test_loss=test_loss,
            oracle_loss=self.oracle_loss,
            relative_difference=(test_loss - self.oracle_loss) / self.oracle_loss,
            eval_metric=float(np.concatenate(metrics).mean()),
            loss_diff_se=diff_se,
        )

    def predict_grid(self, model: NeuralJumpODE) -> np.ndarray:
        """Model outputs on the full grid for every test path."""
        outs = []
        for batch in self.batches:
            tape = Tape(record_ops=False)
            params = model.bind(tape)
            trace = forward_batch(model, tape, batch, params=params, record_grid=True)
            outs.append(trace.y_grid)
        return np.concatenate(outs, axis=0)


def train_epoch(model: NeuralJumpODE, adam: AdamState, train_paths: list[SamplePath],
                grid: TimeGrid, cfg: TrainConfig, epoch_seed: int,
                on_batch=None) -> float:
    """One pass over the training set; returns the size-weighted mean batch loss.

    Paths are reshuffled from ``epoch_seed``; the last partial batch is kept.
    A non-finite loss aborts the epoch before any further update.
    """
    if not train_paths:
        raise ValueError("empty training set")
    order = np.random.default_rng(epoch_seed).permutation(len(train_paths))
    use_masks = cfg.mode == "masked"
    total, weight = 0.0, 0
    flat_params = model.parameters()
    for bi, lo in enumerate(range(0, len(order), cfg.batch_size)):
        rows = order[lo:lo + cfg.batch_size]
        paths = [train_paths[i] for i in rows]
        if on_batch is not None:
            on_batch([p.path_id for p in paths])
        batch = BatchData(paths, grid)
        tape = Tape()
        params = model.bind(tape)
        rng = np.random.default_rng(derive_seed(epoch_seed, _DROPOUT, bi))
        trace = forward_batch(model, tape, batch, params=params, train_rng=rng,
                              record_grid=False)
        loss = batch_loss(trace, use_masks=use_masks)
        loss_value = float(loss.value)
        if not np.isfinite(loss_value):
            raise NumericBlowupError(
                f"non-finite training loss in batch {bi} "
                f"(paths {paths[0].path_id}..{paths[-1].path_id}); epoch aborted")
        grads_of = tape.backward(loss)
        flat_vars = params["field"] + params["jump"] + params["readout"]
        grads = [grads_of.of(v) for v in flat_vars]
        adam_step(flat_params, grads, adam)
        total += loss_value * len(rows)
        weight += len(rows)
    return total / weight


def fit(train_paths: list[SamplePath], test_paths: list[SamplePath], grid: TimeGrid,
        sde_model: SdeModel, cfg: TrainConfig, on_batch=None,
        eval_ctx: EvalContext | None = None) -> tuple[NeuralJumpODE, list[LossReport]]:
    """Train a fresh model; evaluation runs every ``cfg.eval_every`` epochs."""
    if cfg.batch_size > len(train_paths):
        raise ValueError("batch_size exceeds the training-set size")
    d_x = train_paths[0].values.shape[0]
    model = NeuralJumpODE(
        d_x=d_x, d_h=cfg.latent, hidden=cfg.hidden, dropout=cfg.dropout,
        masked=cfg.mode == "masked", dt=grid.mesh, seed=derive_seed(cfg.seed, _INIT))
    adam = AdamState.for_params(model.parameters(), lr=cfg.lr,
                                weight_decay=cfg.weight_decay)
    if eval_ctx is None and test_paths:
        eval_ctx = EvalContext(test_paths, grid, sde_model, use_masks=cfg.mode == "masked")
    reports: list[LossReport] = []
    for epoch in range(1, cfg.epochs + 1):
        train_loss = train_epoch(model, adam, train_paths, grid, cfg,
                                 derive_seed(cfg.seed, _EPOCH, epoch), on_batch=on_batch)
        if eval_ctx is not None and epoch % cfg.eval_every == 0:
            reports.append(eval_ctx.evaluate(model, epoch, train_loss))
    return model, reports


def train(dataset: Dataset, cfg: TrainConfig, out_dir=None, data_dir: str | None = None,
          workers: int = 1, on_batch=None) -> tuple[NeuralJumpODE, list[LossReport]]:
    """80/20-style split of ``dataset`` (per cfg.train_frac), fit, export run files."""
    split_seed = derive_seed(cfg.seed, _SPLIT)
    train_ds, test_ds = split_dataset(dataset, cfg.train_frac, split_seed)
    eval_ctx = EvalContext(test_ds.paths, dataset.grid, dataset.model,
                           use_masks=cfg.mode == "masked")
    model, reports = fit(train_ds.paths, test_ds.paths, dataset.grid, dataset.model,
                         cfg, on_batch=on_batch, eval_ctx=eval_ctx)
    if out_dir is not None:
        out = FsPath(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_config(out / "config.json", cfg, dataset, data_dir, split_seed, workers,
                     n_train=train_ds.n_paths, n_test=test_ds.n_paths)
        write_curves(out / "curves.csv", reports)
        save_checkpoint(model, out)
        write_predictions(out / "predictions.csv", model, dataset.model, eval_ctx)
    return model, reports


def convergence_study(dataset: Dataset, sgrid: StudyGrid, cfg: TrainConfig,
                      workers: int = 1) -> list[StudyRow]:
    """Sweep training-set size and network width, ``repeats`` runs per cell.

    The test set is fixed once; train pools are nested prefixes of one fixed
    permutation so curves across n1 are comparable. Each cell varies only the
    init/shuffle seed.
    """
    ids = np.array(sorted(dataset.path_ids()))
    perm = np.random.default_rng(derive_seed(cfg.seed, _STUDY)).permutation(len(ids))
    if sgrid.n2 + max(sgrid.n1_values) > len(ids):
        raise ValueError(
            f"dataset has {len(ids)} paths; need n2 + max(n1) = "
            f"{sgrid.n2 + max(sgrid.n1_values)}")
    test_ids = ids[perm[:sgrid.n2]]
    pool_ids = ids[perm[sgrid.n2:]]
    test_ds = dataset.subset(test_ids)
    cells = [(n1, m, r) for n1 in sgrid.n1_values for m in sgrid.m_values
             for r in range(sgrid.repeats)]
    args = [(dataset.subset(pool_ids[:n1]), test_ds, cfg, n1, m, r) for n1, m, r in cells]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_study_cell, args))
    else:
        rows = [_study_cell(a) for a in args]
    return rows


def _study_cell(args) -> StudyRow:
    train_ds, test_ds, cfg, n1, m, r = args
    cell_cfg = replace(cfg, hidden=m, seed=derive_seed(cfg.seed, _STUDY, n1, m, r))
    _, reports = fit(train_ds.paths, test_ds.paths, train_ds.grid, train_ds.model, cell_cfg)
    metrics = np.array([rep.eval_metric for rep in reports])
    if metrics.size == 0:
        raise ValueError("study cell produced no evaluations; check epochs/eval_every")
    return StudyRow(n1, m, r, float(metrics.min()), float(metrics[-1]),
                    float(metrics.mean()))


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_config(path, cfg: TrainConfig, dataset: Dataset, data_dir, split_seed: int,
                 workers: int, **extra) -> None:
    doc = {
        "config": asdict(cfg),
        "data_dir": str(data_dir) if data_dir else None,
        "dataset": {"model_kind": dataset.model.kind, "N": dataset.n_paths,
                    "T": dataset.grid.horizon, "K": dataset.grid.steps,
                    "d_X": dataset.d_x, "master_seed": dataset.master_seed},
        "split_seed": split_seed,
        "workers": workers,
        "conventions": CONVENTIONS,
    }
    doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_curves(path, reports: list[LossReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LossReport.CSV_FIELDS)
        for rep in reports:
            writer.writerow([rep.epoch] + [_fmt(getattr(rep, f))
                                           for f in LossReport.CSV_FIELDS[1:]])


def read_curves(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in reader]


def write_study(path, rows: list[StudyRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n1", "m", "repeat", "min_metric", "last_metric", "mean_metric"])
        for r in rows:
            writer.writerow([r.n1, r.m, r.repeat, _fmt(r.min_metric),
                             _fmt(r.last_metric), _fmt(r.mean_metric)])


def write_predictions(path, model: NeuralJumpODE, sde_model: SdeModel,
                      ctx: EvalContext) -> None:
    """Per-grid-point export of model output vs oracle for every test path."""
    y = ctx.predict_grid(model)
    times = ctx.grid.times()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path_id", "t", "coord", "y", "xhat_oracle", "observed"])
        for j, p in enumerate(ctx.paths):
            observed = np.zeros((ctx.grid.steps + 1, p.values.shape[0]), dtype=int)
            for gi, mask in zip(p.schedule.indices, p.schedule.masks):
                observed[gi] = mask
            for gi in range(ctx.grid.steps + 1):
                for c in range(p.values.shape[0]):
                    writer.writerow([p.path_id, _fmt(times[gi]), c, _fmt(y[j, gi, c]),
                                     _fmt(ctx.oracle[j, gi, c]), observed[gi, c]])


def save_checkpoint(model: NeuralJumpODE, run_dir) -> None:
    run_dir = FsPath(run_dir)
    names = model.parameter_names()
    params = model.parameters()
    meta = {
        "format_version": CHECKPOINT_FORMAT,
        "d_x": model.d_x,
        "d_h": model.d_h,
        "hidden": model.hidden,
        "dropout": model.dropout,
        "masked": model.masked,
        "residual_readout": model.residual_readout,
        "residual_jump": model.residual_jump,
        "dt": model.dt,
        "seed": model.seed,
        "parameters": [{"name": n, "shape": list(p.shape)} for n, p in zip(names, params)],
    }
    with open(run_dir / "checkpoint.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(run_dir / "checkpoint.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "index", "value"])
        for n, p in zip(names, params):
            for i, v in enumerate(p.ravel()):
                writer.writerow([n, i, _fmt(v)])


def load_checkpoint(run_dir) -> NeuralJumpODE:
    run_dir = FsPath(run_dir)
    with open(run_dir / "checkpoint.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {meta.get('format_version')!r}")
    model = NeuralJumpODE(
        d_x=meta["d_x"], d_h=meta["d_h"], hidden=meta["hidden"], dropout=meta["dropout"],
        masked=meta["masked"], residual_readout=meta["residual_readout"],
        residual_jump=meta["residual_jump"], dt=meta["dt"], seed=meta["seed"])
    names = model.parameter_names()
    params = model.parameters()
    by_name = dict(zip(names, params))
    buffers = {spec["name"]: np.full(int(np.prod(spec["shape"])), np.nan)
               for spec in meta["parameters"]}
    with open(run_dir / "checkpoint.csv", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["name", "index", "value"]:
            raise ValueError("checkpoint.csv: unexpected header")
        for name, idx, value in reader:
            buffers[name][int(idx)] = float(value)
    for spec in meta["parameters"]:
        name = spec["name"]
        if name not in by_name:
            raise ValueError(f"checkpoint names unknown parameter {name!r}")
        flat = buffers[name]
        if np.any(np.isnan(flat)):
            raise ValueError(f"checkpoint.csv: parameter {name!r} has missing entries")
        by_name[name][...] = flat.reshape(spec["shape"])
    return model
