"""The neural jump ODE model.

Between observations the latent state follows an Euler-integrated neural ODE
whose field sees (latent, last observation, last observation time, time since
it). At each observation the latent state jumps to the output of the jump
network applied to the squashed observation (plus a raw-value shortcut), and a
residual readout maps latent states to predictions at every grid point.

All paths of a batch advance in lock-step over the shared time grid; at each
grid index only the paths observing there get the jump applied. With full
observations the jump input is pure data; in masked mode unobserved
coordinates are imputed with the model's own pre-jump prediction and the ODE
field is fed the post-jump prediction instead of the raw observation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .data import SamplePath
from .nn import FeedForwardNet, init_weights
from .sde import NumericBlowupError, TimeGrid
from .util import derive_seed


@dataclass
class NeuralJumpODE:
    """Parameter container for the three networks plus integration settings."""

    d_x: int
    d_h: int = 10
    hidden: int = 50
    dropout: float = 0.1
    masked: bool = False
    residual_readout: bool = True
    residual_jump: bool = True
    dt: float = 0.01
    seed: int = 0
    field_net: FeedForwardNet = field(init=False)
    jump_net: FeedForwardNet = field(init=False)
    readout_net: FeedForwardNet = field(init=False)

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.residual_jump and self.d_h < self.d_x:
            raise ValueError("jump residual needs d_h >= d_x")
        d_in_jump = 2 * self.d_x if self.masked else self.d_x
        self.field_net = init_weights(
            [self.d_h + self.d_x + 2, self.hidden, self.hidden, self.d_h],
            derive_seed(self.seed, 0), dropout=self.dropout)
        self.jump_net = init_weights(
            [d_in_jump, self.hidden, self.hidden, self.d_h],
            derive_seed(self.seed, 1), dropout=self.dropout)
        self.readout_net = init_weights(
            [self.d_h, self.hidden, self.hidden, self.d_y],
            derive_seed(self.seed, 2), dropout=self.dropout)

    @property
    def d_y(self) -> int:
        return self.d_x

    def parameters(self) -> list[np.ndarray]:
        """All trainable arrays, fixed order: field, jump, readout."""
        return (self.field_net.parameters() + self.jump_net.parameters()
                + self.readout_net.parameters())

    def parameter_names(self) -> list[str]:
        names = []
        for net_name, net in (("field", self.field_net), ("jump", self.jump_net),
                              ("readout", self.readout_net)):
            for i in range(net.n_layers):
                names.append(f"{net_name}.w{i}")
                names.append(f"{net_name}.b{i}")
        return names

    def bind(self, tape: Tape) -> dict[str, list]:
        """Track every parameter on ``tape``; same per-net order as parameters()."""
        return {
            "field": self.field_net.bind(tape),
            "jump": self.jump_net.bind(tape),
            "readout": self.readout_net.bind(tape),
        }

    def set_parameters(self, flat: list[np.ndarray]) -> None:
        current = self.parameters()
        if len(flat) != len(current):
            raise ValueError("parameter count mismatch")
        for dst, src in zip(current, flat):
            if dst.shape != src.shape:
                raise ValueError("parameter shape mismatch")
            dst[...] = src


@dataclass
class LatentCarry:
    """State carried between observations: latent, last observation input, its time."""

    h: Var
    x_last: object  # Var in masked mode, ndarray of the raw observation otherwise
    tau: float | np.ndarray


@dataclass
class ObsEvent:
    """Everything recorded at one grid index holding observations."""

    grid_index: int
    rows: np.ndarray          # batch rows observing here
    x_obs: np.ndarray         # (len(rows), d_x) raw observed values
    mask: np.ndarray          # (len(rows), d_x) float 0/1
    y_left: Var               # pre-jump outputs (equal to y_jump at index 0)
    y_jump: Var               # post-jump outputs
    x_used: np.ndarray        # jump-net input values after imputation (pre-squash)


@dataclass
class ForwardTrace:
    """Outputs of one (batched) forward pass."""

    y_grid: np.ndarray | None  # (batch, K+1, d_y) values, post-jump at observations
    events: list[ObsEvent]
    h_final: Var
    n_obs: np.ndarray          # per-path observation counts
    path_ids: np.ndarray
    tape: Tape

    @property
    def n_post(self) -> np.ndarray:
        return self.n_obs - 1

    def obs_values(self, row: int = 0):
        """(grid_index, y_left, y_jump) value triples for one batch row."""
        out = []
        for ev in self.events:
            hits = np.flatnonzero(ev.rows == row)
            for h in hits:
                out.append((ev.grid_index, ev.y_left.value[h].copy(), ev.y_jump.value[h].copy()))
        return out


class BatchData:
    """Constant per-batch arrays the forward pass consumes."""

    def __init__(self, paths: list[SamplePath], grid: TimeGrid):
        if not paths:
            raise ValueError("empty batch")
        k = grid.steps
        d_x = paths[0].values.shape[0]
        times = grid.times()
        self.grid = grid
        self.path_ids = np.array([p.path_id for p in paths])
        self.values = np.stack([p.values.T for p in paths])  # (B, K+1, d_x)
        self.n_obs = np.array([p.schedule.n for p in paths])
        b = len(paths)
        self.obs_rows: list[np.ndarray] = [np.empty(0, dtype=int)] * (k + 1)
        self.masks_at: list[np.ndarray | None] = [None] * (k + 1)
        rows_buf: list[list[int]] = [[] for _ in range(k + 1)]
        masks_buf: list[list[np.ndarray]] = [[] for _ in range(k + 1)]
        # tau / x_last as of each grid index, after processing any observation there
        self.tau = np.empty((k + 1, b))
        self.x_last = np.empty((k + 1, b, d_x))
        for j, p in enumerate(paths):
            idx = p.schedule.indices
            if p.values.shape[0] != d_x or p.values.shape[1] != k + 1:
                raise ValueError(f"path {p.path_id}: values shape does not match the grid")
            for gi, mask in zip(idx, p.schedule.masks):
                rows_buf[gi].append(j)
                masks_buf[gi].append(mask)
            ends = np.append(idx[1:], k + 1)
            for a, e in zip(idx, ends):
                self.tau[a:e, j] = times[a]
                self.x_last[a:e, j, :] = self.values[j, a]
        for gi in range(k + 1):
            if rows_buf[gi]:
                self.obs_rows[gi] = np.array(rows_buf[gi])
                self.masks_at[gi] = np.stack(masks_buf[gi]).astype(np.float64)

    @property
    def batch_size(self) -> int:
        return len(self.path_ids)


def _readout(model: NeuralJumpODE, h: Var, params, train_rng) -> Var:
    out = model.readout_net.forward(ad.tanh(h), params=params["readout"], train_rng=train_rng)
    if model.residual_readout:
        out = ad.add(out, ad.slice_cols(h, 0, model.d_y))
    return out


def _jump(model: NeuralJumpODE, x_obs, mask, params, train_rng) -> Var:
    """Latent state from one observation block; x_obs may be data or a Var.

    The residual shortcut carries the raw (unsquashed) observation into the
    first d_x latent coordinates, so readout(jump(x)) starts near the identity
    and training only has to learn corrections.
    """
    is_var = isinstance(x_obs, Var)
    squashed = ad.tanh(x_obs) if is_var else np.tanh(np.asarray(x_obs, float))
    if model.masked:
        if mask is None:
            raise ValueError("masked model requires observation masks")
        net_in = ad.concat_cols([squashed, np.asarray(mask, float)]) \
            if is_var else np.concatenate([squashed, np.asarray(mask, float)], axis=1)
    else:
        net_in = squashed
    out = model.jump_net.forward(net_in, params=params["jump"], train_rng=train_rng)
    if model.residual_jump:
        rows = out.value.shape[0]
        pad_width = model.d_h - model.d_x
        if is_var:
            shortcut = ad.concat_cols([x_obs, np.zeros((rows, pad_width))]) \
                if pad_width else x_obs
            out = ad.add(out, shortcut)
        else:
            shortcut = np.concatenate(
                [np.asarray(x_obs, float), np.zeros((rows, pad_width))], axis=1)
            out = ad.add(out, shortcut)
    return out


def _field_step(model: NeuralJumpODE, h: Var, x_in, tau_col, dtau_col, params, train_rng) -> Var:
    """One Euler step of the latent ODE.

    The field sees the raw latent state and last observation: the drift of the
    target process scales with the level, and a squashed input saturates for
    levels a few units from zero, hiding exactly the signal the drift needs.
    """
    inp = ad.concat_cols([h, x_in, tau_col, dtau_col])
    f_out = model.field_net.forward(inp, params=params["field"], train_rng=train_rng)
    return ad.add(h, ad.mul(f_out, model.dt))


def jump_update(model: NeuralJumpODE, tape: Tape, x_obs, mask=None,
                params=None, train_rng=None) -> Var:
    """Fresh latent state from an observation; depends on nothing but the observation."""
    if params is None:
        params = model.bind(tape)
    x = x_obs if isinstance(x_obs, Var) else np.atleast_2d(np.asarray(x_obs, float))
    if mask is not None:
        mask = np.atleast_2d(np.asarray(mask, float))
    return _jump(model, x, mask, params, train_rng)


def evolve_latent(model: NeuralJumpODE, tape: Tape, carry: LatentCarry,
                  t_from: float, t_to: float, params=None, train_rng=None) -> LatentCarry:
    """Integrate the latent ODE from t_from to t_to in steps of model.dt."""
    if t_to < t_from - 1e-12:
        raise ValueError("t_to must be >= t_from")
    if params is None:
        params = model.bind(tape)
    n_steps = int(round((t_to - t_from) / model.dt))
    if abs(n_steps * model.dt - (t_to - t_from)) > 1e-9:
        raise ValueError("integration bounds must sit on the dt lattice")
    h = carry.h
    b = h.value.shape[0]
    tau_col = np.broadcast_to(np.asarray(carry.tau, float), (b,)).reshape(b, 1)
    x_in = carry.x_last
    if not isinstance(x_in, Var):
        x_in = np.asarray(x_in, float)
    for i in range(n_steps):
        s = t_from + i * model.dt
        h = _field_step(model, h, x_in, tau_col, s - tau_col, params, train_rng)
        if not np.all(np.isfinite(h.value)):
            raise NumericBlowupError(f"latent blow-up at t={s + model.dt:.6g}")
    return LatentCarry(h, carry.x_last, carry.tau)


def readout(model: NeuralJumpODE, tape: Tape, h, params=None, train_rng=None) -> Var:
    """Map a latent block (rows, d_h) to outputs (rows, d_y)."""
    if params is None:
        params = model.bind(tape)
    if not isinstance(h, Var):
        h = tape.leaf(np.atleast_2d(np.asarray(h, float)))
    return _readout(model, h, params, train_rng)


def forward_batch(model: NeuralJumpODE, tape: Tape, batch: BatchData,
                  params=None, train_rng=None, record_grid: bool = True) -> ForwardTrace:
    """Run the model along the grid for a whole batch of paths.

    Every path must be observed at grid index 0. Outputs at observation
    indices are post-jump; left limits live in the event records. With
    ``record_grid=False`` only observation outputs are produced (all the loss
    needs), which keeps training tapes small.
    """
    grid = batch.grid
    k_max = grid.steps
    if params is None:
        params = model.bind(tape)
    mesh = grid.mesh
    if abs(mesh / model.dt - round(mesh / model.dt)) > 1e-9:
        raise ValueError("grid mesh must be a multiple of the integration step")
    if batch.obs_rows[0].size != batch.batch_size:
        raise ValueError("all paths must be observed at grid index 0")
    y_grid = np.empty((batch.batch_size, k_max + 1, model.d_y)) if record_grid else None
    events: list[ObsEvent] = []
    h: Var | None = None
    x_last_var: Var | None = None  # masked mode carry
    times = grid.times()
    for k in range(k_max + 1):
        if k > 0:
            tau_col = batch.tau[k - 1][:, None]
            x_in = x_last_var if model.masked else batch.x_last[k - 1]
            s = times[k - 1]
            h = _field_step(model, h, x_in, tau_col, s - tau_col, params, train_rng)
            if not np.all(np.isfinite(h.value)):
                raise NumericBlowupError(f"latent blow-up at t={times[k]:.6g}")
        rows = batch.obs_rows[k]
        if rows.size:
            x_obs = batch.values[rows, k]
            mask = batch.masks_at[k]
            y_left = None
            if k > 0:
                y_left = _readout(model, ad.gather_rows(h, rows), params, train_rng)
            if model.masked:
                if y_left is None:
                    # no prediction exists before any data; impute zeros
                    x_used = tape.leaf(mask * x_obs)
                else:
                    x_used = ad.add(ad.mul(y_left, 1.0 - mask), mask * x_obs)
                h_jump = _jump(model, x_used, mask, params, train_rng)
                x_used_values = x_used.value
            else:
                h_jump = _jump(model, x_obs, mask, params, train_rng)
                x_used_values = x_obs
            y_jump = _readout(model, h_jump, params, train_rng)
            if y_left is None:
                y_left = y_jump
            if k == 0:
                h = h_jump
                if model.masked:
                    x_last_var = y_jump
            else:
                h = ad.put_rows(h, rows, h_jump)
                if model.masked:
                    x_last_var = ad.put_rows(x_last_var, rows, y_jump)
            events.append(ObsEvent(k, rows, x_obs, mask, y_left, y_jump, x_used_values))
        if record_grid:
            y_all = _readout(model, h, params, train_rng)
            y_grid[:, k] = y_all.value
            if rows.size:
                y_grid[rows, k] = events[-1].y_jump.value
    return ForwardTrace(y_grid, events, h, batch.n_obs.copy(), batch.path_ids.copy(), tape)


def forward_path(model: NeuralJumpODE, path: SamplePath, grid: TimeGrid,
                 params=None, tape: Tape | None = None, train_rng=None,
                 record_grid: bool = True) -> ForwardTrace:
    """Single-path forward pass (batch of one).

    Pass a ``tape`` plus ``params`` bound to it (see ``NeuralJumpODE.bind``)
    to make the trace differentiable; by default a throwaway tape is used.
    """
    if tape is None:
        tape = Tape()
    batch = BatchData([path], grid)
    return forward_batch(model, tape, batch, params=params, train_rng=train_rng,
                         record_grid=record_grid)
