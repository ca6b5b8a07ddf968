"""Training objective, its masked and ergodic variants, oracle references, and the metric.

The per-observation penalty is (|x - y| + |y - y_minus|)^2: the first part
scores the post-jump output against the observation, the second the jump size,
whose L2 minimizer is the conditional expectation. Observation index 0 (the
given initial value) never contributes a term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .data import SamplePath
from .model import ForwardTrace
from .sde import SdeModel, TimeGrid


@dataclass
class LossReport:
    """One evaluation row; ``loss_diff_se`` is the paired-difference standard error
    between per-path model and oracle loss terms (diagnostic, not exported)."""

    epoch: int
    train_loss: float
    test_loss: float
    oracle_loss: float
    relative_difference: float
    eval_metric: float
    loss_diff_se: float | None = None

    CSV_FIELDS = ("epoch", "train_loss", "test_loss", "oracle_loss",
                  "relative_difference", "eval_metric")


def _event_terms(ev, use_masks: bool) -> np.ndarray:
    """(rows,) penalty values for one observation event."""
    d_obs = ev.x_obs - ev.y_jump.value
    d_jump = ev.y_jump.value - ev.y_left.value
    if use_masks:
        d_obs = d_obs * ev.mask
        d_jump = d_jump * ev.mask
    s = np.linalg.norm(d_obs, axis=1) + np.linalg.norm(d_jump, axis=1)
    return s * s


def per_path_terms(trace: ForwardTrace, use_masks: bool = False) -> np.ndarray:
    """Per-path loss terms: mean penalty over post-initial observations.

    Paths with no post-initial observation contribute 0.
    """
    b = len(trace.path_ids)
    acc = np.zeros(b)
    for ev in trace.events:
        if ev.grid_index == 0:
            continue
        acc[ev.rows] += _event_terms(ev, use_masks)
    n_post = trace.n_post
    return np.where(n_post > 0, acc / np.maximum(n_post, 1), 0.0)


def batch_loss(trace: ForwardTrace, use_masks: bool = False) -> Var:
    """Differentiable mean-over-paths loss of a (batched) trace."""
    b = len(trace.path_ids)
    loss_rows = np.zeros((b, 1))
    for ev in trace.events:
        if ev.grid_index == 0:
            continue
        d_obs = ad.sub(ev.x_obs, ev.y_jump)
        d_jump = ad.sub(ev.y_jump, ev.y_left)
        if use_masks:
            d_obs = ad.mul(d_obs, ev.mask)
            d_jump = ad.mul(d_jump, ev.mask)
        s = ad.add(ad.norm2_rows(d_obs), ad.norm2_rows(d_jump))
        loss_rows = ad.add_rows(loss_rows, ev.rows, ad.mul(s, s))
    n_post = trace.n_post
    inv = np.where(n_post > 0, 1.0 / np.maximum(n_post, 1), 0.0)[:, None]
    return ad.mul(ad.sum_all(ad.mul(loss_rows, inv)), 1.0 / b)


def path_loss_term(path: SamplePath, trace: ForwardTrace) -> float:
    """Loss term of a single path (batch-of-one trace)."""
    if len(trace.path_ids) != 1 or trace.path_ids[0] != path.path_id:
        raise ValueError("trace does not belong to this path")
    return float(per_path_terms(trace, use_masks=False)[0])


def _mean_by_path_id(paths, values) -> float:
    order = np.argsort([p.path_id for p in paths], kind="stable")
    return float(np.asarray(values)[order].sum() / len(values))


def empirical_loss(paths: list[SamplePath], traces: list[ForwardTrace]) -> float:
    """Mean of per-path terms, reduced in path-id order (permutation invariant)."""
    if not paths or len(paths) != len(traces):
        raise ValueError("need equal-length, nonempty path/trace lists")
    terms = [path_loss_term(p, t) for p, t in zip(paths, traces)]
    return _mean_by_path_id(paths, terms)


def masked_loss(paths: list[SamplePath], traces: list[ForwardTrace]) -> float:
    """Like empirical_loss, with the observation mask inside both norms."""
    if not paths or len(paths) != len(traces):
        raise ValueError("need equal-length, nonempty path/trace lists")
    terms = [float(per_path_terms(t, use_masks=True)[0]) for t in traces]
    return _mean_by_path_id(paths, terms)


def ergodic_segments(path: SamplePath, grid: TimeGrid) -> list[SamplePath]:
    """Split a long path into one-observation samples restarted at each observation.

    Segment j runs from observation j-1 (time reset to 0) to observation j.
    """
    idx = path.schedule.indices
    if len(idx) < 2:
        raise ValueError("ergodic approximation needs at least 2 observations")
    from .data import ObservationSchedule

    segments = []
    for j in range(1, len(idx)):
        a, b = int(idx[j - 1]), int(idx[j])
        gap = b - a
        seg_sched = ObservationSchedule(
            np.array([0, gap]), np.ones((2, path.values.shape[0]), dtype=np.uint8))
        segments.append(SamplePath(j - 1, path.values[:, a:b + 1].copy(), seg_sched))
    return segments


def ergodic_loss(path: SamplePath, segment_traces: list[ForwardTrace]) -> float:
    """Single-path objective: mean penalty over segments, one observation each."""
    idx = path.schedule.indices
    if len(idx) < 2:
        raise ValueError("ergodic approximation needs at least 2 observations")
    if len(segment_traces) != len(idx) - 1:
        raise ValueError("one trace per inter-observation segment required")
    terms = [float(per_path_terms(t)[0]) for t in segment_traces]
    return float(np.sum(terms) / len(terms))


def oracle_path_values(model: SdeModel, path: SamplePath, grid: TimeGrid) -> np.ndarray:
    """Conditional-expectation process on the grid, (steps+1, d_x).

    Piecewise: from each observation, the closed form extrapolates until just
    before the next observation, where the process jumps onto the new value.
    """
    times = grid.times()
    k = grid.steps
    idx = path.schedule.indices
    out = np.empty((k + 1, path.values.shape[0]))
    ends = np.append(idx[1:], k + 1)
    for a, b in zip(idx, ends):
        x_a = path.values[:, a]
        out[a:b] = model.conditional_expectation(x_a, times[a], times[a:b])
    return out


def oracle_loss_terms(paths: list[SamplePath], model: SdeModel, grid: TimeGrid) -> np.ndarray:
    """Per-path loss of the oracle predictor itself.

    The oracle jumps exactly onto each observation, so only the jump-size part
    survives: the squared distance between the observation and the conditional
    expectation carried from the previous one.
    """
    times = grid.times()
    terms = np.zeros(len(paths))
    for j, p in enumerate(paths):
        idx = p.schedule.indices
        if len(idx) < 2:
            continue
        acc = 0.0
        for i in range(1, len(idx)):
            prev, cur = int(idx[i - 1]), int(idx[i])
            pred = model.conditional_expectation(p.values[:, prev], times[prev], times[cur])
            diff = p.values[:, cur] - pred
            acc += float(np.linalg.norm(diff) ** 2)
        terms[j] = acc / (len(idx) - 1)
    return terms


def oracle_loss(paths: list[SamplePath], model: SdeModel, grid: TimeGrid) -> float:
    """Mean oracle loss term, reduced in path-id order."""
    if not paths:
        raise ValueError("need at least one path")
    return _mean_by_path_id(paths, oracle_loss_terms(paths, model, grid))


def evaluation_metric(oracle: np.ndarray, y_grid: np.ndarray) -> float:
    """Grid-averaged squared distance between oracle and model output.

    Both arrays are (paths, steps+1, coords); squared errors are summed over
    coordinates and averaged over grid points and paths.
    """
    if oracle.shape != y_grid.shape:
        raise ValueError(f"shape mismatch: {oracle.shape} vs {y_grid.shape}")
    sq = ((oracle - y_grid) ** 2).sum(axis=2)
    return float(sq.mean())
