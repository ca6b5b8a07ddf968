"""Feed-forward networks, weight initialization, and Adam with decoupled decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var


class NonFiniteGradientError(ValueError):
    """Raised by adam_step when a gradient contains NaN/Inf; no update is applied."""


@dataclass
class FeedForwardNet:
    """Dense net: tanh on hidden layers, identity output, optional input shortcut.

    ``widths`` is the full layer list, e.g. ``[in, h1, h2, out]``; any number
    of hidden layers (including zero) is supported. Inverted dropout with rate
    ``dropout`` follows each hidden nonlinearity in training mode, so
    evaluation applies the raw weights with no rescaling. ``residual`` adds
    the input to the output and requires matching widths.
    """

    widths: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout: float = 0.1
    residual: bool = False

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("need at least an input and an output width")
        if self.residual and self.widths[0] != self.widths[-1]:
            raise ValueError("residual shortcut requires input width == output width")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.widths[i], self.widths[i + 1])
            if w.shape != expect or b.shape != (expect[1],):
                raise ValueError(f"layer {i}: weight {w.shape}, bias {b.shape}, expected {expect}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list in fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def bind(self, tape: Tape) -> list[Var]:
        """Track all parameters on ``tape``, same order as ``parameters()``."""
        return [tape.leaf(p) for p in self.parameters()]

    def forward(self, x, params: list | None = None, train_rng: np.random.Generator | None = None):
        """Run the net on a (batch, in) Var or array.

        ``params`` are bound Vars (or raw arrays) in ``parameters()`` order;
        defaults to the stored arrays (constants, no gradient). A ``train_rng``
        turns dropout on; its draws make the pass deterministic per rng state.
        """
        if params is None:
            params = self.parameters()
        a = x
        n = self.n_layers
        for i in range(n):
            w, b = params[2 * i], params[2 * i + 1]
            a = ad.affine(a, w, b)
            if i < n - 1:
                a = ad.tanh(a)
                if train_rng is not None and self.dropout > 0.0:
                    keep = 1.0 - self.dropout
                    mask = (train_rng.random(a.value.shape) >= self.dropout) / keep
                    a = ad.mul(a, mask)
        if self.residual:
            a = ad.add(a, x)
        return a


def init_weights(widths: list[int], seed: int, dropout: float = 0.1,
                 residual: bool = False) -> FeedForwardNet:
    """Fresh net with weights and biases ~ Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).

    Uniform biases break the symmetry of centered tanh units, which matters
    when inputs live in a narrow or saturated range.
    """
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return FeedForwardNet(list(widths), weights, biases, dropout=dropout, residual=residual)


def net_forward(net: FeedForwardNet, x, mode: str = "eval", seed: int = 0):
    """Standalone forward for a single input row; returns (output Var, tape).

    ``mode`` is "eval" or "train"; training mode draws dropout masks from
    ``seed``. Gradients of any scalar of the output w.r.t. the parameters and
    the input are available from the tape (input leaf is node 0, parameters
    follow in ``parameters()`` order).
    """
    tape = Tape()
    xv = np.asarray(x, dtype=np.float64).reshape(1, -1)
    x_var = tape.leaf(xv)
    params = net.bind(tape)
    rng = np.random.default_rng(seed) if mode == "train" else None
    y = net.forward(x_var, params=params, train_rng=rng)
    return y, tape, x_var, params


def net_backward(tape: Tape, y: Var, upstream) -> ad.Gradients:
    """Reverse pass seeded with ``upstream`` (shape of y); one use per tape."""
    seed = np.asarray(upstream, dtype=np.float64).reshape(y.value.shape)
    return tape.backward(y, seed)


@dataclass
class AdamState:
    """Adam moments plus hyperparameters; decay is decoupled from the update."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0005

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 0.001,
                   weight_decay: float = 0.0005) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            lr=lr,
            weight_decay=weight_decay,
        )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """One in-place Adam update with decoupled weight decay.

    Decay shrinks the parameters directly (p *= 1 - lr*wd) before the
    bias-corrected moment update, keeping it independent of the adaptive
    scaling. Non-finite gradients raise before anything is mutated.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"param {i}: grad shape {g.shape} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {i}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
