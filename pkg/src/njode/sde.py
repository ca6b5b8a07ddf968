"""SDE model definitions, Euler-Maruyama simulation, and conditional-expectation oracles.

Each model exposes drift/diffusion for the Euler scheme plus the closed-form
conditional expectation of the observed coordinates given one observation.
Internal state may be wider than the stored coordinates (Heston carries the
variance even when only the price is stored).

Per-path noise comes from counter-based Philox streams keyed on
(master_seed, path_id, purpose), so any subset of paths is bit-reproducible
regardless of generation order or worker count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NumericBlowupError(FloatingPointError):
    """Simulation or integration state left the finite range."""


@dataclass(frozen=True)
class TimeGrid:
    """Equidistant grid on [0, horizon] with ``steps`` intervals (steps+1 points)."""

    horizon: float = 1.0
    steps: int = 100

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if abs(self.mesh * self.steps - self.horizon) > 1e-12:
            raise ValueError("mesh * steps does not reproduce the horizon")

    @property
    def mesh(self) -> float:
        return self.horizon / self.steps

    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.mesh


# RNG stream purposes, mixed into the Philox key next to (master_seed, path_id).
STREAM_VALUES = 0
STREAM_SCHEDULE = 1


def path_stream(master_seed: int, path_id: int, purpose: int = STREAM_VALUES) -> np.random.Generator:
    """Independent per-path generator; key layout: seed | path_id | purpose."""
    if not (0 <= master_seed < 2**63 and 0 <= path_id < 2**60):
        raise ValueError("master_seed/path_id out of key range")
    key = (master_seed << 64) | (path_id << 4) | purpose
    return np.random.Generator(np.random.Philox(key=key))


class SdeModel:
    """Base for the dataset models.

    State vectors may be batched: drift/diffusion accept (state_dim,) or
    (batch, state_dim) arrays. ``diffusion_diag`` returns the per-coordinate
    noise loading, i.e. the increment is drift*dt + diffusion_diag*dW with dW
    already carrying any cross-correlation.
    """

    kind: str
    d_x: int          # stored/observed coordinates
    state_dim: int    # simulated coordinates
    noise_dim: int    # independent N(0, dt) draws consumed per step
    rho: float | None = None  # correlation applied to the raw draws, if any

    def params(self) -> dict[str, float]:
        raise NotImplementedError

    def initial_state(self) -> np.ndarray:
        raise NotImplementedError

    def drift(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def diffusion_diag(self, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def clamp(self, x: np.ndarray) -> np.ndarray:
        """Post-step projection; identity except where a scheme requires it."""
        return x

    def observed(self, state: np.ndarray) -> np.ndarray:
        """Slice the stored coordinates out of the simulated state."""
        return state[..., : self.d_x]

    def conditional_expectation(self, x_obs: np.ndarray, t_obs: float, t) -> np.ndarray:
        """E[X_t | observed x_obs at t_obs] for the stored coordinates.

        ``t`` may be a scalar (returns shape (d_x,)) or an array of times
        (returns shape (len(t), d_x)). Requires t >= t_obs.
        """
        raise NotImplementedError

    def correlate(self, raw: np.ndarray) -> np.ndarray:
        """Map iid N(0, dt) draws to the correlated increments the step consumes."""
        return raw


def _as_times(t) -> tuple[np.ndarray, bool]:
    arr = np.asarray(t, dtype=np.float64)
    return np.atleast_1d(arr), arr.ndim == 0


@dataclass(frozen=True)
class BlackScholes(SdeModel):
    """dX = mu*X dt + sigma*X dW; E[X_{t+s}|X_t] = X_t * exp(mu*s)."""

    mu: float = 2.0
    sigma: float = 0.3
    x0: float = 1.0

    kind = "black_scholes"
    d_x = 1
    state_dim = 1
    noise_dim = 1

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    def params(self):
        return {"mu": self.mu, "sigma": self.sigma, "x0": self.x0}

    def initial_state(self):
        return np.array([self.x0])

    def drift(self, t, x):
        return self.mu * x

    def diffusion_diag(self, t, x):
        return self.sigma * x

    def conditional_expectation(self, x_obs, t_obs, t):
        ts, scalar = _as_times(t)
        _check_horizon(ts, t_obs)
        out = np.asarray(x_obs, dtype=np.float64)[None, :] * np.exp(self.mu * (ts - t_obs))[:, None]
        return out[0] if scalar else out


@dataclass(frozen=True)
class OrnsteinUhlenbeck(SdeModel):
    """dX = -k*(X - m) dt + sigma dW; mean reverts to m at rate k."""

    k: float = 2.0
    m: float = 4.0
    sigma: float = 0.3
    x0: float = 1.0

    kind = "ornstein_uhlenbeck"
    d_x = 1
    state_dim = 1
    noise_dim = 1

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    def params(self):
        return {"k": self.k, "m": self.m, "sigma": self.sigma, "x0": self.x0}

    def initial_state(self):
        return np.array([self.x0])

    def drift(self, t, x):
        return -self.k * (x - self.m)

    def diffusion_diag(self, t, x):
        return self.sigma * np.ones_like(x)

    def conditional_expectation(self, x_obs, t_obs, t):
        ts, scalar = _as_times(t)
        _check_horizon(ts, t_obs)
        decay = np.exp(-self.k * (ts - t_obs))[:, None]
        out = np.asarray(x_obs, dtype=np.float64)[None, :] * decay + self.m * (1.0 - decay)
        return out[0] if scalar else out


@dataclass(frozen=True)
class Heston(SdeModel):
    """Stochastic-volatility model: dX = mu*X dt + sqrt(v)*X dW, dv = -k(v-m) dt + sigma*sqrt(v) dZ.

    Corr(W, Z) = rho. State is always (x, v); ``dim`` selects whether only the
    price (dim=1) or both coordinates (dim=2) are stored as targets. The price
    conditional expectation is X_t * exp(mu*s); the variance coordinate mean
    reverts exactly like an Ornstein-Uhlenbeck process.
    """

    mu: float = 2.0
    sigma: float = 0.3
    x0: float = 1.0
    k: float = 2.0
    m: float = 4.0
    v0: float = 4.0
    rho: float = 0.5
    dim: int = 1

    kind = "heston"
    state_dim = 2
    noise_dim = 2

    def __post_init__(self):
        if self.sigma <= 0 or self.k <= 0 or self.m <= 0 or self.v0 <= 0:
            raise ValueError("sigma, k, m, v0 must be positive")
        if abs(self.rho) > 1:
            raise ValueError("|rho| must be <= 1")
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")

    @property
    def d_x(self) -> int:
        return self.dim

    def params(self):
        return {"mu": self.mu, "sigma": self.sigma, "x0": self.x0, "k": self.k,
                "m": self.m, "v0": self.v0, "rho": self.rho, "dim": self.dim}

    def initial_state(self):
        return np.array([self.x0, self.v0])

    def drift(self, t, x):
        out = np.empty_like(x)
        out[..., 0] = self.mu * x[..., 0]
        out[..., 1] = -self.k * (x[..., 1] - self.m)
        return out

    def diffusion_diag(self, t, x):
        root_v = np.sqrt(np.maximum(x[..., 1], 0.0))
        out = np.empty_like(x)
        out[..., 0] = root_v * x[..., 0]
        out[..., 1] = self.sigma * root_v
        return out

    def correlate(self, raw):
        out = raw.copy()
        out[..., 1] = self.rho * raw[..., 0] + np.sqrt(1.0 - self.rho**2) * raw[..., 1]
        return out

    def conditional_expectation(self, x_obs, t_obs, t):
        ts, scalar = _as_times(t)
        _check_horizon(ts, t_obs)
        x_obs = np.asarray(x_obs, dtype=np.float64)
        out = np.empty((len(ts), self.d_x))
        out[:, 0] = x_obs[0] * np.exp(self.mu * (ts - t_obs))
        if self.d_x == 2:
            decay = np.exp(-self.k * (ts - t_obs))
            out[:, 1] = x_obs[1] * decay + self.m * (1.0 - decay)
        return out[0] if scalar else out


@dataclass(frozen=True)
class HestonNoFeller(Heston):
    """Heston sampled with the reflected-at-zero Euler variant.

    Meant for parameter sets violating the Feller condition (2*k*m >= sigma^2);
    any variance value driven below zero by a step is replaced by zero.
    """

    mu: float = 2.0
    sigma: float = 3.0
    x0: float = 1.0
    k: float = 2.0
    m: float = 1.0
    v0: float = 0.5
    rho: float = 0.5
    dim: int = 1

    kind = "heston_nofeller"

    def clamp(self, x):
        out = x.copy()
        out[..., 1] = np.maximum(out[..., 1], 0.0)
        return out


@dataclass(frozen=True)
class SineDriftBS(SdeModel):
    """Black-Scholes with time-dependent drift (alpha/2)*(sin(beta*t) + 1)."""

    alpha: float = 2.0
    beta: float = 2.0 * np.pi
    sigma: float = 0.3
    x0: float = 1.0

    kind = "sine_drift_bs"
    d_x = 1
    state_dim = 1
    noise_dim = 1

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    def params(self):
        return {"alpha": self.alpha, "beta": self.beta, "sigma": self.sigma, "x0": self.x0}

    def initial_state(self):
        return np.array([self.x0])

    def _mu(self, t: float) -> float:
        return 0.5 * self.alpha * (np.sin(self.beta * t) + 1.0)

    def drift(self, t, x):
        return self._mu(t) * x

    def diffusion_diag(self, t, x):
        return self.sigma * x

    def conditional_expectation(self, x_obs, t_obs, t):
        # integral of the drift rate has the closed form
        # (alpha/2) * [ (cos(beta*t_obs) - cos(beta*t)) / beta + (t - t_obs) ]
        ts, scalar = _as_times(t)
        _check_horizon(ts, t_obs)
        integral = 0.5 * self.alpha * (
            (np.cos(self.beta * t_obs) - np.cos(self.beta * ts)) / self.beta + (ts - t_obs)
        )
        out = np.asarray(x_obs, dtype=np.float64)[None, :] * np.exp(integral)[:, None]
        return out[0] if scalar else out


@dataclass(frozen=True)
class RegimeSwitch(SdeModel):
    """Ornstein-Uhlenbeck dynamics up to ``t_switch``, Black-Scholes afterwards.

    The second regime continues from wherever the first one ends, so paths are
    continuous across the switch.
    """

    ou_k: float = 2.0
    ou_m: float = 10.0
    ou_sigma: float = 0.3
    x0: float = 1.0
    bs_mu: float = 2.0
    bs_sigma: float = 0.3
    t_switch: float = 0.5

    kind = "regime_switch"
    d_x = 1
    state_dim = 1
    noise_dim = 1

    def __post_init__(self):
        if self.ou_sigma <= 0 or self.bs_sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.t_switch <= 0:
            raise ValueError("t_switch must be positive")

    def params(self):
        return {"ou_k": self.ou_k, "ou_m": self.ou_m, "ou_sigma": self.ou_sigma,
                "x0": self.x0, "bs_mu": self.bs_mu, "bs_sigma": self.bs_sigma,
                "t_switch": self.t_switch}

    def initial_state(self):
        return np.array([self.x0])

    def drift(self, t, x):
        if t < self.t_switch:
            return -self.ou_k * (x - self.ou_m)
        return self.bs_mu * x

    def diffusion_diag(self, t, x):
        if t < self.t_switch:
            return self.ou_sigma * np.ones_like(x)
        return self.bs_sigma * x

    def conditional_expectation(self, x_obs, t_obs, t):
        ts, scalar = _as_times(t)
        _check_horizon(ts, t_obs)
        x_obs = np.asarray(x_obs, dtype=np.float64)
        out = np.empty((len(ts), 1))
        if t_obs >= self.t_switch:
            out[:, 0] = x_obs[0] * np.exp(self.bs_mu * (ts - t_obs))
        else:
            # OU oracle up to the switch; paths beyond it pick up the BS factor
            # from the OU mean at the switch time.
            before = ts <= self.t_switch
            decay = np.exp(-self.ou_k * (ts[before] - t_obs))
            out[before, 0] = x_obs[0] * decay + self.ou_m * (1.0 - decay)
            after = ~before
            if np.any(after):
                d_sw = np.exp(-self.ou_k * (self.t_switch - t_obs))
                at_switch = x_obs[0] * d_sw + self.ou_m * (1.0 - d_sw)
                out[after, 0] = at_switch * np.exp(self.bs_mu * (ts[after] - self.t_switch))
        return out[0] if scalar else out


MODEL_KINDS: dict[str, type] = {
    cls.kind: cls
    for cls in (BlackScholes, OrnsteinUhlenbeck, Heston, HestonNoFeller, SineDriftBS, RegimeSwitch)
}


def model_from_params(kind: str, params: dict[str, float]) -> SdeModel:
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    cls = MODEL_KINDS[kind]
    if kind in ("heston", "heston_nofeller") and "dim" in params:
        params = dict(params)
        params["dim"] = int(params["dim"])
    return cls(**params)


def _check_horizon(ts: np.ndarray, t_obs: float) -> None:
    if np.any(ts < t_obs - 1e-12):
        raise ValueError("conditional expectation requires t >= t_obs")


def euler_maruyama_step(model: SdeModel, t: float, x: np.ndarray, delta: float,
                        dw: np.ndarray) -> np.ndarray:
    """One Euler-Maruyama step x + drift*delta + diffusion*dw, then model clamp.

    ``dw`` must hold N(0, delta) draws of the model's noise dimension, already
    correlated where the model requires it. Accepts a single state vector or a
    (batch, state_dim) block.
    """
    x = np.asarray(x, dtype=np.float64)
    if delta <= 0:
        raise ValueError("delta must be positive")
    if not np.all(np.isfinite(x)):
        raise NumericBlowupError("numeric blow-up: non-finite state entering step")
    dw = np.asarray(dw, dtype=np.float64)
    if dw.shape[-1] != model.noise_dim:
        raise ValueError(f"noise dimension {dw.shape[-1]} != model's {model.noise_dim}")
    out = x + model.drift(t, x) * delta + model.diffusion_diag(t, x) * dw[..., : x.shape[-1]]
    return model.clamp(out)


def _simulate_block(model: SdeModel, t0: float, x0: np.ndarray, n_steps: int,
                    delta: float, noise: np.ndarray, path_offset: int = 0) -> np.ndarray:
    """Euler chain for a block of paths in lock-step.

    ``x0``: (batch, state_dim) initial states; ``noise``: (batch, n_steps,
    noise_dim) iid N(0, delta) draws (correlation applied here). Returns
    (batch, n_steps + 1, state_dim). ``path_offset`` names paths in errors.
    """
    batch = x0.shape[0]
    out = np.empty((batch, n_steps + 1, model.state_dim))
    out[:, 0] = x0
    dw = model.correlate(noise)
    state = x0
    for i in range(n_steps):
        state = euler_maruyama_step(model, t0 + i * delta, state, delta, dw[:, i])
        if not np.all(np.isfinite(state)):
            bad = int(np.flatnonzero(~np.isfinite(state).all(axis=-1))[0])
            raise NumericBlowupError(
                f"numeric blow-up: path {path_offset + bad} non-finite at step {i + 1}"
            )
        out[:, i + 1] = state
    return out


def simulate_paths(model: SdeModel, grid: TimeGrid, n_paths: int, master_seed: int,
                   first_path_id: int = 0, full_state: bool = False) -> np.ndarray:
    """Simulate ``n_paths`` Euler paths; returns (n_paths, steps+1, d_x) values.

    Path ``first_path_id + j`` always consumes its own noise stream, so any
    sub-range reproduces the corresponding slice of a larger run bitwise.
    ``full_state`` returns the complete simulated state instead of just the
    stored coordinates (Heston: price and variance).
    """
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    k, delta = grid.steps, grid.mesh
    noise = np.empty((n_paths, k, model.noise_dim))
    for j in range(n_paths):
        rng = path_stream(master_seed, first_path_id + j, STREAM_VALUES)
        noise[j] = rng.normal(scale=np.sqrt(delta), size=(k, model.noise_dim))
    x0 = np.broadcast_to(model.initial_state(), (n_paths, model.state_dim)).copy()
    states = _simulate_block(model, 0.0, x0, k, delta, noise, path_offset=first_path_id)
    return states if full_state else model.observed(states)


def true_conditional_expectation(model: SdeModel, x_obs: np.ndarray, t_obs: float, t):
    """E[X_t | X_{t_obs} = x_obs] per the model's closed form; t may be an array."""
    return model.conditional_expectation(np.asarray(x_obs, dtype=np.float64), float(t_obs), t)
