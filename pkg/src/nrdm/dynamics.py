"""Forward noising dynamics and the reverse probability-flow ODE.

Schedules are linear-drift, state-independent-diffusion processes with closed
form pushforwards, so a Gaussian-mixture data density stays a Gaussian mixture
at every time and the perturbed score is available exactly. The parameterized
schedule replaces the hand-designed drift/diffusion pair with learnable
time-gate networks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_array
from .residual import time_embedding

__all__ = [
    "make_rng",
    "Schedule",
    "OuSchedule",
    "VpSchedule",
    "VeSchedule",
    "ParameterizedSchedule",
    "DiscreteSchedule",
    "ScoreOracle",
    "Trajectory",
    "forward_sde_step",
    "ddpm_forward",
    "pf_ode_rhs",
    "euler_solve",
    "heun_solve",
    "sde_solve",
    "analytic_score",
    "analytic_score_t",
    "sde_vs_pfode_marginal_check",
]


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; every stochastic routine takes an explicit seed."""
    return np.random.Generator(np.random.Philox(seed))


class Schedule:
    """Linear-drift forward process dz = mu(z,t) dt + sigma(t) dw on t in [0,1].

    Subclasses provide drift/diffusion plus the closed-form pushforward pieces:
    scale(t) multiplying the initial state and added_var(t), the variance the
    noise has injected by time t.
    """

    kind = "abstract"

    def drift(self, z: np.ndarray, t: float) -> np.ndarray:
        raise NotImplementedError

    def sigma(self, t: float) -> float:
        raise NotImplementedError

    def scale(self, t):
        raise NotImplementedError

    def added_var(self, t):
        raise NotImplementedError

    def prior_sample(self, shape, rng: np.random.Generator) -> np.ndarray:
        """Sample the terminal-time reference distribution."""
        return rng.standard_normal(shape)

    def perturb(self, x0: np.ndarray, t, eps: np.ndarray):
        """Closed-form sample of z_t given z_0 = x0 (t may be per-sample)."""
        t = np.asarray(t, dtype=np.float64)
        s = np.asarray(self.scale(t))
        v = np.asarray(self.added_var(t))
        if x0.ndim == 2 and s.ndim == 1:
            s = s[:, None]
            v = v[:, None]
        return s * x0 + np.sqrt(v) * eps


class OuSchedule(Schedule):
    """Ornstein-Uhlenbeck process: mu = -rate/2 * z, sigma = sqrt(rate).

    Stationary at the standard normal; rate 1 gives mu = -z/2, sigma = 1.
    """

    kind = "ou"

    def __init__(self, rate: float = 1.0):
        if rate <= 0:
            raise ValueError(f"rate must be positive, got {rate}")
        self.rate = float(rate)

    def drift(self, z, t):
        return -0.5 * self.rate * np.asarray(z)

    def sigma(self, t):
        return float(np.sqrt(self.rate))

    def scale(self, t):
        return np.exp(-0.5 * self.rate * np.asarray(t, dtype=np.float64))

    def added_var(self, t):
        return 1.0 - np.exp(-self.rate * np.asarray(t, dtype=np.float64))


class VpSchedule(Schedule):
    """Variance-preserving process with linear noise ramp beta(t)."""

    kind = "vp"

    def __init__(self, beta_min: float = 0.1, beta_max: float = 20.0):
        if beta_min <= 0 or beta_max < beta_min:
            raise ValueError(f"need 0 < beta_min <= beta_max, got {beta_min}, {beta_max}")
        self.beta_min = float(beta_min)
        self.beta_max = float(beta_max)

    def beta(self, t):
        return self.beta_min + np.asarray(t, dtype=np.float64) * (self.beta_max - self.beta_min)

    def drift(self, z, t):
        return -0.5 * self.beta(t) * np.asarray(z)

    def sigma(self, t):
        return float(np.sqrt(self.beta(t)))

    def scale(self, t):
        t = np.asarray(t, dtype=np.float64)
        integral = self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
        return np.exp(-0.5 * integral)

    def added_var(self, t):
        return 1.0 - self.scale(t) ** 2


class VeSchedule(Schedule):
    """Variance-exploding process: zero drift, geometric sigma ramp."""

    kind = "ve"

    def __init__(self, sigma_min: float = 0.01, sigma_max: float = 8.0):
        if sigma_min <= 0 or sigma_max <= sigma_min:
            raise ValueError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
        self.sigma_min = float(sigma_min)
        self.sigma_max = float(sigma_max)

    def drift(self, z, t):
        return np.zeros_like(np.asarray(z, dtype=np.float64))

    def sigma(self, t):
        ratio = self.sigma_max / self.sigma_min
        return float(self.sigma_min * ratio ** t * np.sqrt(2.0 * np.log(ratio)))

    def scale(self, t):
        return np.ones_like(np.asarray(t, dtype=np.float64))

    def added_var(self, t):
        ratio = self.sigma_max / self.sigma_min
        t = np.asarray(t, dtype=np.float64)
        return self.sigma_min ** 2 * (ratio ** (2.0 * t) - 1.0)

    def prior_sample(self, shape, rng):
        return self.sigma_max * rng.standard_normal(shape)


class ParameterizedSchedule(Schedule):
    """Learnable mean-variance scheduler: time-gate networks replace mu and sigma.

    The scale gate is forced non-positive through a softplus so the implied
    squared diffusion -2 * alpha(t) stays non-negative by construction. Each
    gate is a two-layer width-32 network over the sinusoidal time embedding
    emitting one value per channel.
    """

    kind = "parameterized"

    def __init__(self, dim: int, hidden: int = 32, emb_dim: int = 32,
                 rng: np.random.Generator | None = None, beta_mode: str = "time-only"):
        if beta_mode not in ("time-only", "drift-composed"):
            raise ValueError(f"unknown beta mode {beta_mode!r}")
        rng = rng or make_rng(0)
        self.dim = dim
        self.emb_dim = emb_dim
        self.beta_mode = beta_mode
        self.base: Schedule | None = None  # drift source for drift-composed mode
        def layer(nin, nout):
            return rng.normal(0.0, 1.0 / np.sqrt(nin), (nin, nout))
        self.p = {
            "a.w1": layer(emb_dim, hidden), "a.b1": np.zeros(hidden),
            "a.w2": layer(hidden, dim), "a.b2": np.zeros(dim),
            "b.w1": layer(emb_dim, hidden), "b.b1": np.zeros(hidden),
            "b.w2": layer(hidden, dim), "b.b2": np.zeros(dim),
        }

    def _net(self, head: str, t) -> np.ndarray:
        emb = time_embedding(t, self.emb_dim)
        h = np.tanh(emb @ self.p[f"{head}.w1"] + self.p[f"{head}.b1"])
        return h @ self.p[f"{head}.w2"] + self.p[f"{head}.b2"]

    def alpha_gate(self, t) -> np.ndarray:
        """Non-positive per-channel scale gate, shape (n, dim)."""
        raw = self._net("a", t)
        return -np.logaddexp(0.0, raw)  # -softplus

    def beta_gate(self, t, z=None) -> np.ndarray:
        if self.beta_mode == "drift-composed":
            if self.base is None or z is None:
                raise ValueError("drift-composed mode needs a base schedule and state")
            return self.base.drift(z, t)
        return self._net("b", t)

    def sigma(self, t):
        # sigma^2 = -2 * alpha by the gate correspondence
        return np.sqrt(-2.0 * self.alpha_gate(t))

    def drift(self, z, t):
        raise NotImplementedError("parameterized schedules define the reverse flow only")

    def scale(self, t):
        raise NotImplementedError("no closed-form pushforward for learned gates")

    def added_var(self, t):
        raise NotImplementedError("no closed-form pushforward for learned gates")


_LINEAR_DRIFT = ("ou", "vp", "ve")


@dataclass
class DiscreteSchedule:
    """Cumulative signal-retention table for the discrete forward process."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha_bar, dtype=np.float64)
        if a.ndim != 1 or a.size == 0:
            raise ValueError("alpha_bar must be a non-empty 1-D array")
        if np.any(a <= 0) or np.any(a > 1):
            raise ValueError("alpha_bar entries must lie in (0, 1]")
        if np.any(np.diff(a) > 0):
            raise ValueError("alpha_bar must be non-increasing")
        if a[0] < 0.99:
            raise ValueError(f"alpha_bar[0] should be close to 1, got {a[0]}")
        if a[-1] > 0.01:
            raise ValueError(f"alpha_bar[-1] should be close to 0, got {a[-1]}")
        self.alpha_bar = a

    @property
    def steps(self) -> int:
        return self.alpha_bar.size

    @staticmethod
    def default(steps: int = 1000) -> "DiscreteSchedule":
        # linear-in-t^2 noise ramp, clipped away from the exact endpoints
        u = (np.arange(steps, dtype=np.float64) + 1.0) / steps
        return DiscreteSchedule(np.clip(1.0 - u * u, 1e-5, 0.9999))

    @staticmethod
    def from_csv(path) -> "DiscreteSchedule":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["t", "alpha_bar"]:
                raise ValueError(
                    f"schedule table must have header 't,alpha_bar', got {reader.fieldnames}")
            for row in reader:
                rows.append((float(row["t"]), float(row["alpha_bar"])))
        values = np.array([v for _, v in rows])
        if np.any(np.diff(values) >= 0):
            raise ValueError("alpha_bar column must be strictly decreasing")
        return DiscreteSchedule(values)


def ddpm_forward(x0, t_index: int, schedule: DiscreteSchedule, eps) -> Tensor:
    """Accumulated discrete forward step: sqrt(ab) x0 + sqrt(1 - ab) eps."""
    if not 0 <= t_index < schedule.steps:
        raise IndexError(f"t_index {t_index} outside [0, {schedule.steps})")
    ab = schedule.alpha_bar[t_index]
    return Tensor(np.sqrt(ab) * as_array(x0) + np.sqrt(1.0 - ab) * as_array(eps))


@dataclass
class ScoreOracle:
    """Isotropic Gaussian mixture with exact density and score."""

    weights: np.ndarray
    means: np.ndarray      # (k, d)
    variances: np.ndarray  # (k,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        v = np.asarray(self.variances, dtype=np.float64)
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        if np.any(v <= 0):
            raise ValueError("variances must be positive")
        if m.shape[0] != w.size or v.size != w.size:
            raise ValueError("weights, means, variances must agree on component count")
        self.weights, self.means, self.variances = w, m, v

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @staticmethod
    def single(mean=0.0, variance: float = 1.0, dim: int | None = None) -> "ScoreOracle":
        m = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        if dim is not None and m.size == 1:
            m = np.full(dim, m[0])
        return ScoreOracle(np.array([1.0]), m[None, :], np.array([variance]))

    def _log_resp(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = np.atleast_2d(z)
        d = self.dim
        diff = z[:, None, :] - self.means[None, :, :]          # (n, k, d)
        sq = np.sum(diff * diff, axis=2)                       # (n, k)
        logw = (np.log(self.weights)[None, :]
                - 0.5 * sq / self.variances[None, :]
                - 0.5 * d * np.log(2.0 * np.pi * self.variances)[None, :])
        norm = np.logaddexp.reduce(logw, axis=1, keepdims=True)
        return logw - norm, norm

    def log_density(self, z) -> np.ndarray:
        _, norm = self._log_resp(np.atleast_2d(as_array(z)))
        return norm[:, 0]

    def score(self, z) -> np.ndarray:
        z_arr = np.atleast_2d(as_array(z))
        log_r, _ = self._log_resp(z_arr)
        resp = np.exp(log_r)                                    # (n, k)
        pull = -(z_arr[:, None, :] - self.means[None, :, :]) / self.variances[None, :, None]
        out = np.sum(resp[:, :, None] * pull, axis=1)
        return out if as_array(z).ndim > 1 else out[0]

    def pushforward(self, schedule: Schedule, t: float) -> "ScoreOracle":
        if schedule.kind not in _LINEAR_DRIFT:
            raise ValueError(
                f"no closed-form pushforward for schedule kind {schedule.kind!r}")
        s = float(schedule.scale(t))
        va = float(schedule.added_var(t))
        return ScoreOracle(self.weights, s * self.means, s * s * self.variances + va)

    def score_t(self, z, t, schedule: Schedule) -> np.ndarray:
        """Exact perturbed-data score; t may be scalar or per-sample."""
        if schedule.kind not in _LINEAR_DRIFT:
            raise ValueError(
                f"no closed-form perturbed score for schedule kind {schedule.kind!r}")
        t_arr = np.asarray(t, dtype=np.float64)
        if t_arr.ndim == 0:
            return self.pushforward(schedule, float(t_arr)).score(z)
        z_arr = np.atleast_2d(as_array(z))
        s = np.asarray(schedule.scale(t_arr))                  # (n,)
        va = np.asarray(schedule.added_var(t_arr))             # (n,)
        means = s[:, None, None] * self.means[None, :, :]      # (n, k, d)
        variances = (s * s)[:, None] * self.variances[None, :] + va[:, None]  # (n, k)
        diff = z_arr[:, None, :] - means
        sq = np.sum(diff * diff, axis=2)
        d = self.dim
        logw = (np.log(self.weights)[None, :] - 0.5 * sq / variances
                - 0.5 * d * np.log(2.0 * np.pi * variances))
        logw -= np.logaddexp.reduce(logw, axis=1, keepdims=True)
        resp = np.exp(logw)
        pull = -diff / variances[:, :, None]
        return np.sum(resp[:, :, None] * pull, axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        comp = rng.choice(self.weights.size, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        x = self.means[comp] + np.sqrt(self.variances[comp])[:, None] * noise
        return x, comp


def analytic_score(oracle: ScoreOracle, z) -> Tensor:
    """Exact score of the mixture density at z."""
    return Tensor(oracle.score(z))


def analytic_score_t(oracle: ScoreOracle, z, t, schedule: Schedule) -> Tensor:
    """Exact score of the time-t perturbed density under a linear-drift schedule."""
    return Tensor(oracle.score_t(z, t, schedule))


def forward_sde_step(z, t: float, dt: float, schedule: Schedule, eps) -> Tensor:
    """One Euler-Maruyama step of the forward noising process."""
    if dt < 0:
        raise ValueError(f"dt must be non-negative, got {dt}")
    z_arr = as_array(z)
    out = z_arr + schedule.drift(z_arr, t) * dt + schedule.sigma(t) * np.sqrt(dt) * as_array(eps)
    return Tensor(out)


def pf_ode_rhs(z, t: float, schedule: Schedule, score) -> Tensor:
    """Probability-flow right-hand side sharing marginals with the forward SDE.

    For closed-form schedules: mu(z,t) - sigma(t)^2 / 2 * score(z,t). For the
    parameterized schedule the learned gates take over: alpha(t) F(z,t) + beta(t).
    """
    z_arr = as_array(z)
    if isinstance(schedule, ParameterizedSchedule):
        a = schedule.alpha_gate(t)
        b = schedule.beta_gate(t, z_arr)
        return Tensor(a * as_array(score(z_arr, t)) + b)
    sig = schedule.sigma(t)
    return Tensor(schedule.drift(z_arr, t) - 0.5 * sig * sig * as_array(score(z_arr, t)))


@dataclass
class Trajectory:
    """Time-ordered states of one integration; times are stored ascending
    regardless of the direction the solver ran."""

    times: np.ndarray
    states: np.ndarray         # (len(times), ...) aligned with times
    t_start: float
    t_end: float
    rng_seed: int | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.times.ndim != 1 or np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if self.states.shape[0] != self.times.size:
            raise ValueError("states count must equal times count")

    @classmethod
    def from_run(cls, times, states, rng_seed=None) -> "Trajectory":
        times = np.asarray(times, dtype=np.float64)
        states = np.asarray(states, dtype=np.float64)
        t_start, t_end = float(times[0]), float(times[-1])
        if times.size > 1 and times[1] < times[0]:
            times = times[::-1].copy()
            states = states[::-1].copy()
        return cls(times, states, t_start, t_end, rng_seed)

    @property
    def initial(self) -> np.ndarray:
        """State at the integration start time."""
        return self.states[0] if self.t_start <= self.t_end else self.states[-1]

    @property
    def final(self) -> np.ndarray:
        """State at the integration end time."""
        return self.states[-1] if self.t_start <= self.t_end else self.states[0]


def _grid(t0: float, t1: float, steps: int) -> np.ndarray:
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    return np.linspace(t0, t1, steps + 1)


def euler_solve(rhs, z0, t0: float, t1: float, steps: int) -> Trajectory:
    """Fixed-step explicit Euler; t1 < t0 integrates in reverse."""
    ts = _grid(t0, t1, steps)
    z = np.array(as_array(z0), dtype=np.float64, copy=True)
    states = [z.copy()]
    for k in range(steps):
        dt = ts[k + 1] - ts[k]
        z = z + dt * as_array(rhs(z, float(ts[k])))
        states.append(z.copy())
    return Trajectory.from_run(ts, np.stack(states))


def heun_solve(rhs, z0, t0: float, t1: float, steps: int) -> Trajectory:
    """Fixed-step Heun predictor-corrector (order 2); same contract as Euler."""
    ts = _grid(t0, t1, steps)
    z = np.array(as_array(z0), dtype=np.float64, copy=True)
    states = [z.copy()]
    for k in range(steps):
        dt = ts[k + 1] - ts[k]
        f0 = as_array(rhs(z, float(ts[k])))
        pred = z + dt * f0
        f1 = as_array(rhs(pred, float(ts[k + 1])))
        z = z + 0.5 * dt * (f0 + f1)
        states.append(z.copy())
    return Trajectory.from_run(ts, np.stack(states))


def sde_solve(schedule: Schedule, z0, t0: float, t1: float, steps: int,
              seed: int) -> Trajectory:
    """Euler-Maruyama path of the forward SDE (increasing time only)."""
    if t1 < t0:
        raise ValueError("forward SDE paths run in increasing time")
    ts = _grid(t0, t1, steps)
    rng = make_rng(seed)
    z = np.array(as_array(z0), dtype=np.float64, copy=True)
    states = [z.copy()]
    for k in range(steps):
        dt = ts[k + 1] - ts[k]
        eps = rng.standard_normal(z.shape)
        z = forward_sde_step(z, float(ts[k]), float(dt), schedule, eps).array
        states.append(z.copy())
    return Trajectory.from_run(ts, np.stack(states), rng_seed=seed)


@dataclass
class MarginalReport:
    """Per-time first and second moment gaps between SDE and PF-ODE clouds."""

    times: np.ndarray
    mean_discrepancy: np.ndarray
    cov_discrepancy: np.ndarray
    n_samples: int
    seed: int

    @property
    def max_mean(self) -> float:
        return float(np.max(self.mean_discrepancy))

    @property
    def max_cov(self) -> float:
        return float(np.max(self.cov_discrepancy))

    def rows(self) -> list[dict]:
        return [{"t": float(t), "mean_discrepancy": float(m), "cov_discrepancy": float(c)}
                for t, m, c in zip(self.times, self.mean_discrepancy, self.cov_discrepancy)]


def _moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    return mean, cov


def sde_vs_pfode_marginal_check(oracle: ScoreOracle, schedule: Schedule, n_samples: int,
                                t_grid, seed: int = 0, substeps: int = 20) -> MarginalReport:
    """Empirical check that the SDE and the PF-ODE share their marginals.

    Both integrations start from the same initial samples; the ODE uses the
    exact perturbed score. Reports, per grid time, the largest absolute gap
    between the two clouds' mean components and covariance entries.
    """
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_grid.ndim != 1 or np.any(np.diff(t_grid) <= 0) or t_grid[0] < 0:
        raise ValueError("t_grid must be strictly increasing and non-negative")
    rng = make_rng(seed)
    x0, _ = oracle.sample(n_samples, rng)
    z_sde = x0.copy()
    z_ode = x0.copy()

    def ode_rhs(z, t):
        return pf_ode_rhs(z, t, schedule, lambda zz, tt: oracle.score_t(zz, tt, schedule)).array

    mean_d, cov_d = [], []
    t_prev = 0.0
    for t in t_grid:
        if t > t_prev:
            ts = np.linspace(t_prev, t, substeps + 1)
            for k in range(substeps):
                dt = float(ts[k + 1] - ts[k])
                eps = rng.standard_normal(z_sde.shape)
                z_sde = forward_sde_step(z_sde, float(ts[k]), dt, schedule, eps).array
                f0 = ode_rhs(z_ode, float(ts[k]))
                pred = z_ode + dt * f0
                z_ode = z_ode + 0.5 * dt * (f0 + ode_rhs(pred, float(ts[k + 1])))
            t_prev = float(t)
        m_a, c_a = _moments(z_sde)
        m_b, c_b = _moments(z_ode)
        mean_d.append(np.max(np.abs(m_a - m_b)))
        cov_d.append(np.max(np.abs(c_a - c_b)))
    return MarginalReport(t_grid, np.asarray(mean_d), np.asarray(cov_d), n_samples, seed)
