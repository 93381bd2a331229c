"""Discrete-time diffusion: schedules, forward noising, reverse samplers,
purification and denoiser training.

Timesteps are integers ``0..T``.  ``beta[t - 1]`` is the variance added at
step ``t`` and ``alpha_bar[t]`` the cumulative signal fraction, with
``alpha_bar[0] == 1``.  Data are handled as batches of row vectors.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .numerics import RngStream

SAMPLERS = ("ddpm", "ddim", "one_step")
CHUNK_ROWS = 256


@dataclass(frozen=True)
class VarianceSchedule:
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray = field(repr=False)

    def __post_init__(self):
        if len(self.beta) != self.T or len(self.alpha_bar) != self.T + 1:
            raise ValueError("schedule tables have the wrong length")
        if np.any(self.beta <= 0) or np.any(self.beta >= 1):
            raise ValueError("every beta must lie in (0, 1)")

    def check_t(self, t, low: int = 0):
        t_arr = np.asarray(t)
        if np.any(t_arr < low) or np.any(t_arr > self.T):
            raise ValueError(f"timestep {t} outside [{low}, {self.T}]")
        return t_arr.astype(int)

    def beta_at(self, t):
        return self.beta[np.asarray(t) - 1]

    def posterior_variance(self, t):
        """Variance of q(x_{t-1} | x_t, x_0)."""
        t = np.asarray(t)
        return (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]) * self.beta_at(t)


def build_schedule(T: int, beta_start: float, beta_end: float) -> VarianceSchedule:
    if T < 1 or not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need T >= 1 and 0 < beta_start <= beta_end < 1, got {T}, {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    return schedule_from_beta(beta)


def schedule_from_beta(beta) -> VarianceSchedule:
    beta = np.asarray(beta, dtype=float)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return VarianceSchedule(len(beta), beta, alpha_bar)


def default_schedule(T: int = 100) -> VarianceSchedule:
    """Linear schedule whose end point is stretched so that ``alpha_bar`` over
    ``T`` steps tracks the usual 1000-step curve."""
    return build_schedule(T, 1e-4, 0.02 * 1000.0 / T)


def time_embedding(t, dim: int, T: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    half = dim // 2
    freqs = np.exp(-np.log(4.0 * T) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


NoisePredictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class DiffusionModel:
    """A schedule plus a noise predictor.

    ``denoiser`` is normally an :class:`~difflab.nn.Mlp` fed ``[x_t, emb(t)]``;
    any callable ``(x_t, t) -> eps_hat`` is accepted too, which is how tests
    plug in exact oracles.

    When ``prior_mean``/``prior_var`` are set, the network predicts a residual
    on top of the exact noise predictor for a diagonal Gaussian with those
    moments.  In high dimension this carries the near-identity part of the
    map, which a narrow MLP cannot represent.
    """
    schedule: VarianceSchedule
    denoiser: nn.Mlp | NoisePredictor
    data_dim: int
    emb_dim: int = 16
    clip: tuple[float, float] | None = None
    prior_mean: np.ndarray | None = None
    prior_var: np.ndarray | None = None
    standardize: bool = False

    def __post_init__(self):
        if isinstance(self.denoiser, nn.Mlp):
            if self.denoiser.in_dim != self.data_dim + self.emb_dim or self.denoiser.out_dim != self.data_dim:
                raise ValueError("denoiser widths do not match data_dim + emb_dim -> data_dim")

    @classmethod
    def create(cls, data_dim: int, rng: RngStream, schedule: VarianceSchedule | None = None,
               hidden=(128, 128), emb_dim: int = 16, activation: str = "tanh", clip=None,
               baseline_data=None, standardize: bool = False):
        """Fresh model; ``baseline_data`` (an (n, d) sample) switches on the
        Gaussian baseline with that sample's per-coordinate moments."""
        schedule = schedule or default_schedule()
        mlp = nn.Mlp.init([data_dim + emb_dim, *hidden, data_dim], rng, activation)
        mean = var = None
        if baseline_data is not None:
            bd = np.asarray(baseline_data, dtype=float)
            mean, var = bd.mean(axis=0), bd.var(axis=0) + 1e-6
        return cls(schedule, mlp, data_dim, emb_dim, clip, mean, var, standardize)

    def copy(self) -> "DiffusionModel":
        den = self.denoiser.copy() if isinstance(self.denoiser, nn.Mlp) else self.denoiser
        return DiffusionModel(self.schedule, den, self.data_dim, self.emb_dim, self.clip,
                              self.prior_mean, self.prior_var, self.standardize)

    def baseline_noise(self, x_t, t) -> np.ndarray | float:
        if self.prior_mean is None:
            return 0.0
        ab = self.schedule.alpha_bar[np.asarray(t)][:, None]
        return np.sqrt(1.0 - ab) * (x_t - np.sqrt(ab) * self.prior_mean) / (ab * self.prior_var + 1.0 - ab)

    def net_input(self, x_t, t) -> np.ndarray:
        """``[standardized x_t, emb(t)]``.  With baseline moments the latent
        is centred and scaled to unit variance per coordinate, so the network
        sees inputs of the same size at every timestep."""
        x_t = np.atleast_2d(x_t)
        t = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
        if self.standardize and self.prior_mean is not None:
            ab = self.schedule.alpha_bar[t][:, None]
            x_t = (x_t - np.sqrt(ab) * self.prior_mean) / np.sqrt(ab * self.prior_var + 1.0 - ab)
        return np.concatenate([x_t, time_embedding(t, self.emb_dim, self.schedule.T)], axis=1)


def predict_noise(model: DiffusionModel, x_t, t) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=float)
    single = x_t.ndim == 1
    xb = np.atleast_2d(x_t)
    tb = np.broadcast_to(np.asarray(t), (xb.shape[0],))
    if isinstance(model.denoiser, nn.Mlp):
        out = nn.forward(model.denoiser, model.net_input(xb, tb)) + model.baseline_noise(xb, tb)
    else:
        out = np.asarray(model.denoiser(xb, tb), dtype=float)
    return out[0] if single else out


def forward_diffuse(x0, t, eps, sched: VarianceSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise ValueError("noise must have the same shape as the data")
    t = sched.check_t(t)
    ab = sched.alpha_bar[t]
    if ab.ndim == 1 and x0.ndim == 2:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def _x0_hat(model, x, t):
    ab = model.schedule.alpha_bar[t]
    eps = predict_noise(model, x, t)
    return (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab), eps


def ddpm_denoise(model: DiffusionModel, x_start, t_start: int, rng: RngStream) -> np.ndarray:
    """Ancestral sampling from ``t_start`` down to 0 with fixed variance
    ``beta_tilde``; the last step (t = 1) adds no noise."""
    sched = model.schedule
    t_start = int(sched.check_t(t_start, low=1))
    x = np.array(x_start, dtype=float)
    for t in range(t_start, 0, -1):
        eps = predict_noise(model, x, t)
        beta = sched.beta[t - 1]
        mean = (x - beta / np.sqrt(1.0 - sched.alpha_bar[t]) * eps) / np.sqrt(1.0 - beta)
        if t > 1:
            x = mean + np.sqrt(sched.posterior_variance(t)) * rng.normal(x.shape)
        else:
            x = mean
    return x


def ddim_denoise(model: DiffusionModel, x_start, t_start: int, step_count: int | None = None) -> np.ndarray:
    """Deterministic DDIM updates along an evenly spaced subsequence of
    ``t_start .. 0``."""
    sched = model.schedule
    t_start = int(sched.check_t(t_start, low=1))
    steps = t_start if step_count is None else max(1, min(int(step_count), t_start))
    ts = np.unique(np.round(np.linspace(0, t_start, steps + 1)).astype(int))[::-1]
    x = np.array(x_start, dtype=float)
    for t, t_next in zip(ts[:-1], ts[1:]):
        x0_hat, eps = _x0_hat(model, x, t)
        ab_next = sched.alpha_bar[t_next]
        x = np.sqrt(ab_next) * x0_hat + np.sqrt(1.0 - ab_next) * eps
    return x


def one_step_denoise(model: DiffusionModel, x_t, t: int) -> np.ndarray:
    t = int(model.schedule.check_t(t, low=1))
    return _x0_hat(model, np.asarray(x_t, dtype=float), t)[0]


def _purify_chunk(model, x, T_bar, rng, sampler, ddim_steps):
    x_t = forward_diffuse(x, T_bar, rng.normal(x.shape), model.schedule)
    if sampler == "ddpm":
        out = ddpm_denoise(model, x_t, T_bar, rng)
    elif sampler == "ddim":
        out = ddim_denoise(model, x_t, T_bar, ddim_steps)
    else:
        out = one_step_denoise(model, x_t, T_bar)
    if model.clip is not None:
        out = np.clip(out, *model.clip)
    return out


def purify(model: DiffusionModel, x, T_bar: int, rng: RngStream, sampler: str = "ddpm",
           ddim_steps: int | None = None, n_jobs: int = 1) -> np.ndarray:
    """``denoise(diff(x, T_bar))`` with fresh forward noise.

    Rows are processed in fixed chunks, each with its own derived stream, so
    the result does not depend on ``n_jobs``.
    """
    if sampler not in SAMPLERS:
        raise ValueError(f"unknown sampler {sampler!r}; choose from {SAMPLERS}")
    T_bar = int(model.schedule.check_t(T_bar, low=1))
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    bounds = list(range(0, len(xb), CHUNK_ROWS))
    streams = rng.split(len(bounds))
    jobs = [(xb[s:s + CHUNK_ROWS], r) for s, r in zip(bounds, streams)]

    def run(job):
        return _purify_chunk(model, job[0], T_bar, job[1], sampler, ddim_steps)

    if n_jobs > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    out = np.concatenate(parts, axis=0) if parts else xb.copy()
    return out[0] if single else out


# -- training ---------------------------------------------------------------

def noise_regression(model: DiffusionModel, x_t, t, target, weight: float = 1.0):
    """Mean squared error between predicted and target noise, with gradients."""
    inp = model.net_input(x_t, t)
    scale = weight / target.size
    base = model.baseline_noise(x_t, np.broadcast_to(np.asarray(t), (len(inp),)))

    def loss_fn(out):
        diff = out + base - target
        return scale * float((diff * diff).sum()), 2.0 * scale * diff

    return nn.value_and_grad(model.denoiser, inp, loss_fn)


# A branch receives (model, x_batch, clean_t, clean_eps, branch_rng, row_idx)
# and returns (loss, Gradients) or None.
ExtraBranch = Callable[..., "tuple[float, nn.Gradients] | None"]


def train_denoiser(model: DiffusionModel, dataset, epochs: int, rng: RngStream, *,
                   lr: float = 1e-3, batch_size: int = 128, extra_branch: ExtraBranch | None = None,
                   state: nn.OptimizerState | None = None, history: list | None = None,
                   cosine_lr: bool = False) -> DiffusionModel:
    """Minimise ``||eps - eps_theta(sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, t)||^2``
    with ``t`` uniform on ``1..T``.

    Works on a copy.  ``extra_branch`` adds a second loss term per batch; its
    randomness comes from a separately derived stream so the clean branch sees
    exactly the draws a plain run would.  ``cosine_lr`` decays the step size
    from ``lr`` towards zero over the run, one value per epoch.
    """
    x = np.asarray(dataset, dtype=float)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("train_denoiser needs a nonempty (n, d) dataset")
    if not isinstance(model.denoiser, nn.Mlp):
        raise TypeError("only Mlp denoisers can be trained")
    model = model.copy()
    sched = model.schedule
    state = state or nn.OptimizerState.for_model(model.denoiser, lr=lr)
    for epoch in range(epochs):
        if cosine_lr:
            state.lr = lr * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))
        erng = rng.derive("epoch", epoch)
        brng = rng.derive("branch", epoch)
        for idx in nn.minibatches(len(x), batch_size, erng):
            xb = x[idx]
            t = erng.integers(1, sched.T + 1, size=len(xb))
            eps = erng.normal(xb.shape)
            loss, grads = noise_regression(model, forward_diffuse(xb, t, eps, sched), t, eps)
            if extra_branch is not None:
                extra = extra_branch(model, xb, t, eps, brng, idx)
                if extra is not None:
                    loss += extra[0]
                    grads = grads + extra[1]
            nn.optimizer_step(state, model.denoiser, grads)
            if history is not None:
                history.append(loss)
    return model


def denoising_loss(model: DiffusionModel, dataset, rng: RngStream, t=None) -> float:
    """Held-out mean-alignment loss (one noise draw per row)."""
    x = np.asarray(dataset, dtype=float)
    if t is None:
        t = rng.integers(1, model.schedule.T + 1, size=len(x))
    eps = rng.normal(x.shape)
    pred = predict_noise(model, forward_diffuse(x, t, eps, model.schedule), t)
    return float(np.mean((pred - eps) ** 2))


# -- time change ---------------------------------------------------------------

def time_change(sched: VarianceSchedule, t):
    """``s_t = 1 / alpha_bar_t - 1``; the forward chain in these coordinates is
    a standard Wiener process."""
    t = sched.check_t(t)
    s = 1.0 / sched.alpha_bar[t] - 1.0
    return float(s) if np.ndim(s) == 0 else s


def wiener_coordinates(x_t, x0, t, sched: VarianceSchedule) -> np.ndarray:
    t = sched.check_t(t)
    ab = sched.alpha_bar[t]
    x_t = np.asarray(x_t, dtype=float)
    if np.ndim(ab) == 1 and x_t.ndim == 2:
        ab = ab[:, None]
    return x_t / np.sqrt(ab) - np.asarray(x0, dtype=float)


def save_model(model: DiffusionModel, path) -> None:
    """Denoiser weights, schedule and baseline moments in one ``.npz``."""
    if not isinstance(model.denoiser, nn.Mlp):
        raise TypeError("only Mlp denoisers can be saved")
    meta = {"version": nn.CHECKPOINT_VERSION, "kind": "diffusion", "data_dim": model.data_dim,
            "emb_dim": model.emb_dim, "clip": list(model.clip) if model.clip else None,
            "layer_dims": model.denoiser.layer_dims, "activation": model.denoiser.activation,
            "standardize": model.standardize}
    arrays = {f"p{i}": p for i, p in enumerate(model.denoiser.params())}
    arrays["beta"] = model.schedule.beta
    if model.prior_mean is not None:
        arrays["prior_mean"] = model.prior_mean
        arrays["prior_var"] = model.prior_var
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_model(path) -> DiffusionModel:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != nn.CHECKPOINT_VERSION or meta.get("kind") != "diffusion":
            raise ValueError(f"{path} is not a version-{nn.CHECKPOINT_VERSION} diffusion checkpoint")
        dims = meta["layer_dims"]
        ps = [data[f"p{i}"].copy() for i in range(2 * (len(dims) - 1))]
        beta = data["beta"].copy()
        mean = data["prior_mean"].copy() if "prior_mean" in data else None
        var = data["prior_var"].copy() if "prior_var" in data else None
    mlp = nn.Mlp(dims, ps[0::2], ps[1::2], meta["activation"])
    return DiffusionModel(schedule_from_beta(beta), mlp, meta["data_dim"], meta["emb_dim"],
                          tuple(meta["clip"]) if meta["clip"] else None, mean, var, meta["standardize"])
