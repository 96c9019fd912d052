"""Forward noising process, mask-conditioned denoiser, training and sampling.

The forward chain adds Gaussian noise with a linear variance schedule; the
denoiser is a small two-level U-Net that sees the noisy image concatenated
with the binary condition mask and predicts the added noise. The reverse
chain uses the fixed-variance setting (per-step variance equal to the
schedule's beta), adding no noise on the terminal step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError
from . import tensor as T
from .tensor import Tensor

Array = np.ndarray


@dataclass
class NoiseSchedule:
    timesteps: int
    beta: Array       # per-step variances, non-decreasing
    alpha: Array      # 1 - beta
    alpha_bar: Array  # cumulative product of alpha


def make_schedule(timesteps: int, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> NoiseSchedule:
    """Linear variance schedule with its derived per-step coefficient tables."""
    if timesteps < 1:
        raise ValueError("schedule needs at least one timestep")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("require 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, timesteps)
    alpha = 1.0 - beta
    return NoiseSchedule(timesteps=timesteps, beta=beta, alpha=alpha,
                         alpha_bar=np.cumprod(alpha))


def _check_t(t: int, schedule: NoiseSchedule) -> int:
    t = int(t)
    if not 0 <= t < schedule.timesteps:
        raise ValueError(f"timestep {t} outside [0, {schedule.timesteps})")
    return t


def q_step(x_prev: Array, t: int, schedule: NoiseSchedule,
           rng: np.random.Generator) -> Array:
    """One forward noising step: sqrt(1-beta_t)*x + sqrt(beta_t)*eps."""
    t = _check_t(t, schedule)
    beta_t = schedule.beta[t]
    eps = rng.standard_normal(np.shape(x_prev))
    return np.sqrt(1.0 - beta_t) * np.asarray(x_prev) + np.sqrt(beta_t) * eps


def q_sample(x0: Array, t: int, schedule: NoiseSchedule, eps: Array) -> Array:
    """Closed-form t-step noising: sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps."""
    t = _check_t(t, schedule)
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match image {x0.shape}")
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# -- denoiser -------------------------------------------------------------------


def sinusoidal_embedding(t: Array, dim: int) -> Array:
    """Standard sin/cos positional features of integer timesteps, shape (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class DenoiserNet:
    """Two-level U-Net predicting the added noise from (x_t, mask, t).

    Input is the noisy image concatenated with the condition mask along the
    channel axis; the time embedding is projected and added per channel at
    the encoder, bottleneck and decoder. The output conv is zero-initialized
    so an untrained net predicts zero noise.
    """

    def __init__(self, rng: np.random.Generator, base_width: int = 32,
                 time_dim: int = 64):
        w1, w2 = base_width, base_width * 2
        self.base_width = base_width
        self.time_dim = time_dim
        p: dict[str, Tensor] = {}
        p["enc1a_w"] = T.he_conv(rng, w1, 2, 3)
        p["enc1a_b"] = Tensor.zeros((w1,), requires_grad=True)
        p["enc1b_w"] = T.he_conv(rng, w1, w1, 3)
        p["enc1b_b"] = Tensor.zeros((w1,), requires_grad=True)
        p["down_w"] = T.he_conv(rng, w2, w1, 3)
        p["down_b"] = Tensor.zeros((w2,), requires_grad=True)
        p["mid_a_w"] = T.he_conv(rng, w2, w2, 3)
        p["mid_a_b"] = Tensor.zeros((w2,), requires_grad=True)
        p["mid_b_w"] = T.he_conv(rng, w2, w2, 3)
        p["mid_b_b"] = Tensor.zeros((w2,), requires_grad=True)
        p["up_w"] = T.he_conv(rng, w1, w2, 3)
        p["up_b"] = Tensor.zeros((w1,), requires_grad=True)
        p["dec_a_w"] = T.he_conv(rng, w1, w1 * 2, 3)
        p["dec_a_b"] = Tensor.zeros((w1,), requires_grad=True)
        p["out_w"] = Tensor.zeros((1, w1, 3, 3), requires_grad=True)
        p["out_b"] = Tensor.zeros((1,), requires_grad=True)
        p["temb_w"] = T.he_linear(rng, time_dim, time_dim)
        p["temb_b"] = Tensor.zeros((time_dim,), requires_grad=True)
        p["temb_enc_w"] = T.he_linear(rng, time_dim, w1)
        p["temb_enc_b"] = Tensor.zeros((w1,), requires_grad=True)
        p["temb_mid_w"] = T.he_linear(rng, time_dim, w2)
        p["temb_mid_b"] = Tensor.zeros((w2,), requires_grad=True)
        p["temb_dec_w"] = T.he_linear(rng, time_dim, w1)
        p["temb_dec_b"] = Tensor.zeros((w1,), requires_grad=True)
        self.params = p

    @property
    def param_list(self) -> list[Tensor]:
        return list(self.params.values())

    def load_state(self, state: dict[str, Array]) -> None:
        for name, param in self.params.items():
            if name not in state:
                raise ValueError(f"checkpoint missing parameter {name!r}")
            if tuple(state[name].shape) != param.shape:
                raise ValueError(f"parameter {name!r} shape mismatch")
            param.data = np.array(state[name], dtype=np.float64)
            param.grad = None

    def _conv(self, x: Tensor, name: str, stride: int = 1) -> Tensor:
        p = self.params
        out = T.conv2d(x, p[f"{name}_w"], stride=stride, padding=1)
        bias = T.reshape(p[f"{name}_b"], (1, -1, 1, 1))
        return T.add(out, bias)

    def _time_proj(self, h: Tensor, level: str, batch: int) -> Tensor:
        p = self.params
        proj = T.add(T.matmul(h, p[f"temb_{level}_w"]), p[f"temb_{level}_b"])
        return T.reshape(proj, (batch, -1, 1, 1))

    def forward(self, x: Tensor, t: Array, y: Tensor) -> Tensor:
        """Predict noise for a batch: x (B,1,H,W), t (B,) ints, y (B,1,H,W)."""
        p = self.params
        batch = x.shape[0]
        emb = Tensor(sinusoidal_embedding(t, self.time_dim))
        h = T.silu(T.add(T.matmul(emb, p["temb_w"]), p["temb_b"]))

        z = T.concat([x, y], axis=1)
        e = T.silu(self._conv(z, "enc1a"))
        e = T.add(e, self._time_proj(h, "enc", batch))
        skip = T.silu(self._conv(e, "enc1b"))

        d = T.silu(self._conv(skip, "down", stride=2))
        m = T.silu(self._conv(d, "mid_a"))
        m = T.add(m, self._time_proj(h, "mid", batch))
        m = T.silu(self._conv(m, "mid_b"))

        u = T.silu(self._conv(T.upsample2x(m), "up"))
        u = T.concat([u, skip], axis=1)
        u = T.silu(self._conv(u, "dec_a"))
        u = T.add(u, self._time_proj(h, "dec", batch))
        return self._conv(u, "out")

    def predict(self, x: Array, t: int, y: Array) -> Array:
        """Noise prediction without gradient tracking; batched arrays in/out."""
        tt = np.full(x.shape[0], int(t))
        with T.no_grad():
            return self.forward(Tensor(x), tt, Tensor(y)).data


def train_step(net: DenoiserNet, images: Array, masks: Array,
               schedule: NoiseSchedule, rng: np.random.Generator,
               opt: T.AdamState) -> float:
    """One noise-prediction step: sample t and eps, regress, Adam update."""
    images = np.asarray(images, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    batch = images.shape[0]
    t = rng.integers(0, schedule.timesteps, size=batch)
    eps = rng.standard_normal(images.shape)
    ab = schedule.alpha_bar[t].reshape(batch, 1, 1, 1)
    x_t = np.sqrt(ab) * images + np.sqrt(1.0 - ab) * eps

    pred = net.forward(Tensor(x_t), t, Tensor(masks))
    diff = T.sub(Tensor(eps), pred)
    loss = T.tmean(T.mul(diff, diff))
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteError("training loss is not finite")
    T.backward(loss)
    T.adam_step(net.param_list, opt)
    return value


# -- sampling ---------------------------------------------------------------------


@dataclass
class TrajectoryFrame:
    t: int
    x_t: Array
    eps_hat: Array
    eps_mag: float


def posterior_step(x_t: Array, eps_hat: Array, t: int, schedule: NoiseSchedule,
                   rng: np.random.Generator) -> Array:
    """Reverse-chain mean plus fixed-variance noise; no noise at t == 0."""
    t = _check_t(t, schedule)
    beta_t = schedule.beta[t]
    alpha_t = schedule.alpha[t]
    ab_t = schedule.alpha_bar[t]
    mean = (x_t - (beta_t / np.sqrt(1.0 - ab_t)) * eps_hat) / np.sqrt(alpha_t)
    if t == 0:
        return mean
    return mean + np.sqrt(beta_t) * rng.standard_normal(np.shape(x_t))


def p_sample_step(net: DenoiserNet, x_t: Array, t: int, y: Array,
                  schedule: NoiseSchedule, rng: np.random.Generator) -> Array:
    """One learned reverse step on a (B,1,H,W) batch."""
    eps_hat = net.predict(x_t, t, y)
    return posterior_step(x_t, eps_hat, t, schedule, rng)


def _record_steps(timesteps: int, stride: int) -> set[int]:
    steps = {timesteps - 1 - k * stride
             for k in range((timesteps - 1) // stride + 1)}
    steps.add(0)
    return steps


def sample(net: DenoiserNet, y: Array, schedule: NoiseSchedule,
           rng: np.random.Generator, record: bool = False,
           stride: int = 1) -> tuple[Array, list[TrajectoryFrame]]:
    """Generate one image conditioned on mask y (H,W); clamp to [0,1] at the end.

    With `record`, keeps frames at every `stride` steps counting down from
    t = T-1, always including t = T-1 and t = 0.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("condition mask must be a binary 2-D array")
    yb = y[None, None]
    x = rng.standard_normal((1, 1) + y.shape)
    keep = _record_steps(schedule.timesteps, stride) if record else frozenset()
    frames: list[TrajectoryFrame] = []
    for t in range(schedule.timesteps - 1, -1, -1):
        eps_hat = net.predict(x, t, yb)
        if record and t in keep:
            frames.append(TrajectoryFrame(
                t=t, x_t=x[0, 0].copy(), eps_hat=eps_hat[0, 0].copy(),
                eps_mag=float(np.mean(np.abs(eps_hat)))))
        x = posterior_step(x, eps_hat, t, schedule, rng)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"sampling produced non-finite values at t={t}")
    return np.clip(x[0, 0], 0.0, 1.0), frames


def trajectory(net: DenoiserNet, y: Array, schedule: NoiseSchedule,
               rng: np.random.Generator, stride: int) -> list[TrajectoryFrame]:
    """Denoising trajectory frames, ordered by decreasing t."""
    _, frames = sample(net, y, schedule, rng, record=True, stride=stride)
    return frames
