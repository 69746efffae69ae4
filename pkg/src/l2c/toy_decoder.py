"""Desk-scale distribution-conditioned flow-matching decoder.

Latents follow the linear path ``z_t = (1 - s) z + s * eps`` and the network
predicts the velocity ``eps - z``. The denoiser is a small token-wise network:

    L      = V W_cl + b_cl
    H_code = tanh(L + avg4(L) W_cm + b_cm)              conditioning branch
    C      = [nearest(H_code), bilinear(U)]
    H_in   = Pack(z_t) W_pi + b_pi + C W_pc + b_pc + temb(t)
    h1     = act(H_in W1 + b1)
    h2     = act((h1 + mean_tok(h1) W_g) W2 + b2)
    v_hat  = Unpack(h2 W_out + b_out)

Gradients are analytic (``loss_and_grads``) and checked against central
differences in the test suite.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from .rng import make_rng

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# latent packing and resampling


def pack(z: np.ndarray) -> np.ndarray:
    """H' x W' x D_z latent -> (H'/2 * W'/2) x 4*D_z tokens of 2x2 patches."""
    hh, ww, dz = z.shape
    if hh % 2 or ww % 2:
        raise ValueError(f"latent spatial dims must be even, got {hh}x{ww}")
    x = z.reshape(hh // 2, 2, ww // 2, 2, dz).transpose(0, 2, 1, 3, 4)
    return x.reshape((hh // 2) * (ww // 2), 4 * dz)


def unpack(tokens: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    hh, ww, dz = shape
    x = tokens.reshape(hh // 2, ww // 2, 2, 2, dz).transpose(0, 2, 1, 3, 4)
    return x.reshape(hh, ww, dz)


def _nearest_1d(src: int, dst: int) -> np.ndarray:
    m = np.zeros((dst, src))
    idx = np.minimum((np.arange(dst) * src) // dst, src - 1)
    m[np.arange(dst), idx] = 1.0
    return m


def _bilinear_1d(src: int, dst: int) -> np.ndarray:
    # half-pixel centres, edges clamped
    m = np.zeros((dst, src))
    for i in range(dst):
        x = (i + 0.5) * src / dst - 0.5
        x = min(max(x, 0.0), src - 1)
        j = int(math.floor(x))
        f = x - j
        m[i, j] += 1.0 - f
        if f > 0:
            m[i, j + 1] += f
    return m


def resample_matrix(src: tuple[int, int], dst: tuple[int, int], kind: str) -> np.ndarray:
    """Token-space resampling operator (dst_rows*dst_cols) x (src_rows*src_cols)."""
    one = {"nearest": _nearest_1d, "bilinear": _bilinear_1d}[kind]
    return np.kron(one(src[0], dst[0]), one(src[1], dst[1]))


def neighbor_average_matrix(rows: int, cols: int) -> np.ndarray:
    """Mean over each cell's in-grid 4-connected neighbours (a 1x1 grid has none)."""
    n = rows * cols
    a = np.zeros((n, n))
    for r in range(rows):
        for c in range(cols):
            nb = [(r + dr, c + dc) for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1))
                  if 0 <= r + dr < rows and 0 <= c + dc < cols]
            for rr, cc in nb:
                a[r * cols + c, rr * cols + cc] = 1.0 / len(nb)
    return a


# --------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class DecoderDims:
    d_code: int = 4      # D, code vector width
    d_hidden: int = 16   # D_h, refined code feature width
    d_model: int = 32    # D_theta, token feature width
    d_latent: int = 2    # D_z, latent channels


@dataclass
class DenoiserParams:
    code_linear_w: np.ndarray
    code_linear_b: np.ndarray
    code_mix_w: np.ndarray
    code_mix_b: np.ndarray
    proj_img_w: np.ndarray
    proj_img_b: np.ndarray
    proj_cond_w: np.ndarray
    proj_cond_b: np.ndarray
    time_embed: np.ndarray
    body_w1: np.ndarray
    body_b1: np.ndarray
    body_w2: np.ndarray
    body_b2: np.ndarray
    global_mix: np.ndarray
    proj_out_w: np.ndarray
    proj_out_b: np.ndarray

    @staticmethod
    def shapes(dims: DecoderDims) -> dict[str, tuple[int, ...]]:
        d, dh, dm, dz = dims.d_code, dims.d_hidden, dims.d_model, dims.d_latent
        return {
            "code_linear_w": (d, dh), "code_linear_b": (dh,),
            "code_mix_w": (dh, dh), "code_mix_b": (dh,),
            "proj_img_w": (4 * dz, dm), "proj_img_b": (dm,),
            "proj_cond_w": (dh + 4, dm), "proj_cond_b": (dm,),
            "time_embed": (2, dm),
            "body_w1": (dm, dm), "body_b1": (dm,),
            "body_w2": (dm, dm), "body_b2": (dm,),
            "global_mix": (dm, dm),
            "proj_out_w": (dm, 4 * dz), "proj_out_b": (4 * dz,),
        }

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def zeros(cls, dims: DecoderDims) -> "DenoiserParams":
        return cls(**{k: np.zeros(s) for k, s in cls.shapes(dims).items()})

    @classmethod
    def init(cls, dims: DecoderDims, seed: int, weight_scale: float = 0.5,
             out_scale: float = 0.0) -> "DenoiserParams":
        """Gaussian weights with std ``weight_scale / sqrt(fan_in)``, zero biases.

        The output projection gets ``out_scale`` instead, so with the default
        of 0 training starts from v_hat = 0.
        """
        rng = make_rng(seed)
        arrays = {}
        for k, s in cls.shapes(dims).items():
            if k.endswith("_b"):
                arrays[k] = np.zeros(s)
            else:
                arrays[k] = weight_scale * rng.standard_normal(s) / math.sqrt(s[0])
        arrays["proj_out_w"] *= out_scale / weight_scale
        return cls(**arrays)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserParams":
        missing = set(cls.names()) - set(d)
        if missing:
            raise ValueError(f"missing parameter arrays: {sorted(missing)}")
        return cls(**{k: np.asarray(d[k], dtype=np.float64) for k in cls.names()})

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.names()}

    def dims(self) -> DecoderDims:
        return DecoderDims(
            d_code=self.code_linear_w.shape[0],
            d_hidden=self.code_linear_w.shape[1],
            d_model=self.body_w1.shape[0],
            d_latent=self.proj_out_w.shape[1] // 4,
        )

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(**{k: v.copy() for k, v in self.as_dict().items()})


# --------------------------------------------------------------------------
# noising and schedule


def add_noise(z, sigma: float, noise) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if z.shape != noise.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {noise.shape}")
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"sigma must lie in [0, 1], got {sigma}")
    return (1.0 - sigma) * z + sigma * noise


@dataclass(frozen=True)
class NoiseSchedule:
    steps: int
    kind: str = "linear"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("schedule needs at least one step")
        if self.kind != "linear":
            raise ValueError(f"unsupported schedule {self.kind!r}")

    def sigmas(self) -> np.ndarray:
        """steps + 1 noise levels from 1 down to 0."""
        return 1.0 - np.arange(self.steps + 1) / self.steps


def time_features(t: float) -> np.ndarray:
    # half period over [0, 1] keeps t=0 and t=1 distinguishable
    return np.array([math.sin(math.pi * t), math.cos(math.pi * t)])


# --------------------------------------------------------------------------
# conditioning


def _act(x: np.ndarray, linear: bool) -> np.ndarray:
    return x if linear else np.tanh(x)


def _dact(y: np.ndarray, linear: bool) -> np.ndarray:
    return np.ones_like(y) if linear else 1.0 - y * y


@dataclass
class CondCache:
    v: np.ndarray
    u: np.ndarray
    avg: np.ndarray
    lin: np.ndarray
    mixed_in: np.ndarray
    h_code: np.ndarray
    nn: np.ndarray
    bl: np.ndarray
    c: np.ndarray


def _conditioning(v, u, params: DenoiserParams, grid_shape, target_shape, linear: bool) -> CondCache:
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    rows, cols = grid_shape
    n = rows * cols
    if v.shape[0] != n or u.shape[0] != n:
        raise ValueError(f"grid {rows}x{cols} needs {n} tokens, got V={v.shape[0]}, U={u.shape[0]}")
    if u.shape[1] != 4:
        raise ValueError("uncertainty grid must have 4 columns")
    if v.shape[1] != params.code_linear_w.shape[0]:
        raise ValueError(f"code width {v.shape[1]} != {params.code_linear_w.shape[0]}")
    target_shape = tuple(target_shape) if target_shape is not None else (rows, cols)
    avg = neighbor_average_matrix(rows, cols)
    lin = v @ params.code_linear_w + params.code_linear_b
    mixed_in = avg @ lin
    # centre passes through unmixed, neighbours enter through code_mix
    h_code = _act(lin + mixed_in @ params.code_mix_w + params.code_mix_b, linear)
    nn = resample_matrix((rows, cols), target_shape, "nearest")
    bl = resample_matrix((rows, cols), target_shape, "bilinear")
    c = np.concatenate([nn @ h_code, bl @ u], axis=1)
    return CondCache(v, u, avg, lin, mixed_in, h_code, nn, bl, c)


def build_conditioning(v, u, params: DenoiserParams, grid_shape: tuple[int, int],
                       target_shape: tuple[int, int] | None = None, linear: bool = False) -> np.ndarray:
    """Conditioning tensor C = [H_code, U] at the packed latent resolution.

    ``target_shape`` is (H'/2, W'/2); it defaults to ``grid_shape``.
    """
    return _conditioning(v, u, params, grid_shape, target_shape, linear).c


# --------------------------------------------------------------------------
# denoiser


@dataclass
class FwdCache:
    x: np.ndarray
    c: np.ndarray
    tf: np.ndarray
    h_in: np.ndarray
    h1: np.ndarray
    m: np.ndarray
    q: np.ndarray
    h2: np.ndarray
    v_hat: np.ndarray


def _forward(z_noisy, c, t: float, params: DenoiserParams, linear: bool) -> FwdCache:
    z_noisy = np.asarray(z_noisy, dtype=np.float64)
    x = pack(z_noisy)
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    if c.shape[0] != x.shape[0]:
        raise ValueError(f"conditioning has {c.shape[0]} tokens, latent packs to {x.shape[0]}")
    if c.shape[1] != params.proj_cond_w.shape[0]:
        raise ValueError(f"conditioning width {c.shape[1]} != {params.proj_cond_w.shape[0]}")
    if x.shape[1] != params.proj_img_w.shape[0]:
        raise ValueError(f"latent channels {z_noisy.shape[-1]} do not match parameters")
    tf = time_features(t)
    h_in = (x @ params.proj_img_w + params.proj_img_b
            + c @ params.proj_cond_w + params.proj_cond_b
            + tf @ params.time_embed)
    h1 = _act(h_in @ params.body_w1 + params.body_b1, linear)
    m = h1.mean(axis=0)
    q = h1 + m @ params.global_mix
    h2 = _act(q @ params.body_w2 + params.body_b2, linear)
    out = h2 @ params.proj_out_w + params.proj_out_b
    return FwdCache(x, c, tf, h_in, h1, m, q, h2, unpack(out, z_noisy.shape))


def denoiser_forward(z_noisy, c, t: float, params: DenoiserParams, linear: bool = False) -> np.ndarray:
    """Predicted velocity, same shape as ``z_noisy``.

    ``linear=True`` replaces tanh by the identity (used for closed-form checks).
    """
    return _forward(z_noisy, c, t, params, linear).v_hat


def v_pred_loss(v_hat, noise, z, w_t: float = 1.0) -> float:
    v_hat, noise, z = (np.asarray(a, dtype=np.float64) for a in (v_hat, noise, z))
    if not (v_hat.shape == noise.shape == z.shape):
        raise ValueError("v_hat, noise and z must share a shape")
    if not w_t > 0:
        raise ValueError("w_t must be positive")
    r = v_hat - (noise - z)
    return float(np.mean((w_t * r) ** 2))


def _backward(fc: FwdCache, cc: CondCache | None, params: DenoiserParams, noise, z, w_t: float,
              linear: bool) -> DenoiserParams:
    g = {}
    m_el = fc.v_hat.size
    dout = pack(2.0 * w_t**2 * (fc.v_hat - (noise - z)) / m_el)

    g["proj_out_w"] = fc.h2.T @ dout
    g["proj_out_b"] = dout.sum(axis=0)
    da2 = (dout @ params.proj_out_w.T) * _dact(fc.h2, linear)
    g["body_w2"] = fc.q.T @ da2
    g["body_b2"] = da2.sum(axis=0)
    dq = da2 @ params.body_w2.T
    dgm = dq.sum(axis=0)  # gradient w.r.t. the broadcast global term
    g["global_mix"] = np.outer(fc.m, dgm)
    dh1 = dq + (params.global_mix @ dgm) / fc.h1.shape[0]
    da1 = dh1 * _dact(fc.h1, linear)
    g["body_w1"] = fc.h_in.T @ da1
    g["body_b1"] = da1.sum(axis=0)
    dh_in = da1 @ params.body_w1.T
    dsum = dh_in.sum(axis=0)
    g["proj_img_w"] = fc.x.T @ dh_in
    g["proj_img_b"] = dsum
    g["proj_cond_w"] = fc.c.T @ dh_in
    g["proj_cond_b"] = dsum.copy()
    g["time_embed"] = np.outer(fc.tf, dsum)

    dh = params.code_linear_w.shape[1]
    if cc is None:
        g["code_mix_w"] = np.zeros_like(params.code_mix_w)
        g["code_mix_b"] = np.zeros_like(params.code_mix_b)
        g["code_linear_w"] = np.zeros_like(params.code_linear_w)
        g["code_linear_b"] = np.zeros_like(params.code_linear_b)
    else:
        dc = dh_in @ params.proj_cond_w.T
        dh_code = cc.nn.T @ dc[:, :dh]
        dpre = dh_code * _dact(cc.h_code, linear)
        g["code_mix_w"] = cc.mixed_in.T @ dpre
        g["code_mix_b"] = dpre.sum(axis=0)
        dlin = dpre + cc.avg.T @ (dpre @ params.code_mix_w.T)
        g["code_linear_w"] = cc.v.T @ dlin
        g["code_linear_b"] = dlin.sum(axis=0)
    return DenoiserParams(**g)


def loss_and_grads(params: DenoiserParams, z_noisy, v, u, grid_shape, t: float, noise, z,
                   w_t: float = 1.0, linear: bool = False) -> tuple[float, DenoiserParams]:
    """v-prediction loss and its gradient w.r.t. every parameter array,
    including the conditioning branch that builds C from (V, U)."""
    z = np.asarray(z, dtype=np.float64)
    hh, ww, _ = z.shape
    cc = _conditioning(v, u, params, grid_shape, (hh // 2, ww // 2), linear)
    fc = _forward(z_noisy, cc.c, t, params, linear)
    loss = v_pred_loss(fc.v_hat, noise, z, w_t)
    return loss, _backward(fc, cc, params, noise, z, w_t, linear)


def backward(z_noisy, v, u, grid_shape, t: float, params: DenoiserParams, noise, z,
             w_t: float = 1.0, linear: bool = False) -> DenoiserParams:
    return loss_and_grads(params, z_noisy, v, u, grid_shape, t, noise, z, w_t, linear)[1]


def loss_at(params: DenoiserParams, z_noisy, v, u, grid_shape, t, noise, z, w_t=1.0, linear=False) -> float:
    """Forward-only loss, used by finite-difference checks."""
    z = np.asarray(z, dtype=np.float64)
    hh, ww, _ = z.shape
    c = build_conditioning(v, u, params, grid_shape, (hh // 2, ww // 2), linear)
    return v_pred_loss(denoiser_forward(z_noisy, c, t, params, linear), noise, z, w_t)


# --------------------------------------------------------------------------
# training


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    step_size: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    seed: int = 0
    d_hidden: int = 16
    d_model: int = 32

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: DenoiserParams
    losses: np.ndarray


def train(dataset, grid_shape: tuple[int, int], config: TrainConfig = TrainConfig(),
          init: DenoiserParams | None = None) -> TrainResult:
    """Seeded minibatch training with Adam-style moment averaging.

    ``dataset`` is a sequence of (z, V, U) triples sharing one token grid.
    """
    data = list(dataset)
    if not data:
        raise ValueError("empty dataset")
    z0, v0, _ = data[0]
    dims = DecoderDims(d_code=np.asarray(v0).shape[1], d_hidden=config.d_hidden,
                       d_model=config.d_model, d_latent=np.asarray(z0).shape[2])
    params = init.copy() if init is not None else DenoiserParams.init(dims, config.seed)
    rng = make_rng(config.seed + 1)
    names = params.names()
    m1 = {k: np.zeros_like(getattr(params, k)) for k in names}
    m2 = {k: np.zeros_like(getattr(params, k)) for k in names}
    losses = np.empty(config.steps)

    for step in range(config.steps):
        idx = rng.integers(0, len(data), size=config.batch_size)
        grad_sum = {k: np.zeros_like(getattr(params, k)) for k in names}
        loss_sum = 0.0
        for i in idx:  # fixed order: batch elements summed as drawn
            z, v, u = data[i]
            t = float(rng.random())
            eps = rng.standard_normal(np.shape(z))
            zt = add_noise(z, t, eps)
            loss, g = loss_and_grads(params, zt, v, u, grid_shape, t, eps, z)
            loss_sum += loss
            for k in names:
                grad_sum[k] += getattr(g, k)
        loss = loss_sum / config.batch_size
        if not math.isfinite(loss):
            raise NonFiniteLossError(f"non-finite loss {loss} at step {step}")
        losses[step] = loss
        bc1 = 1.0 - config.beta1 ** (step + 1)
        bc2 = 1.0 - config.beta2 ** (step + 1)
        for k in names:
            gk = grad_sum[k] / config.batch_size
            m1[k] = config.beta1 * m1[k] + (1 - config.beta1) * gk
            m2[k] = config.beta2 * m2[k] + (1 - config.beta2) * gk * gk
            upd = config.step_size * (m1[k] / bc1) / (np.sqrt(m2[k] / bc2) + config.adam_eps)
            setattr(params, k, getattr(params, k) - upd)
        if step % 500 == 0:
            log.debug("step %d loss %.5f", step, loss)
    return TrainResult(params, losses)


def smoothed_reduction(losses, window: int = 20) -> tuple[float, float]:
    """(mean of the first ``window`` losses, mean of the last ``window``)."""
    losses = np.asarray(losses)
    return float(losses[:window].mean()), float(losses[-window:].mean())


# --------------------------------------------------------------------------
# sampling


VelocityFn = Callable[[np.ndarray, float], np.ndarray]


def initial_noise(shape: tuple[int, int, int], seed: int) -> np.ndarray:
    return make_rng(seed).standard_normal(shape)


def sample(c, schedule: NoiseSchedule, params: DenoiserParams | None, seed: int,
           latent_shape: tuple[int, int, int], velocity_fn: VelocityFn | None = None) -> np.ndarray:
    """Euler integration of the linear path from sigma=1 to sigma=0.

    ``velocity_fn(z, t)`` overrides the network, e.g. with an oracle velocity.
    """
    if schedule.steps < 1:
        raise ValueError("need at least one step")
    if velocity_fn is None:
        if params is None:
            raise ValueError("either params or velocity_fn is required")
        velocity_fn = lambda zz, tt: denoiser_forward(zz, c, tt, params)  # noqa: E731
    z = initial_noise(latent_shape, seed)
    sig = schedule.sigmas()
    for s_cur, s_next in zip(sig[:-1], sig[1:]):
        z = z - (s_cur - s_next) * velocity_fn(z, float(s_cur))
    return z


def reconstruction_mse(params: DenoiserParams, items, grid_shape, steps: int = 30, seed: int = 0,
                       zero_conditioning: bool = False) -> float:
    """Mean squared error of sampled latents against their targets."""
    errs = []
    for j, (z, v, u) in enumerate(items):
        z = np.asarray(z)
        hh, ww, _ = z.shape
        c = build_conditioning(v, u, params, grid_shape, (hh // 2, ww // 2))
        if zero_conditioning:
            c = np.zeros_like(c)
        out = sample(c, NoiseSchedule(steps), params, seed + j, z.shape)
        errs.append(np.mean((out - z) ** 2))
    return float(np.mean(errs))
