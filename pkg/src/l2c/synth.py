"""Seeded synthetic corpora standing in for model-derived logits.

All randomness comes from a counter-based Philox generator keyed by the seed,
so outputs are reproducible across platforms.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .distribution import softmax
from .lcdm import cosine_pseudo_logits, uncertainty_grid, weighted_code_vectors
from .rng import make_rng
from .toy_decoder import unpack

KINDS = ("sharp", "flat", "cosine")


def flat_logits(n: int, k: int, rng: np.random.Generator, scale: float = 0.05) -> np.ndarray:
    return scale * rng.standard_normal((n, k))


def sharp_logits(n: int, k: int, rng: np.random.Generator, noise_scale: float = 3.0,
                 peak_prob: float = 0.25, gumbel_scale: float = 0.5) -> np.ndarray:
    """Gaussian background plus one dominant entry per row.

    The dominant logit is placed where its softmax mass would be ``peak_prob``
    against the expected background, then perturbed by centred Gumbel noise.
    """
    logits = noise_scale * rng.standard_normal((n, k))
    idx = rng.integers(0, k, size=n)
    background = np.log(k - 1) + 0.5 * noise_scale**2
    g = rng.gumbel(-np.euler_gamma * gumbel_scale, gumbel_scale, size=n)
    logits[np.arange(n), idx] = background + np.log(peak_prob / (1 - peak_prob)) + g
    return logits


def random_codebook(k: int, d: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((k, d))


def cosine_logits(n: int, k: int, rng: np.random.Generator, d: int = 8, noise: float = 0.3,
                  codebook: np.ndarray | None = None) -> np.ndarray:
    """Cosine similarities of noisy copies of random code vectors against the codebook."""
    e = random_codebook(k, d, rng) if codebook is None else codebook
    idx = rng.integers(0, k, size=n)
    unit = e[idx] / np.linalg.norm(e[idx], axis=1, keepdims=True)
    feats = unit + noise * rng.standard_normal((n, e.shape[1])) / np.sqrt(e.shape[1])
    return cosine_pseudo_logits(feats, e)


def synth_corpus(kind: str, n: int, k: int, seed: int, d: int = 8) -> np.ndarray:
    if n < 1 or k < 2:
        raise ValueError(f"need n >= 1 and k >= 2, got n={n}, k={k}")
    rng = make_rng(seed)
    if kind == "flat":
        return flat_logits(n, k, rng)
    if kind == "sharp":
        return sharp_logits(n, k, rng)
    if kind == "cosine":
        return cosine_logits(n, k, rng, d=d)
    raise ValueError(f"unknown corpus kind {kind!r}; expected one of {KINDS}")


@dataclass
class RenderDataset:
    """Latents rendered from per-token code vectors, with their conditioning."""

    z: np.ndarray  # S x H' x W' x D_z
    v: np.ndarray  # S x N x D
    u: np.ndarray  # S x N x 4
    codebook: np.ndarray
    grid_shape: tuple[int, int]

    def __len__(self) -> int:
        return self.z.shape[0]

    def items(self):
        return list(zip(self.z, self.v, self.u))

    def split(self, n_train: int) -> tuple["RenderDataset", "RenderDataset"]:
        a = RenderDataset(self.z[:n_train], self.v[:n_train], self.u[:n_train], self.codebook, self.grid_shape)
        b = RenderDataset(self.z[n_train:], self.v[n_train:], self.u[n_train:], self.codebook, self.grid_shape)
        return a, b


def render_dataset(n_samples: int, seed: int, k: int = 32, d: int = 4, latent_hw: tuple[int, int] = (8, 8),
                   d_z: int = 2, sharpness: float = 6.0, logit_noise: float = 1.0,
                   perturb: float = 0.05) -> RenderDataset:
    """Synthetic rendering task: each 2x2 latent patch is a fixed random linear
    image of its token's true code vector plus small Gaussian perturbation.

    Token distributions are sharp softmaxes peaked at the true code, so the
    expected code vectors carry most of the information needed to render z.
    """
    hh, ww = latent_hw
    if hh % 2 or ww % 2:
        raise ValueError("latent height and width must be even")
    rng = make_rng(seed)
    rows, cols = hh // 2, ww // 2
    n_tok = rows * cols
    e = random_codebook(k, d, rng)
    render = rng.standard_normal((d, 4 * d_z)) / np.sqrt(d)

    true_idx = rng.integers(0, k, size=(n_samples, n_tok))
    logits = logit_noise * rng.standard_normal((n_samples, n_tok, k))
    np.put_along_axis(logits, true_idx[..., None], sharpness, axis=2)
    probs = softmax(logits)
    v = np.stack([weighted_code_vectors(p, e) for p in probs])
    u = np.stack([uncertainty_grid(p) for p in probs])
    patches = e[true_idx] @ render + perturb * rng.standard_normal((n_samples, n_tok, 4 * d_z))
    z = np.stack([unpack(pt, (hh, ww, d_z)) for pt in patches])
    return RenderDataset(z=z, v=v, u=u, codebook=e, grid_shape=(rows, cols))

