"""Synthetic two-modality pair datasets with controllable correspondence noise.

Pairs share a latent vector pushed through two fixed random linear maps, so
matched pairs are statistically learnable by linear encoders. Mismatches are
injected by cyclically shifting the text vectors of a seeded random subset,
which guarantees no shifted pair keeps its own text (for two or more noisy
pairs). The resulting `true_match` flags are hidden ground truth: training
code must never read them, only evaluation may.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import container
from .errors import FormatError, ParameterError


class RawPair(NamedTuple):
    pair_id: int
    image_raw: np.ndarray
    text_raw: np.ndarray
    assumed_label: int
    true_match: int


@dataclass
class PairDataset:
    """N image/text vector pairs, all carrying assumed label 1."""

    images: np.ndarray      # (n, d_img) float32
    texts: np.ndarray       # (n, d_txt) float32
    true_match: np.ndarray  # (n,) uint8, hidden ground truth
    d_img: int
    d_txt: int
    noise_rate: float
    seed: int

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> RawPair:
        return RawPair(i, self.images[i], self.texts[i], 1, int(self.true_match[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, PairDataset):
            return NotImplemented
        return (
            self.d_img == other.d_img
            and self.d_txt == other.d_txt
            and self.noise_rate == other.noise_rate
            and self.seed == other.seed
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.texts, other.texts)
            and np.array_equal(self.true_match, other.true_match)
        )


def generate(n: int, d_latent: int, d_img: int, d_txt: int,
             noise_rate: float, sigma: float, seed: int) -> PairDataset:
    """Generate a seeded dataset with exactly round(noise_rate * n) mismatches.

    Each pair draws a latent z ~ N(0, I); the raw vectors are A z + eps and
    B z + eps with fixed seeded mixing matrices A, B and isotropic noise of
    scale `sigma`. The noisy subset then has its text vectors cyclically
    shifted among themselves and its flags cleared.
    """
    if n < 1:
        raise ParameterError("n must be >= 1")
    if not 0.0 <= noise_rate < 1.0:
        raise ParameterError("noise_rate must lie in [0, 1)")
    if d_latent < 1 or d_img < 1 or d_txt < 1:
        raise ParameterError("dimensions must be >= 1")
    if d_latent > min(d_img, d_txt):
        raise ParameterError("d_latent must not exceed min(d_img, d_txt)")
    if sigma < 0:
        raise ParameterError("sigma must be >= 0")

    rng = np.random.default_rng(seed)
    mix_img = rng.standard_normal((d_img, d_latent)) / np.sqrt(d_latent)
    mix_txt = rng.standard_normal((d_txt, d_latent)) / np.sqrt(d_latent)
    z = rng.standard_normal((n, d_latent))
    images = z @ mix_img.T + sigma * rng.standard_normal((n, d_img))
    texts = z @ mix_txt.T + sigma * rng.standard_normal((n, d_txt))
    images = images.astype(np.float32)
    texts = texts.astype(np.float32)

    true_match = np.ones(n, dtype=np.uint8)
    n_noisy = round(noise_rate * n)
    if n_noisy > 0:
        noisy = np.sort(rng.choice(n, size=n_noisy, replace=False))
        # cyclic shift among the selected indices: derangement for n_noisy >= 2
        texts[noisy] = texts[np.roll(noisy, -1)]
        true_match[noisy] = 0

    return PairDataset(
        images=images,
        texts=texts,
        true_match=true_match,
        d_img=d_img,
        d_txt=d_txt,
        noise_rate=float(np.float32(noise_rate)),
        seed=seed,
    )


def save(ds: PairDataset, path) -> None:
    """Write the dataset to the binary container (flags in a trailing block)."""
    with open(path, "wb") as fh:
        container.write_header(
            fh, container.DATASET_MAGIC,
            len(ds), ds.d_img, ds.d_txt, ds.noise_rate, ds.seed,
        )
        container.write_f32_block(fh, ds.images)
        container.write_f32_block(fh, ds.texts)
        fh.write(ds.true_match.astype(np.uint8).tobytes())


def load(path) -> PairDataset:
    with open(path, "rb") as fh:
        n, d_img, d_txt, noise_rate, seed = container.read_header(
            fh, container.DATASET_MAGIC)
        if n < 1:
            raise FormatError("pair count: must be >= 1")
        images = container.read_f32_block(fh, (n, d_img), "image records")
        texts = container.read_f32_block(fh, (n, d_txt), "text records")
        flags = container.read_u8_block(fh, n, "match flags")
        if fh.read(1):
            raise FormatError("trailing data: file longer than declared payload")
    if not np.isin(flags, (0, 1)).all():
        raise FormatError("match flags: values must be 0 or 1")
    return PairDataset(
        images=images, texts=texts, true_match=flags,
        d_img=d_img, d_txt=d_txt,
        noise_rate=float(noise_rate), seed=seed,
    )


def export_jsonl(ds: PairDataset, path) -> None:
    """Debug export, one JSON object per pair."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pair in (ds[i] for i in range(len(ds))):
            fh.write(json.dumps({
                "pair_id": pair.pair_id,
                "image_raw": [float(v) for v in pair.image_raw],
                "text_raw": [float(v) for v in pair.text_raw],
                "assumed_label": pair.assumed_label,
                "true_match": pair.true_match,
            }) + "\n")
