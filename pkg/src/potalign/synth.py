"""Synthetic (volume, slice, text-embedding) triplets with controlled mispairing."""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .errors import ContractError
from .psat import N_PLANES, FrozenEncoders

N_BLOBS = 3
BLOB_WIDTH = (0.18, 0.08)   # base and latent-controlled spread, in units of side


@dataclass
class WorldConfig:
    seed: int = 0
    n_subjects: int = 200
    latent_dim: int = 4
    side: int = 8
    embed_dim: int = 16
    noise_sigma: float = 0.02
    misalignment_rate: float = 0.0
    image_freq: int = 4     # cosine modes per axis seen by the frozen image encoder

    def __post_init__(self):
        if self.n_subjects < 1 or self.latent_dim < 1 or self.side < 1 or self.embed_dim < 1:
            raise ContractError("world sizes must be positive")
        if not 1 <= self.image_freq <= self.side:
            raise ContractError("image_freq must lie in [1, side]")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be >= 0")
        if not 0.0 <= self.misalignment_rate <= 1.0:
            raise ContractError("misalignment_rate must lie in [0, 1]")


@dataclass
class Triplet:
    volume: np.ndarray
    slice_image: np.ndarray
    text_embedding: np.ndarray
    plane: int
    index: int
    mispaired: bool


@dataclass
class Dataset:
    """Column-oriented store; ``dataset[k]`` yields a :class:`Triplet`."""

    config: WorldConfig
    volumes: np.ndarray        # (n, D, D, D)
    slices: np.ndarray         # (n, D, D)
    text: np.ndarray           # (n, d)
    plane: np.ndarray          # (n,) int
    index: np.ndarray          # (n,) int
    mispaired: np.ndarray      # (n,) bool
    text_source: np.ndarray    # (n,) subject whose caption we carry

    def __len__(self):
        return self.volumes.shape[0]

    def __getitem__(self, k) -> Triplet:
        return Triplet(self.volumes[k], self.slices[k], self.text[k],
                       int(self.plane[k]), int(self.index[k]), bool(self.mispaired[k]))

    def encoders(self) -> FrozenEncoders:
        return FrozenEncoders(self.config.side, self.config.embed_dim, self.config.seed,
                              n_freq=self.config.image_freq)

    def slice_embeddings(self) -> np.ndarray:
        return self.encoders().image(self.slices)

    def save(self, path):
        tensors = {f"cfg.{f.name}": np.array([float(getattr(self.config, f.name))])
                   for f in fields(WorldConfig)}
        for name in ("volumes", "slices", "text", "plane", "index", "mispaired", "text_source"):
            tensors[f"data.{name}"] = np.asarray(getattr(self, name), dtype=np.float64)
        save_tensors(tensors, path)

    @classmethod
    def load(cls, path) -> "Dataset":
        t = load_tensors(path)
        kw = {}
        for f in fields(WorldConfig):
            raw = t[f"cfg.{f.name}"][0]
            kw[f.name] = int(raw) if f.type in ("int", int) else float(raw)
        return cls(
            config=WorldConfig(**kw),
            volumes=t["data.volumes"], slices=t["data.slices"], text=t["data.text"],
            plane=t["data.plane"].astype(np.int64), index=t["data.index"].astype(np.int64),
            mispaired=t["data.mispaired"].astype(bool),
            text_source=t["data.text_source"].astype(np.int64),
        )


def extract_slice(volume, i: int, j: int) -> np.ndarray:
    """Cross-section: plane 0 fixes axis 0 (coronal), 1 axis 1, 2 axis 2."""
    v = np.asarray(volume)
    if i not in range(N_PLANES):
        raise ContractError(f"plane {i} out of range")
    if not 0 <= j < v.shape[i]:
        raise ContractError(f"slice {j} out of range for side {v.shape[i]}")
    return np.take(v, j, axis=i).copy()


def _render(latent, maps, side):
    A_c, A_w, A_a = maps
    grid = np.arange(side) + 0.5
    X, Y, Z = np.meshgrid(grid, grid, grid, indexing="ij")
    vol = np.zeros((side, side, side))
    for k in range(N_BLOBS):
        centre = side * (0.5 + 0.3 * np.tanh(A_c[k] @ latent))
        width = side * (BLOB_WIDTH[0] + BLOB_WIDTH[1] / (1.0 + np.exp(-A_w[k] @ latent)))
        amp = 0.55 + 0.35 * np.tanh(A_a[k] @ latent)
        r2 = (X - centre[0]) ** 2 + (Y - centre[1]) ** 2 + (Z - centre[2]) ** 2
        vol += amp * np.exp(-r2 / (2.0 * width ** 2))
    return np.clip(vol, 0.0, 1.0)


def generate_world(cfg: WorldConfig) -> Dataset:
    """Draw subjects, render blob volumes, pick slices, caption, corrupt."""
    rng = np.random.default_rng(cfg.seed)
    L, D, n = cfg.latent_dim, cfg.side, cfg.n_subjects
    maps = (rng.normal(0, 1 / np.sqrt(L), (N_BLOBS, 3, L)),
            rng.normal(0, 1 / np.sqrt(L), (N_BLOBS, L)),
            rng.normal(0, 1 / np.sqrt(L), (N_BLOBS, L)))
    latents = rng.normal(size=(n, L))
    volumes = np.stack([_render(z, maps, D) for z in latents])
    plane = rng.integers(0, N_PLANES, size=n)
    index = rng.integers(0, D, size=n)
    slices = np.stack([extract_slice(volumes[k], plane[k], index[k]) for k in range(n)])
    enc = FrozenEncoders(D, cfg.embed_dim, cfg.seed, n_freq=cfg.image_freq)
    text_latent = enc.image(slices) + cfg.noise_sigma * rng.normal(size=(n, cfg.embed_dim))
    text = enc.text(text_latent)

    n_bad = int(np.floor(cfg.misalignment_rate * n))
    source = np.arange(n)
    mispaired = np.zeros(n, dtype=bool)
    if n_bad:
        if n < 2:
            raise ContractError("mispairing needs at least two subjects")
        bad = rng.choice(n, size=n_bad, replace=False)
        for k in bad:
            other = rng.integers(0, n - 1)
            source[k] = other + (other >= k)
        mispaired[bad] = True
        text = text[source]
    return Dataset(cfg, volumes, slices, text, plane, index, mispaired, source)


@dataclass
class TripletBatch:
    indices: np.ndarray
    volumes: np.ndarray
    slices: np.ndarray
    text: np.ndarray
    plane: np.ndarray
    index: np.ndarray
    mispaired: np.ndarray


def make_batch(dataset: Dataset, idx) -> TripletBatch:
    idx = np.asarray(idx)
    return TripletBatch(idx, dataset.volumes[idx], dataset.slices[idx], dataset.text[idx],
                        dataset.plane[idx], dataset.index[idx], dataset.mispaired[idx])


def batcher(dataset: Dataset, b: int, seed: int, epoch: int) -> list[TripletBatch]:
    """Shuffle keyed by (seed, epoch); the trailing partial batch is dropped."""
    if b < 2:
        raise ContractError("batch size must be >= 2")
    if len(dataset) < b:
        raise ContractError(f"dataset of {len(dataset)} is smaller than batch size {b}")
    order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    return [make_batch(dataset, order[k * b:(k + 1) * b]) for k in range(len(dataset) // b)]
