"""Toy 3D volume encoder/decoder and the plane-slice-aware query transformer.

Parameters live in flat ``dict[str, ndarray]`` maps (the same shape the
checkpoint container stores).  Every forward function also accepts those
entries as tape ``Var``s, so one code path serves training and evaluation.

Full-scale settings would use hundreds of queries of width 512; the toy
defaults here are Q=8, C=32 so gradient checks stay cheap.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .errors import ContractError, DimensionError

N_PLANES = 3


@dataclass
class ModelConfig:
    side: int = 8          # D
    patch: int = 2
    width: int = 32        # C
    n_queries: int = 8     # Q
    hidden: int = 32
    out_dim: int = 16      # C_out, the frozen 2D embedding width

    def __post_init__(self):
        if self.side % self.patch:
            raise ContractError(f"side {self.side} not divisible by patch {self.patch}")
        for k in ("side", "patch", "width", "n_queries", "hidden", "out_dim"):
            if getattr(self, k) < 1:
                raise ContractError(f"{k} must be positive")

    @property
    def n_tokens(self) -> int:
        return (self.side // self.patch) ** 3

    @property
    def n_slices(self) -> int:
        return self.side  # J >= D


def _normal(rng, shape, fan_in):
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    C, P3 = cfg.width, cfg.patch ** 3
    params = {
        "enc.W": _normal(rng, (P3, C), P3),
        "enc.b": np.zeros(C),
        "enc.pos": rng.normal(0.0, 1.0, size=(cfg.n_tokens, C)),
        "dec.W": _normal(rng, (C, P3), C),
        "dec.b": np.zeros(P3),
        "psat.queries": rng.normal(0.0, 1.0, size=(cfg.n_queries, C)),
        "psat.pspe": np.zeros((C, N_PLANES, cfg.n_slices)),
        "psat.mlp.W1": _normal(rng, (C, cfg.hidden), C),
        "psat.mlp.b1": np.zeros(cfg.hidden),
        "psat.mlp.W2": _normal(rng, (cfg.hidden, cfg.out_dim), cfg.hidden),
        "psat.mlp.b2": np.zeros(cfg.out_dim),
    }
    for block in ("sa", "ca"):
        for w in ("Wq", "Wk", "Wv", "Wo"):
            params[f"psat.{block}.{w}"] = _normal(rng, (C, C), C)
    return params


# ---------------------------------------------------------------------------
# encoder / decoder


def patchify(x: np.ndarray, patch: int) -> np.ndarray:
    """(b, D, D, D) -> (b, T, patch**3), tokens in row-major grid order."""
    x = np.asarray(x, dtype=np.float64)
    b, D = x.shape[0], x.shape[1]
    if x.shape[1:] != (D, D, D):
        raise DimensionError(f"volumes must be cubic, got {x.shape[1:]}")
    if D % patch:
        raise DimensionError(f"side {D} not divisible by patch {patch}")
    g = D // patch
    y = x.reshape(b, g, patch, g, patch, g, patch).transpose(0, 1, 3, 5, 2, 4, 6)
    return y.reshape(b, g ** 3, patch ** 3)


def unpatchify(patches, side: int, patch: int):
    """Inverse of :func:`patchify`; works on tape Vars."""
    b = np.shape(tc.value_of(patches))[0]
    g = side // patch
    y = tc.reshape(patches, (b, g, g, g, patch, patch, patch))
    y = tc.transpose(y, (0, 1, 4, 2, 5, 3, 6))
    return tc.reshape(y, (b, side, side, side))


def _batched(x, ndim):
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == ndim else (x, False)


def encode_volume(x, params, patch: int = 2):
    """Patchify then embed linearly: (D,D,D) -> (T, C) or batched (b,...)."""
    xb, single = _batched(x, 3)
    W = params["enc.W"]
    if np.shape(tc.value_of(W))[0] != patch ** 3:
        raise DimensionError(f"enc.W expects {np.shape(tc.value_of(W))[0]} voxels per patch, patch={patch}")
    tokens = tc.add(tc.matmul(patchify(xb, patch), W), params["enc.b"])
    if "enc.pos" in params:
        tokens = tc.add(tokens, params["enc.pos"])
    return tokens[0] if single else tokens


def decode_volume(tokens, params, side: int, patch: int = 2):
    """Linear un-patchify of tokens back to a (b, D, D, D) reconstruction."""
    tshape = np.shape(tc.value_of(tokens))
    single = len(tshape) == 2
    if single:
        tokens = tc.reshape(tokens, (1,) + tshape)
        tshape = (1,) + tshape
    if tshape[1] != (side // patch) ** 3:
        raise DimensionError(f"{tshape[1]} tokens do not tile a {side}^3 grid with patch {patch}")
    patches = tc.add(tc.matmul(tokens, params["dec.W"]), params["dec.b"])
    vol = unpatchify(patches, side, patch)
    return vol[0] if single else vol


# ---------------------------------------------------------------------------
# PSAT


def pspe_lookup(V_p, i, j):
    """Read V_p[:, i, j] (scalars) or a (b, C) stack for index arrays."""
    shape = np.shape(tc.value_of(V_p))
    ii, jj = np.asarray(i), np.asarray(j)
    if np.any(ii < 0) or np.any(ii >= shape[1]) or np.any(jj < 0) or np.any(jj >= shape[2]):
        raise ContractError(f"(plane, slice) index out of range for table {shape}")
    if ii.ndim == 0:
        return tc.take(V_p, (slice(None), int(ii), int(jj)))
    return tc.transpose(tc.take(V_p, (slice(None), ii, jj)))


def _attention(x, y, params, block, width):
    q = tc.matmul(x, params[f"psat.{block}.Wq"])
    k = tc.matmul(y, params[f"psat.{block}.Wk"])
    v = tc.matmul(y, params[f"psat.{block}.Wv"])
    scores = tc.scale(tc.matmul(q, tc.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(width))
    att = tc.softmax(scores, axis=-1)
    return tc.matmul(tc.matmul(att, v), params[f"psat.{block}.Wo"]), att


def psat_forward(tokens, params, i, j, return_attention: bool = False):
    """Project volume tokens to one embedding per volume.

    The (plane, slice) embedding is added to every query and every token;
    queries self-attend, cross-attend to the tokens, pass through the MLP and
    are mean-pooled.
    """
    tshape = np.shape(tc.value_of(tokens))
    single = len(tshape) == 2
    if single:
        tokens = tc.reshape(tokens, (1,) + tshape)
        i, j = np.atleast_1d(i), np.atleast_1d(j)
    b, T, C = np.shape(tc.value_of(tokens))
    queries = params["psat.queries"]
    if np.shape(tc.value_of(queries))[1] != C:
        raise DimensionError(f"token width {C} vs query width {np.shape(tc.value_of(queries))[1]}")
    pe = tc.reshape(pspe_lookup(params["psat.pspe"], np.asarray(i), np.asarray(j)), (b, 1, C))
    Q = np.shape(tc.value_of(queries))[0]
    q = tc.add(tc.reshape(queries, (1, Q, C)), pe)
    kv = tc.add(tokens, pe)
    sa, att_sa = _attention(q, q, params, "sa", C)
    h = tc.add(q, sa)
    ca, att_ca = _attention(h, kv, params, "ca", C)
    h = tc.add(h, ca)
    hid = tc.tanh(tc.add(tc.matmul(h, params["psat.mlp.W1"]), params["psat.mlp.b1"]))
    out = tc.add(tc.matmul(hid, params["psat.mlp.W2"]), params["psat.mlp.b2"])
    emb = tc.mean(out, axis=1)
    if single:
        emb = emb[0]
    if return_attention:
        return emb, (tc.value_of(att_sa), tc.value_of(att_ca))
    return emb


def embed_volumes(volumes, params, plane, index, cfg: ModelConfig):
    """Full volume -> projected embedding path; returns (embeddings, tokens)."""
    tokens = encode_volume(volumes, params, cfg.patch)
    return psat_forward(tokens, params, plane, index), tokens


# ---------------------------------------------------------------------------
# frozen 2D stand-ins


class FrozenEncoders:
    """Fixed random linear maps standing in for pre-aligned 2D encoders.

    ``image`` embeds a D×D slice; ``text`` maps a text latent through a
    near-orthogonal mixing matrix so paired slice/text embeddings stay
    correlated.  Nothing here is ever trained.
    """

    def __init__(self, side: int, dim: int, seed: int, gain: float = 1.0, n_freq: int = 4):
        rng = np.random.default_rng([seed, 0x2D])
        self.side, self.dim = side, dim
        # smooth image filters: random mixtures of the lowest 2D cosine modes
        x = (np.arange(side) + 0.5) / side
        modes = np.stack([np.cos(np.pi * a * x) for a in range(n_freq)])
        basis = np.einsum("ax,by->abxy", modes, modes).reshape(n_freq * n_freq, side * side)
        basis /= np.linalg.norm(basis, axis=1, keepdims=True)
        mixing = rng.normal(0.0, gain / np.sqrt(n_freq * n_freq), size=(dim, n_freq * n_freq))
        self.image_W = mixing @ basis
        self.image_b = rng.normal(0.0, 0.1, size=dim)
        mix = np.eye(dim) + 0.3 * rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, dim))
        u, _, vt = np.linalg.svd(mix)
        self.text_mix = u @ vt
        self.text_b = rng.normal(0.0, 0.05, size=dim)

    def image(self, slices) -> np.ndarray:
        s = np.asarray(slices, dtype=np.float64)
        flat = s.reshape(s.shape[:-2] + (-1,))
        return flat @ self.image_W.T + self.image_b

    def text(self, latents) -> np.ndarray:
        return np.asarray(latents, dtype=np.float64) @ self.text_mix.T + self.text_b
