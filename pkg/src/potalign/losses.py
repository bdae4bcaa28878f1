"""Alignment and reconstruction objectives.

All losses accept arrays or tape ``Var``s; gradients come from the caller's
tape.  The mPOT loss compares each partial transport plan against the
identity plan with a KL divergence summed over the diagonal only (the
identity plan is zero elsewhere, where ``0 log(0/x) = 0``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .errors import ContractError, DimensionError, DomainError
from .ground_metrics import GroundMetric, pairwise_cost
from .ot_solvers import SolverConfig, TransportPlan, partial_ot


def identity_plan(b: int) -> np.ndarray:
    if b < 2:
        raise ContractError(f"mini-batch size must be >= 2, got {b}")
    return np.eye(b) / b


@dataclass
class LossBreakdown:
    kl_volume_slice: object = 0.0
    kl_volume_text: object = 0.0
    reconstruction: object = 0.0

    @property
    def total(self):
        return total_loss(self)


def kl_divergence(pi_hat, pi):
    """KL(pi_hat || pi) over the support of ``pi_hat``."""
    P = pi.value if isinstance(pi, TransportPlan) else pi
    pv = np.asarray(tc.value_of(P))
    ph = np.asarray(pi_hat, dtype=np.float64)
    if ph.shape != pv.shape:
        raise DimensionError(f"identity plan {ph.shape} vs plan {pv.shape}")
    b = ph.shape[0]
    idx = np.arange(b)
    if np.any(pv[idx, idx] <= 0):
        raise DomainError("plan has a non-positive entry on the identity support")
    w = ph[idx, idx]
    diag = tc.take(P, (idx, idx))
    return tc.sum(tc.mul(w, tc.sub(np.log(w), tc.log(diag))))


def mpot_loss(vol_emb, slice_emb, text_emb, metric: GroundMetric, cfg: SolverConfig | None = None):
    """Sum of the two KL terms; returns ``(loss, kl_vs, kl_vt, plan_vs, plan_vt)``.

    ``slice_emb``/``text_emb`` are treated as frozen inputs; pass the volume
    embeddings (and ``metric.M``) as tape Vars to get their gradients.
    """
    cfg = cfg or SolverConfig()
    shapes = {np.shape(tc.value_of(x)) for x in (vol_emb, slice_emb, text_emb)}
    if len(shapes) != 1:
        raise DimensionError(f"embedding sets disagree on shape: {shapes}")
    b = np.shape(tc.value_of(vol_emb))[0]
    pi_hat = identity_plan(b)
    marg = np.full(b, 1.0 / b)
    plan_vs = partial_ot(pairwise_cost(vol_emb, slice_emb, metric), marg, marg, cfg)
    plan_vt = partial_ot(pairwise_cost(vol_emb, text_emb, metric), marg, marg, cfg)
    kl_vs = kl_divergence(pi_hat, plan_vs)
    kl_vt = kl_divergence(pi_hat, plan_vt)
    return tc.add(kl_vs, kl_vt), kl_vs, kl_vt, plan_vs, plan_vt


def _row_normalize(X):
    xv = np.asarray(tc.value_of(X))
    if np.any(np.sum(xv * xv, axis=-1) == 0):
        raise DomainError("zero-norm embedding row")
    norms = tc.sqrt(tc.sum(tc.mul(X, X), axis=-1, keepdims=True))
    return tc.div(X, norms)


def _cross_entropy_diag(logits, axis):
    b = np.shape(tc.value_of(logits))[0]
    idx = np.arange(b)
    lse = tc.logsumexp(logits, axis=axis)
    return tc.mean(tc.sub(lse, tc.take(logits, (idx, idx))))


def contrastive_loss(emb_a, emb_b, temperature: float = 0.07):
    """Symmetric InfoNCE on cosine similarities, diagonal targets."""
    if not temperature > 0:
        raise ContractError("temperature must be > 0")
    if np.shape(tc.value_of(emb_a)) != np.shape(tc.value_of(emb_b)):
        raise DimensionError("contrastive_loss needs equally shaped embedding sets")
    logits = tc.scale(tc.matmul(_row_normalize(emb_a), tc.transpose(_row_normalize(emb_b))),
                      1.0 / temperature)
    return tc.scale(tc.add(_cross_entropy_diag(logits, 1), _cross_entropy_diag(logits, 0)), 0.5)


def reconstruction_loss(x, x_hat):
    """Sum over the batch of per-sample L2 norms (not squared)."""
    xs, hs = np.shape(tc.value_of(x)), np.shape(tc.value_of(x_hat))
    if xs != hs:
        raise DimensionError(f"volume batch {xs} vs reconstruction {hs}")
    b = xs[0]
    diff = tc.reshape(tc.sub(x, x_hat), (b, -1))
    return tc.sum(tc.sqrt(tc.sum(tc.mul(diff, diff), axis=1)))


def total_loss(parts: LossBreakdown):
    """Unweighted sum of the terms; stays on the tape when any term is a Var."""
    vals = (parts.kl_volume_slice, parts.kl_volume_text, parts.reconstruction)
    if not all(np.all(np.isfinite(tc.value_of(v))) for v in vals):
        raise DomainError("loss terms must be finite")
    if any(isinstance(v, tc.Var) for v in vals):
        return tc.add(tc.add(vals[0], vals[1]), vals[2])
    return float(vals[0] + vals[1] + vals[2])
