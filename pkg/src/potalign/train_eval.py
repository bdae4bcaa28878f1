"""Training loop for the volume encoder + PSAT + Mahalanobis metric, and evaluation.

One step: embed the batch, build Mahalanobis costs against the frozen slice
and text embeddings, solve both partial transport problems, take the KL to
the identity plan (or the InfoNCE baseline), add the reconstruction term,
backpropagate, update, and re-project M onto the PSD cone.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor_core as tc
from .checkpoint import save_checkpoint
from .errors import ContractError, DivergenceError, DomainError
from .ground_metrics import GroundMetric, pairwise_cost, project_psd
from .losses import contrastive_loss, mpot_loss, reconstruction_loss
from .ot_solvers import SolverConfig, partial_ot
from .psat import ModelConfig, decode_volume, embed_volumes, init_params
from .synth import Dataset, batcher, make_batch

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "total", "kl_vs", "kl_vt", "rec", "top1_s", "top5_s",
                  "top1_t", "top5_t", "gap", "mispair_mass")
METRICS_FORMAT = 1


@dataclass
class TrainConfig:
    lr: float = 1e-2
    batch_size: int = 8
    epochs: int = 50
    loss: str = "mpot"            # "mpot" | "contrastive"
    reconstruction: bool = True
    temperature: float = 0.07
    optimizer: str = "sgd"        # "sgd" (plain descent) | "adam"
    seed: int = 0
    checkpoint_every: int = 0     # epochs; 0 disables
    retrieval_metric: str = "auto"  # "auto" | "mahalanobis" | "euclidean" | "cosine"
    early_stop: bool = False
    plateau_tol: float = 1e-5
    plateau_window: int = 10
    solver: SolverConfig = field(default_factory=SolverConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError("learning rate must be > 0")
        if self.batch_size < 2:
            raise ContractError("batch size must be >= 2")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.loss not in ("mpot", "contrastive"):
            raise ContractError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.retrieval_metric not in ("auto", "mahalanobis", "euclidean", "cosine"):
            raise ContractError(f"unknown retrieval metric {self.retrieval_metric!r}")

    def resolved_retrieval_metric(self) -> str:
        if self.retrieval_metric != "auto":
            return self.retrieval_metric
        return "mahalanobis" if self.loss == "mpot" else "cosine"


@dataclass
class MetricsRecord:
    epoch: int
    total: float
    kl_vs: float
    kl_vt: float
    rec: float
    top1_s: float
    top5_s: float
    top1_t: float
    top5_t: float
    gap: float
    mispair_mass: float

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, c))) for c in METRIC_COLUMNS[1:]]


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    history: list[MetricsRecord]
    min_eigenvalues: list[float]
    steps: int


# ---------------------------------------------------------------------------
# evaluation


def _distances(queries, targets, kind: str, M=None) -> np.ndarray:
    if kind == "cosine":
        a = queries / np.linalg.norm(queries, axis=1, keepdims=True)
        b = targets / np.linalg.norm(targets, axis=1, keepdims=True)
        return -(a @ b.T)
    if kind == "mahalanobis":
        return np.asarray(pairwise_cost(queries, targets, GroundMetric.mahalanobis(M)))
    return np.asarray(pairwise_cost(queries, targets, GroundMetric("euclidean")))


def retrieval_eval(queries, targets, metric: str = "euclidean", M=None, ks=(1, 5)) -> dict[int, float]:
    """Top-k accuracy of finding row k of ``targets`` for query k."""
    queries = np.asarray(queries, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if queries.shape[0] != targets.shape[0]:
        raise ContractError("queries and targets must have equal counts")
    n = queries.shape[0]
    for k in ks:
        if k > n:
            raise ContractError(f"k={k} exceeds {n} candidates")
    D = _distances(queries, targets, metric, M)
    true = D[np.arange(n), np.arange(n)][:, None]
    cols = np.arange(n)[None, :]
    rank = np.sum(D < true, axis=1) + np.sum((D == true) & (cols < np.arange(n)[:, None]), axis=1)
    return {k: float(np.mean(rank < k)) for k in ks}


def modality_gap(emb_a, emb_b) -> float:
    a = np.asarray(emb_a, dtype=np.float64)
    b = np.asarray(emb_b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ContractError("embedding widths differ")
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise DomainError("zero-norm embedding row")
    return float(np.linalg.norm((a / na[:, None]).mean(0) - (b / nb[:, None]).mean(0)))


def embed_dataset(params, dataset: Dataset, model: ModelConfig, chunk: int = 64) -> np.ndarray:
    out = []
    for start in range(0, len(dataset), chunk):
        sl = slice(start, start + chunk)
        emb, _ = embed_volumes(dataset.volumes[sl], params, dataset.plane[sl], dataset.index[sl], model)
        out.append(np.asarray(emb))
    return np.concatenate(out)


def _eval_batches(dataset: Dataset, b: int):
    n = len(dataset) // b
    return [make_batch(dataset, np.arange(k * b, (k + 1) * b)) for k in range(n)]


def mispair_mass(params, dataset: Dataset, cfg: TrainConfig, mass: float | None = None,
                 emb: np.ndarray | None = None) -> float:
    """Mean transported mass per mispaired text column over fixed eval batches."""
    if not dataset.mispaired.any():
        return 0.0
    if emb is None:
        emb = embed_dataset(params, dataset, cfg.model)
    solver = cfg.solver if mass is None else _with_mass(cfg.solver, mass)
    metric = GroundMetric.mahalanobis(params["metric.M"])
    b = cfg.batch_size
    marg = np.full(b, 1.0 / b)
    total, count = 0.0, 0
    for batch in _eval_batches(dataset, b):
        if not batch.mispaired.any():
            continue
        C = pairwise_cost(emb[batch.indices], batch.text, metric)
        plan = partial_ot(C, marg, marg, solver).plan
        total += float(plan[:, batch.mispaired].sum())
        count += int(batch.mispaired.sum())
    return total / count if count else 0.0


def _with_mass(solver: SolverConfig, mass: float) -> SolverConfig:
    kw = asdict(solver)
    kw["mass"] = mass
    return SolverConfig(**kw)


def evaluate(params, dataset: Dataset, cfg: TrainConfig) -> dict:
    emb = embed_dataset(params, dataset, cfg.model)
    hs = dataset.slice_embeddings()
    kind = cfg.resolved_retrieval_metric()
    M = params["metric.M"]
    rs = retrieval_eval(emb, hs, kind, M)
    rt = retrieval_eval(emb, dataset.text, kind, M)
    return {
        "top1_s": rs[1], "top5_s": rs[5], "top1_t": rt[1], "top5_t": rt[5],
        "gap": modality_gap(emb, hs),
        "mispair_mass": mispair_mass(params, dataset, cfg, emb=emb),
    }


# ---------------------------------------------------------------------------
# training


class _Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(k, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            mh = m / (1 - self.b1 ** self.t)
            vh = v / (1 - self.b2 ** self.t)
            params[k] = params[k] - self.lr * mh / (np.sqrt(vh) + self.eps)


def initial_params(cfg: TrainConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([cfg.seed, 0x7E])
    params = init_params(cfg.model, rng)
    params["metric.M"] = np.eye(cfg.model.out_dim)
    return params


def step_loss(P: dict, batch, slice_emb: np.ndarray, cfg: TrainConfig):
    """Loss terms for one batch; ``P`` entries may be tape Vars."""
    model = cfg.model
    emb, tokens = embed_volumes(batch.volumes, P, batch.plane, batch.index, model)
    hs = slice_emb[batch.indices]
    if cfg.loss == "mpot":
        metric = GroundMetric.mahalanobis(P["metric.M"])
        _, a_vs, a_vt, _, _ = mpot_loss(emb, hs, batch.text, metric, cfg.solver)
    else:
        a_vs = contrastive_loss(emb, hs, cfg.temperature)
        a_vt = contrastive_loss(emb, batch.text, cfg.temperature)
    total = tc.add(a_vs, a_vt)
    rec = 0.0
    if cfg.reconstruction:
        x_hat = decode_volume(tokens, P, model.side, model.patch)
        rec = reconstruction_loss(batch.volumes, x_hat)
        total = tc.add(total, rec)
    return total, a_vs, a_vt, rec


def _scalar(x) -> float:
    return float(np.asarray(tc.value_of(x)))


def train(cfg: TrainConfig, dataset: Dataset, params: dict | None = None,
          checkpoint_dir=None, on_epoch: Callable[[MetricsRecord], None] | None = None) -> TrainResult:
    if dataset.config.side != cfg.model.side or dataset.config.embed_dim != cfg.model.out_dim:
        raise ContractError("model dimensions do not match the dataset")
    params = {k: v.copy() for k, v in (params or initial_params(cfg)).items()}
    slice_emb = dataset.slice_embeddings()
    adam = _Adam(cfg.lr) if cfg.optimizer == "adam" else None
    history: list[MetricsRecord] = []
    min_eigs: list[float] = []
    steps = 0
    best = np.inf
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(4)
        batches = batcher(dataset, cfg.batch_size, cfg.seed, epoch)
        for batch in batches:
            tape = tc.Tape()
            P = {k: tape.param(k, v) for k, v in params.items()}
            total, a_vs, a_vt, rec = step_loss(P, batch, slice_emb, cfg)
            vals = np.array([_scalar(total), _scalar(a_vs), _scalar(a_vt), _scalar(rec)])
            if not np.all(np.isfinite(vals)):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {steps}: {vals}")
            sums += vals
            grads = tape.backward(total)
            if adam is not None:
                adam.step(params, grads)
            else:
                for k, g in grads.items():
                    params[k] = params[k] - cfg.lr * g
            params["metric.M"] = project_psd(params["metric.M"])
            min_eigs.append(float(np.linalg.eigvalsh(params["metric.M"])[0]))
            steps += 1
        mean = sums / len(batches)
        ev = evaluate(params, dataset, cfg)
        rec_ = MetricsRecord(epoch, mean[0], mean[1], mean[2], mean[3], **ev)
        history.append(rec_)
        log.info("epoch %d total=%.4f top1_s=%.3f gap=%.4f", epoch, rec_.total, rec_.top1_s, rec_.gap)
        if on_epoch is not None:
            on_epoch(rec_)
        if checkpoint_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(params, Path(checkpoint_dir) / f"epoch{epoch:04d}.pota")
        if cfg.early_stop:
            if rec_.total < best * (1 - cfg.plateau_tol):
                best, stale = rec_.total, 0
            else:
                stale += 1
                if stale >= cfg.plateau_window:
                    break
    return TrainResult(params, history, min_eigs, steps)


# ---------------------------------------------------------------------------
# metrics IO


def metrics_csv(history: list[MetricsRecord], header_lines: list[str] = ()) -> str:
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in history:
        w.writerow(r.row())
    return buf.getvalue()


def metrics_document(history: list[MetricsRecord], config: dict, version: str) -> dict:
    return {"format_version": METRICS_FORMAT, "tool_version": version, "config": config,
            "columns": list(METRIC_COLUMNS),
            "records": [asdict(r) for r in history]}


def read_metrics_document(path) -> dict:
    return json.loads(Path(path).read_text())
