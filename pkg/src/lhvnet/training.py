"""Losses, the Adam training loop with restarts, and response-table extraction."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from lhvnet.exceptions import NonFiniteError, ValidationError
from lhvnet.model import (
    DEFAULT_WIDTHS,
    PARTIES,
    PROB_FLOOR,
    LayerConfig,
    LhvModel,
    Sharing,
    gradients,
    init_model,
    model_distribution_batched,
    sample_hidden,
)
from lhvnet.quantum import clean_distribution

log = logging.getLogger(__name__)


def kl_divergence(p_t, p_m) -> float:
    """sum p_t log(p_t / p_m) with 0 log 0 = 0 and p_m floored at 1e-12."""
    p_t = np.asarray(p_t, float).ravel()
    p_m = np.maximum(np.asarray(p_m, float).ravel(), PROB_FLOOR)
    mask = p_t > 0
    return float(max(np.sum(p_t[mask] * np.log(p_t[mask] / p_m[mask])), 0.0))


def euclidean_distance(p_t, p_m) -> float:
    diff = np.asarray(p_t, float).ravel() - np.asarray(p_m, float).ravel()
    return float(np.sqrt(diff @ diff))


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of the model to fit."""

    layers: LayerConfig = field(default_factory=LayerConfig)
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    sharing: Sharing = field(default_factory=Sharing)
    fourier: int = 0
    train_mixture: bool = True

    def build(self, seed: int) -> LhvModel:
        return init_model(self.layers, self.widths, seed, self.sharing, self.fourier, self.train_mixture)

    def to_dict(self) -> dict:
        return {
            "layers": [self.layers.k_a, self.layers.k_b, self.layers.k_c],
            "widths": list(self.widths),
            "sharing": self.sharing.to_dict(),
            "fourier": self.fourier,
            "train_mixture": self.train_mixture,
        }


@dataclass(frozen=True)
class TrainConfig:
    n_batch: int = 8192
    steps: int = 20000
    lr: float = 1e-3
    lr_final: float = 1e-5
    restarts: int = 10
    loss: str = "kl"
    seed: int = 0
    delta_local: float = 0.015
    n_eval: int = 0  # 0 -> max(10 * n_batch, 2**20)
    log_every: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.n_batch < 64:
            raise ValidationError("n_batch must be >= 64")
        if self.restarts < 1:
            raise ValidationError("restarts must be >= 1")
        if self.delta_local <= 0:
            raise ValidationError("delta_local must be positive")
        if self.steps < 0:
            raise ValidationError("steps must be >= 0")
        if self.loss not in ("kl", "euclidean"):
            raise ValidationError(f"unknown loss {self.loss!r}")
        if self.n_eval and self.n_eval < 10 * self.n_batch:
            raise ValidationError("n_eval must be at least 10 * n_batch")

    @property
    def eval_samples(self) -> int:
        return self.n_eval or max(10 * self.n_batch, 2**20)

    def learning_rate(self, step: int) -> float:
        """Cosine decay from ``lr`` to ``lr_final`` over ``steps``."""
        if self.steps <= 1:
            return self.lr
        frac = step / (self.steps - 1)
        return self.lr_final + 0.5 * (self.lr - self.lr_final) * (1 + math.cos(math.pi * frac))


@dataclass
class RestartRecord:
    index: int
    seed: int
    status: str
    initial_distance: float
    final_distance: float
    final_kl: float
    curve: list[tuple[int, float]]
    wall_ms: float


@dataclass
class TrainResult:
    best_distance: float
    best_kl: float
    verdict: str
    restarts: list[RestartRecord]
    best_index: int
    best_model: LhvModel | None = field(default=None, repr=False)
    best_distribution: np.ndarray | None = field(default=None, repr=False)
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        return {
            "best_distance": self.best_distance,
            "best_kl": self.best_kl,
            "verdict": self.verdict,
            "best_index": self.best_index,
            "checkpoint": self.checkpoint,
            "best_distribution": None if self.best_distribution is None else self.best_distribution.tolist(),
            "restarts": [asdict(r) for r in self.restarts],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainResult":
        recs = [RestartRecord(**{**r, "curve": [tuple(c) for c in r["curve"]]}) for r in d["restarts"]]
        dist = d.get("best_distribution")
        return cls(
            d["best_distance"], d["best_kl"], d["verdict"], recs, d.get("best_index", 0),
            None, None if dist is None else np.asarray(dist), d.get("checkpoint"),
        )


class Adam:
    """Adam over a dict of arrays, updating only ``keys``."""

    def __init__(self, params: dict, keys: list[str], beta1=0.9, beta2=0.999, eps=1e-8):
        self.keys = keys
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(params[k]) for k in keys}
        self.v = {k: np.zeros_like(params[k]) for k in keys}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for k in self.keys:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] = params[k] - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def restart_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def evaluate(model: LhvModel, target, cfg: TrainConfig, seed: int) -> tuple[float, float, np.ndarray]:
    p = model_distribution_batched(model, cfg.eval_samples, np.random.default_rng([seed, 0xE7A1]))
    return euclidean_distance(target, p), kl_divergence(target, p), p


def fit_once(target, spec: ModelSpec, cfg: TrainConfig, index: int = 0):
    """One optimisation run; returns (record, model, held-out distribution)."""
    seed = restart_seed(cfg.seed, index)
    t0 = time.perf_counter()
    model = spec.build(seed)
    model.lineage.append(("restart", cfg.seed, index))
    d0, _, _ = evaluate(model, target, cfg, cfg.seed)
    opt = Adam(model.params, model.trainable_keys(), cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng([seed, 1])
    curve: list[tuple[int, float]] = []
    status = "ok"
    for step in range(cfg.steps):
        samples = sample_hidden(cfg.n_batch, rng, model.sharing)
        try:
            value, _, grads = gradients(model, samples, target, cfg.loss)
        except NonFiniteError as exc:
            status = f"aborted: {exc}"
            log.warning("restart %d aborted at step %d: %s", index, step, exc)
            break
        if not math.isfinite(value):
            status = f"aborted: non-finite loss at step {step}"
            break
        opt.step(model.params, grads, cfg.learning_rate(step))
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            curve.append((step, value))
    if status == "ok":
        d, kl, p = evaluate(model, target, cfg, cfg.seed)
    else:
        d, kl, p = math.inf, math.inf, None
    rec = RestartRecord(index, seed, status, d0, d, kl, curve, (time.perf_counter() - t0) * 1e3)
    log.info("restart %d: distance %.5f kl %.3g (%.1fs)", index, d, kl, rec.wall_ms / 1e3)
    return rec, model, p


def train(target, spec: ModelSpec | None = None, cfg: TrainConfig | None = None) -> TrainResult:
    """Fit the model ``cfg.restarts`` times and keep the best held-out distance."""
    spec = spec or ModelSpec()
    cfg = cfg or TrainConfig()
    target = clean_distribution(target)
    records, best = [], None
    for index in range(cfg.restarts):
        rec, model, p = fit_once(target, spec, cfg, index)
        records.append(rec)
        if rec.status == "ok" and (best is None or rec.final_distance < best[0].final_distance):
            best = (rec, model, p)
    if best is None:
        return TrainResult(math.inf, math.inf, "not_learned", records, -1)
    rec, model, p = best
    verdict = "local" if rec.final_distance < cfg.delta_local else "not_learned"
    return TrainResult(rec.final_distance, rec.final_kl, verdict, records, rec.index, model, p)


@dataclass
class ResponseTable:
    """Response networks evaluated on the midpoints of a G x G grid over [0, 1]^2.

    ``tables[party]`` has shape (K, rows, cols, G, G, 4), indexed
    [copy, layer_i, layer_j, x, y, outcome] where x is the party's first input
    and y its second. ``weights`` holds the simplex weights (q, r, s), each (K, k).
    """

    grid: int
    tables: dict[str, np.ndarray]
    weights: tuple[np.ndarray, np.ndarray, np.ndarray]

    @property
    def points(self) -> np.ndarray:
        return (np.arange(self.grid) + 0.5) / self.grid


def extract_response_functions(model: LhvModel, G: int) -> ResponseTable:
    if int(G) < 2:
        raise ValidationError("grid resolution G must be >= 2")
    x = (np.arange(G) + 0.5) / G
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    tables = {}
    for party in PARTIES:
        rows, cols = model.config.bank_shape(party)
        out = np.empty((model.copies, rows, cols, G, G, 4))
        for m in range(model.copies):
            for i in range(rows):
                for j in range(cols):
                    out[m, i, j] = model.network(party, (i, j), m)(X1, X2)
        tables[party] = out
    return ResponseTable(G, tables, tuple(w.copy() for w in model.mixture()))


def reconstruct_from_tables(tables: ResponseTable) -> np.ndarray:
    """Midpoint Riemann sum of the triangle integral over the tabulated grid.

    Alice's table is indexed (beta, gamma), Bob's (gamma, alpha) and
    Charlie's (alpha, beta); copies are mixed uniformly.
    """
    G = tables.grid
    A, B, C = (tables.tables[p] for p in PARTIES)
    q, r, s = tables.weights
    K = A.shape[0]
    P = np.zeros((4, 4, 4))
    for m in range(K):
        for i in range(q.shape[1]):
            for j in range(r.shape[1]):
                for l in range(s.shape[1]):
                    w = q[m, i] * r[m, j] * s[m, l]
                    if w == 0:
                        continue
                    a = A[m, j, l]  # (beta, gamma, a)
                    b = B[m, i, l]  # (gamma, alpha, b)
                    c = C[m, i, j]  # (alpha, beta, c)
                    # sum over gamma: (beta, a) x (alpha, b)
                    ab = a.transpose(0, 2, 1).reshape(G * 4, G) @ b.reshape(G, G * 4)
                    ab = ab.reshape(G, 4, G, 4)  # (beta, a, alpha, b)
                    P += w * np.einsum("yaxb,xyc->abc", ab, c, optimize=True)
    P = P.ravel() / (K * G**3)
    return np.clip(P, 0.0, None) / P.sum()
