"""Causally constrained layered LHV model of the triangle network.

Each party owns a bank of small ReLU/softmax networks. Alice's bank is indexed
by (j, l) over the ranks of sources beta and gamma and only ever sees
(beta, gamma); Bob's bank is indexed by (i, l) and sees (gamma, alpha);
Charlie's bank is indexed by (i, j) and sees (alpha, beta). The model
distribution is

    P(a,b,c) = 1/N sum_n sum_{ijl} q_i r_j s_l A_jl(a|b_n,g_n) B_il(b|g_n,a_n) C_ij(c|a_n,b_n)

With shared randomness the model holds K such triangles (copies) and mixes them
uniformly.

All parameters are stored stacked: a party's layer-h weight has shape
(K, L, fan_in, fan_out) where L is the size of that party's bank.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from lhvnet.exceptions import NonFiniteError, ValidationError

PARTIES = ("alice", "bob", "charlie")
# columns of a hidden sample (alpha, beta, gamma) fed to each party, in order
PARTY_INPUTS = {"alice": (1, 2), "bob": (2, 0), "charlie": (0, 1)}
PROB_FLOOR = 1e-12
DEFAULT_WIDTHS = (32, 32, 32)


@dataclass(frozen=True)
class LayerConfig:
    k_a: int = 1
    k_b: int = 1
    k_c: int = 1
    max_product: int = 64

    def __post_init__(self):
        for name in ("k_a", "k_b", "k_c"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.k_a * self.k_b * self.k_c > self.max_product:
            raise ValidationError(
                f"k_a*k_b*k_c = {self.k_a * self.k_b * self.k_c} exceeds {self.max_product}"
            )

    def bank_shape(self, party: str) -> tuple[int, int]:
        return {
            "alice": (self.k_b, self.k_c),
            "bob": (self.k_a, self.k_c),
            "charlie": (self.k_a, self.k_b),
        }[party]

    def bank_size(self, party: str) -> int:
        r, c = self.bank_shape(party)
        return r * c


@dataclass(frozen=True)
class Sharing:
    """How hidden randomness is organised across K triangle copies.

    ``independent`` is a single triangle. ``shared_all`` mixes K full triangle
    copies uniformly (all copies see the same hidden samples). ``shared_pair``
    also mixes K copies, but draws the two paired sources afresh for each copy
    while the unpaired source stream is common to all copies.
    """

    mode: str = "independent"
    copies: int = 1
    pair: tuple[int, int] = (0, 1)

    def __post_init__(self):
        if self.mode not in ("independent", "shared_all", "shared_pair"):
            raise ValidationError(f"unknown sharing mode {self.mode!r}")
        if self.copies < 1:
            raise ValidationError("copies must be >= 1")
        if self.mode == "independent" and self.copies != 1:
            raise ValidationError("independent sharing has exactly one copy")
        if len(set(self.pair)) != 2 or not set(self.pair) <= {0, 1, 2}:
            raise ValidationError(f"pair must name two distinct sources, got {self.pair}")

    @classmethod
    def shared_all(cls, k: int) -> "Sharing":
        return cls("shared_all", k)

    @classmethod
    def shared_pair(cls, k: int, pair: tuple[int, int] = (0, 1)) -> "Sharing":
        return cls("shared_pair", k, tuple(sorted(pair)))

    def to_dict(self) -> dict:
        return {"mode": self.mode, "copies": self.copies, "pair": list(self.pair)}

    @classmethod
    def from_dict(cls, d: dict) -> "Sharing":
        return cls(d["mode"], int(d["copies"]), tuple(d["pair"]))


@dataclass
class LhvModel:
    config: LayerConfig
    widths: tuple[int, ...]
    sharing: Sharing
    params: dict[str, np.ndarray]
    seed: int = 0
    fourier: int = 0
    train_mixture: bool = True
    lineage: list = field(default_factory=list)

    @property
    def copies(self) -> int:
        return self.sharing.copies

    @property
    def depth(self) -> int:
        return len(self.widths) + 1

    def mixture(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Simplex weights (q, r, s), each shaped (K, k)."""
        return tuple(_softmax(self.params[f"mix.{n}"]) for n in "qrs")

    def network(self, party: str, layer: tuple[int, int], copy: int = 0) -> "ResponseNetwork":
        rows, cols = self.config.bank_shape(party)
        i, j = layer
        if not (0 <= i < rows and 0 <= j < cols):
            raise ValidationError(f"{party} has no layer {layer}")
        flat = i * cols + j
        weights = [self.params[f"{party}.W{h}"][copy, flat] for h in range(self.depth)]
        biases = [self.params[f"{party}.b{h}"][copy, flat] for h in range(self.depth)]
        return ResponseNetwork(weights, biases, self.fourier)

    def networks(self) -> Iterator[tuple[int, str, tuple[int, int], "ResponseNetwork"]]:
        for m in range(self.copies):
            for party in PARTIES:
                rows, cols = self.config.bank_shape(party)
                for i in range(rows):
                    for j in range(cols):
                        yield m, party, (i, j), self.network(party, (i, j), m)

    def n_networks(self) -> int:
        return self.copies * sum(self.config.bank_size(p) for p in PARTIES)

    def copy(self) -> "LhvModel":
        return LhvModel(
            self.config, self.widths, self.sharing,
            {k: v.copy() for k, v in self.params.items()},
            self.seed, self.fourier, self.train_mixture, list(self.lineage),
        )

    def trainable_keys(self) -> list[str]:
        keys = [k for k in self.params if not k.startswith("mix.")]
        if self.train_mixture:
            keys += [f"mix.{n}" for n in "qrs"]
        return keys


@dataclass
class ResponseNetwork:
    """A single party response function: 2 inputs -> 4 outcome probabilities."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    fourier: int = 0

    def __call__(self, x1, x2) -> np.ndarray:
        x = np.stack(np.broadcast_arrays(np.asarray(x1, float), np.asarray(x2, float)), axis=-1)
        h = encode_inputs(x, self.fourier)
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ W + b, 0.0)
        return _softmax(h @ self.weights[-1] + self.biases[-1])


def party_response(net: ResponseNetwork, in1, in2) -> np.ndarray:
    """Outcome distribution of one response network at inputs (in1, in2)."""
    return net(in1, in2)


def encode_inputs(x: np.ndarray, fourier: int) -> np.ndarray:
    """Raw inputs, optionally followed by sin/cos features of frequency 1..fourier."""
    if fourier <= 0:
        return x
    freqs = 2 * np.pi * np.arange(1, fourier + 1)
    ang = x[..., :, None] * freqs
    feats = [x, np.sin(ang).reshape(*x.shape[:-1], -1), np.cos(ang).reshape(*x.shape[:-1], -1)]
    return np.concatenate(feats, axis=-1)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def init_model(
    config: LayerConfig,
    widths=DEFAULT_WIDTHS,
    seed: int = 0,
    sharing: Sharing | None = None,
    fourier: int = 0,
    train_mixture: bool = True,
) -> LhvModel:
    """Build a model deterministically from ``seed``.

    Weights are He-uniform, U(-sqrt(6/fan_in), sqrt(6/fan_in)); biases are
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)); mixture weights start uniform.
    Parameters are drawn copy by copy, so copy 0 of a K-copy model equals the
    single-copy model built from the same seed.
    """
    widths = tuple(int(w) for w in widths)
    if not widths or any(w <= 0 for w in widths):
        raise ValidationError(f"widths must be a non-empty list of positive integers, got {widths}")
    sharing = sharing or Sharing()
    in_dim = 2 * (1 + 2 * fourier)
    dims = (in_dim, *widths, 4)
    rng = np.random.default_rng(seed)
    per_copy: dict[str, list] = {}
    for _ in range(sharing.copies):
        for party in PARTIES:
            Ws: list[list] = [[] for _ in range(len(dims) - 1)]
            bs: list[list] = [[] for _ in range(len(dims) - 1)]
            for _ in range(config.bank_size(party)):
                for h, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
                    lim = np.sqrt(6.0 / fi)
                    Ws[h].append(rng.uniform(-lim, lim, size=(fi, fo)))
                    bs[h].append(rng.uniform(-1 / np.sqrt(fi), 1 / np.sqrt(fi), size=fo))
            for h in range(len(dims) - 1):
                per_copy.setdefault(f"{party}.W{h}", []).append(np.stack(Ws[h]))
                per_copy.setdefault(f"{party}.b{h}", []).append(np.stack(bs[h]))
    params = {k: np.stack(v) for k, v in per_copy.items()}
    K = sharing.copies
    params["mix.q"] = np.zeros((K, config.k_a))
    params["mix.r"] = np.zeros((K, config.k_b))
    params["mix.s"] = np.zeros((K, config.k_c))
    return LhvModel(config, widths, sharing, params, seed, fourier, train_mixture, [("init", seed)])


def sample_hidden(n: int, seed, sharing: Sharing | None = None) -> np.ndarray:
    """Uniform hidden variables, shape (S, n, 3) with columns (alpha, beta, gamma).

    S is 1 unless ``sharing`` is ``shared_pair``, in which case S = K: the
    paired columns are drawn per copy and the remaining column is one stream
    reused by every copy.
    """
    if int(n) <= 0:
        raise ValidationError("n must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sharing = sharing or Sharing()
    if sharing.mode != "shared_pair":
        return rng.random((1, n, 3))
    K = sharing.copies
    (free,) = {0, 1, 2} - set(sharing.pair)
    out = np.empty((K, n, 3))
    out[:, :, free] = rng.random(n)[None, :]
    paired = rng.random((K, n, 2))
    out[:, :, sharing.pair[0]] = paired[..., 0]
    out[:, :, sharing.pair[1]] = paired[..., 1]
    return out


def _as_sample_array(samples) -> np.ndarray:
    s = np.asarray(samples, dtype=float)
    if s.ndim == 2:
        s = s[None]
    if s.ndim != 3 or s.shape[-1] != 3:
        raise ValidationError(f"samples must have shape (n, 3) or (S, n, 3), got {s.shape}")
    if s.shape[1] == 0:
        raise ValidationError("sample set is empty")
    return s


def _party_forward(model: LhvModel, party: str, samples: np.ndarray, cache: list | None):
    cols = list(PARTY_INPUTS[party])
    h = encode_inputs(samples[..., cols], model.fourier)[:, None]  # (S, 1, N, d)
    if cache is not None:
        cache.append(h)
    depth = model.depth
    for k in range(depth):
        W = model.params[f"{party}.W{k}"]
        b = model.params[f"{party}.b{k}"]
        z = h @ W + b[:, :, None, :]
        if k < depth - 1:
            h = np.maximum(z, 0.0)
            if cache is not None:
                cache.append(h)
        else:
            out = _softmax(z)
    return out  # (K, L, N, 4)


def _bank(model: LhvModel, party: str, out: np.ndarray) -> np.ndarray:
    r, c = model.config.bank_shape(party)
    return out.reshape(out.shape[0], r, c, *out.shape[2:])


def _combine(q, r, s, A, B, C) -> np.ndarray:
    """(K, N)-averaged sum over layer indices; returns (4, 4, 4)."""
    K, N = A.shape[0], A.shape[3]
    P = np.einsum("mi,mj,ml,mjlna,milnb,mijnc->abc", q, r, s, A, B, C, optimize="greedy")
    return P / (K * N)


def _forward(model: LhvModel, samples, keep_cache: bool):
    s = _as_sample_array(samples)
    if s.shape[0] not in (1, model.copies):
        raise ValidationError(f"sample array has {s.shape[0]} copies, model has {model.copies}")
    caches = {p: [] for p in PARTIES} if keep_cache else None
    outs = {}
    for party in PARTIES:
        out = _party_forward(model, party, s, caches[party] if keep_cache else None)
        outs[party] = out
    A = _bank(model, "alice", outs["alice"])
    B = _bank(model, "bob", outs["bob"])
    C = _bank(model, "charlie", outs["charlie"])
    q, r, w = model.mixture()
    P = _combine(q, r, w, A, B, C)
    return P, (s, caches, outs, A, B, C, q, r, w)


def model_distribution(model: LhvModel, samples) -> np.ndarray:
    """Monte Carlo estimate of the model's length-64 distribution."""
    P, _ = _forward(model, samples, keep_cache=False)
    P = P.ravel()
    return np.clip(P, 0.0, None) / P.sum()


def model_distribution_batched(model: LhvModel, n: int, seed, chunk: int = 65536) -> np.ndarray:
    """Large-sample estimate evaluated in chunks of ``chunk`` samples."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    total = np.zeros(64)
    done = 0
    while done < n:
        m = min(chunk, n - done)
        P, _ = _forward(model, sample_hidden(m, rng, model.sharing), keep_cache=False)
        total += P.ravel() * m
        done += m
    total /= n
    return np.clip(total, 0.0, None) / total.sum()


def loss_and_grad_wrt_p(p_model: np.ndarray, target: np.ndarray, kind: str) -> tuple[float, np.ndarray]:
    """Loss value and its derivative with respect to the model distribution."""
    p = p_model.ravel()
    t = np.asarray(target, float).ravel()
    if kind == "kl":
        floored = np.maximum(p, PROB_FLOOR)
        mask = t > 0
        loss = float(np.sum(t[mask] * np.log(t[mask] / floored[mask])))
        g = np.where(p > PROB_FLOOR, -t / floored, 0.0)
        return loss, g
    if kind == "euclidean":
        diff = p - t
        d = float(np.sqrt(diff @ diff))
        g = diff / d if d > 0 else np.zeros_like(diff)
        return d, g
    raise ValidationError(f"unknown loss kind {kind!r}")


def _softmax_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return y * (dy - np.sum(y * dy, axis=-1, keepdims=True))


def _check_finite(arr: np.ndarray, path: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite value", path)


def gradients(model: LhvModel, samples, target, loss: str = "kl") -> tuple[float, np.ndarray, dict]:
    """Loss, model distribution, and gradient of the loss for every parameter.

    Mixture-logit gradients are returned even when the mixture is frozen;
    optimizers skip them via ``model.trainable_keys()``.
    """
    for key, arr in model.params.items():
        _check_finite(arr, key)
    P, (s, caches, outs, A, B, C, q, r, w) = _forward(model, samples, keep_cache=True)
    _check_finite(P, "distribution")
    value, g = loss_and_grad_wrt_p(P, target, loss)
    G = g.reshape(4, 4, 4)
    K, N = A.shape[0], A.shape[3]
    scale = 1.0 / (K * N)

    # unweighted partial derivatives keep every layer index
    GB = np.einsum("abc,milnb->milnac", G, B, optimize=True)
    dA_u = np.einsum("milnac,mijnc->mijlna", GB, C, optimize=True)
    GC = np.einsum("abc,mijnc->mijnab", G, C, optimize=True)
    dB_u = np.einsum("mijnab,mjlna->mijlnb", GC, A, optimize=True)
    GA = np.einsum("abc,mjlna->mjlnbc", G, A, optimize=True)
    dC_u = np.einsum("mjlnbc,milnb->mijlnc", GA, B, optimize=True)

    # T[m,i,j,l] = sum_n,a,b,c G A B C
    T = np.einsum("mijlna,mjlna->mijl", dA_u, A) * scale
    grads = {}
    dq = np.einsum("mijl,mj,ml->mi", T, r, w)
    dr = np.einsum("mijl,mi,ml->mj", T, q, w)
    ds = np.einsum("mijl,mi,mj->ml", T, q, r)
    for name, prob, d in (("q", q, dq), ("r", r, dr), ("s", w, ds)):
        grads[f"mix.{name}"] = _softmax_backward(prob, d)

    dA = np.einsum("mijlna,mi,mj,ml->mjlna", dA_u, q, r, w) * scale
    dB = np.einsum("mijlnb,mi,mj,ml->milnb", dB_u, q, r, w) * scale
    dC = np.einsum("mijlnc,mi,mj,ml->mijnc", dC_u, q, r, w) * scale

    for party, dOut in (("alice", dA), ("bob", dB), ("charlie", dC)):
        dOut = dOut.reshape(outs[party].shape)
        _backprop_party(model, party, caches[party], outs[party], dOut, grads)

    for key, arr in grads.items():
        _check_finite(arr, key)
    return value, P.ravel(), grads


def _backprop_party(model, party, cache, out, dOut, grads):
    depth = model.depth
    dz = _softmax_backward(out, dOut)
    for k in range(depth - 1, -1, -1):
        h_in = cache[k]
        W = model.params[f"{party}.W{k}"]
        dW = np.swapaxes(h_in, -1, -2) @ dz
        grads[f"{party}.W{k}"] = dW
        grads[f"{party}.b{k}"] = dz.sum(axis=2)
        if k > 0:
            dh = dz @ np.swapaxes(W, -1, -2)
            dz = dh * (cache[k] > 0)


def flatten(params: dict[str, np.ndarray], keys: list[str]) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in keys])


def unflatten_into(params: dict[str, np.ndarray], keys: list[str], vec: np.ndarray) -> None:
    pos = 0
    for k in keys:
        n = params[k].size
        params[k] = vec[pos:pos + n].reshape(params[k].shape).copy()
        pos += n
