"""Desk-scale conditional DDPM on synthetic clustered vectors.

The denoiser is a small MLP noise-predictor whose gradients we can verify
against finite differences and flatten into a single well-defined vector.
Data lives directly in the model's input space (no encoder), so a data
point plays the role of the clean latent z_0.

Architecture (fixed apart from D = data_dim, H = hidden_dim, C = n_classes):

    x_in = concat(z_t, class_embed[label])   # conditional (C > 0)
    x_in = z_t                                # unconditional (C == 0)
    a1 = W1 @ x_in + b1 + Wt @ time_embed(t);  h1 = tanh(a1)   # input layer
    a2 = W2 @ h1 + b2;                         h2 = tanh(a2)   # hidden 1
    a3 = W3 @ h2 + b3;                         h3 = tanh(a3)   # hidden 2
    eps_hat = W4 @ h3 + b4                                     # output layer

``time_embed`` is the 32-dim sinusoidal embedding of the integer timestep;
``class_embed`` is a learned C x 8 table standing in for a prompt embedding.

Flat parameter order (row-major within each block):
    W1 (H x in_dim), b1 (H), W2 (H x H), b2 (H), W3 (H x H), b3 (H),
    W4 (D x H), b4 (D), class_embed (C x 8), Wt (H x 32)
with in_dim = D + 8 when conditional, D otherwise.  Total parameter count:
    L = H*in_dim + H + 2*(H*H + H) + D*H + D + 8*C + 32*H

Weights may be float32 (training / caching) or float64 (the verification
mode used by finite-difference tests); all forward/backward arithmetic
follows the weight dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, NumericError

TIME_EMBED_DIM = 32
CLASS_EMBED_DIM = 8


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class Schedule:
    """Linear-beta diffusion schedule; arrays are float64, index 0 is t=1."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise InputError(f"timestep {t} outside [1, {self.T}]")

    def alpha_bar(self, t: int) -> float:
        self.check_t(t)
        return float(self.alpha_bars[t - 1])


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> Schedule:
    if T < 1:
        raise ConfigError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return Schedule(T, betas, alphas, alpha_bars)


def forward_noise(
    z0: np.ndarray, t: int, eps: np.ndarray, sched: Schedule, scaled: bool = True
) -> np.ndarray:
    """Noisy latent at timestep t.

    Scaled (default): z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps.
    Unscaled variant (z_t = z0 + eps) is exposed for ablation.
    """
    sched.check_t(t)
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise InputError(f"shape mismatch: z0 {z0.shape} vs eps {eps.shape}")
    if not scaled:
        return z0 + eps
    ab = sched.alpha_bars[t - 1]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# synthetic clustered data


@dataclass(frozen=True)
class DataPoint:
    x: np.ndarray
    label: int | None = None


@dataclass(frozen=True)
class ClusterSpec:
    n_clusters: int
    per_cluster: int
    dim: int
    means: np.ndarray
    stddev: float
    seed: int

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ConfigError("n_clusters must be >= 1")
        if self.per_cluster < 1:
            raise ConfigError("per_cluster must be >= 1")
        if self.stddev <= 0:
            raise ConfigError("stddev must be > 0")
        means = np.asarray(self.means, dtype=np.float64)
        if means.shape != (self.n_clusters, self.dim):
            raise ConfigError(
                f"means must have shape ({self.n_clusters}, {self.dim})"
            )
        object.__setattr__(self, "means", means)


@dataclass(frozen=True)
class Dataset:
    xs: np.ndarray  # (N, D) float32
    labels: np.ndarray | None  # (N,) int32

    def __len__(self) -> int:
        return len(self.xs)

    def point(self, i: int) -> DataPoint:
        label = None if self.labels is None else int(self.labels[i])
        return DataPoint(self.xs[i], label)


def make_cluster_means(n_clusters: int, dim: int, radius: float, seed: int) -> np.ndarray:
    """Cluster centers at distance ``radius`` from the origin, seeded."""
    g = np.random.default_rng(seed)
    dirs = g.normal(size=(n_clusters, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return radius * dirs


def gen_clusters(spec: ClusterSpec) -> Dataset:
    """Gaussian blobs around each mean; label = cluster index."""
    g = np.random.default_rng(spec.seed)
    xs = np.empty((spec.n_clusters * spec.per_cluster, spec.dim), dtype=np.float32)
    labels = np.empty(spec.n_clusters * spec.per_cluster, dtype=np.int32)
    for c in range(spec.n_clusters):
        block = spec.means[c] + spec.stddev * g.normal(size=(spec.per_cluster, spec.dim))
        xs[c * spec.per_cluster : (c + 1) * spec.per_cluster] = block.astype(np.float32)
        labels[c * spec.per_cluster : (c + 1) * spec.per_cluster] = c
    return Dataset(xs, labels)


# ---------------------------------------------------------------------------
# denoiser model


def param_count(data_dim: int, hidden_dim: int, n_classes: int) -> int:
    """Closed-form flat parameter count of the denoiser."""
    d, h, c = data_dim, hidden_dim, n_classes
    in_dim = d + (CLASS_EMBED_DIM if c > 0 else 0)
    return (
        h * in_dim + h            # input layer
        + h * h + h               # hidden 1
        + h * h + h               # hidden 2
        + d * h + d               # output layer
        + c * CLASS_EMBED_DIM     # class embedding table
        + h * TIME_EMBED_DIM      # timestep-embedding projection
    )


@dataclass
class DenoiserModel:
    data_dim: int
    hidden_dim: int
    n_classes: int
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        expected = param_count(self.data_dim, self.hidden_dim, self.n_classes)
        self.weights = np.asarray(self.weights)
        if self.weights.shape != (expected,):
            raise ConfigError(
                f"expected {expected} flat weights, got shape {self.weights.shape}"
            )

    @property
    def conditional(self) -> bool:
        return self.n_classes > 0

    @property
    def in_dim(self) -> int:
        return self.data_dim + (CLASS_EMBED_DIM if self.conditional else 0)

    @property
    def n_params(self) -> int:
        return self.weights.size

    def astype(self, dtype) -> "DenoiserModel":
        return DenoiserModel(
            self.data_dim, self.hidden_dim, self.n_classes,
            self.weights.astype(dtype),
        )

    def views(self) -> dict[str, np.ndarray]:
        """Named views into the flat weight vector (no copies)."""
        return unflatten(self.weights, self.data_dim, self.hidden_dim, self.n_classes)


def _block_shapes(data_dim: int, hidden_dim: int, n_classes: int):
    d, h, c = data_dim, hidden_dim, n_classes
    in_dim = d + (CLASS_EMBED_DIM if c > 0 else 0)
    return [
        ("W1", (h, in_dim)), ("b1", (h,)),
        ("W2", (h, h)), ("b2", (h,)),
        ("W3", (h, h)), ("b3", (h,)),
        ("W4", (d, h)), ("b4", (d,)),
        ("class_embed", (c, CLASS_EMBED_DIM)),
        ("Wt", (h, TIME_EMBED_DIM)),
    ]


def unflatten(flat: np.ndarray, data_dim: int, hidden_dim: int, n_classes: int) -> dict:
    out = {}
    offset = 0
    for name, shape in _block_shapes(data_dim, hidden_dim, n_classes):
        size = int(np.prod(shape)) if shape else 0
        out[name] = flat[offset : offset + size].reshape(shape)
        offset += size
    assert offset == flat.size
    return out


def flatten(blocks: dict, data_dim: int, hidden_dim: int, n_classes: int) -> np.ndarray:
    parts = [
        np.asarray(blocks[name]).reshape(-1)
        for name, _ in _block_shapes(data_dim, hidden_dim, n_classes)
    ]
    return np.concatenate(parts)


def init_model(
    data_dim: int,
    hidden_dim: int,
    n_classes: int,
    seed: int,
    dtype=np.float32,
) -> DenoiserModel:
    """Gaussian init, std 1/sqrt(fan_in) per layer, zero biases."""
    g = np.random.default_rng(seed)
    blocks = {}
    for name, shape in _block_shapes(data_dim, hidden_dim, n_classes):
        if name.startswith("b"):
            blocks[name] = np.zeros(shape)
        elif name == "class_embed":
            blocks[name] = g.normal(size=shape)
        else:
            fan_in = shape[1]
            blocks[name] = g.normal(size=shape) / math.sqrt(fan_in)
    flat = flatten(blocks, data_dim, hidden_dim, n_classes).astype(dtype)
    return DenoiserModel(data_dim, hidden_dim, n_classes, flat)


def time_embedding(ts: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps; shape (..., 32)."""
    half = TIME_EMBED_DIM // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))
    ang = np.asarray(ts, dtype=np.float64)[..., np.newaxis] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).astype(dtype)


def _check_label(model: DenoiserModel, label: int | None):
    if model.conditional:
        if label is None:
            raise InputError("conditional model requires a label")
        if not 0 <= label < model.n_classes:
            raise InputError(f"label {label} outside [0, {model.n_classes})")
    elif label is not None:
        raise InputError("unconditional model takes no label")


def _forward_batch(model: DenoiserModel, Z: np.ndarray, ts: np.ndarray, labels):
    """Batched forward pass; returns output and the activation cache."""
    w = model.views()
    dtype = model.weights.dtype
    Z = np.asarray(Z, dtype=dtype)
    if Z.ndim != 2 or Z.shape[1] != model.data_dim:
        raise InputError(f"expected inputs of shape (B, {model.data_dim})")
    if model.conditional:
        lab = np.asarray(labels, dtype=np.int64)
        X = np.concatenate([Z, w["class_embed"][lab].astype(dtype)], axis=1)
    else:
        lab = None
        X = Z
    temb = time_embedding(np.asarray(ts), dtype)
    a1 = X @ w["W1"].T + w["b1"] + temb @ w["Wt"].T
    h1 = np.tanh(a1)
    a2 = h1 @ w["W2"].T + w["b2"]
    h2 = np.tanh(a2)
    a3 = h2 @ w["W3"].T + w["b3"]
    h3 = np.tanh(a3)
    out = h3 @ w["W4"].T + w["b4"]
    return out, (X, temb, h1, h2, h3, lab)


def denoise_forward(
    model: DenoiserModel, z_t: np.ndarray, t: int, label: int | None = None
) -> np.ndarray:
    """Predicted noise for a single noisy input at timestep t."""
    _check_label(model, label)
    if t < 1:
        raise InputError("timestep must be >= 1")
    z_t = np.asarray(z_t)
    if z_t.shape != (model.data_dim,):
        raise InputError(f"expected input of shape ({model.data_dim},)")
    labels = [label] if model.conditional else None
    out, _ = _forward_batch(model, z_t[np.newaxis, :], np.array([t]), labels)
    return out[0]


def _backward_batch(model: DenoiserModel, eps: np.ndarray, out, cache):
    """Per-sample gradients of mean((out - eps)**2) w.r.t. all parameters.

    Returns an array of shape (B, L) in the weight dtype.
    """
    w = model.views()
    dtype = model.weights.dtype
    X, temb, h1, h2, h3, lab = cache
    B = out.shape[0]
    d = model.data_dim

    dout = (2.0 / d) * (out - eps)
    gW4 = np.einsum("bd,bh->bdh", dout, h3)
    gb4 = dout
    dh3 = dout @ w["W4"]
    da3 = dh3 * (1.0 - h3 * h3)
    gW3 = np.einsum("bi,bj->bij", da3, h2)
    gb3 = da3
    dh2 = da3 @ w["W3"]
    da2 = dh2 * (1.0 - h2 * h2)
    gW2 = np.einsum("bi,bj->bij", da2, h1)
    gb2 = da2
    dh1 = da2 @ w["W2"]
    da1 = dh1 * (1.0 - h1 * h1)
    gW1 = np.einsum("bi,bj->bij", da1, X)
    gb1 = da1
    gWt = np.einsum("bi,bj->bij", da1, temb)

    parts = [
        gW1.reshape(B, -1), gb1,
        gW2.reshape(B, -1), gb2,
        gW3.reshape(B, -1), gb3,
        gW4.reshape(B, -1), gb4,
    ]
    if model.conditional:
        demb = da1 @ w["W1"][:, d:]  # (B, CLASS_EMBED_DIM)
        gemb = np.zeros((B, model.n_classes, CLASS_EMBED_DIM), dtype=dtype)
        gemb[np.arange(B), lab] = demb
        parts.append(gemb.reshape(B, -1))
    parts.append(gWt.reshape(B, -1))
    return np.concatenate(parts, axis=1)


def grad_loss(
    model: DenoiserModel,
    point: DataPoint,
    t: int,
    eps: np.ndarray,
    sched: Schedule,
    scaled_noise: bool = True,
) -> np.ndarray:
    """Flat gradient of the noise-prediction MSE for one sample at timestep t."""
    _check_label(model, point.label)
    dtype = model.weights.dtype
    eps = np.asarray(eps, dtype=dtype)
    z_t = forward_noise(np.asarray(point.x, dtype=dtype), t, eps, sched, scaled_noise)
    labels = [point.label] if model.conditional else None
    out, cache = _forward_batch(model, z_t[np.newaxis, :], np.array([t]), labels)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite denoiser output at t={t}")
    grads = _backward_batch(model, eps[np.newaxis, :], out, cache)
    return grads[0]


def grad_loss_many(
    model: DenoiserModel,
    xs: np.ndarray,
    labels,
    t: int,
    eps: np.ndarray,
    sched: Schedule,
    scaled_noise: bool = True,
) -> np.ndarray:
    """Per-sample flat gradients for a batch sharing one timestep and noise.

    This is the caching/scoring workhorse: every sample at timestep t uses
    the same Gaussian eps.  Returns shape (B, L).
    """
    dtype = model.weights.dtype
    xs = np.asarray(xs, dtype=dtype)
    eps = np.asarray(eps, dtype=dtype)
    sched.check_t(t)
    if not scaled_noise:
        Z = xs + eps
    else:
        ab = sched.alpha_bars[t - 1]
        Z = np.sqrt(ab) * xs + np.sqrt(1.0 - ab) * eps
    ts = np.full(len(xs), t)
    out, cache = _forward_batch(model, Z, ts, labels)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite denoiser output at t={t}")
    return _backward_batch(model, np.broadcast_to(eps, out.shape), out, cache)


def loss_value(
    model: DenoiserModel,
    point: DataPoint,
    t: int,
    eps: np.ndarray,
    sched: Schedule,
    scaled_noise: bool = True,
) -> float:
    """Noise-prediction MSE for one sample (finite-difference companion)."""
    dtype = model.weights.dtype
    eps = np.asarray(eps, dtype=dtype)
    z_t = forward_noise(np.asarray(point.x, dtype=dtype), t, eps, sched, scaled_noise)
    pred = denoise_forward(model, z_t, t, point.label)
    diff = pred - eps
    return float(np.mean(diff * diff))


# ---------------------------------------------------------------------------
# training and sampling


@dataclass(frozen=True)
class TrainResult:
    model: DenoiserModel
    epochs: int
    avg_lr: float
    initial_loss: float
    final_loss: float


def train(
    model: DenoiserModel,
    dataset: Dataset,
    epochs: int,
    lr: float,
    batch: int,
    sched: Schedule,
    seed: int,
    scaled_noise: bool = True,
) -> TrainResult:
    """Plain minibatch gradient descent on the noise-prediction loss.

    Each batch element gets a uniform timestep and fresh Gaussian noise.
    Returns the trained model plus the (epochs, avg_lr) constants that scale
    influence scores later.
    """
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    if epochs < 0 or batch < 1:
        raise ConfigError("epochs must be >= 0 and batch >= 1")
    dtype = model.weights.dtype
    weights = model.weights.copy()
    work = DenoiserModel(model.data_dim, model.hidden_dim, model.n_classes, weights)
    w = work.views()
    g = np.random.default_rng(seed)
    n = len(dataset)
    d = model.data_dim
    initial_loss = math.nan
    last_loss = math.nan

    for epoch in range(epochs):
        order = g.permutation(n)
        for lo in range(0, n, batch):
            idx = order[lo : lo + batch]
            X = dataset.xs[idx].astype(dtype)
            labels = dataset.labels[idx] if work.conditional else None
            ts = g.integers(1, sched.T + 1, size=len(idx))
            eps = g.standard_normal((len(idx), d)).astype(dtype)
            ab = sched.alpha_bars[ts - 1][:, np.newaxis]
            Z = (np.sqrt(ab) * X + np.sqrt(1.0 - ab) * eps) if scaled_noise else X + eps
            Z = Z.astype(dtype)
            out, cache = _forward_batch(work, Z, ts, labels)
            diff = out - eps
            loss = float(np.mean(diff * diff))
            if not math.isfinite(loss):
                raise NumericError(f"training diverged at epoch {epoch}")
            if math.isnan(initial_loss):
                initial_loss = loss
            last_loss = loss

            # batch-mean gradient, accumulated directly (no per-sample split)
            B = len(idx)
            X_in, temb, h1, h2, h3, lab = cache
            dout = (2.0 / (d * B)) * diff
            dh3 = dout @ w["W4"]
            da3 = dh3 * (1.0 - h3 * h3)
            dh2 = da3 @ w["W3"]
            da2 = dh2 * (1.0 - h2 * h2)
            dh1 = da2 @ w["W2"]
            da1 = dh1 * (1.0 - h1 * h1)
            w["W4"] -= lr * (dout.T @ h3)
            w["b4"] -= lr * dout.sum(axis=0)
            w["W3"] -= lr * (da3.T @ h2)
            w["b3"] -= lr * da3.sum(axis=0)
            w["W2"] -= lr * (da2.T @ h1)
            w["b2"] -= lr * da2.sum(axis=0)
            w["W1"] -= lr * (da1.T @ X_in)
            w["b1"] -= lr * da1.sum(axis=0)
            w["Wt"] -= lr * (da1.T @ temb)
            if work.conditional:
                demb = da1 @ w["W1"][:, d:]
                np.add.at(w["class_embed"], lab, (-lr * demb).astype(dtype))

    return TrainResult(work, epochs, lr, initial_loss, last_loss)


def sample_ddpm_batch(
    model: DenoiserModel, sched: Schedule, labels, seed: int, n: int | None = None
) -> np.ndarray:
    """Ancestral DDPM sampling for a batch; deterministic per seed."""
    if model.conditional:
        labels = np.asarray(labels, dtype=np.int64)
        B = len(labels)
    else:
        if labels is not None:
            raise InputError("unconditional model takes no labels")
        B = n if n is not None else 1
    dtype = model.weights.dtype
    g = np.random.default_rng(seed)
    z = g.standard_normal((B, model.data_dim)).astype(dtype)
    for t in range(sched.T, 0, -1):
        ts = np.full(B, t)
        eps_hat, _ = _forward_batch(model, z, ts, labels)
        beta = sched.betas[t - 1]
        alpha = sched.alphas[t - 1]
        ab = sched.alpha_bars[t - 1]
        mean = (z - (beta / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(alpha)
        if t > 1:
            z = mean + math.sqrt(beta) * g.standard_normal((B, model.data_dim))
        else:
            z = mean
        z = z.astype(dtype)
    if not np.all(np.isfinite(z)):
        raise NumericError("sampling produced non-finite values")
    return z


def sample_ddpm(
    model: DenoiserModel, sched: Schedule, label: int | None, seed: int
) -> np.ndarray:
    """Single ancestral sample; see :func:`sample_ddpm_batch`."""
    if model.conditional:
        _check_label(model, label)
        return sample_ddpm_batch(model, sched, [label], seed)[0]
    return sample_ddpm_batch(model, sched, None, seed, n=1)[0]
