"""Detection model and training: convolutional (or mean-pool) sequence
encoder with a unit-norm latent, a small logistic classifier head, binary
cross entropy summed over the batch, and a family-aware margin contrastive
loss over mirrored 2N batches.  All gradients are hand-derived and verified
against central finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InsufficientClass, NonFiniteGradient, ShapeMismatch
from .sequence import EmbeddedDataset

PROB_EPS = 1e-7
_NORM_EPS = 1e-12


@dataclass
class EncoderConfig:
    kind: str = "textcnn"                 # "textcnn" | "meanpool"
    filter_widths: tuple = (3, 4, 5)
    filters_per_width: int = 16
    latent_dim: int = 32

    def __post_init__(self):
        if self.kind not in ("textcnn", "meanpool"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        self.filter_widths = tuple(int(w) for w in self.filter_widths)
        if self.kind == "textcnn" and any(w < 1 for w in self.filter_widths):
            raise ValueError("filter widths must be positive")
        if self.latent_dim < 1 or self.filters_per_width < 1:
            raise ValueError("latent_dim and filters_per_width must be positive")


@dataclass
class TrainConfig:
    mode: str = "mme"                     # "regular" | "mme"
    learning_rate: float = 0.05
    epochs: int = 30
    pairs_per_batch: int = 16             # N; contrastive batches hold 2N samples
    lam: float = 1.0
    margin: float = 1.0
    momentum: float = 0.0
    classifier_hidden: int = 16
    auto_balance: bool = False
    allow_replacement: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("regular", "mme"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        # lam == 0 is the pure-contrastive limit, kept valid for ablations
        if self.lam < 0 or self.margin <= 0:
            raise ValueError("lambda must be nonnegative and margin positive")


@dataclass
class ModelState:
    mode: str
    encoder_cfg: EncoderConfig
    train_cfg: TrainConfig
    params: dict
    input_dim: int
    max_len: int
    lam: float
    margin: float
    loss_history: list = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.train_cfg.seed


# --- parameter init ---------------------------------------------------------

def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(cfg: EncoderConfig, input_dim: int, hidden: int, rng) -> dict:
    params = {}
    if cfg.kind == "textcnn":
        F = cfg.filters_per_width
        for w in cfg.filter_widths:
            params[f"conv{w}_W"] = _glorot(rng, w * input_dim, F, (w * input_dim, F))
            params[f"conv{w}_b"] = np.zeros(F)
        pooled_dim = F * len(cfg.filter_widths)
    else:
        pooled_dim = input_dim
    params["proj_W"] = _glorot(rng, pooled_dim, cfg.latent_dim,
                               (pooled_dim, cfg.latent_dim))
    params["proj_b"] = np.zeros(cfg.latent_dim)
    params["cls_W1"] = _glorot(rng, cfg.latent_dim, hidden, (cfg.latent_dim, hidden))
    params["cls_b1"] = np.zeros(hidden)
    params["cls_W2"] = _glorot(rng, hidden, 1, (hidden, 1))
    params["cls_b2"] = np.zeros(1)
    return params


# --- encoder ----------------------------------------------------------------

def _windows(X, w):
    B, L, D = X.shape
    view = sliding_window_view(X, w, axis=1)          # (B, P, D, w)
    return np.ascontiguousarray(view.transpose(0, 1, 3, 2)).reshape(B, L - w + 1, w * D)


def encode_batch(X, lengths, params, cfg: EncoderConfig):
    """Encode a (B, L, D) batch to unit-norm latents.

    textcnn: per-width valid convolution over time, ReLU, max-pool over
    windows lying fully inside the true length, then one affine map.
    meanpool: mean of the true-length rows, then the affine map.  A latent
    that comes out exactly zero is pinned to the first axis unit vector so
    the output is always unit norm.
    """
    B, L, D = X.shape
    lengths = np.asarray(lengths)
    cache = {"lengths": lengths}
    if cfg.kind == "textcnn":
        if max(cfg.filter_widths) > L:
            raise ShapeMismatch(
                f"filter width {max(cfg.filter_widths)} exceeds sequence length {L}"
            )
        pools = []
        for w in cfg.filter_widths:
            W = params[f"conv{w}_W"]
            if W.shape[0] != w * D:
                raise ShapeMismatch(
                    f"conv{w}_W expects input width {W.shape[0] // w}, got {D}"
                )
            win = _windows(X, w)                      # (B, P, w*D)
            A = np.maximum(win @ W + params[f"conv{w}_b"], 0.0)
            P = A.shape[1]
            valid = np.clip(lengths - w + 1, 0, P)
            mask = np.arange(P)[None, :] < valid[:, None]
            Am = np.where(mask[:, :, None], A, -np.inf)
            pooled = Am.max(axis=1)
            argmax = Am.argmax(axis=1)
            pooled = np.where(np.isfinite(pooled), pooled, 0.0)
            cache[f"w{w}"] = (win, argmax, pooled)
            pools.append(pooled)
        pooled_all = np.concatenate(pools, axis=1)
    else:
        if params["proj_W"].shape[0] != D:
            raise ShapeMismatch("mean-pool projection width mismatch")
        mask = np.arange(L)[None, :] < lengths[:, None]
        denom = np.maximum(lengths, 1).astype(float)
        pooled_all = (X * mask[:, :, None]).sum(axis=1) / denom[:, None]
        cache["meanpool"] = (mask, denom)
    z_raw = pooled_all @ params["proj_W"] + params["proj_b"]
    norms = np.linalg.norm(z_raw, axis=1)
    zero = norms < _NORM_EPS
    safe = np.where(zero, 1.0, norms)
    Z = z_raw / safe[:, None]
    if np.any(zero):
        Z[zero] = 0.0
        Z[zero, 0] = 1.0
    cache.update(pooled_all=pooled_all, z_raw=z_raw, norms=safe, zero=zero, Z=Z)
    return Z, cache


def encoder_backward(dZ, cache, params, cfg: EncoderConfig, X=None):
    """Parameter gradients of the encoder given dL/dZ."""
    Z, norms, zero = cache["Z"], cache["norms"], cache["zero"]
    dz_raw = (dZ - Z * (Z * dZ).sum(axis=1, keepdims=True)) / norms[:, None]
    dz_raw[zero] = 0.0
    grads = {
        "proj_W": cache["pooled_all"].T @ dz_raw,
        "proj_b": dz_raw.sum(axis=0),
    }
    dpooled = dz_raw @ params["proj_W"].T
    if cfg.kind == "textcnn":
        F = cfg.filters_per_width
        offset = 0
        B = dZ.shape[0]
        rows = np.arange(B)[:, None]
        for w in cfg.filter_widths:
            win, argmax, pooled = cache[f"w{w}"]
            dpool = dpooled[:, offset:offset + F] * (pooled > 0)
            gathered = win[rows, argmax]              # (B, F, w*D)
            grads[f"conv{w}_W"] = np.einsum("bfk,bf->kf", gathered, dpool)
            grads[f"conv{w}_b"] = dpool.sum(axis=0)
            offset += F
    return grads


# --- classifier and losses ---------------------------------------------------

def _sigmoid(u):
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    e = np.exp(u[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def classifier_forward(Z, params):
    H_pre = Z @ params["cls_W1"] + params["cls_b1"]
    H = np.maximum(H_pre, 0.0)
    u = (H @ params["cls_W2"] + params["cls_b2"])[:, 0]
    s = _sigmoid(u)
    f = np.clip(s, PROB_EPS, 1.0 - PROB_EPS)
    clipped = (s < PROB_EPS) | (s > 1.0 - PROB_EPS)
    return f, {"Z": Z, "H_pre": H_pre, "H": H, "s": s, "f": f, "clipped": clipped}


def classify(z, params) -> float:
    """Score one latent vector: probability of the malicious class."""
    f, _ = classifier_forward(np.asarray(z, dtype=float)[None, :], params)
    return float(f[0])


def classifier_backward(du, cache, params):
    dU = du[:, None]
    grads = {
        "cls_W2": cache["H"].T @ dU,
        "cls_b2": dU.sum(axis=0),
    }
    dH = (dU @ params["cls_W2"].T) * (cache["H_pre"] > 0)
    grads["cls_W1"] = cache["Z"].T @ dH
    grads["cls_b1"] = dH.sum(axis=0)
    dZ = dH @ params["cls_W1"].T
    return grads, dZ


def bce_loss(f_x, y) -> float:
    """Binary cross entropy, summed when given arrays."""
    f = np.clip(np.asarray(f_x, dtype=float), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y, dtype=float)
    return float(np.sum(-y * np.log(f) - (1.0 - y) * np.log(1.0 - f)))


def _pairwise_distances(Z):
    G = Z @ Z.T
    sq = np.diag(G)
    D2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * G, 0.0)
    return np.sqrt(D2)


def _pos_neg_masks(y, yp):
    y = np.asarray(y)
    yp = np.asarray(yp)
    same = y[:, None] == y[None, :]
    fam_ok = (y[:, None] == 0) | (yp[:, None] == yp[None, :])
    eye = np.eye(len(y), dtype=bool)
    pos = same & fam_ok & ~eye
    neg = ~same
    return pos, neg


def contrastive_loss(zs, ys, yps, m: float) -> float:
    """Sum over samples of mean positive distance plus mean hinged negative gap.

    Positives share the binary label (and the family, for malicious pairs);
    negatives differ in binary label.  A malicious pair from two different
    families belongs to neither set and contributes nothing.
    """
    loss, _ = _contrastive_loss_grad(np.asarray(zs, dtype=float),
                                     np.asarray(ys), np.asarray(yps), m)
    return loss


def _contrastive_loss_grad(Z, y, yp, margin):
    D = _pairwise_distances(Z)
    pos, neg = _pos_neg_masks(y, yp)
    pos_cnt = pos.sum(axis=1)
    neg_cnt = neg.sum(axis=1)
    pos_w = np.where(pos_cnt > 0, 1.0 / np.maximum(pos_cnt, 1), 0.0)
    neg_w = np.where(neg_cnt > 0, 1.0 / np.maximum(neg_cnt, 1), 0.0)
    gap = margin - D
    pos_term = (D * pos).sum(axis=1) * pos_w
    neg_term = (np.maximum(gap, 0.0) * neg).sum(axis=1) * neg_w
    loss = float((pos_term + neg_term).sum())

    # dL/dd_ij accumulated from row i's own term; symmetrize for both orders
    Wmat = pos * pos_w[:, None] - (neg & (gap > 0)) * neg_w[:, None]
    S = Wmat + Wmat.T
    K = np.divide(S, D, out=np.zeros_like(S, dtype=float), where=D > 0)
    dZ = K.sum(axis=1)[:, None] * Z - K @ Z
    return loss, dZ


# --- combined loss and training ----------------------------------------------

def loss_and_grads(params, X, lengths, y, fam, enc_cfg, *, lam, margin,
                   include_contrastive=True):
    """Forward and backward pass of the full model over one batch.

    Returns (loss, grads, parts) where parts = (contrastive, bce).  With
    include_contrastive the loss is L_con + lam * L_bce, otherwise plain
    L_bce (the regular training objective).
    """
    Z, enc_cache = encode_batch(X, lengths, params, enc_cfg)
    f, cls_cache = classifier_forward(Z, params)
    yf = np.asarray(y, dtype=float)
    l_cla = bce_loss(f, yf)
    du = np.where(cls_cache["clipped"], 0.0, f - yf)
    if include_contrastive:
        l_con, dZ_con = _contrastive_loss_grad(Z, y, fam, margin)
        loss = l_con + lam * l_cla
        du = lam * du
    else:
        l_con, dZ_con = 0.0, np.zeros_like(Z)
        loss = l_cla
    cls_grads, dZ_cla = classifier_backward(du, cls_cache, params)
    enc_grads = encoder_backward(dZ_con + dZ_cla, enc_cache, params, enc_cfg)
    grads = {**enc_grads, **cls_grads}
    return loss, grads, (l_con, l_cla)


@dataclass
class ContrastiveBatch:
    """2N samples where slot k+N mirrors slot k's (y, family) labels."""

    X: np.ndarray
    lengths: np.ndarray
    y: np.ndarray
    family: np.ndarray
    n_pairs: int
    indices: np.ndarray
    used_replacement: bool = False

    def check_mirrored(self) -> bool:
        n = self.n_pairs
        return bool(np.all(self.y[:n] == self.y[n:])
                    and np.all(self.family[:n] == self.family[n:]))


def build_contrastive_batch(dataset: EmbeddedDataset, n_pairs: int, rng,
                            allow_replacement: bool = True) -> ContrastiveBatch:
    """First half uniform without replacement; second half mirrors the first
    half's (y, family) labels slot by slot, avoiding repeats when possible.

    When a mirrored class has no unused member left the sampler falls back
    to drawing with replacement and flags the batch, unless the fallback is
    disallowed, in which case InsufficientClass is raised.
    """
    n = len(dataset)
    if n_pairs < 1 or n_pairs > n:
        raise ValueError(f"cannot draw {n_pairs} pairs from {n} samples")
    class_pool: dict[tuple, list[int]] = {}
    for i in range(n):
        class_pool.setdefault((int(dataset.y[i]), int(dataset.family[i])), []).append(i)

    first = rng.choice(n, size=n_pairs, replace=False)
    used = set(int(i) for i in first)
    second = []
    used_replacement = False
    for k in first:
        cls = (int(dataset.y[k]), int(dataset.family[k]))
        pool = class_pool[cls]
        candidates = [i for i in pool if i not in used]
        if candidates:
            pick = candidates[int(rng.integers(len(candidates)))]
            used.add(pick)
        else:
            if not allow_replacement:
                raise InsufficientClass(cls[1])
            pick = pool[int(rng.integers(len(pool)))]
            used_replacement = True
        second.append(pick)

    idx = np.concatenate([np.asarray(first, dtype=int), np.asarray(second, dtype=int)])
    return ContrastiveBatch(
        X=dataset.X[idx],
        lengths=dataset.lengths[idx],
        y=dataset.y[idx],
        family=dataset.family[idx],
        n_pairs=n_pairs,
        indices=idx,
        used_replacement=used_replacement,
    )


def total_loss(batch: ContrastiveBatch, model: ModelState) -> float:
    """Combined objective L_con + lam * L_bce of a batch under the model."""
    loss, _, _ = loss_and_grads(
        model.params, batch.X, batch.lengths, batch.y, batch.family,
        model.encoder_cfg, lam=model.lam, margin=model.margin,
        include_contrastive=True,
    )
    return loss


def train_model(dataset: EmbeddedDataset, enc_cfg: EncoderConfig,
                train_cfg: TrainConfig) -> ModelState:
    """Minibatch SGD for a fixed number of epochs, deterministic under seed.

    mme mode draws mirrored contrastive batches and minimizes
    L_con + lam * L_bce; regular mode shuffles plain batches and minimizes
    the bare BCE sum.
    """
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    n, max_len, input_dim = dataset.X.shape
    if enc_cfg.kind == "textcnn" and max(enc_cfg.filter_widths) > max_len:
        raise ShapeMismatch("filter width exceeds sequence length")
    rng = np.random.default_rng(train_cfg.seed)
    params = init_params(enc_cfg, input_dim, train_cfg.classifier_hidden, rng)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    lam = train_cfg.lam
    batch_size = 2 * train_cfg.pairs_per_batch
    history = []

    for _ in range(train_cfg.epochs):
        epoch_loss = 0.0
        con_parts, cla_parts = [], []
        if train_cfg.mode == "mme":
            pairs = min(train_cfg.pairs_per_batch, n // 2 if n >= 2 else 1)
            n_batches = max(1, n // (2 * pairs))
            for _ in range(n_batches):
                batch = build_contrastive_batch(dataset, pairs, rng,
                                                train_cfg.allow_replacement)
                loss, grads, (l_con, l_cla) = loss_and_grads(
                    params, batch.X, batch.lengths, batch.y, batch.family,
                    enc_cfg, lam=lam, margin=train_cfg.margin,
                    include_contrastive=True,
                )
                _sgd_step(params, velocity, grads, train_cfg)
                epoch_loss += loss
                con_parts.append(l_con)
                cla_parts.append(l_cla)
        else:
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                sel = order[start:start + batch_size]
                loss, grads, _ = loss_and_grads(
                    params, dataset.X[sel], dataset.lengths[sel],
                    dataset.y[sel], dataset.family[sel],
                    enc_cfg, lam=1.0, margin=train_cfg.margin,
                    include_contrastive=False,
                )
                _sgd_step(params, velocity, grads, train_cfg)
                epoch_loss += loss
        history.append(epoch_loss)
        if train_cfg.auto_balance and train_cfg.mode == "mme" and cla_parts:
            mean_cla = float(np.mean(cla_parts))
            mean_con = float(np.mean(con_parts))
            if mean_cla > 1e-12:
                lam = max(mean_con / mean_cla, 1e-6)

    for name, value in params.items():
        if not np.all(np.isfinite(value)):
            raise NonFiniteGradient(f"parameter {name} diverged during training")
    return ModelState(
        mode=train_cfg.mode,
        encoder_cfg=enc_cfg,
        train_cfg=train_cfg,
        params=params,
        input_dim=input_dim,
        max_len=max_len,
        lam=lam,
        margin=train_cfg.margin,
        loss_history=history,
    )


def _sgd_step(params, velocity, grads, cfg: TrainConfig):
    for name, g in grads.items():
        if cfg.momentum > 0:
            velocity[name] = cfg.momentum * velocity[name] - cfg.learning_rate * g
            params[name] += velocity[name]
        else:
            params[name] -= cfg.learning_rate * g


# --- verification ------------------------------------------------------------

def grad_check(model: ModelState, batch: ContrastiveBatch, eps: float = 1e-5,
               jitter_rng=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Inputs are jittered by up to 1e-3 first so no ReLU/hinge preactivation
    sits on a kink.  Relative error uses |a - b| / max(1e-8, |a| + |b|).
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    rng = jitter_rng if jitter_rng is not None else np.random.default_rng(0)
    X = batch.X + rng.uniform(-1e-3, 1e-3, size=batch.X.shape)
    params = {k: v.copy() for k, v in model.params.items()}

    def objective():
        loss, _, _ = loss_and_grads(
            params, X, batch.lengths, batch.y, batch.family,
            model.encoder_cfg, lam=model.lam, margin=model.margin,
            include_contrastive=True,
        )
        return loss

    _, grads, _ = loss_and_grads(
        params, X, batch.lengths, batch.y, batch.family,
        model.encoder_cfg, lam=model.lam, margin=model.margin,
        include_contrastive=True,
    )
    max_rel = 0.0
    for name in sorted(params):
        flat = params[name].ravel()
        g = grads[name].ravel()
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lo_plus = objective()
            flat[i] = orig - eps
            lo_minus = objective()
            flat[i] = orig
            fd = (lo_plus - lo_minus) / (2.0 * eps)
            rel = abs(g[i] - fd) / max(1e-8, abs(g[i]) + abs(fd))
            max_rel = max(max_rel, rel)
    return max_rel


# --- inference ---------------------------------------------------------------

def encode(x, cfg: EncoderConfig, params) -> np.ndarray:
    """Latent vector of one embedded sequence."""
    Z, _ = encode_batch(x.matrix[None, :, :], np.array([x.true_length]), params, cfg)
    return Z[0]


def predict(model: ModelState, trace, table, n_bins, max_len, hash_seed=None):
    """Full pipeline for one trace: embed, encode, classify.

    Returns (predicted label, malicious probability, latent vector).
    """
    from .hashing import DEFAULT_HASH_SEED
    from .sequence import embed_sequence

    seed = DEFAULT_HASH_SEED if hash_seed is None else hash_seed
    seq = embed_sequence(trace, table, n_bins, max_len, seed)
    z = encode(seq, model.encoder_cfg, model.params)
    f = classify(z, model.params)
    return int(f >= 0.5), f, z


def predict_dataset(model: ModelState, dataset: EmbeddedDataset, chunk: int = 256):
    """Vectorized prediction; returns (y_hat, scores, latents)."""
    scores = np.zeros(len(dataset))
    latents = np.zeros((len(dataset), model.encoder_cfg.latent_dim))
    for start in range(0, len(dataset), chunk):
        sel = slice(start, start + chunk)
        Z, _ = encode_batch(dataset.X[sel], dataset.lengths[sel],
                            model.params, model.encoder_cfg)
        f, _ = classifier_forward(Z, model.params)
        scores[sel] = f
        latents[sel] = Z
    return (scores >= 0.5).astype(int), scores, latents


# --- model file --------------------------------------------------------------

def save_model(model: ModelState, path) -> None:
    """Versioned text format: JSON header plus flat parameter arrays."""
    import json

    header = {
        "format": "mme-model",
        "version": 1,
        "mode": model.mode,
        "encoder": asdict(model.encoder_cfg),
        "train": asdict(model.train_cfg),
        "input_dim": model.input_dim,
        "max_len": model.max_len,
        "lam": model.lam,
        "margin": model.margin,
        "loss_history": model.loss_history,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for name in sorted(model.params):
            arr = model.params[name]
            shape = " ".join(str(s) for s in arr.shape)
            fh.write(f"param {name} {arr.ndim} {shape}\n")
            fh.write(" ".join(repr(float(v)) for v in arr.ravel()) + "\n")


def load_model(path) -> ModelState:
    import json

    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != "mme-model":
            raise ValueError("not a model file")
        params = {}
        while True:
            meta = fh.readline()
            if not meta:
                break
            parts = meta.split()
            name, ndim = parts[1], int(parts[2])
            shape = tuple(int(s) for s in parts[3:3 + ndim])
            values = np.array([float(v) for v in fh.readline().split()])
            params[name] = values.reshape(shape)
    enc = EncoderConfig(**{**header["encoder"],
                           "filter_widths": tuple(header["encoder"]["filter_widths"])})
    train_cfg = TrainConfig(**header["train"])
    return ModelState(
        mode=header["mode"],
        encoder_cfg=enc,
        train_cfg=train_cfg,
        params=params,
        input_dim=header["input_dim"],
        max_len=header["max_len"],
        lam=header["lam"],
        margin=header["margin"],
        loss_history=list(header["loss_history"]),
    )
