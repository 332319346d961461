"""Next-template prediction with a bidirectional LSTM and additive attention.

The model reads a window of per-entry input vectors (template vector
concatenated with the encoded parameters), runs an LSTM over the window
in both directions, pools the concatenated hidden states with additive
attention, and classifies the next template id with a softmax layer.

Everything is implemented directly in numpy with exact gradients:
forward, backward-through-time for both directions, the attention
backward pass, Adam updates and global-norm gradient clipping.  A
finite-difference gradient check guards the whole backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergedLoss, ShapeMismatch

#: Serialization order for all weight tensors.
TENSOR_NAMES = ["wx_f", "wh_f", "b_f", "wx_b", "wh_b", "b_b",
                "wa", "ba", "va", "wo", "bo"]


@dataclass
class SeqModelConfig:
    """Architecture and training hyperparameters."""

    input_dim: int
    classes: int
    hidden: int = 256
    window: int = 20
    attention_dim: int | None = None
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 5
    batch_size: int = 64
    clip_norm: float = 5.0
    candidate_count: int = 9
    train_noise: float = 0.0
    seed: int = 7

    @property
    def attn(self) -> int:
        return self.attention_dim if self.attention_dim is not None else self.hidden


class ModelWeights:
    """Named weight tensors with dict-style access."""

    def __init__(self, tensors: dict[str, np.ndarray]):
        missing = [n for n in TENSOR_NAMES if n not in tensors]
        if missing:
            raise ShapeMismatch(f"missing weight tensors: {missing}")
        self.tensors = {n: np.asarray(tensors[n], dtype=np.float64)
                        for n in TENSOR_NAMES}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = value

    def copy(self) -> "ModelWeights":
        return ModelWeights({n: v.copy() for n, v in self.tensors.items()})

    def items(self):
        return ((n, self.tensors[n]) for n in TENSOR_NAMES)

    @property
    def hidden(self) -> int:
        return self.tensors["wh_f"].shape[0]

    @property
    def input_dim(self) -> int:
        return self.tensors["wx_f"].shape[0]

    @property
    def classes(self) -> int:
        return self.tensors["wo"].shape[1]


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int,
            shape: tuple[int, ...]) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_weights(cfg: SeqModelConfig,
                 rng: np.random.Generator | None = None) -> ModelWeights:
    """Xavier-uniform weights; zero biases except forget gates at 1."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    d, h, a, c = cfg.input_dim, cfg.hidden, cfg.attn, cfg.classes
    tensors = {}
    for suffix in ("f", "b"):
        tensors[f"wx_{suffix}"] = _xavier(rng, d, 4 * h, (d, 4 * h))
        tensors[f"wh_{suffix}"] = _xavier(rng, h, 4 * h, (h, 4 * h))
        bias = np.zeros(4 * h)
        bias[h:2 * h] = 1.0  # forget-gate bias: remember by default
        tensors[f"b_{suffix}"] = bias
    tensors["wa"] = _xavier(rng, 2 * h, a, (2 * h, a))
    tensors["ba"] = np.zeros(a)
    tensors["va"] = _xavier(rng, a, 1, (a,))
    tensors["wo"] = _xavier(rng, 2 * h, c, (2 * h, c))
    tensors["bo"] = np.zeros(c)
    return ModelWeights(tensors)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=axis, keepdims=True)


def _run_lstm(x: np.ndarray, wx: np.ndarray, wh: np.ndarray, b: np.ndarray,
              reverse: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One direction of the LSTM; returns hidden states, cells and gates."""
    batch, steps, _ = x.shape
    h_dim = wh.shape[0]
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    hs = np.zeros((batch, steps, h_dim))
    cs = np.zeros((batch, steps, h_dim))
    acts = np.zeros((batch, steps, 4 * h_dim))
    h = np.zeros((batch, h_dim))
    c = np.zeros((batch, h_dim))
    for t in order:
        pre = x[:, t] @ wx + h @ wh + b
        gi = _sigmoid(pre[:, :h_dim])
        gf = _sigmoid(pre[:, h_dim:2 * h_dim])
        gg = np.tanh(pre[:, 2 * h_dim:3 * h_dim])
        go = _sigmoid(pre[:, 3 * h_dim:])
        c = gf * c + gi * gg
        h = go * np.tanh(c)
        acts[:, t, :h_dim] = gi
        acts[:, t, h_dim:2 * h_dim] = gf
        acts[:, t, 2 * h_dim:3 * h_dim] = gg
        acts[:, t, 3 * h_dim:] = go
        cs[:, t] = c
        hs[:, t] = h
    return hs, cs, acts


def _back_lstm(x: np.ndarray, hs: np.ndarray, cs: np.ndarray, acts: np.ndarray,
               wx: np.ndarray, wh: np.ndarray, dh_ext: np.ndarray,
               reverse: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward-through-time for one direction given per-step h gradients."""
    batch, steps, _ = x.shape
    h_dim = wh.shape[0]
    order = list(range(steps - 1, -1, -1)) if reverse else list(range(steps))
    dwx = np.zeros_like(wx)
    dwh = np.zeros_like(wh)
    db = np.zeros(wx.shape[1])
    dh_carry = np.zeros((batch, h_dim))
    dc_carry = np.zeros((batch, h_dim))
    for idx in range(steps - 1, -1, -1):
        t = order[idx]
        prev_t = order[idx - 1] if idx > 0 else None
        h_prev = hs[:, prev_t] if prev_t is not None else np.zeros((batch, h_dim))
        c_prev = cs[:, prev_t] if prev_t is not None else np.zeros((batch, h_dim))
        gi = acts[:, t, :h_dim]
        gf = acts[:, t, h_dim:2 * h_dim]
        gg = acts[:, t, 2 * h_dim:3 * h_dim]
        go = acts[:, t, 3 * h_dim:]
        tanh_c = np.tanh(cs[:, t])
        dh = dh_ext[:, t] + dh_carry
        do = dh * tanh_c
        dc = dc_carry + dh * go * (1.0 - tanh_c ** 2)
        di = dc * gg
        df = dc * c_prev
        dg = dc * gi
        dc_carry = dc * gf
        dpre = np.concatenate([
            di * gi * (1.0 - gi),
            df * gf * (1.0 - gf),
            dg * (1.0 - gg ** 2),
            do * go * (1.0 - go),
        ], axis=1)
        dwx += x[:, t].T @ dpre
        dwh += h_prev.T @ dpre
        db += dpre.sum(axis=0)
        dh_carry = dpre @ wh.T
    return dwx, dwh, db


def _forward_full(weights: ModelWeights, x: np.ndarray):
    """Full forward pass; returns probabilities, attention and caches."""
    if x.ndim != 3:
        raise ShapeMismatch(f"expected (batch, steps, dim) input, got {x.shape}")
    if x.shape[2] != weights.input_dim:
        raise ShapeMismatch(
            f"input dim {x.shape[2]} but weights expect {weights.input_dim}")
    hs_f, cs_f, acts_f = _run_lstm(x, weights["wx_f"], weights["wh_f"],
                                   weights["b_f"], reverse=False)
    hs_b, cs_b, acts_b = _run_lstm(x, weights["wx_b"], weights["wh_b"],
                                   weights["b_b"], reverse=True)
    hs2 = np.concatenate([hs_f, hs_b], axis=2)          # (B, T, 2H)
    e_pre = hs2 @ weights["wa"] + weights["ba"]          # (B, T, A)
    e_tanh = np.tanh(e_pre)
    scores = e_tanh @ weights["va"]                      # (B, T)
    alpha = _softmax(scores, axis=1)
    context = (alpha[:, :, None] * hs2).sum(axis=1)      # (B, 2H)
    logits = context @ weights["wo"] + weights["bo"]
    probs = _softmax(logits, axis=1)
    cache = (hs_f, cs_f, acts_f, hs_b, cs_b, acts_b, hs2, e_tanh, alpha,
             context, probs)
    return probs, alpha, cache


def forward(weights: ModelWeights, x: np.ndarray,
            return_attention: bool = False):
    """Class probabilities for one window (T, D) or a batch (B, T, D).

    Output rows are valid distributions: non-negative, summing to one.
    """
    single = x.ndim == 2
    xb = x[None, :, :] if single else x
    probs, alpha, _ = _forward_full(weights, np.asarray(xb, dtype=np.float64))
    if single:
        probs, alpha = probs[0], alpha[0]
    if return_attention:
        return probs, alpha
    return probs


def loss_and_grads(weights: ModelWeights, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and exact gradients for every tensor."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    probs, _, cache = _forward_full(weights, x)
    (hs_f, cs_f, acts_f, hs_b, cs_b, acts_b, hs2, e_tanh, alpha,
     context, _) = cache
    batch = x.shape[0]
    if np.any(y < 0) or np.any(y >= weights.classes):
        raise ShapeMismatch("target class out of range")
    eps = 1e-12
    loss = float(-np.log(probs[np.arange(batch), y] + eps).mean())

    dlogits = probs.copy()
    dlogits[np.arange(batch), y] -= 1.0
    dlogits /= batch

    grads: dict[str, np.ndarray] = {}
    grads["wo"] = context.T @ dlogits
    grads["bo"] = dlogits.sum(axis=0)
    dcontext = dlogits @ weights["wo"].T                         # (B, 2H)

    dalpha = (hs2 * dcontext[:, None, :]).sum(axis=2)            # (B, T)
    dhs2 = alpha[:, :, None] * dcontext[:, None, :]              # (B, T, 2H)
    dscores = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
    grads["va"] = (e_tanh * dscores[:, :, None]).sum(axis=(0, 1))
    de_pre = dscores[:, :, None] * weights["va"][None, None, :] \
        * (1.0 - e_tanh ** 2)
    grads["wa"] = np.einsum("btk,bta->ka", hs2, de_pre)
    grads["ba"] = de_pre.sum(axis=(0, 1))
    dhs2 += de_pre @ weights["wa"].T

    h_dim = weights.hidden
    dwx_f, dwh_f, db_f = _back_lstm(x, hs_f, cs_f, acts_f, weights["wx_f"],
                                    weights["wh_f"], dhs2[:, :, :h_dim],
                                    reverse=False)
    dwx_b, dwh_b, db_b = _back_lstm(x, hs_b, cs_b, acts_b, weights["wx_b"],
                                    weights["wh_b"], dhs2[:, :, h_dim:],
                                    reverse=True)
    grads.update({"wx_f": dwx_f, "wh_f": dwh_f, "b_f": db_f,
                  "wx_b": dwx_b, "wh_b": dwh_b, "b_b": db_b})
    return loss, grads


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most clip_norm."""
    total = float(np.sqrt(sum(float((g ** 2).sum()) for g in grads.values())))
    if clip_norm > 0.0 and total > clip_norm:
        scale = clip_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
    return total


class AdamState:
    """First/second moment accumulators for every tensor."""

    def __init__(self, weights: ModelWeights):
        self.m = {n: np.zeros_like(v) for n, v in weights.items()}
        self.v = {n: np.zeros_like(v) for n, v in weights.items()}
        self.t = 0

    def update(self, weights: ModelWeights, grads: dict[str, np.ndarray],
               cfg: SeqModelConfig) -> None:
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        correction1 = 1.0 - b1 ** self.t
        correction2 = 1.0 - b2 ** self.t
        for name, grad in grads.items():
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * grad
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * grad ** 2
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            weights[name] = weights[name] - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def train(x: np.ndarray, y: np.ndarray, cfg: SeqModelConfig,
          weights: ModelWeights | None = None) -> tuple[ModelWeights, list[float]]:
    """Train on labelled windows; returns weights and per-epoch mean loss.

    Deterministic for a fixed config seed: initialization, shuffling and
    the optional input-noise augmentation all draw from one seeded
    generator.  `train_noise` replaces that fraction of window steps with
    steps sampled from other windows, which makes the predictor tolerate
    occasional foreign entries inside an otherwise normal history.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 3:
        raise ShapeMismatch(f"expected (n, steps, dim) windows, got {x.shape}")
    if x.shape[0] != y.shape[0]:
        raise ShapeMismatch("windows and targets disagree in count")
    rng = np.random.default_rng(cfg.seed)
    if weights is None:
        weights = init_weights(cfg, rng)
    adam = AdamState(weights)
    n = x.shape[0]
    history: list[float] = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            bx = x[idx]
            if cfg.train_noise > 0.0:
                bx = bx.copy()
                hits = rng.random((bx.shape[0], bx.shape[1])) < cfg.train_noise
                rows, cols = np.nonzero(hits)
                if rows.size:
                    src_n = rng.integers(0, n, size=rows.size)
                    src_t = rng.integers(0, x.shape[1], size=rows.size)
                    bx[rows, cols] = x[src_n, src_t]
            loss, grads = loss_and_grads(weights, bx, y[idx])
            if not np.isfinite(loss):
                raise DivergedLoss(f"non-finite training loss: {loss}")
            clip_gradients(grads, cfg.clip_norm)
            adam.update(weights, grads, cfg)
            epoch_loss += loss
            batches += 1
        history.append(epoch_loss / max(1, batches))
    return weights, history


def top_candidates(probs: np.ndarray, count: int) -> list[int]:
    """Ids of the `count` most probable classes, descending.

    Probability ties break toward the smaller id so rankings are stable.
    """
    order = sorted(range(len(probs)), key=lambda i: (-float(probs[i]), i))
    return order[:count]


def _loss_only(weights: ModelWeights, x: np.ndarray, y: np.ndarray) -> float:
    probs, _, _ = _forward_full(weights, x)
    return float(-np.log(probs[np.arange(x.shape[0]), y] + 1e-12).mean())


def grad_check(cfg: SeqModelConfig | None = None, seed: int = 0,
               epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs a deliberately tiny model so perturbing every single weight is
    affordable.  The relative error denominator is floored so elements
    whose true gradient is ~0 do not amplify finite-difference noise.
    """
    rng = np.random.default_rng(seed)
    if cfg is None:
        cfg = SeqModelConfig(
            input_dim=int(rng.integers(2, 7)),
            classes=int(rng.integers(2, 6)),
            hidden=int(rng.integers(2, 9)),
            window=int(rng.integers(2, 5)),
            attention_dim=int(rng.integers(2, 7)),
            seed=seed)
    weights = init_weights(cfg, rng)
    x = rng.standard_normal((2, cfg.window, cfg.input_dim))
    y = rng.integers(0, cfg.classes, size=2)
    _, grads = loss_and_grads(weights, x, y)
    worst = 0.0
    for name, tensor in weights.items():
        flat = tensor.reshape(-1)
        grad_flat = grads[name].reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + epsilon
            loss_plus = _loss_only(weights, x, y)
            flat[j] = original - epsilon
            loss_minus = _loss_only(weights, x, y)
            flat[j] = original
            numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
            denom = max(abs(grad_flat[j]) + abs(numeric), 1e-4)
            worst = max(worst, abs(grad_flat[j] - numeric) / denom)
    return worst
