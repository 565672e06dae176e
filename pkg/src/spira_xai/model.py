"""Compact CNN classifier with hand-written reverse-mode gradients.

Activations are kept channels-last (N, H, W, C) so every convolution is a
single im2col matrix product. The tape returned by :func:`forward` keeps
each block's post-ReLU activation (pre-pooling) under ``block{i}``; these
are the maps Grad-CAM weights.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .augment import MixupConfig, draw_lambda

log = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
CHECKPOINT_MAGIC = b"SPXCKPT\0"
CHECKPOINT_VERSION = 1


class StaleTapeError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    kernel: tuple = (3, 3)
    stride: int = 1
    pool: tuple = (2, 2)


DEFAULT_BLOCKS = (ConvBlock(16), ConvBlock(32), ConvBlock(64), ConvBlock(64))


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple = (80, 401)
    conv_blocks: tuple = DEFAULT_BLOCKS
    dense_units: int = 32
    dropout_rate: float = 0.2
    batchnorm: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if not self.conv_blocks:
            raise ValueError("need at least one conv block")
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "conv_blocks", tuple(
            b if isinstance(b, ConvBlock) else ConvBlock(b["out_channels"], tuple(b["kernel"]),
                                                         b["stride"], tuple(b["pool"]))
            for b in self.conv_blocks))
        h, w = self.input_shape
        for b in self.conv_blocks:
            h, w = -(-h // b.stride), -(-w // b.stride)
            h, w = h // b.pool[0], w // b.pool[1]
            if h < 1 or w < 1:
                raise ValueError(f"input {self.input_shape} collapses to an empty map")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelState:
    config: ModelConfig
    params: dict
    buffers: dict
    rng_seed: int = 0
    training: bool = False
    version: int = 0

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.buffers.items()},
                          self.rng_seed, self.training, self.version)


def init_state(config: ModelConfig, seed: int = 0) -> ModelState:
    """He-initialized parameters; the output layer starts near zero so the
    initial prediction is close to 0.5."""
    rng = np.random.default_rng(seed)
    dt = np.dtype(config.dtype)
    params, buffers = {}, {}
    c_in = 1
    for i, b in enumerate(config.conv_blocks):
        kh, kw = b.kernel
        fan_in = c_in * kh * kw
        params[f"conv{i}.weight"] = rng.normal(0, np.sqrt(2.0 / fan_in), (b.out_channels, c_in, kh, kw))
        params[f"conv{i}.bias"] = np.zeros(b.out_channels)
        if config.batchnorm:
            params[f"bn{i}.gamma"] = np.ones(b.out_channels)
            params[f"bn{i}.beta"] = np.zeros(b.out_channels)
            buffers[f"bn{i}.running_mean"] = np.zeros(b.out_channels)
            buffers[f"bn{i}.running_var"] = np.ones(b.out_channels)
        c_in = b.out_channels
    if config.dense_units:
        params["fc.weight"] = rng.normal(0, np.sqrt(2.0 / c_in), (c_in, config.dense_units))
        params["fc.bias"] = np.zeros(config.dense_units)
        c_in = config.dense_units
    params["out.weight"] = rng.normal(0, 0.01, (c_in,))
    params["out.bias"] = np.zeros(())
    params = {k: v.astype(dt) for k, v in params.items()}
    buffers = {k: v.astype(dt) for k, v in buffers.items()}
    return ModelState(config, params, buffers, seed)


# --- layers -----------------------------------------------------------------

def _same_pad(k: int):
    return (k - 1) // 2, k - 1 - (k - 1) // 2


def conv_forward(x, weight, bias, stride=1):
    n, h, w, c = x.shape
    k_out, _, kh, kw = weight.shape
    ph, pw = _same_pad(kh), _same_pad(kw)
    xp = np.pad(x, ((0, 0), ph, pw, (0, 0)))
    view = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = view.shape[1], view.shape[2]
    cols = view.reshape(n * ho * wo, c * kh * kw)
    wmat = weight.reshape(k_out, -1).T
    out = (cols @ wmat + bias).reshape(n, ho, wo, k_out)
    return out, (cols, x.shape, weight, stride)


def conv_backward(dout, cache, need_dx=True):
    cols, x_shape, weight, stride = cache
    n, h, w, c = x_shape
    k_out, _, kh, kw = weight.shape
    ho, wo = dout.shape[1], dout.shape[2]
    dmat = dout.reshape(-1, k_out)
    dweight = (cols.T @ dmat).T.reshape(weight.shape)
    dbias = dmat.sum(axis=0)
    if not need_dx:
        return None, dweight, dbias
    dcols = (dmat @ weight.reshape(k_out, -1)).reshape(n, ho, wo, c, kh, kw)
    ph, pw = _same_pad(kh), _same_pad(kw)
    dxp = np.zeros((n, h + kh - 1, w + kw - 1, c), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[..., i, j]
    return dxp[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w, :], dweight, dbias


def bn_forward(x, gamma, beta, running_mean, running_var, training):
    if training:
        m = x.shape[0] * x.shape[1] * x.shape[2]
        mean = x.mean(axis=(0, 1, 2))
        xc = x - mean
        var = np.einsum("nhwc,nhwc->c", xc, xc) / m
        running_mean *= 1 - BN_MOMENTUM
        running_mean += BN_MOMENTUM * mean
        running_var *= 1 - BN_MOMENTUM
        running_var += BN_MOMENTUM * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
        xc = x - mean
    inv = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
    xhat = xc
    xhat *= inv
    out = xhat * gamma
    out += beta
    return out, (xhat, inv, gamma, training)


def bn_backward(dout, cache):
    xhat, inv, gamma, training = cache
    dgamma = np.einsum("nhwc,nhwc->c", dout, xhat)
    dbeta = dout.sum(axis=(0, 1, 2))
    scale = gamma * inv
    if not training:
        return dout * scale, dgamma, dbeta
    m = dout.shape[0] * dout.shape[1] * dout.shape[2]
    # dx = gamma*inv/m * (m*dout - sum(dout) - xhat*sum(dout*xhat))
    dx = xhat * (-dgamma / m)
    dx += dout
    dx -= dbeta / m
    dx *= scale
    return dx, dgamma, dbeta


def pool_forward(x, pool):
    ph, pw = pool
    if (ph, pw) == (1, 1):
        return x, None
    n, h, w, c = x.shape
    ho, wo = h // ph, w // pw
    taps = [x[:, i:ho * ph:ph, j:wo * pw:pw] for i in range(ph) for j in range(pw)]
    out = taps[0].copy()
    for t in taps[1:]:
        np.maximum(out, t, out=out)
    return out, (x, out, x.shape, pool)


def pool_backward(dout, cache):
    if cache is None:
        return dout
    x, out, x_shape, (ph, pw) = cache
    ho, wo = dout.shape[1], dout.shape[2]
    dx = np.zeros(x_shape, dtype=dout.dtype)
    # route each gradient to the first maximal element of its tile
    taken = np.zeros(out.shape, dtype=bool)
    for i in range(ph):
        for j in range(pw):
            hit = x[:, i:ho * ph:ph, j:wo * pw:pw] == out
            hit &= ~taken
            taken |= hit
            dx[:, i:ho * ph:ph, j:wo * pw:pw] = dout * hit
    return dx


# --- network ----------------------------------------------------------------

@dataclass
class TapedForward:
    logits: np.ndarray
    probability: np.ndarray
    feature_maps: dict
    caches: list = field(repr=False, default_factory=list)
    state: ModelState | None = field(repr=False, default=None)
    version: int = 0
    training: bool = False


@dataclass
class Gradients:
    params: dict
    feature_maps: dict
    inputs: np.ndarray | None = None


def sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def _as_batch(x, config: ModelConfig):
    x = np.asarray(getattr(x, "values", x))
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != config.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match model {config.input_shape}")
    return x[..., None].astype(config.dtype, copy=False)


def forward(state: ModelState, x, mode: str = "eval", rng: np.random.Generator | None = None) -> TapedForward:
    """Run the network on one matrix (rows, cols) or a batch (N, rows, cols)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    training = mode == "train"
    cfg, p = state.config, state.params
    h = _as_batch(x, cfg)
    caches, maps = [], {}
    for i, b in enumerate(cfg.conv_blocks):
        h, c_conv = conv_forward(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], b.stride)
        c_bn = None
        if cfg.batchnorm:
            h, c_bn = bn_forward(h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"],
                                 state.buffers[f"bn{i}.running_mean"],
                                 state.buffers[f"bn{i}.running_var"], training)
        h = np.maximum(h, 0, out=h)
        maps[f"block{i}"] = h
        h, c_pool = pool_forward(h, b.pool)
        caches.append((c_conv, c_bn, c_pool))
    spatial = h.shape[1:3]
    h = h.mean(axis=(1, 2))
    gap_cache = spatial
    fc_cache = None
    if cfg.dense_units:
        pre = h @ p["fc.weight"] + p["fc.bias"]
        act = np.maximum(pre, 0)
        mask = None
        if training and cfg.dropout_rate > 0:
            rng = rng if rng is not None else np.random.default_rng(state.rng_seed)
            keep = 1.0 - cfg.dropout_rate
            mask = (rng.random(act.shape) < keep).astype(act.dtype) / keep
            act = act * mask
        fc_cache = (h, pre, mask)
        h = act
    logits = h @ p["out.weight"] + p["out.bias"]
    tape = TapedForward(logits, sigmoid(logits), maps,
                        caches + [gap_cache, fc_cache, h], state, state.version, training)
    return tape


def backward(tape: TapedForward, grad_logits=None, input_grad: bool = False) -> Gradients:
    """Gradients of ``sum(grad_logits * logits)`` w.r.t. parameters, the
    recorded feature maps and the input.

    ``grad_logits`` defaults to ones, i.e. the gradient of each sample's logit.
    """
    state = tape.state
    if state is None or state.version != tape.version:
        raise StaleTapeError("tape was recorded before the last parameter update")
    cfg, p = state.config, state.params
    *blocks, gap_spatial, fc_cache, head_in = tape.caches
    g = np.ones_like(tape.logits) if grad_logits is None else np.asarray(grad_logits, dtype=tape.logits.dtype)
    g = np.broadcast_to(g, tape.logits.shape)
    grads, fmap_grads = {}, {}

    grads["out.weight"] = head_in.T @ g
    grads["out.bias"] = np.asarray(g.sum(), dtype=tape.logits.dtype)
    dh = np.outer(g, p["out.weight"])
    if cfg.dense_units:
        h_in, pre, mask = fc_cache
        if mask is not None:
            dh = dh * mask
        dh = dh * (pre > 0)
        grads["fc.weight"] = h_in.T @ dh
        grads["fc.bias"] = dh.sum(axis=0)
        dh = dh @ p["fc.weight"].T
    hh, ww = gap_spatial
    dh = np.broadcast_to(dh[:, None, None, :] / (hh * ww), (dh.shape[0], hh, ww, dh.shape[1]))

    for i in reversed(range(len(cfg.conv_blocks))):
        c_conv, c_bn, c_pool = blocks[i]
        dh = pool_backward(np.ascontiguousarray(dh), c_pool)
        fmap_grads[f"block{i}"] = dh
        act = tape.feature_maps[f"block{i}"]
        dh = dh * (act > 0)
        if c_bn is not None:
            dh, grads[f"bn{i}.gamma"], grads[f"bn{i}.beta"] = bn_backward(dh, c_bn)
        dh, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = conv_backward(
            dh, c_conv, need_dx=i > 0 or input_grad)
    return Gradients(grads, fmap_grads, None if dh is None else dh[..., 0])


def predict_proba(state: ModelState, x, batch_size: int = 32) -> np.ndarray:
    """Patient probability for each input, in eval mode."""
    x = np.asarray(getattr(x, "values", x))
    if x.ndim == 2:
        x = x[None]
    out = [forward(state, x[s:s + batch_size], "eval").probability
           for s in range(0, len(x), batch_size)]
    return np.concatenate(out).astype(np.float64)


def predict_window(state: ModelState, x) -> tuple:
    p = float(forward(state, x, "eval").probability[0])
    return p, 1.0 - p


# --- training ---------------------------------------------------------------

@dataclass(frozen=True)
class HyperParams:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    patience: int = 10
    mixup: MixupConfig | None = None


@dataclass
class TrainingReport:
    train_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    best_state: ModelState | None = None

    def rows(self):
        for e, (tl, va) in enumerate(zip(self.train_loss, self.val_acc)):
            yield e, tl, va


def bce_with_logits(logits, targets):
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    return float(np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))


def sgd_step(state: ModelState, grads: dict, velocity: dict, lr: float, momentum: float):
    for k, g in grads.items():
        v = velocity.get(k)
        v = -lr * g if v is None else momentum * v - lr * g
        velocity[k] = v
        state.params[k] += v.astype(state.params[k].dtype)
    state.version += 1


def mix_batch(x, y, cfg: MixupConfig, rng):
    """Mix each sample with a shuffled partner using one lambda per batch."""
    lam = draw_lambda(cfg, rng)
    perm = rng.permutation(len(x))
    return lam * x + (1 - lam) * x[perm], lam * y + (1 - lam) * y[perm]


def train(state: ModelState, train_data, hp: HyperParams, rng: np.random.Generator,
          validate=None, on_epoch=None) -> TrainingReport:
    """Minibatch SGD with momentum on binary cross-entropy.

    ``train_data(epoch)`` returns ``(x, y)`` arrays for one epoch (inputs are
    regenerated each epoch by the dynamic pipeline); ``validate(state)``
    returns ``(accuracy, loss)``. The best state by (accuracy, -loss) is kept;
    training stops after ``patience`` epochs without a higher accuracy.
    """
    report = TrainingReport()
    velocity = {}
    best_key = best_score = None
    stale = 0
    for epoch in range(hp.epochs):
        x, y = train_data(epoch)
        if len(x) == 0:
            raise TrainingError("empty training set")
        order = rng.permutation(len(x))
        losses = []
        for s in range(0, len(x), hp.batch_size):
            idx = order[s:s + hp.batch_size]
            xb = np.asarray(x[idx], dtype=np.float64)
            yb = np.asarray(y[idx], dtype=np.float64)
            if hp.mixup is not None and len(idx) > 1:
                xb, yb = mix_batch(xb, yb, hp.mixup, rng)
            tape = forward(state, xb, "train", rng)
            loss = bce_with_logits(tape.logits, yb)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {s // hp.batch_size}: "
                    f"logit range [{np.min(tape.logits)}, {np.max(tape.logits)}], "
                    f"max |param| {max(float(np.max(np.abs(v))) for v in state.params.values())}")
            dlogits = (tape.probability.astype(np.float64) - yb) / len(idx)
            grads = backward(tape, dlogits).params
            sgd_step(state, grads, velocity, hp.lr, hp.momentum)
            losses.append(loss * len(idx))
        report.train_loss.append(float(np.sum(losses) / len(x)))

        if validate is not None:
            acc, vloss = validate(state)
        else:
            acc, vloss = float("nan"), report.train_loss[-1]
        report.val_acc.append(acc)
        report.val_loss.append(vloss)
        score = acc if np.isfinite(acc) else -vloss
        if best_key is None or (score, -vloss) > best_key:
            best_key = (score, -vloss)
            report.best_epoch = epoch
            report.best_state = state.copy()
        # patience counts epochs without a strictly better validation accuracy
        if best_score is None or score > best_score:
            best_score, stale = score, 0
        else:
            stale += 1
        log.info("epoch %d loss %.4f val_acc %.3f val_loss %.4f", epoch,
                 report.train_loss[-1], acc, vloss)
        if on_epoch is not None:
            on_epoch(epoch, report)
        if stale >= hp.patience:
            break
    return report


# --- checkpoints ------------------------------------------------------------

def save_state(state: ModelState, path):
    header = json.dumps({"config": state.config.to_dict(), "rng_seed": state.rng_seed,
                         "training": state.training}, sort_keys=True).encode("utf-8")
    tensors = [(f"param:{k}", v) for k, v in sorted(state.params.items())] + \
              [(f"buffer:{k}", v) for k, v in sorted(state.buffers.items())]
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header,
           struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_state(path) -> ModelState:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        pos = len(CHECKPOINT_MAGIC)
        version, hlen = struct.unpack_from("<II", data, pos)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos += 8
        meta = json.loads(data[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        cfg = ModelConfig(**meta["config"])
        params, buffers = {}, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) * 8
            if pos + size > len(data):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            arr = np.frombuffer(data, dtype="<f8", count=size // 8, offset=pos).reshape(shape)
            pos += size
            kind, key = name.split(":", 1)
            (params if kind == "param" else buffers)[key] = arr.astype(cfg.dtype)
        if pos != len(data):
            raise CheckpointError(f"{path}: trailing bytes after tensor table")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint (format v{CHECKPOINT_VERSION}): {exc}") from None
    return ModelState(cfg, params, buffers, meta["rng_seed"], meta["training"])
