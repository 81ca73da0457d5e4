"""Convolutional-recurrent word recognizer with two CTC heads, written
directly on numpy: explicit forward, explicit backpropagation, per-sample
SGD updates, and a checksummed binary checkpoint format.

Shapes: a (32, W) grayscale word image passes through a conv/pool stack that
downsamples width by D = 2^n_layers, a bidirectional GRU layer, and one
linear projection per head. Both heads share T = W / D timesteps.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ctc_core
from .ctc_core import CtcInfeasibleError, log_softmax

IMG_HEIGHT = 32

CHECKPOINT_MAGIC = b"ROWCTCKP"
CHECKPOINT_VERSION = 1

_INIT_TAG = 977


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class CheckpointError(ValueError):
    """Checkpoint file is corrupt, from a different format version, or
    incompatible with what the caller expects."""


@dataclass(frozen=True)
class ModelConfig:
    num_chars: int
    num_rows: int
    row_head: bool = True
    conv_channels: tuple[int, ...] = (16, 32)
    kernel_size: int = 3
    hidden_size: int = 64
    bidirectional: bool = True
    max_word_len: int = 12
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.num_chars < 1 or self.num_rows < 1:
            raise ValueError("need num_chars >= 1 and num_rows >= 1")
        if not 1 <= len(self.conv_channels) <= 5:
            raise ValueError("conv stack must have 1..5 layers")
        if any(c < 1 for c in self.conv_channels):
            raise ValueError("conv channel counts must be positive")
        if self.kernel_size % 2 != 1 or self.kernel_size < 1:
            raise ValueError("kernel_size must be odd")
        if self.hidden_size < 1:
            raise ValueError("hidden_size must be positive")
        if self.max_word_len < 1:
            raise ValueError("max_word_len must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")
        if IMG_HEIGHT % self.downsample != 0:
            raise ValueError(f"downsample factor {self.downsample} must divide {IMG_HEIGHT}")
        lmax = self.max_word_len
        t_at_lmax = (IMG_HEIGHT * lmax) // self.downsample
        if t_at_lmax < 2 * lmax + 1:
            raise ValueError(
                f"T={t_at_lmax} at max word length {lmax} violates the 2L+1 lattice bound; "
                "use fewer conv/pool layers"
            )

    @property
    def downsample(self) -> int:
        return 2 ** len(self.conv_channels)

    @property
    def feature_size(self) -> int:
        return self.conv_channels[-1] * (IMG_HEIGHT >> len(self.conv_channels))

    @property
    def rnn_out_size(self) -> int:
        return 2 * self.hidden_size if self.bidirectional else self.hidden_size

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def config_hash(cfg: ModelConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _param_spec(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """Declared parameter order: (name, shape, fan_in). The row head comes
    last so baseline and proposed models share every preceding draw."""
    spec = []
    k = cfg.kernel_size
    c_in = 1
    for i, c_out in enumerate(cfg.conv_channels):
        fan = c_in * k * k
        spec.append((f"conv{i}_w", (c_out, c_in, k, k), fan))
        spec.append((f"conv{i}_b", (c_out,), fan))
        c_in = c_out
    h = cfg.hidden_size
    directions = ("fw", "bw") if cfg.bidirectional else ("fw",)
    for d in directions:
        spec.append((f"gru_{d}_wx", (3 * h, cfg.feature_size), cfg.feature_size))
        spec.append((f"gru_{d}_wh", (3 * h, h), h))
        spec.append((f"gru_{d}_b", (3 * h,), h))
    spec.append(("char_w", (cfg.num_chars + 1, cfg.rnn_out_size), cfg.rnn_out_size))
    spec.append(("char_b", (cfg.num_chars + 1,), cfg.rnn_out_size))
    if cfg.row_head:
        spec.append(("row_w", (cfg.num_rows + 1, cfg.rnn_out_size), cfg.rnn_out_size))
        spec.append(("row_b", (cfg.num_rows + 1,), cfg.rnn_out_size))
    return spec


@dataclass
class Model:
    cfg: ModelConfig
    params: dict[str, np.ndarray]
    step: int = 0
    label_map_sha256: str = ""

    @property
    def param_order(self) -> list[str]:
        return list(self.params.keys())


def init_model(cfg: ModelConfig, label_map_sha256: str = "") -> Model:
    """Fan-in-scaled uniform initialization, deterministic given cfg.seed."""
    rng = np.random.default_rng([cfg.seed, _INIT_TAG])
    dtype = cfg.np_dtype()
    params = {}
    for name, shape, fan_in in _param_spec(cfg):
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Model(cfg=cfg, params=params, step=0, label_map_sha256=label_map_sha256)


# ---------------------------------------------------------------------------
# forward / backward


def _sigmoid(x):
    s = 1.0 / (1.0 + np.exp(-np.abs(x)))
    return np.where(x >= 0, s, 1.0 - s)


def _conv_forward(x, w, b, k):
    c_in, h, wth = x.shape
    c_out = w.shape[0]
    p = k // 2
    padded = np.pad(x, ((0, 0), (p, p), (p, p)))
    cols = np.empty((c_in, k, k, h, wth), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, di, dj] = padded[:, di:di + h, dj:dj + wth]
    cols2 = cols.reshape(c_in * k * k, h * wth)
    pre = w.reshape(c_out, -1) @ cols2 + b[:, None]
    mask = pre > 0
    act = np.where(mask, pre, 0).reshape(c_out, h, wth)
    # 2x2 max pool, first maximum wins ties
    hp, wp = h // 2, wth // 2
    quads = act.reshape(c_out, hp, 2, wp, 2).transpose(0, 1, 3, 2, 4).reshape(c_out, hp, wp, 4)
    idx = quads.argmax(axis=3)
    pooled = np.take_along_axis(quads, idx[..., None], axis=3)[..., 0]
    cache = (cols2, mask, idx, (c_in, h, wth))
    return pooled, cache


def _conv_backward(d_pooled, w, cache, k, need_input_grad=True):
    cols2, mask, idx, (c_in, h, wth) = cache
    c_out = w.shape[0]
    p = k // 2
    hp, wp = h // 2, wth // 2
    d_quads = np.zeros((c_out, hp, wp, 4), dtype=d_pooled.dtype)
    np.put_along_axis(d_quads, idx[..., None], d_pooled[..., None], axis=3)
    d_act = d_quads.reshape(c_out, hp, wp, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c_out, h, wth)
    d_pre = (d_act.reshape(c_out, -1) * mask.reshape(c_out, -1))
    d_w = (d_pre @ cols2.T).reshape(c_out, c_in, k, k)
    d_b = d_pre.sum(axis=1)
    if not need_input_grad:
        return None, d_w, d_b
    d_cols = (w.reshape(c_out, -1).T @ d_pre).reshape(c_in, k, k, h, wth)
    d_padded = np.zeros((c_in, h + 2 * p, wth + 2 * p), dtype=d_pooled.dtype)
    for di in range(k):
        for dj in range(k):
            d_padded[:, di:di + h, dj:dj + wth] += d_cols[:, di, dj]
    return d_padded[:, p:p + h, p:p + wth], d_w, d_b


def _gru_forward(x, wx, wh, b, reverse):
    t_len, _ = x.shape
    hsz = wh.shape[1]
    xp = x @ wx.T + b  # (T, 3H)
    out = np.empty((t_len, hsz), dtype=x.dtype)
    h_prev_seq = np.empty((t_len, hsz), dtype=x.dtype)
    r_seq = np.empty((t_len, hsz), dtype=x.dtype)
    z_seq = np.empty((t_len, hsz), dtype=x.dtype)
    n_seq = np.empty((t_len, hsz), dtype=x.dtype)
    inner_seq = np.empty((t_len, hsz), dtype=x.dtype)
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    h = np.zeros(hsz, dtype=x.dtype)
    for t in order:
        hh = h @ wh.T
        rz = _sigmoid(xp[t, : 2 * hsz] + hh[: 2 * hsz])
        r, z = rz[:hsz], rz[hsz:]
        inner = hh[2 * hsz:]
        n = np.tanh(xp[t, 2 * hsz:] + r * inner)
        h_prev_seq[t] = h
        r_seq[t], z_seq[t], n_seq[t], inner_seq[t] = r, z, n, inner
        h = (1.0 - z) * n + z * h
        out[t] = h
    cache = (x, xp, h_prev_seq, r_seq, z_seq, n_seq, inner_seq, order)
    return out, cache


def _gru_backward(d_out, wx, wh, cache):
    x, xp, h_prev_seq, r_seq, z_seq, n_seq, inner_seq, order = cache
    t_len, hsz = d_out.shape
    da_x = np.empty((t_len, 3 * hsz), dtype=x.dtype)
    da_h = np.empty((t_len, 3 * hsz), dtype=x.dtype)
    carry = np.zeros(hsz, dtype=x.dtype)
    for t in reversed(list(order)):
        dh = d_out[t] + carry
        h_prev, r, z, n, inner = h_prev_seq[t], r_seq[t], z_seq[t], n_seq[t], inner_seq[t]
        dz = dh * (h_prev - n)
        da_z = dz * z * (1.0 - z)
        da_n = dh * (1.0 - z) * (1.0 - n * n)
        d_inner = da_n * r
        da_r = da_n * inner * r * (1.0 - r)
        da_x[t, :hsz], da_x[t, hsz:2 * hsz], da_x[t, 2 * hsz:] = da_r, da_z, da_n
        da_h[t, :hsz], da_h[t, hsz:2 * hsz], da_h[t, 2 * hsz:] = da_r, da_z, d_inner
        carry = dh * z + da_h[t] @ wh
    d_wx = da_x.T @ x
    d_wh = da_h.T @ h_prev_seq
    d_b = da_x.sum(axis=0)
    d_x = da_x @ wx
    return d_x, d_wx, d_wh, d_b


def _trunk_forward(model: Model, image: np.ndarray, want_cache: bool):
    cfg = model.cfg
    dtype = cfg.np_dtype()
    x = np.ascontiguousarray(image, dtype=dtype)[None]  # (1, 32, W)
    conv_caches = []
    for i in range(len(cfg.conv_channels)):
        x, cache = _conv_forward(x, model.params[f"conv{i}_w"], model.params[f"conv{i}_b"],
                                 cfg.kernel_size)
        conv_caches.append(cache)
    c_last, h_last, t_len = x.shape
    feats = x.transpose(2, 0, 1).reshape(t_len, c_last * h_last)

    out_fw, cache_fw = _gru_forward(feats, model.params["gru_fw_wx"], model.params["gru_fw_wh"],
                                    model.params["gru_fw_b"], reverse=False)
    if cfg.bidirectional:
        out_bw, cache_bw = _gru_forward(feats, model.params["gru_bw_wx"],
                                        model.params["gru_bw_wh"], model.params["gru_bw_b"],
                                        reverse=True)
        rnn_out = np.concatenate([out_fw, out_bw], axis=1)
    else:
        out_bw, cache_bw = None, None
        rnn_out = out_fw

    char_scores = rnn_out @ model.params["char_w"].T + model.params["char_b"]
    row_scores = None
    if cfg.row_head:
        row_scores = rnn_out @ model.params["row_w"].T + model.params["row_b"]

    if not want_cache:
        return char_scores, row_scores, None
    cache = {
        "conv_caches": conv_caches,
        "conv_out_shape": (c_last, h_last, t_len),
        "feats": feats,
        "gru_fw": cache_fw,
        "gru_bw": cache_bw,
        "rnn_out": rnn_out,
    }
    return char_scores, row_scores, cache


def _trunk_backward(model: Model, cache, d_char_scores, d_row_scores):
    cfg = model.cfg
    rnn_out = cache["rnn_out"]
    grads = {}
    grads["char_w"] = d_char_scores.T @ rnn_out
    grads["char_b"] = d_char_scores.sum(axis=0)
    d_rnn = d_char_scores @ model.params["char_w"]
    if cfg.row_head:
        grads["row_w"] = d_row_scores.T @ rnn_out
        grads["row_b"] = d_row_scores.sum(axis=0)
        d_rnn = d_rnn + d_row_scores @ model.params["row_w"]

    hsz = cfg.hidden_size
    if cfg.bidirectional:
        d_fw, d_bw = d_rnn[:, :hsz], d_rnn[:, hsz:]
    else:
        d_fw, d_bw = d_rnn, None
    d_feats, grads["gru_fw_wx"], grads["gru_fw_wh"], grads["gru_fw_b"] = _gru_backward(
        d_fw, model.params["gru_fw_wx"], model.params["gru_fw_wh"], cache["gru_fw"])
    if cfg.bidirectional:
        d_feats_bw, grads["gru_bw_wx"], grads["gru_bw_wh"], grads["gru_bw_b"] = _gru_backward(
            d_bw, model.params["gru_bw_wx"], model.params["gru_bw_wh"], cache["gru_bw"])
        d_feats = d_feats + d_feats_bw

    c_last, h_last, t_len = cache["conv_out_shape"]
    d_x = d_feats.reshape(t_len, c_last, h_last).transpose(1, 2, 0)
    for i in range(len(cfg.conv_channels) - 1, -1, -1):
        d_x, d_w, d_b = _conv_backward(d_x, model.params[f"conv{i}_w"], cache["conv_caches"][i],
                                       cfg.kernel_size)
        grads[f"conv{i}_w"] = d_w
        grads[f"conv{i}_b"] = d_b
    return grads


def _check_image(cfg: ModelConfig, image: np.ndarray):
    image = np.asarray(image)
    if image.ndim != 2 or image.shape[0] != IMG_HEIGHT:
        raise ValueError(f"expected a ({IMG_HEIGHT}, W) image, got shape {image.shape}")
    w = image.shape[1]
    if w < cfg.downsample or w % cfg.downsample != 0:
        raise ValueError(f"image width {w} is not a positive multiple of D={cfg.downsample}")
    return image


def forward(model: Model, image) -> tuple[np.ndarray, np.ndarray | None]:
    """Log-probability sequences from both heads for one word image.

    Returns (char_lp, row_lp); row_lp is None for baseline (single-head)
    models. Rows are exactly normalized float64 log-distributions.
    """
    image = _check_image(model.cfg, image)
    char_scores, row_scores, _ = _trunk_forward(model, image, want_cache=False)
    char_lp = log_softmax(char_scores.astype(np.float64), axis=1)
    row_lp = None
    if row_scores is not None:
        row_lp = log_softmax(row_scores.astype(np.float64), axis=1)
    return char_lp, row_lp


@dataclass
class StepResult:
    total: float
    char_loss: float
    row_loss: float | None
    char_log_probs: np.ndarray
    row_log_probs: np.ndarray | None = field(default=None, repr=False)


def _head_loss_grad(scores: np.ndarray, labels, sample_id: str):
    lp = log_softmax(scores.astype(np.float64), axis=1)
    labels = ctc_core._check_labels(labels, lp.shape[1] - 1, lp.shape[0])
    try:
        loss, grad, _ = ctc_core._loss_and_grad(lp, labels)
    except CtcInfeasibleError as exc:
        raise CtcInfeasibleError(f"sample {sample_id}: {exc}") from exc
    return loss, grad, lp


def sample_losses(model: Model, sample, row_weight: float = 1.0):
    """(total, char, row) losses for one WordSample, without updating."""
    image = _check_image(model.cfg, sample.image)
    char_scores, row_scores, _ = _trunk_forward(model, image, want_cache=False)
    sid = f"{sample.word_id}/wr{sample.writer_id}"
    char_loss, _, _ = _head_loss_grad(char_scores, sample.chars, sid)
    if row_scores is None:
        return char_loss, char_loss, None
    row_loss, _, _ = _head_loss_grad(row_scores, sample.rows, sid)
    return char_loss + row_weight * row_loss, char_loss, row_loss


def train_step(model: Model, sample, lr: float, row_weight: float = 1.0) -> StepResult:
    """One SGD step on the multi-task loss for a single sample. Returns the
    pre-update losses and head outputs."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    cfg = model.cfg
    image = _check_image(cfg, sample.image)
    sid = f"{sample.word_id}/wr{sample.writer_id}"
    char_scores, row_scores, cache = _trunk_forward(model, image, want_cache=True)

    char_loss, char_grad, char_lp = _head_loss_grad(char_scores, sample.chars, sid)
    row_loss, row_lp = None, None
    d_row = None
    if cfg.row_head:
        row_loss, row_grad, row_lp = _head_loss_grad(row_scores, sample.rows, sid)
        total = char_loss + row_weight * row_loss
        d_row = (row_weight * row_grad).astype(cfg.np_dtype())
    else:
        total = char_loss
    if not np.isfinite(total):
        raise DivergenceError(
            f"non-finite loss at step {model.step} on sample {sid}: "
            f"total={total} char={char_loss} row={row_loss}"
        )

    d_char = char_grad.astype(cfg.np_dtype())
    grads = _trunk_backward(model, cache, d_char, d_row)
    for name in model.params:
        model.params[name] -= lr * grads[name]
    model.step += 1
    return StepResult(total, char_loss, row_loss, char_lp, row_lp)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, path) -> None:
    """Binary layout: magic, u32 version, u32 header length, header JSON
    (config + hashes + step + declared parameter order), raw parameter
    tensors in declared order, trailing sha256 of everything before it."""
    cfg = model.cfg
    header = {
        "config": asdict(cfg),
        "config_sha256": config_hash(cfg),
        "label_map_sha256": model.label_map_sha256,
        "step": model.step,
        "param_order": model.param_order,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION.to_bytes(4, "little"),
        len(blob).to_bytes(4, "little"),
        blob,
    ]
    for name in model.param_order:
        chunks.append(np.ascontiguousarray(model.params[name]).tobytes())
    body = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())


def load_checkpoint(path, expect_row_head: bool | None = None,
                    expect_label_map_sha256: str | None = None) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 + 32:
        raise CheckpointError(f"{path}: truncated checkpoint")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    if body[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version = int.from_bytes(body[8:12], "little")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version}, this build reads {CHECKPOINT_VERSION}"
        )
    hlen = int.from_bytes(body[12:16], "little")
    header = json.loads(body[16:16 + hlen].decode("utf-8"))
    cfg_dict = dict(header["config"])
    cfg_dict["conv_channels"] = tuple(cfg_dict["conv_channels"])
    cfg = ModelConfig(**cfg_dict)
    if config_hash(cfg) != header["config_sha256"]:
        raise CheckpointError(f"{path}: embedded config hash mismatch")
    if expect_row_head is not None and cfg.row_head != expect_row_head:
        want = "proposed (two-head)" if expect_row_head else "baseline (single-head)"
        have = "proposed" if cfg.row_head else "baseline"
        raise CheckpointError(f"{path}: checkpoint is a {have} model, expected {want}")
    if expect_label_map_sha256 is not None and header["label_map_sha256"] != expect_label_map_sha256:
        raise CheckpointError(
            f"{path}: label map hash {header['label_map_sha256'][:12]}... does not match "
            f"expected {expect_label_map_sha256[:12]}..."
        )

    spec = _param_spec(cfg)
    if header["param_order"] != [name for name, _, _ in spec]:
        raise CheckpointError(f"{path}: parameter order does not match config")
    dtype = cfg.np_dtype()
    itemsize = np.dtype(dtype).itemsize
    offset = 16 + hlen
    params = {}
    for name, shape, _ in spec:
        nbytes = int(np.prod(shape)) * itemsize
        if offset + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated tensor data for {name}")
        params[name] = np.frombuffer(body[offset:offset + nbytes], dtype=dtype).reshape(shape).copy()
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes after tensors")
    return Model(cfg=cfg, params=params, step=int(header["step"]),
                 label_map_sha256=header["label_map_sha256"])
