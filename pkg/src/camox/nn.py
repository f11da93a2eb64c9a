"""Minimal numpy network kernels for the 3-conv / 2-FC SpO2 regressor.

Forward and backward are pure functions of the parameters; only adam_step mutates.
All arithmetic is float64 so gradients can be checked against finite differences.
"""

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, Field, model_validator

from .errors import DataFormatError
from .models import WINDOW_FRAMES, ArrayModel, ChannelStats

CHECKPOINT_MAGIC = b"CAMOXNN1"
CHECKPOINT_VERSION = 1
PREDICT_CHUNK = 512


class NetworkShape(BaseModel):
    """Layer sizes. The first conv is 3x3 over the (RGB x time) plane; later convs are 1x3."""

    conv_channels: tuple[int, int, int] = (8, 16, 32)
    hidden: int = Field(default=64, ge=1)
    window: int = WINDOW_FRAMES

    @model_validator(mode="after")
    def validate_window(self) -> "NetworkShape":
        if self.window < 7:
            raise ValueError("window must leave at least one column after three valid convs")
        if min(self.conv_channels) < 1:
            raise ValueError("conv channel counts must be positive")
        return self

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter shapes in declaration order."""
        c1, c2, c3 = self.conv_channels
        width = self.window - 6
        return {
            "conv1.weight": (c1, 1, 3, 3),
            "conv1.bias": (c1,),
            "conv2.weight": (c2, c1, 1, 3),
            "conv2.bias": (c2,),
            "conv3.weight": (c3, c2, 1, 3),
            "conv3.bias": (c3,),
            "fc1.weight": (self.hidden, c3 * width),
            "fc1.bias": (self.hidden,),
            "fc2.weight": (1, self.hidden),
            "fc2.bias": (1,),
        }


class Network(ArrayModel):
    """Parameters of the regressor plus the channel statistics frozen at train time."""

    shape: NetworkShape = Field(default_factory=NetworkShape)
    params: dict[str, np.ndarray]
    channel_stats: ChannelStats | None = None

    @model_validator(mode="after")
    def validate_params(self) -> "Network":
        expected = self.shape.param_shapes()
        if list(self.params) != list(expected):
            raise ValueError(f"parameters must be {list(expected)} in that order")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name} has shape {self.params[name].shape}, expected {shape}")
        return self

    @property
    def weight_names(self) -> list[str]:
        return [name for name in self.params if name.endswith(".weight")]

    def copy_params(self) -> dict[str, np.ndarray]:
        return {name: p.copy() for name, p in self.params.items()}


class LossValue(BaseModel):
    """Training objective split into its parts."""

    mse: float
    l2_penalty: float
    total: float


class AdamState(ArrayModel):
    """Adam moments and schedule."""

    step: int = 0
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    lr: float = Field(default=1e-5, gt=0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # Coupled L2: enters through the loss gradient, recorded here for the checkpoint echo
    l2: float = 0.1
    decay_epoch: int = 80
    decay_factor: float = 0.1

    def effective_lr(self, epoch: int) -> float:
        return self.lr * self.decay_factor if epoch >= self.decay_epoch else self.lr


# --- kernels -----------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(N, C, H, W) -> (N*Ho*Wo, C*kh*kw) patch matrix, stride 1, no padding."""
    n, c, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    patches = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return patches.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv2d_forward(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """
    Valid 2-D cross-correlation, stride 1.

    Args:
        x: Input of shape (C_in, H, W) or batched (N, C_in, H, W)
        kernel: Weights of shape (C_out, C_in, kh, kw)
        bias: One value per output channel

    Returns:
        Output of shape ([N,] C_out, H - kh + 1, W - kw + 1)
    """
    batched = x.ndim == 4
    if not batched:
        x = x[None]
    n, c, h, w = x.shape
    out_ch, in_ch, kh, kw = kernel.shape
    if in_ch != c:
        raise ValueError(f"kernel expects {in_ch} input channels, input has {c}")
    if h < kh or w < kw:
        raise ValueError(f"kernel {kh}x{kw} is larger than input {h}x{w}")

    ho, wo = h - kh + 1, w - kw + 1
    out = _im2col(x, kh, kw) @ kernel.reshape(out_ch, -1).T + bias
    out = out.reshape(n, ho, wo, out_ch).transpose(0, 3, 1, 2)
    return out if batched else out[0]


def conv2d_backward(
    dout: np.ndarray, x: np.ndarray, kernel: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dkernel, dbias) of a batched valid convolution."""
    out_ch, _, kh, kw = kernel.shape
    ho, wo = dout.shape[2:]
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, out_ch)

    dkernel = (dflat.T @ _im2col(x, kh, kw)).reshape(kernel.shape)
    dbias = dflat.sum(axis=0)
    dx = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + ho, j:j + wo] += np.einsum("noyx,oc->ncyx", dout, kernel[:, :, i, j])
    return dx, dkernel, dbias


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map Wx + b for a vector or a (N, in) batch; weights are (out, in)."""
    if x.shape[-1] != weights.shape[1]:
        raise ValueError(f"input has {x.shape[-1]} features, weights expect {weights.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise ValueError(f"bias must have shape ({weights.shape[0]},), got {bias.shape}")
    return x @ weights.T + bias


def dense_backward(
    dout: np.ndarray, x: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dweights, dbias) of a batched dense layer."""
    return dout @ weights, dout.T @ x, dout.sum(axis=0)


# --- network -----------------------------------------------------------------

def init_network(
    shape: NetworkShape | None = None,
    seed: int | np.random.SeedSequence = 0,
    output_bias: float = 0.0,
    zero_head: bool = False,
    channel_stats: ChannelStats | None = None,
) -> Network:
    """
    He-normal weights and zero biases, drawn in declaration order.

    Args:
        shape: Layer sizes (defaults to the production shape)
        seed: Seed or seed sequence of the initialization stream
        output_bias: Initial output bias, e.g. the training-label mean
        zero_head: Zero the final weight row so the initial network is constant
        channel_stats: Statistics to freeze into the network
    """
    shape = shape or NetworkShape()
    rng = np.random.default_rng(seed)
    params = {}
    for name, dims in shape.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(dims)
        else:
            fan_in = int(np.prod(dims[1:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=dims)
    params["fc2.bias"][:] = output_bias
    if zero_head:
        params["fc2.weight"][:] = 0.0
    return Network(shape=shape, params=params, channel_stats=channel_stats)


def forward_batch(net: Network, windows: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """
    Run the network on standardized windows.

    Args:
        net: Network
        windows: (N, 3, window) standardized windows

    Returns:
        Unclamped predictions of shape (N,) and the activation cache for backward
    """
    if windows.ndim != 3 or windows.shape[1:] != (3, net.shape.window):
        raise ValueError(f"windows must be (N, 3, {net.shape.window}), got {windows.shape}")
    p = net.params
    x0 = windows[:, None, :, :]
    z1 = conv2d_forward(x0, p["conv1.weight"], p["conv1.bias"])
    a1 = relu(z1)
    z2 = conv2d_forward(a1, p["conv2.weight"], p["conv2.bias"])
    a2 = relu(z2)
    z3 = conv2d_forward(a2, p["conv3.weight"], p["conv3.bias"])
    a3 = relu(z3)
    flat = a3.reshape(a3.shape[0], -1)
    z4 = dense_forward(flat, p["fc1.weight"], p["fc1.bias"])
    a4 = relu(z4)
    z5 = dense_forward(a4, p["fc2.weight"], p["fc2.bias"])
    cache = {
        "x0": x0, "z1": z1, "a1": a1, "z2": z2, "a2": a2, "z3": z3, "a3": a3,
        "flat": flat, "z4": z4, "a4": a4,
    }
    return z5[:, 0], cache


def forward(net: Network, window: np.ndarray, clamp: bool = False) -> float:
    """Predicted SpO2 for one standardized 3 x window matrix."""
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (3, net.shape.window):
        raise ValueError(f"window must be 3 x {net.shape.window}, got {window.shape}")
    pred = float(forward_batch(net, window[None])[0][0])
    return min(max(pred, 0.0), 100.0) if clamp else pred


def predict(net: Network, windows: np.ndarray, clamp: bool = False) -> np.ndarray:
    """Batched inference in fixed-size chunks; clamp to [0, 100] for reporting."""
    preds = np.empty(windows.shape[0])
    for start in range(0, windows.shape[0], PREDICT_CHUNK):
        chunk = windows[start:start + PREDICT_CHUNK]
        preds[start:start + PREDICT_CHUNK] = forward_batch(net, chunk)[0]
    return np.clip(preds, 0.0, 100.0) if clamp else preds


def loss(
    predictions: np.ndarray, labels: np.ndarray, net: Network, l2: float = 0.1
) -> LossValue:
    """
    Mean squared error plus l2 times the sum of squared weights (biases excluded).

    Raises:
        ValueError: On an empty batch or mismatched lengths
    """
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if predictions.size == 0:
        raise ValueError("loss needs a non-empty batch")
    if predictions.shape != labels.shape:
        raise ValueError(f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")

    mse = float(np.mean((predictions - labels) ** 2))
    penalty = l2 * float(sum(np.sum(net.params[name] ** 2) for name in net.weight_names))
    return LossValue(mse=mse, l2_penalty=penalty, total=mse + penalty)


def backward(
    net: Network, windows: np.ndarray, labels: np.ndarray, l2: float = 0.1
) -> tuple[LossValue, dict[str, np.ndarray]]:
    """
    Exact gradients of LossValue.total with respect to every parameter.

    Returns:
        The loss of the batch and a gradient per parameter name
    """
    labels = np.asarray(labels, dtype=np.float64)
    preds, c = forward_batch(net, windows)
    value = loss(preds, labels, net, l2)
    p = net.params

    dpred = (2.0 / preds.size) * (preds - labels)
    da4, dw5, db5 = dense_backward(dpred[:, None], c["a4"], p["fc2.weight"])
    dz4 = da4 * (c["z4"] > 0)
    dflat, dw4, db4 = dense_backward(dz4, c["flat"], p["fc1.weight"])
    dz3 = dflat.reshape(c["a3"].shape) * (c["z3"] > 0)
    da2, dw3, db3 = conv2d_backward(dz3, c["a2"], p["conv3.weight"])
    dz2 = da2 * (c["z2"] > 0)
    da1, dw2, db2 = conv2d_backward(dz2, c["a1"], p["conv2.weight"])
    dz1 = da1 * (c["z1"] > 0)
    _, dw1, db1 = conv2d_backward(dz1, c["x0"], p["conv1.weight"])

    grads = {
        "conv1.weight": dw1, "conv1.bias": db1,
        "conv2.weight": dw2, "conv2.bias": db2,
        "conv3.weight": dw3, "conv3.bias": db3,
        "fc1.weight": dw4, "fc1.bias": db4,
        "fc2.weight": dw5, "fc2.bias": db5,
    }
    for name in net.weight_names:
        grads[name] = grads[name] + 2.0 * l2 * p[name]
    return value, grads


# --- optimizer ---------------------------------------------------------------

def init_adam(params: dict[str, np.ndarray], **hyper: Any) -> AdamState:
    """Zero moments shaped like params; hyper holds lr, betas, eps, l2 and the decay schedule."""
    return AdamState(
        m={name: np.zeros_like(p) for name, p in params.items()},
        v={name: np.zeros_like(p) for name, p in params.items()},
        **hyper,
    )


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    epoch: int,
) -> AdamState:
    """
    One bias-corrected Adam update, in place on params and state.

    The learning rate is multiplied by decay_factor once epoch >= decay_epoch.
    """
    state.step += 1
    lr = state.effective_lr(epoch)
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient {name} has shape {g.shape}, expected {params[name].shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(net: Network, path: Path | str, config: dict[str, Any] | None = None) -> None:
    """
    Write a CAMOXNN1 container.

    Layout: magic, u32 version, u32 header length, JSON header (shapes, channel
    stats, config echo), then every parameter as little-endian float64 in
    declaration order.
    """
    header = {
        "shape": net.shape.model_dump(mode="json"),
        "params": [[name, list(p.shape)] for name, p in net.params.items()],
        "channel_stats": net.channel_stats.model_dump(mode="json") if net.channel_stats else None,
        "config": config or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in net.params.values())
    Path(path).write_bytes(
        CHECKPOINT_MAGIC
        + struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes))
        + header_bytes
        + payload
    )


def load_checkpoint(path: Path | str) -> tuple[Network, dict[str, Any]]:
    """
    Read a CAMOXNN1 container.

    Returns:
        The network and the training configuration echo

    Raises:
        DataFormatError: On bad magic, unknown version or a truncated file
    """
    raw = Path(path).read_bytes()
    prefix = len(CHECKPOINT_MAGIC) + 8
    if len(raw) < prefix or raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path} is not a CAMOXNN1 checkpoint")
    version, header_len = struct.unpack_from("<II", raw, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path}: unsupported checkpoint version {version}")

    header = json.loads(raw[prefix:prefix + header_len].decode("utf-8"))
    offset = prefix + header_len
    params = {}
    for name, dims in header["params"]:
        count = int(np.prod(dims))
        end = offset + 8 * count
        if end > len(raw):
            raise DataFormatError(f"{path}: truncated parameter {name}")
        params[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(dims).copy()
        offset = end
    if offset != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - offset} trailing bytes")

    stats = header.get("channel_stats")
    net = Network(
        shape=NetworkShape.model_validate(header["shape"]),
        params=params,
        channel_stats=ChannelStats.model_validate(stats) if stats else None,
    )
    return net, header.get("config", {})
