"""Small network blocks on top of :mod:`muc.autodiff`.

Dense MLPs, camera-conditioned cross-attention, the two-down/two-up U-Net,
Adam, a binary checkpoint format and a finite-difference gradient checker.
Parameters live in flat ``{name: Tensor}`` dicts so that checkpoints and
optimiser state can be keyed by name.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = {"relu": ad.relu, "gelu": ad.gelu}
OUTPUT_ACTIVATIONS = {"none": lambda x: x, "softplus": ad.softplus, "sigmoid": ad.sigmoid}


class Module:
    """Minimal parameter container: subclasses fill ``self.params``."""

    params: dict[str, Tensor]

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.params.items():
            key = prefix + name
            if key not in arrays:
                raise KeyError(f"missing parameter {key!r}")
            if arrays[key].shape != p.shape:
                raise ValueError(f"parameter {key!r}: shape {arrays[key].shape} != {p.shape}")
            p.data = np.array(arrays[key], dtype=np.float64)

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: v.data.copy() for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def _param(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    activation: str = "gelu"
    output_activation: str = "none"

    def __post_init__(self):
        if len(self.widths) < 2 or any(int(w) <= 0 for w in self.widths):
            raise ValueError(f"MLP widths must be >= 2 positive ints, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")


class Mlp(Module):
    """Affine layers with an activation between them.

    ``zero_last`` zero-initialises the final layer, so the untrained network
    returns a constant (used for the uniform-at-init score heads).
    """

    def __init__(self, spec: MlpSpec, rng: np.random.Generator | None = None, zero_last: bool = False):
        self.spec = spec
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {}
        n = len(spec.widths) - 1
        for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
            if zero_last and i == n - 1:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.params[f"w{i}"] = _param(w)
            self.params[f"b{i}"] = _param(np.zeros(fan_out))

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        squeeze = x.ndim == 1
        if x.shape[-1] != self.spec.widths[0]:
            raise ValueError(f"MLP expects input width {self.spec.widths[0]}, got {x.shape[-1]}")
        if squeeze:
            x = x.reshape(1, -1)
        act = ACTIVATIONS[self.spec.activation]
        n = len(self.spec.widths) - 1
        for i in range(n):
            x = x @ self.params[f"w{i}"] + self.params[f"b{i}"]
            if i < n - 1:
                x = act(x)
        x = OUTPUT_ACTIVATIONS[self.spec.output_activation](x)
        return x.reshape(-1) if squeeze else x


def mlp_forward(mlp: Mlp, x) -> Tensor:
    return mlp(x)


# ---------------------------------------------------------------------------
# Cross-attention and U-Net
# ---------------------------------------------------------------------------
class CrossAttention(Module):
    """Single-head attention: pixels are queries, condition tokens are keys/values.

    The result is added back onto the input feature map. All projections are
    bias-free, so a zero value projection leaves the input untouched.
    """

    def __init__(self, channels: int, cond_dim: int = 9, attn_dim: int = 16,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels, self.cond_dim, self.attn_dim = channels, cond_dim, attn_dim
        self.params = {
            "wq": _param(rng.normal(0.0, 1.0 / np.sqrt(channels), (channels, attn_dim))),
            "wk": _param(rng.normal(0.0, 1.0 / np.sqrt(cond_dim), (cond_dim, attn_dim))),
            "wv": _param(rng.normal(0.0, 1.0 / np.sqrt(cond_dim), (cond_dim, attn_dim))),
            "wo": _param(rng.normal(0.0, 1.0 / np.sqrt(attn_dim), (attn_dim, channels))),
        }

    def attend(self, x, cond) -> tuple[Tensor, Tensor]:
        """Return (output, attention weights of shape (B, H*W, L))."""
        x, cond = ad.as_tensor(x), ad.as_tensor(cond)
        B, C, H, W = x.shape
        if C != self.channels:
            raise ValueError(f"cross-attention built for {self.channels} channels, got {C}")
        if cond.ndim == 2:
            cond = cond.reshape(B, 1, cond.shape[-1])
        if cond.shape[0] != B or cond.shape[-1] != self.cond_dim:
            raise ValueError(f"condition shape {cond.shape} incompatible with batch {B}, dim {self.cond_dim}")
        p = self.params
        pix = x.transpose(0, 2, 3, 1).reshape(B, H * W, C)
        q = pix @ p["wq"]
        k = cond @ p["wk"]
        v = cond @ p["wv"]
        logits = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(self.attn_dim))
        attn = ad.softmax(logits, axis=-1)
        o = (attn @ v) @ p["wo"]
        o = o.reshape(B, H, W, C).transpose(0, 3, 1, 2)
        return x + o, attn

    def __call__(self, x, cond) -> Tensor:
        return self.attend(x, cond)[0]


def cross_attention_forward(block: CrossAttention, x, cond) -> Tensor:
    return block(x, cond)


class Conv(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int = 1,
                 rng: np.random.Generator | None = None, zero: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding = stride, k // 2
        w = np.zeros((c_out, c_in, k, k)) if zero else \
            rng.normal(0.0, np.sqrt(2.0 / (c_in * k * k)), (c_out, c_in, k, k))
        self.params = {"w": _param(w), "b": _param(np.zeros(c_out))}

    def __call__(self, x) -> Tensor:
        return ad.conv2d(x, self.params["w"], self.params["b"], self.stride, self.padding)


@dataclass(frozen=True)
class UNetSpec:
    in_channels: int = 3
    base_channels: int = 16
    out_channels: int = 3
    cond_dim: int = 9
    attn_dim: int = 16

    def __post_init__(self):
        if min(self.in_channels, self.base_channels, self.out_channels, self.cond_dim, self.attn_dim) <= 0:
            raise ValueError(f"UNet widths must be positive: {self}")


class UNet(Module):
    """Two stride-2 down blocks, two upsampling blocks with skips, a 1x1 head.

    Every block ends in camera-conditioned cross-attention. Input spatial
    dimensions must be divisible by 4.
    """

    def __init__(self, spec: UNetSpec, rng: np.random.Generator | None = None, zero_head: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        c, b = spec.in_channels, spec.base_channels
        mk_attn = lambda ch: CrossAttention(ch, spec.cond_dim, spec.attn_dim, rng)
        self.blocks: dict[str, Module] = {
            "down1.conv": Conv(c, b, 3, 2, rng),
            "down1.attn": mk_attn(b),
            "down2.conv": Conv(b, 2 * b, 3, 2, rng),
            "down2.attn": mk_attn(2 * b),
            "up1.conv": Conv(2 * b, b, 3, 1, rng),
            "up1.attn": mk_attn(2 * b),
            "up2.conv": Conv(2 * b, b, 3, 1, rng),
            "up2.attn": mk_attn(b + c),
            "head": Conv(b + c, spec.out_channels, 1, 1, rng, zero=zero_head),
        }
        self.params = {f"{bn}.{pn}": p for bn, blk in self.blocks.items() for pn, p in blk.params.items()}

    def __call__(self, x, cond) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"UNet expects (B, {self.spec.in_channels}, U, V), got {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"UNet spatial dims must be divisible by 4, got {x.shape[2:]}")
        blk = self.blocks
        d1 = blk["down1.attn"](ad.gelu(blk["down1.conv"](x)), cond)
        d2 = blk["down2.attn"](ad.gelu(blk["down2.conv"](d1)), cond)
        u1 = ad.gelu(blk["up1.conv"](ad.upsample_nearest(d2)))
        u1 = blk["up1.attn"](ad.concat([u1, d1], axis=1), cond)
        u2 = ad.gelu(blk["up2.conv"](ad.upsample_nearest(u1)))
        u2 = blk["up2.attn"](ad.concat([u2, x], axis=1), cond)
        return blk["head"](u2)


def unet_forward(net: UNet, x, cond) -> Tensor:
    return net(x, cond)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------
@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new arrays and advances ``state``."""
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        out[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


class Adam:
    """Adam over a ``{name: Tensor}`` dict, reading ``Tensor.grad``."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self) -> None:
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        new = adam_step(self.state, arrays, grads)
        for k, p in self.params.items():
            p.data = new[k]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
CHECKPOINT_MAGIC = b"MUCW"
CHECKPOINT_VERSION = 1


class CheckpointError(IOError):
    pass


def _write_block(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.tobytes())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _read_block(f) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    name = _read_exact(f, n).decode("utf-8")
    (ndim,) = struct.unpack("<I", _read_exact(f, 4))
    shape = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return name, arr


def save_checkpoint(path, params: dict[str, np.ndarray], adam: AdamState | None = None,
                    meta: dict | None = None) -> None:
    """Write named f64 parameter blocks plus optional Adam moments."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_raw)))
    buf.write(meta_raw)
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        _write_block(buf, name, params[name])
    buf.write(struct.pack("<B", adam is not None))
    if adam is not None:
        buf.write(struct.pack("<4dQ", adam.lr, adam.beta1, adam.beta2, adam.eps, adam.step))
        for moments in (adam.m, adam.v):
            buf.write(struct.pack("<I", len(moments)))
            for name in sorted(moments):
                _write_block(buf, name, moments[name])
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], AdamState | None, dict]:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a MUCW checkpoint")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        (n,) = struct.unpack("<I", _read_exact(f, 4))
        meta = json.loads(_read_exact(f, n).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        params = dict(_read_block(f) for _ in range(count))
        (has_adam,) = struct.unpack("<B", _read_exact(f, 1))
        adam = None
        if has_adam:
            lr, b1, b2, eps, step = struct.unpack("<4dQ", _read_exact(f, 40))
            adam = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=step)
            for target in (adam.m, adam.v):
                (k,) = struct.unpack("<I", _read_exact(f, 4))
                target.update(_read_block(f) for _ in range(k))
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after checkpoint payload")
    return params, adam, meta


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------
def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], step: float = 1e-5,
                    max_coords: int = 24, rng: np.random.Generator | None = None) -> dict[str, float]:
    """Compare reverse-mode gradients with central differences.

    For each parameter up to ``max_coords`` coordinates are probed. The
    returned error per parameter is ``max|analytic - numeric|`` divided by
    the largest gradient magnitude seen in that block.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for k, p in params.items()}

    errors = {}
    with ad.no_grad():
        for name, p in params.items():
            p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            n = flat.size
            idx = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, max_coords, replace=False))
            num = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = loss_fn().item()
                flat[i] = orig - step
                f_minus = loss_fn().item()
                flat[i] = orig
                num[j] = (f_plus - f_minus) / (2.0 * step)
            ana = analytic[name].reshape(-1)[idx]
            scale = max(np.abs(num).max(), np.abs(ana).max())
            errors[name] = 0.0 if scale < 1e-12 else float(np.abs(ana - num).max() / scale)
    for p in params.values():
        p.grad = None
    return errors
