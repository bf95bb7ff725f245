"""Layer primitives, Adam, gradient checking and the checkpoint file format.

Differentiation is delegated to torch autograd; this module pins down the
layer definitions the models use and the tooling to verify them against
central finite differences.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

CHECKPOINT_MAGIC = b"DCNVCKPT"
CHECKPOINT_VERSION = 1


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def dense(x, weight, bias=None):
    _check(x.shape[-1] == weight.shape[1], f"dense: input width {x.shape[-1]} != {weight.shape[1]}")
    return F.linear(x, weight, bias)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    _check(x.dim() == 4 and x.shape[1] == weight.shape[1],
           f"conv2d: input {tuple(x.shape)} incompatible with kernel {tuple(weight.shape)}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def transpose_conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0,
                     output_padding: int = 0):
    _check(x.dim() == 4 and x.shape[1] == weight.shape[0],
           f"transpose_conv2d: input {tuple(x.shape)} incompatible with kernel {tuple(weight.shape)}")
    return F.conv_transpose2d(x, weight, bias, stride=stride, padding=padding,
                              output_padding=output_padding)


def elu(x):
    return F.elu(x)


def gru_cell(x, h, w_ih, w_hh, b_ih, b_hh):
    """Three-gate GRU step; gate order (reset, update, candidate) as in torch."""
    _check(w_ih.shape[0] == 3 * h.shape[-1] and w_hh.shape == (3 * h.shape[-1], h.shape[-1]),
           "gru_cell: weight shapes do not match hidden size")
    gi = F.linear(x, w_ih, b_ih)
    gh = F.linear(h, w_hh, b_hh)
    i_r, i_z, i_n = gi.chunk(3, -1)
    h_r, h_z, h_n = gh.chunk(3, -1)
    r = torch.sigmoid(i_r + h_r)
    z = torch.sigmoid(i_z + h_z)
    n = torch.tanh(i_n + r * h_n)
    return (1.0 - z) * n + z * h


def gaussian_sample(mu, logvar, eps):
    """Reparameterised draw ``mu + sigma * eps`` with externally supplied noise."""
    _check(mu.shape == logvar.shape == eps.shape, "gaussian_sample: shape mismatch")
    return mu + torch.exp(0.5 * logvar) * eps


# -- Adam -----------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@torch.no_grad()
def adam_step(params, grads, state: AdamState):
    """In-place Adam update with bias correction; returns ``(params, state)``."""
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    _check(len(params) == len(grads) == len(state.m), "adam_step: parameter/gradient count mismatch")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        _check(p.shape == g.shape == m.shape, "adam_step: shape mismatch")
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / c1)
    return params, state


# -- finite differences ----------------------------------------------------------------

def finite_difference_grad(fn, inputs, h: float = 1e-3):
    """Central-difference gradient of scalar ``fn(*inputs)`` for every input."""
    grads = []
    with torch.no_grad():
        for x in inputs:
            g = torch.zeros_like(x)
            flat = x.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float(fn(*inputs))
                flat[i] = orig - h
                fm = float(fn(*inputs))
                flat[i] = orig
                gflat[i] = (fp - fm) / (2.0 * h)
            grads.append(g)
    return grads


def gradient_check(fn, inputs, h: float = 1e-3) -> float:
    """Largest norm-wise relative error between autograd and central differences.

    ``fn`` maps the inputs to a scalar; inputs are copied to float64 so the
    comparison measures the derivative, not rounding noise.
    """
    xs = [x.detach().to(torch.float64).clone().requires_grad_(True) for x in inputs]
    out = fn(*xs)
    analytic = torch.autograd.grad(out, xs, allow_unused=True)
    analytic = [torch.zeros_like(x) if a is None else a for a, x in zip(analytic, xs)]
    numeric = finite_difference_grad(fn, [x.detach().clone() for x in xs], h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(a.norm().item(), n.norm().item())
        if scale < 1e-12:
            continue
        worst = max(worst, (a - n).norm().item() / scale)
    return worst


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> str:
    """Write named float32 tensors plus JSON metadata; returns the sha256 hex digest.

    Layout (little-endian): magic[8], version u32, meta_len u32, meta JSON,
    count u32, then per tensor: name_len u16, name, ndim u8, dims u32 x ndim,
    raw float32 data; finally the sha256 of every preceding byte.
    """
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4")
        nb = name.encode()
        buf.write(struct.pack("<HB", len(nb), arr.ndim) + nb)
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)
    return digest.hex()


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[dict, dict]:
    import numpy as np

    data = Path(path).read_bytes()
    if len(data) < 52 or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, meta_len = struct.unpack_from("<II", body, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 16
    meta = json.loads(body[off:off + meta_len])
    off += meta_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors = {}
    for _ in range(count):
        name_len, ndim = struct.unpack_from("<HB", body, off)
        off += 3
        name = body[off:off + name_len].decode()
        off += name_len
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    return tensors, meta


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
