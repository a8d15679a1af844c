"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy arrays (float64 by default, float32 as an optional
speed mode); every differentiable operation records a backward closure on
the active :class:`Tape`. Calling :func:`backward` on a scalar loss replays
the tape in exact reverse execution order and accumulates gradients into
every ``requires_grad`` tensor reachable from the loss.

Outside a ``with Tape():`` block nothing is recorded, so evaluation-mode
code pays no graph cost and is trivially side-effect free.

Gradient conventions: ``abs`` uses subgradient 0 at 0, max-pooling routes
the gradient to the lowest linear index among tied maxima, and elementwise
operations require exactly equal shapes (the only broadcast is the
documented channel bias add).
"""

import threading

import numpy as np

from . import rng

DEFAULT_DTYPE = np.float64

_FLOAT_DTYPES = (np.float64, np.float32)


class TensorError(ValueError):
    """Shape, domain, or tape misuse."""


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """A dense n-dimensional array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
        if arr.dtype.type not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions are the primary API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager; operations executed inside record their
    backward closures in execution order. A tape can be replayed backward
    exactly once.
    """

    def __init__(self):
        self._records = []
        self._out_ids = set()
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()
        return False

    def __len__(self):
        return len(self._records)


_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def record_op(out: Tensor, parents, backward_fn) -> Tensor:
    """Attach a backward closure for ``out`` to the active tape.

    ``backward_fn(gout)`` must accumulate into the parents via
    :func:`accumulate_grad`. No-op when no tape is active or no parent
    requires a gradient.
    """
    tape = active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    tape._records.append((out, backward_fn))
    tape._out_ids.add(id(out))
    return out


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients of everything reachable from a scalar loss."""
    if loss.data.size != 1:
        raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TensorError("tape already replayed; build a fresh tape")
    if id(loss) not in tape._out_ids:
        raise TensorError("loss was not produced on this tape")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape._records):
        if out.grad is not None:
            fn(out.grad)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def _check_shape(shape):
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise TensorError(f"extents must be positive, got {shape}")
    return shape


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape), dtype=dtype or DEFAULT_DTYPE))


def ones(shape, dtype=None) -> Tensor:
    return Tensor(np.ones(_check_shape(shape), dtype=dtype or DEFAULT_DTYPE))


def full(shape, value, dtype=None) -> Tensor:
    return Tensor(np.full(_check_shape(shape), value, dtype=dtype or DEFAULT_DTYPE))


def randn(shape, seed: int, dtype=None) -> Tensor:
    """Standard-normal samples from the documented Philox stream.

    Identical (shape, seed) pairs give bitwise-identical tensors; see
    :mod:`topdropnet.rng` for the stream definition.
    """
    shape = _check_shape(shape)
    samples = rng.generator(seed, "randn").standard_normal(shape)
    return Tensor(samples, dtype=dtype)


def astensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    if isinstance(data, Tensor):
        return data
    t = Tensor(data, requires_grad=requires_grad, dtype=dtype)
    if not np.all(np.isfinite(t.data)):
        raise TensorError("non-finite values in tensor input")
    return t


def parameter(data, dtype=None) -> Tensor:
    return astensor(np.array(data, copy=True), requires_grad=True, dtype=dtype)


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise TensorError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)

    def back(g):
        accumulate_grad(a, g)
        accumulate_grad(b, g)

    return record_op(out, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)

    def back(g):
        accumulate_grad(a, g)
        accumulate_grad(b, -g)

    return record_op(out, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)

    def back(g):
        accumulate_grad(a, g * b.data)
        accumulate_grad(b, g * a.data)

    return record_op(out, (a, b), back)


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * s)

    def back(g):
        accumulate_grad(a, g * s)

    return record_op(out, (a,), back)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """The one permitted broadcast: add a per-channel bias.

    ``x`` may be (n, d) with bias (d,) or (n, c, h, w) with bias (c,).
    """
    if x.data.ndim == 2 and b.shape == (x.shape[1],):
        out = Tensor(x.data + b.data[None, :])
        axes = (0,)
    elif x.data.ndim == 4 and b.shape == (x.shape[1],):
        out = Tensor(x.data + b.data[None, :, None, None])
        axes = (0, 2, 3)
    else:
        raise TensorError(f"add_bias: incompatible shapes {x.shape} and {b.shape}")

    def back(g):
        accumulate_grad(x, g)
        accumulate_grad(b, g.sum(axis=axes))

    return record_op(out, (x, b), back)


def absolute(a: Tensor) -> Tensor:
    """|a|, with subgradient 0 at exactly 0."""
    out = Tensor(np.abs(a.data))

    def back(g):
        accumulate_grad(a, g * np.sign(a.data))

    return record_op(out, (a,), back)


def pow_scalar(a: Tensor, p: float) -> Tensor:
    p = float(p)
    value = a.data**p
    if not np.all(np.isfinite(value)):
        raise TensorError(f"pow_scalar produced non-finite values (p={p})")
    out = Tensor(value)

    def back(g):
        accumulate_grad(a, g * p * a.data ** (p - 1.0))

    return record_op(out, (a,), back)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def back(g):
        accumulate_grad(a, np.broadcast_to(g, a.shape).astype(a.data.dtype))

    return record_op(out, (a,), back)


def mean_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.mean())
    inv = 1.0 / a.data.size

    def back(g):
        accumulate_grad(a, np.broadcast_to(g * inv, a.shape).astype(a.data.dtype))

    return record_op(out, (a,), back)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0

    def back(g):
        accumulate_grad(x, g * mask)

    return record_op(out, (x,), back)


# ---------------------------------------------------------------------------
# Linear algebra and convolution
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise TensorError("matmul expects 2-d tensors")
    if a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul: inner extents {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def back(g):
        accumulate_grad(a, g @ b.data.T)
        accumulate_grad(b, a.data.T @ g)

    return record_op(out, (a, b), back)


def conv_output_extent(extent: int, kernel: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - kernel) // stride + 1


def _conv_cols(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    # Strided window view: (n, cin, ho, wo, kh, kw). Read-only; tensordot copies.
    n, cin = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    shape = (n, cin, ho, wo, kh, kw)
    strides = (sn, sc, sh * stride, sw * stride, sh, sw)
    return np.lib.stride_tricks.as_strided(xp, shape=shape, strides=strides, writeable=False)


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding, no bias.

    x: (n, cin, h, w), k: (cout, cin, kh, kw) -> (n, cout, h', w') with
    h' = (h + 2 pad - kh) // stride + 1.
    """
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise TensorError("conv2d expects 4-d input and kernel")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = k.shape
    if kcin != cin:
        raise TensorError(f"conv2d: channel mismatch {cin} vs {kcin}")
    stride = int(stride)
    pad = int(pad)
    if stride < 1 or pad < 0:
        raise TensorError("conv2d: stride must be >= 1 and pad >= 0")
    ho = conv_output_extent(h, kh, stride, pad)
    wo = conv_output_extent(w, kw, stride, pad)
    if ho <= 0 or wo <= 0:
        raise TensorError(f"conv2d: non-positive output extent for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _conv_cols(xp, kh, kw, stride, ho, wo)
    # (n, cin, ho, wo, kh, kw) x (cout, cin, kh, kw) -> (n, ho, wo, cout)
    val = np.tensordot(cols, k.data, axes=([1, 4, 5], [1, 2, 3]))
    out = Tensor(np.ascontiguousarray(val.transpose(0, 3, 1, 2)))

    def back(g):
        if k.requires_grad:
            gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            accumulate_grad(k, gk)
        if x.requires_grad:
            # (n, cout, ho, wo) x (cout, cin, kh, kw) -> (n, ho, wo, cin, kh, kw)
            gcols = np.tensordot(g, k.data, axes=([1], [0]))
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
            accumulate_grad(x, gx)

    return record_op(out, (x, k), back)


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max pooling; gradient goes to the lowest linear index among ties."""
    if x.data.ndim != 4:
        raise TensorError("maxpool2d expects 4-d input")
    wh = ww = int(window)
    stride = int(stride) if stride is not None else wh
    n, c, h, w = x.shape
    if wh > h or ww > w:
        raise TensorError(f"maxpool2d: window {wh}x{ww} exceeds input {h}x{w}")
    if stride < 1:
        raise TensorError("maxpool2d: stride must be >= 1")
    ho = (h - wh) // stride + 1
    wo = (w - ww) // stride + 1
    cols = _conv_cols(x.data, wh, ww, stride, ho, wo)
    flat = cols.reshape(n, c, ho, wo, wh * ww)
    idx = flat.argmax(axis=-1)  # first occurrence = lowest linear index
    val = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = Tensor(val)

    def back(g):
        gx = np.zeros_like(x.data)
        ni, ci, hi, wi = np.indices((n, c, ho, wo))
        rows = hi * stride + idx // ww
        colsx = wi * stride + idx % ww
        np.add.at(gx, (ni, ci, rows, colsx), g)
        accumulate_grad(x, gx)

    return record_op(out, (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise TensorError("global_avg_pool expects 4-d input")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))
    inv = 1.0 / (h * w)

    def back(g):
        accumulate_grad(x, np.broadcast_to(g[:, :, None, None] * inv, x.shape).astype(x.data.dtype))

    return record_op(out, (x,), back)


def global_max_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise TensorError("global_max_pool expects 4-d input")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0])

    def back(g):
        gx = np.zeros_like(flat)
        ni, ci = np.indices((n, c))
        gx[ni, ci, idx] = g
        accumulate_grad(x, gx.reshape(x.shape))

    return record_op(out, (x,), back)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over (n,) or (n, h, w) per channel.

    Train mode normalizes by batch statistics (population variance) and
    updates the running stats in place with
    ``new = (1 - momentum) * old + momentum * batch``. Eval mode uses the
    running stats and is a plain affine map.
    """
    if x.data.ndim == 2:
        axes = (0,)
        bshape = (1, -1)
    elif x.data.ndim == 4:
        axes = (0, 2, 3)
        bshape = (1, -1, 1, 1)
    else:
        raise TensorError("batchnorm expects 2-d or 4-d input")
    cdim = x.shape[1]
    if gamma.shape != (cdim,) or beta.shape != (cdim,):
        raise TensorError("batchnorm: gamma/beta shape mismatch")

    gview = gamma.data.reshape(bshape)
    bview = beta.data.reshape(bshape)

    if training:
        if x.shape[0] < 2:
            raise TensorError("batchnorm train mode needs batch extent >= 2")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
        ivar = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean.reshape(bshape)) * ivar.reshape(bshape)
        out = Tensor(xhat * gview + bview)
        count = x.data.size // cdim

        def back(g):
            accumulate_grad(beta, g.sum(axis=axes))
            accumulate_grad(gamma, (g * xhat).sum(axis=axes))
            if x.requires_grad:
                dxhat = g * gview
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = (dxhat - s1 / count - xhat * s2 / count) * ivar.reshape(bshape)
                accumulate_grad(x, gx)

    else:
        ivar = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(bshape)) * ivar.reshape(bshape)
        out = Tensor(xhat * gview + bview)

        def back(g):
            accumulate_grad(beta, g.sum(axis=axes))
            accumulate_grad(gamma, (g * xhat).sum(axis=axes))
            accumulate_grad(x, g * gview * ivar.reshape(bshape))

    return record_op(out, (x, gamma, beta), back)


def log_softmax(logits: Tensor) -> Tensor:
    """Row-wise log-softmax with max subtraction, (n, k) with k >= 2."""
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise TensorError("log_softmax expects (n, k) with k >= 2")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    val = z - lse
    out = Tensor(val)

    def back(g):
        softmax = np.exp(val)
        accumulate_grad(logits, g - softmax * g.sum(axis=1, keepdims=True))

    return record_op(out, (logits,), back)


def l2_normalize(x: Tensor, eps: float = 0.0) -> Tensor:
    """Normalize each row to unit Euclidean norm; zero-norm rows are an error."""
    if x.data.ndim != 2:
        raise TensorError("l2_normalize expects (n, d)")
    norms = np.sqrt((x.data**2).sum(axis=1, keepdims=True))
    if np.any(norms <= eps):
        raise TensorError("l2_normalize: zero-norm row")
    y = x.data / norms
    out = Tensor(y)

    def back(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        accumulate_grad(x, (g - y * dot) / norms)

    return record_op(out, (x,), back)


# ---------------------------------------------------------------------------
# Parameter checkpoint file
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = "TDNET-CKPT v1"

_DTYPE_TOKENS = {
    "f8": np.dtype("<f8"),
    "f4": np.dtype("<f4"),
    "i8": np.dtype("<i8"),
    "u8": np.dtype("<u8"),
    "u1": np.dtype("|u1"),
}
_TOKEN_FOR_KIND = {v.str: k for k, v in _DTYPE_TOKENS.items()}


def save_arrays(path, arrays: dict) -> None:
    """Write named arrays: UTF-8 header ``name shape dtype offset`` lines,
    a blank line, then the raw little-endian payloads in header order."""
    header = [CHECKPOINT_MAGIC]
    payload = bytearray()
    for name, arr in arrays.items():
        if " " in name or "\n" in name:
            raise ValueError(f"invalid array name {name!r}")
        arr = np.ascontiguousarray(arr)
        token = _TOKEN_FOR_KIND.get(arr.dtype.newbyteorder("<").str)
        if token is None:
            raise ValueError(f"unsupported dtype {arr.dtype} for {name!r}")
        arr = arr.astype(_DTYPE_TOKENS[token], copy=False)
        shape = ",".join(str(s) for s in (arr.shape or (1,)))
        header.append(f"{name} {shape} {token} {len(payload)}")
        payload.extend(arr.tobytes())
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n\n").encode("utf-8"))
        f.write(bytes(payload))


def load_arrays(path) -> dict:
    with open(path, "rb") as f:
        blob = f.read()
    head, sep, payload = blob.partition(b"\n\n")
    if not sep:
        raise ValueError("missing header terminator")
    lines = head.decode("utf-8").split("\n")
    if lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint version tag {lines[0]!r}")
    arrays = {}
    for line in lines[1:]:
        name, shape_s, token, offset_s = line.split(" ")
        shape = tuple(int(s) for s in shape_s.split(","))
        dtype = _DTYPE_TOKENS[token]
        offset = int(offset_s)
        nbytes = int(np.prod(shape)) * dtype.itemsize
        arrays[name] = np.frombuffer(payload[offset : offset + nbytes], dtype=dtype).reshape(shape).copy()
    return arrays


# ---------------------------------------------------------------------------
# Minimal module tree (parameter/buffer bookkeeping for the network)
# ---------------------------------------------------------------------------


class Module:
    """Base for parameterized components.

    Attributes that are Tensors count as parameters, numpy arrays as
    buffers (e.g. running statistics), and Modules (or lists of Modules)
    as children; discovery order is attribute assignment order, which
    keeps checkpoints and initialization deterministic.
    """

    training = True

    def _entries(self):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield name, value

    def named_parameters(self, prefix: str = ""):
        for name, value in self._entries():
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = ""):
        for name, value in self._entries():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def train(self, mode: bool = True):
        self.training = mode
        for _, value in self._entries():
            if isinstance(value, Module):
                value.train(mode)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_arrays(self) -> dict:
        state = {f"param.{n}": t.data for n, t in self.named_parameters()}
        state.update({f"buffer.{n}": b for n, b in self.named_buffers()})
        return state

    def load_state_arrays(self, state: dict) -> None:
        for n, t in self.named_parameters():
            arr = state[f"param.{n}"]
            if tuple(arr.shape) != t.shape:
                raise ValueError(f"shape mismatch for {n}: {arr.shape} vs {t.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)
        for n, b in self.named_buffers():
            arr = state[f"buffer.{n}"]
            if tuple(arr.shape) != b.shape:
                raise ValueError(f"shape mismatch for buffer {n}")
            b[...] = arr
