"""Dense float32 tensors with reverse-mode automatic differentiation.

Everything the three networks need lives here: a Tensor wrapper around a
numpy array, a Tape that records operations, the layer primitives
(conv2d, max_pool2d, upsample2x, concat_channels, dense), activations,
and the training losses. Ops run forward-only when no tape is active,
which is what inference uses.

Conventions:
  * dtype is float32 everywhere; inputs are converted on construction.
  * losses reduce as mean over the batch axis, sum over remaining axes
    (dice is the exception: it is a global overlap ratio by definition).
  * gradients accumulate into Tensor.grad; call zero_grad between steps.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Tape",
    "conv2d",
    "max_pool2d",
    "upsample2x",
    "concat_channels",
    "dense",
    "relu",
    "sigmoid",
    "softmax_rows",
    "activation",
    "flatten",
    "add",
    "scale",
    "select_rows",
    "loss",
    "softmax_cross_entropy",
    "backward",
]

_LOG_EPS = 1e-7  # probability clip for bce
_DICE_EPS = 1e-6


class Tensor:
    """A dense float32 array plus gradient bookkeeping.

    ``requires_grad`` marks leaves (parameters) whose gradient should be
    collected by :meth:`Tape.backward`. Intermediate results inherit the
    flag from their inputs while a tape is active.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(np.float32, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"


class _TapeEntry:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Entries are appended in execution order, so the list is already a
    topological order of the computation; the backward sweep walks it
    once in reverse.

    Use as a context manager around the forward pass::

        with Tape() as tape:
            out = dense(x, w, b)
            l = loss(out, target, kind="mse")
        tape.backward(l)
    """

    def __init__(self):
        self._entries: list[_TapeEntry] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._entries)

    @staticmethod
    def current() -> Optional["Tape"]:
        return _TAPE_STACK[-1] if _TAPE_STACK else None

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> None:
        self._entries.append(_TapeEntry(out, inputs, backward_fn))

    def backward(self, root: Tensor) -> None:
        """Propagate d(root)/d(x) into ``x.grad`` for every requires_grad tensor."""
        if root.size != 1:
            raise ContractError(f"backward root must be scalar, got shape {root.shape}")
        on_tape = any(entry.out is root for entry in self._entries)
        if not on_tape:
            raise ContractError("backward root was not produced on this tape")

        # Upstream gradients keyed by tensor identity. Reverse iteration
        # guarantees all consumers of a tensor run before its producer,
        # so accumulation here is complete when the producer is visited.
        pending: dict[int, np.ndarray] = {
            id(root): np.ones(root.shape, dtype=np.float32)
        }
        for entry in reversed(self._entries):
            g_out = pending.pop(id(entry.out), None)
            if g_out is None:
                continue
            if entry.out.requires_grad:
                entry.out.accumulate_grad(g_out)
            in_grads = entry.backward_fn(g_out)
            for inp, g_in in zip(entry.inputs, in_grads):
                if g_in is None or not inp.requires_grad:
                    continue
                g_in = np.asarray(g_in, dtype=np.float32)
                key = id(inp)
                if key in pending:
                    pending[key] += g_in
                else:
                    # copy: backward rules may hand out views or shared
                    # buffers, and stored grads are mutated in place
                    pending[key] = g_in.copy()
        # Whatever is left belongs to leaves (tensors no entry produces).
        for entry in self._entries:
            for inp in entry.inputs:
                g = pending.pop(id(inp), None)
                if g is not None and inp.requires_grad:
                    inp.accumulate_grad(g)


def backward(tape: Tape, root: Tensor) -> None:
    """Functional alias for :meth:`Tape.backward`."""
    tape.backward(root)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make_output(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = Tape.current()
    requires = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if requires:
        tape.record(out, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# convolution and friends
# ---------------------------------------------------------------------------

def _im2col_view(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Strided (N, C, kh, kw, Ho, Wo) window view of a padded input."""
    n, c, h, w = xp.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False,
    )


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an FCkHkW kernel stack.

    Output spatial extents follow floor((H + 2*padding - kH)/stride) + 1.
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-d input and kernel, got {x.data.ndim}-d and {kernel.data.ndim}-d"
        )
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise DimensionError(f"kernel expects {ck} input channels, input has {c}")
    if bias.data.shape != (f,):
        raise DimensionError(f"bias shape {bias.data.shape} does not match {f} filters")
    if stride < 1 or padding < 0:
        raise ContractError("stride must be >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col_view(xp, kh, kw, stride)
    # out[n,f,i,j] = sum_{c,p,q} kernel[f,c,p,q] * cols[n,c,p,q,i,j]
    out = np.tensordot(kernel.data, cols, axes=([1, 2, 3], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    out += bias.data.reshape(1, f, 1, 1)

    ho, wo = out.shape[2], out.shape[3]

    def bwd(g: np.ndarray):
        db = g.sum(axis=(0, 2, 3))
        dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        # scatter column gradients back into the (padded) input
        dcols = np.tensordot(kernel.data, g, axes=([0], [1]))  # (C,kh,kw,N,Ho,Wo)
        dxp = np.zeros_like(xp)
        for p in range(kh):
            for q in range(kw):
                dxp[:, :, p : p + ho * stride : stride, q : q + wo * stride : stride] += (
                    dcols[:, p, q].transpose(1, 0, 2, 3)
                )
        if padding:
            dx = dxp[:, :, padding : padding + h, padding : padding + w]
        else:
            dx = dxp
        return dx, dw, db

    return _make_output(out, (x, kernel, bias), bwd)


def max_pool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """2x2 max pooling with stride 2; gradient flows to the argmax cell only."""
    x = _as_tensor(x)
    if window != 2 or stride != 2:
        raise ContractError("max_pool2d supports window=2, stride=2 only")
    if x.data.ndim != 4:
        raise DimensionError(f"max_pool2d expects a 4-d tensor, got {x.data.ndim}-d")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2d needs even extents, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = (
        x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    )
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def bwd(g: np.ndarray):
        d4 = np.zeros((n, c, h2, w2, 4), dtype=np.float32)
        np.put_along_axis(d4, idx[..., None], g[..., None], axis=-1)
        dx = d4.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,)

    return _make_output(out, (x,), bwd)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling; backward sums each 2x2 block."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError(f"upsample2x expects a 4-d tensor, got {x.data.ndim}-d")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g: np.ndarray):
        dx = g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))
        return (dx,)

    return _make_output(out, (x,), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two NCHW tensors along the channel axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise DimensionError("concat_channels expects 4-d tensors")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise DimensionError(
            f"concat_channels spatial mismatch: {a.shape} vs {b.shape}"
        )
    out = np.concatenate([a.data, b.data], axis=1)

    def bwd(g: np.ndarray):
        return g[:, :ca], g[:, ca:]

    return _make_output(out, (a, b), bwd)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map (N, D) @ (D, M) + (M,)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError("dense expects 2-d input and weight")
    n, d = x.shape
    dw, m = weight.shape
    if d != dw:
        raise DimensionError(f"dense inner dimensions disagree: {d} vs {dw}")
    if bias.data.shape != (m,):
        raise DimensionError(f"bias shape {bias.data.shape} does not match {m} outputs")
    out = x.data @ weight.data + bias.data

    def bwd(g: np.ndarray):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _make_output(out, (x, weight, bias), bwd)


def flatten(x: Tensor) -> Tensor:
    """Collapse all non-batch axes: (N, ...) -> (N, prod(...))."""
    x = _as_tensor(x)
    if x.data.ndim < 2:
        raise DimensionError("flatten expects at least 2-d input")
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def bwd(g: np.ndarray):
        return (g.reshape(shape),)

    return _make_output(out, (x,), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def bwd(g: np.ndarray):
        return g, g

    return _make_output(out, (a, b), bwd)


def scale(x: Tensor, k: float) -> Tensor:
    """Multiply by a python scalar."""
    x = _as_tensor(x)
    k = float(k)
    out = x.data * np.float32(k)

    def bwd(g: np.ndarray):
        return (g * np.float32(k),)

    return _make_output(out, (x,), bwd)


def select_rows(x: Tensor, idx) -> Tensor:
    """Gather rows of a 2-d tensor; backward scatter-adds into the source."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError("select_rows expects a 2-d tensor")
    idx = np.asarray(idx, dtype=np.intp)
    out = x.data[idx]

    def bwd(g: np.ndarray):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return (dx,)

    return _make_output(out, (x,), bwd)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, np.float32(0.0))

    def bwd(g: np.ndarray):
        return (np.where(mask, g, np.float32(0.0)),)

    return _make_output(out, (x,), bwd)


def _sigmoid_raw(z: np.ndarray) -> np.ndarray:
    # two-branch form avoids exp overflow on large negative inputs
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    # clip into the open interval: float32 saturates to exactly 0/1 around
    # |z| ~ 17, and downstream log-losses assume probabilities never touch
    # the endpoints
    s = np.clip(_sigmoid_raw(x.data), np.float32(1e-12), np.float32(1.0 - 1e-7))

    def bwd(g: np.ndarray):
        return (g * s * (1.0 - s),)

    return _make_output(s, (x,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a rank-2 tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ContractError(f"softmax_rows expects a 2-d tensor, got {x.data.ndim}-d")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g: np.ndarray):
        dot = (g * s).sum(axis=1, keepdims=True)
        return ((g - dot) * s,)

    return _make_output(s, (x,), bwd)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "softmax_rows": softmax_rows}


def activation(x: Tensor, kind: str) -> Tensor:
    """Dispatch to relu / sigmoid / softmax_rows by name."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ContractError(f"unknown activation kind {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _batch_size(t: Tensor) -> int:
    return t.shape[0] if t.data.ndim >= 1 else 1


def _mse(pred: Tensor, target: Tensor) -> Tensor:
    n = _batch_size(pred)
    d = pred.data - target.data
    val = np.asarray((d * d).sum() / np.float32(n), dtype=np.float32)

    def bwd(g: np.ndarray):
        gs = np.float32(g) / np.float32(n)
        return 2.0 * d * gs, -2.0 * d * gs

    return _make_output(val, (pred, target), bwd)


def _bce(pred: Tensor, target: Tensor) -> Tensor:
    n = _batch_size(pred)
    p = np.clip(pred.data, _LOG_EPS, 1.0 - _LOG_EPS)
    inside = (pred.data > _LOG_EPS) & (pred.data < 1.0 - _LOG_EPS)
    t = target.data
    el = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    val = np.asarray(el.sum() / np.float32(n), dtype=np.float32)

    def bwd(g: np.ndarray):
        gs = np.float32(g) / np.float32(n)
        dp = np.where(inside, (p - t) / (p * (1.0 - p)), np.float32(0.0)) * gs
        dt = (np.log1p(-p) - np.log(p)) * gs
        return dp.astype(np.float32), dt.astype(np.float32)

    return _make_output(val, (pred, target), bwd)


def _dice(pred: Tensor, target: Tensor) -> Tensor:
    p, t = pred.data, target.data
    inter = np.float32((p * t).sum())
    total = np.float32(p.sum() + t.sum())
    eps = np.float32(_DICE_EPS)
    val = np.asarray(1.0 - (2.0 * inter + eps) / (total + eps), dtype=np.float32)

    def bwd(g: np.ndarray):
        denom = (total + eps) ** 2
        dp = -(2.0 * t * (total + eps) - (2.0 * inter + eps)) / denom * np.float32(g)
        dt = -(2.0 * p * (total + eps) - (2.0 * inter + eps)) / denom * np.float32(g)
        return dp.astype(np.float32), dt.astype(np.float32)

    return _make_output(val, (pred, target), bwd)


def _smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    n = _batch_size(pred)
    d = pred.data - target.data
    small = np.abs(d) < 1.0
    el = np.where(small, 0.5 * d * d, np.abs(d) - 0.5)
    val = np.asarray(el.sum() / np.float32(n), dtype=np.float32)

    def bwd(g: np.ndarray):
        gs = np.float32(g) / np.float32(n)
        dp = np.where(small, d, np.sign(d)) * gs
        return dp.astype(np.float32), (-dp).astype(np.float32)

    return _make_output(val, (pred, target), bwd)


_LOSSES = {"mse": _mse, "bce": _bce, "dice": _dice, "smooth_l1": _smooth_l1}


def loss(pred: Tensor, target: Tensor, kind: str) -> Tensor:
    """Scalar training loss.

    mse / bce / smooth_l1 reduce as mean over batch, sum over the rest;
    dice is the global overlap loss 1 - (2*sum(p*t)+eps)/(sum(p)+sum(t)+eps).
    """
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"loss shape mismatch: {pred.shape} vs {target.shape}")
    try:
        fn = _LOSSES[kind]
    except KeyError:
        raise ContractError(f"unknown loss kind {kind!r}") from None
    return fn(pred, target)


def softmax_cross_entropy(logits: Tensor, target: Tensor) -> Tensor:
    """Fused stable log-softmax cross-entropy, mean over the batch.

    ``target`` is a one-hot (or soft) distribution per row.
    """
    logits, target = _as_tensor(logits), _as_tensor(target)
    if logits.data.ndim != 2 or logits.shape != target.shape:
        raise DimensionError(
            f"softmax_cross_entropy expects matching 2-d shapes, got {logits.shape} vs {target.shape}"
        )
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    val = np.asarray(-(target.data * logp).sum() / np.float32(n), dtype=np.float32)
    soft = np.exp(logp)

    def bwd(g: np.ndarray):
        gs = np.float32(g) / np.float32(n)
        return (soft - target.data) * gs, -logp * gs

    return _make_output(val, (logits, target), bwd)
