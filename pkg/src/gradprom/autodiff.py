"""Define-by-run reverse-mode automatic differentiation over float64 arrays.

Every differentiable primitive appends one node to a :class:`Tape`. A node
stores the ids of its inputs and a closure mapping the upstream gradient to
the gradients of those inputs. :func:`backward` walks the tape in exact
reverse insertion order and never mutates it, so the same tape can be
replayed for several scalar losses after a single forward pass.

Tensors without a node are constants: they take part in the forward
computation but never receive a gradient.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "constant",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "absolute",
    "bias_add",
    "matmul",
    "conv2d",
    "pool_and_resize",
    "avgpool",
    "upsample_nearest",
    "global_avgpool",
    "reduce_and_shape",
    "mean",
    "sum_all",
    "reshape",
    "concat_channels",
    "log_softmax",
    "detach",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested primitive."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class _Node:
    __slots__ = ("kind", "inputs", "vjp", "requires_grad", "shape")

    def __init__(self, kind, inputs, vjp, requires_grad, shape):
        self.kind = kind
        self.inputs = inputs
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.shape = shape


class Tape:
    """Append-only record of one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        # set by grad_check to observe relu pre-activation signs
        self.kink_log: list[np.ndarray] | None = None

    def __len__(self):
        return len(self.nodes)

    def leaf(self, data, requires_grad: bool = True) -> "Tensor":
        arr = _as_array(data)
        _check_finite(arr, "leaf")
        node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, requires_grad, arr.shape))
        return Tensor(arr, node=node_id, requires_grad=requires_grad, tape=self)

    def _record(self, kind, inputs, data, vjp) -> "Tensor":
        node_id = len(self.nodes)
        self.nodes.append(_Node(kind, inputs, vjp, False, data.shape))
        return Tensor(data, node=node_id, requires_grad=False, tape=self)


class Tensor:
    """Immutable n-d float64 value, optionally attached to a tape node."""

    __slots__ = ("data", "node", "requires_grad", "tape")

    def __init__(self, data, node: int | None = None, requires_grad: bool = False,
                 tape: Tape | None = None):
        arr = _as_array(data)
        if arr.flags.writeable:
            # read-only view; the caller's buffer keeps its own flags
            arr = arr.view()
            arr.flags.writeable = False
        self.data = arr
        self.node = node
        self.requires_grad = requires_grad
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_not_scalar(t):
    raise ShapeError(f"tensor of shape {t.shape} is not a scalar")


def constant(data) -> Tensor:
    return Tensor(data)


def _as_array(data) -> np.ndarray:
    if isinstance(data, Tensor):
        return data.data
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(())
    return arr


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, kind: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {kind}")


def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray,
          vjp: Callable[[np.ndarray], tuple]) -> Tensor:
    _check_finite(out, kind)
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(out)
    ids = tuple(t.node if t.tape is tape else None for t in inputs)
    return tape._record(kind, ids, out, vjp)


# ---------------------------------------------------------------- elementwise

def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch a pointwise primitive by name."""
    if op_kind == "add":
        return add(a, b)
    if op_kind == "sub":
        return sub(a, b)
    if op_kind == "mul":
        return mul(a, b)
    if op_kind == "scale":
        return scale(a, b)
    if op_kind == "relu":
        return relu(a)
    if op_kind == "sigmoid":
        return sigmoid(a)
    if op_kind == "abs":
        return absolute(a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def _same_shape(a: Tensor, b: Tensor, kind: str):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = _as_tensor(a)
        return _emit("add", (a,), a.data + b, lambda g: (g,))
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = _as_tensor(a)
        return _emit("sub", (a,), a.data - b, lambda g: (g,))
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "sub")
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, b)
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    if a.tape is not None and a.tape.kink_log is not None:
        a.tape.kink_log.append(np.sign(x))
    mask = x > 0
    return _emit("relu", (a,), np.where(mask, x, 0.0), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    s = np.sign(a.data)
    return _emit("abs", (a,), np.abs(a.data), lambda g: (g * s,))


def bias_add(x, b) -> Tensor:
    """Add a per-channel bias ``b[C]`` along axis 1 of ``x[N x C x ...]``."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.data.ndim < 2 or b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match channels of {x.shape}")
    bshape = (1, -1) + (1,) * (x.data.ndim - 2)
    red = (0,) + tuple(range(2, x.data.ndim))
    return _emit("bias_add", (x, b), x.data + b.data.reshape(bshape),
                 lambda g: (g, g.sum(axis=red)))


# --------------------------------------------------------------------- matmul

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


# --------------------------------------------------------------------- conv2d

def _pad(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return x
    width = ((0, 0), (0, 0), (p, p), (p, p))
    if mode == "zero":
        return np.pad(x, width)
    if mode == "reflect":
        return np.pad(x, width, mode="reflect")
    raise ValueError(f"unknown padding mode {mode!r}")


def _unpad(g: np.ndarray, p: int, mode: str) -> np.ndarray:
    if p == 0:
        return g
    if mode == "zero":
        return g[:, :, p:-p, p:-p]
    # fold mirrored border gradients back onto their source pixels
    g = g.copy()
    for axis in (2, 3):
        n = g.shape[axis] - 2 * p
        core = np.take(g, np.arange(p, p + n), axis=axis)
        for j in range(1, p + 1):
            lo = np.take(g, p - j, axis=axis)
            hi = np.take(g, p + n - 1 + j, axis=axis)
            idx_lo = [slice(None)] * 4
            idx_lo[axis] = j
            idx_hi = [slice(None)] * 4
            idx_hi[axis] = n - 1 - j
            core[tuple(idx_lo)] += lo
            core[tuple(idx_hi)] += hi
        g = core
    return g


def conv2d(x, kernel, bias=None, padding: int = 0, mode: str = "zero",
           stride: int = 1) -> Tensor:
    """Cross-correlation of ``x[N x Cin x H x W]`` (or ``[Cin x H x W]``).

    ``kernel`` is ``[Cout x Cin x k x k]`` with odd ``k``. Output spatial size is
    ``(H + 2p - k) / stride + 1`` and must be an integer.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    kd = kernel.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise ShapeError(f"conv2d: bad ranks {x.shape}, {kernel.shape}")
    n, cin, h, w = xd.shape
    cout, kcin, k, k2 = kd.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if kcin != cin:
        raise ShapeError(f"conv2d: kernel expects {kcin} channels, input has {cin}")
    if stride < 1:
        raise ShapeError("conv2d: stride must be positive")
    p = int(padding)
    if mode == "reflect" and p >= min(h, w):
        raise ShapeError("conv2d: reflect padding wider than the image")
    span_h, span_w = h + 2 * p - k, w + 2 * p - k
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(f"conv2d: non-integer output size for {h}x{w}, k={k}, p={p}, stride={stride}")
    ho, wo = span_h // stride + 1, span_w // stride + 1

    xp = _pad(xd, p, mode)
    # channel-major im2col: rows ordered (ki, kj, cin), columns (n, ho, wo)
    xc = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))
    cols = np.empty((k, k, cin, n, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[i, j] = xc[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(k * k * cin, n * ho * wo)
    kmat = np.ascontiguousarray(kd.transpose(0, 2, 3, 1)).reshape(cout, k * k * cin)
    out2 = kmat @ cols
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
        out2 += bias.data[:, None]
    out = np.ascontiguousarray(out2.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))
    if squeeze:
        out = out[0]
    need_x = x.tape is not None

    def vjp(g):
        g4 = g[None] if squeeze else g
        g2 = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        gk = (g2 @ cols.T).reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
        gb = None if bias is None else g2.sum(axis=1)
        if not need_x:
            return None, gk, gb
        # col2im: one strided accumulate per kernel tap
        gcols = (kmat.T @ g2).reshape(k, k, cin, n, ho, wo)
        gxc = np.zeros(xc.shape)
        for i in range(k):
            for j in range(k):
                gxc[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[i, j]
        gx = _unpad(gxc.transpose(1, 0, 2, 3), p, mode)
        if squeeze:
            gx = gx[0]
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv2d", inputs, out, vjp)


# ----------------------------------------------------------- pooling / resize

def _spatial4(x: np.ndarray):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a [C x H x W] or [N x C x H x W] tensor, got {x.shape}")


def _block_mean(x: np.ndarray, f: int) -> np.ndarray:
    n, c, h, w = x.shape
    y = x.reshape(n, c, h // f, f, w // f, f)
    if f & (f - 1) == 0:
        # pairwise halving keeps blocks of equal values exact
        while y.shape[3] > 1:
            y = (y[:, :, :, 0::2] + y[:, :, :, 1::2]) * 0.5
        while y.shape[5] > 1:
            y = (y[..., 0::2] + y[..., 1::2]) * 0.5
        return y.reshape(n, c, h // f, w // f)
    return y.mean(axis=(3, 5))


def avgpool(x, factor: int) -> Tensor:
    x = _as_tensor(x)
    xd, squeeze = _spatial4(x.data)
    f = int(factor)
    if f < 1 or xd.shape[2] % f or xd.shape[3] % f:
        raise ShapeError(f"avgpool: {xd.shape[2]}x{xd.shape[3]} not divisible by {f}")
    out = _block_mean(xd, f)
    inv = 1.0 / (f * f)

    def vjp(g):
        g4 = g[None] if squeeze else g
        gx = np.repeat(np.repeat(g4, f, axis=2), f, axis=3) * inv
        return (gx[0] if squeeze else gx,)

    return _emit("avgpool", (x,), out[0] if squeeze else out, vjp)


def upsample_nearest(x, factor: int) -> Tensor:
    x = _as_tensor(x)
    xd, squeeze = _spatial4(x.data)
    f = int(factor)
    if f < 1:
        raise ShapeError("upsample_nearest: factor must be positive")
    out = np.repeat(np.repeat(xd, f, axis=2), f, axis=3)

    def vjp(g):
        g4 = g[None] if squeeze else g
        n, c, h, w = g4.shape
        gx = g4.reshape(n, c, h // f, f, w // f, f).sum(axis=(3, 5))
        return (gx[0] if squeeze else gx,)

    return _emit("upsample_nearest", (x,), out[0] if squeeze else out, vjp)


def global_avgpool(x) -> Tensor:
    """Mean over H x W; keeps singleton spatial dims."""
    x = _as_tensor(x)
    xd, squeeze = _spatial4(x.data)
    n, c, h, w = xd.shape
    out = xd.mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / (h * w)

    def vjp(g):
        g4 = g[None] if squeeze else g
        gx = np.broadcast_to(g4 * inv, (n, c, h, w)).copy()
        return (gx[0] if squeeze else gx,)

    return _emit("global_avgpool", (x,), out[0] if squeeze else out, vjp)


def pool_and_resize(op_kind: str, x, factor: int | None = None) -> Tensor:
    if op_kind == "avgpool":
        return avgpool(x, factor)
    if op_kind == "upsample_nearest":
        return upsample_nearest(x, factor)
    if op_kind == "global_avgpool":
        return global_avgpool(x)
    raise ValueError(f"unknown pooling op {op_kind!r}")


# ------------------------------------------------------- reductions / shaping

def mean(x) -> Tensor:
    x = _as_tensor(x)
    shape, inv = x.shape, 1.0 / x.size
    return _emit("mean", (x,), np.asarray(x.data.mean()),
                 lambda g: (np.full(shape, float(g) * inv),))


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _emit("sum", (x,), np.asarray(x.data.sum()),
                 lambda g: (np.full(shape, float(g)),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def concat_channels(tensors: Sequence) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    nd = ts[0].data.ndim
    if nd not in (3, 4):
        raise ShapeError("concat_channels expects [C x H x W] or [N x C x H x W]")
    axis = nd - 3
    ref = ts[0].shape
    for t in ts[1:]:
        if t.data.ndim != nd or t.shape[:axis] != ref[:axis] or t.shape[axis + 1:] != ref[axis + 1:]:
            raise ShapeError(f"concat_channels: incompatible shapes {ref} and {t.shape}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit("concat_channels", ts, out,
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def reduce_and_shape(op_kind: str, inputs, shape=None) -> Tensor:
    if op_kind == "mean":
        return mean(inputs)
    if op_kind == "sum":
        return sum_all(inputs)
    if op_kind == "reshape":
        return reshape(inputs, shape)
    if op_kind == "concat_channels":
        return concat_channels(inputs)
    raise ValueError(f"unknown reduce/shape op {op_kind!r}")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim == 0 or x.shape[axis] < 2:
        raise ShapeError("log_softmax needs at least 2 classes along the reduced axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return _emit("log_softmax", (x,), out,
                 lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def detach(x) -> Tensor:
    """Return a constant copy that blocks gradient flow."""
    return Tensor(_as_tensor(x).data)


# ------------------------------------------------------------------- backward

def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None,
             seed: float = 1.0) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` keyed by node id.

    With ``wrt=None`` every ``requires_grad`` leaf is reported. Nodes off the
    loss path get exact zeros. The tape is left untouched.
    """
    if loss.tape is not tape or loss.node is None:
        raise ValueError("loss is not recorded on this tape")
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes = tape.nodes
    grads: list[np.ndarray | None] = [None] * len(nodes)
    grads[loss.node] = np.full(loss.shape, float(seed))
    for i in range(loss.node, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        if node.vjp is None:
            continue
        for j, gj in zip(node.inputs, node.vjp(g)):
            if j is None or gj is None:
                continue
            grads[j] = gj if grads[j] is None else grads[j] + gj
    if wrt is None:
        targets = [i for i, nd in enumerate(nodes) if nd.requires_grad]
    else:
        targets = [t.node for t in wrt if t.tape is tape and t.node is not None]
    return {i: grads[i] if grads[i] is not None else np.zeros(nodes[i].shape)
            for i in targets}


# ------------------------------------------------------------------ grad check

def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5,
               coords: Sequence[int] | None = None) -> float:
    """Max elementwise error between backward() and central differences.

    The error at each coordinate is ``|fd - an| / max(1, |an|)``. Coordinates
    whose perturbation moves any relu input across (or onto) its kink are
    skipped. ``coords`` restricts the check to a subset of flat indices.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(_as_array(point), dtype=np.float64)

    def evaluate(x):
        tape = Tape()
        tape.kink_log = []
        leaf = tape.leaf(x)
        out = fn(leaf)
        return tape, leaf, out, tape.kink_log

    tape, leaf, out, base_kinks = evaluate(x0)
    analytic = backward(tape, out, wrt=[leaf])[leaf.node].reshape(-1)
    idx = range(x0.size) if coords is None else coords
    worst = 0.0
    flat = x0.reshape(-1)
    for c in idx:
        xp = flat.copy()
        xm = flat.copy()
        xp[c] += step
        xm[c] -= step
        _, _, fp, kp = evaluate(xp.reshape(x0.shape))
        _, _, fm, km = evaluate(xm.reshape(x0.shape))
        if _crosses_kink(base_kinks, kp) or _crosses_kink(base_kinks, km):
            continue
        fd = (fp.item() - fm.item()) / (2.0 * step)
        an = analytic[c]
        worst = max(worst, abs(fd - an) / max(1.0, abs(an)))
    return worst


def _crosses_kink(base, other) -> bool:
    for a, b in zip(base, other):
        if a.shape != b.shape or np.any(a != b):
            return True
    return False
