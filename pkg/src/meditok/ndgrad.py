"""Reverse-mode automatic differentiation over float64 numpy arrays.

A small tape-based engine sized for desk-scale experiments: strict 64-bit
values, deterministic single-threaded backward, and a central-difference
gradient checker. The op set covers what the networks in this package
need (dense, conv, elementwise, reductions, gathers) and nothing more.

Conventions:
  * convolution is cross-correlation (kernels are not flipped); forward
    and backward use the same convention
  * repeated backward calls accumulate into ``.grad``; use `zero_grads`
    to reset
  * tensors are immutable once an op has consumed them
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

# When enabled every op output is checked for NaN/Inf. Cheap relative to
# the gemms at this scale; the test suite keeps it on.
FINITE_CHECKS = True

DEFAULT_FD_EPS = 1e-4


class Tensor:
    """A float64 array plus the graph edge that produced it.

    ``_rule`` maps the upstream gradient to per-parent gradients; leaf
    tensors have no parents and receive gradients in ``.grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_rule")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if FINITE_CHECKS and not np.all(np.isfinite(arr)):
            raise ValueError("tensor values must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._rule: Optional[Callable] = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=np.float64)
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError("operation produced non-finite values")
    out.data = arr
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._rule = rule
    else:
        out.requires_grad = False
        out._parents = ()
        out._rule = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), rule)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), rule)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    p = float(exponent)

    def rule(g):
        return (g * p * np.power(a.data, p - 1.0),)

    return _make(np.power(a.data, p), (a,), rule)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0

    def rule(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), rule)


def leaky_relu(a, negative_slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0
    slope = float(negative_slope)

    def rule(g):
        return (g * np.where(mask, 1.0, slope),)

    return _make(np.where(mask, a.data, slope * a.data), (a,), rule)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def rule(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), rule)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def rule(g):
        return (g * out,)

    return _make(out, (a,), rule)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def rule(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), rule)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)

    def rule(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), rule)


# -- reductions / shape ------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)

    def rule(g):
        if not keepdims:
            shape = list(a.shape)
            for ax in axes:
                shape[ax] = 1
            g = g.reshape(shape)
        return (np.broadcast_to(g, a.shape),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), rule)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]

    def rule(g):
        if not keepdims:
            shape = list(a.shape)
            for ax in axes:
                shape[ax] = 1
            g = g.reshape(shape)
        return (np.broadcast_to(g, a.shape) / count,)

    return _make(a.data.mean(axis=axes, keepdims=keepdims), (a,), rule)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)

    def rule(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), rule)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def rule(g):
        return (g.transpose(inverse),)

    return _make(a.data.transpose(axes), (a,), rule)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of one axis; backward zero-pads the complement."""
    a = _as_tensor(a)
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ValueError(f"narrow [{start}, {start + length}) out of bounds for axis {axis} "
                         f"of shape {a.shape}")
    index = tuple(slice(None) if i != axis else slice(start, start + length) for i in range(a.ndim))

    def rule(g):
        out = np.zeros(a.shape)
        out[index] = g
        return (out,)

    return _make(a.data[index], (a,), rule)


class _DetachFreezer:
    """Records detach outputs on one pass and replays them on later passes.

    Stop-gradient semantics treat detached values as constants; finite
    differences can only agree with the analytic gradient if re-evaluations
    hold those constants fixed. ``grad_check(freeze_detach=True)`` uses this.
    Call order must be deterministic (pure single-threaded functions).
    """

    def __init__(self):
        self.mode = "idle"   # idle | record | replay
        self.values: list[np.ndarray] = []
        self.cursor = 0

    def start_recording(self):
        self.mode, self.values, self.cursor = "record", [], 0

    def start_replay(self):
        if self.mode not in ("record", "replay"):
            raise RuntimeError("nothing recorded to replay")
        self.mode, self.cursor = "replay", 0

    def stop(self):
        self.mode, self.values, self.cursor = "idle", [], 0


_freezer = _DetachFreezer()


def detach(a: Tensor) -> Tensor:
    """Stop-gradient: shares values, contributes zero gradient upstream."""
    out = Tensor.__new__(Tensor)
    if _freezer.mode == "record":
        # snapshot: recorded values must not alias buffers grad_check perturbs
        frozen = a.data.copy()
        _freezer.values.append(frozen)
        out.data = frozen
    elif _freezer.mode == "replay":
        if _freezer.cursor >= len(_freezer.values):
            raise RuntimeError("detach replay exhausted; function is not replay-pure")
        out.data = _freezer.values[_freezer.cursor]
        _freezer.cursor += 1
    else:
        out.data = a.data
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._rule = None
    return out


# -- linear algebra ----------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), rule)


def bmm(a, b) -> Tensor:
    """Stacked matrix product over identical leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 3 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"bmm shape mismatch: {a.shape} x {b.shape}")

    def rule(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make(a.data @ b.data, (a, b), rule)


def gather_rows(table, ids) -> Tensor:
    """Select rows of a 2-D table; backward scatter-adds into the table."""
    table = _as_tensor(table)
    if table.ndim != 2:
        raise ValueError(f"gather_rows needs a 2-D table, got shape {table.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"gather index out of range [0, {table.shape[0]}): "
            f"min {ids.min()}, max {ids.max()}"
        )

    def rule(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), rule)


# -- convolution -------------------------------------------------------

def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Zero-pad the spatial axes of a channel-last (N,H,W,C) array."""
    if ph == 0 and pw == 0:
        return x
    n, h, w, c = x.shape
    out = np.zeros((n, h + 2 * ph, w + 2 * pw, c))
    out[:, ph:ph + h, pw:pw + w, :] = x
    return out


def _corr2d(x: np.ndarray, wmat: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Valid cross-correlation of padded channel-last input with flattened kernels.

    ``wmat`` is (kh*kw*c_in, c_out). Returns (output (N,H',W',C_out), im2col
    matrix); the matrix is reused for kernel gradients. Channel-last layout
    keeps the im2col copy contiguous, which is what makes this fast.
    """
    n, hp, wp, c_in = x.shape
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]              # (n, h', w', c, kh, kw)
    cols = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(
        n * h_out * w_out, kh * kw * c_in)
    out = (cols @ wmat).reshape(n, h_out, w_out, wmat.shape[1])
    return out, cols


def _kernels_to_mat(kernels: np.ndarray) -> np.ndarray:
    # (c_out, c_in, kh, kw) -> (kh*kw*c_in, c_out), matching im2col order
    c_out, c_in, kh, kw = kernels.shape
    return np.ascontiguousarray(kernels.transpose(2, 3, 1, 0)).reshape(kh * kw * c_in, c_out)


def conv2d_nhwc(inp, kernels, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over channel-last input (H,W,C) or (N,H,W,C)."""
    inp, kernels = _as_tensor(inp), _as_tensor(kernels)
    squeeze = inp.ndim == 3
    x = inp.data[None] if squeeze else inp.data
    if x.ndim != 4 or kernels.ndim != 4:
        raise ValueError(f"conv2d expects 3/4-D input and 4-D kernels, got {inp.shape} and {kernels.shape}")
    n, h, w, c_in = x.shape
    c_out, ck, kh, kw = kernels.shape
    if ck != c_in:
        raise ValueError(f"conv2d channel mismatch: input has {c_in}, kernels expect {ck}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1

    xp = _pad_hw(x, padding, padding)
    wmat = _kernels_to_mat(kernels.data)
    out, cols = _corr2d(xp, wmat, kh, kw, stride)

    def rule(g):
        if squeeze:
            g = g[None]
        gmat = g.reshape(n * h_out * w_out, c_out)
        gw = (gmat.T @ cols).reshape(c_out, kh, kw, c_in).transpose(0, 3, 1, 2)
        # input gradient: one gemm back to patch space, then scatter-add the
        # kernel offsets (channel-last keeps both steps contiguous)
        gcols = (gmat @ wmat.T).reshape(n, h_out, w_out, kh, kw, c_in)
        gxp = np.zeros((n, hp, wp, c_in))
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, padding:padding + h, padding:padding + w, :] if padding else gxp
        return (gx[0] if squeeze else gx), gw

    return _make(out[0] if squeeze else out, (inp, kernels), rule)


def conv2d(inp, kernels, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (C,H,W) or (N,C,H,W) input with (C_out,C,kh,kw) kernels.

    Channel-first wrapper over the channel-last core; H' = (H+2p-kh)//stride + 1.
    """
    inp = _as_tensor(inp)
    if inp.ndim == 3:
        out = conv2d_nhwc(transpose(inp, (1, 2, 0)), kernels, stride, padding)
        return transpose(out, (2, 0, 1))
    if inp.ndim == 4:
        out = conv2d_nhwc(transpose(inp, (0, 2, 3, 1)), kernels, stride, padding)
        return transpose(out, (0, 3, 1, 2))
    raise ValueError(f"conv2d expects 3/4-D input, got {inp.shape}")


def upsample_nearest2x(a) -> Tensor:
    """Nearest-neighbour 2x upsampling of the trailing two axes."""
    a = _as_tensor(a)
    out = a.data.repeat(2, axis=-2).repeat(2, axis=-1)
    h, w = a.shape[-2], a.shape[-1]

    def rule(g):
        g = g.reshape(g.shape[:-2] + (h, 2, w, 2))
        return (g.sum(axis=(-3, -1)),)

    return _make(out, (a,), rule)


def upsample_nearest2x_nhwc(a) -> Tensor:
    """Nearest-neighbour 2x upsampling of the spatial axes of (..., H, W, C)."""
    a = _as_tensor(a)
    out = a.data.repeat(2, axis=-3).repeat(2, axis=-2)
    h, w = a.shape[-3], a.shape[-2]
    c = a.shape[-1]

    def rule(g):
        g = g.reshape(g.shape[:-3] + (h, 2, w, 2, c))
        return (g.sum(axis=(-4, -2)),)

    return _make(out, (a,), rule)


# -- classification loss -----------------------------------------------

def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean over rows of -log softmax(logits)[target], max-stabilized."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError(f"softmax_cross_entropy expects 2-D logits, got {logits.shape}")
    n, v = logits.shape
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (n,):
        raise ValueError(f"expected {n} targets, got shape {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target out of range [0, {v}): min {t.min()}, max {t.max()}")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    probs = expz / expz.sum(axis=1, keepdims=True)
    logp = shifted - np.log(expz.sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), t].mean()

    def rule(g):
        gl = probs.copy()
        gl[np.arange(n), t] -= 1.0
        return (g * gl / n,)

    return _make(loss, (logits,), rule)


# -- backward pass -----------------------------------------------------

class Tape:
    """Topologically ordered record of the op nodes reachable from a root.

    Inputs always precede the ops that consume them; backward replay over
    the reversed tape visits each node exactly once.
    """

    def __init__(self, root: Tensor):
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> dict:
    """Backpropagate from a scalar; returns {leaf tensor: gradient}.

    Gradients accumulate into ``.grad`` on leaf tensors across calls.
    If ``leaves`` is given, each listed leaf is guaranteed an entry, with
    zeros when the loss does not reach it.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to backpropagate")

    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    reached: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._rule is not None:
            for parent, pg in zip(node._parents, node._rule(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        else:
            node.grad = np.array(g, dtype=np.float64) if node.grad is None else node.grad + g
            reached[id(node)] = node

    result = {node: node.grad for node in reached.values()}
    if leaves is not None:
        for leaf in leaves:
            if id(leaf) not in reached:
                if leaf.grad is None:
                    leaf.grad = np.zeros_like(leaf.data)
                result[leaf] = leaf.grad
    return result


def gradient(output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar w.r.t. selected tensors without touching .grad.

    Traversal is pruned to paths between ``wrt`` and the output, so partial
    gradients (e.g. w.r.t. one layer) stay cheap.
    """
    if output.data.shape != ():
        raise ValueError(f"gradient needs a scalar output, got shape {output.shape}")
    targets = {id(t) for t in wrt}
    if not output.requires_grad:
        return [np.zeros_like(t.data) for t in wrt]

    tape = Tape(output)
    # nodes whose value depends on at least one target
    needed: set[int] = set()
    for node in tape.nodes:
        if id(node) in targets or any(id(p) in needed for p in node._parents):
            needed.add(id(node))

    grads: dict[int, np.ndarray] = {id(output): np.ones(())}
    for node in reversed(tape.nodes):
        if id(node) not in grads:
            continue
        g = grads[id(node)] if id(node) in targets else grads.pop(id(node))
        if node._rule is None or not any(id(p) in needed for p in node._parents):
            continue
        for parent, pg in zip(node._parents, node._rule(g)):
            if pg is None or id(parent) not in needed:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return [np.asarray(grads.get(id(t), np.zeros_like(t.data)), dtype=np.float64) for t in wrt]


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = DEFAULT_FD_EPS,
               freeze_detach: bool = False) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must be a pure function of the given tensors returning a scalar.
    Error per coordinate is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).

    With ``freeze_detach`` the stop-gradient outputs recorded on the analytic
    pass are held constant during the difference evaluations, so functions
    containing detach are checked under stop-gradient semantics (a detached
    value is, by definition, a constant of the differentiation).
    """
    for t in inputs:
        if not np.all(np.isfinite(t.data)):
            raise ValueError("grad_check inputs must be finite")

    try:
        if freeze_detach:
            _freezer.start_recording()
        out = fn(*inputs)
        if not isinstance(out, Tensor) or out.data.shape != ():
            raise ValueError("grad_check requires fn to return a scalar Tensor")
        zero_grads(inputs)
        backward(out, leaves=inputs)
        analytic = [np.array(t.grad, dtype=np.float64) for t in inputs]
        if freeze_detach:
            _freezer.start_replay()

        def evaluate() -> float:
            if freeze_detach:
                _freezer.start_replay()
            return fn(*inputs).item()

        worst = 0.0
        for t, ana in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            ana_flat = ana.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = evaluate()
                flat[i] = orig - eps
                f_minus = evaluate()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                err = abs(ana_flat[i] - numeric) / max(1e-8, abs(ana_flat[i]) + abs(numeric))
                worst = max(worst, err)
    finally:
        if freeze_detach:
            _freezer.stop()
    zero_grads(inputs)
    return worst
