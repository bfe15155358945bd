"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array plus a gradient accumulator and a closure
that knows how to push gradients to its parents.  Calling ``backward()``
on a scalar loss walks the recorded graph in reverse topological order;
each pass computes a full single-pass gradient and adds it onto ``grad``,
so repeated calls accumulate additively.

All neural-network operations used by the encoder/decoder live here as
module-level functions (conv2d, maxpool2, batch_norm, ...).  Everything
is float64: desk-scale problems make speed a non-issue and the gradient
checks in the test suite need the precision.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ParameterError, ShapeError


class Tensor:
    """N-d float64 array participating in a reverse-mode gradient tape."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        # Eagerly allocated so tensors off the path to the loss read as
        # all-zero gradients after backward().
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self._parents: tuple = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction helpers --------------------------------------

    @staticmethod
    def _lift(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=np.float64))

    def _make(self, values, parents, backward_fn) -> "Tensor":
        out = Tensor(values, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        return out

    # -- elementwise arithmetic (same-shape or scalar operands) ----------

    def __add__(self, other):
        other = self._lift(other)
        _check_broadcast(self, other)
        out_values = self.values + other.values

        def push(g, add):
            if self.requires_grad:
                add(self, _reduce_to(g, self.shape))
            if other.requires_grad:
                add(other, _reduce_to(g, other.shape))

        return self._make(out_values, (self, other), push)

    __radd__ = __add__

    def __mul__(self, other):
        other = self._lift(other)
        _check_broadcast(self, other)
        out_values = self.values * other.values

        def push(g, add):
            if self.requires_grad:
                add(self, _reduce_to(g * other.values, self.shape))
            if other.requires_grad:
                add(other, _reduce_to(g * self.values, other.shape))

        return self._make(out_values, (self, other), push)

    __rmul__ = __mul__

    def __neg__(self):
        def push(g, add):
            if self.requires_grad:
                add(self, -g)

        return self._make(-self.values, (self,), push)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __truediv__(self, other):
        other = self._lift(other)
        _check_broadcast(self, other)
        out_values = self.values / other.values

        def push(g, add):
            if self.requires_grad:
                add(self, _reduce_to(g / other.values, self.shape))
            if other.requires_grad:
                add(other, _reduce_to(-g * self.values / (other.values ** 2), other.shape))

        return self._make(out_values, (self, other), push)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ContractError("only scalar exponents are supported")
        out_values = self.values ** exponent

        def push(g, add):
            if self.requires_grad:
                add(self, g * exponent * self.values ** (exponent - 1))

        return self._make(out_values, (self,), push)

    def log(self):
        out_values = np.log(self.values)

        def push(g, add):
            if self.requires_grad:
                add(self, g / self.values)

        return self._make(out_values, (self,), push)

    def sum(self):
        out_values = self.values.sum()

        def push(g, add):
            if self.requires_grad:
                add(self, np.broadcast_to(g, self.shape))

        return self._make(out_values, (self,), push)

    def mean(self):
        n = self.values.size
        out_values = self.values.sum() / n

        def push(g, add):
            if self.requires_grad:
                add(self, np.broadcast_to(g / n, self.shape))

        return self._make(out_values, (self,), push)

    def reshape(self, *shape):
        out_values = self.values.reshape(*shape)

        def push(g, add):
            if self.requires_grad:
                add(self, g.reshape(self.shape))

        return self._make(out_values, (self,), push)

    # -- reverse pass -----------------------------------------------------

    def backward(self):
        """Accumulate gradients of this scalar into every tensor on its tape."""
        if self.values.size != 1:
            raise ContractError(f"backward() requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topo_order(self)
        messages = {id(self): np.ones_like(self.values)}

        def add(tensor, g):
            buf = messages.get(id(tensor))
            if buf is None:
                # Copy: ops are free to hand over views or broadcasts.
                messages[id(tensor)] = np.array(g, dtype=np.float64)
            else:
                buf += g

        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn(messages[id(node)], add)
        for node in order:
            node.grad += messages[id(node)]


def _topo_order(root: Tensor) -> list:
    """Iterative post-order DFS over the recorded graph (parents first)."""
    order, visited = [], {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        advanced = False
        for parent in parents:
            if id(parent) not in visited and parent.requires_grad:
                visited.add(id(parent))
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _check_broadcast(a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}") from None


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Parameter:
    """A trainable tensor plus a freeze flag.

    Frozen parameters are skipped by optimizers; their values must be
    bit-identical before and after any optimizer step.
    """

    __slots__ = ("tensor", "frozen")

    def __init__(self, values, frozen: bool = False):
        self.tensor = Tensor(values, requires_grad=True)
        self.frozen = frozen

    @property
    def values(self):
        return self.tensor.values

    @property
    def grad(self):
        return self.tensor.grad

    @property
    def shape(self):
        return self.tensor.shape

    def zero_grad(self):
        self.tensor.zero_grad()

    def __repr__(self):
        return f"Parameter(shape={self.shape}, frozen={self.frozen})"


class BatchNormState:
    """Per-channel running mean/variance, updated in train mode only."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=np.float64)
        self.var = np.ones(channels, dtype=np.float64)

    def copy(self) -> "BatchNormState":
        out = BatchNormState(self.mean.size)
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


def _require_mode(mode: str):
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")


# -- convolution ----------------------------------------------------------


def _im2col3(padded: np.ndarray) -> np.ndarray:
    """(B, C, H+2, W+2) -> (B, C*9, H*W) patch matrix for 3x3 windows."""
    b, c, hp, wp = padded.shape
    h, w = hp - 2, wp - 2
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    return windows.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * 9, h * w)


def _col2im3(cols: np.ndarray, x_shape: tuple) -> np.ndarray:
    """Scatter-add the patch-matrix gradient back to input shape."""
    b, c, h, w = x_shape
    blocks = cols.reshape(b, c, 3, 3, h, w)
    gpad = np.zeros((b, c, h + 2, w + 2), dtype=np.float64)
    for ki in range(3):
        for kj in range(3):
            gpad[:, :, ki:ki + h, kj:kj + w] += blocks[:, :, ki, kj]
    return gpad[:, :, 1:h + 1, 1:w + 1]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1 (spatial dims kept)."""
    if x.values.ndim != 4:
        raise ShapeError(f"conv2d expects (B,C,H,W) input, got {x.shape}")
    b, cin, h, w = x.shape
    if weight.values.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d expects (Cout,Cin,3,3) weight, got {weight.shape}")
    cout = weight.shape[0]
    if weight.shape[1] != cin:
        raise ShapeError(f"channel mismatch: input has {cin}, weight expects {weight.shape[1]}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")

    padded = np.pad(x.values, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col3(padded)
    w2 = weight.values.reshape(cout, cin * 9)
    out_values = (np.matmul(w2, cols) + bias.values.reshape(1, cout, 1)).reshape(b, cout, h, w)

    def push(g, add):
        g2 = g.reshape(b, cout, h * w)
        if bias.requires_grad:
            add(bias, g2.sum(axis=(0, 2)))
        if weight.requires_grad:
            # One dgemm over the flattened batch; the patch matrix is
            # recomputed rather than stored, trading compute for memory.
            cols_b = _im2col3(padded)
            gf = g2.transpose(1, 0, 2).reshape(cout, b * h * w)
            cf = cols_b.transpose(1, 0, 2).reshape(cin * 9, b * h * w)
            add(weight, (gf @ cf.T).reshape(weight.shape))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2)
            add(x, _col2im3(gcols, x.shape))

    return x._make(out_values, (x, weight, bias), push)


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel linear map over channels."""
    if x.values.ndim != 4:
        raise ShapeError(f"conv1x1 expects (B,C,H,W) input, got {x.shape}")
    b, cin, h, w = x.shape
    if weight.values.ndim != 4 or weight.shape[2:] != (1, 1):
        raise ShapeError(f"conv1x1 expects (Cout,Cin,1,1) weight, got {weight.shape}")
    cout = weight.shape[0]
    if weight.shape[1] != cin:
        raise ShapeError(f"channel mismatch: input has {cin}, weight expects {weight.shape[1]}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")

    x2 = x.values.reshape(b, cin, h * w)
    w2 = weight.values.reshape(cout, cin)
    out_values = (np.matmul(w2, x2) + bias.values.reshape(1, cout, 1)).reshape(b, cout, h, w)

    def push(g, add):
        g2 = g.reshape(b, cout, h * w)
        if bias.requires_grad:
            add(bias, g2.sum(axis=(0, 2)))
        if weight.requires_grad:
            gf = g2.transpose(1, 0, 2).reshape(cout, b * h * w)
            xf = x2.transpose(1, 0, 2).reshape(cin, b * h * w)
            add(weight, (gf @ xf.T).reshape(weight.shape))
        if x.requires_grad:
            add(x, np.matmul(w2.T, g2).reshape(x.shape))

    return x._make(out_values, (x, weight, bias), push)


def maxpool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling; ties route the gradient to the
    first element of the window in row-major order."""
    if x.values.ndim != 4:
        raise ShapeError(f"maxpool2 expects (B,C,H,W) input, got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 requires even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    windows = (x.values.reshape(b, c, h2, 2, w2, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(b, c, h2, w2, 4))
    # argmax picks the first maximum, which is exactly the declared tie rule
    idx = windows.argmax(axis=-1)
    out_values = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def push(g, add):
        if x.requires_grad:
            gwin = np.zeros((b, c, h2, w2, 4), dtype=np.float64)
            np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
            add(x, (gwin.reshape(b, c, h2, w2, 2, 2)
                    .transpose(0, 1, 2, 4, 3, 5)
                    .reshape(b, c, h, w)))

    return x._make(out_values, (x,), push)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               mode: str, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization with affine transform.

    Train mode normalizes by the batch statistics (population variance)
    and updates the running stats in place; eval mode uses the running
    stats and leaves them untouched.
    """
    _require_mode(mode)
    if x.values.ndim != 4:
        raise ShapeError(f"batch_norm expects (B,C,H,W) input, got {x.shape}")
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    n = b * h * w

    if mode == "train":
        if n < 2:
            raise ShapeError("train-mode batch_norm needs at least 2 values per channel")
        mean = x.values.mean(axis=(0, 2, 3))
        var = x.values.var(axis=(0, 2, 3))  # population form
        state.mean += momentum * (mean - state.mean)
        state.var += momentum * (var - state.var)
    else:
        mean = state.mean
        var = state.var

    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mean.reshape(1, c, 1, 1)) * ivar.reshape(1, c, 1, 1)
    out_values = gamma.values.reshape(1, c, 1, 1) * xhat + beta.values.reshape(1, c, 1, 1)

    def push(g, add):
        if beta.requires_grad:
            add(beta, g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            add(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxhat = g * gamma.values.reshape(1, c, 1, 1)
            if mode == "train":
                # d/dx of (x - mu)/sqrt(var + eps) where mu, var are batch
                # statistics of x itself (population variance).
                sum_g = gxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                add(x, (ivar.reshape(1, c, 1, 1) / n) * (n * gxhat - sum_g - xhat * sum_gx))
            else:
                add(x, gxhat * ivar.reshape(1, c, 1, 1))

    return x._make(out_values, (x, gamma, beta), push)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is defined as 0."""
    mask = x.values > 0
    out_values = np.where(mask, x.values, 0.0)

    def push(g, add):
        if x.requires_grad:
            add(x, g * mask)

    return x._make(out_values, (x,), push)


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic function, numerically stable for large |x|."""
    v = x.values
    out_values = np.empty_like(v)
    pos = v >= 0
    out_values[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ez = np.exp(v[~pos])
    out_values[~pos] = ez / (1.0 + ez)

    def push(g, add):
        if x.requires_grad:
            add(x, g * out_values * (1.0 - out_values))

    return x._make(out_values, (x,), push)


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: train mode zeroes elements with probability
    ``rate`` and scales survivors by 1/(1-rate); eval mode is identity."""
    _require_mode(mode)
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    out_values = x.values * keep * scale

    def push(g, add):
        if x.requires_grad:
            add(x, g * keep * scale)

    return x._make(out_values, (x,), push)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map (B,F) x (O,F) -> (B,O), no activation."""
    if x.values.ndim != 2:
        raise ShapeError(f"linear expects (B,F) input, got {x.shape}")
    if weight.values.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"weight shape {weight.shape} incompatible with input {x.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
    out_values = x.values @ weight.values.T + bias.values

    def push(g, add):
        if bias.requires_grad:
            add(bias, g.sum(axis=0))
        if weight.requires_grad:
            add(weight, g.T @ x.values)
        if x.requires_grad:
            add(x, g @ weight.values)

    return x._make(out_values, (x, weight, bias), push)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling; backward sums each 2x2 replica block."""
    if x.values.ndim != 4:
        raise ShapeError(f"upsample2 expects (B,C,H,W) input, got {x.shape}")
    b, c, h, w = x.shape
    out_values = np.repeat(np.repeat(x.values, 2, axis=2), 2, axis=3)

    def push(g, add):
        if x.requires_grad:
            add(x, g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))

    return x._make(out_values, (x,), push)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; gradient splits back to sources."""
    if a.values.ndim != 4 or b.values.ndim != 4:
        raise ShapeError("concat_channels expects (B,C,H,W) inputs")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"batch/spatial mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out_values = np.concatenate([a.values, b.values], axis=1)

    def push(g, add):
        if a.requires_grad:
            add(a, g[:, :ca])
        if b.requires_grad:
            add(b, g[:, ca:])

    return a._make(out_values, (a, b), push)
