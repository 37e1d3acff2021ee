"""Dense tensors and the differentiable primitives the network is built from.

Payloads are numpy arrays; float32 is the working precision and float64 is
used by the gradient-check tooling. Operations never mutate their inputs:
every op returns a fresh tensor and records a backward rule, so calling
``backward()`` on a scalar result fills the ``grad`` slot of every reachable
tensor with ``requires_grad=True``. The recorded graph is single-use; after a
backward pass the rules and their saved intermediates are released.

Activations follow the N x C x H x W layout, convolution kernels are
Cout x Cin x Kh x Kw (cross-correlation, zero padding), and transposed
convolution kernels are Cin x Cout x Kh x Kw so that ``conv_transpose2d`` is
the exact adjoint of ``conv2d`` with the same geometry.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import ArgumentError, DataError, NumericError, ShapeError, UsageError

# Recording state is thread-local: inference threads running under no_grad()
# must not switch recording off under a concurrently training thread.
_state = threading.local()


def grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording within the block (eval / benchmark paths)."""
    saved = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = saved


class Tensor:
    """A dense n-dimensional array with an optional gradient slot.

    Leaf tensors created with ``requires_grad=True`` carry an eagerly
    allocated zero gradient, so an unused parameter reads back an all-zero
    gradient after any backward pass. Interior nodes allocate their gradient
    lazily during backprop and drop it again once consumed.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        if arr.size == 0:
            raise ShapeError("tensor extents must be positive, got shape %r" % (arr.shape,))
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        if self.requires_grad:
            if self.grad is None:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad.fill(0)

    def assert_finite(self, context=""):
        if not np.isfinite(self.data).all():
            where = " in " + context if context else ""
            raise NumericError("non-finite values%s (shape %r)" % (where, self.shape))
        return self

    def sum(self):
        """Sum of all elements as a scalar tensor."""
        x = self
        out_data = x.data.sum()

        def rule(g):
            _accum(x, np.full_like(x.data, g))

        return _from_op(np.asarray(out_data), (x,), rule)

    def backward(self):
        """Reverse-mode pass from a scalar result.

        Visits each recorded node exactly once in reverse topological order,
        then releases every node's backward rule and saved intermediates so
        the graph cannot be replayed and its memory can be reclaimed.
        """
        if self.data.size != 1:
            raise UsageError(
                "backward() requires a scalar tensor, got shape %r" % (self.shape,))
        if self._backward is None:
            raise UsageError("backward() on a tensor with no recorded operations")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            rule = node._backward
            if rule is None:
                continue
            rule(node.grad)
            node._backward = None
            node._parents = ()
            if node is not self:
                node.grad = None

    def __repr__(self):
        return "Tensor(shape=%r, dtype=%s, requires_grad=%s)" % (
            self.shape, self.data.dtype.name, self.requires_grad)


def as_tensor(value, dtype=None):
    """Wrap an array-like as a non-differentiable tensor."""
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


def _from_op(data, parents, rule):
    out = Tensor(data)
    tracked = tuple(p for p in parents if isinstance(p, Tensor) and p.requires_grad)
    if tracked and grad_enabled():
        out.requires_grad = True
        out._parents = tracked
        out._backward = rule
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _pair(value, name):
    if isinstance(value, int):
        return value, value
    pair = tuple(int(v) for v in value)
    if len(pair) != 2:
        raise ArgumentError("%s must be an int or a pair, got %r" % (name, value))
    return pair


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_out_extent(size, k, s, p, d):
    return (size + 2 * p - (d * (k - 1) + 1)) // s + 1


def _im2col(xpad, kh, kw, sh, sw, dh, dw, ho, wo):
    # (N, C, Hp, Wp) -> (N, C*Kh*Kw, Ho*Wo); column order is (c, kh, kw).
    n, c = xpad.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xpad.dtype)
    for i in range(kh):
        hi = i * dh
        for j in range(kw):
            wj = j * dw
            cols[:, :, i, j] = xpad[:, :, hi:hi + sh * ho:sh, wj:wj + sw * wo:sw]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols, n, c, hp, wp, kh, kw, sh, sw, dh, dw, ho, wo):
    # Scatter-add the im2col layout back onto a zero (N, C, Hp, Wp) buffer.
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        hi = i * dh
        for j in range(kw):
            wj = j * dw
            out[:, :, hi:hi + sh * ho:sh, wj:wj + sw * wo:sw] += cols[:, :, i, j]
    return out


def _check_geometry(stride, padding, dilation):
    sh, sw = _pair(stride, "stride")
    ph, pw = _pair(padding, "padding")
    dh, dw = _pair(dilation, "dilation")
    if sh < 1 or sw < 1:
        raise ArgumentError("stride must be >= 1, got (%d, %d)" % (sh, sw))
    if dh < 1 or dw < 1:
        raise ArgumentError("dilation must be >= 1, got (%d, %d)" % (dh, dw))
    if ph < 0 or pw < 0:
        raise ArgumentError("padding must be >= 0, got (%d, %d)" % (ph, pw))
    return sh, sw, ph, pw, dh, dw


def conv2d(x, w, b=None, stride=1, padding=0, dilation=1):
    """2-d cross-correlation of (N, Cin, H, W) with a (Cout, Cin, Kh, Kw) kernel."""
    if x.data.ndim != 4:
        raise ShapeError("conv2d: input must be 4-d (N, C, H, W), got %r" % (x.shape,))
    if w.data.ndim != 4:
        raise ShapeError("conv2d: kernel must be 4-d (Cout, Cin, Kh, Kw), got %r" % (w.shape,))
    n, cin, h, wd = x.data.shape
    cout, cin_k, kh, kw = w.data.shape
    if cin_k != cin:
        raise ShapeError(
            "conv2d: input has %d channels (dim 1) but kernel expects %d" % (cin, cin_k))
    if b is not None and b.data.shape != (cout,):
        raise ShapeError(
            "conv2d: bias shape %r does not match %d output channels" % (b.shape, cout))
    sh, sw, ph, pw, dh, dw = _check_geometry(stride, padding, dilation)
    if h + 2 * ph < dh * (kh - 1) + 1:
        raise ShapeError(
            "conv2d: height %d (+2*%d pad) is smaller than the %d-dilated %d-kernel" % (h, ph, dh, kh))
    if wd + 2 * pw < dw * (kw - 1) + 1:
        raise ShapeError(
            "conv2d: width %d (+2*%d pad) is smaller than the %d-dilated %d-kernel" % (wd, pw, dw, kw))
    ho = _conv_out_extent(h, kh, sh, ph, dh)
    wo = _conv_out_extent(wd, kw, sw, pw, dw)

    pointwise = kh == 1 and kw == 1 and sh == 1 and sw == 1 and ph == 0 and pw == 0
    if pointwise:
        cols = x.data.reshape(n, cin, h * wd)
    else:
        xpad = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
        cols = _im2col(xpad, kh, kw, sh, sw, dh, dw, ho, wo)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wmat, cols).reshape(n, cout, ho, wo)
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1)

    def rule(g):
        gmat = g.reshape(n, cout, ho * wo)
        if w.requires_grad:
            gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
            _accum(w, gw.reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gmat)
            if pointwise:
                _accum(x, dcols.reshape(n, cin, h, wd))
            else:
                dxpad = _col2im(dcols, n, cin, h + 2 * ph, wd + 2 * pw,
                                kh, kw, sh, sw, dh, dw, ho, wo)
                _accum(x, dxpad[:, :, ph:ph + h, pw:pw + wd])

    return _from_op(out, (x, w, b), rule)


def conv_transpose2d(x, w, b=None, stride=1, padding=0, output_padding=0, dilation=1):
    """Transposed convolution, the adjoint of conv2d under the same geometry.

    ``x`` is (N, Cin, H, W) and ``w`` is (Cin, Cout, Kh, Kw); the output extent
    is (H-1)*stride - 2*padding + dilation*(Kh-1) + 1 + output_padding.
    """
    if x.data.ndim != 4:
        raise ShapeError("conv_transpose2d: input must be 4-d, got %r" % (x.shape,))
    if w.data.ndim != 4:
        raise ShapeError(
            "conv_transpose2d: kernel must be 4-d (Cin, Cout, Kh, Kw), got %r" % (w.shape,))
    n, cin, h, wd = x.data.shape
    cin_k, cout, kh, kw = w.data.shape
    if cin_k != cin:
        raise ShapeError(
            "conv_transpose2d: input has %d channels (dim 1) but kernel expects %d" % (cin, cin_k))
    if b is not None and b.data.shape != (cout,):
        raise ShapeError(
            "conv_transpose2d: bias shape %r does not match %d output channels" % (b.shape, cout))
    sh, sw, ph, pw, dh, dw = _check_geometry(stride, padding, dilation)
    oph, opw = _pair(output_padding, "output_padding")
    if not (0 <= oph < max(sh, dh) and 0 <= opw < max(sw, dw)):
        raise ArgumentError(
            "output_padding (%d, %d) must be smaller than stride or dilation" % (oph, opw))
    ho = (h - 1) * sh - 2 * ph + dh * (kh - 1) + 1 + oph
    wo = (wd - 1) * sw - 2 * pw + dw * (kw - 1) + 1 + opw
    if ho < 1 or wo < 1:
        raise ShapeError(
            "conv_transpose2d: output extent (%d, %d) is not positive" % (ho, wo))

    wmat = w.data.reshape(cin, cout * kh * kw)
    xmat = x.data.reshape(n, cin, h * wd)
    cols = np.matmul(wmat.T, xmat)
    buf = _col2im(cols, n, cout, ho + 2 * ph, wo + 2 * pw,
                  kh, kw, sh, sw, dh, dw, h, wd)
    out = buf[:, :, ph:ph + ho, pw:pw + wo]
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
    else:
        out = np.ascontiguousarray(out)

    def rule(g):
        gpad = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else g
        gcols = _im2col(gpad[:, :, :ho + 2 * ph - oph, :wo + 2 * pw - opw],
                        kh, kw, sh, sw, dh, dw, h, wd)
        if x.requires_grad:
            dx = np.matmul(wmat, gcols)
            _accum(x, dx.reshape(n, cin, h, wd))
        if w.requires_grad:
            gw = np.matmul(xmat, gcols.transpose(0, 2, 1)).sum(axis=0)
            _accum(w, gw.reshape(w.data.shape))
        if b is not None and b.requires_grad:
            _accum(b, g.sum(axis=(0, 2, 3)))

    return _from_op(out, (x, w, b), rule)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def _pool_prepare(x, window, stride, name):
    if x.data.ndim != 4:
        raise ShapeError("%s: input must be 4-d, got %r" % (name, x.shape))
    wh, ww = _pair(window, "window")
    sh, sw = _pair(stride, "stride")
    if (wh, ww) != (sh, sw):
        raise ArgumentError("%s: only non-overlapping pooling (window == stride) is supported" % name)
    n, c, h, wd = x.data.shape
    if wh > h or ww > wd:
        raise ArgumentError(
            "%s: window (%d, %d) larger than input (%d, %d)" % (name, wh, ww, h, wd))
    return n, c, h, wd, wh, ww


def max_pool2d(x, window=(2, 2), stride=(2, 2)):
    """Window max; backward routes the gradient to the first (row-major) max."""
    n, c, h, wd, wh, ww = _pool_prepare(x, window, stride, "max_pool2d")
    ho, wo = h // wh, wd // ww
    view = x.data[:, :, :ho * wh, :wo * ww].reshape(n, c, ho, wh, wo, ww)
    windows = view.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, wh * ww)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        if not x.requires_grad:
            return
        hot = (np.arange(wh * ww, dtype=idx.dtype) == idx[..., None])
        dwin = hot.astype(g.dtype) * g[..., None]
        dx = np.zeros_like(x.data)
        dx[:, :, :ho * wh, :wo * ww] = (
            dwin.reshape(n, c, ho, wo, wh, ww).transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, ho * wh, wo * ww))
        _accum(x, dx)

    return _from_op(np.ascontiguousarray(out), (x,), rule)


def avg_pool2d(x, window=(2, 2), stride=(2, 2)):
    """Window mean; backward spreads the gradient uniformly over the window."""
    n, c, h, wd, wh, ww = _pool_prepare(x, window, stride, "avg_pool2d")
    ho, wo = h // wh, wd // ww
    view = x.data[:, :, :ho * wh, :wo * ww].reshape(n, c, ho, wh, wo, ww)
    out = view.mean(axis=(3, 5))

    def rule(g):
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        spread = np.broadcast_to((g / (wh * ww))[:, :, :, None, :, None],
                                 (n, c, ho, wh, wo, ww))
        dx[:, :, :ho * wh, :wo * ww] = spread.reshape(n, c, ho * wh, wo * ww)
        _accum(x, dx)

    return _from_op(out, (x,), rule)


# ---------------------------------------------------------------------------
# normalization, activation, regularization
# ---------------------------------------------------------------------------

class RunningStats:
    """Per-channel running mean/variance consumed by batch_norm in eval mode."""

    __slots__ = ("mean", "var")

    def __init__(self, channels, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batch_norm(x, gamma, beta, running, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over the N, H, W axes.

    Train mode normalizes with batch statistics and folds them into
    ``running`` (biased variance for the normalization, unbiased for the
    running estimate); eval mode normalizes with the running statistics.
    """
    if x.data.ndim != 4:
        raise ShapeError("batch_norm: input must be 4-d, got %r" % (x.shape,))
    n, c, h, wd = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            "batch_norm: gamma/beta shapes %r/%r do not match %d channels"
            % (gamma.shape, beta.shape, c))
    if h * wd == 0:
        raise ArgumentError("batch_norm: zero spatial extent")
    m = n * h * wd
    if training:
        if m < 2:
            raise ArgumentError("batch_norm: train mode needs N*H*W >= 2, got %d" % m)
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running.mean *= 1.0 - momentum
        running.mean += momentum * mean
        running.var *= 1.0 - momentum
        running.var += momentum * var * (m / (m - 1))
    else:
        mean = running.mean.astype(x.data.dtype, copy=False)
        var = running.var.astype(x.data.dtype, copy=False)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def rule(g):
        dbeta = g.sum(axis=(0, 2, 3))
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        if gamma.requires_grad:
            _accum(gamma, dgamma)
        if beta.requires_grad:
            _accum(beta, dbeta)
        if x.requires_grad:
            scale = (gamma.data * inv).reshape(1, c, 1, 1)
            if training:
                dx = scale * (g
                              - dbeta.reshape(1, c, 1, 1) / m
                              - xhat * dgamma.reshape(1, c, 1, 1) / m)
            else:
                dx = scale * g
            _accum(x, dx)

    return _from_op(out, (x, gamma, beta), rule)


def relu(x):
    out = np.maximum(x.data, 0)

    def rule(g):
        _accum(x, g * (out > 0))

    return _from_op(out, (x,), rule)


def dropout(x, rate, training, rng=None):
    """Inverted dropout: survivors are scaled by 1/(1-rate); eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ArgumentError("dropout rate must be in [0, 1), got %r" % (rate,))
    if not training or rate == 0.0:
        def passthrough(g):
            _accum(x, g)
        return _from_op(x.data, (x,), passthrough)
    if rng is None:
        raise ArgumentError("dropout in train mode needs an rng")
    keep = (rng.random(x.data.shape) >= rate)
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.data.dtype)
    mask = keep.astype(x.data.dtype) * scale
    out = x.data * mask

    def rule(g):
        _accum(x, g * mask)

    return _from_op(out, (x,), rule)


def elementwise_add(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(
            "elementwise_add: shapes %r and %r differ" % (a.shape, b.shape))
    out = a.data + b.data

    def rule(g):
        _accum(a, g)
        _accum(b, g)

    return _from_op(out, (a, b), rule)


def concat_channels(tensors):
    """Concatenate along the channel axis; all inputs share N, H, W."""
    tensors = list(tensors)
    if not tensors:
        raise ArgumentError("concat_channels: need at least one tensor")
    first = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != 4 or s[0] != first[0] or s[2:] != first[2:]:
            raise ShapeError(
                "concat_channels: shape %r incompatible with %r (N, H, W must match)"
                % (s, first))
    out = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + [t.data.shape[1] for t in tensors])

    def rule(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            _accum(t, g[:, start:stop])

    return _from_op(out, tuple(tensors), rule)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax_channels(logits_data):
    """Channel-axis softmax of a raw (N, K, H, W) array, max-stabilized."""
    z = logits_data - logits_data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def weighted_cross_entropy(logits, labels, weights, ignore_index=255):
    """Mean over non-ignored pixels of weights[label] * (-log softmax[label]).

    ``labels`` is an integer (N, H, W) map; ``weights`` is a length-K vector
    of per-class loss weights. Pixels labeled ``ignore_index`` contribute
    nothing to the loss or the gradient.
    """
    if logits.data.ndim != 4:
        raise ShapeError(
            "weighted_cross_entropy: logits must be 4-d, got %r" % (logits.shape,))
    n, k, h, wd = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, wd):
        raise ShapeError(
            "weighted_cross_entropy: labels shape %r does not match logits %r"
            % (labels.shape, logits.shape))
    weights = np.asarray(weights, dtype=logits.data.dtype)
    if weights.shape != (k,):
        raise ShapeError(
            "weighted_cross_entropy: expected %d class weights, got %r" % (k, weights.shape))
    labels = labels.astype(np.int64, copy=False)
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        b, y, x = np.argwhere(bad)[0]
        raise DataError(
            "label %d at pixel (n=%d, y=%d, x=%d) is outside 0..%d and is not "
            "the ignore value %d" % (labels[b, y, x], b, y, x, k - 1, ignore_index))
    m = int(valid.sum())
    if m == 0:
        raise DataError("weighted_cross_entropy: every pixel is ignored")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    safe = np.where(valid, labels, 0)
    nll = -np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    wpix = weights[safe] * valid
    loss = (wpix * nll).sum() / m

    def rule(g):
        if not logits.requires_grad:
            return
        grad = np.exp(logp) * wpix[:, None]
        idx = np.ogrid[:n, :h, :wd]
        grad[idx[0], safe, idx[1], idx[2]] -= wpix
        _accum(logits, grad * (g / m))

    return _from_op(np.asarray(loss), (logits,), rule)
