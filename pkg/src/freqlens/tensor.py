"""Dense float32 tensors with reverse-mode autodiff, sized for small CNNs on CPU.

The graph is built eagerly: every op returns a new Tensor holding a closure
that knows how to push gradients to its parents. backward() walks the graph
once in reverse topological order and then consumes it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

_EPS_DENOM = 1e-8


def _as_array(data, like=None):
    """Coerce to a float ndarray. float64 arrays are preserved (used by the
    finite-difference oracle); everything else becomes float32."""
    arr = np.asarray(data)
    if arr.dtype == np.float64:
        return arr
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A value in the compute graph.

    data is row-major float32 (float64 allowed for oracle runs), grad is a
    same-shape buffer allocated as zeros for requires_grad leaves.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = ()
        self._backward_fn = None
        self._consumed = False

    # -- graph plumbing -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return self._backward_fn is None and not self._consumed

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def backward(self):
        """Populate .grad on every reachable requires_grad tensor.

        The graph is single-use: a second backward through any consumed node
        raises RuntimeError.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise RuntimeError("backward called twice on a consumed graph")

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
            if node._consumed:
                raise RuntimeError("backward called twice on a consumed graph")
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)
                node._backward_fn = None
                node._parents = ()
                node._consumed = True

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def item(self):
        return float(self.data)


def _node(data, parents, backward_fn):
    """Internal: build an op output wired into the graph."""
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _wants(t: Tensor) -> bool:
    return t.requires_grad


# -- elementwise and linear algebra ------------------------------------


def add(a: Tensor, b) -> Tensor:
    """a + b for equal shapes, a bias vector, or a python scalar.

    Bias broadcasting is limited by design: (B,N)+(N,) and (B,C,H,W)+(C,)
    only; anything else must be reshaped explicitly.
    """
    if not isinstance(b, Tensor):
        c = float(b)
        out_data = a.data + np.asarray(c, dtype=a.data.dtype)

        def back_scalar(g):
            if _wants(a):
                a._accumulate(g)

        return _node(out_data, (a,), back_scalar)

    if a.shape == b.shape:
        def back_same(g):
            if _wants(a):
                a._accumulate(g)
            if _wants(b):
                b._accumulate(g)

        return _node(a.data + b.data, (a, b), back_same)

    # bias-add forms
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        reduce_axes = (0,)
        bias = b.data
    elif a.data.ndim == 4 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        reduce_axes = (0, 2, 3)
        bias = b.data.reshape(1, -1, 1, 1)
    else:
        raise ValueError(f"add: unsupported shapes {a.shape} + {b.shape}")

    def back_bias(g):
        if _wants(a):
            a._accumulate(g)
        if _wants(b):
            b._accumulate(g.sum(axis=reduce_axes).reshape(b.shape))

    return _node(a.data + bias, (a, b), back_bias)


def neg(a: Tensor) -> Tensor:
    def back(g):
        if _wants(a):
            a._accumulate(-g)

    return _node(-a.data, (a,), back)


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))

    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")

    def back(g):
        if _wants(a):
            a._accumulate(g)
        if _wants(b):
            b._accumulate(-g)

    return _node(a.data - b.data, (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product (equal shapes) or scaling by a python scalar."""
    if not isinstance(b, Tensor):
        c = float(b)

        def back_scalar(g):
            if _wants(a):
                a._accumulate(g * np.asarray(c, dtype=g.dtype))

        return _node(a.data * np.asarray(c, dtype=a.data.dtype), (a,), back_scalar)

    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def back(g):
        if _wants(a):
            a._accumulate(g * b.data)
        if _wants(b):
            b._accumulate(g * a.data)

    return _node(a.data * b.data, (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")

    def back(g):
        if _wants(a):
            a._accumulate(g @ b.data.T)
        if _wants(b):
            b._accumulate(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), back)


def reshape(a: Tensor, shape) -> Tensor:
    def back(g):
        if _wants(a):
            a._accumulate(g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), back)


def tsum(a: Tensor) -> Tensor:
    def back(g):
        if _wants(a):
            a._accumulate(np.full_like(a.data, g))

    return _node(a.data.sum(), (a,), back)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def back(g):
        if _wants(a):
            a._accumulate(np.full_like(a.data, g / n))

    return _node(a.data.mean(), (a,), back)


# -- activations ---------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def back(g):
        if _wants(a):
            a._accumulate(g * (out_data > 0))

    return _node(out_data, (a,), back)


def hardtanh(a: Tensor, lo=-1.0, hi=1.0) -> Tensor:
    mask = (a.data > lo) & (a.data < hi)

    def back(g):
        if _wants(a):
            a._accumulate(g * mask)

    return _node(np.clip(a.data, lo, hi), (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))

    def back(g):
        if _wants(a):
            a._accumulate(g * s * (1.0 - s))

    return _node(s, (a,), back)


# -- convolution and friends ---------------------------------------------


def _pad_nchw(x, padding):
    if not padding:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, :, padding:padding + h, padding:padding + w] = x
    return out


def _im2col(xp, kh, kw, stride):
    """Patch matrix (C*kh*kw, B*Ho*Wo) gathered as k*k strided block copies;
    much cheaper than transposing a 6-D window view."""
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((c, kh, kw, b, ho, wo), dtype=xp.dtype)
    for di in range(kh):
        for dj in range(kw):
            cols[:, di, dj] = xp[:, :, di:di + stride * ho:stride,
                                 dj:dj + stride * wo:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, b * ho * wo), ho, wo


def conv2d(x: Tensor, w: Tensor, stride=1, padding=0) -> Tensor:
    """Cross-correlation of NCHW input with OIHW kernels, no bias."""
    b, c, h, wdim = x.shape
    co, ci, kh, kw = w.shape
    if c != ci:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if h + 2 * padding < kh or wdim + 2 * padding < kw:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wdim}")

    cols, ho, wo = _im2col(_pad_nchw(x.data, padding), kh, kw, stride)
    wmat = w.data.reshape(co, ci * kh * kw)
    out = np.ascontiguousarray((wmat @ cols).reshape(co, b, ho, wo).transpose(1, 0, 2, 3))

    def back(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, b * ho * wo)
        if _wants(w):
            w._accumulate((gmat @ cols.T).reshape(w.shape))
        if _wants(x):
            gcols = (wmat.T @ gmat).reshape(ci, kh, kw, b, ho, wo)
            hp, wp = h + 2 * padding, wdim + 2 * padding
            gxp = np.zeros((b, c, hp, wp), dtype=g.dtype)
            for di in range(kh):
                for dj in range(kw):
                    gxp[:, :, di:di + stride * ho:stride,
                        dj:dj + stride * wo:stride] += gcols[:, di, dj].transpose(1, 0, 2, 3)
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + wdim]
            x._accumulate(gxp)

    return _node(out, (x, w), back)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean, running_var,
                 training: bool, momentum=0.1, eps=1e-5) -> Tensor:
    """Per-channel batchnorm over (B, H, W).

    Training mode normalizes with batch statistics and updates the running
    buffers in place (biased variance); eval mode uses the buffers and is a
    plain affine map, so input gradients stay available for attacks.
    """
    gview = gamma.data.reshape(1, -1, 1, 1)
    bview = beta.data.reshape(1, -1, 1, 1)

    if training:
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(-1)
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

        def back_train(g):
            if _wants(gamma):
                gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            if _wants(beta):
                beta._accumulate(g.sum(axis=(0, 2, 3)))
            if _wants(x):
                dxhat = g * gview
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                x._accumulate(inv_std / m * (m * dxhat - s1 - xhat * s2))

        return _node(gview * xhat + bview, (x, gamma, beta), back_train)

    inv_std = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)

    def back_eval(g):
        if _wants(gamma):
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if _wants(beta):
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if _wants(x):
            x._accumulate(g * (gview * inv_std.reshape(1, -1, 1, 1)))

    return _node(gview * xhat + bview, (x, gamma, beta), back_eval)


def global_avg_pool(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def back(g):
        if _wants(x):
            x._accumulate(np.broadcast_to((g * scale)[:, :, None, None], x.shape).astype(g.dtype))

    return _node(x.data.mean(axis=(2, 3)), (x,), back)


def downsample_pad(x: Tensor, stride: int, out_channels: int) -> Tensor:
    """Parameter-free residual shortcut: strided subsample + zero channel pad."""
    b, c, h, w = x.shape
    if out_channels < c:
        raise ValueError("downsample_pad cannot shrink channels")
    sub = x.data[:, :, ::stride, ::stride]
    out = np.zeros((b, out_channels, sub.shape[2], sub.shape[3]), dtype=x.data.dtype)
    out[:, :c] = sub

    def back(g):
        if _wants(x):
            gx = np.zeros_like(x.data)
            gx[:, :, ::stride, ::stride] = g[:, :c]
            x._accumulate(gx)

    return _node(out, (x,), back)


# -- losses --------------------------------------------------------------


def _log_softmax(z):
    zmax = z.max(axis=1, keepdims=True)
    zs = z - zmax
    return zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))


def softmax(z):
    """Plain array helper (not an op)."""
    return np.exp(_log_softmax(z))


def _targets_to_dense(logits, target):
    if isinstance(target, Tensor):
        target = target.data
    target = np.asarray(target)
    if target.ndim == 1:
        dense = np.zeros_like(logits)
        dense[np.arange(logits.shape[0]), target.astype(np.int64)] = 1.0
        return dense
    if target.shape != logits.shape:
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape}")
    return target.astype(logits.dtype)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean CE over the batch; target is int labels or a soft distribution."""
    dense = _targets_to_dense(logits.data, target)
    logp = _log_softmax(logits.data)
    b = logits.shape[0]
    loss = -(dense * logp).sum() / b

    def back(g):
        if _wants(logits):
            logits._accumulate(g * (np.exp(logp) - dense) / b)

    return _node(loss, (logits,), back)


def kl_from_probs(logits: Tensor, ref_probs) -> Tensor:
    """Mean KL(ref || softmax(logits)) with ref treated as constant."""
    p = np.asarray(ref_probs, dtype=logits.data.dtype)
    logp_ref = np.where(p > 0, np.log(np.maximum(p, 1e-30)), 0.0)
    logq = _log_softmax(logits.data)
    b = logits.shape[0]
    loss = (p * (logp_ref - logq)).sum() / b

    def back(g):
        if _wants(logits):
            logits._accumulate(g * (np.exp(logq) - p) / b)

    return _node(loss, (logits,), back)


def cw_margin(logits: Tensor, labels, kappa=0.0) -> Tensor:
    """Mean of max(max_{i != y} z_i - z_y, -kappa); gradient is zero once clamped."""
    y = np.asarray(labels, dtype=np.int64)
    z = logits.data
    b, k = z.shape
    rows = np.arange(b)
    masked = z.copy()
    masked[rows, y] = -np.inf
    best = masked.argmax(axis=1)
    margins = z[rows, best] - z[rows, y]
    active = margins > -kappa
    loss = np.maximum(margins, -kappa).mean()

    def back(g):
        if _wants(logits):
            gz = np.zeros_like(z)
            scale = g / b
            gz[rows[active], best[active]] = scale
            gz[rows[active], y[active]] -= scale
            logits._accumulate(gz)

    return _node(np.asarray(loss, dtype=z.dtype), (logits,), back)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean over batch and classes of BCE(sigmoid(z), t), computed stably."""
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=logits.data.dtype)
    z = logits.data
    loss = (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean()
    n = z.size

    def back(g):
        if _wants(logits):
            s = 1.0 / (1.0 + np.exp(-z))
            logits._accumulate(g * (s - t) / n)

    return _node(np.asarray(loss, dtype=z.dtype), (logits,), back)


# -- optimizer -----------------------------------------------------------


class SGD:
    """SGD with momentum and weight decay, one velocity buffer per parameter.

    v <- momentum * v + (grad + weight_decay * w); w <- w - lr * v
    """

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        """Apply one update. Returns False (and skips the whole step) if any
        gradient is non-finite."""
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                logger.warning("sgd_update aborted: non-finite gradient (shape %s)", p.shape)
                return False
        for p, v in zip(self.params, self.velocities):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            np.multiply(v, self.momentum, out=v)
            v += g + self.weight_decay * p.data
            p.data -= np.asarray(self.lr, dtype=p.data.dtype) * v
        return True

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def sgd_update(params, grads, lr, momentum=0.0, weight_decay=0.0, velocities=None):
    """Functional single step on raw arrays; returns (params, velocities).

    Kept alongside the SGD class so the update rule can be tested in
    isolation against the hand recurrence.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if velocities is None:
        velocities = [np.zeros_like(p) for p in params]
    new_params = []
    for p, g, v in zip(params, grads, velocities):
        if not np.all(np.isfinite(g)):
            logger.warning("sgd_update aborted: non-finite gradient (shape %s)", np.shape(g))
            new_params.append(p)
            continue
        v *= momentum
        v += g + weight_decay * p
        new_params.append(p - np.asarray(lr, dtype=p.dtype) * v)
    return new_params, velocities


# -- finite-difference oracle ---------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    empty: bool = False

    def __float__(self):
        return self.max_rel_error


def grad_check(net, batch, fd_step=1e-6, max_coords_per_param=24, seed=0):
    """Compare analytic parameter gradients against central finite differences.

    The comparison runs on a float64 copy of the parameters and buffers so the
    difference quotient is not drowned by float32 rounding; the same op code
    paths execute either way. The small default step keeps the probe interval
    clear of relu/hardtanh kinks (a straddled kink invalidates the difference
    quotient, not the gradient). The relative error per coordinate is
    |analytic - fd| / max(|analytic|, |fd|, 1e-8) and the max over sampled
    coordinates is returned. A net with no trainable parameters reports 0
    with the empty flag set.
    """
    if hasattr(batch, "images"):
        x_in, y_in = batch.images, batch.labels
    else:
        x_in, y_in = batch

    params = [p for p in net.parameters() if p.requires_grad]
    if not params:
        return GradCheckResult(0.0, 0, empty=True)

    buffers = list(net.buffers()) if hasattr(net, "buffers") else []
    saved_params = [p.data for p in params]
    saved_buffers = [b.copy() for b in buffers]

    rng = np.random.default_rng(seed)
    try:
        for p in params:
            p.data = p.data.astype(np.float64)
            p.grad = np.zeros_like(p.data)
        buf_snapshot = [b.copy() for b in buffers]
        x64 = np.asarray(x_in, dtype=np.float64)

        def eval_loss():
            for b, snap in zip(buffers, buf_snapshot):
                b[...] = snap
            logits = net(Tensor(x64))
            return float(cross_entropy(logits, y_in).data)

        # analytic pass
        for b, snap in zip(buffers, buf_snapshot):
            b[...] = snap
        logits = net(Tensor(x64))
        loss = cross_entropy(logits, y_in)
        for p in params:
            p.zero_grad()
        loss.backward()
        analytic = [p.grad.copy() for p in params]

        max_err = 0.0
        n_checked = 0
        for p, g in zip(params, analytic):
            flat = p.data.reshape(-1)
            n = flat.size
            idx = np.arange(n) if n <= max_coords_per_param else rng.choice(n, size=max_coords_per_param, replace=False)
            for i in idx:
                orig = flat[i]
                h = fd_step * max(1.0, abs(orig))
                flat[i] = orig + h
                lp = eval_loss()
                flat[i] = orig - h
                lm = eval_loss()
                flat[i] = orig
                fd = (lp - lm) / (2.0 * h)
                a = g.reshape(-1)[i]
                err = abs(a - fd) / max(abs(a), abs(fd), _EPS_DENOM)
                max_err = max(max_err, err)
                n_checked += 1
        return GradCheckResult(max_err, n_checked)
    finally:
        for p, saved in zip(params, saved_params):
            p.data = saved
            p.grad = np.zeros_like(saved)
        for b, saved in zip(buffers, saved_buffers):
            b[...] = saved
