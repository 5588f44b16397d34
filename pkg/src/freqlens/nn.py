"""Layer zoo and model builders: a configurable ResNet family, uniform n-bit
weight fake-quantization with straight-through gradients, and a learnable
frequency-domain kernel mask.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .tensor import (
    Tensor,
    _node,
    add,
    batch_norm2d,
    conv2d,
    downsample_pad,
    global_avg_pool,
    hardtanh,
    matmul,
    relu,
)

VALID_QUANT_BITS = (2, 4, 8, 32)


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Minimal module container: tracks parameters, buffers and children in
    declaration order (the checkpoint format serializes state in that order).
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, key, value):
        arr = np.asarray(value, dtype=np.float32)
        self._buffers[key] = arr
        object.__setattr__(self, key, arr)

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_parameters(self, prefix=""):
        for k, p in self._params.items():
            yield (f"{prefix}{k}", p)
        for k, child in self._children.items():
            yield from child.named_parameters(prefix=f"{prefix}{k}.")

    def buffers(self):
        for _, b in self.named_buffers():
            yield b

    def named_buffers(self, prefix=""):
        for k, b in self._buffers.items():
            yield (f"{prefix}{k}", b)
        for k, child in self._children.items():
            yield from child.named_buffers(prefix=f"{prefix}{k}.")

    def named_modules(self, prefix=""):
        yield (prefix.rstrip("."), self)
        for k, child in self._children.items():
            yield from child.named_modules(prefix=f"{prefix}{k}.")

    def state_items(self):
        """(name, array, kind) for every parameter and buffer, in declaration
        order: per module, parameters first, then buffers, then children."""
        for k, p in self._params.items():
            yield (k, p.data, "param")
        for k, b in self._buffers.items():
            yield (k, b, "buffer")
        for k, child in self._children.items():
            for name, arr, kind in child.state_items():
                yield (f"{k}.{name}", arr, kind)

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, x, **kwargs):
        return self.forward(x, **kwargs)

    def forward(self, x, **kwargs):
        raise NotImplementedError


@contextmanager
def frozen_params(net):
    """Temporarily drop requires_grad on all parameters (attack inner loops
    only need input gradients; skipping weight grads saves a GEMM per layer)."""
    params = list(net.parameters())
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield net
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s


# -- quantization ----------------------------------------------------------


def fake_quant_array(w, bits):
    """Symmetric uniform fake-quantization of a raw array.

    Grid is k * delta for k in [-(2^(n-1)-1), 2^(n-1)-1], delta = max|w| / k_max.
    Entries hitting +-k_max are snapped to +-max|w| exactly so the scale is a
    fixed point and re-quantization is a bitwise no-op.
    """
    if bits == 32:
        return w
    kmax = 2 ** (bits - 1) - 1
    scale = np.abs(w).max()
    if scale == 0:
        return w.copy()
    delta = scale / kmax
    k = np.clip(np.round(w / delta), -kmax, kmax)
    q = (k * delta).astype(w.dtype)
    snap = np.abs(k) == kmax
    q[snap] = (np.sign(k[snap]) * scale).astype(w.dtype)
    return q


def quantize_weights(w: Tensor, bits: int) -> Tensor:
    """Fake-quantize a weight tensor; gradients pass straight through."""
    if bits not in VALID_QUANT_BITS:
        raise ValueError(f"quant bits must be one of {VALID_QUANT_BITS}, got {bits}")
    if bits == 32:
        return w

    qdata = fake_quant_array(w.data, bits)

    def back(g):
        if w.requires_grad:
            w._accumulate(g)

    return _node(qdata, (w,), back)


# -- frequency-aware kernel mask --------------------------------------------


def _conj_symmetrize(v):
    """Average each DFT bin with its conjugate partner (k <-> L-k)."""
    rev = (-np.arange(v.shape[-1])) % v.shape[-1]
    return 0.5 * (v + v[..., rev])


def fat_mask(mask_logits_data):
    """Effective frequency gate: sigmoid of the logits, symmetrized across
    conjugate bin pairs so real kernels map to real kernels."""
    return _conj_symmetrize(1.0 / (1.0 + np.exp(-mask_logits_data)))


def fat_transform(w: Tensor, mask_logits: Tensor) -> Tensor:
    """Gate the flattened kernel rows [c_out, c_in*H*W] in the frequency domain.

    Each row is sent through a unitary 1-D DFT, multiplied binwise by the
    sigmoid mask (one mask shared across output channels; conjugate-symmetric
    so the result is real up to rounding), inverted, and the real part kept.
    The map is linear and self-adjoint in w, so the weight gradient is the
    same transform applied to the upstream gradient.
    """
    co = w.shape[0]
    length = int(np.prod(w.shape[1:]))
    if mask_logits.data.shape != (length,):
        raise ValueError(
            f"fat mask length {mask_logits.data.shape} does not match c_in*H*W = {length}"
        )
    rows = w.data.reshape(co, length)
    m = 1.0 / (1.0 + np.exp(-mask_logits.data))
    sym = _conj_symmetrize(m)
    wf = np.fft.fft(rows, norm="ortho")
    out = np.fft.ifft(wf * sym, norm="ortho").real.astype(w.data.dtype).reshape(w.shape)

    def back(g):
        grows = g.reshape(co, length)
        if w.requires_grad:
            gw = np.fft.ifft(np.fft.fft(grows, norm="ortho") * sym, norm="ortho").real
            w._accumulate(gw.astype(g.dtype).reshape(w.shape))
        if mask_logits.requires_grad:
            gs = (wf * np.fft.ifft(grows, norm="ortho")).real.sum(axis=0)
            gm = _conj_symmetrize(gs)  # symmetrization is linear and self-adjoint
            mask_logits._accumulate((gm * m * (1.0 - m)).astype(mask_logits.data.dtype))

    return _node(out, (w, mask_logits), back)


# -- layers -----------------------------------------------------------------


def _he_normal(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Conv2d(Module):
    """3x3-style convolution without bias. quant_bits/fat apply to the weight
    at forward time; the first convolution of a network must keep both off.
    """

    def __init__(self, c_in, c_out, kernel, stride=1, padding=0,
                 quant_bits=32, fat=False, rng=None, name="conv"):
        super().__init__()
        if quant_bits not in VALID_QUANT_BITS:
            raise ValueError(f"quant bits must be one of {VALID_QUANT_BITS}, got {quant_bits}")
        rng = rng or np.random.default_rng(0)
        self.name = name
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.stride, self.padding = stride, padding
        self.quant_bits = quant_bits
        self.fat = fat
        self.weight = Parameter(_he_normal(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel))
        if fat:
            # mask starts near pass-through (sigmoid(2) ~ 0.88)
            self.fat_logits = Parameter(np.full(c_in * kernel * kernel, 2.0, dtype=np.float32))

    def effective_weight(self):
        w = self.weight
        if self.fat:
            w = fat_transform(w, self.fat_logits)
        if self.quant_bits != 32:
            w = quantize_weights(w, self.quant_bits)
        return w

    def forward(self, x):
        if x.shape[1] != self.c_in:
            raise ValueError(
                f"layer {self.name!r}: expected {self.c_in} input channels, got shape {x.shape}"
            )
        return conv2d(x, self.effective_weight(), stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, name="bn"):
        super().__init__()
        self.name = name
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"layer {self.name!r}: expected {self.channels} channels, got shape {x.shape}")
        return batch_norm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training=self.training, momentum=self.momentum, eps=self.eps)


class Linear(Module):
    """Affine map on (B, in) inputs; weight stored as (in, out)."""

    def __init__(self, c_in, c_out, quant_bits=32, rng=None, name="fc"):
        super().__init__()
        if quant_bits not in VALID_QUANT_BITS:
            raise ValueError(f"quant bits must be one of {VALID_QUANT_BITS}, got {quant_bits}")
        rng = rng or np.random.default_rng(0)
        self.name = name
        self.c_in, self.c_out = c_in, c_out
        self.quant_bits = quant_bits
        self.weight = Parameter((rng.standard_normal((c_in, c_out)) / np.sqrt(c_in)).astype(np.float32))
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32))

    def forward(self, x):
        if x.shape[-1] != self.c_in:
            raise ValueError(f"layer {self.name!r}: expected {self.c_in} features, got shape {x.shape}")
        w = self.weight
        if self.quant_bits != 32:
            w = quantize_weights(w, self.quant_bits)
        return add(matmul(x, w), self.bias)


class BasicBlock(Module):
    """Standard two-conv residual block with a parameter-free shortcut
    (strided subsample + zero channel padding) when the shape changes."""

    def __init__(self, c_in, c_out, stride=1, quant_bits=32, fat=False, rng=None, name="block"):
        super().__init__()
        self.name = name
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.conv1 = Conv2d(c_in, c_out, 3, stride=stride, padding=1,
                            quant_bits=quant_bits, fat=fat, rng=rng, name=f"{name}.conv1")
        self.bn1 = BatchNorm2d(c_out, name=f"{name}.bn1")
        self.conv2 = Conv2d(c_out, c_out, 3, stride=1, padding=1,
                            quant_bits=quant_bits, fat=fat, rng=rng, name=f"{name}.conv2")
        self.bn2 = BatchNorm2d(c_out, name=f"{name}.bn2")

    def forward(self, x, recorder=None, pre_activation=False):
        h = self.conv1(x)
        if recorder is not None and pre_activation:
            recorder.add(self.conv1.name, h.data)
        h = relu(self.bn1(h))
        if recorder is not None and not pre_activation:
            recorder.add(self.conv1.name, h.data)
        h2 = self.conv2(h)
        if recorder is not None and pre_activation:
            recorder.add(self.conv2.name, h2.data)
        h2 = self.bn2(h2)
        if self.stride != 1 or self.c_in != self.c_out:
            shortcut = downsample_pad(x, self.stride, self.c_out)
        else:
            shortcut = x
        out = relu(add(h2, shortcut))
        if recorder is not None and not pre_activation:
            recorder.add(self.conv2.name, out.data)
        return out


class ActivationRecorder:
    """Collects (layer id, raw activation array) pairs during a forward pass."""

    def __init__(self):
        self.records = []

    def add(self, name, data):
        self.records.append((name, np.array(data, copy=True)))

    def names(self):
        return [n for n, _ in self.records]


class ResNet(Module):
    """CIFAR-style ResNet: stem conv (hardtanh after bn1), three stages of
    basic blocks at 16/32/64 * width channels with stride-2 transitions,
    global average pooling and a linear head.

    The stem convolution is never quantized and never frequency-masked.
    """

    def __init__(self, depth_blocks=3, width=1, num_classes=10, quant_bits=32,
                 fat_enabled=False, in_channels=3, seed=0):
        super().__init__()
        if depth_blocks < 1:
            raise ValueError("depth_blocks must be >= 1")
        if width < 1:
            raise ValueError("width must be >= 1")
        if quant_bits not in VALID_QUANT_BITS:
            raise ValueError(f"quant bits must be one of {VALID_QUANT_BITS}, got {quant_bits}")
        self.config = dict(depth_blocks=depth_blocks, width=width, num_classes=num_classes,
                           quant_bits=quant_bits, fat_enabled=bool(fat_enabled),
                           in_channels=in_channels, seed=seed)
        rng = np.random.default_rng(seed)

        c0 = 16 * width
        self.conv1 = Conv2d(in_channels, c0, 3, stride=1, padding=1, rng=rng, name="stem.conv")
        self.bn1 = BatchNorm2d(c0, name="stem.bn")
        self.stages = []
        c_in = c0
        for s, c_out in enumerate((16 * width, 32 * width, 64 * width)):
            for b in range(depth_blocks):
                stride = 2 if (s > 0 and b == 0) else 1
                block = BasicBlock(c_in, c_out, stride=stride, quant_bits=quant_bits,
                                   fat=fat_enabled, rng=rng, name=f"stage{s + 1}.block{b}")
                setattr(self, f"stage{s + 1}_block{b}", block)
                self.stages.append(block)
                c_in = c_out
        self.fc = Linear(64 * width, num_classes, quant_bits=quant_bits, rng=rng, name="fc")

    @property
    def weighted_layer_count(self):
        # stem conv + 2 convs per block + linear head (shortcuts are parameter-free)
        return 2 + 2 * len(self.stages)

    def forward(self, x, recorder=None, pre_activation=False):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        h = self.conv1(x)
        if recorder is not None and pre_activation:
            recorder.add(self.conv1.name, h.data)
        h = hardtanh(self.bn1(h))
        if recorder is not None and not pre_activation:
            recorder.add(self.conv1.name, h.data)
        for block in self.stages:
            h = block(h, recorder=recorder, pre_activation=pre_activation)
        pooled = global_avg_pool(h)
        logits = self.fc(pooled)
        if recorder is not None:
            recorder.add(self.fc.name, logits.data)
        return logits

    def first_layer_activation(self, images):
        """hardtanh(bn1(conv1(x))) on raw arrays, eval-mode stats unaffected."""
        was_training = self.training
        self.eval()
        try:
            h = hardtanh(self.bn1(self.conv1(Tensor(images))))
        finally:
            self.train(was_training)
        return h.data


def build_resnet(depth_blocks, width=1, num_classes=10, quant_bits=32,
                 fat_enabled=False, in_channels=3, seed=0) -> ResNet:
    return ResNet(depth_blocks=depth_blocks, width=width, num_classes=num_classes,
                  quant_bits=quant_bits, fat_enabled=fat_enabled,
                  in_channels=in_channels, seed=seed)


def forward(net, batch):
    """Run a network on an image batch, returning the logits tensor."""
    images = batch.images if hasattr(batch, "images") else batch
    return net(Tensor(images))


class LowPassModel(Module):
    """Wrap a network with a differentiable ideal low-pass prefilter so that
    white-box attacks see the same preprocessed pipeline as inference."""

    def __init__(self, net, degree):
        super().__init__()
        self.net = net
        self.degree = degree
        self.train(net.training)

    def forward(self, x, **kwargs):
        from .spectral import lpf_project

        if not isinstance(x, Tensor):
            x = Tensor(x)
        proj = lpf_project(x.data, self.degree)
        out = np.clip(proj, 0.0, 1.0).astype(x.data.dtype)
        inside = (proj > 0.0) & (proj < 1.0)

        def back(g):
            if x.requires_grad:
                x._accumulate(lpf_project(g * inside, self.degree).astype(g.dtype))

        filtered = _node(out, (x,), back)
        return self.net(filtered, **kwargs)
