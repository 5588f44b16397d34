"""Shared builders for the test suite: tiny networks and random batches."""

import numpy as np

from freqlens import nn
from freqlens import tensor as T


class TinyConvNet(nn.Module):
    """conv -> hardtanh -> conv -> relu -> gap -> linear; small enough for
    exhaustive finite differences."""

    def __init__(self, seed=0, in_channels=1, hidden=2, classes=2, with_bn=False):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.conv1 = nn.Conv2d(in_channels, hidden, 3, padding=1, rng=rng, name="c1")
        self.bn = nn.BatchNorm2d(hidden, name="b1") if with_bn else None
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1, rng=rng, name="c2")
        self.fc = nn.Linear(hidden, classes, rng=rng, name="fc")

    def forward(self, x):
        h = self.conv1(x)
        if self.bn is not None:
            h = self.bn(h)
        h = T.hardtanh(h)
        h = T.relu(self.conv2(h))
        return self.fc(T.global_avg_pool(h))


def micro_resnet(seed=0, classes=2, **kwargs):
    return nn.build_resnet(depth_blocks=1, width=1, num_classes=classes, seed=seed, **kwargs)


def random_batch(rng, b=2, c=3, hw=8, classes=2):
    x = rng.uniform(0, 1, (b, c, hw, hw)).astype(np.float32)
    y = rng.integers(0, classes, b).astype(np.int64)
    return x, y


def naive_dft2(img):
    """O(N^4) 2-D DFT by direct summation; the independent oracle."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    out = np.zeros((h, w), dtype=np.complex128)
    for u in range(h):
        for v in range(w):
            acc = 0.0j
            for r in range(h):
                for cc in range(w):
                    acc += img[r, cc] * np.exp(-2j * np.pi * (u * r / h + v * cc / w))
            out[u, v] = acc
    return out


def naive_dft1(row):
    """O(N^2) 1-D DFT by direct summation."""
    row = np.asarray(row, dtype=np.float64)
    n = row.size
    out = np.zeros(n, dtype=np.complex128)
    for k in range(n):
        out[k] = sum(row[j] * np.exp(-2j * np.pi * k * j / n) for j in range(n))
    return out
