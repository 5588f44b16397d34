"""Linear Centered Kernel Alignment between layer activations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fileio
from .nn import ActivationRecorder
from .tensor import Tensor


@dataclass
class CKAMatrix:
    values: np.ndarray
    layer_ids: list

    def save(self, csv_path=None, pgm_path=None, provenance=None):
        if csv_path is not None:
            rows = [[self.layer_ids[i]] + [f"{v:.9g}" for v in self.values[i]]
                    for i in range(len(self.layer_ids))]
            fileio.write_csv(csv_path, ["layer"] + list(self.layer_ids), rows, provenance=provenance)
        if pgm_path is not None:
            # row 0 = shallowest layer
            fileio.write_pgm(pgm_path, self.values, provenance=provenance)


def _center(x):
    return x - x.mean(axis=0, keepdims=True)


def linear_cka(x, y, context="", route="auto") -> float:
    """Similarity in [0,1] between two activation matrices with matched rows.

    Computed as ||Yc^T Xc||_F^2 / (||Xc^T Xc||_F * ||Yc^T Yc||_F) after column
    centering, switching to the m x m Gram form when examples are fewer than
    features; both routes agree to 1e-6 by construction. Invariant to
    orthogonal transforms and isotropic scaling of either input.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise ValueError("linear_cka expects 2-D activation matrices")
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ValueError("need at least 2 examples")
    xc, yc = _center(x), _center(y)
    where = f" ({context})" if context else ""
    if np.linalg.norm(xc) == 0:
        raise ValueError(f"zero-variance activations in first input{where}")
    if np.linalg.norm(yc) == 0:
        raise ValueError(f"zero-variance activations in second input{where}")

    m = x.shape[0]
    if route == "auto":
        route = "gram" if m <= min(x.shape[1], y.shape[1]) else "feature"
    if route == "gram":
        # <Kx, Ky> with K = Ac Ac^T
        kx = xc @ xc.T
        ky = yc @ yc.T
        num = float((kx * ky).sum())
        den = float(np.linalg.norm(kx) * np.linalg.norm(ky))
    elif route == "feature":
        num = float(np.linalg.norm(yc.T @ xc) ** 2)
        den = float(np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc))
    else:
        raise ValueError(f"unknown route {route!r}")
    return num / den


def capture_activations(net, images, layer_filter=None, pre_activation=False):
    """One eval-mode forward pass collecting flattened (m x p) activations of
    conv and linear layers. layer_filter is a predicate on the layer id."""
    rec = ActivationRecorder()
    was_training = net.training
    net.eval()
    try:
        net(Tensor(np.asarray(images, dtype=np.float32)), recorder=rec,
            pre_activation=pre_activation)
    finally:
        net.train(was_training)
    out = []
    for name, act in rec.records:
        if layer_filter is not None and not layer_filter(name):
            continue
        out.append((name, act.reshape(act.shape[0], -1)))
    return out


def cka_matrix_from_activations(named_acts) -> CKAMatrix:
    """Pairwise linear CKA over a list of (layer id, m x p matrix) pairs."""
    n = len(named_acts)
    values = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            v = linear_cka(named_acts[i][1], named_acts[j][1],
                           context=f"{named_acts[i][0]} vs {named_acts[j][0]}")
            values[i, j] = v
            values[j, i] = v
    return CKAMatrix(values, [name for name, _ in named_acts])


def cka_matrix(net, images, layer_filter=None, pre_activation=False) -> CKAMatrix:
    """Pairwise linear CKA between the selected layer activations for one
    batch of images (adversarial batches are fine; pass the attacked pixels)."""
    return cka_matrix_from_activations(capture_activations(net, images, layer_filter, pre_activation))


def shallow_deep_similarity(matrix: CKAMatrix, split=0.25) -> float:
    """Mean CKA between the first ceil(split*L) and last ceil(split*L) layers."""
    values = matrix.values if isinstance(matrix, CKAMatrix) else np.asarray(matrix)
    n = values.shape[0]
    if n < 2:
        raise ValueError("need at least 2 layers")
    k = int(np.ceil(split * n))
    return float(values[:k, n - k:].mean())
