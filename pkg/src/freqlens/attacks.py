"""Gradient-based and noise attacks producing l-inf bounded adversarial
examples, plus a white-box robustness evaluator."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .nn import frozen_params

ATTACK_KINDS = ("gn", "fgsm", "pgd", "bim", "tpgd", "cw")

DEFAULT_EPSILON = 8.0 / 255.0
DEFAULT_ALPHA = 2.0 / 255.0


@dataclass
class AttackSpec:
    """Attack kind plus budget parameters (pixel units on the [0,1] scale)."""

    kind: str = "pgd"
    epsilon: float = DEFAULT_EPSILON
    alpha: float = DEFAULT_ALPHA
    steps: int = 20
    random_start: bool = True
    sigma: float = 0.1   # GN noise std; the source tables never state it
    kappa: float = 0.0   # CW margin clamp

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not (0.0 <= self.alpha <= self.epsilon <= 1.0):
            raise ValueError(f"need 0 <= alpha <= epsilon <= 1, got alpha={self.alpha}, epsilon={self.epsilon}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")

    def label(self):
        if self.kind == "gn":
            return "gn"
        if self.kind == "fgsm":
            return "fgsm"
        return f"{self.kind}{self.steps}"


PAPER_COLUMNS = ("natural", "gn", "fgsm", "pgd20", "bim20", "tpgd20", "cw20")


def attack_from_label(label, epsilon=DEFAULT_EPSILON, alpha=DEFAULT_ALPHA,
                      sigma=0.1, kappa=0.0):
    """Resolve a table-column label like "pgd20" or "cw20" into an AttackSpec;
    "natural" resolves to None (clean evaluation)."""
    label = label.strip().lower()
    if label == "natural":
        return None
    if label == "gn":
        return AttackSpec(kind="gn", sigma=sigma, epsilon=max(epsilon, alpha), alpha=alpha, steps=0)
    if label == "fgsm":
        return AttackSpec(kind="fgsm", epsilon=epsilon, alpha=epsilon, steps=1, random_start=False)
    for kind in ("tpgd", "pgd", "bim", "cw"):
        if label.startswith(kind):
            steps = int(label[len(kind):] or 20)
            return AttackSpec(kind=kind, epsilon=epsilon, alpha=alpha, steps=steps,
                              random_start=kind in ("pgd", "cw"), kappa=kappa)
    raise ValueError(f"unknown attack label {label!r}")


def pgd7_spec(epsilon=DEFAULT_EPSILON, alpha=DEFAULT_ALPHA):
    return AttackSpec(kind="pgd", epsilon=epsilon, alpha=alpha, steps=7, random_start=True)


def pgd20_spec(epsilon=DEFAULT_EPSILON, alpha=DEFAULT_ALPHA):
    return AttackSpec(kind="pgd", epsilon=epsilon, alpha=alpha, steps=20, random_start=True)


@dataclass
class AdvBatch:
    """Attack output. x_adv stays inside [0,1] and, except for GN (clamp
    only), inside the l-inf epsilon ball around x_clean."""

    x_adv: np.ndarray
    x_clean: np.ndarray
    spec: AttackSpec

    def max_perturbation(self):
        if self.x_adv.size == 0:
            return 0.0
        return float(np.abs(self.x_adv - self.x_clean).max())

    def check(self, tol=1e-6):
        if self.x_adv.size and (self.x_adv.min() < 0 or self.x_adv.max() > 1):
            raise AssertionError("adversarial batch escapes [0,1]")
        if self.spec.kind != "gn" and self.max_perturbation() > self.spec.epsilon + tol:
            raise AssertionError(
                f"perturbation {self.max_perturbation():.6g} exceeds epsilon {self.spec.epsilon:.6g}"
            )
        return self


def _input_grad(net, x_data, loss_fn):
    """Gradient of loss_fn(logits) w.r.t. the input, with weight gradients
    switched off. Raises if the gradient is non-finite."""
    with frozen_params(net):
        x = T.Tensor(x_data, requires_grad=True)
        loss = loss_fn(net(x))
        loss.backward()
    if not np.all(np.isfinite(x.grad)):
        raise RuntimeError("attack aborted: non-finite input gradient")
    return x.grad


def gn(x, sigma, rng=None) -> AdvBatch:
    """Gaussian pixel noise, clamp-only (no epsilon projection)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float32)
    if sigma == 0:
        adv = x.copy()
    else:
        noise = rng.normal(0.0, sigma, size=x.shape).astype(np.float32)
        adv = np.clip(x + noise, 0.0, 1.0)
    return AdvBatch(adv, x, AttackSpec(kind="gn", sigma=sigma, epsilon=1.0, alpha=0.0, steps=0))


def fgsm(net, x, y, epsilon) -> AdvBatch:
    """Single signed-gradient step on the cross-entropy loss."""
    x = np.asarray(x, dtype=np.float32)
    g = _input_grad(net, x, lambda logits: T.cross_entropy(logits, y))
    adv = np.clip(x + epsilon * np.sign(g), 0.0, 1.0)
    return AdvBatch(adv, x, AttackSpec(kind="fgsm", epsilon=epsilon, alpha=epsilon,
                                       steps=1, random_start=False))


def _project(z, x, epsilon):
    return np.clip(z, x - np.float32(epsilon), x + np.float32(epsilon))


def _pgd_loop(net, x, spec, loss_fn, start, rng):
    x = np.asarray(x, dtype=np.float32)
    xt = start(x, rng)
    for _ in range(spec.steps):
        g = _input_grad(net, xt, loss_fn)
        xt = np.clip(xt + np.float32(spec.alpha) * np.sign(g), 0.0, 1.0)
        xt = _project(xt, x, spec.epsilon)
    return AdvBatch(xt, x, spec)


def pgd(net, x, y, spec: AttackSpec, rng=None) -> AdvBatch:
    """Iterated signed-gradient ascent with projection onto the epsilon ball
    after every step; optional uniform random start."""
    rng = rng if rng is not None else np.random.default_rng(0)

    def start(x0, r):
        if spec.random_start:
            noise = r.uniform(-spec.epsilon, spec.epsilon, size=x0.shape).astype(np.float32)
            return np.clip(x0 + noise, 0.0, 1.0)
        return x0.copy()

    return _pgd_loop(net, x, spec, lambda logits: T.cross_entropy(logits, y), start, rng)


def bim(net, x, y, spec: AttackSpec, rng=None) -> AdvBatch:
    """PGD without the random start."""
    return pgd(net, x, y, replace(spec, kind="bim", random_start=False), rng)


def tpgd(net, x, spec: AttackSpec, rng=None) -> AdvBatch:
    """Label-free PGD ascending KL(softmax(clean logits) || softmax(adv
    logits)), the clean term held constant. Starts from a small Gaussian
    jitter (std 1e-3)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float32)
    with frozen_params(net):
        ref = T.softmax(net(T.Tensor(x)).data)

    def start(x0, r):
        noise = r.normal(0.0, 1e-3, size=x0.shape).astype(np.float32)
        return _project(np.clip(x0 + noise, 0.0, 1.0), x0, spec.epsilon)

    return _pgd_loop(net, x, spec, lambda logits: T.kl_from_probs(logits, ref), start, rng)


def cw_pgd(net, x, y, spec: AttackSpec, rng=None) -> AdvBatch:
    """PGD ascent on the margin loss max(max_{i != y} z_i - z_y, -kappa)."""
    rng = rng if rng is not None else np.random.default_rng(0)

    def start(x0, r):
        if spec.random_start:
            noise = r.uniform(-spec.epsilon, spec.epsilon, size=x0.shape).astype(np.float32)
            return np.clip(x0 + noise, 0.0, 1.0)
        return x0.copy()

    return _pgd_loop(net, x, spec, lambda logits: T.cw_margin(logits, y, spec.kappa), start, rng)


def run_attack(net, x, y, spec: AttackSpec, rng=None) -> AdvBatch:
    if spec.kind == "gn":
        out = gn(x, spec.sigma, rng)
        out.spec = spec
        return out
    if spec.kind == "fgsm":
        return fgsm(net, x, y, spec.epsilon)
    if spec.kind == "pgd":
        return pgd(net, x, y, spec, rng)
    if spec.kind == "bim":
        return bim(net, x, y, spec, rng)
    if spec.kind == "tpgd":
        return tpgd(net, x, spec, rng)
    if spec.kind == "cw":
        return cw_pgd(net, x, y, spec, rng)
    raise ValueError(f"unknown attack kind {spec.kind!r}")


def predict(net, images, batch_size=256):
    out = []
    for start in range(0, len(images), batch_size):
        logits = net(T.Tensor(images[start:start + batch_size]))
        out.append(logits.data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy_under_attack(attack_net, predict_net, split, spec=None,
                          batch_size=128, seed=0) -> float:
    """Accuracy of predict_net on examples attacked through attack_net.
    White-box evaluation passes the same network twice; an oblivious-attacker
    evaluation generates against a different pipeline than it predicts with."""
    n = len(split)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    prev_modes = [attack_net.training, predict_net.training]
    attack_net.eval()
    predict_net.eval()
    rng = np.random.default_rng(seed)
    correct = 0
    try:
        for start in range(0, n, batch_size):
            x = split.images[start:start + batch_size]
            y = split.labels[start:start + batch_size]
            if spec is None:
                x_eval = x
            else:
                x_eval = run_attack(attack_net, x, y, spec, rng).check().x_adv
            pred = predict_net(T.Tensor(x_eval)).data.argmax(axis=1)
            correct += int((pred == y).sum())
    finally:
        attack_net.train(prev_modes[0])
        predict_net.train(prev_modes[1])
    return correct / n


def evaluate_robustness(net, split, spec=None, batch_size=128, seed=0) -> float:
    """Fraction of examples classified correctly under the attack (clean
    accuracy when spec is None). Attacks are generated white-box against the
    evaluated network itself, in eval mode."""
    return accuracy_under_attack(net, net, split, spec, batch_size=batch_size, seed=seed)
