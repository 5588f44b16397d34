"""Natural and adversarial (min-max) training with the momentum-SGD schedule,
the six A-/C- augmentation modes, and soft-label BCE loss."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attacks import AttackSpec, attack_from_label, pgd7_spec, run_attack
from .data import Dataset, Split, batches, probe_batch
from .spectral import lfi_hfi_ratio
from .tensor import SGD, Tensor

logger = logging.getLogger(__name__)

AUGMENTATIONS = ("none", "A-mixup", "C-mixup", "A-cutout", "C-cutout", "A-cutmix", "C-cutmix")


@dataclass
class TrainConfig:
    epochs: int = 120
    batch_size: int = 512
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay: tuple = ((60, 0.1), (90, 0.1), (110, 0.5))
    inner_attack: AttackSpec = field(default_factory=pgd7_spec)
    augmentation: str = "none"
    beta_params: tuple = (1.0, 1.0)
    probe_ratio: bool = False
    seed: int = 0
    shuffle: bool = True
    standard_augment: bool = True   # random crop w/ 4px zero pad + horizontal flip
    eval_subset: int = 128          # held-out slice for per-epoch accuracies (0 disables)
    final_eval: tuple = ("natural", "pgd20")

    def validate(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.augmentation not in AUGMENTATIONS:
            raise ValueError(f"augmentation must be one of {AUGMENTATIONS}, got {self.augmentation!r}")
        eps = [e for e, _ in self.lr_decay]
        if any(b <= a for a, b in zip(eps, eps[1:])):
            raise ValueError("lr decay epochs must be strictly increasing")
        if eps and eps[-1] >= self.epochs:
            raise ValueError("lr decay epochs must be smaller than the epoch count")
        return self


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for a 1-based epoch index: each (decay_epoch, factor)
    pair multiplies in once the epoch index exceeds decay_epoch."""
    lr = cfg.lr
    for decay_epoch, factor in cfg.lr_decay:
        if epoch > decay_epoch:
            lr *= factor
    return lr


def config_fingerprint(cfg: TrainConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, check=False)
        return out.stdout.strip() or "unknown"
    except OSError:
        return "unknown"


# -- augmentation ------------------------------------------------------------


@dataclass
class MixedBatch:
    images: np.ndarray
    label_pairs: np.ndarray     # (B, 2) int: (y_i, y_j)
    lam: np.ndarray             # (B,) mix coefficient per example
    patch_boxes: np.ndarray | None = None   # (B, 4) int: (h0, w0, dh, dw)
    labels_mixed: bool = True

    def soft_labels(self, num_classes):
        """lam * onehot(y_i) + (1 - lam) * onehot(y_j); rows sum to 1."""
        b = self.label_pairs.shape[0]
        out = np.zeros((b, num_classes), dtype=np.float32)
        rows = np.arange(b)
        out[rows, self.label_pairs[:, 0]] += self.lam.astype(np.float32)
        out[rows, self.label_pairs[:, 1]] += (1.0 - self.lam).astype(np.float32)
        return out


def _pairing(n, rng):
    """Disjoint pairs from a shuffled order; each example is in exactly one
    pair. An odd trailing example pairs with itself."""
    perm = rng.permutation(n)
    pairs = [(perm[2 * i], perm[2 * i + 1]) for i in range(n // 2)]
    if n % 2:
        pairs.append((perm[-1], perm[-1]))
    return pairs


def mixup(images, labels, rng, beta_a=1.0, beta_b=1.0, lam=None) -> MixedBatch:
    """Convex pairwise mixing; one Beta draw per pair, both pair members mixed
    with the same coefficient."""
    x = np.array(images, copy=True)
    y = np.asarray(labels)
    n = len(y)
    lam_out = np.ones(n, dtype=np.float64)
    pairs_out = np.stack([y, y], axis=1).astype(np.int64)
    if n < 2:
        return MixedBatch(x, pairs_out, lam_out)
    for i, j in _pairing(n, rng):
        if i == j:
            continue
        lam_ij = float(rng.beta(beta_a, beta_b)) if lam is None else float(lam)
        xi = x[i].copy()
        x[i] = lam_ij * x[i] + (1 - lam_ij) * x[j]
        x[j] = lam_ij * x[j] + (1 - lam_ij) * xi
        lam_out[i] = lam_out[j] = lam_ij
        pairs_out[i] = (y[i], y[j])
        pairs_out[j] = (y[j], y[i])
    return MixedBatch(x.astype(images.dtype, copy=False), pairs_out, lam_out)


def _patch_side(frac, h, w):
    return min(int(round(math.sqrt(frac * h * w))), h, w)


def cutout(images, labels, rng, beta_a=1.0, beta_b=1.0, frac=None) -> MixedBatch:
    """Zero a square-ish patch per image; area fraction follows Beta(a, b),
    position is uniform over in-bounds placements. Labels are unchanged."""
    x = np.array(images, copy=True)
    y = np.asarray(labels)
    n, _, h, w = x.shape
    boxes = np.zeros((n, 4), dtype=np.int64)
    for i in range(n):
        f = float(rng.beta(beta_a, beta_b)) if frac is None else float(frac)
        side = _patch_side(f, h, w)
        h0 = int(rng.integers(0, h - side + 1))
        w0 = int(rng.integers(0, w - side + 1))
        if side:
            x[i, :, h0:h0 + side, w0:w0 + side] = 0.0
        boxes[i] = (h0, w0, side, side)
    return MixedBatch(x, np.stack([y, y], axis=1).astype(np.int64),
                      np.ones(n, dtype=np.float64), patch_boxes=boxes, labels_mixed=False)


def cutmix(images, labels, rng, beta_a=1.0, beta_b=1.0, frac=None) -> MixedBatch:
    """Swap a patch between pair members at identical coordinates; labels mix
    with lam = 1 - patch_area / (H*W)."""
    x = np.array(images, copy=True)
    y = np.asarray(labels)
    n, _, h, w = x.shape
    lam_out = np.ones(n, dtype=np.float64)
    pairs_out = np.stack([y, y], axis=1).astype(np.int64)
    boxes = np.zeros((n, 4), dtype=np.int64)
    if n < 2:
        return MixedBatch(x, pairs_out, lam_out, patch_boxes=boxes)
    for i, j in _pairing(n, rng):
        if i == j:
            continue
        f = float(rng.beta(beta_a, beta_b)) if frac is None else float(frac)
        side = _patch_side(f, h, w)
        h0 = int(rng.integers(0, h - side + 1))
        w0 = int(rng.integers(0, w - side + 1))
        if side:
            patch_i = x[i, :, h0:h0 + side, w0:w0 + side].copy()
            x[i, :, h0:h0 + side, w0:w0 + side] = x[j, :, h0:h0 + side, w0:w0 + side]
            x[j, :, h0:h0 + side, w0:w0 + side] = patch_i
        lam_ij = 1.0 - (side * side) / (h * w)
        lam_out[i] = lam_out[j] = lam_ij
        pairs_out[i] = (y[i], y[j])
        pairs_out[j] = (y[j], y[i])
        boxes[i] = boxes[j] = (h0, w0, side, side)
    return MixedBatch(x, pairs_out, lam_out, patch_boxes=boxes)


def soft_label_bce_loss(logits: Tensor, soft_labels) -> Tensor:
    """Mean over batch and classes of BCE(sigmoid(logit), soft_label)."""
    t = np.asarray(soft_labels, dtype=np.float32)
    sums = t.sum(axis=1)
    if not np.allclose(sums, 1.0, atol=1e-5):
        raise ValueError("soft label rows must sum to 1")
    return T.bce_with_logits(logits, t)


def crop_flip(images, rng):
    """Standard pipeline: random crop from a 4-pixel zero-padded canvas plus
    random horizontal flip."""
    b, c, h, w = images.shape
    pad = 4
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dys = rng.integers(0, 2 * pad + 1, size=b)
    dxs = rng.integers(0, 2 * pad + 1, size=b)
    flips = rng.integers(0, 2, size=b)
    out = np.empty_like(images)
    for i in range(b):
        crop = padded[i, :, dys[i]:dys[i] + h, dxs[i]:dxs[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


# -- run report ---------------------------------------------------------------


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    clean_acc: float
    adv_acc: float
    ratio: float
    lr: float


@dataclass
class RunReport:
    rows: list = field(default_factory=list)
    ratio_series: list = field(default_factory=list)   # (epoch, R), epoch 0 = before training
    final_table: list = field(default_factory=list)    # (attack label, accuracy)
    provenance: dict = field(default_factory=dict)
    events: list = field(default_factory=list)

    def to_files(self, out_dir):
        from . import fileio

        out_dir = Path(out_dir)
        tag = self.provenance.get("config_hash", "run")
        paths = {}
        metrics = out_dir / f"metrics-{tag}.csv"
        fileio.write_csv(metrics, ["epoch", "train_loss", "clean_acc", "adv_acc", "ratio", "lr"],
                         [[r.epoch, f"{r.train_loss:.9g}", f"{r.clean_acc:.9g}",
                           f"{r.adv_acc:.9g}", f"{r.ratio:.9g}", f"{r.lr:.9g}"] for r in self.rows],
                         provenance=self.provenance)
        paths["metrics"] = metrics
        table = out_dir / f"eval-{tag}.csv"
        fileio.write_csv(table, ["attack", "accuracy"],
                         [[label, f"{acc:.9g}"] for label, acc in self.final_table],
                         provenance=self.provenance)
        paths["eval_table"] = table
        if self.ratio_series:
            ratio = out_dir / f"ratio-{tag}.csv"
            fileio.write_csv(ratio, ["epoch", "ratio"],
                             [[e, f"{r:.9g}"] for e, r in self.ratio_series],
                             provenance=self.provenance)
            paths["ratio_series"] = ratio
        return paths


# -- training loops ------------------------------------------------------------


def _apply_augmentation(name, images, labels, rng, beta_a, beta_b) -> MixedBatch:
    kind = name.split("-", 1)[1]
    if kind == "mixup":
        return mixup(images, labels, rng, beta_a, beta_b)
    if kind == "cutout":
        return cutout(images, labels, rng, beta_a, beta_b)
    if kind == "cutmix":
        return cutmix(images, labels, rng, beta_a, beta_b)
    raise ValueError(f"unknown augmentation {name!r}")


def _heldout_metrics(net, data: Dataset, cfg: TrainConfig, seed):
    from .attacks import evaluate_robustness

    k = min(cfg.eval_subset, len(data.test))
    if k == 0:
        return math.nan, math.nan
    holdout = Split(data.test.images[:k], data.test.labels[:k])
    clean = evaluate_robustness(net, holdout, None, batch_size=cfg.batch_size, seed=seed)
    adv = evaluate_robustness(net, holdout, cfg.inner_attack, batch_size=cfg.batch_size, seed=seed)
    return clean, adv


def _final_table(net, data: Dataset, cfg: TrainConfig, seed):
    from .attacks import evaluate_robustness

    table = []
    for label in cfg.final_eval:
        spec = attack_from_label(label, epsilon=cfg.inner_attack.epsilon,
                                 alpha=cfg.inner_attack.alpha)
        acc = evaluate_robustness(net, data.test, spec, batch_size=cfg.batch_size, seed=seed)
        table.append((label, acc))
    return table


def _snapshot(net):
    return ([p.data.copy() for p in net.parameters()], [b.copy() for b in net.buffers()])


def _restore(net, snap):
    params, buffers = snap
    for p, saved in zip(net.parameters(), params):
        p.data[...] = saved
    for b, saved in zip(net.buffers(), buffers):
        b[...] = saved


def _train_loop(net, data: Dataset, cfg: TrainConfig, adversarial: bool):
    cfg.validate()
    mode_c = cfg.augmentation.startswith("C-")
    mode_a = cfg.augmentation.startswith("A-")
    if not adversarial and mode_a:
        # natural training has no adversarial stage; apply on the clean batch
        mode_c, mode_a = True, False

    ss = np.random.SeedSequence(cfg.seed)
    order_ss, attack_ss, augment_ss, eval_ss = ss.spawn(4)
    order_rng = np.random.default_rng(order_ss)
    attack_rng = np.random.default_rng(attack_ss)
    augment_rng = np.random.default_rng(augment_ss)
    eval_seed = int(np.random.default_rng(eval_ss).integers(2 ** 31))

    net.train(True)
    opt = SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    report = RunReport(provenance={
        "config_hash": config_fingerprint(cfg),
        "seed": cfg.seed,
        "tool_version": _tool_version(),
        "git_describe": git_describe(),
        "mode": "adversarial" if adversarial else "natural",
        "attack_bn_mode": "eval",
    })

    probe = probe_batch(data.train, cfg.batch_size) if cfg.probe_ratio else None
    if probe is not None:
        report.ratio_series.append((0, lfi_hfi_ratio(net.first_layer_activation(probe.images))))

    beta_a, beta_b = cfg.beta_params
    last_good = _snapshot(net)
    aborted = False

    for epoch in range(1, cfg.epochs + 1):
        opt.lr = lr_at_epoch(cfg, epoch)
        losses = []
        epoch_seed = int(order_rng.integers(2 ** 63))
        for batch in batches(data.train, cfg.batch_size, shuffle=cfg.shuffle, seed=epoch_seed):
            x, y = batch.images, batch.labels
            if cfg.standard_augment:
                x = crop_flip(x, augment_rng)
            soft = None
            if mode_c and cfg.augmentation != "none":
                mb = _apply_augmentation(cfg.augmentation, x, y, augment_rng, beta_a, beta_b)
                x = mb.images
                if mb.labels_mixed:
                    soft = mb.soft_labels(data.num_classes)
            if adversarial:
                net.eval()
                target = soft if soft is not None else y
                try:
                    x_train = run_attack(net, x, target, cfg.inner_attack, attack_rng).check().x_adv
                except RuntimeError as exc:
                    # a diverged model produces non-finite input gradients;
                    # treat it like a non-finite loss and keep the last good epoch
                    logger.warning("epoch %d aborted: %s", epoch, exc)
                    report.events.append(f"epoch {epoch} aborted: {exc}")
                    _restore(net, last_good)
                    aborted = True
                    net.train()
                    break
                net.train()
            else:
                x_train = x
            if mode_a and cfg.augmentation != "none":
                mb = _apply_augmentation(cfg.augmentation, x_train, y, augment_rng, beta_a, beta_b)
                x_train = mb.images
                soft = mb.soft_labels(data.num_classes) if mb.labels_mixed else None

            logits = net(Tensor(x_train))
            if soft is None:
                loss = T.cross_entropy(logits, y)
            else:
                loss = soft_label_bce_loss(logits, soft)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                logger.warning("epoch %d aborted: non-finite loss; restoring last good epoch", epoch)
                report.events.append(f"epoch {epoch} aborted: non-finite loss")
                _restore(net, last_good)
                aborted = True
                break
            losses.append(loss_val)
            opt.zero_grad()
            loss.backward()
            opt.step()
        if aborted:
            break

        last_good = _snapshot(net)
        clean_acc, adv_acc = _heldout_metrics(net, data, cfg, eval_seed)
        ratio = math.nan
        if probe is not None:
            ratio = lfi_hfi_ratio(net.first_layer_activation(probe.images))
            report.ratio_series.append((epoch, ratio))
        report.rows.append(EpochRow(epoch, float(np.mean(losses)) if losses else math.nan,
                                    clean_acc, adv_acc, ratio, opt.lr))

    report.final_table = _final_table(net, data, cfg, eval_seed)
    return net, report


def natural_train(net, data: Dataset, cfg: TrainConfig):
    """Cross-entropy minimization with the momentum-SGD schedule."""
    return _train_loop(net, data, cfg, adversarial=False)


def adversarial_train(net, data: Dataset, cfg: TrainConfig):
    """Min-max training: every batch is replaced by attack examples generated
    against the current weights (eval-mode batchnorm), and only the
    adversarial batch contributes to the loss."""
    return _train_loop(net, data, cfg, adversarial=True)


def _tool_version():
    from . import __version__

    return __version__
