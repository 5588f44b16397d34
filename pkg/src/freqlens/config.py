"""Sectioned key-value experiment configs: parsing, validation with line
numbers, hashing, and construction of datasets/models/train configs."""

from __future__ import annotations

import hashlib
from pathlib import Path

from .attacks import AttackSpec
from .data import load_cifar10_bin, synth_dataset, take_classes
from .nn import build_resnet
from .training import AUGMENTATIONS, TrainConfig


class ConfigError(ValueError):
    pass


def _parse_bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_decay(s):
    out = []
    s = s.strip()
    if not s:
        return ()
    for part in s.split(","):
        epoch, _, factor = part.partition(":")
        out.append((int(epoch), float(factor)))
    return tuple(out)


def _parse_list(s):
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _parse_intlist(s):
    return tuple(int(p) for p in _parse_list(s))


# (section, key) -> (converter, default)
SCHEMA = {
    ("run", "mode"): (str, "natural"),
    ("run", "seed"): (int, 0),
    ("run", "out_dir"): (str, "runs/out"),
    ("run", "epochs"): (int, 120),
    ("run", "batch_size"): (int, 512),
    ("run", "lr"): (float, 0.1),
    ("run", "momentum"): (float, 0.9),
    ("run", "weight_decay"): (float, 5e-4),
    ("run", "lr_decay"): (_parse_decay, ((60, 0.1), (90, 0.1), (110, 0.5))),
    ("run", "augmentation"): (str, "none"),
    ("run", "beta_a"): (float, 1.0),
    ("run", "beta_b"): (float, 1.0),
    ("run", "probe_ratio"): (_parse_bool, False),
    ("run", "standard_augment"): (_parse_bool, True),
    ("run", "shuffle"): (_parse_bool, True),
    ("run", "eval_subset"): (int, 128),
    ("run", "final_eval"): (_parse_list, ("natural", "pgd20")),
    ("model", "depth_blocks"): (int, 3),
    ("model", "width"): (int, 1),
    ("model", "quant_bits"): (int, 32),
    ("model", "fat"): (_parse_bool, False),
    ("data", "source"): (str, "synth"),
    ("data", "size"): (int, 16),
    ("data", "classes"): (int, 2),
    ("data", "n_per_class_train"): (int, 100),
    ("data", "n_per_class_test"): (int, 25),
    ("data", "synth_seed"): (int, 7),
    ("data", "lf_amp"): (float, 0.15),
    ("data", "hf_amp"): (float, 0.06),
    ("data", "noise_amp"): (float, 0.03),
    ("data", "train_files"): (_parse_list, ()),
    ("data", "test_files"): (_parse_list, ()),
    ("data", "subset_classes"): (_parse_intlist, ()),
    ("data", "subset_train"): (int, 0),
    ("data", "subset_test"): (int, 0),
    ("inner_attack", "kind"): (str, "pgd"),
    ("inner_attack", "epsilon"): (float, 8.0 / 255.0),
    ("inner_attack", "alpha"): (float, 2.0 / 255.0),
    ("inner_attack", "steps"): (int, 7),
    ("inner_attack", "random_start"): (_parse_bool, True),
    ("inner_attack", "sigma"): (float, 0.1),
    ("inner_attack", "kappa"): (float, 0.0),
    ("eval", "attacks"): (_parse_list, ("natural", "gn", "fgsm", "pgd20", "bim20", "tpgd20", "cw20")),
    ("eval", "lpf_degree"): (int, 0),
    ("eval", "oblivious_lpf"): (_parse_bool, False),
    ("eval", "batch_size"): (int, 128),
    ("eval", "seed"): (int, 0),
    ("eval", "gn_sigma"): (float, 0.1),
    ("eval", "kappa"): (float, 0.0),
}


class ExperimentConfig:
    """Resolved experiment settings; unknown keys are rejected at parse time
    and the hash covers every resolved value."""

    def __init__(self, values=None):
        self.values = {key: default for key, (_, default) in SCHEMA.items()}
        for key, value in (values or {}).items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key[0]}.{key[1]}")
            self.values[key] = value

    def get(self, section, key):
        return self.values[(section, key)]

    def set_raw(self, section, key, raw, lineno=None):
        where = f" (line {lineno})" if lineno is not None else ""
        if (section, key) not in SCHEMA:
            raise ConfigError(f"unknown config key {section}.{key}{where}")
        conv, _ = SCHEMA[(section, key)]
        try:
            self.values[(section, key)] = conv(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {section}.{key}{where}: {exc}") from exc

    def config_hash(self):
        lines = sorted(f"{s}.{k}={self.values[(s, k)]!r}" for s, k in self.values)
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]

    # -- construction helpers ------------------------------------------------

    def dataset(self):
        g = self.get
        if g("data", "source") == "synth":
            return synth_dataset(seed=g("data", "synth_seed"),
                                 n_per_class_train=g("data", "n_per_class_train"),
                                 classes=g("data", "classes"),
                                 size=g("data", "size"),
                                 n_per_class_test=g("data", "n_per_class_test"),
                                 lf_amp=g("data", "lf_amp"),
                                 hf_amp=g("data", "hf_amp"),
                                 noise_amp=g("data", "noise_amp"))
        if g("data", "source") == "cifar10":
            ds = load_cifar10_bin(g("data", "train_files"), g("data", "test_files"))
            subset = g("data", "subset_classes")
            if subset:
                ds = take_classes(ds, subset,
                                  n_train=g("data", "subset_train") or None,
                                  n_test=g("data", "subset_test") or None)
            return ds
        raise ConfigError(f"unknown data source {self.get('data', 'source')!r}")

    def model(self, num_classes):
        return build_resnet(depth_blocks=self.get("model", "depth_blocks"),
                            width=self.get("model", "width"),
                            num_classes=num_classes,
                            quant_bits=self.get("model", "quant_bits"),
                            fat_enabled=self.get("model", "fat"),
                            seed=self.get("run", "seed"))

    def inner_attack(self):
        g = self.get
        return AttackSpec(kind=g("inner_attack", "kind"),
                          epsilon=g("inner_attack", "epsilon"),
                          alpha=g("inner_attack", "alpha"),
                          steps=g("inner_attack", "steps"),
                          random_start=g("inner_attack", "random_start"),
                          sigma=g("inner_attack", "sigma"),
                          kappa=g("inner_attack", "kappa"))

    def train_config(self):
        g = self.get
        if g("run", "augmentation") not in AUGMENTATIONS:
            raise ConfigError(f"unknown augmentation {g('run', 'augmentation')!r}")
        return TrainConfig(epochs=g("run", "epochs"),
                           batch_size=g("run", "batch_size"),
                           lr=g("run", "lr"),
                           momentum=g("run", "momentum"),
                           weight_decay=g("run", "weight_decay"),
                           lr_decay=g("run", "lr_decay"),
                           inner_attack=self.inner_attack(),
                           augmentation=g("run", "augmentation"),
                           beta_params=(g("run", "beta_a"), g("run", "beta_b")),
                           probe_ratio=g("run", "probe_ratio"),
                           seed=g("run", "seed"),
                           shuffle=g("run", "shuffle"),
                           standard_augment=g("run", "standard_augment"),
                           eval_subset=g("run", "eval_subset"),
                           final_eval=g("run", "final_eval")).validate()


def parse_config_text(text, origin="<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    section = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if not any(s == section for s, _ in SCHEMA):
                raise ConfigError(f"{origin}: unknown section [{section}] (line {lineno})")
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}: expected key = value (line {lineno}): {line!r}")
        if section is None:
            raise ConfigError(f"{origin}: key outside any [section] (line {lineno})")
        key, _, value = line.partition("=")
        try:
            cfg.set_raw(section, key.strip(), value.strip(), lineno=lineno)
        except ConfigError as exc:
            raise ConfigError(f"{origin}: {exc}") from exc
    return cfg


def load_config(path, overrides=()) -> ExperimentConfig:
    """Parse a config file and apply "section.key=value" override strings."""
    cfg = parse_config_text(Path(path).read_text(encoding="utf-8"), origin=str(path))
    apply_overrides(cfg, overrides)
    return cfg


def apply_overrides(cfg: ExperimentConfig, overrides):
    for item in overrides:
        dotted, _, value = item.partition("=")
        if not _ or "." not in dotted:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        section, _, key = dotted.partition(".")
        cfg.set_raw(section.strip(), key.strip(), value.strip())
    return cfg
