"""Subcommand CLI wiring configs to experiments and emitting reports, spectra
images, CKA maps and checkpoints.

Exit codes: 0 success, 1 config error, 2 runtime/numerical error, 3 partial
sweep failure. FREQLENS_THREADS caps sweep parallelism.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, fileio
from .attacks import accuracy_under_attack, attack_from_label, run_attack
from .checkpoint import CheckpointError, load_checkpoint, read_metadata, save_checkpoint
from .cka import cka_matrix, shallow_deep_similarity
from .config import ConfigError, load_config
from .data import probe_batch
from .nn import Conv2d, LowPassModel
from .spectral import (
    dft2_magnitude,
    hf_energy_fraction,
    kernel_spectrum,
    lfi_hfi_ratio,
    spectrum_diff,
)
from .training import adversarial_train, natural_train


def _provenance(cfg, extra=None):
    prov = {"config_hash": cfg.config_hash(), "seed": cfg.get("run", "seed"),
            "tool_version": __version__}
    prov.update(extra or {})
    return prov


def _out_dir(cfg, args):
    return Path(getattr(args, "out_dir", None) or cfg.get("run", "out_dir"))


# -- train --------------------------------------------------------------------


def cmd_train(args):
    cfg = load_config(args.config, args.set or ())
    dataset = cfg.dataset()
    net = cfg.model(dataset.num_classes)
    tc = cfg.train_config()
    runner = adversarial_train if cfg.get("run", "mode") == "adversarial" else natural_train
    net, report = runner(net, dataset, tc)
    report.provenance["config_hash"] = cfg.config_hash()
    out_dir = _out_dir(cfg, args)
    paths = report.to_files(out_dir)
    ckpt = out_dir / f"checkpoint-{cfg.config_hash()}.fql"
    save_checkpoint(net, ckpt, seed=tc.seed, epoch=len(report.rows),
                    extra={"config_hash": cfg.config_hash(), "tool_version": __version__})
    for event in report.events:
        print(f"event: {event}")
    for label, acc in report.final_table:
        print(f"{label}: {acc:.4f}")
    print(f"checkpoint: {ckpt}")
    print(f"metrics: {paths['metrics']}")
    return 0


# -- eval ---------------------------------------------------------------------


def _eval_rows(net, dataset, cfg):
    g = cfg.get
    degree = g("eval", "lpf_degree")
    oblivious = g("eval", "oblivious_lpf")
    predict_net = LowPassModel(net, degree) if degree else net
    attack_net = net if (degree and oblivious) else predict_net
    rows = []
    for label in g("eval", "attacks"):
        spec = attack_from_label(label,
                                 epsilon=g("inner_attack", "epsilon"),
                                 alpha=g("inner_attack", "alpha"),
                                 sigma=g("eval", "gn_sigma"),
                                 kappa=g("eval", "kappa"))
        acc = accuracy_under_attack(attack_net, predict_net, dataset.test, spec,
                                    batch_size=g("eval", "batch_size"),
                                    seed=g("eval", "seed"))
        rows.append((label, acc))
    return rows


def cmd_eval(args):
    cfg = load_config(args.config, args.set or ())
    if args.lpf_degree is not None:
        cfg.set_raw("eval", "lpf_degree", str(args.lpf_degree))
    net, meta = load_checkpoint(args.checkpoint)
    dataset = cfg.dataset()
    rows = _eval_rows(net, dataset, cfg)
    out_dir = _out_dir(cfg, args)
    path = out_dir / f"evaltable-{cfg.config_hash()}.csv"
    fileio.write_csv(path, ["attack", "accuracy"],
                     [[label, f"{acc:.9g}"] for label, acc in rows],
                     provenance=_provenance(cfg, {"checkpoint_epoch": meta.get("epoch", "?")}))
    for label, acc in rows:
        print(f"{label}: {acc:.4f}")
    print(f"table: {path}")
    return 0


# -- spectra ------------------------------------------------------------------


def _save_map(spec_map, out_dir, stem, prov):
    from .spectral import save_spectrum_map

    save_spectrum_map(spec_map, csv_path=out_dir / f"{stem}.csv",
                      pgm_path=out_dir / f"{stem}.pgm", provenance=prov)


def cmd_spectra(args):
    cfg = load_config(args.config, args.set or ())
    out_dir = _out_dir(cfg, args)
    prov = _provenance(cfg, {"mode": args.mode})

    if args.mode == "input-diff":
        if not args.attack:
            raise ConfigError("input-diff mode needs --attack (e.g. pgd20)")
        net, _ = load_checkpoint(args.checkpoint)
        dataset = cfg.dataset()
        batch = probe_batch(dataset.test, cfg.get("eval", "batch_size"))
        spec = attack_from_label(args.attack, epsilon=cfg.get("inner_attack", "epsilon"),
                                 alpha=cfg.get("inner_attack", "alpha"))
        adv = run_attack(net, batch.images, batch.labels, spec,
                         np.random.default_rng(cfg.get("eval", "seed"))).check()
        norm = "log1p-minmax"
        clean_mean = _batch_mean_spectrum(batch.images, norm)
        adv_mean = _batch_mean_spectrum(adv.x_adv, norm)
        _save_map(clean_mean, out_dir, "input-clean", prov)
        _save_map(adv_mean, out_dir, "input-adv", prov)
        _save_map(spectrum_diff(batch.images, adv.x_adv, mode=args.diff_mode,
                                normalization=norm), out_dir, "input-diff", prov)
        print(f"wrote input-clean/input-adv/input-diff under {out_dir}")
        return 0

    if args.mode == "kernel":
        net, _ = load_checkpoint(args.checkpoint)
        rows = []
        for _, mod in net.named_modules():
            if not isinstance(mod, Conv2d):
                continue
            w = mod.effective_weight().data
            spec = kernel_spectrum(w)
            fileio.write_pgm(out_dir / f"kernel-{mod.name}.pgm", spec, provenance=prov)
            band = args.band if args.band is not None else spec.shape[1] // 4
            frac = float(np.mean([hf_energy_fraction(r, band) for r in spec]))
            rows.append([mod.name, spec.shape[0], spec.shape[1], band, f"{frac:.9g}"])
        fileio.write_csv(out_dir / "kernel-hf-energy.csv",
                         ["layer", "c_out", "row_len", "band", "hf_energy_fraction"],
                         rows, provenance=prov)
        print(f"wrote {len(rows)} kernel maps + kernel-hf-energy.csv under {out_dir}")
        return 0

    if args.mode == "activation-ratio":
        if args.report:
            prov_in, fields, rows = fileio.read_csv(args.report)
            cols = {name: i for i, name in enumerate(fields)}
            series = [[r[cols["epoch"]], r[cols["ratio"]]] for r in rows]
            fileio.write_csv(out_dir / "ratio-series.csv", ["epoch", "ratio"], series,
                             provenance={**prov, "source_report": str(args.report)})
            print(f"wrote ratio-series.csv ({len(series)} rows) under {out_dir}")
            return 0
        net, meta = load_checkpoint(args.checkpoint)
        dataset = cfg.dataset()
        batch = probe_batch(dataset.train, cfg.get("run", "batch_size"))
        ratio = lfi_hfi_ratio(net.first_layer_activation(batch.images))
        fileio.write_csv(out_dir / "ratio-series.csv", ["epoch", "ratio"],
                         [[meta.get("epoch", 0), f"{ratio:.9g}"]], provenance=prov)
        print(f"ratio: {ratio:.4f}")
        return 0

    raise ConfigError(f"unknown spectra mode {args.mode!r}")


def _batch_mean_spectrum(images, norm):
    from .spectral import SpectrumMap, _normalize

    mags = [dft2_magnitude(img, normalization="raw").values for img in images]
    return SpectrumMap(_normalize(np.mean(mags, axis=0), norm), norm)


# -- cka ----------------------------------------------------------------------


def cmd_cka(args):
    cfg = load_config(args.config, args.set or ())
    net, _ = load_checkpoint(args.checkpoint)
    dataset = cfg.dataset()
    batch = probe_batch(dataset.test, args.cka_batch)
    images = batch.images
    prov = _provenance(cfg)
    if args.attack:
        spec = attack_from_label(args.attack, epsilon=cfg.get("inner_attack", "epsilon"),
                                 alpha=cfg.get("inner_attack", "alpha"))
        images = run_attack(net, images, batch.labels, spec,
                            np.random.default_rng(cfg.get("eval", "seed"))).check().x_adv
        prov["attack"] = args.attack
    matrix = cka_matrix(net, images, pre_activation=args.pre_activation)
    out_dir = _out_dir(cfg, args)
    matrix.save(csv_path=out_dir / "cka-matrix.csv", pgm_path=out_dir / "cka-matrix.pgm",
                provenance=prov)
    sim = shallow_deep_similarity(matrix, split=args.split)
    fileio.write_csv(out_dir / "cka-summary.csv", ["split", "shallow_deep_similarity"],
                     [[args.split, f"{sim:.9g}"]], provenance=prov)
    print(f"layers: {len(matrix.layer_ids)}  shallow-deep similarity: {sim:.4f}")
    return 0


# -- sweep --------------------------------------------------------------------


def _sweep_row(axis, value, cfg_path, overrides, checkpoint):
    """One sweep row: (value, [(label, acc), ...]). Trains when the axis is a
    training knob; reevaluates the given checkpoint for lpf_degree."""
    cfg = load_config(cfg_path, overrides)
    if axis == "lpf_degree":
        cfg.set_raw("eval", "lpf_degree", str(value))
        net, _ = load_checkpoint(checkpoint)
        dataset = cfg.dataset()
        return _eval_rows(net, dataset, cfg)

    if axis == "batch_size":
        cfg.set_raw("run", "batch_size", str(value))
    elif axis == "quant_bits":
        if "+fat" in str(value):
            cfg.set_raw("model", "quant_bits", str(value).replace("+fat", ""))
            cfg.set_raw("model", "fat", "true")
        else:
            cfg.set_raw("model", "quant_bits", str(value))
    elif axis == "augmentation":
        cfg.set_raw("run", "augmentation", str(value))
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")

    dataset = cfg.dataset()
    net = cfg.model(dataset.num_classes)
    tc = cfg.train_config()
    runner = adversarial_train if cfg.get("run", "mode") == "adversarial" else natural_train
    net, _ = runner(net, dataset, tc)
    return _eval_rows(net, dataset, cfg)


def cmd_sweep(args):
    cfg = load_config(args.config, args.set or ())
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep needs at least one --values entry")
    if args.axis == "lpf_degree" and not args.checkpoint:
        raise ConfigError("lpf_degree sweep needs --checkpoint")

    threads = max(1, int(os.environ.get("FREQLENS_THREADS", "1")))
    results = {}
    errors = {}

    def work(value):
        return _sweep_row(args.axis, value, args.config, args.set or (), args.checkpoint)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {v: pool.submit(work, v) for v in values}
            for v, fut in futures.items():
                try:
                    results[v] = fut.result()
                except Exception as exc:  # noqa: BLE001 - row failures must not kill the sweep
                    errors[v] = str(exc)
    else:
        for v in values:
            try:
                results[v] = work(v)
            except Exception as exc:  # noqa: BLE001
                errors[v] = str(exc)

    columns = None
    for v in values:
        if v in results:
            columns = [label for label, _ in results[v]]
            break
    if columns is None:
        print("sweep failed on every value", file=sys.stderr)
        for v, msg in errors.items():
            print(f"  {v}: {msg}", file=sys.stderr)
        return 2

    rows = []
    for v in values:
        if v in results:
            rows.append([v] + [f"{acc:.9g}" for _, acc in results[v]])
        else:
            rows.append([v] + [f"error:{errors[v]}"] * len(columns))
    out_dir = _out_dir(cfg, args)
    path = out_dir / f"sweep-{args.axis}-{cfg.config_hash()}.csv"
    fileio.write_csv(path, [args.axis] + columns, rows,
                     provenance=_provenance(cfg, {"axis": args.axis}))
    print(f"sweep table: {path}")
    if errors:
        for v, msg in errors.items():
            print(f"row {v} failed: {msg}", file=sys.stderr)
        return 3
    return 0


# -- inspect ------------------------------------------------------------------


def cmd_inspect(args):
    meta, payload = read_metadata(args.checkpoint)
    print(f"model: {meta.get('model')}")
    print(f"seed: {meta.get('seed')}  epoch: {meta.get('epoch')}")
    print(f"config_hash: {meta.get('config_hash', '-')}")
    print(f"tensors: {len(meta.get('tensors', []))}  payload: {len(payload)} bytes")
    for t in meta.get("tensors", []):
        print(f"  {t['kind']:6s} {t['name']:32s} {t['shape']}")
    return 0


# -- entry point ----------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="freqlens",
                                     description="adversarial robustness lab with Fourier analyses")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("-c", "--config", required=True, help="experiment config file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config value")
        p.add_argument("--out-dir", default=None)

    p = sub.add_parser("train", help="run natural or adversarial training")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="accuracy table for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lpf-degree", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("spectra", help="frequency-domain artifacts")
    common(p)
    p.add_argument("--mode", required=True, choices=["input-diff", "kernel", "activation-ratio"])
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--attack", default="pgd20")
    p.add_argument("--diff-mode", default="spectrum-of-diff",
                   choices=["spectrum-of-diff", "diff-of-spectra"])
    p.add_argument("--band", type=int, default=None)
    p.add_argument("--report", default=None, help="metrics CSV to distill a ratio series from")
    p.set_defaults(fn=cmd_spectra)

    p = sub.add_parser("cka", help="layer similarity matrix")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attack", default="pgd20")
    p.add_argument("--no-attack", dest="attack", action="store_const", const=None)
    p.add_argument("--cka-batch", type=int, default=64)
    p.add_argument("--split", type=float, default=0.25)
    p.add_argument("--pre-activation", action="store_true")
    p.set_defaults(fn=cmd_cka)

    p = sub.add_parser("sweep", help="run a command across an axis and merge tables")
    common(p)
    p.add_argument("--axis", required=True,
                   choices=["lpf_degree", "batch_size", "quant_bits", "augmentation"])
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("inspect-checkpoint", help="print checkpoint metadata")
    p.add_argument("checkpoint")
    p.set_defaults(fn=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
