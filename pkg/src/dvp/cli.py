"""Command-line entry point: ``dvp <subcommand> [flags]``.

Settings come from an optional flat ``key = value`` file (``--config``),
``--set key=value`` overrides and the per-command flags, in that order of
precedence (flags win). Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config registry


def _registry():
    """Dotted key -> default value, built from the module config dataclasses."""
    from .data import DatasetConfig, GeneratorConfig
    from .renderer import RasterSettings
    from .training import TrainConfig

    reg = {}
    for f in dataclasses.fields(DatasetConfig):
        if f.name != "generator":
            reg[f"data.{f.name}"] = getattr(DatasetConfig(), f.name)
    reg["data.workers"] = 1
    for f in dataclasses.fields(GeneratorConfig):
        reg[f"gen.{f.name}"] = getattr(GeneratorConfig(), f.name)
    skip = {"indices", "raster_tau", "raster_samples"}
    tc = TrainConfig()
    for f in dataclasses.fields(TrainConfig):
        if f.name not in skip:
            reg[f"train.{f.name}"] = getattr(tc, f.name)
    rs = RasterSettings()
    for f in dataclasses.fields(RasterSettings):
        if f.name not in ("height", "width"):  # tied to the image size
            reg[f"raster.{f.name}"] = getattr(rs, f.name)
    reg.update({"eval.batch_size": 128, "eval.exclude_empty": False, "eval.seed": 0,
                "eval.calib_per_class": 100})
    return reg


# Optional numeric settings whose default is None
_OPTIONAL_FLOAT = {"train.freeze_kimg", "train.balance_off_kimg"}
_OPTIONAL_INT = {"train.sharpen_start_epoch", "train.val_limit"}


def _parse_value(key, text, default):
    t = text.strip()
    try:
        if t.lower() == "none" and (default is None or key in _OPTIONAL_FLOAT | _OPTIONAL_INT):
            return None
        if isinstance(default, bool):
            if t.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(t)
            return t.lower() in ("true", "1", "yes")
        if isinstance(default, int) or key in _OPTIONAL_INT:
            return int(t)
        if isinstance(default, float) or key in _OPTIONAL_FLOAT:
            return float(t)
        if isinstance(default, tuple):
            items = [v.strip() for v in t.split(",") if v.strip()]
            if default and isinstance(default[0], str):
                return tuple(items)
            return tuple(float(v) for v in items)
        return t
    except ValueError:
        raise UsageError(f"bad value for {key}: {text!r}") from None


def _format_value(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def read_config_file(path):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def merge_config(file_values=None, overrides=None, flags=None):
    """Effective config: defaults < file < --set < flags. Unknown keys are rejected."""
    reg = _registry()
    cfg = dict(reg)
    for source in (file_values or {}, overrides or {}):
        for k, v in source.items():
            if k not in reg:
                raise UsageError(f"unknown config key {k!r}")
            cfg[k] = _parse_value(k, v, reg[k]) if isinstance(v, str) else v
    for k, v in (flags or {}).items():
        if k not in reg:
            raise UsageError(f"unknown config key {k!r}")
        if v is not None:
            cfg[k] = v
    return cfg


def format_config(cfg):
    return "".join(f"{k} = {_format_value(cfg[k])}\n" for k in sorted(cfg))


def _section(cfg, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


# ---------------------------------------------------------------- builders


def _dataset_config(cfg):
    from .data import DatasetConfig, GeneratorConfig

    gen = GeneratorConfig(**_section(cfg, "gen"))
    d = _section(cfg, "data")
    d.pop("workers")
    return DatasetConfig(generator=gen, **d)


def _train_config(cfg):
    from .training import TrainConfig

    t = _section(cfg, "train")
    r = _section(cfg, "raster")
    return TrainConfig(raster_tau=r["tau"], raster_samples=r["samples"], **t)


def _load(ckpt):
    from .training import load_model

    return load_model(ckpt)


def _file_id(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


# ---------------------------------------------------------------- commands


def cmd_gen_data(a, cfg):
    from .data import build_dataset

    m = build_dataset(_dataset_config(cfg), a.out, workers=cfg["data.workers"])
    print(json.dumps(m["counts"], sort_keys=True))


def cmd_train(a, cfg):
    from .training import train

    tc = _train_config(cfg)
    if not tc.data:
        raise UsageError("train needs --data DIR")
    res = train(tc, out=a.out, log_path=a.log, resume=a.resume)
    last = res.log[-1] if res.log else {}
    print(json.dumps({k: v for k, v in last.items() if v != ""}, sort_keys=True))


def _eval_split(a):
    if a.oos:
        return "oos"
    return a.split


def _calibration(ds, model, per_class):
    from .metrics import calibrate_classifier, calibration_slice, classify

    val_specs = ds.labels("val")
    idx = calibration_slice(val_specs, per_class)
    ids = classify(model, ds.images("val")[idx])
    return calibrate_classifier(ids.tolist(), [val_specs[i].category for i in idx],
                                model.dsl.Prototype.n_prototypes)


def cmd_eval(a, cfg):
    from PIL import Image

    from .data import Dataset, to_float
    from .metrics import background_color_error, classify, evaluate, ground_truth_masks, noise_sweep
    from .metrics import write_csv, write_report

    model = _load(a.ckpt)
    ds = Dataset(a.data)
    split = _eval_split(a)
    if split not in ds.manifest["splits"]:
        raise UsageError(f"dataset has no {split!r} split" + (" (generate it with --oos)" if a.oos else ""))
    images, specs = ds.images(split), ds.labels(split)
    gt = ground_truth_masks(specs, ds.generator_config)
    rep, preds = evaluate(model, images, specs, gt, batch_size=cfg["eval.batch_size"],
                          exclude_empty=cfg["eval.exclude_empty"])
    bg_err = background_color_error(to_float(images), preds["bg"], gt)
    rep.info.update(split=split, checkpoint=str(a.ckpt), checkpoint_id=_file_id(a.ckpt),
                    data=str(a.data), config=model.config,
                    bg_color_error_mean=float(bg_err.mean()), bg_color_error_max=float(bg_err.max()))
    if model.uses_prototypes and split != "oos":
        mapping = _calibration(ds, model, cfg["eval.calib_per_class"])
        _, pred = classify(model, images, mapping)
        rep.accuracy = float(np.mean([p == s.category for p, s in zip(pred, specs)]))
        rep.info["calibration"] = {str(k): v for k, v in mapping.items()}
    rows = [{"split": split, "sigma": 0.0, **rep.aggregate()}]
    if a.noise:
        sig = [float(s) for s in a.noise.split(",")]
        rows = [{"split": split, **r} for r in noise_sweep(model, images, specs, sig, cfg["eval.seed"], gt)]
        rep.info["noise"] = rows
    if a.out:
        write_report(rep, a.out)
    if a.csv:
        write_csv(rows, a.csv)
    if a.masks:
        mdir = Path(a.out).with_suffix("") if a.out else Path("masks")
        mdir = mdir.parent / (mdir.name + "_masks")
        mdir.mkdir(parents=True, exist_ok=True)
        for s, m in zip(specs, preds["mask"]):
            Image.fromarray((m * 255).astype(np.uint8), "L").save(mdir / f"{s.id}.png")
    print(json.dumps(rep.aggregate(), sort_keys=True))


def _read_png(path):
    from PIL import Image

    img = np.asarray(Image.open(path).convert("RGB"))
    return img.transpose(2, 0, 1)[None].copy()


def cmd_render(a, cfg):
    from PIL import Image

    from .data import to_float, to_uint8

    model = _load(a.ckpt)
    img = _read_png(a.image)
    size = model.config["image_size"]
    if img.shape[2:] != (size, size):
        raise UsageError(f"model expects {size}x{size} images, got {img.shape[2]}x{img.shape[3]}")
    recon = model.predict(to_float(img))["recon"][0]
    pair = np.concatenate([img[0], to_uint8(recon)], axis=2).transpose(1, 2, 0)
    out = Image.fromarray(np.ascontiguousarray(pair), "RGB")
    if a.zoom > 1:
        out = out.resize((out.width * a.zoom, out.height * a.zoom), Image.NEAREST)
    out.save(a.out)


def cmd_classify(a, cfg):
    from .data import Dataset
    from .metrics import classify

    model = _load(a.ckpt)
    if not model.uses_prototypes:
        raise UsageError("classify needs a checkpoint trained with a Prototype program")
    ds = Dataset(a.data)
    mapping = _calibration(ds, model, cfg["eval.calib_per_class"])
    specs = ds.labels(a.split)
    idx, pred = classify(model, ds.images(a.split), mapping)
    acc = float(np.mean([p == s.category for p, s in zip(pred, specs)]))
    out = {"accuracy": acc, "mapping": {str(k): v for k, v in mapping.items()},
           "predictions": [{"id": s.id, "prototype": int(i), "category": p} for s, i, p in zip(specs, idx, pred)]}
    if a.out:
        Path(a.out).write_text(json.dumps(out, indent=1), encoding="utf-8")
    print(json.dumps({"accuracy": acc}))


def cmd_prototypes(a, cfg):
    from PIL import Image

    from . import tensor as T
    from .data import Dataset, DatasetConfig, render_reference, split_specs, to_uint8
    from .metrics import prototype_usage, write_csv
    from .renderer import render_mask

    model = _load(a.ckpt)
    if not model.uses_prototypes:
        raise UsageError("prototypes needs a checkpoint trained with a Prototype program")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    bank = model.dsl.Prototype.bank.data
    masks = render_mask(T.Tensor(bank), model.raster)
    for p, m in enumerate(masks):
        img = Image.fromarray((m * 255).astype(np.uint8), "L")
        img.resize((img.width * a.zoom, img.height * a.zoom), Image.NEAREST).save(out / f"prototype_{p}.png")
    if a.data:
        images = Dataset(a.data).images(a.split)
    else:
        # no dataset given: a fresh synthetic sample
        specs = split_specs(DatasetConfig(n=a.n_samples, seed=cfg["data.seed"], split_fractions=(1.0, 0.0, 0.0)))
        images = np.stack([to_uint8(render_reference(s)) for s in specs["train"]])
    usage = prototype_usage(model, images)
    write_csv([{"prototype": p, "usage": float(u)} for p, u in enumerate(usage)], out / "usage.csv")
    print(json.dumps({"usage": [round(float(u), 4) for u in usage]}))


def cmd_noise_sweep(a, cfg):
    from .data import Dataset
    from .metrics import ground_truth_masks, noise_sweep, write_csv

    model = _load(a.ckpt)
    ds = Dataset(a.data)
    sig = [float(s) for s in a.sigmas.split(",")]
    specs = ds.labels(a.split)
    rows = noise_sweep(model, ds.images(a.split), specs, sig, cfg["eval.seed"],
                       ground_truth_masks(specs, ds.generator_config))
    write_csv(rows, a.out)
    for r in rows:
        print(json.dumps(r, sort_keys=True))


def cmd_gradcheck(a, cfg):
    from .gradcheck import GROUPS, run_suite

    groups = GROUPS if a.module == "all" else (a.module,)
    results = run_suite(groups, seed=cfg["train.seed"])
    bad = 0
    for name, err, tol in results:
        ok = err <= tol
        bad += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name:24s} rel_err={err:.3e} tol={tol:.0e}")
    if bad:
        raise RuntimeError(f"{bad} gradient check(s) failed")


# ---------------------------------------------------------------- argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _common(p):
    g = p.add_argument_group("configuration")
    g.add_argument("--config", metavar="FILE", help="flat key = value settings file")
    g.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], help="override one setting")
    g.add_argument("--seed", type=int, help="seed for all randomness of this command")
    g.add_argument("--print-config", action="store_true", help="print the effective settings and exit")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser():
    ap = _Parser(prog="dvp", description="Compositional shape autoencoder: data, training and evaluation.")
    ap.add_argument("--version", action="store_true", help="print build info and exit")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--n", type=int, help="number of examples (data.n)")
    p.add_argument("--oos", action="store_true", default=None, help="also write the out-of-sample split")
    p.add_argument("--workers", type=int, help="writer threads (data.workers)")
    _common(p)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--program", help="dvp-d, dvp-p or a program file")
    p.add_argument("--fraction", type=float, help="training subset: 1.0, 0.05 or 0.01")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--channels-scale", type=float, help="perception width multiplier")
    p.add_argument("--out", metavar="CKPT", help="checkpoint written after every epoch")
    p.add_argument("--log", metavar="CSV", help="per-epoch metrics log")
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--oos", action="store_true", help="evaluate the out-of-sample split")
    p.add_argument("--masks", action="store_true", help="write predicted masks next to the report")
    p.add_argument("--noise", metavar="S1,S2,...", help="also run a noise sweep at these sigmas")
    p.add_argument("--out", metavar="JSON", help="report path")
    p.add_argument("--csv", metavar="CSV", help="aggregate table path")
    _common(p)

    p = sub.add_parser("render", help="write input | reconstruction side by side")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="input PNG")
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--zoom", type=int, default=1, help="integer upscaling of the output")
    _common(p)

    p = sub.add_parser("classify", help="prototype classifier accuracy and predictions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", metavar="JSON")
    _common(p)

    p = sub.add_parser("prototypes", help="export prototype images and usage")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--data", metavar="DIR", help="dataset for usage (default: fresh synthetic sample)")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--n-samples", type=int, default=512, help="synthetic sample size without --data")
    p.add_argument("--zoom", type=int, default=4)
    _common(p)

    p = sub.add_parser("noise-sweep", help="metrics under additive Gaussian noise")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--sigmas", default="0,0.05,0.1,0.2,0.3,0.4")
    p.add_argument("--out", required=True, metavar="CSV")
    _common(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--module", default="all", choices=["all", "tensor", "efd", "renderer", "chain"])
    _common(p)
    return ap


# flag dest -> dotted config key
_FLAG_KEYS = {
    "gen-data": {"n": "data.n", "oos": "data.oos", "workers": "data.workers"},
    "train": {"data": "train.data", "program": "train.program", "fraction": "train.fraction",
              "epochs": "train.epochs", "batch": "train.batch", "lr": "train.lr",
              "channels_scale": "train.channels_scale"},
}
_SEED_KEYS = ("data.seed", "train.seed", "eval.seed")

COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "render": cmd_render,
    "classify": cmd_classify, "prototypes": cmd_prototypes, "noise-sweep": cmd_noise_sweep,
    "gradcheck": cmd_gradcheck,
}


def _overrides(items):
    out = {}
    for it in items:
        if "=" not in it:
            raise UsageError(f"--set expects KEY=VALUE, got {it!r}")
        k, v = it.split("=", 1)
        out[k.strip()] = v
    return out


def run(argv=None) -> int:
    ap = build_parser()
    try:
        a = ap.parse_args(argv)
        if a.version:
            import numba

            print(f"dvp {__version__} (python {sys.version.split()[0]}, numpy {np.__version__}, "
                  f"numba {numba.__version__})")
            return EXIT_OK
        if not a.command:
            ap.print_usage(sys.stderr)
            raise UsageError("missing subcommand")
        flags = {key: getattr(a, dest) for dest, key in _FLAG_KEYS.get(a.command, {}).items()}
        if a.seed is not None:
            flags.update({k: a.seed for k in _SEED_KEYS})
        cfg = merge_config(read_config_file(a.config) if a.config else None, _overrides(a.set), flags)
        if a.print_config:
            sys.stdout.write(format_config(cfg))
            return EXIT_OK
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    if a.verbose:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(asctime)s %(message)s")
    try:
        COMMANDS[a.command](a, cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
