"""Command-line entry point.

Subcommands: gen-data, pretrain-codec, train, sample, eval.  Each accepts
``--config FILE`` holding ``key = value`` lines; precedence is built-in
defaults < preset < config file < flags.  Commands that write outputs also
write a ``resolved-config`` file listing every effective value, which can be
fed back through ``--config``.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .codec import TinyAE, pretrain_tiny_ae
from .data import DatasetManifest, generate_dataset, read_image
from .dit import PRESETS
from .errors import ContractError, DimensionError, FileError, ParameterError, ParseError, VersionError
from .rng import Rng
from .sampler import emit_grid, evaluate, generate
from .train import REFERENCE_TRAIN_PRESET, TrainConfig, restore, train


class UsageError(Exception):
    pass


def _bool(s):
    if isinstance(s, bool):
        return s
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# name -> (type, default, help); None default means "required" when listed in REQUIRED
OPTIONS = {
    "gen-data": {
        "seed": (int, 0, "dataset seed"),
        "train_n": (int, 64, "number of training pairs"),
        "test_n": (int, 8, "number of test pairs"),
        "size": (int, 32, "image side length"),
        "out": (str, None, "output directory"),
    },
    "pretrain-codec": {
        "data": (str, None, "training manifest"),
        "out": (str, None, "output directory"),
        "steps": (int, 1000, "optimisation steps"),
        "lr": (float, 1e-2, "learning rate"),
        "batch": (int, 32, "batch size"),
        "codec_factor": (int, 2, "spatial downsampling factor"),
        "codec_channels": (int, 4, "latent channels"),
        "seed": (int, 0, "seed"),
    },
    "train": {
        "data": (str, None, "training manifest"),
        "out": (str, None, "output directory"),
        "preset": (str, "desk", "desk or paper"),
        "iters": (int, 2000, "iterations"),
        "batch": (int, 16, "batch size"),
        "lr": (float, 1e-4, "learning rate"),
        "wd": (float, 1e-4, "weight decay"),
        "seed": (int, 0, "seed"),
        "T": (int, 200, "diffusion steps"),
        "beta_start": (float, 1e-4, "first beta"),
        "beta_end": (float, 0.02, "last beta"),
        "lambda_eps": (float, 1.0, "noise-MSE weight"),
        "lambda_rec": (float, 1.0, "L1 reconstruction weight"),
        "lambda_lpips": (float, 0.5, "perceptual weight"),
        "lambda_clip": (float, 0.1, "semantic weight"),
        "codec": (str, "identity", "identity or tiny-ae"),
        "codec_ckpt": (str, "", "pretrained tiny-ae checkpoint"),
        "codec_factor": (int, 2, "codec downsampling factor"),
        "codec_channels": (int, 4, "tiny-ae latent channels"),
        "hidden": (int, 128, "transformer width"),
        "depth": (int, 4, "number of blocks"),
        "heads": (int, 4, "attention heads"),
        "patch": (int, 2, "patch size"),
        "cond_dim": (int, 64, "semantic embedding size"),
        "checkpoint_every": (int, 0, "checkpoint interval (0: only at end)"),
        "log_every": (int, 50, "log interval"),
        "resume": (str, "", "checkpoint to resume from"),
    },
    "sample": {
        "checkpoint": (str, None, "model checkpoint"),
        "source": (str, "", "source PPM image"),
        "data": (str, "", "manifest whose sources are sampled"),
        "out": (str, None, "output grid PPM"),
        "mode": (str, "full", "full or partial"),
        "t_start": (int, -1, "partial-mode start step (default 3T/4)"),
        "seed": (int, 0, "sampling seed"),
    },
    "eval": {
        "checkpoint": (str, None, "model checkpoint"),
        "data": (str, None, "test manifest"),
        "out": (str, None, "output directory"),
        "mode": (str, "full", "full or partial"),
        "t_start": (int, -1, "partial-mode start step (default 3T/4)"),
        "seed": (int, 0, "sampling seed"),
    },
}

PRESET_VALUES = {
    "desk": {},
    "paper": {"lr": REFERENCE_TRAIN_PRESET["lr"], "wd": REFERENCE_TRAIN_PRESET["weight_decay"],
              "batch": REFERENCE_TRAIN_PRESET["batch_size"], "iters": REFERENCE_TRAIN_PRESET["iterations"]},
}


def parse_config_file(path, allowed):
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FileError(f"cannot read config {path}: {exc}") from exc
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, val = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in allowed:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        values[key] = val
    return values


def resolve(cmd, args):
    spec = OPTIONS[cmd]
    merged = {k: d for k, (_, d, _) in spec.items()}
    flags = {k: getattr(args, k) for k in spec if getattr(args, k) is not None}
    file_vals = parse_config_file(args.config, spec) if args.config else {}
    if cmd == "train":
        preset = flags.get("preset", file_vals.get("preset", merged["preset"]))
        if preset not in PRESET_VALUES:
            raise UsageError(f"unknown preset {preset!r}")
        merged.update(PRESET_VALUES[preset])
    merged.update(file_vals)
    merged.update(flags)
    out = {}
    for k, v in merged.items():
        typ = spec[k][0]
        if v is None:
            raise UsageError(f"missing required option --{k.replace('_', '-')}")
        try:
            out[k] = typ(v)
        except ValueError:
            raise UsageError(f"bad value for {k}: {v!r}") from None
    return out


def write_resolved(path, values):
    lines = [f"{k} = {values[k]}" for k in sorted(values)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def build_parser():
    parser = argparse.ArgumentParser(prog="i2idit", description="Image-conditioned diffusion transformer toolkit")
    sub = parser.add_subparsers(dest="cmd", required=True)
    for cmd, spec in OPTIONS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", default=None, help="key = value config file")
        for k, (typ, default, help_) in spec.items():
            p.add_argument("--" + k.replace("_", "-"), dest=k, type=typ, default=None,
                           help=f"{help_} (default: {default})" if default is not None else f"{help_} (required)")
    return parser


def _log(msg):
    print(msg, flush=True)


# ---------------------------------------------------------------- commands

def cmd_gen_data(v):
    out = Path(v["out"])
    train_m, test_m = generate_dataset(v["seed"], v["train_n"], v["test_n"], v["size"], out)
    write_resolved(out / "resolved-config", v)
    print(out / "train.manifest")
    print(out / "test.manifest")
    return 0


def cmd_pretrain_codec(v):
    manifest = DatasetManifest.load(v["data"])
    src, tgt, _ = manifest.load_arrays()
    images = np.concatenate([src, tgt])
    codec = TinyAE(v["codec_factor"], v["codec_channels"], seed=v["seed"])
    codec = pretrain_tiny_ae(images, v["steps"], Rng(v["seed"]).split("pretrain"), codec=codec,
                             lr=v["lr"], batch_size=v["batch"], log=_log)
    out = Path(v["out"])
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Checkpoint(config={"codec": "tiny-ae", "codec_factor": v["codec_factor"],
                              "codec_channels": v["codec_channels"], "final_mse": codec.final_mse},
                      params={}, codec_params={n: p.data for n, p in codec.weights().items()})
    save_checkpoint(out / "codec.ckpt", ckpt)
    write_resolved(out / "resolved-config", v)
    _log(f"reconstruction mse {codec.final_mse:.6f}")
    print(out / "codec.ckpt")
    return 0


def _load_codec(path, factor, channels):
    ckpt = load_checkpoint(path)
    codec = TinyAE(factor, channels)
    for name, p in codec.weights().items():
        if name not in ckpt.codec_params or ckpt.codec_params[name].shape != p.shape:
            raise DimensionError(f"codec checkpoint lacks parameter {name} with shape {p.shape}")
        p.data[...] = ckpt.codec_params[name]
    codec.freeze()
    codec.final_mse = ckpt.config.get("final_mse", 0.0)
    return codec


def cmd_train(v):
    manifest = DatasetManifest.load(v["data"])
    codec_kind = "tiny-ae" if v["codec"] in ("tiny-ae", "tiny_ae") else v["codec"]
    probe = TrainConfig(image_size=manifest.image_size, codec=codec_kind, codec_factor=v["codec_factor"],
                        codec_channels=v["codec_channels"])
    model = replace(probe.model, hidden_size=v["hidden"], depth=v["depth"], num_heads=v["heads"],
                    patch_size=v["patch"], cond_dim=v["cond_dim"])
    config = TrainConfig(
        iterations=v["iters"], batch_size=v["batch"], lr=v["lr"], weight_decay=v["wd"],
        lambda_rec=v["lambda_rec"], lambda_lpips=v["lambda_lpips"], lambda_clip=v["lambda_clip"],
        lambda_eps=v["lambda_eps"], T=v["T"], beta_start=v["beta_start"], beta_end=v["beta_end"],
        image_size=manifest.image_size, codec=codec_kind, codec_factor=v["codec_factor"],
        codec_channels=v["codec_channels"], model=model, seed=v["seed"],
        checkpoint_every=v["checkpoint_every"], log_every=v["log_every"])
    codec = None
    if codec_kind == "tiny-ae":
        if not v["codec_ckpt"]:
            raise UsageError("--codec tiny-ae needs --codec-ckpt from pretrain-codec")
        codec = _load_codec(v["codec_ckpt"], v["codec_factor"], v["codec_channels"])
    out = Path(v["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(out / "resolved-config", v)
    ckpt, _ = train(config, manifest, resume=v["resume"] or None, out_dir=out, codec=codec, log=_log)
    _log(f"finished at step {ckpt.step}; checkpoint {out / 'final.ckpt'}")
    return 0


def _t_start(v, T):
    if v["mode"] not in ("full", "partial"):
        raise UsageError(f"unknown mode {v['mode']!r}")
    if v["mode"] == "partial" and v["t_start"] != -1 and not (0 < v["t_start"] < T):
        raise UsageError(f"--t-start must lie in (0, {T}), got {v['t_start']}")
    return None if v["t_start"] == -1 else v["t_start"]


def cmd_sample(v):
    if bool(v["source"]) == bool(v["data"]):
        raise UsageError("give exactly one of --source or --data")
    ckpt = load_checkpoint(v["checkpoint"])
    config, comp = restore(ckpt)
    t_start = _t_start(v, config.T)
    if v["source"]:
        sources = read_image(v["source"])[None]
        targets = None
    else:
        sources, targets, _ = DatasetManifest.load(v["data"]).load_arrays()
    outputs = generate(comp, sources, v["mode"], t_start, Rng(v["seed"]).split("sample"))
    blank = np.ones_like(sources)
    triples = list(zip(sources, outputs, targets if targets is not None else blank))
    out = Path(v["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    emit_grid(triples, out)
    write_resolved(out.parent / "resolved-config", v)
    print(out)
    return 0


def cmd_eval(v):
    ckpt = load_checkpoint(v["checkpoint"])
    t_start = _t_start(v, int(ckpt.config.get("T", 0)))
    out = Path(v["out"])
    report = evaluate(v["data"], ckpt, v["mode"], t_start, v["seed"], out)
    write_resolved(out / "resolved-config", v)
    m = report.mean
    _log(f"{report.count} samples: psnr {m['psnr_db']:.2f} dB, l1 {m['l1']:.4f}, "
         f"cos_src {m['cos_src']:.4f}, cos_tgt {m['cos_tgt']:.4f}")
    print(out / "eval.csv")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "pretrain-codec": cmd_pretrain_codec, "train": cmd_train,
            "sample": cmd_sample, "eval": cmd_eval}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        values = resolve(args.cmd, args)
        return COMMANDS[args.cmd](values)
    except (UsageError, ParameterError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (FileError, ParseError, VersionError, DimensionError, ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
