"""Training loop, run configuration and checkpoint plumbing."""

import csv
import io
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .codec import TinyAE, make_codec
from .data import DatasetManifest
from .dit import PRESETS, DiTConfig, DiTModel
from .errors import ContractError, DimensionError, ParameterError, VersionError
from .losses import LossWeights, PerceptualExtractor, total_loss
from .optim import AdamWState, adamw_step
from .rng import Rng
from .schedule import make_linear_schedule
from .semantic import SemanticEncoder
from .tensor import backward

CSV_COLUMNS = ("step", "loss_total", "loss_eps", "loss_rec", "loss_lpips", "loss_clip", "wall_seconds")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-4
    lambda_rec: float = 1.0
    lambda_lpips: float = 0.5
    lambda_clip: float = 0.1
    lambda_eps: float = 1.0
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    image_size: int = 32
    codec: str = "identity"
    codec_factor: int = 2
    codec_channels: int = 4
    model: DiTConfig = None
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ParameterError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.model is None:
            codec = make_codec(self.codec, self.codec_factor, self.codec_channels)
            C, h, _ = codec.latent_shape(self.image_size)
            object.__setattr__(self, "model", replace(PRESETS["desk"], in_channels=C, input_size=h))
        elif isinstance(self.model, dict):
            object.__setattr__(self, "model", DiTConfig(**self.model))

    @property
    def weights(self):
        return LossWeights(self.lambda_rec, self.lambda_lpips, self.lambda_clip, self.lambda_eps)

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise VersionError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)


# Reference hyperparameters behind `--preset paper`; far beyond desk scale.
REFERENCE_TRAIN_PRESET = dict(lr=1e-4, weight_decay=1e-4, batch_size=64, iterations=40000)


@dataclass
class Components:
    """Everything needed to run the model besides its trainable weights."""
    model: DiTModel
    codec: object
    encoder: SemanticEncoder
    perceptual: PerceptualExtractor
    sched: object


def build(config):
    codec = make_codec(config.codec, config.codec_factor, config.codec_channels, seed=config.seed)
    C, h, _ = codec.latent_shape(config.image_size)
    if (config.model.in_channels, config.model.input_size) != (C, h):
        raise DimensionError(f"model expects latents ({config.model.in_channels}, {config.model.input_size}) "
                             f"but codec produces ({C}, {h}) for {config.image_size}px images")
    encoder = SemanticEncoder(embed_dim=config.model.cond_dim)
    return Components(
        model=DiTModel(config.model, seed=config.seed),
        codec=codec,
        encoder=encoder,
        perceptual=PerceptualExtractor(),
        sched=make_linear_schedule(config.T, config.beta_start, config.beta_end),
    )


def restore(ckpt):
    """Rebuild components from a checkpoint with its weights loaded."""
    config = TrainConfig.from_dict(ckpt.config)
    comp = build(config)
    comp.model.load_state_dict(ckpt.params)
    if isinstance(comp.codec, TinyAE):
        if not ckpt.codec_params:
            raise VersionError("checkpoint lacks tiny-ae codec weights")
        for name, p in comp.codec.weights().items():
            if name not in ckpt.codec_params or ckpt.codec_params[name].shape != p.shape:
                raise DimensionError(f"codec parameter {name} missing or mis-shaped in checkpoint")
            p.data[...] = ckpt.codec_params[name]
        comp.codec.freeze()
    return config, comp


def make_checkpoint(config, comp, opt, step, run_rng):
    codec_params = ({n: p.data.copy() for n, p in comp.codec.weights().items()}
                    if isinstance(comp.codec, TinyAE) else {})
    return Checkpoint(config=config.to_dict(), params=comp.model.state_dict(), step=step,
                      rng_state=run_rng.state_json(), codec_params=codec_params,
                      optimizer=AdamWState(lr=opt.lr, weight_decay=opt.weight_decay, beta1=opt.beta1,
                                           beta2=opt.beta2, eps=opt.eps, step=opt.step,
                                           m={k: v.copy() for k, v in opt.m.items()},
                                           v={k: v.copy() for k, v in opt.v.items()}))


def _run_identity(d):
    """Config fields that must agree between a checkpoint and a resumed run."""
    return {k: v for k, v in d.items() if k not in ("iterations", "checkpoint_every", "log_every")}


def format_row(step, b, wall):
    return [str(step), repr(b.total), repr(b.eps_mse), repr(b.rec), repr(b.lpips), repr(b.clip), f"{wall:.3f}"]


def write_metrics(path, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_metrics(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ContractError(f"{path} is not a metrics CSV")
    return rows[1:]


def _load_data(data):
    if isinstance(data, (str, Path)):
        data = DatasetManifest.load(data)
    if isinstance(data, DatasetManifest):
        src, tgt, _ = data.load_arrays()
        return src, tgt
    src, tgt = data
    return np.asarray(src, dtype=np.float64), np.asarray(tgt, dtype=np.float64)


def train(config, data, resume=None, out_dir=None, codec=None, log=None, stop_after=None):
    """Run (or continue) training.

    ``data`` is a manifest, a manifest path, or a ``(sources, targets)`` pair of
    arrays.  ``codec`` supplies a pretrained TinyAE when ``config.codec`` asks
    for one.  ``stop_after`` ends the run early at that step, leaving a
    checkpoint identical to what an interrupted run would have saved.

    Returns ``(checkpoint, rows)`` where ``rows`` are the metrics CSV rows of
    this invocation (as lists of strings).
    """
    src, tgt = _load_data(data)
    if len(src) == 0:
        raise ParameterError("training data is empty")
    if src.shape[-1] != config.image_size:
        raise DimensionError(f"images are {src.shape[-1]}px but config.image_size is {config.image_size}")

    if resume is not None:
        if isinstance(resume, (str, Path)):
            resume = load_checkpoint(resume)
        if _run_identity(resume.config) != _run_identity(config.to_dict()):
            raise VersionError("checkpoint config does not match the requested run")
        _, comp = restore(resume)
        opt = resume.optimizer
        start = resume.step
        run_rng = Rng.from_state(resume.rng_state)
    else:
        comp = build(config)
        if isinstance(comp.codec, TinyAE):
            if not isinstance(codec, TinyAE) or codec.final_mse is None:
                raise ContractError("tiny-ae codec must be pretrained before diffusion training")
            comp.codec = codec
        opt = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
        start = 0
        run_rng = Rng(config.seed).split("train")

    params = dict(comp.model.named_parameters())
    weights = config.weights
    out = Path(out_dir) if out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows = []
    t0 = time.perf_counter()
    end = config.iterations if stop_after is None else min(stop_after, config.iterations)
    for step in range(start, end):
        step_rng = run_rng.split(step)
        idx = step_rng.integers(0, len(src), size=config.batch_size)
        comp.model.zero_grad()
        b = total_loss((src[idx], tgt[idx]), comp.model, comp.codec, comp.encoder, comp.perceptual,
                       comp.sched, weights, step_rng.split("loss"))
        expected = weights.combine(b.eps_mse, b.rec, b.lpips, b.clip)
        if abs(b.total - expected) > 1e-10:
            raise ContractError(f"loss breakdown mismatch at step {step + 1}: {b.total} vs {expected}")
        backward(b.tensor)
        adamw_step(params, opt)
        rows.append(format_row(step + 1, b, time.perf_counter() - t0))
        if log is not None and config.log_every and (step + 1) % config.log_every == 0:
            log(f"step {step + 1} total {b.total:.4f} eps {b.eps_mse:.4f} rec {b.rec:.4f} "
                f"lpips {b.lpips:.4f} clip {b.clip:.4f}")
        if out is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint-{step + 1:06d}.ckpt",
                            make_checkpoint(config, comp, opt, step + 1, run_rng))

    ckpt = make_checkpoint(config, comp, opt, end, run_rng)
    if out is not None:
        save_checkpoint(out / "final.ckpt", ckpt)
        metrics = out / "metrics.csv"
        previous = []
        if resume is not None and metrics.exists():
            previous = [r for r in read_metrics(metrics) if int(r[0]) <= start]
        write_metrics(metrics, previous + rows)
    return ckpt, rows
