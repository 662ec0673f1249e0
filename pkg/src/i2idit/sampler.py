"""Inference and evaluation.

Two ways to produce a target image for a source image:

* ``sample_full`` starts from pure latent noise and runs every reverse step,
  relying on the conditioning embedding alone;
* ``sample_partial`` noises the encoded *source* to level ``t_start`` and
  denoises from there.

Both share :func:`denoise`, so they differ only in the initial latent.
"""

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetManifest, encode_ppm
from .errors import DimensionError, ParameterError
from .schedule import ancestral_step, q_sample
from .semantic import cosine_similarity
from .tensor import as_tensor, no_grad

PSNR_CAP = 99.0
PSNR_PEAK = 2.0


def _as_batch(images):
    arr = np.asarray(images.data if hasattr(images, "data") else images, dtype=np.float64)
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim != 4:
        raise DimensionError(f"expected (3, S, S) or (B, 3, S, S) images, got {arr.shape}")
    return arr, False


def denoise(model, z, t_from, cond, sched, rng, clip=True):
    """Reverse steps ``t_from, ..., 0`` starting from latent ``z``."""
    B = z.shape[0]
    for t in range(int(t_from), -1, -1):
        eps_hat = model(z, np.full(B, t, dtype=np.int64), cond)
        z = ancestral_step(z, t, eps_hat, rng, sched, clip=clip).data
    return z


def _finish(codec, z, single):
    x = np.clip(codec.decode(z).data, -1.0, 1.0)
    return x[0] if single else x


def _condition(enc, src, cond_img):
    if cond_img is None:
        return enc.encode(src).data
    cond_img, _ = _as_batch(cond_img)
    if cond_img.shape != src.shape:
        raise DimensionError(f"conditioning images {cond_img.shape} do not match sources {src.shape}")
    return enc.encode(cond_img).data


def sample_full(model, codec, enc, sched, source_img, rng, cond_img=None):
    """``cond_img`` swaps in other images for the embedding (a control run)."""
    src, single = _as_batch(source_img)
    with no_grad():
        cond = _condition(enc, src, cond_img)
        shape = codec.encode(src).shape
        z = rng.normal(shape)
        z = denoise(model, z, sched.T - 1, cond, sched, rng)
        return _finish(codec, z, single)


def sample_partial(model, codec, enc, sched, source_img, t_start, rng, cond_img=None):
    if not (0 < t_start < sched.T):
        raise ParameterError(f"t_start must lie in (0, {sched.T}), got {t_start}")
    src, single = _as_batch(source_img)
    with no_grad():
        cond = _condition(enc, src, cond_img)
        z0 = codec.encode(src).data
        z = q_sample(z0, t_start, rng.normal(z0.shape), sched).data
        z = denoise(model, z, t_start, cond, sched, rng)
        return _finish(codec, z, single)


def default_t_start(T):
    return (3 * T) // 4


# ---------------------------------------------------------------- metrics

def psnr(x, y, peak=PSNR_PEAK):
    mse = float(np.mean((np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 20.0 * math.log10(peak / math.sqrt(mse)))


def l1(x, y):
    return float(np.mean(np.abs(np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64))))


def semantic_cosine(enc, x, y):
    with no_grad():
        return cosine_similarity(enc.encode(as_tensor(x)), enc.encode(as_tensor(y))).item()


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)   # dicts: sample_id, psnr_db, l1, cos_src, cos_tgt

    METRICS = ("psnr_db", "l1", "cos_src", "cos_tgt")

    @property
    def count(self):
        return len(self.rows)

    @property
    def mean(self):
        return {k: float(np.mean([r[k] for r in self.rows])) for k in self.METRICS}

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("sample_id",) + self.METRICS)
        for r in self.rows:
            w.writerow([r["sample_id"]] + [repr(r[k]) for k in self.METRICS])
        m = self.mean
        w.writerow(["MEAN"] + [repr(m[k]) for k in self.METRICS])
        return buf.getvalue()


def score(enc, outputs, sources, targets, ids):
    report = EvalReport()
    for out, s, t, i in zip(outputs, sources, targets, ids):
        report.rows.append(dict(sample_id=int(i), psnr_db=psnr(out, t), l1=l1(out, t),
                                cos_src=semantic_cosine(enc, out, s), cos_tgt=semantic_cosine(enc, out, t)))
    return report


def generate(comp, sources, mode="full", t_start=None, rng=None, cond_sources=None):
    if mode == "full":
        return sample_full(comp.model, comp.codec, comp.encoder, comp.sched, sources, rng, cond_sources)
    if mode == "partial":
        t_start = default_t_start(comp.sched.T) if t_start is None else t_start
        return sample_partial(comp.model, comp.codec, comp.encoder, comp.sched, sources, t_start, rng,
                              cond_sources)
    raise ParameterError(f"unknown sampling mode {mode!r}")


def evaluate(manifest, checkpoint, mode="full", t_start=None, seed=0, out_dir=None):
    """Sample one output per test pair and score it against the target.

    With ``out_dir`` set, writes ``eval.csv`` and ``grid.ppm`` there.
    """
    from .checkpoint import load_checkpoint
    from .rng import Rng
    from .train import restore

    if isinstance(manifest, (str, Path)):
        manifest = DatasetManifest.load(manifest)
    if manifest.count == 0:
        raise ParameterError("test manifest is empty")
    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    _, comp = restore(checkpoint)
    sources, targets, ids = manifest.load_arrays()
    outputs = generate(comp, sources, mode, t_start, Rng(seed).split("eval"))
    report = score(comp.encoder, outputs, sources, targets, ids)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.csv").write_text(report.to_csv(), encoding="utf-8")
        emit_grid(list(zip(sources, outputs, targets)), out / "grid.ppm")
    return report


# ---------------------------------------------------------------- grids

def grid_image(samples, sep=2):
    """Tile rows of (source | output | target) with white separators."""
    if not samples:
        raise DimensionError("grid needs at least one (source, output, target) triple")
    shape = np.asarray(samples[0][0]).shape
    for triple in samples:
        if len(triple) != 3 or any(np.asarray(im).shape != shape for im in triple):
            raise DimensionError(f"all grid images must share shape {shape}")
    _, H, W = shape
    n = len(samples)
    grid = np.ones((3, n * H + (n - 1) * sep, 3 * W + 2 * sep))
    for r, triple in enumerate(samples):
        y = r * (H + sep)
        for c, im in enumerate(triple):
            x = c * (W + sep)
            grid[:, y:y + H, x:x + W] = np.clip(np.asarray(im), -1.0, 1.0)
    return grid


def emit_grid(samples, path):
    Path(path).write_bytes(encode_ppm(grid_image(samples)))
