"""Training objectives.

The base objective is noise-prediction MSE.  On top of it, the one-step clean
estimate x̂0 is decoded to pixels and scored with an L1 reconstruction term, a
perceptual feature distance, and a semantic term that compares x̂0 with the
*source* image in embedding space.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dit import patchify
from .errors import DimensionError, ParameterError
from .nn import Module, random_linear
from .rng import Rng
from .schedule import predict_x0_from_eps, q_sample
from .semantic import cosine_similarity
from .tensor import as_tensor, no_grad

PERCEPTUAL_SEED = 0x1F9C22B7


@dataclass(frozen=True)
class LossWeights:
    lambda_rec: float = 1.0
    lambda_lpips: float = 0.5
    lambda_clip: float = 0.1
    lambda_eps: float = 1.0

    def __post_init__(self):
        vals = (self.lambda_rec, self.lambda_lpips, self.lambda_clip, self.lambda_eps)
        if any(v < 0 for v in vals) or not any(v > 0 for v in vals):
            raise ParameterError(f"loss weights must be >= 0 with at least one > 0, got {vals}")

    def combine(self, eps_mse, rec, lpips, clip):
        return (self.lambda_eps * eps_mse + self.lambda_rec * rec
                + self.lambda_lpips * lpips + self.lambda_clip * clip)


@dataclass
class LossBreakdown:
    total: float
    eps_mse: float
    rec: float
    lpips: float
    clip: float
    tensor: object = field(default=None, repr=False, compare=False)


class PerceptualExtractor(Module):
    """Frozen random features at two patch scales, unit-normalised per location."""

    def __init__(self, patch_sizes=(4, 8), features=32, seed=PERCEPTUAL_SEED):
        rng = Rng(seed).split("perceptual")
        self.patch_sizes = tuple(patch_sizes)
        self.stages = [random_linear(3 * p * p, features, rng.split(f"stage{p}")) for p in self.patch_sizes]
        self.freeze()

    @property
    def frozen(self):
        return True

    def features(self, image):
        image = as_tensor(image)
        if image.ndim == 3:
            image = T.reshape(image, (1,) + image.shape)
        out = []
        for p, stage in zip(self.patch_sizes, self.stages):
            if image.shape[-1] % p or image.shape[-2] % p:
                raise DimensionError(f"image {image.shape[-2:]} not divisible by perceptual patch {p}")
            f = T.gelu(stage(patchify(image, p)))
            norm = T.sqrt(T.sum(T.square(f), axis=-1, keepdims=True) + 1e-12)
            out.append(f / norm)
        return out


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def eps_mse(eps_hat, eps):
    eps_hat, eps = as_tensor(eps_hat), as_tensor(eps)
    _same_shape(eps_hat, eps, "eps_mse")
    d = eps_hat - eps
    return T.mean(d * d)


def l1_rec(x_hat, x_target):
    """Mean absolute difference."""
    x_hat, x_target = as_tensor(x_hat), as_tensor(x_target)
    _same_shape(x_hat, x_target, "l1_rec")
    return T.mean(T.abs(x_hat - x_target))


def perceptual_loss(x_hat, x_target, pe):
    """Sum over stages of the mean per-location squared feature distance."""
    x_hat, x_target = as_tensor(x_hat), as_tensor(x_target)
    _same_shape(x_hat, x_target, "perceptual_loss")
    with no_grad():
        ref = pe.features(x_target)
    total = None
    for fa, fb in zip(pe.features(x_hat), ref):
        d = fa - fb
        term = T.mean(T.sum(d * d, axis=-1))
        total = term if total is None else total + term
    return total


def semantic_loss(x_hat, x_source, enc):
    """1 - cos(enc(x_hat), enc(x_source)), averaged over a batch."""
    x_hat, x_source = as_tensor(x_hat), as_tensor(x_source)
    _same_shape(x_hat, x_source, "semantic_loss")
    with no_grad():
        ref = enc.encode(x_source)
    return T.mean(1.0 - cosine_similarity(enc.encode(x_hat), ref))


def total_loss(batch, model, codec, enc, pe, sched, weights, rng, t=None):
    """Full training objective for one batch of (sources, targets).

    ``t`` overrides the per-sample uniform timestep draw.
    """
    sources, targets = (np.asarray(a, dtype=np.float64) for a in batch)
    B = len(targets)
    with no_grad():
        z0 = codec.encode(targets).data
        cond = enc.encode(sources).data
    if t is None:
        t = rng.integers(0, sched.T, size=B)
    t = np.asarray(t, dtype=np.int64)
    eps = rng.normal(z0.shape)
    z_t = q_sample(z0, t, eps, sched)

    terms = {}
    try:
        eps_hat = model(z_t, t, cond)
        terms["eps_mse"] = eps_mse(eps_hat, eps)
        x_hat = codec.decode(predict_x0_from_eps(z_t, t, eps_hat, sched, clip=False), clamp=False)
    except DimensionError as exc:
        raise DimensionError(f"eps_mse: {exc}") from exc
    for name, fn in (("rec", lambda: l1_rec(x_hat, targets)),
                     ("lpips", lambda: perceptual_loss(x_hat, targets, pe)),
                     ("clip", lambda: semantic_loss(x_hat, sources, enc))):
        try:
            terms[name] = fn()
        except DimensionError as exc:
            raise DimensionError(f"{name}: {exc}") from exc

    total = weights.combine(terms["eps_mse"], terms["rec"], terms["lpips"], terms["clip"])
    vals = {k: v.item() for k, v in terms.items()}
    return LossBreakdown(total=total.item(), tensor=total, **vals)
