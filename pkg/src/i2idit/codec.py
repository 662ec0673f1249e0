"""Latent codecs mapping images (3, S, S) to latents (Cz, S/f, S/f) and back.

``IdentityCodec`` is an exact space-to-depth rearrangement.  ``TinyAE`` is a
per-block linear autoencoder that is pretrained on L2 reconstruction and then
frozen.
"""

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError
from .nn import Linear, Module
from .optim import AdamWState, adamw_step
from .rng import Rng
from .tensor import as_tensor, backward


def _batched(x, rank):
    x = as_tensor(x)
    if x.ndim == rank - 1:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def space_to_depth(x, f):
    B, C, H, W = x.shape
    if H % f or W % f:
        raise DimensionError(f"spatial size {H}x{W} not divisible by factor {f}")
    y = T.reshape(x, (B, C, H // f, f, W // f, f))
    y = T.transpose(y, (0, 1, 3, 5, 2, 4))
    return T.reshape(y, (B, C * f * f, H // f, W // f))


def depth_to_space(z, f):
    B, Cf, h, w = z.shape
    C = Cf // (f * f)
    y = T.reshape(z, (B, C, f, f, h, w))
    y = T.transpose(y, (0, 1, 4, 2, 5, 3))
    return T.reshape(y, (B, C, h * f, w * f))


class IdentityCodec(Module):
    kind = "identity-space2depth"

    def __init__(self, factor=2):
        self.factor = factor
        self.latent_channels = 3 * factor * factor

    def latent_shape(self, S):
        if S % self.factor:
            raise DimensionError(f"image size {S} not divisible by codec factor {self.factor}")
        return (self.latent_channels, S // self.factor, S // self.factor)

    def encode(self, x):
        x, single = _batched(x, 4)
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"codec expects (3, S, S) images, got {x.shape}")
        z = space_to_depth(x, self.factor)
        return T.reshape(z, z.shape[1:]) if single else z

    def decode(self, z, clamp=False):
        z, single = _batched(z, 4)
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise DimensionError(f"codec expects ({self.latent_channels}, h, w) latents, got {z.shape}")
        x = depth_to_space(z, self.factor)
        if clamp:
            x = T.clip(x, -1.0, 1.0)
        return T.reshape(x, x.shape[1:]) if single else x


class TinyAE(IdentityCodec):
    kind = "tiny-ae"

    def __init__(self, factor=2, latent_channels=4, seed=0):
        super().__init__(factor)
        rng = Rng(seed).split("tiny_ae")
        block = 3 * factor * factor
        self.latent_channels = latent_channels
        self.enc = Linear(block, latent_channels, rng.split("enc"))
        self.dec = Linear(latent_channels, block, rng.split("dec"))
        self.final_mse = None

    def _per_location(self, x, lin):
        y = T.transpose(x, (0, 2, 3, 1))
        y = lin(y)
        return T.transpose(y, (0, 3, 1, 2))

    def encode(self, x):
        x, single = _batched(x, 4)
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"codec expects (3, S, S) images, got {x.shape}")
        z = self._per_location(space_to_depth(x, self.factor), self.enc)
        return T.reshape(z, z.shape[1:]) if single else z

    def decode(self, z, clamp=True):
        z, single = _batched(z, 4)
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise DimensionError(f"codec expects ({self.latent_channels}, h, w) latents, got {z.shape}")
        x = depth_to_space(self._per_location(z, self.dec), self.factor)
        if clamp:
            x = T.clip(x, -1.0, 1.0)
        return T.reshape(x, x.shape[1:]) if single else x


def resize_images(images, size):
    """Nearest-neighbour resize of (N, 3, S, S) images by an integer ratio.

    A pass-through when the images already have side ``size``.
    """
    images = np.asarray(images, dtype=np.float64)
    S = images.shape[-1]
    if S == size:
        return images
    if size > S and size % S == 0:
        k = size // S
        return images.repeat(k, axis=-2).repeat(k, axis=-1)
    if S > size and S % size == 0:
        k = S // size
        return images[..., k // 2::k, k // 2::k]
    raise DimensionError(f"cannot resize {S}px images to {size}px by an integer ratio")


def make_codec(kind="identity", factor=2, latent_channels=4, seed=0):
    if kind in ("identity", "identity-space2depth"):
        return IdentityCodec(factor)
    if kind in ("tiny-ae", "tiny_ae"):
        return TinyAE(factor, latent_channels, seed)
    raise ParameterError(f"unknown codec kind {kind!r}")


def reconstruction_mse(codec, images):
    with T.no_grad():
        rec = codec.decode(codec.encode(images))
    return float(np.mean((rec.data - np.asarray(images)) ** 2))


def pretrain_tiny_ae(images, steps=500, rng=None, codec=None, lr=1e-2, batch_size=32, log=None):
    """Fit a TinyAE to ``images`` (N, 3, S, S) by plain L2 reconstruction, then freeze it.

    The identity codec has nothing to learn and is returned unchanged.
    Returns the codec; ``codec.losses`` holds the per-step training MSE.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or len(images) == 0:
        raise ParameterError("pretraining needs a non-empty (N, 3, S, S) image array")
    codec = codec if codec is not None else TinyAE()
    if not isinstance(codec, TinyAE):
        return codec
    rng = rng if rng is not None else Rng(0).split("pretrain")
    params = dict(codec.named_parameters())
    state = AdamWState(lr=lr, weight_decay=0.0)
    losses = []
    for step in range(steps):
        idx = rng.integers(0, len(images), size=min(batch_size, len(images)))
        x = as_tensor(images[idx])
        codec.zero_grad()
        # unclamped decode keeps gradients alive for saturated pixels
        rec = codec.decode(codec.encode(x), clamp=False)
        diff = rec - x
        loss = T.mean(diff * diff)
        backward(loss)
        adamw_step(params, state)
        losses.append(loss.item())
        if log is not None and (step % 100 == 0 or step == steps - 1):
            log(f"pretrain step {step} mse {losses[-1]:.5f}")
    codec.freeze()
    codec.losses = losses
    codec.final_mse = reconstruction_mse(codec, images)
    return codec
