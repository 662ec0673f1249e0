"""Frozen random-feature image encoder used for conditioning and the semantic loss.

Stands in for a pretrained CLIP image tower: patch tokens go through two fixed
random layers, are mean-pooled, projected, and L2-normalised.  Weights never
train, but gradients flow to the input image.
"""

import numpy as np

from . import tensor as T
from .dit import patchify
from .errors import ContractError, DimensionError
from .nn import Linear, Module
from .rng import Rng
from .tensor import as_tensor

SEMANTIC_SEED = 0x5E3A471C


class SemanticEncoder(Module):
    """Patch tokens -> two fixed random GELU layers -> mean pool -> projection -> unit norm.

    Patches are measured relative to the white background (pixel value +1), so
    blank regions contribute nothing and the pooled feature reflects drawn
    content.  A small fixed output bias keeps the embedding of a blank image
    well defined.
    """

    def __init__(self, embed_dim=64, patch_size=4, hidden=128, seed=SEMANTIC_SEED):
        rng = Rng(seed).split("semantic")
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.patch_proj = Linear(3 * patch_size ** 2, hidden, rng.split("patch"))
        self.hidden_proj = Linear(hidden, hidden, rng.split("hidden"))
        self.out_proj = Linear(hidden, embed_dim, rng.split("out"))
        self.out_proj.bias.data[...] = rng.split("out_bias").uniform((embed_dim,), -0.05, 0.05)
        self.freeze()

    @property
    def frozen(self):
        return True

    def encode(self, image):
        """(3, S, S) -> (embed_dim,), or a batch (B, 3, S, S) -> (B, embed_dim)."""
        image = as_tensor(image)
        single = image.ndim == 3
        if single:
            image = T.reshape(image, (1,) + image.shape)
        if image.ndim != 4 or image.shape[1] != 3:
            raise DimensionError(f"semantic encoder expects (3, S, S) images, got {image.shape}")
        S = image.shape[-1]
        if image.shape[-2] != S or S % self.patch_size:
            raise DimensionError(f"image size {image.shape[-2:]} incompatible with patch {self.patch_size}")
        h = T.gelu(self.patch_proj(patchify(image - 1.0, self.patch_size)))
        h = T.gelu(self.hidden_proj(h))
        e = self.out_proj(T.mean(h, axis=1))
        e = l2_normalize(e)
        return T.reshape(e, (self.embed_dim,)) if single else e

    __call__ = encode


def l2_normalize(x, axis=-1):
    norm = T.sqrt(T.sum(T.square(x), axis=axis, keepdims=True))
    return x / norm


def cosine_similarity(a, b):
    """Cosine of the angle between vectors (or between matching rows)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    na = np.sqrt((a.data * a.data).sum(axis=-1))
    nb = np.sqrt((b.data * b.data).sum(axis=-1))
    if np.any(na == 0) or np.any(nb == 0):
        raise ContractError("cosine similarity of a zero vector is undefined")
    dot = T.sum(a * b, axis=-1)
    na_t = T.sqrt(T.sum(T.square(a), axis=-1))
    nb_t = T.sqrt(T.sum(T.square(b), axis=-1))
    return dot / (na_t * nb_t)
