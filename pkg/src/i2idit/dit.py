"""Image-conditioned diffusion transformer.

Noisy latents are cut into P×P patches, projected to tokens and given fixed
2-D sinusoidal position embeddings.  A conditioning vector (timestep pathway
plus projected image embedding) drives AdaLN-Zero modulation of every block,
and the projected image embedding alone is the single key/value token for
cross-attention.  All modulation outputs and the output projection start at
zero, so a fresh model predicts zero noise.
"""

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError
from .nn import MLP, Linear, Module
from .rng import Rng
from .tensor import Tensor, as_tensor, no_grad


@dataclass(frozen=True)
class DiTConfig:
    input_size: int = 16
    in_channels: int = 4
    patch_size: int = 2
    hidden_size: int = 128
    depth: int = 4
    num_heads: int = 4
    cond_dim: int = 64
    time_embed_dim: int = 64
    mlp_ratio: int = 4
    max_period: float = 10000.0

    def __post_init__(self):
        for name in ("input_size", "in_channels", "patch_size", "hidden_size",
                     "depth", "num_heads", "cond_dim", "time_embed_dim", "mlp_ratio"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be positive")
        if self.input_size % self.patch_size:
            raise ParameterError(f"patch_size {self.patch_size} does not divide input_size {self.input_size}")
        if self.hidden_size % self.num_heads:
            raise ParameterError(f"num_heads {self.num_heads} does not divide hidden_size {self.hidden_size}")
        if self.hidden_size % 4:
            raise ParameterError("hidden_size must be a multiple of 4 for 2-D position embeddings")
        if self.time_embed_dim % 2:
            raise ParameterError("time_embed_dim must be even")

    @property
    def grid(self):
        return self.input_size // self.patch_size

    @property
    def num_tokens(self):
        return self.grid * self.grid

    @property
    def patch_dim(self):
        return self.in_channels * self.patch_size ** 2

    def to_dict(self):
        return asdict(self)


# The published DiT-XL-256 row reads 28 layers, hidden 1156, 16 heads.  1156 is
# not divisible by 16, so the instantiated width is 1152 (72 per head).
XL_PRESET_METADATA = {
    "name": "DiT-XL-256",
    "listed_hidden_size": 1156,
    "instantiated_hidden_size": 1152,
    "note": "listed hidden size 1156 is not divisible by 16 heads; 1152 is instantiated",
}

PRESETS = {
    "desk": DiTConfig(),
    "tiny": DiTConfig(input_size=4, in_channels=2, patch_size=2, hidden_size=16, depth=1,
                      num_heads=2, cond_dim=8, time_embed_dim=8, mlp_ratio=2),
    "dit-xl-256": DiTConfig(input_size=32, in_channels=4, patch_size=2, hidden_size=1152, depth=28,
                            num_heads=16, cond_dim=768, time_embed_dim=256),
}


# ---------------------------------------------------------------- patches

def patchify(z, P):
    """(B, C, H, W) -> (B, H/P * W/P, C*P*P), patches in row-major order."""
    z = as_tensor(z)
    if z.ndim != 4:
        raise DimensionError(f"patchify expects (B, C, H, W), got {z.shape}")
    B, C, H, W = z.shape
    if H % P or W % P:
        raise DimensionError(f"patch size {P} does not divide spatial size {H}x{W}")
    gh, gw = H // P, W // P
    x = T.reshape(z, (B, C, gh, P, gw, P))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (B, gh * gw, C * P * P))


def unpatchify(tokens, P, H, W):
    tokens = as_tensor(tokens)
    if tokens.ndim != 3:
        raise DimensionError(f"unpatchify expects (B, N, C*P*P), got {tokens.shape}")
    B, N, D = tokens.shape
    if H % P or W % P or N != (H // P) * (W // P) or D % (P * P):
        raise DimensionError(f"cannot unpatchify {tokens.shape} to {H}x{W} with patch {P}")
    gh, gw, C = H // P, W // P, D // (P * P)
    x = T.reshape(tokens, (B, gh, gw, C, P, P))
    x = T.transpose(x, (0, 3, 1, 4, 2, 5))
    return T.reshape(x, (B, C, H, W))


# ---------------------------------------------------------------- embeddings

def timestep_embedding(t, dim, max_period=10000.0):
    """Sinusoidal features ``[sin(t*w_k)..., cos(t*w_k)...]``.

    ``t`` may be a scalar (returns shape (dim,)) or a 1-D array (returns
    (len(t), dim)).
    """
    if dim % 2:
        raise ParameterError(f"timestep embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    t_arr = np.asarray(t, dtype=np.float64)
    args = t_arr[..., None] * freqs
    return Tensor._wrap(np.concatenate([np.sin(args), np.cos(args)], axis=-1))


def _sincos_1d(dim, pos):
    omega = 1.0 / 10000 ** (np.arange(dim // 2) / (dim / 2.0))
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def pos_embed_2d(dim, grid):
    """Fixed (grid*grid, dim) table; half the channels encode row, half column."""
    rows, cols = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    return np.concatenate([_sincos_1d(dim // 2, rows), _sincos_1d(dim // 2, cols)], axis=1)


# ---------------------------------------------------------------- attention

class Attention(Module):
    def __init__(self, d, num_heads, rng):
        if d % num_heads:
            raise ParameterError(f"num_heads {num_heads} does not divide width {d}")
        self.q_proj = Linear(d, d, rng.split("q"))
        self.kv_proj = Linear(d, 2 * d, rng.split("kv"))
        self.out_proj = Linear(d, d, rng.split("out"))
        self.num_heads = num_heads
        self.d = d


def multi_head_attention(q_tokens, kv_tokens, attn):
    """Scaled dot-product attention of ``q_tokens`` over ``kv_tokens``."""
    q_tokens, kv_tokens = as_tensor(q_tokens), as_tensor(kv_tokens)
    d, h = attn.d, attn.num_heads
    if d % h:
        raise ParameterError(f"num_heads {h} does not divide width {d}")
    if q_tokens.ndim != 3 or kv_tokens.ndim != 3 or q_tokens.shape[-1] != d or kv_tokens.shape[-1] != d \
            or q_tokens.shape[0] != kv_tokens.shape[0]:
        raise DimensionError(f"attention: bad token shapes {q_tokens.shape}, {kv_tokens.shape} for width {d}")
    B, Nq, _ = q_tokens.shape
    Nk = kv_tokens.shape[1]
    dh = d // h
    q = T.transpose(T.reshape(attn.q_proj(q_tokens), (B, Nq, h, dh)), (0, 2, 1, 3))
    k, v = T.split(attn.kv_proj(kv_tokens), 2, axis=-1)
    k = T.transpose(T.reshape(k, (B, Nk, h, dh)), (0, 2, 3, 1))
    v = T.transpose(T.reshape(v, (B, Nk, h, dh)), (0, 2, 1, 3))
    weights = T.softmax(T.scale(T.matmul(q, k), 1.0 / math.sqrt(dh)), axis=-1)
    out = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (B, Nq, d))
    return attn.out_proj(out)


# ---------------------------------------------------------------- blocks

def _modulate(x, shift, gain):
    return T.layer_norm(x) * (1.0 + gain) + shift


class DiTBlock(Module):
    def __init__(self, config, rng):
        d = config.hidden_size
        self.adaLN = Linear(d, 9 * d, zero=True)
        self.self_attn = Attention(d, config.num_heads, rng.split("self_attn"))
        self.cross_attn = Attention(d, config.num_heads, rng.split("cross_attn"))
        self.ffn = MLP(d, config.mlp_ratio * d, d, rng.split("ffn"))
        self.d = d

    def __call__(self, x, c, kv):
        return dit_block_forward(x, c, kv, self)


def dit_block_forward(tokens, c, kv, block):
    tokens, c, kv = as_tensor(tokens), as_tensor(c), as_tensor(kv)
    B, _, d = tokens.shape
    if c.shape != (B, d) or kv.ndim != 3 or kv.shape[0] != B or kv.shape[2] != d:
        raise DimensionError(f"block inputs {tokens.shape}, c {c.shape}, kv {kv.shape} inconsistent")
    mod = T.reshape(block.adaLN(T.silu(c)), (B, 1, 9 * d))
    (b1, g1, a1, b2, g2, a2, b3, g3, a3) = T.split(mod, 9, axis=-1)
    x = tokens
    h = _modulate(x, b1, g1)
    x = x + a1 * multi_head_attention(h, h, block.self_attn)
    h = _modulate(x, b2, g2)
    x = x + a2 * multi_head_attention(h, kv, block.cross_attn)
    h = _modulate(x, b3, g3)
    x = x + a3 * block.ffn(h)
    return x


class FinalLayer(Module):
    def __init__(self, config):
        d = config.hidden_size
        self.adaLN = Linear(d, 2 * d, zero=True)
        self.proj = Linear(d, config.patch_dim, zero=True)

    def __call__(self, x, c):
        B, _, d = x.shape
        shift, gain = T.split(T.reshape(self.adaLN(T.silu(c)), (B, 1, 2 * d)), 2, axis=-1)
        return self.proj(_modulate(x, shift, gain))


class DiTModel(Module):
    def __init__(self, config=None, seed=0, _skip_blocks=False):
        config = config or DiTConfig()
        rng = Rng(seed).split("dit")
        d = config.hidden_size
        self.config = config
        self.patch_proj = Linear(config.patch_dim, d, rng.split("patch_proj"))
        self.pos_embed = pos_embed_2d(d, config.grid)
        self.time_mlp = MLP(config.time_embed_dim, d, d, rng.split("time_mlp"), act="silu")
        self.cond_proj = Linear(config.cond_dim, d, rng.split("cond_proj"))
        self.blocks = [] if _skip_blocks else [DiTBlock(config, rng.split(f"block{i}"))
                                               for i in range(config.depth)]
        self.final = FinalLayer(config)
        self._rng = rng

    def __call__(self, z_t, t, cond_embed):
        return forward(self, z_t, t, cond_embed)


def project_cond(cond_embed, model):
    """cond_proj applied to the embedding rescaled to unit RMS per component.

    Semantic embeddings are unit vectors, so their components are about
    1/sqrt(cond_dim); the fixed gain puts them on the scale the weight init
    and the optimiser step size assume.
    """
    return model.cond_proj(cond_embed * math.sqrt(model.config.cond_dim))


def conditioning_vector(cond_embed, t, model):
    """Timestep pathway plus projected image embedding, shape (B, d)."""
    cond_embed = as_tensor(cond_embed)
    squeeze = cond_embed.ndim == 1
    if squeeze:
        cond_embed = T.reshape(cond_embed, (1, -1))
    if cond_embed.shape[-1] != model.config.cond_dim:
        raise DimensionError(f"cond_embed width {cond_embed.shape[-1]} != cond_dim {model.config.cond_dim}")
    t = np.broadcast_to(np.asarray(t), (cond_embed.shape[0],))
    temb = timestep_embedding(t, model.config.time_embed_dim, model.config.max_period)
    c = model.time_mlp(temb) + project_cond(cond_embed, model)
    return T.reshape(c, (-1,)) if squeeze else c


def forward(model, z_t, t, cond_embed):
    """Predict the noise in ``z_t`` (B, C, H, W) at timesteps ``t``."""
    cfg = model.config
    z_t, cond_embed = as_tensor(z_t), as_tensor(cond_embed)
    if z_t.ndim != 4 or z_t.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
        raise DimensionError(f"latent shape {z_t.shape} does not match config "
                             f"({cfg.in_channels}, {cfg.input_size}, {cfg.input_size})")
    B = z_t.shape[0]
    if cond_embed.shape != (B, cfg.cond_dim):
        raise DimensionError(f"cond_embed shape {cond_embed.shape} != ({B}, {cfg.cond_dim})")
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    x = model.patch_proj(patchify(z_t, cfg.patch_size)) + model.pos_embed
    c = conditioning_vector(cond_embed, t, model)
    kv = T.reshape(project_cond(cond_embed, model), (B, 1, cfg.hidden_size))
    for i, block in enumerate(model.blocks):
        try:
            x = block(x, c, kv)
        except DimensionError as exc:
            raise DimensionError(f"block {i}: {exc}") from exc
    out = model.final(x, c)
    return unpatchify(out, cfg.patch_size, cfg.input_size, cfg.input_size)


def parameter_count(config):
    """Number of trainable scalars, computed from the config alone."""
    d, C = config.hidden_size, config.cond_dim
    lin = lambda i, o: i * o + o  # noqa: E731
    attn = lin(d, d) + lin(d, 2 * d) + lin(d, d)
    block = lin(d, 9 * d) + 2 * attn + lin(d, config.mlp_ratio * d) + lin(config.mlp_ratio * d, d)
    stem = lin(config.patch_dim, d) + lin(config.time_embed_dim, d) + lin(d, d) + lin(C, d)
    final = lin(d, 2 * d) + lin(d, config.patch_dim)
    return stem + config.depth * block + final


def streaming_shape_check(config, seed=0, batch=1):
    """Forward pass that builds one block at a time and discards it.

    Lets configurations too large to hold in memory (the DiT-XL preset) be
    checked end to end.  Returns the output shape.
    """
    model = DiTModel(config, seed, _skip_blocks=True)
    rng = Rng(seed).split("shape_check")
    z = Tensor._wrap(rng.normal((batch, config.in_channels, config.input_size, config.input_size)))
    cond = Tensor._wrap(rng.normal((batch, config.cond_dim)))
    t = np.zeros(batch, dtype=np.int64)
    with no_grad():
        x = model.patch_proj(patchify(z, config.patch_size)) + model.pos_embed
        c = conditioning_vector(cond, t, model)
        kv = T.reshape(project_cond(cond, model), (batch, 1, config.hidden_size))
        for i in range(config.depth):
            block = DiTBlock(config, model._rng.split(f"block{i}"))
            x = block(x, c, kv)
            if x.shape != (batch, config.num_tokens, config.hidden_size):
                raise DimensionError(f"block {i} produced {x.shape}")
            del block
        out = unpatchify(model.final(x, c), config.patch_size, config.input_size, config.input_size)
    return out.shape


def with_channels(config, in_channels, input_size=None):
    return replace(config, in_channels=in_channels, input_size=input_size or config.input_size)
