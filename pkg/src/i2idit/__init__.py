"""Image-to-image diffusion transformer built on a small numpy autodiff core."""

from .errors import ContractError, DimensionError, FileError, ParameterError, ParseError, VersionError
from .tensor import Tensor, Tape, as_tensor, backward, no_grad
from .rng import Rng
from .schedule import NoiseSchedule, make_linear_schedule, q_sample, posterior, ancestral_step
from .dit import DiTConfig, DiTModel, PRESETS, patchify, unpatchify
from .semantic import SemanticEncoder, cosine_similarity
from .codec import IdentityCodec, TinyAE, make_codec, pretrain_tiny_ae
from .losses import LossWeights, PerceptualExtractor, total_loss
from .data import DatasetManifest, generate_dataset, generate_pair
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .train import TrainConfig, build, restore, train
from .sampler import evaluate, sample_full, sample_partial

__version__ = "0.1.0"
