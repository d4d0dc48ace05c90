"""Organ-wise tokenization: per-group token embeddings for labeled images.

An encoder/decoder pair with two pooling-attention modules in between
splits an image's latent tokens into semantic groups (one per labeled
region plus background).  Training randomly retains group subsets and
supervises reconstruction of only the matching image regions, so each
group ends up carrying exactly its region's content.  The package ships
the tensor/autodiff substrate, the model, the training paradigm, a
phantom-image data generator, evaluation tools, and a CLI.
"""

from .model import (
    HolisticEmbedding,
    ModelConfig,
    OwtModel,
    RetainedSelection,
    TokenGroupSet,
    aher_restore,
    decode,
    encode,
    forward_holistic,
    forward_owt,
    gather_retained,
    organ_collect,
    token_group_encode,
)
from .phantoms import PhantomSample, PhantomSpec, generate, read_owtd, write_owtd
from .tensor import DiffTensor, OptimizerState, adamw_step, backward
from .training import (
    MaskedTarget,
    TgrConfig,
    allocate_tokens,
    draw_selection,
    lr_at,
    mask_target,
    reconstruction_loss,
    run_training,
    train_semi,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "DiffTensor", "OptimizerState", "adamw_step", "backward",
    "ModelConfig", "OwtModel", "HolisticEmbedding", "TokenGroupSet",
    "RetainedSelection", "encode", "organ_collect", "gather_retained",
    "token_group_encode", "aher_restore", "decode", "forward_owt",
    "forward_holistic",
    "TgrConfig", "MaskedTarget", "draw_selection", "mask_target",
    "reconstruction_loss", "lr_at", "train_step", "run_training",
    "train_semi", "allocate_tokens",
    "PhantomSpec", "PhantomSample", "generate", "write_owtd", "read_owtd",
    "__version__",
]
