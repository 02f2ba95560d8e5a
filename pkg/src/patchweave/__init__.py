"""patchweave: coordinate-conditional patch GAN toolkit.

Trains a generator that produces small micro patches conditioned on spatial
coordinates, judged by a discriminator that only ever sees macro patches
(small blocks of micro patches), then weaves full scenes, panoramas, and
beyond-canvas extrapolations out of independently generated patches.
"""

# Pin BLAS pools to one thread before numpy loads anywhere in the package:
# bitwise-reproducible training and generation are part of the contract.
import os as _os

for _v in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
    _os.environ.setdefault(_v, "1")
del _os, _v

from .autodiff import Graph, Node, NonFiniteError, ShapeError, second_order  # noqa: E402
from .coords import (  # noqa: E402
    PatchLayout,
    axis_coords,
    angular_axis,
    crop_psi,
    cylindrical_embed,
    extended_micro_coords,
    interp_coords,
    merge_phi,
    sample_anchor,
    wrap_unit,
)
from .layers import ArchConfig, ModelBundle  # noqa: E402
from .data import (  # noqa: E402
    CheckpointError,
    CodecError,
    DataError,
    Dataset,
    image_folder_ingest,
    load_checkpoint,
    read_ppm,
    sample_latent,
    save_checkpoint,
    synth_dataset,
    write_ppm,
)
from .training import (  # noqa: E402
    TrainConfig,
    Trainer,
    beyond_boundary_posttrain,
    load_trainer,
    save_trainer,
)
from .evaluate import (  # noqa: E402
    coord_head_error,
    frechet_proxy,
    generate_set,
    guide_from_patch,
    seam_energy,
    slerp,
)
from .config import ConfigError, load_config  # noqa: E402

__all__ = [
    "Graph",
    "Node",
    "NonFiniteError",
    "ShapeError",
    "second_order",
    "PatchLayout",
    "axis_coords",
    "angular_axis",
    "crop_psi",
    "cylindrical_embed",
    "extended_micro_coords",
    "interp_coords",
    "merge_phi",
    "sample_anchor",
    "wrap_unit",
    "ArchConfig",
    "ModelBundle",
    "CheckpointError",
    "CodecError",
    "DataError",
    "Dataset",
    "image_folder_ingest",
    "load_checkpoint",
    "read_ppm",
    "sample_latent",
    "save_checkpoint",
    "synth_dataset",
    "write_ppm",
    "TrainConfig",
    "Trainer",
    "beyond_boundary_posttrain",
    "load_trainer",
    "save_trainer",
    "coord_head_error",
    "frechet_proxy",
    "generate_set",
    "guide_from_patch",
    "seam_energy",
    "slerp",
    "ConfigError",
    "load_config",
]
