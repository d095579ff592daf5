"""Position-conditioned 3D patch diffusion prior and sparse-view CT reconstruction.

Axis convention used throughout: volumes are numpy arrays of shape (nz, ny, nx)
in C order, so the raveled element order is x fastest, then y, then z. Dimension
tuples in metadata and file headers are always written (nx, ny, nz).
"""

from patchdiff.grid import (
    PatchGrid,
    PositionalField,
    pad_volume,
    crop_volume,
    extract_patches,
    insert_patches,
    downsample,
    downsample_adjoint,
    positional_field,
    positional_patches,
)
from patchdiff.diffusion import (
    NoiseSchedule,
    DdimParams,
    make_schedule,
    forward_noise,
    denoised_estimate,
    sigma_t,
    ddim_step,
    sampling_timesteps,
)
from patchdiff.denoiser import (
    PatchInput,
    DenoiserOutput,
    ConvDenoiserConfig,
    ConvDenoiser,
    GaussianOracleDenoiser,
)
from patchdiff.ct import CTGeometry, make_geometry, project, backproject, fbp
from patchdiff.solver import CGState, cg_normal, cg_normal_state
from patchdiff.evaluation import (
    PhantomSpec,
    generate_phantom,
    psnr,
    nearest_neighbor,
    boundary_artifact_metric,
)
from patchdiff.sampler import (
    SamplerConfig,
    VolumeEstimatePair,
    denoise_whole_volume,
    score_full_average,
    sample_unconditional,
    reconstruct,
)
from patchdiff.training import TrainConfig, sample_training_patch, train_step, train

__version__ = "0.1.0"
