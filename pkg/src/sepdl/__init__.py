"""Separable (Kronecker) dictionary learning toolkit.

Learns a pair of small dictionary factors for 2D signal patches with
closed-form least-squares or Procrustes updates, codes patches with
2D orthogonal matching pursuit or hard thresholding, trains data-parallel
with communication volume independent of the dataset size, and denoises
images with error-driven coding of overlapping patches.
"""

__version__ = "0.1.0"

from .coding import (
    BatchCodes,
    CodingStop,
    ErrorDriven,
    FixedSparsity,
    SparseCode,
    omp1d_reference,
    omp2d,
    omp2d_batch,
    threshold_code,
    threshold_code_batch,
)
from .data import (
    PatchSet,
    Shard,
    add_gaussian_noise,
    extract_patches,
    load_dict,
    load_patchset,
    load_pgm,
    save_dict,
    save_patchset,
    save_pgm,
    shard_dataset,
    synth_separable,
)
from .denoise import DenoiseConfig, DenoiseResult, denoise_image, psnr, ssim
from .linalg import chol_spd_solve, kron, polar_factor, unvec, vec
from .train import (
    RunMetrics,
    TrainConfig,
    TrainResult,
    init_dictionaries,
    objective,
    reduce_partials,
    rmse,
    train,
)
from .update import (
    DictionaryPair,
    DictMode,
    NormScaling,
    PartialSums,
    Side,
    accumulate_left,
    accumulate_right,
    update_left_general,
    update_left_ortho,
    update_right_general,
    update_right_ortho,
)

__all__ = [name for name in dir() if not name.startswith("_")]
