"""Quanta burst photography: simulate, align and merge single-photon frame sequences."""
from .core_model import (DomainError, FrameSequence, PRESETS, SaturationError, SensorSpec, SumImage,
                         detection_probability, expected_sum, fisher_rmse_quanta, mle_flux, preset,
                         rmse_conventional)
from .simulator import MotionTrajectory, plan_exposure, sample_spad_sequence
from .align import AlignConfig, PatchFlow, align_blocks, block_sums, hierarchical_align
from .merge import MergeConfig, MergedImage, SRConfig, merge_pipeline, super_resolve, wiener_merge
from .reconstruct import correct_hot_pixels, finalize_image, tv_denoise

__version__ = "0.1.0"

__all__ = [
    "DomainError", "FrameSequence", "PRESETS", "SaturationError", "SensorSpec", "SumImage",
    "detection_probability", "expected_sum", "fisher_rmse_quanta", "mle_flux", "preset", "rmse_conventional",
    "MotionTrajectory", "plan_exposure", "sample_spad_sequence",
    "AlignConfig", "PatchFlow", "align_blocks", "block_sums", "hierarchical_align",
    "MergeConfig", "MergedImage", "SRConfig", "merge_pipeline", "super_resolve", "wiener_merge",
    "correct_hot_pixels", "finalize_image", "tv_denoise",
]
