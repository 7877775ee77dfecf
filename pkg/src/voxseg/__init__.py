"""Dense fully convolutional segmentation of subcortical brain structures.

The pipeline is split into small modules: :mod:`voxseg.io` (NIfTI and volume
types), :mod:`voxseg.tensor` (3D convolution and activations),
:mod:`voxseg.network` (architectures, forward/backward), :mod:`voxseg.training`,
:mod:`voxseg.inference`, :mod:`voxseg.metrics` and :mod:`voxseg.phantom`.
:mod:`voxseg.estimators` wraps them behind a scikit-learn style API.
"""
__version__ = "0.1.0"

from .io import BrainMask, LabelMap, NiftiError, Volume, normalize_intensity, read_nifti, write_nifti
from .network import NetworkSpec, NetworkState, build, make_spec
from .training import TrainingConfig, train
from .inference import ProbabilityMaps, segment_dense, sliding_window_oracle
from .metrics import dsc, evaluate, largest_component_filter, mhd
from .phantom import PhantomSpec, generate
from .checkpoint import load_checkpoint, save_checkpoint
from .estimators import FCNNSegmenter, IntensityNormalizer, LargestComponentFilter, MajorityVoteSegmenter

__all__ = [
    "BrainMask", "LabelMap", "NiftiError", "Volume", "normalize_intensity", "read_nifti", "write_nifti",
    "NetworkSpec", "NetworkState", "build", "make_spec",
    "TrainingConfig", "train",
    "ProbabilityMaps", "segment_dense", "sliding_window_oracle",
    "dsc", "evaluate", "largest_component_filter", "mhd",
    "PhantomSpec", "generate",
    "load_checkpoint", "save_checkpoint",
    "FCNNSegmenter", "IntensityNormalizer", "LargestComponentFilter", "MajorityVoteSegmenter",
]
