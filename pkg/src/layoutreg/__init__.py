"""Indoor scene reconstruction: fragment registration with layout constraints."""

from .geometry import Plane, RigidTransform
from .io import Dataset, Fragment, load_dataset, save_dataset
from .pipeline import PipelineConfig, load_config, run_pipeline
from .synth import SyntheticRoomSpec, synthesize_room

__all__ = [
    "Dataset",
    "Fragment",
    "PipelineConfig",
    "Plane",
    "RigidTransform",
    "SyntheticRoomSpec",
    "load_config",
    "load_dataset",
    "run_pipeline",
    "save_dataset",
    "synthesize_room",
]
__version__ = "0.1.0"
