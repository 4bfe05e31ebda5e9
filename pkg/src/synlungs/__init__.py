"""Synthetic lung-CT dataset generation.

Procedural chest phantoms, stochastic nodules with clustered lumpy
texture, fan-beam CT simulation with Hann-filtered back-projection,
logistic malignancy labels and a LUNA16-style dataset export.
"""

__version__ = "0.1.0"

from .volume import MaterialTable, PhantomMetadata, VolumeKind, VoxelVolume, load_volume, save_volume  # noqa: E402
from .phantom import generate_chest_phantom, lung_mask, materialize_attenuation  # noqa: E402
from .lesion import (  # noqa: E402
    ClbParams,
    GammaParams,
    LesionSpec,
    LesionVolume,
    NoValidPlacement,
    PlacementResult,
    embed_lesion,
    place_lesion,
    sample_size,
    synthesize_lesion,
)
from .labeler import (  # noqa: E402
    LogisticModel,
    NoduleFeatures,
    assign_label,
    default_model,
    evaluate_auc,
    fit,
    predict_probability,
)
from .metrics import auc, dice  # noqa: E402

__all__ = [
    "ClbParams",
    "GammaParams",
    "LesionSpec",
    "LesionVolume",
    "LogisticModel",
    "MaterialTable",
    "NoValidPlacement",
    "NoduleFeatures",
    "PhantomMetadata",
    "PlacementResult",
    "VolumeKind",
    "VoxelVolume",
    "__version__",
    "assign_label",
    "auc",
    "default_model",
    "dice",
    "embed_lesion",
    "evaluate_auc",
    "fit",
    "generate_chest_phantom",
    "load_volume",
    "lung_mask",
    "materialize_attenuation",
    "place_lesion",
    "predict_probability",
    "sample_size",
    "save_volume",
    "synthesize_lesion",
]
