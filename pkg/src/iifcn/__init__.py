"""II-FCN lesion segmentation: identity inception encoder-decoder, losses, CRF refinement."""

from .model import Model, ModelConfig, admissible, build_model, nearest_admissible, pad_and_crop_infer

__version__ = "0.1.0"

__all__ = ["Model", "ModelConfig", "admissible", "build_model", "nearest_admissible", "pad_and_crop_infer"]
