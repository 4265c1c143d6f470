"""Segmentation-network construction kit with a cascade multi-scale decoder.

Builds encoder prototypes (linear, residual, dense), the cascade decoder and
its ablation variants, and the baseline decoder prototypes (model-wise,
scale-wise, layer-wise) on a minimal dense-tensor autograd engine, together
with losses, boundary metrics, and a deterministic training harness.

Submodules import lazily so the CLI can configure threading before numpy
loads.
"""

__version__ = "0.1.0"

_EXPORTS = {
    "Tensor": "tensor", "Tape": "tensor", "backward": "tensor",
    "tensor_create": "tensor", "finite_difference_check": "tensor",
    "ConvParams": "ops", "BatchNormState": "ops",
    "conv_forward": "ops", "deconv_forward": "ops", "maxpool": "ops",
    "batch_norm": "ops", "relu": "ops", "concat_channels": "ops",
    "add_elementwise": "ops", "softmax_channels": "ops",
    "EncoderSpec": "networks", "DecoderSpec": "networks",
    "NetworkOutput": "networks", "Network": "networks",
    "build_encoder": "networks", "build_decoding_block": "networks",
    "build_cascade_decoder": "networks", "build_baseline_decoder": "networks",
    "build_network": "networks", "collapse_db_sequence": "networks",
    "forward_network": "networks", "average_logits": "networks",
    "LossConfig": "losses", "cross_entropy_loss": "losses",
    "soft_dice_loss": "losses", "total_loss": "losses",
    "dice_score": "metrics", "extract_boundary": "metrics",
    "avg_boundary_distance": "metrics", "hausdorff_distance": "metrics",
    "iou_f1": "metrics", "MetricsReport": "metrics",
    "evaluate_segmentation": "metrics",
    "SyntheticTask": "synth", "generate_sample": "synth",
    "init_gaussian": "train", "Adam": "train", "adam_step": "train",
    "train": "train",
    "RunConfig": "config", "parse_config": "config", "serialize_config": "config",
    "ShapeError": "errors", "ConfigError": "errors",
    "DivergenceError": "errors", "MissingGradientError": "errors",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name):
    module = _EXPORTS.get(name)
    if module is None:
        raise AttributeError(f"module 'cascadeseg' has no attribute {name!r}")
    import importlib

    return getattr(importlib.import_module(f".{module}", __name__), name)
