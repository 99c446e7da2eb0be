"""Compression-aware keypoint detection toolkit.

A small numpy library around one pipeline: train an FCN-Pose segmentation
network on keypoint-disk masks, shrink it by L1-norm filter pruning with
channel propagation, quantize the survivors to FP16 storage, extract
keypoints from the activation maps by expansion clustering, and measure
what the compression bought (PCK, parameters, FLOPs, bytes, latency).
"""

from . import (
    binary16,
    compressor,
    dataset_synth,
    errors,
    metrics_eval,
    network,
    postprocess,
    tensor_core,
    trainer,
)
from .binary16 import fp16_to_fp32, fp32_to_fp16
from .compressor import PruningPlan, apply_prune, plan_prune, quantize_model
from .dataset_synth import ArmConfig, KeypointSet, Sample, build_dataset, gen_scene
from .errors import FcnPoseError
from .metrics_eval import PckConfig, benchmark_inference, pck, sweep
from .network import (
    ModelSpec,
    ModelWeights,
    build_fcn_pose,
    count_flops,
    count_params,
    forward,
    load_model,
    save_model,
)
from .postprocess import expansion_cluster, extract_keypoints
from .trainer import TrainConfig, kfold_split, retrain_after_prune, train

__version__ = "0.1.0"
