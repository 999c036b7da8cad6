"""Hybrid selective-SSM / attention road segmentation with topology metrics.

A small numpy/scipy stack: a tape-based autograd substrate, a selective
state-space sequence mixer with a parallel associative scan, 2D scan-order
serialization, a four-stage hybrid backbone with a pyramid-pooling decoder,
segmentation losses, a skeleton-graph APLS evaluation pipeline, a synthetic
occluded-road scene generator, and a seeded training loop.
"""

from .backbone import (BackboneConfig, build_model, layout_to_string,
                       model_forward, parse_stage_layout)
from .checkpoint import load_checkpoint, save_checkpoint
from .losses import LossConfig, bce_loss, binarize, combined_loss, dice_loss, f1, focal_loss, iou
from .scan2d import (ScanOrder, build_orders, deserialize, multi_directional_ssm,
                     serialize)
from .ssm import (SSMParams, blelloch_prefix, discretize_zoh, init_ssm_params,
                  scan_parallel, scan_sequential, selective_params, ssm_forward)
from .synthgen import SceneConfig, generate_dataset, generate_scene, load_dataset
from .tensor import (ConfigError, DimensionError, DomainError, StateError,
                     Tape, Tensor, backward, grad_check)
from .topology import (RoadGraph, apls, dijkstra, inject_control_nodes,
                       mask_to_graph, shortest_path_length, skeleton_to_graph,
                       skeletonize, snap_nodes)
from .training import (AdamWState, OptimConfig, RunConfig, adamw_step, lr_at,
                       toy_run_config, train)

__all__ = [name for name in dir() if not name.startswith("_")]
