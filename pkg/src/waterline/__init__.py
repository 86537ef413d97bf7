"""Waterline detection with a lightweight shuffle/SE network and sliding peepholes."""

from .detector import DetectorConfig, Window, WaterlineMap, detect_stream, scan_frame
from .metrics import GroundTruth, MetricReport, evaluate_map
from .netbuilder import (GanSpec, Network, NetworkSpec, build_wldetectnet, build_wlgeneratenet,
                         count_conv_layers, count_flops, count_params)
from .synth import SceneParams, oracle_classifier, synth_patch_dataset, synth_scene
from .training import TrainSchedule, sgd_step, train_two_stage
from .weightfile import load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "DetectorConfig", "Window", "WaterlineMap", "detect_stream", "scan_frame",
    "GroundTruth", "MetricReport", "evaluate_map",
    "GanSpec", "Network", "NetworkSpec", "build_wldetectnet", "build_wlgeneratenet",
    "count_conv_layers", "count_flops", "count_params",
    "SceneParams", "oracle_classifier", "synth_patch_dataset", "synth_scene",
    "TrainSchedule", "sgd_step", "train_two_stage",
    "load_weights", "save_weights",
]
