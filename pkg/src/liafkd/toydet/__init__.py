"""Synthetic detection environment: scenes, tiny detectors, task loss and mAP."""
from .loss import assign_targets, detection_task_loss, focal_loss
from .metrics import COCO_THRESHOLDS, average_precision, box_iou, evaluate_map
from .model import STRIDE, DetectorOutput, TinyDetector, build_detector, decode, detector_forward
from .scenes import Corpus, SceneSpec, SyntheticScene, generate_scene, read_manifest, scene_seed
