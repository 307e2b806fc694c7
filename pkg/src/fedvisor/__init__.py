"""Federated visual object detection with layer-wise update compression."""

from .config import ClientConfig, TaskConfig
from .detection import ArchConfig, ModelParams, forward, init_model, yolo_loss

__all__ = ["ArchConfig", "ClientConfig", "ModelParams", "TaskConfig", "forward", "init_model", "yolo_loss"]
__version__ = "0.1.0"
