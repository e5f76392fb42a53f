"""Multimodal flow-matching generator of audio latents.

Video, sync, caption and lyrics streams condition an MMDiT-style velocity
network through joint attention and adaptive layer norm; rotary positions
share one clock across frame rates.
"""

from .batching import CondBatch, Conditions, collate
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ModelConfig, load_config, save_config
from .estimator import FlowMatchingGenerator
from .flow import Trainer, cfm_loss, lr_schedule, sample
from .manifest import SampleManifestRecord, read_manifest, write_manifest
from .model import FlowNetwork

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "CondBatch", "Conditions", "FlowMatchingGenerator", "FlowNetwork",
    "ModelConfig", "SampleManifestRecord", "Trainer", "cfm_loss", "collate", "load_checkpoint",
    "load_config", "lr_schedule", "read_manifest", "sample", "save_checkpoint", "save_config",
    "write_manifest",
]
