"""Secure transformer inference simulator with MPC-minimizing transforms."""

from .model import Model, ModelConfig, generate, ideal_functionality
from .protocol import ProtocolConfig, run_protocol
from .ring import FixedPointFormat, decode, encode
from .sharing import Engine
from .transforms import Partition, TransformManifest, apply_manifest

__all__ = [
    "Engine",
    "FixedPointFormat",
    "Model",
    "ModelConfig",
    "Partition",
    "ProtocolConfig",
    "TransformManifest",
    "apply_manifest",
    "decode",
    "encode",
    "generate",
    "ideal_functionality",
    "run_protocol",
]

__version__ = "0.1.0"
