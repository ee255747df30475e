"""ternexport: model-hub checkpoints -> ternmm f32 containers.

Reads safetensors files, renames/transposes tensors per a declarative
JSON mapping, and writes the bit-exact container the inference engine
consumes. Quantization stays in the engine's own tooling; this package
never ternarizes anything.
"""

from .export import export_checkpoint, verify_export
from .mapping import MappingSpec

__version__ = "0.1.0"

__all__ = ["MappingSpec", "export_checkpoint", "verify_export"]
