"""Model core: config, mask patterns, the trunk network, checkpoints."""

from .checkpoint import (checkpoint_hash, load_checkpoint, read_header,
                         save_checkpoint)
from .config import ModelConfig, config_hash
from .masks import MaskPattern, decode_step_pattern, visible_pattern
from .network import (DomainModules, DynamicsModel, group_positions,
                      parameter_partition, timestep_embedding,
                      ungroup_positions)

__all__ = [
    "DomainModules", "DynamicsModel", "MaskPattern", "ModelConfig",
    "checkpoint_hash", "config_hash", "decode_step_pattern",
    "group_positions", "load_checkpoint", "parameter_partition",
    "read_header", "save_checkpoint", "timestep_embedding",
    "ungroup_positions", "visible_pattern",
]
