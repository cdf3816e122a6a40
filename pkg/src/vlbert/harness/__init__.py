from .checkpoint import Checkpoint, CheckpointError, decode, encode, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config

__all__ = ["Checkpoint", "CheckpointError", "ConfigError", "RunConfig", "decode", "encode", "load_checkpoint",
           "load_config", "parse_config", "save_checkpoint"]
