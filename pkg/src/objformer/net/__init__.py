from .complexity import complexity_table, model_macs, param_count
from .config import ModelConfig
from .model import Batch, ObjFormer

__all__ = ["Batch", "ModelConfig", "ObjFormer", "complexity_table", "model_macs", "param_count"]
