from .checkpoint import load_checkpoint, save_checkpoint
from .evaluate import EvalReport, evaluate, localize, write_report
from .losses import Batch, make_batch, total_loss
from .metrics import aggregate, pose_error
from .train import train

__all__ = ["load_checkpoint", "save_checkpoint", "EvalReport", "evaluate", "localize", "write_report",
           "Batch", "make_batch", "total_loss", "aggregate", "pose_error", "train"]
