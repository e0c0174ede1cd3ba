"""Online early-exit action recognition over a synthetic compressed-domain stream format."""
from .codec import FramePacket, GopState, PartitionMap, StreamFormatError, StreamReader, decode_stream, write_stream
from .estimator import OnlineActionRecognizer
from .fusion import iie
from .model import ModelConfig, OARModel
from .runtime import CostModel, EvalReport, ExitRecord, evaluate_dataset, run_stream, simulate_cost
from .synth import DatasetSpec, synthesize_dataset
from .training import TrainConfig, iterative_train, tdp_weight, tdp_weights

__version__ = "0.1.0"

__all__ = [
    "CostModel", "DatasetSpec", "EvalReport", "ExitRecord", "FramePacket", "GopState", "ModelConfig", "OARModel",
    "OnlineActionRecognizer", "PartitionMap", "StreamFormatError", "StreamReader", "TrainConfig", "decode_stream",
    "evaluate_dataset", "iie", "iterative_train", "run_stream", "simulate_cost", "synthesize_dataset", "tdp_weight",
    "tdp_weights", "write_stream",
]
