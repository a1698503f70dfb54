"""One-shot link prediction on temporal knowledge graphs."""
from .core import HistoryProvider, HistoryWindow, Quadruple, TemporalKG, Vocab
from .dataset import FrequencyThresholds, MetaSplit, build_split, load_benchmark
from .encoder import EncoderConfig, ModelParams, encode, encode_batch
from .errors import TKGError
from .estimator import OneShotLinkPredictor
from .metrics import MetricsReport, evaluate_split, rank_query
from .synth import SynthSpec, generate
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig", "FrequencyThresholds", "HistoryProvider", "HistoryWindow", "MetaSplit",
    "MetricsReport", "ModelParams", "OneShotLinkPredictor", "Quadruple", "SynthSpec",
    "TKGError", "TemporalKG", "TrainConfig", "Vocab", "build_split", "encode", "encode_batch",
    "evaluate_split", "generate", "load_benchmark", "rank_query", "train",
]
