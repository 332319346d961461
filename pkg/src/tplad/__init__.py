"""Template-and-parameter log anomaly detection.

An unsupervised pipeline over raw text logs: fixed-depth prefix-tree
template mining, similarity-weighted template embeddings, typed
parameter encoders, and a bidirectional recurrent sequence model with
attention — combined by an online detector that flags both unexpected
template sequences and out-of-profile parameter values.
"""

from .detector import AnomalyReport, Detector, DetectorConfig, stream_detect
from .errors import TpladError
from .evaluation import LabeledRecord, Scorecard, load_dataset, score
from .modelstate import ModelState, load, save
from .parser import DrainParser, ParsedLog, RawLog, Template
from .pipeline import PipelineConfig, config_hash, detect_online, train_offline

__version__ = "0.1.0"

__all__ = [
    "AnomalyReport",
    "Detector",
    "DetectorConfig",
    "DrainParser",
    "LabeledRecord",
    "ModelState",
    "ParsedLog",
    "PipelineConfig",
    "RawLog",
    "Scorecard",
    "Template",
    "TpladError",
    "config_hash",
    "detect_online",
    "load",
    "load_dataset",
    "save",
    "score",
    "stream_detect",
    "train_offline",
    "__version__",
]
