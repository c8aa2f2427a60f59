"""A retrieval-augmented model that absorbs a stream of new facts online.

New samples are encoded into a bounded FIFO memory bank searched through a
two-level cluster index. A multi-stage generator answers from the query plus
gated retrieved contexts, and each update round trains the model on a mix of
replayed and new samples with a distillation term toward a briefly fine-tuned
teacher copy.
"""
from .errors import (
    ConfigError,
    CorpusError,
    EmptyIndexError,
    EmptyInputError,
    EmptyKeyError,
    FormatError,
    GradientSetError,
    IndexStaleError,
    NumericAbort,
    ParameterError,
    ProbeError,
    RagiuError,
    ShapeError,
)
from .harness import MetricsReport, StreamConfig, run_experiment, synth_stream
from .memory import MemoryBank, Sample, encode
from .retrieval import GateStack, build_index, query, refresh_index
from .trainer import CoreModel, ModelConfig, RAGSystem, TrainConfig, online_update_round, total_loss

__version__ = "0.1.0"
