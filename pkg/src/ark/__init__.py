"""Student-teacher multi-task pretraining on heterogeneous synthetic tasks, with an evaluation battery."""

from .data import DatasetManifest, SampleRecord, TaskSpec, generate_synthetic_suite, load_manifest, save_manifest
from .estimators import ArkPretrainer, LinearProbe
from .eval import FinetuneConfig, MetricReport, ProbeConfig, export_embeddings, finetune_trials, linear_probe, probe_trials
from .nn import EncoderConfig, ModelPair, build_model, load_checkpoint, save_checkpoint
from .pretrain import PretrainConfig, RoundLog, run, run_concurrent, run_cyclic, sequential_baseline

__version__ = "0.1.0"

__all__ = [
    "ArkPretrainer",
    "DatasetManifest",
    "EncoderConfig",
    "FinetuneConfig",
    "LinearProbe",
    "MetricReport",
    "ModelPair",
    "PretrainConfig",
    "ProbeConfig",
    "RoundLog",
    "SampleRecord",
    "TaskSpec",
    "build_model",
    "export_embeddings",
    "finetune_trials",
    "generate_synthetic_suite",
    "linear_probe",
    "load_checkpoint",
    "load_manifest",
    "probe_trials",
    "run",
    "run_concurrent",
    "run_cyclic",
    "save_checkpoint",
    "save_manifest",
    "sequential_baseline",
]
