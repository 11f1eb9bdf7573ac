"""Supervised GANs for label-then-image synthesis of EM tissue, with an evaluation battery."""
from . import dataform, labelops, metrics, netspec, objectives, tabular, trainer
from .dataform import SectionStack, load_stack, make_synthetic_corpus, save_stack
from .trainer import Checkpoint, TrainConfig, sample_pipeline, train

__version__ = "0.1.0"

__all__ = ["Checkpoint", "SectionStack", "TrainConfig", "dataform", "labelops", "load_stack",
           "make_synthetic_corpus", "metrics", "netspec", "objectives", "sample_pipeline", "save_stack",
           "tabular", "train", "trainer"]
