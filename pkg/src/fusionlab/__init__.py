"""Multimodal (text + image embedding) three-class classification lab."""

from .baselines import KernelSVM, LogisticRegression, RandomForest, StackingClassifier
from .crossval import ablate_image_noise, evaluate_cv, make_fitter
from .dataio import PCA, Corpus, Standardizer, SynthConfig, generate_synthetic, load_corpus, save_corpus
from .fusion import ArchConfig, FusionModel, forward, init_model, predict
from .metrics import MetricsReport, stratified_kfold
from .selftrain import SelfTrainConfig, run_self_training
from .train import FusionClassifier, TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "Corpus", "FusionClassifier", "FusionModel", "KernelSVM", "LogisticRegression",
    "MetricsReport", "PCA", "RandomForest", "SelfTrainConfig", "StackingClassifier", "Standardizer",
    "SynthConfig", "TrainConfig", "ablate_image_noise", "evaluate_cv", "fit", "forward",
    "generate_synthetic", "init_model", "load_corpus", "make_fitter", "predict",
    "run_self_training", "save_corpus", "stratified_kfold",
]
