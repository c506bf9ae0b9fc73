"""Uncertainty-aware self-training for unsupervised domain adaptation, at toy scale."""

from .basis import BasisSet, extract_basis, refine_basis, train_stage1
from .config import RoundConfig
from .data import DomainData, gen_synthetic, load_csv, write_csv
from .em import SoftPseudoLabel, e_step, m_step, pseudo_label_distribution, run_em
from .errors import UastError
from .model import Dataset, MlpModel, evaluate, forward, init_mlp, load_checkpoint, save_checkpoint
from .numerics import SeededRng
from .selftrain import run_round, run_self_training, select_samples

__version__ = "0.1.0"

__all__ = [
    "BasisSet", "extract_basis", "refine_basis", "train_stage1",
    "RoundConfig",
    "DomainData", "gen_synthetic", "load_csv", "write_csv",
    "SoftPseudoLabel", "e_step", "m_step", "pseudo_label_distribution", "run_em",
    "UastError",
    "Dataset", "MlpModel", "evaluate", "forward", "init_mlp", "load_checkpoint", "save_checkpoint",
    "SeededRng",
    "run_round", "run_self_training", "select_samples",
]
