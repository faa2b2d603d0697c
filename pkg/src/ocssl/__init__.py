"""Continual latent alignment for online continual self-supervised learning.

A small float64 numpy stack: reverse-mode autodiff, MLP encoders, SimSiam
and NT-Xent objectives, alignment regularizers, replay buffers,
class-incremental streams, backward-pass budget accounting, linear probing
and the training strategies that tie them together.
"""

from .budget import BudgetLedger, BudgetSpec, assert_parity, cbp, iid_epochs, ledger_check
from .errors import BudgetBreach, IntegrityError, ParityViolation, ProtocolError
from .evaluation import ProbeConfig, final_and_average_accuracy, probe_accuracy, train_probe
from .strategies import StrategyConfig, make_strategy, train_iid
from .stream import AugmentationPolicy, make_synthetic_benchmark, split_class_incremental

__version__ = "0.1.0"

__all__ = [
    "AugmentationPolicy", "BudgetBreach", "BudgetLedger", "BudgetSpec", "IntegrityError", "ParityViolation",
    "ProbeConfig", "ProtocolError", "StrategyConfig", "assert_parity", "cbp", "final_and_average_accuracy",
    "iid_epochs", "ledger_check", "make_strategy", "make_synthetic_benchmark", "probe_accuracy",
    "split_class_incremental", "train_iid", "train_probe",
]
