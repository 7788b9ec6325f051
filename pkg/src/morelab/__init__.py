"""Desk-scale lab for gated mixtures of perturbation-robust experts."""

from .attacks import AttackSpec, fgsm, msd_perturb, pgd, project, random_search_attack
from .data import Dataset, load_idx, save_idx, synth_blobs, synth_digits
from .ensemble import Ensemble, assemble, classify, gate_weights, more_finetune, more_forward
from .evaluation import EvalReport, ThreatEntry, evaluate, render_report
from .experiment import run_experiment
from .nn import ArchSpec, Model, build_classifier
from .tensor import Tensor, backward, finite_diff_gradient
from .training import (
    Expert,
    TrainConfig,
    train_adversarial,
    train_avg,
    train_clean,
    train_max,
    train_msd,
    train_weather,
)
from .weather import PerturbSpec, fog, snow, weatherize_dataset

__version__ = "0.1.0"
