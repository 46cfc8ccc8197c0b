"""Importance-weighted adversarial training for discrete sequence generators."""

from .data import Corpus, synth_grammar, synth_grid
from .estimators import (BaselineSchedule, GradientVector, MovingBaseline, maligan_grad, mixed_mle_mali_grad,
                         mle_grad, normalized_weights, reinforce_grad, unnormalized_is_grad)
from .models import Discriminator, RecurrentGenerator, SequenceBatch, TabularGenerator, Vocab
from .rollout import estimate_q, per_step_grad
from .training import DivergenceError, RunReport, TrainConfig, run_maligan, run_sequential_maligan

__version__ = "0.1.0"
