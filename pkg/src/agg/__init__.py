"""Adversarial grammar sequence forecaster."""

from . import autodiff, adversarial, grammar, metrics, nn, synthdata  # noqa: F401
from .grammar import GrammarConfig, GrammarModel, SequenceSample, gumbel_softmax  # noqa: F401
from .synthdata import GroundTruthGrammar, SequenceDataset, build_preset_grammar  # noqa: F401

__version__ = "0.1.0"
