"""Stochastic sequential neural network: a segment model with recurrent
emissions and an amortised Gumbel-Softmax posterior."""
from .errors import (ContractViolation, DatasetParseError, NonDeterminismError, NonFiniteError,
                     ResourceError, SchemaError, ShapeError, UsageError)
from .generative import GenerativeParams, LatentPath, Sequence, joint_log_prob, sample_sequence
from .inference import InferenceParams, posterior_log_prob, sample_posterior_path
from .kernels import BACKEND

__version__ = "0.1.0"
