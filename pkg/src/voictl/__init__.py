"""Event-triggered LQG control with a value-of-information trigger."""

from .estimation import CovarianceSchedule, covariance_schedule, decoder_step, encoder_init, encoder_update
from .lqr import RiccatiSolution, ce_control, riccati_backward
from .model import ModelError, ProcessModel, load_model, model_from_dict, scalar_model, validate_model
from .policies import CE, ZERO, ControlPolicy, TriggerPolicy, make_trigger
from .sim import LossReport, NoiseBank, evaluate, run_batch, run_episode, sweep_lambda
from .voidp import GridSpec, ValueTable, backward_induction, extract_threshold, voi

__all__ = [
    "CE", "ZERO", "ControlPolicy", "CovarianceSchedule", "GridSpec", "LossReport", "ModelError", "NoiseBank",
    "ProcessModel", "RiccatiSolution", "TriggerPolicy", "ValueTable", "backward_induction", "ce_control",
    "covariance_schedule", "decoder_step", "encoder_init", "encoder_update", "evaluate", "extract_threshold",
    "load_model", "make_trigger", "model_from_dict", "riccati_backward", "run_batch", "run_episode",
    "scalar_model", "sweep_lambda", "validate_model", "voi",
]
