"""Gradient-energy probing and dominant-module LoRA placement on a toy transformer.

The package measures, for every attention and feed-forward projection of a
small decoder model, how much trainable gradient energy a low-rank adapter
placed there would receive at initialization; selects the dominant
down-projection; and fine-tunes under configurable placement strategies.
"""

from .linalg import RngState, frobenius_sq, kaiming_uniform_init, trace_of_gram
from .lora import (LoraAdapter, PlacementMode, PlacementPlan, effective_weight,
                   factor_gradients, init_adapter, train_step_lora)
from .model import (GradientSet, ModelConfig, ModelParams, ModuleId, ProjKind,
                    backward_projection_grads, candidate_modules, forward,
                    init_params, input_dims, load_checkpoint, save_checkpoint)
from .page import (PageMap, PageProvenance, concentration_report, expected_ata_check,
                   page_closed_form, page_monte_carlo, page_trace_form, select_dominant)
from .probe import (ProbeSample, SensitivityMap, fisher_trace_check, module_sensitivity,
                    probe_loss, sample_gradient)
from .tasks import TaskData, TaskSpec, generate_samples, make_task_data
from .trainer import RunRecord, TrainConfig, lr_at, placement_sweep, run_experiment

__version__ = "0.1.0"
