"""Reslim downscaling model, its training objective and optimisation step."""

from .config import (PRESET_PARAMS, PRESETS, RESOLUTION_KEYS, ConfigError, ReslimConfig, count_tokens,
                     from_ini, from_preset, to_ini)
from .loss import LatWeights, TvPrior, bayesian_loss, data_term, neighbor_pair_count, tv_term
from .model import (ReslimModel, add_resolution_embedding, aggregate_variables, count_parameters,
                    denormalize_output, embed_variables, init_model, normalize_input, normalize_target,
                    param_shapes, predict, reslim_forward, residual_path, sincos_position, token_count)
from .train import NonFiniteLoss, evaluate_loss, prepare_pair, sample_loss, train_step
