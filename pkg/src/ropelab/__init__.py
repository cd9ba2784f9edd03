"""ropelab: a desk-scale transformer laboratory for partial rotary
position embeddings.

The package is organized bottom-up:

  * :mod:`ropelab.tensor`     float64 arrays with reverse-mode autodiff
  * :mod:`ropelab.rope`       rotary rounding, angle tables, cache accounting
  * :mod:`ropelab.attention`  causal grouped-query attention with QK-Norm
  * :mod:`ropelab.model`      residual block topologies and checkpoints
  * :mod:`ropelab.data`       byte corpora and synthetic echo tasks
  * :mod:`ropelab.train`      schedule, AdamW, loss traces, sweeps
  * :mod:`ropelab.planner`    position-cache memory budgeting
  * :mod:`ropelab.evaluation` held-out scoring and band comparison
  * :mod:`ropelab.cli`        train / sweep / plan / plan-curve / eval
"""

from .attention import (AttentionConfig, AttentionParams, QkNormParams,
                        attention_forward, causal_mask, init_attention_params,
                        qk_logit_bound, qk_normalize)
from .evaluation import BandPartition, EvalReport, compare_bands, evaluate
from .exceptions import (DivergenceError, NonFiniteError, ParameterError,
                         RangeError, ShapeError)
from .model import (BlockTopology, ModelConfig, ModelParams, block_forward,
                    config_from_dict, config_hash, config_to_dict,
                    count_parameters, init_model_params, lm_forward,
                    load_checkpoint, named_parameters, next_token_loss,
                    param_count, save_checkpoint)
from .planner import (PlanQuery, PlanResult, cache_bytes, emit_curve,
                      format_bytes, write_curve_csv)
from .rope import (RopeCache, RopeConfig, angles, apply_partial_rope,
                   build_cache, round_rotary_dims)
from .tensor import ComputationTape, Tensor, backward, no_grad, trace
from .train import (AdamW, LossTrace, Schedule, TrainRun, clip_gradients,
                    detect_spikes, held_out_stream, lr_at, read_trace_csv,
                    run_sweep, sweep_runs, train, write_trace_csv)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "AttentionConfig", "AttentionParams", "BandPartition",
    "BlockTopology", "ComputationTape", "DivergenceError", "EvalReport",
    "LossTrace", "ModelConfig", "ModelParams", "NonFiniteError",
    "ParameterError", "PlanQuery", "PlanResult", "QkNormParams", "RangeError",
    "RopeCache", "RopeConfig", "Schedule", "ShapeError", "Tensor", "TrainRun",
    "angles", "apply_partial_rope", "attention_forward", "backward",
    "block_forward", "build_cache", "cache_bytes", "causal_mask",
    "clip_gradients", "compare_bands", "config_from_dict", "config_hash",
    "config_to_dict", "count_parameters", "detect_spikes", "emit_curve",
    "evaluate", "format_bytes", "held_out_stream", "init_attention_params",
    "init_model_params", "lm_forward", "load_checkpoint", "lr_at",
    "named_parameters", "next_token_loss", "no_grad", "param_count",
    "qk_logit_bound", "qk_normalize", "read_trace_csv", "round_rotary_dims",
    "run_sweep", "save_checkpoint", "sweep_runs", "trace", "train",
    "write_curve_csv", "write_trace_csv",
]
