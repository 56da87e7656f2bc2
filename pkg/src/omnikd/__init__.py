"""Desk-scale laboratory for cross-modal self-distillation in a tiny
omnimodal transformer over synthetic vision, text, and audio."""

from .tensor import Tensor, check_gradients, cross_entropy, kl_divergence, no_grad
from .data import (DatasetManifest, Scene, TriModalSample, build_manifest,
                   gen_asr_dataset, gen_mmalign, gen_scene, gen_vqa_dataset,
                   render_question, synth_audio)
from .model import ModelConfig, OmniModel, load_checkpoint, save_checkpoint
from .training import (Adam, StageConfig, TrainLog, freeze_policy, loss_combined,
                       loss_self_kd, loss_sft, lr_schedule, run_stage)
from .evaluation import (AttentionProfile, attention_profile, compute_gap,
                         eval_accuracy, mmalign_eval, profile_distance, yes_ratio)
from .experiment import Experiment, default_config, load_config

__version__ = "0.1.0"
