"""Dual-branch convolution / 2D selective state-space classifier for EEG drowsiness."""
from .data import (ContinuousRecording, EEGDataset, SplitSpec, bandpass_filter, downsample,
                   epoch_segment, load_dataset, perclos_label, preprocess_recording, save_dataset,
                   split_dataset, stratified_kfold, synth_generate)
from .model import (DrowzeeMamba, ModelConfig, build_model, count_params, load_checkpoint,
                    save_checkpoint)
from .ss2d import SS2D, cross_scan_expand, cross_scan_merge, ss2d_forward
from .ssm import (S6Weights, init_s6_weights, s6_selective_scan, selective_scan, ssm_apply_conv,
                  ssm_conv_kernel, ssm_recurrence, zoh_discretize)
from .tensor import ShapeError, Tensor, backward, finite_diff_check, no_grad
from .train import (AdamState, EvalReport, TrainConfig, adam_step, cross_entropy, cross_validate,
                    evaluate, train)

__version__ = "0.1.0"
