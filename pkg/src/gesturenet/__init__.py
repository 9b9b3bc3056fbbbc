"""Depth-based hand gesture recognition with a small CNN and binary weights."""
from .binary import (BinarizedKernel, BinarizedModel, binarization_objective, binarize_kernel,
                     binarize_model, binarized_conv_forward, binarized_training_step,
                     load_binarized_model, pack_bits, save_binarized_model, unpack_bits)
from .dataset import (ANGLES, FoldPlan, Sample, SynthConfig, augment_rotations, load_manifest,
                      make_folds, synth_generate)
from .estimators import GestureNetClassifier, HandSegmenter
from .evaluation import (ConfusionMatrix, SummaryStats, run_cross_validation, summary_stats,
                         vote_classify)
from .nn import (LayerSpec, Network, conv2d_forward, fc_forward, load_float_model,
                 maxpool_forward, save_float_model, sgd_step, softmax_cross_entropy, xavier_init)
from .segmentation import (SegmentationError, SegmentationParams, dilate, fill_holes,
                           largest_component_containing, resize_mask, segment_hand,
                           threshold_depth)

__version__ = "0.1.0"
