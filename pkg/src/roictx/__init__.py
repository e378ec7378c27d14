"""Context-mining RoI operators with verified gradients."""

from .errors import DegenerateBoxError, FormatError, NumericError, \
    RoictxError, ShapeError, TrainingError
from .geometry import Box, LabeledAssignment, RegressionTarget, assign_labels, \
    decode, encode, generate_anchors, iou, load_roi_csv, nms, save_roi_csv
from .gradcheck import GradCheckReport, check
from .losses import LabeledSample, cls_loss, loss_backward, multitask_loss, \
    smooth_l1, softmax
from .mining import CandidateGridSpec, CandidatePool, ContextLayout, \
    ContextMiner, ContextScorer, DIRECTIONS, MinedRoIFeature, MiningConfig, \
    SelectionRecord, build_layout, candidate_pool_for_cell, \
    fixed_context_variant, mine_context, mine_context_backward, mine_many, \
    mined_to_record, score_candidates, selection_indices
from .roi_ops import RangeMaxTable, RoIMap, roi_align, roi_align_backward, \
    roi_pool, roi_pool_backward
from .attacks import SplitMix64, apply_patch, apply_patches, patch_region, \
    region_pixel_window
from .synth import SynthConfig, SynthScene, TrainResult, generate, train_head
from .tensor import as_tensor, channel_block, concat_channels, load_ften, \
    save_ften, zeros

__version__ = "0.1.0"
