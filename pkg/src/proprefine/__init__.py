"""Temporal action proposal refinement.

A grouped local/global attention encoder over snippet feature sequences,
progressive two-granularity boundary regression, training utilities with
gradient verification, Soft-NMS post-processing, and recall/AUC/mAP
evaluation, plus a CLI that chains them end to end.
"""

from .seqio import (
    DataError,
    FeatureSequence,
    FormatError,
    GroundTruth,
    Proposal,
    SynthConfig,
    VideoAnnotation,
    load_features,
    pad_to,
    synth_dataset,
    write_features,
)
from .lgte import (
    EncoderParams,
    LgteBlockParams,
    encoder_forward,
    gte_group_forward,
    lgte_block_forward,
    lte_group_forward,
    scaled_group_softmax,
)
from .tbr import (
    RefinedProposal,
    RefineResult,
    TbrStageParams,
    apply_offsets,
    frame_level_head,
    fuse_proposals,
    segment_level_head,
    tbr_refine,
    temporal_roi_align,
)
from .train import (
    LabeledProposal,
    TrainConfig,
    assign_labels,
    grad_check,
    regression_targets,
    sample_balanced,
    smooth_l1,
    stage_loss,
    train_model,
)
from .postproc import SoftNmsConfig, fuse_scores, soft_nms
from .evalkit import EvalReport, auc, average_recall_at_an, detection_map, tiou

__version__ = "0.1.0"
