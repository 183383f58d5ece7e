"""Few-shot object detection with heterogeneous class-graph enhancement.

Class prototypes and candidate boxes become nodes of two graphs: a dense
prototype graph that mixes related classes, and a per-class scene graph that
ties candidate boxes to their class node, to overlapping boxes, and to a
global scene summary. Message passing over both graphs sharpens the features
before a pairwise matching head scores and localizes each candidate.

The subpackages split along that pipeline: ``core`` (episode data model),
``geometry`` (boxes, IoU, NMS), ``prototype`` (support aggregation),
``graph`` (graph construction), ``gcn`` (message passing), ``pipeline``
(enhancement plus detection), ``training`` (episodic SGD with analytic
gradients), ``synth`` (seeded scene generator), ``evaluation`` (AP metrics),
``fileio`` (JSON persistence), ``cli`` (command line front end).
"""

from .core import (
    BBox,
    ClassId,
    ClassKind,
    ClassPrototype,
    Detection,
    Episode,
    FeatureGrid,
    ProposalNode,
    ShapeError,
    flatten,
    unflatten,
)
from .evaluation import (
    COCO_THRESHOLDS,
    EvalRun,
    Metrics,
    ReportRow,
    ablation_report,
    average_precision,
    dataset_average_precision,
    dataset_metrics,
    write_report_csv,
)
from .fileio import (
    Checkpoint,
    FileFormatError,
    MalformedDataError,
    Manifest,
    ShapeInconsistencyError,
    VersionMismatchError,
    read_checkpoint,
    read_episode,
    read_manifest,
    write_checkpoint,
    write_episode,
    write_manifest,
)
from .gcn import (
    CPDirection,
    EdgeToggles,
    GcnParams,
    PassAudit,
    PPContext,
    gcn_layer,
    inter_class_pass,
    intra_class_pass,
    mlp_class_pass,
    smoothing_diagnostic,
)
from .geometry import BoxDelta, apply_delta, encode_delta, iou, nms
from .graph import (
    DEFAULT_IOU_THETA,
    InterClassGraph,
    IntraClassGraph,
    ZeroNormWarning,
    build_inter_class_graph,
    build_intra_class_graph,
    cosine,
    softmax_normalize,
)
from .pipeline import (
    EnhancedEpisode,
    MatchHead,
    cosine_matrix,
    detect_episode,
    enhance_episode,
    match_score,
    proposal_scores,
)
from .prototype import average_supports, modulate_query, spatial_avg_pool
from .synth import (
    GenConfig,
    GenerationError,
    class_centers,
    episode_stream,
    eval_episodes,
    generate_episode,
    sibling_pairs,
)
from .training import (
    GradCheckReport,
    Gradients,
    LabeledProposal,
    LossParts,
    TraceRow,
    TrainConfig,
    TrainResult,
    TrainingDiverged,
    bce_loss,
    episode_gradients,
    episode_loss,
    finite_difference_gradients,
    gradient_check,
    initialize_parameters,
    label_proposals,
    smooth_l1,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "BoxDelta",
    "COCO_THRESHOLDS",
    "CPDirection",
    "Checkpoint",
    "ClassId",
    "ClassKind",
    "ClassPrototype",
    "DEFAULT_IOU_THETA",
    "Detection",
    "EdgeToggles",
    "EnhancedEpisode",
    "Episode",
    "EvalRun",
    "FeatureGrid",
    "FileFormatError",
    "GcnParams",
    "GenConfig",
    "GenerationError",
    "GradCheckReport",
    "Gradients",
    "InterClassGraph",
    "IntraClassGraph",
    "LabeledProposal",
    "LossParts",
    "MalformedDataError",
    "Manifest",
    "MatchHead",
    "Metrics",
    "PPContext",
    "PassAudit",
    "ProposalNode",
    "ReportRow",
    "ShapeError",
    "ShapeInconsistencyError",
    "TraceRow",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "VersionMismatchError",
    "ZeroNormWarning",
    "ablation_report",
    "apply_delta",
    "average_precision",
    "average_supports",
    "bce_loss",
    "build_inter_class_graph",
    "build_intra_class_graph",
    "class_centers",
    "cosine",
    "cosine_matrix",
    "dataset_average_precision",
    "dataset_metrics",
    "detect_episode",
    "encode_delta",
    "enhance_episode",
    "episode_gradients",
    "episode_loss",
    "episode_stream",
    "eval_episodes",
    "finite_difference_gradients",
    "flatten",
    "gcn_layer",
    "generate_episode",
    "gradient_check",
    "initialize_parameters",
    "inter_class_pass",
    "intra_class_pass",
    "iou",
    "label_proposals",
    "match_score",
    "mlp_class_pass",
    "modulate_query",
    "nms",
    "proposal_scores",
    "read_checkpoint",
    "read_episode",
    "read_manifest",
    "sibling_pairs",
    "smooth_l1",
    "smoothing_diagnostic",
    "softmax_normalize",
    "spatial_avg_pool",
    "train",
    "unflatten",
    "write_checkpoint",
    "write_episode",
    "write_manifest",
    "write_report_csv",
]
