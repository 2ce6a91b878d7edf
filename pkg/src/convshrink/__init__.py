"""Structured pruning with full graph rewriting.

Takes a convolutional computation graph plus a per-filter keep/drop mask,
works out every weight slice and whole node the mask disconnects, and
emits a strictly smaller graph that computes the same function as the
masked original.  Skip connections survive through routed additions that
say which channel of which operand feeds each output channel.
"""

from .graph import (
    Add,
    BatchNorm2d,
    Concat,
    Conv2d,
    CycleError,
    GlobalAvgPool,
    Graph,
    GraphError,
    IndexAdd,
    IndexMap,
    InputOp,
    Node,
    OutputOp,
    ReLU,
    ShapeError,
    Upsample,
    Violation,
    channel_counts,
    conv_pad_amounts,
    count_macs,
    count_params,
    identity_index_map,
    spatial_shapes,
    topo_order,
    validate_graph,
)
from .formats import (
    ParseError,
    graph_to_json,
    load_graph,
    load_mask,
    load_tensor,
    mask_to_json,
    parse_graph,
    parse_mask,
    save_graph,
    save_mask,
    save_tensor,
)
from .interpreter import (
    MaskError,
    apply_hard_mask,
    check_mask,
    op_conv2d,
    op_index_add,
    run_graph,
    run_single,
)
from .maskgen import (
    FilterMask,
    FilterScores,
    MaskCriterionError,
    PruningConfig,
    all_ones_mask,
    build_mask,
    iteration_schedule,
    score_bn_gamma,
    select_global,
    select_local,
    smooth_l1_penalty,
)
from .abstraction import (
    AbstractGraph,
    ChannelLiveness,
    IdentityConv,
    StructuralMask,
    build_abstraction,
    connectivity_backward,
    connectivity_forward,
    derive_structural_mask,
    insert_identity_convs,
    liveness,
)
from .shrinker import (
    AddResolution,
    CollapseError,
    CollapseReport,
    ShrinkError,
    ShrunkGraph,
    detect_collapse,
    extract_index_maps,
    rewrite_graph,
    shrink_pipeline,
    structural_mask_doc,
)
from .report import ShrinkReport, compression_report, format_sweep

__version__ = "0.1.0"
