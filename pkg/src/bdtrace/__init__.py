"""Birth-death chains as time-changed Feller's Brownian motions."""

from .bd_core import (
    AtomicMeasure,
    BirthDeathMatrix,
    BoundaryClass,
    ChainParams,
    FellerParams,
    ScaleSpeed,
    StateEmbedding,
    allocate_jump_measure,
    build_matrix,
    chain_from_feller,
    classify_boundary,
    compute_scale_speed,
    feller_from_chain,
    geometric_matrix,
    q_geo,
    state_embedding,
)

__version__ = "0.1.0"
