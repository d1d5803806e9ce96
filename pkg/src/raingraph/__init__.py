"""Climate networks from gridded rainfall, a spatially regularized graph
attention autoencoder, and reconstruction-error anomaly detection.

Modules:
    grid        -- grid points, event series, graphs, daily snapshots
    eventsync   -- wet-day events and event-synchronization networks
    autodiff    -- tape-based reverse-mode gradients over dense/sparse kernels
    gat         -- GAT and GCN layers, encoder/decoder
    spatial     -- Gaussian geographic weights and the consistency penalty
    training    -- loss, gradient-descent loop, MSE/MAE metrics
    anomaly     -- scoring, masking, percentile flags, Mann-Kendall trend
    dataio      -- table ingestion, synthetic data, file formats
    cli         -- command-line pipeline
"""

__version__ = "0.1.0"

from raingraph.grid import (
    ClimateSnapshot,
    EventSeries,
    GridPoint,
    SpatialGraph,
    validate_snapshot,
)
from raingraph.eventsync import ESConfig, SyncResult, build_graph, extract_events, sync_pair
from raingraph.gat import ModelParams, decode, encode, init_params
from raingraph.spatial import SpatialWeights, build_weights, scr_loss
from raingraph.training import TrainConfig, evaluate, recon_loss, train
from raingraph.anomaly import (
    AnomalyReport,
    flag_anomalies,
    mann_kendall,
    overestimation_mask,
    score_snapshot,
    yearly_counts,
)

__all__ = [
    "ClimateSnapshot",
    "EventSeries",
    "GridPoint",
    "SpatialGraph",
    "validate_snapshot",
    "ESConfig",
    "SyncResult",
    "build_graph",
    "extract_events",
    "sync_pair",
    "ModelParams",
    "encode",
    "decode",
    "init_params",
    "SpatialWeights",
    "build_weights",
    "scr_loss",
    "TrainConfig",
    "train",
    "evaluate",
    "recon_loss",
    "AnomalyReport",
    "score_snapshot",
    "overestimation_mask",
    "flag_anomalies",
    "yearly_counts",
    "mann_kendall",
]
