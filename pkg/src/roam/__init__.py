"""ROAM: region-token optimal-transport routing for mixture-of-experts slide aggregation."""

from roam.bagio import PatchBag, DatasetManifest, SynthSpec, read_bag, write_bag, subsample_bag
from roam.nnmodel import RoamConfig, ModelParams, init_params, roam_forward
from roam.otroute import sinkhorn, graph_sinkhorn, topk_dispatch, cost_matrix, exact_ot_oracle
from roam.traingrad import TrainConfig, train, auc, qwk, neighbor_disagreement

__all__ = [
    "PatchBag",
    "DatasetManifest",
    "SynthSpec",
    "read_bag",
    "write_bag",
    "subsample_bag",
    "RoamConfig",
    "ModelParams",
    "init_params",
    "roam_forward",
    "sinkhorn",
    "graph_sinkhorn",
    "topk_dispatch",
    "cost_matrix",
    "exact_ot_oracle",
    "TrainConfig",
    "train",
    "auc",
    "qwk",
    "neighbor_disagreement",
]

__version__ = "0.1.0"
