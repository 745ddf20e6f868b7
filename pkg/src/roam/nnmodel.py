"""Learnable components and the end-to-end forward pass, plus checkpoint IO."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from roam.bagio import PatchBag
from roam.otroute import (
    DispatchMatrix,
    Marginals,
    TransportPlan,
    cost_matrix,
    graph_sinkhorn,
    sinkhorn,
    softmax_routing_plan,
    topk_dispatch,
)
from roam.tokenizer import RegionGraph, RegionSet, build_region_graph, heat_kernel_weights, tokenize_regions

CKPT_MAGIC = b"ROAMCKPT"
CKPT_VERSION = 1
HEAD_HIDDEN = 256


class CheckpointError(Exception):
    """Malformed or incompatible checkpoint file."""


@dataclass
class RoamConfig:
    d_in: int = 512
    d: int = 512
    target_m: int = 256
    k_nn: int = 8
    n_experts: int = 8
    top_k: int = 2
    eps: float = 0.1
    n_iters: int = 20
    lambda_s: float = 0.3
    n_smooth: int = 3
    d_attn: int = 64
    dropout: float = 0.25
    n_classes: int = 2
    # Ablation switches
    no_routing_gnn: bool = False
    no_graph_reg: bool = False
    softmax_routing: bool = False
    no_ot_modulation: bool = False
    detach_routing: bool = False

    def validate(self) -> None:
        for f in ("d_in", "d", "target_m", "k_nn", "n_experts", "top_k", "n_iters", "d_attn", "n_classes"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not (0.0 <= self.lambda_s <= 1.0):
            raise ValueError("lambda_s must lie in [0, 1]")
        if not (0 <= self.n_smooth <= self.n_iters):
            raise ValueError("n_smooth must lie in [0, n_iters]")
        if not (1 <= self.top_k <= self.n_experts):
            raise ValueError("top_k must lie in [1, n_experts]")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def routing_mode(self) -> str:
        if self.softmax_routing:
            return "softmax"
        if self.no_graph_reg:
            return "sinkhorn"
        return "graph_sinkhorn"


class ModelParams:
    """Flat, ordered name -> float64 tensor map. Names match the checkpoint scheme."""

    def __init__(self, tensors: dict[str, torch.Tensor]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def clone(self) -> "ModelParams":
        return ModelParams({k: v.detach().clone() for k, v in self.tensors.items()})

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for v in self.tensors.values():
            v.requires_grad_(flag)
        return self

    def validate_shapes(self, config: RoamConfig) -> None:
        expected = _param_shapes(config)
        got = {k: tuple(v.shape) for k, v in self.tensors.items()}
        if got != expected:
            missing = set(expected) - set(got)
            extra = set(got) - set(expected)
            wrong = {k: (got[k], expected[k]) for k in got.keys() & expected.keys() if got[k] != expected[k]}
            raise CheckpointError(
                f"parameter shapes do not match the config; missing={sorted(missing)} "
                f"extra={sorted(extra)} wrong={wrong}"
            )


def _param_shapes(config: RoamConfig) -> dict[str, tuple[int, ...]]:
    d, d_in, d_attn, e, c = config.d, config.d_in, config.d_attn, config.n_experts, config.n_classes
    shapes: dict[str, tuple[int, ...]] = {
        "phi.weight": (d, d_in),
        "phi.bias": (d,),
    }
    for layer in range(2):
        shapes[f"gnn.{layer}.self"] = (d, d)
        shapes[f"gnn.{layer}.neigh"] = (d, d)
        shapes[f"gnn.{layer}.bias"] = (d,)
    shapes["proto"] = (e, d)
    for i in range(e):
        shapes[f"expert.{i}.V"] = (d_attn, d)
        shapes[f"expert.{i}.U"] = (d_attn, d)
        shapes[f"expert.{i}.w"] = (d_attn,)
    shapes["gate.0.weight"] = (d_attn, d)
    shapes["gate.0.bias"] = (d_attn,)
    shapes["gate.1.weight"] = (1, d_attn)
    shapes["gate.1.bias"] = (1,)
    shapes["head.0.weight"] = (HEAD_HIDDEN, d)
    shapes["head.0.bias"] = (HEAD_HIDDEN,)
    shapes["head.1.weight"] = (c, HEAD_HIDDEN)
    shapes["head.1.bias"] = (c,)
    return shapes


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(config: RoamConfig, seed: int) -> ModelParams:
    """Uniform(-a, a) linear weights with a = sqrt(6/(fan_in+fan_out)), zero
    biases, unit-normalized Gaussian prototype rows; deterministic in seed."""
    config.validate()
    gen = torch.Generator().manual_seed(seed)

    def uniform(shape: tuple[int, ...], fan_in: int, fan_out: int) -> torch.Tensor:
        a = glorot_bound(fan_in, fan_out)
        return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1) * a

    tensors: dict[str, torch.Tensor] = {}
    for name, shape in _param_shapes(config).items():
        if name == "proto":
            rows = torch.randn(shape, generator=gen, dtype=torch.float64)
            tensors[name] = rows / rows.norm(dim=1, keepdim=True)
        elif name.endswith(("bias",)):
            tensors[name] = torch.zeros(shape, dtype=torch.float64)
        elif len(shape) == 1:  # gated-attention score vector w_e
            tensors[name] = uniform(shape, shape[0], 1)
        else:
            tensors[name] = uniform(shape, shape[1], shape[0])
    return ModelParams(tensors)


# ---------------------------------------------------------------------------
# Forward components


def project_patches(
    bag: PatchBag, params: ModelParams, training: bool, seed: int, dropout: float = 0.0
) -> torch.Tensor:
    """h_i = dropout(relu(W x_i + b)); inverted dropout, active only in training."""
    if bag.d_in != params["phi.weight"].shape[1]:
        raise ValueError(
            f"bag d_in={bag.d_in} does not match phi input {params['phi.weight'].shape[1]}"
        )
    x = torch.from_numpy(np.asarray(bag.embeddings, dtype=np.float64))
    h = torch.relu(x @ params["phi.weight"].T + params["phi.bias"])
    if training and dropout > 0:
        gen = torch.Generator().manual_seed(seed)
        keep = (torch.rand(h.shape, generator=gen, dtype=torch.float64) >= dropout).to(h.dtype)
        h = h * keep / (1.0 - dropout)
    return h


def gnn_forward(h0: torch.Tensor, graph: RegionGraph, params: ModelParams, config: RoamConfig) -> torch.Tensor:
    """Two mean-aggregation layers producing routing embeddings; identity under
    the no_routing_gnn ablation."""
    if config.no_routing_gnn:
        return h0
    if graph.n_nodes != h0.shape[0]:
        raise ValueError("graph node count does not match features")
    z = h0
    for layer in range(2):
        if graph.k > 0:
            nbr_mean = z[torch.from_numpy(graph.neighbors)].mean(dim=1)
        else:
            nbr_mean = torch.zeros_like(z)
        z = torch.relu(
            z @ params[f"gnn.{layer}.self"].T
            + nbr_mean @ params[f"gnn.{layer}.neigh"].T
            + params[f"gnn.{layer}.bias"]
        )
    return z


def expert_pool(
    h0: torch.Tensor, dispatch: DispatchMatrix, params: ModelParams, config: RoamConfig
) -> tuple[torch.Tensor, list[np.ndarray]]:
    """Per-expert gated-attention pooling over dispatch supports.

    Default attention is modulated by routed mass (softmax over s + log gamma);
    no_ot_modulation falls back to softmax over scores alone; detach_routing
    feeds gamma in as a constant. Empty supports yield zero embeddings.
    """
    gamma = dispatch.gamma.detach() if config.detach_routing else dispatch.gamma
    support_mask = dispatch.numpy() > 0
    outputs = []
    betas: list[np.ndarray] = []
    for e in range(config.n_experts):
        idx = np.nonzero(support_mask[:, e])[0]
        if idx.size == 0:
            outputs.append(torch.zeros(config.d, dtype=h0.dtype))
            betas.append(np.zeros(0))
            continue
        idx_t = torch.from_numpy(idx)
        h = h0[idx_t]
        v, u, w = params[f"expert.{e}.V"], params[f"expert.{e}.U"], params[f"expert.{e}.w"]
        s = (torch.tanh(h @ v.T) * torch.sigmoid(h @ u.T)) @ w
        if config.no_ot_modulation:
            beta = torch.softmax(s, dim=0)
        else:
            beta = torch.softmax(s + torch.log(gamma[idx_t, e]), dim=0)
        outputs.append(beta @ h)
        betas.append(beta.detach().numpy())
    return torch.stack(outputs), betas


def fuse_and_classify(o: torch.Tensor, params: ModelParams) -> tuple[torch.Tensor, torch.Tensor]:
    """Gated fusion g = softmax(psi(o_e)) and the classifier head."""
    scores = torch.tanh(o @ params["gate.0.weight"].T + params["gate.0.bias"])
    scores = (scores @ params["gate.1.weight"].T + params["gate.1.bias"]).squeeze(1)
    gates = torch.softmax(scores, dim=0)
    o_slide = gates @ o
    hidden = torch.relu(o_slide @ params["head.0.weight"].T + params["head.0.bias"])
    logits = hidden @ params["head.1.weight"].T + params["head.1.bias"]
    return logits, gates


@dataclass
class ForwardDiagnostics:
    expert_load: np.ndarray  # (E,) post-dispatch mass per expert, sums to 1
    dominant_expert: np.ndarray  # (M,) argmax of each dispatch row
    attention: list[np.ndarray]  # per-expert beta over its support
    gates: np.ndarray  # (E,) fusion gates, sum to 1
    row_residuals: list[float]  # routing solver residual trajectory
    routing_mode: str
    regions: RegionSet = field(repr=False, default=None)
    graph: RegionGraph = field(repr=False, default=None)
    dispatch: np.ndarray = field(repr=False, default=None)
    plan: np.ndarray = field(repr=False, default=None)

    def validate(self) -> None:
        if np.any(self.expert_load < 0) or abs(self.expert_load.sum() - 1.0) > 1e-9:
            raise ValueError("expert loads must be nonnegative and sum to 1")
        if abs(self.gates.sum() - 1.0) > 1e-12:
            raise ValueError("fusion gates must sum to 1")


def roam_forward(
    bag: PatchBag,
    params: ModelParams,
    config: RoamConfig,
    training: bool = False,
    seed: int = 0,
    dispatch_override: torch.Tensor | None = None,
) -> tuple[torch.Tensor, ForwardDiagnostics]:
    """Full pipeline: project -> tokenize -> graph -> GNN -> cost -> routing ->
    top-k dispatch -> expert pooling -> fusion/head.

    dispatch_override replaces the routing stage with a fixed dispatch matrix
    (used by the finite-difference harness to realize stop-gradient semantics).
    """
    config.validate()
    h = project_patches(bag, params, training, seed, dropout=config.dropout)
    regions = tokenize_regions(h, bag.coords.astype(np.float64), config.target_m)
    graph = heat_kernel_weights(build_region_graph(regions.centroids, config.k_nn), regions.centroids)
    marginals = Marginals.from_masses(regions.masses, config.n_experts)

    if dispatch_override is not None:
        dispatch = DispatchMatrix(gamma=dispatch_override, k=config.top_k)
        plan = None
    else:
        z = gnn_forward(regions.features, graph, params, config)
        cost = cost_matrix(z, params["proto"])
        if config.softmax_routing:
            plan = softmax_routing_plan(cost, marginals, config.eps)
        elif config.no_graph_reg:
            plan = sinkhorn(cost, marginals, config.eps, config.n_iters)
        else:
            plan = graph_sinkhorn(
                cost, marginals, config.eps, config.n_iters, graph, config.lambda_s, config.n_smooth
            )
        dispatch = topk_dispatch(plan, marginals.r, config.top_k)

    o, betas = expert_pool(regions.features, dispatch, params, config)
    logits, gates = fuse_and_classify(o, params)

    gamma_np = dispatch.numpy()
    diag = ForwardDiagnostics(
        expert_load=gamma_np.sum(axis=0),
        dominant_expert=np.argmax(gamma_np, axis=1),
        attention=betas,
        gates=gates.detach().numpy(),
        row_residuals=plan.row_residuals if plan is not None else [],
        routing_mode=config.routing_mode,
        regions=regions,
        graph=graph,
        dispatch=gamma_np,
        plan=plan.numpy() if plan is not None else None,
    )
    return logits, diag


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(params: ModelParams, path) -> None:
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(params.tensors)))
        for name, tensor in params.items():
            encoded = name.encode("utf-8")
            arr = tensor.detach().numpy().astype("<f4")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 16 or data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    offset = 16
    tensors: dict[str, torch.Tensor] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", data, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=offset).reshape(dims)
            offset += 4 * size
            tensors[name] = torch.from_numpy(arr.astype(np.float64))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing bytes after the last tensor")
    return ModelParams(tensors)
