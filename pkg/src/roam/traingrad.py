"""Training: loss/gradients through the unrolled pipeline, AdamW with warmup +
cosine schedule, the epoch loop, metrics, and the finite-difference oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from roam.bagio import DatasetManifest, PatchBag, subsample_bag
from roam.nnmodel import ModelParams, RoamConfig, init_params, roam_forward
from roam.tokenizer import RegionGraph


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-4
    warmup_epochs: int = 5
    max_epochs: int = 200
    patience: int = 20
    clip_norm: float = 1.0
    batch_size: int = 1
    subsample_max: int = 4096
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.lr <= 0 or self.clip_norm <= 0 or self.adam_eps <= 0:
            raise ValueError("lr, clip_norm, and adam_eps must be positive")
        if self.weight_decay < 0 or self.patience < 0:
            raise ValueError("weight_decay and patience must be nonnegative")
        if self.max_epochs < 1 or self.subsample_max < 1 or self.batch_size != 1:
            raise ValueError("max_epochs/subsample_max must be >= 1 and batch_size must be 1")
        if not (0 <= self.warmup_epochs <= self.max_epochs):
            raise ValueError("warmup_epochs must lie in [0, max_epochs]")


def cross_entropy(logits: torch.Tensor, label: int) -> torch.Tensor:
    return torch.logsumexp(logits, dim=0) - logits[label]


def backward(logits: torch.Tensor, label: int, params: ModelParams) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Cross-entropy loss and its gradient w.r.t. every parameter tensor.

    Parameters with no influence on the loss (dead paths) get zero gradients.
    """
    loss = cross_entropy(logits, label)
    if not bool(torch.isfinite(loss)):
        raise RuntimeError(f"non-finite loss {float(loss.detach())!r}; logits={logits.detach().numpy()!r}")
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    return loss.detach(), {
        n: (g.detach() if g is not None else torch.zeros_like(params[n])) for n, g in zip(names, grads)
    }


def global_grad_norm(grads: dict[str, torch.Tensor]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def clip_gradients(grads: dict[str, torch.Tensor], clip_norm: float) -> dict[str, torch.Tensor]:
    norm = global_grad_norm(grads)
    if norm > clip_norm:
        scale = clip_norm / norm
        return {n: g * scale for n, g in grads.items()}
    return grads


def lr_at(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to base_lr, then cosine decay to 0 at the final step."""
    if warmup_steps > 0 and step <= warmup_steps:
        return base_lr * step / warmup_steps
    remaining = total_steps - warmup_steps
    if remaining <= 0:
        return base_lr
    progress = (step - warmup_steps) / remaining
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


class AdamState:
    def __init__(self, params: ModelParams):
        self.m = {n: torch.zeros_like(t) for n, t in params.items()}
        self.v = {n: torch.zeros_like(t) for n, t in params.items()}


def adamw_step(
    params: ModelParams,
    grads: dict[str, torch.Tensor],
    state: AdamState,
    step: int,
    lr: float,
    config: TrainConfig,
) -> None:
    """One decoupled-weight-decay Adam update (in place); clips first."""
    grads = clip_gradients(grads, config.clip_norm)
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    with torch.no_grad():
        for n, p in params.items():
            g = grads[n]
            state.m[n].mul_(b1).add_(g, alpha=1.0 - b1)
            state.v[n].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = state.m[n] / bc1
            v_hat = state.v[n] / bc2
            decay = p * (lr * config.weight_decay)
            p.add_(m_hat / (v_hat.sqrt() + config.adam_eps), alpha=-lr)
            p.sub_(decay)


# ---------------------------------------------------------------------------
# Metrics


def auc(scores, labels) -> float:
    """Rank-based (Mann-Whitney) AUC with half credit for tied scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs both classes present")
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (pos.size * neg.size))


def qwk(pred, true, n_classes: int) -> float:
    """Quadratic-weighted Cohen's kappa from the confusion matrix."""
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape or pred.size == 0:
        raise ValueError("pred and true must be equal-length and non-empty")
    if pred.min() < 0 or true.min() < 0 or pred.max() >= n_classes or true.max() >= n_classes:
        raise ValueError("labels out of range")
    if np.unique(pred).size == 1 and np.unique(true).size == 1:
        if pred[0] == true[0]:
            return 1.0
        raise ValueError("degenerate inputs: single distinct label and no agreement")
    observed = np.zeros((n_classes, n_classes), dtype=np.float64)
    np.add.at(observed, (true, pred), 1.0)
    observed /= observed.sum()
    weights = np.fromfunction(
        lambda i, j: ((i - j) ** 2) / (n_classes - 1) ** 2, (n_classes, n_classes)
    )
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    return float(1.0 - (weights * observed).sum() / (weights * expected).sum())


def neighbor_disagreement(gamma: np.ndarray, graph: RegionGraph) -> float:
    """Fraction of undirected graph edges whose endpoints have different
    dominant experts; 0 for graphs with no edges."""
    if graph.n_nodes != gamma.shape[0]:
        raise ValueError("graph node count does not match the dispatch matrix")
    edges = graph.undirected_edges()
    if not edges:
        return 0.0
    dominant = np.argmax(gamma, axis=1)
    return sum(1 for a, b in edges if dominant[a] != dominant[b]) / len(edges)


@dataclass
class MetricsReport:
    loss: float
    accuracy: float
    auc: float | None
    qwk: float | None
    expert_load: list[float]
    neighbor_disagreement: float
    n_slides: int
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "loss": self.loss,
            "accuracy": self.accuracy,
            "auc": self.auc,
            "qwk": self.qwk,
            "expert_load": self.expert_load,
            "neighbor_disagreement": self.neighbor_disagreement,
            "n_slides": self.n_slides,
            "notes": self.notes,
        }


def evaluate_bags(
    bags: list[PatchBag], params: ModelParams, config: RoamConfig
) -> MetricsReport:
    """Deterministic eval-mode metrics over full bags."""
    losses, preds, labels, pos_scores = [], [], [], []
    loads = np.zeros(config.n_experts)
    disagreements = []
    for bag in bags:
        logits, diag = roam_forward(bag, params, config, training=False)
        losses.append(float(cross_entropy(logits, bag.label)))
        probs = torch.softmax(logits, dim=0).numpy()
        preds.append(int(np.argmax(probs)))
        labels.append(bag.label)
        pos_scores.append(float(probs[-1]))
        loads += diag.expert_load
        disagreements.append(neighbor_disagreement(diag.dispatch, diag.graph))
    labels_arr = np.asarray(labels)
    notes = []
    auc_val = qwk_val = None
    if config.n_classes == 2:
        try:
            auc_val = auc(pos_scores, labels_arr)
        except ValueError as exc:
            notes.append(f"auc unavailable: {exc}")
    else:
        try:
            qwk_val = qwk(preds, labels_arr, config.n_classes)
        except ValueError as exc:
            notes.append(f"qwk unavailable: {exc}")
    return MetricsReport(
        loss=float(np.mean(losses)),
        accuracy=float(np.mean(np.asarray(preds) == labels_arr)),
        auc=auc_val,
        qwk=qwk_val,
        expert_load=list(loads / len(bags)),
        neighbor_disagreement=float(np.mean(disagreements)),
        n_slides=len(bags),
        notes=notes,
    )


# ---------------------------------------------------------------------------
# Training loop


def _slide_seed(base_seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, epoch, index]).generate_state(1)[0])


def train(
    manifest: DatasetManifest,
    roam_config: RoamConfig,
    train_config: TrainConfig,
    progress=None,
) -> tuple[ModelParams, list[dict]]:
    """Per-slide updates with training-time subsampling, full-bag validation,
    best-by-val-loss checkpointing, and patience-based early stopping."""
    roam_config.validate()
    train_config.validate()
    torch.set_num_threads(1)  # determinism reference per the concurrency contract

    train_entries = manifest.split("train")
    val_entries = manifest.split("val")
    if not train_entries or not val_entries:
        raise ValueError("manifest needs non-empty train and val splits")
    train_bags = [manifest.load(e) for e in train_entries]
    val_bags = [manifest.load(e) for e in val_entries]

    params = init_params(roam_config, train_config.seed)
    state = AdamState(params)
    rng = np.random.default_rng(train_config.seed)

    steps_per_epoch = len(train_bags)
    total_steps = train_config.max_epochs * steps_per_epoch
    warmup_steps = train_config.warmup_epochs * steps_per_epoch

    history: list[dict] = []
    best_loss = math.inf
    best_params = params.clone()
    no_improve = 0
    step = 0

    for epoch in range(train_config.max_epochs):
        order = rng.permutation(len(train_bags))
        epoch_losses = []
        lr = train_config.lr
        for i, bag_idx in enumerate(order):
            seed = _slide_seed(train_config.seed, epoch, i)
            bag = subsample_bag(train_bags[bag_idx], train_config.subsample_max, seed)
            params.requires_grad_(True)
            logits, _ = roam_forward(bag, params, roam_config, training=True, seed=seed)
            loss, grads = backward(logits, bag.label, params)
            params.requires_grad_(False)
            step += 1
            lr = lr_at(step, train_config.lr, warmup_steps, total_steps)
            adamw_step(params, grads, state, step, lr, train_config)
            epoch_losses.append(float(loss))

        report = evaluate_bags(val_bags, params, roam_config)
        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(epoch_losses)),
            "val_loss": report.loss,
            "val_accuracy": report.accuracy,
            "val_auc": report.auc,
            "val_qwk": report.qwk,
            "routing_mode": roam_config.routing_mode,
        }
        history.append(record)
        if progress is not None:
            progress(record)

        if report.loss < best_loss:
            best_loss = report.loss
            best_params = params.clone()
            no_improve = 0
        else:
            no_improve += 1
            if no_improve > train_config.patience:
                break

    return best_params, history


# ---------------------------------------------------------------------------
# Finite-difference gradient oracle


def make_tiny_instance(seed: int = 0) -> tuple[PatchBag, RoamConfig]:
    """Small bag/config pair sized for exhaustive central-difference checking."""
    rng = np.random.default_rng(seed)
    bag = PatchBag(
        slide_id="fd-tiny",
        embeddings=rng.normal(size=(40, 8)).astype(np.float32),
        coords=rng.uniform(size=(40, 2)).astype(np.float32),
        label=1,
    )
    config = RoamConfig(
        d_in=8,
        d=16,
        target_m=9,
        k_nn=3,
        n_experts=3,
        top_k=2,
        eps=0.1,
        n_iters=8,
        lambda_s=0.3,
        n_smooth=2,
        d_attn=8,
        dropout=0.25,
        n_classes=2,
    )
    return bag, config


def finite_difference_check(
    config: RoamConfig,
    bag: PatchBag | None = None,
    seed: int = 0,
    fd_step: float = 1e-5,
    grad_floor: float = 1e-6,
) -> dict[str, float]:
    """Compare autograd against central finite differences on every coordinate.

    Returns the max relative error per parameter tensor, over coordinates whose
    analytic gradient magnitude exceeds grad_floor. Under detach_routing the
    dispatch matrix is frozen at its unperturbed value so the oracle matches
    the stop-gradient semantics.
    """
    if bag is None:
        bag, _ = make_tiny_instance(seed)
    params = init_params(config, seed)

    dispatch_override = None
    if config.detach_routing:
        _, diag = roam_forward(bag, params, config, training=True, seed=seed)
        dispatch_override = torch.from_numpy(diag.dispatch)

    params.requires_grad_(True)
    logits, _ = roam_forward(
        bag, params, config, training=True, seed=seed, dispatch_override=dispatch_override
    )
    _, grads = backward(logits, bag.label, params)
    params.requires_grad_(False)

    def loss_value() -> float:
        with torch.no_grad():
            out, _ = roam_forward(
                bag, params, config, training=True, seed=seed, dispatch_override=dispatch_override
            )
            return float(cross_entropy(out, bag.label))

    max_err: dict[str, float] = {}
    for name, tensor in params.items():
        flat = tensor.view(-1)
        g = grads[name].view(-1)
        worst = 0.0
        for j in range(flat.shape[0]):
            orig = float(flat[j])
            flat[j] = orig + fd_step
            up = loss_value()
            flat[j] = orig - fd_step
            down = loss_value()
            flat[j] = orig
            fd = (up - down) / (2 * fd_step)
            if abs(float(g[j])) > grad_floor:
                rel = abs(fd - float(g[j])) / max(abs(fd), abs(float(g[j])))
                worst = max(worst, rel)
        max_err[name] = worst
    return max_err
