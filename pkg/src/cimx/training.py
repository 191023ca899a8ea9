"""Per-phase training: task-level steps on the classifier branch plus a
one-step unrolled update of the mask branch each epoch.

Per epoch the loop (1) sweeps SGD over exemplars and new data, (2) softly
compresses a held-aside new-data batch with the mask branch, (3) takes a
temporary backbone step on that compressed batch with the graph retained,
and (4) updates the mask-branch activations from the validation loss of
the temporary backbone on the original data, an L2 penalty on mask
coverage, and an anti-collapse classification term. Mask updates never
touch the shared weights, and the temporary step never touches the mask.

After the epochs the new data is hard-compressed (threshold + bbox), herded,
and packed into the memory budget.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch
from torch.nn import functional as F

from . import kernels
from .cam import BBox, bbox_for_image
from .compression import (
    Image,
    compress,
    compress_pixels_u8,
    downsampled_shape,
    from_uint8,
    reconstruct,
    to_uint8,
)
from .errors import CollapseWarning, NonFiniteLoss
from .memory import (
    ExemplarStore,
    MemoryLedger,
    MemoryRegime,
    herding_order,
    pack_exemplars,
    rebalance_fixed,
)
from .model import Branch, ModelState

DEGENERATE_EPS = 1e-12
AUGMENT_TICKS = 5  # schedule segments per phase; proportion grows 0.1 per segment

# rng stream tags (children of the run seed)
_STREAM_ORDER = 1
_STREAM_AUGMENT = 2
_STREAM_BILEVEL = 3
_STREAM_EXPAND = 4

METHODS = ("baseline", "full", "center", "cam", "bop")


@dataclass
class TrainConfig:
    """Training hyperparameters; learning rates cosine-anneal within a phase."""

    task_lr: float = 0.1
    inner_lr: float = 0.1
    outer_lr: float = 0.01
    mask_reg_weight: float = 0.1
    anticollapse_weight: float = 0.2
    phi_grad_clip: float = 1.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs_phase1: int = 60
    epochs_later: int = 40
    batch_size: int = 32
    bilevel_batch_size: int = 16
    mask_threshold: float = 0.6
    downsample_ratio: float = 4.0
    distill_weight: float = 1.0
    distill_temperature: float = 2.0
    method: str = "bop"
    artifact_augment: bool = True
    last_block_only: bool = False
    collapse_tol: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        for name in ("task_lr", "inner_lr", "outer_lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.phi_grad_clip <= 0:
            raise ValueError("phi_grad_clip must be > 0")

    @property
    def compresses(self) -> bool:
        return self.method != "baseline"


@dataclass
class EpochRecord:
    phase: int
    epoch: int
    task_loss: float
    val_loss: float | None
    mask_mean: float | None
    phi_grad_norm: float | None
    augment_p: float

    def format_line(self) -> str:
        def fmt(v):
            return "-" if v is None else f"{v:.6f}"

        return (
            f"phase={self.phase} epoch={self.epoch} loss={self.task_loss:.6f} "
            f"val_loss={fmt(self.val_loss)} mask_mean={fmt(self.mask_mean)} "
            f"phi_grad_norm={fmt(self.phi_grad_norm)} aug_p={self.augment_p:.1f}"
        )


@dataclass
class PhaseResult:
    phase: int
    seen_classes: int
    accuracy: float
    exemplars_total: int
    exemplars_added: int
    mean_cost: float
    events: list[str] = field(default_factory=list)
    epoch_records: list[EpochRecord] = field(default_factory=list)
    collapse_warnings: int = 0


def stream_rng(seed: int, *parts: int) -> np.random.Generator:
    """Independent deterministic substream; keyed so optional pipeline stages
    (augmentation, mask updates) never perturb each other's draws."""
    return np.random.default_rng([seed, *parts])


def cosine_lr(base: float, epoch: int, total_epochs: int) -> float:
    if total_epochs <= 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


@lru_cache(maxsize=256)
def _index_tensor(src_len: int, dst_len: int) -> torch.Tensor:
    return torch.from_numpy(kernels.nn_indices(src_len, dst_len))


def nn_resize_torch(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Differentiable nearest resize over the last two dims, same index
    mapping as the pixel kernels."""
    x = x.index_select(-2, _index_tensor(x.shape[-2], out_h).to(x.device))
    return x.index_select(-1, _index_tensor(x.shape[-1], out_w).to(x.device))


def batch_tensor(images: list[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([img.transpose(2, 0, 1) for img in images])
    return torch.from_numpy(arr).to(dtype)


def _check_finite(loss: torch.Tensor, where: str):
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite loss in {where}: {loss.item()}")


def cil_loss(
    state: ModelState,
    images: torch.Tensor,
    labels: torch.Tensor,
    config: TrainConfig,
    prev_model: ModelState | None = None,
) -> torch.Tensor:
    """Cross-entropy plus optional logit distillation against the
    previous-phase snapshot (old classes only)."""
    _, logits = state.net(images, Branch.RELU)
    loss = F.cross_entropy(logits, labels)
    if prev_model is not None and config.distill_weight > 0:
        t = config.distill_temperature
        with torch.no_grad():
            _, old_logits = prev_model.net(images, Branch.RELU)
        old = old_logits.shape[1]
        kd = F.kl_div(
            F.log_softmax(logits[:, :old] / t, dim=1),
            F.softmax(old_logits / t, dim=1),
            reduction="batchmean",
        ) * (t * t)
        loss = loss + config.distill_weight * kd
    return loss


def cil_step(
    state: ModelState,
    images: torch.Tensor,
    labels: torch.Tensor,
    optimizer: torch.optim.Optimizer,
    config: TrainConfig,
    prev_model: ModelState | None = None,
) -> float:
    """One SGD step on the task loss over backbone + classifier only."""
    optimizer.zero_grad()
    loss = cil_loss(state, images, labels, config, prev_model)
    _check_finite(loss, "cil_step")
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def task_optimizer(state: ModelState, config: TrainConfig) -> torch.optim.Optimizer:
    params = state.theta_parameters() + state.omega_parameters()
    return torch.optim.SGD(
        params, lr=config.task_lr, momentum=config.momentum, weight_decay=config.weight_decay
    )


def soft_compose(images: torch.Tensor, masks: torch.Tensor, ratio: float) -> torch.Tensor:
    """Blend originals with their fully-downsampled version by a soft mask:
    mask * x + (1 - mask) * upsampled(downsampled(x))."""
    height, width = images.shape[-2:]
    bh, bw = downsampled_shape(height, width, ratio)
    background = nn_resize_torch(nn_resize_torch(images, bh, bw), height, width)
    m = masks.unsqueeze(1)
    return m * images + (1.0 - m) * background


def differentiable_compress(
    images: torch.Tensor, labels: torch.Tensor, state: ModelState, ratio: float
):
    """Soft compression with the mask branch: no threshold, no bbox.

    Returns (compressed batch, masks at image resolution, degenerate flags).
    The masks are the per-image normalized activation maps, so gradients
    flow into the activation units; degenerate samples pass through
    uncompressed with an all-ones mask.
    """
    b, _, height, width = images.shape
    feats = state.net.spatial_features(images, Branch.CIM)
    class_w = state.net.classifier.weight[labels]
    raw = (feats * class_w[:, :, None, None]).sum(dim=1)
    lo = raw.amin(dim=(1, 2), keepdim=True)
    hi = raw.amax(dim=(1, 2), keepdim=True)
    degenerate = ((hi - lo) <= DEGENERATE_EPS).reshape(b)
    norm = (raw - lo) / torch.clamp(hi - lo, min=DEGENERATE_EPS)
    mask = nn_resize_torch(norm, height, width)
    compressed = soft_compose(images, mask, ratio)

    keep = degenerate.view(b, 1, 1, 1)
    compressed = torch.where(keep, images, compressed)
    mask = torch.where(degenerate.view(b, 1, 1), torch.ones_like(mask), mask)
    return compressed, mask, degenerate


def inner_update(
    state: ModelState,
    images: torch.Tensor,
    labels: torch.Tensor,
    inner_lr: float,
    create_graph: bool = True,
):
    """One-step temporary backbone update; classifier stays fixed.

    Returns a name->tensor mapping of the stepped backbone. With
    ``create_graph`` the result keeps its dependence on the mask branch via
    the compressed inputs, which the outer update differentiates through.
    """
    named = state.named_theta()
    names = list(named)
    params = [named[n] for n in names]
    _, logits = state.net(images, Branch.RELU)
    loss = F.cross_entropy(logits, labels)
    _check_finite(loss, "inner_update")
    grads = torch.autograd.grad(loss, params, create_graph=create_graph, allow_unused=True)
    theta_plus = {
        n: (p if g is None else p - inner_lr * g) for n, p, g in zip(names, params, grads)
    }
    return theta_plus, float(loss.detach())


def functional_forward(net, replaced: dict[str, torch.Tensor], images: torch.Tensor, branch: Branch):
    params = {n: p for n, p in net.named_parameters()}
    params.update(replaced)
    params.update({n: b for n, b in net.named_buffers()})
    return torch.func.functional_call(net, params, (images, branch))


@dataclass
class OuterStats:
    val_loss: float
    mask_reg: float
    anchor_loss: float
    phi_grad_norm: float
    mask_mean: float
    mask_pairwise_l1: float


def outer_update(
    state: ModelState,
    theta_plus: dict[str, torch.Tensor],
    val_images: torch.Tensor,
    val_labels: torch.Tensor,
    masks: torch.Tensor,
    anchor_images: torch.Tensor,
    anchor_labels: torch.Tensor,
    config: TrainConfig,
    outer_lr: float,
) -> OuterStats:
    """Update the mask-branch activations from the unrolled validation loss.

    Gradient flows only into the activation units: the shared weights and
    classifier are read, never written, and the applied gradient is norm-
    clipped. The anti-collapse term classifies through the mask branch at
    the current backbone to keep maps image-specific.
    """
    phi_params = state.phi_trainable_parameters()
    if not phi_params:
        raise ValueError("no trainable mask-branch parameters")

    _, val_logits = functional_forward(state.net, theta_plus, val_images, Branch.RELU)
    val_loss = F.cross_entropy(val_logits, val_labels)
    mask_reg = masks.pow(2).mean()
    _, anchor_logits = state.net(anchor_images, Branch.CIM)
    anchor_loss = F.cross_entropy(anchor_logits, anchor_labels)
    total = (
        val_loss
        + config.mask_reg_weight * mask_reg
        + config.anticollapse_weight * anchor_loss
    )
    _check_finite(total, "outer_update")

    grads = torch.autograd.grad(total, phi_params, allow_unused=True)
    with torch.no_grad():
        sq = 0.0
        for g in grads:
            if g is not None:
                sq += float(g.pow(2).sum())
        norm = math.sqrt(sq)
        scale = min(1.0, config.phi_grad_clip / norm) if norm > 0 else 1.0
        for p, g in zip(phi_params, grads):
            if g is not None:
                p.add_(g, alpha=-outer_lr * scale)

    with torch.no_grad():
        b = masks.shape[0]
        if b > 1:
            flat = masks.reshape(b, -1)
            pair = (flat.unsqueeze(0) - flat.unsqueeze(1)).abs().mean(dim=2)
            pairwise = float(pair.sum() / (b * (b - 1)))
        else:
            pairwise = float("inf")
    return OuterStats(
        val_loss=float(val_loss.detach()),
        mask_reg=float(mask_reg.detach()),
        anchor_loss=float(anchor_loss.detach()),
        phi_grad_norm=min(norm, config.phi_grad_clip),
        mask_mean=float(masks.detach().mean()),
        mask_pairwise_l1=pairwise,
    )


def bilevel_step(
    state: ModelState,
    new_images: torch.Tensor,
    new_labels: torch.Tensor,
    ex_images: torch.Tensor | None,
    ex_labels: torch.Tensor | None,
    config: TrainConfig,
    inner_lr: float,
    outer_lr: float,
    events: list[str] | None = None,
) -> OuterStats:
    """Soft-compress, temporary update, mask update: one full cycle."""
    compressed, masks, _ = differentiable_compress(
        new_images, new_labels, state, config.downsample_ratio
    )
    if events is not None:
        events.append("compress")
    if ex_images is not None and len(ex_images):
        inner_images = torch.cat([ex_images, compressed])
        inner_labels = torch.cat([ex_labels, new_labels])
        anchor_images = torch.cat([ex_images, new_images])
        anchor_labels = torch.cat([ex_labels, new_labels])
    else:
        inner_images, inner_labels = compressed, new_labels
        anchor_images, anchor_labels = new_images, new_labels
    theta_plus, _ = inner_update(state, inner_images, inner_labels, inner_lr)
    if events is not None:
        events.append("temp-update")
    stats = outer_update(
        state,
        theta_plus,
        new_images,
        new_labels,
        masks,
        anchor_images,
        anchor_labels,
        config,
        outer_lr,
    )
    if events is not None:
        events.append("phi-update")
    return stats


def augment_proportion(epoch: int, total_epochs: int, ticks: int = AUGMENT_TICKS) -> float:
    """Share of new data replaced by its pre-compressed version: zero at the
    start, +0.1 per schedule segment."""
    if total_epochs <= 0:
        return 0.0
    segment = (epoch * ticks) // total_epochs
    return min(0.1 * segment, 1.0)


class ArtifactAugmenter:
    """Schedules compressed-image substitution for the new-class data.

    Boxes come from the plain activation maps of the ReLU branch and are
    refreshed once per schedule segment; between refreshes the same boxes
    are reused.
    """

    def __init__(self, new_data: list[Image], config: TrainConfig, phase: int):
        self._data = new_data
        self._u8 = [to_uint8(img.pixels) for img in new_data]
        self._config = config
        self._phase = phase
        self._boxes: list[BBox] | None = None
        self._segment = -1

    def plan_epoch(self, epoch: int, total_epochs: int, state: ModelState) -> dict[int, np.ndarray]:
        """Map from sample index to substituted float pixels for this epoch."""
        cfg = self._config
        if not cfg.artifact_augment or not cfg.compresses or not self._data:
            return {}
        segment = (epoch * AUGMENT_TICKS) // max(1, total_epochs)
        if segment != self._segment:
            self._segment = segment
            self._boxes = [
                bbox_for_image(img, img.label, state, Branch.RELU, cfg.mask_threshold)
                for img in self._data
            ]
        p = augment_proportion(epoch, total_epochs)
        if p <= 0.0:
            return {}
        rng = stream_rng(cfg.seed, _STREAM_AUGMENT, self._phase, epoch)
        n_pick = int(round(p * len(self._data)))
        picks = rng.choice(len(self._data), size=n_pick, replace=False)
        out = {}
        for i in picks:
            u8 = compress_pixels_u8(self._u8[i], self._boxes[i], cfg.downsample_ratio)
            out[int(i)] = from_uint8(u8)
        return out


def hard_bbox_for_method(img: Image, state: ModelState, config: TrainConfig) -> BBox:
    """Bounding box used when the new data is compressed for storage."""
    h, w = img.height, img.width
    if config.method == "baseline":
        return BBox.full(h, w)
    if config.method == "full":
        return BBox(0, 0, 0, 0)  # nothing kept at full resolution beyond one pixel
    if config.method == "center":
        return BBox(h // 4, w // 4, h // 4 + h // 2 - 1, w // 4 + w // 2 - 1)
    branch = Branch.CIM if config.method == "bop" else Branch.RELU
    return bbox_for_image(img, img.label, state, branch, config.mask_threshold)


def evaluate(state: ModelState, data: list[Image], batch_size: int = 256) -> float:
    """Top-1 accuracy of the ReLU branch over the given samples."""
    if not data:
        return 0.0
    correct = 0
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            chunk = data[start : start + batch_size]
            x = batch_tensor([img.pixels for img in chunk])
            _, logits = state.net(x, Branch.RELU)
            pred = logits.argmax(dim=1).numpy()
            correct += int(np.sum(pred == np.array([img.label for img in chunk])))
    return correct / len(data)


def pooled_features(state: ModelState, data: list[Image], batch_size: int = 256) -> np.ndarray:
    """L2-normalized penultimate (pooled) features of the ReLU branch."""
    chunks = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            chunk = data[start : start + batch_size]
            x = batch_tensor([img.pixels for img in chunk])
            feats = state.net.pooled_features(x, Branch.RELU)
            chunks.append(feats.numpy())
    feats = np.concatenate(chunks, axis=0).astype(np.float64)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    return feats / np.clip(norms, 1e-12, None)


def select_class_exemplars(
    state: ModelState,
    class_images: list[Image],
    config: TrainConfig,
    share: float,
):
    """Hard-compress one class, order by herding, and pack into ``share``."""
    compressed = [
        compress(img, hard_bbox_for_method(img, state, config), config.downsample_ratio)
        for img in class_images
    ]
    rebuilt = [reconstruct(ex) for ex in compressed]
    feats = pooled_features(state, rebuilt)
    order = herding_order(feats)
    costs = np.array([ex.cost for ex in compressed])
    admitted = pack_exemplars(order, costs, share)
    return [compressed[i] for i in admitted]


def run_phase(
    phase: int,
    new_data: list[Image],
    store: ExemplarStore,
    ledger: MemoryLedger,
    state: ModelState,
    config: TrainConfig,
    test_data: list[Image],
    prev_model: ModelState | None = None,
    log_fn=None,
) -> tuple[ModelState, PhaseResult]:
    """Run one incremental phase and commit its exemplars.

    Inputs are not mutated on failure: the model is cloned up front and the
    store/ledger are only touched after training succeeds, so a raising
    phase leaves the caller's objects at the previous-phase state.
    """
    if not new_data:
        raise ValueError("phase needs new data")
    state = state.clone()
    events: list[str] = []
    records: list[EpochRecord] = []
    collapse_run = 0
    collapse_warnings = 0

    epochs = config.epochs_phase1 if phase == 1 else config.epochs_later
    optimizer = task_optimizer(state, config)
    augmenter = ArtifactAugmenter(new_data, config, phase)

    exemplar_images = [
        reconstruct(se.exemplar) for c in store.classes() for se in store.class_exemplars(c)
    ]
    pool = exemplar_images + new_data
    pool_pixels = [img.pixels for img in pool]
    pool_labels = np.array([img.label for img in pool], dtype=np.int64)
    new_offset = len(exemplar_images)

    use_bilevel = config.method == "bop"

    for epoch in range(epochs):
        lr = cosine_lr(config.task_lr, epoch, epochs)
        for group in optimizer.param_groups:
            group["lr"] = lr

        substitutions = augmenter.plan_epoch(epoch, epochs, state)
        order_rng = stream_rng(config.seed, _STREAM_ORDER, phase, epoch)
        perm = order_rng.permutation(len(pool))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start : start + config.batch_size]
            pixels = [
                substitutions.get(i - new_offset, pool_pixels[i])
                if i >= new_offset
                else pool_pixels[i]
                for i in idx
            ]
            x = batch_tensor(pixels)
            y = torch.from_numpy(pool_labels[idx])
            epoch_loss += cil_step(state, x, y, optimizer, config, prev_model)
            n_batches += 1
        events.append("train")

        stats = None
        if use_bilevel:
            bi_rng = stream_rng(config.seed, _STREAM_BILEVEL, phase, epoch)
            pick_new = bi_rng.choice(
                len(new_data), size=min(config.bilevel_batch_size, len(new_data)), replace=False
            )
            nx = batch_tensor([new_data[i].pixels for i in pick_new])
            ny = torch.from_numpy(np.array([new_data[i].label for i in pick_new], dtype=np.int64))
            if exemplar_images:
                pick_ex = bi_rng.choice(
                    len(exemplar_images),
                    size=min(config.bilevel_batch_size, len(exemplar_images)),
                    replace=False,
                )
                ex_x = batch_tensor([exemplar_images[i].pixels for i in pick_ex])
                ex_y = torch.from_numpy(
                    np.array([exemplar_images[i].label for i in pick_ex], dtype=np.int64)
                )
            else:
                ex_x = ex_y = None
            inner_lr = cosine_lr(config.inner_lr, epoch, epochs)
            outer_lr = cosine_lr(config.outer_lr, epoch, epochs)
            stats = bilevel_step(
                state, nx, ny, ex_x, ex_y, config, inner_lr, outer_lr, events=events
            )
            if stats.mask_pairwise_l1 < config.collapse_tol:
                collapse_run += 1
                if collapse_run >= 3:
                    collapse_warnings += 1
                    warnings.warn(
                        f"mask collapse: mean pairwise distance "
                        f"{stats.mask_pairwise_l1:.2e} for {collapse_run} epochs",
                        category=CollapseWarning,
                    )
            else:
                collapse_run = 0

        record = EpochRecord(
            phase=phase,
            epoch=epoch,
            task_loss=epoch_loss / max(1, n_batches),
            val_loss=stats.val_loss if stats else None,
            mask_mean=stats.mask_mean if stats else None,
            phi_grad_norm=stats.phi_grad_norm if stats else None,
            augment_p=augment_proportion(epoch, epochs),
        )
        records.append(record)
        if log_fn is not None:
            log_fn(record.format_line())

    events.append("compress-final")
    classes_after = len({img.label for img in new_data}) + len(store.classes())
    share = ledger.share(classes_after)
    new_classes = sorted({img.label for img in new_data})
    # select everything first so the store is only touched once selection
    # cannot fail anymore (keeps a failing phase side-effect free)
    selections = {
        class_id: select_class_exemplars(
            state, [img for img in new_data if img.label == class_id], config, share
        )
        for class_id in new_classes
    }
    added = 0
    for class_id, selected in selections.items():
        store.add_class(class_id, selected, phase=phase)
        added += len(selected)
    if ledger.regime is MemoryRegime.FIXED:
        rebalance_fixed(ledger, store, classes_after)
    else:
        ledger.rebuild_from_store(store)

    accuracy = evaluate(state, test_data)
    result = PhaseResult(
        phase=phase,
        seen_classes=classes_after,
        accuracy=accuracy,
        exemplars_total=store.count(),
        exemplars_added=added,
        mean_cost=store.mean_cost(),
        events=events,
        epoch_records=records,
        collapse_warnings=collapse_warnings,
    )
    return state, result
