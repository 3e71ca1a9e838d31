"""Promptable segmentation model with a frozen encoder and trainable decoder.

A compact stand-in for large promptable segmentors, preserving the training
contract: the image encoder and box-prompt encoder are frozen after seeded
construction, only the mask decoder is trained. The loss is the sum of Dice
and cross-entropy terms, computed separately over real and synthetic batch
members and added.
"""

from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .dataset import AnnotatedPair, BinaryMask, GrayImage, Provenance
from .errors import (
    BothBatchesEmpty,
    BoxOutOfBounds,
    EmptyDataset,
    EmptyMask,
    NonFiniteLoss,
    ShapeMismatch,
)

log = logging.getLogger(__name__)

DICE_EPS = 1e-6
PROB_CLAMP = 1e-7
BOX_JITTER_MAX = 20


@dataclass(frozen=True)
class BoxPrompt:
    x0: int
    y0: int
    x1: int
    y1: int

    def validate(self, height: int, width: int):
        if not (0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height):
            raise BoxOutOfBounds(f"{self} invalid for {height}x{width} image")

    def as_tensor(self, height: int, width: int) -> torch.Tensor:
        return torch.tensor([self.x0 / width, self.y0 / height,
                             self.x1 / width, self.y1 / height], dtype=torch.float32)


def tight_box(mask: BinaryMask) -> BoxPrompt:
    px = mask.pixels
    if px.sum() == 0:
        raise EmptyMask("cannot box an empty mask")
    rows = np.nonzero(px.any(axis=1))[0]
    cols = np.nonzero(px.any(axis=0))[0]
    return BoxPrompt(x0=int(cols[0]), y0=int(rows[0]),
                     x1=int(cols[-1]) + 1, y1=int(rows[-1]) + 1)


def perturb_box(mask: BinaryMask, q_max: int = BOX_JITTER_MAX, seed: int = 0) -> BoxPrompt:
    """Tight bounding box with each edge shifted in or out by a seeded integer
    in [0, q_max], clamped to bounds and repaired to stay non-degenerate."""
    box = tight_box(mask)
    rng = np.random.default_rng(seed)
    offsets = rng.integers(0, q_max + 1, size=4) * rng.choice([-1, 1], size=4)
    x0 = int(np.clip(box.x0 - offsets[0], 0, mask.width - 1))
    y0 = int(np.clip(box.y0 - offsets[1], 0, mask.height - 1))
    x1 = int(np.clip(box.x1 + offsets[2], 1, mask.width))
    y1 = int(np.clip(box.y1 + offsets[3], 1, mask.height))
    # inward shifts can cross on small masks; x0 <= W-1 so the repair stays valid
    # and within q_max of the tight edge
    if x0 >= x1:
        x1 = x0 + 1
    if y0 >= y1:
        y1 = y0 + 1
    out = BoxPrompt(x0=x0, y0=y0, x1=x1, y1=y1)
    out.validate(mask.height, mask.width)
    return out


# -- model -------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 5
    learning_rate: float = 1e-5
    weight_decay: float = 0.0
    seed: int = 0
    validate_every_epoch: bool = True
    augment_policy: object | None = None  # AugmentPolicy applied on the fly

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning rate and weight decay must be non-negative")


class ImageEncoder(nn.Module):
    """Small frozen convolutional pyramid, 1 channel in, C features at 1/8 scale."""

    def __init__(self, channels=48):
        super().__init__()
        c = channels
        self.net = nn.Sequential(
            nn.Conv2d(1, c // 4, 3, stride=2, padding=1), nn.GroupNorm(4, c // 4), nn.SiLU(),
            nn.Conv2d(c // 4, c // 2, 3, stride=2, padding=1), nn.GroupNorm(8, c // 2),
            nn.SiLU(),
            nn.Conv2d(c // 2, c, 3, stride=2, padding=1), nn.GroupNorm(8, c), nn.SiLU(),
            nn.Conv2d(c, c, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class PromptEncoder(nn.Module):
    """Frozen embedding of normalized box corner coordinates."""

    def __init__(self, dim=48):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(4, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, boxes):
        return self.net(boxes)


def render_box_plane(boxes: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Parameter-free rasterization of normalized boxes onto an h x w grid."""
    b = boxes.shape[0]
    plane = torch.zeros(b, 1, h, w)
    scale = torch.tensor([w, h, w, h], dtype=torch.float32)
    for i in range(b):
        x0, y0, x1, y1 = (boxes[i] * scale).round().long().tolist()
        plane[i, 0, max(y0, 0):max(y1, 1), max(x0, 0):max(x1, 1)] = 1.0
    return plane


class MaskDecoder(nn.Module):
    """Trainable decoder fusing image features, the rasterized box plane, and
    the prompt embedding."""

    def __init__(self, channels=48):
        super().__init__()
        c = channels
        self.fuse = nn.Conv2d(2 * c + 1, c, 3, padding=1)
        self.block1 = nn.Sequential(nn.GroupNorm(8, c), nn.SiLU(),
                                    nn.Conv2d(c, c, 3, padding=1))
        self.up = nn.ModuleList([
            nn.Conv2d(c, c // 2, 3, padding=1),
            nn.Conv2d(c // 2, c // 4, 3, padding=1),
            nn.Conv2d(c // 4, c // 4, 3, padding=1),
        ])
        self.head = nn.Conv2d(c // 4, 1, 1)

    def forward(self, feats, box_plane, prompt_emb):
        b, c, h, w = feats.shape
        prompt_map = prompt_emb[:, :, None, None].expand(b, c, h, w)
        x = self.fuse(torch.cat([feats, box_plane, prompt_map], dim=1))
        x = x + self.block1(x)
        for conv in self.up:
            x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
            x = nn.functional.silu(conv(x))
        return self.head(x)[:, 0]


class SegModel(nn.Module):
    """Frozen image/prompt encoders, trainable mask decoder."""

    def __init__(self, seed: int = 0, channels: int = 48):
        super().__init__()
        torch.manual_seed(seed)
        self.encoder = ImageEncoder(channels)
        self.prompt_encoder = PromptEncoder(channels)
        self.decoder = MaskDecoder(channels)
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        for p in self.prompt_encoder.parameters():
            p.requires_grad_(False)

    def forward(self, images: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
        """images: B x 1 x H x W in [0,1]; boxes: B x 4 normalized. Returns logits."""
        _, _, h, w = images.shape
        feats = self.encoder(images)
        box_plane = render_box_plane(boxes, feats.shape[2], feats.shape[3])
        prompt = self.prompt_encoder(boxes)
        return self.decoder(feats, box_plane, prompt)

    def checksums(self) -> dict[str, str]:
        return {
            "encoder": _module_sha(self.encoder),
            "prompt_encoder": _module_sha(self.prompt_encoder),
            "decoder": _module_sha(self.decoder),
        }


def _module_sha(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_model(path, model: SegModel, extra: dict | None = None):
    from pathlib import Path

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": model.state_dict(),
                "channels": model.decoder.fuse.out_channels,
                "checksums": model.checksums(),
                "extra": extra or {}}, path)


def load_model(path) -> SegModel:
    payload = torch.load(path, weights_only=False)
    model = SegModel(seed=0, channels=payload["channels"])
    model.load_state_dict(payload["state_dict"])
    if model.checksums() != payload["checksums"]:
        raise ValueError("checkpoint checksum mismatch after load")
    return model


def predict(model: SegModel, image: GrayImage, box: BoxPrompt,
            ) -> tuple[np.ndarray, BinaryMask]:
    """Logits and the 0.5-thresholded binary mask for one image."""
    box.validate(image.height, image.width)
    model.eval()
    with torch.no_grad():
        img = torch.from_numpy(image.normalized())[None, None]
        logits = model(img, box.as_tensor(image.height, image.width)[None])[0]
    probs = torch.sigmoid(logits)
    return logits.numpy(), BinaryMask(pixels=(probs > 0.5).numpy().astype(np.uint8))


# -- losses and metric ------------------------------------------------------------------


def dice_loss(pred_probs: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if pred_probs.shape != gt.shape:
        raise ShapeMismatch(f"{tuple(pred_probs.shape)} vs {tuple(gt.shape)}")
    p = pred_probs.reshape(pred_probs.shape[0], -1) if pred_probs.ndim > 1 else pred_probs
    g = gt.reshape(gt.shape[0], -1) if gt.ndim > 1 else gt
    inter = (p * g).sum()
    return 1.0 - (2.0 * inter + DICE_EPS) / (p.sum() + g.sum() + DICE_EPS)


def ce_loss(pred_probs: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if pred_probs.shape != gt.shape:
        raise ShapeMismatch(f"{tuple(pred_probs.shape)} vs {tuple(gt.shape)}")
    p = pred_probs.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    g = gt.float()
    return -(g * torch.log(p) + (1.0 - g) * torch.log(1.0 - p)).mean()


def sam_loss(pred_real: torch.Tensor | None, gt_real: torch.Tensor | None,
             pred_synth: torch.Tensor | None, gt_synth: torch.Tensor | None):
    """Total = real arm + synthetic arm; an empty arm contributes zero."""

    def arm(pred, gt):
        if pred is None or pred.numel() == 0:
            return torch.tensor(0.0)
        return ce_loss(pred, gt) + dice_loss(pred, gt)

    real_empty = pred_real is None or pred_real.numel() == 0
    synth_empty = pred_synth is None or pred_synth.numel() == 0
    if real_empty and synth_empty:
        raise BothBatchesEmpty("need at least one non-empty batch")
    loss_real = arm(pred_real, gt_real)
    loss_synth = arm(pred_synth, gt_synth)
    return loss_real + loss_synth, loss_real, loss_synth


def dsc(pred: BinaryMask, gt: BinaryMask) -> float:
    """Dice overlap 2|P&G| / (|P|+|G|); defined as 1.0 when both are empty."""
    if pred.pixels.shape != gt.pixels.shape:
        raise ShapeMismatch(f"{pred.pixels.shape} vs {gt.pixels.shape}")
    p = pred.pixels.astype(bool)
    g = gt.pixels.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


# -- fine-tuning --------------------------------------------------------------------------


@dataclass
class FineTuneResult:
    best_state: dict
    best_epoch: int
    history: list[float]  # per-epoch validation mean DSC
    checksums_before: dict[str, str]
    checksums_after: dict[str, str]


def _batch_tensors(pairs: list[AnnotatedPair], box_seeds: list[int]):
    imgs = torch.stack([torch.from_numpy(p.image.normalized())[None] for p in pairs])
    gts = torch.stack([torch.from_numpy(p.mask.pixels.astype(np.float32)) for p in pairs])
    boxes = torch.stack([
        perturb_box(p.mask, seed=s).as_tensor(p.mask.height, p.mask.width)
        for p, s in zip(pairs, box_seeds)
    ])
    return imgs, gts, boxes


def stable_box_seed(pair_id: str) -> int:
    import zlib

    return zlib.crc32(pair_id.encode()) & 0x7FFFFFFF


def evaluate(model: SegModel, pairs: list[AnnotatedPair], batch_size: int = 16) -> float:
    """Mean DSC with a fixed per-sample jittered box prompt."""
    model.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            imgs, _, boxes = _batch_tensors(chunk,
                                            [stable_box_seed(p.id) for p in chunk])
            preds = (torch.sigmoid(model(imgs, boxes)) > 0.5).numpy().astype(np.uint8)
            for p, pred in zip(chunk, preds):
                scores.append(dsc(BinaryMask(pixels=pred), p.mask))
    return float(np.mean(scores))


def fine_tune(model: SegModel, hybrid_train: list[AnnotatedPair],
              val_set: list[AnnotatedPair], cfg: TrainConfig) -> FineTuneResult:
    """Decoder-only training with the combined real+synthetic loss.

    Every batch is split by provenance so the two loss arms stay separate.
    The returned state is the epoch with the best validation mean DSC.
    """
    from . import augment as ag

    if not hybrid_train or not val_set:
        raise EmptyDataset("train and val sets must be non-empty")
    checksums_before = model.checksums()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.decoder.parameters(), lr=cfg.learning_rate,
                           weight_decay=cfg.weight_decay)
    history: list[float] = []
    best_epoch = -1
    best_dsc = -1.0
    best_state = copy.deepcopy(model.decoder.state_dict())
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(hybrid_train))
        for start in range(0, len(hybrid_train), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [hybrid_train[i] for i in idx]
            if cfg.augment_policy is not None:
                batch = [ag.apply_policy(p, cfg.augment_policy,
                                         seed=cfg.seed * 1_000_003 + step)
                         for p in batch]
            box_seeds = [int(rng.integers(0, 2**31 - 1)) for _ in batch]
            imgs, gts, boxes = _batch_tensors(batch, box_seeds)
            logits = model(imgs, boxes)
            probs = torch.sigmoid(logits)
            is_synth = torch.tensor([p.provenance != Provenance.real for p in batch])
            total, _, _ = sam_loss(
                probs[~is_synth] if (~is_synth).any() else None,
                gts[~is_synth] if (~is_synth).any() else None,
                probs[is_synth] if is_synth.any() else None,
                gts[is_synth] if is_synth.any() else None,
            )
            if not torch.isfinite(total):
                raise NonFiniteLoss(f"loss non-finite at epoch {epoch} step {step}")
            opt.zero_grad()
            total.backward()
            opt.step()
            step += 1
        if cfg.validate_every_epoch:
            val_dsc = evaluate(model, val_set)
            history.append(val_dsc)
            log.info("epoch %d val DSC %.4f", epoch, val_dsc)
            if val_dsc > best_dsc:
                best_dsc = val_dsc
                best_epoch = epoch
                best_state = copy.deepcopy(model.decoder.state_dict())
    model.decoder.load_state_dict(best_state)
    return FineTuneResult(best_state=best_state, best_epoch=best_epoch, history=history,
                          checksums_before=checksums_before,
                          checksums_after=model.checksums())
