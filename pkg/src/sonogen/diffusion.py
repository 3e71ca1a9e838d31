"""Compact class-conditional denoising diffusion over tri-channel images.

Pixel-space DDPM with a small U-Net denoiser (timestep + trimester-class
embeddings, bottleneck self-attention). Training runs either from scratch or
in adapter-only mode where the base network stays frozen and only low-rank
factors on the attention/feed-forward linears receive gradients. Sampling is
ancestral over a uniformly strided subset of the schedule.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import lora
from .dataset import AnnotatedPair, TriChannelImage, Trimester, compose_tri_channel
from .errors import BadTimestep, EmptyDataset, NonFiniteLoss, UntrainedModel

log = logging.getLogger(__name__)

DEFAULT_T = 400
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02

# attention projections + feed-forward linears: the adapter targets
LORA_TARGETS = ["mid_attn.q", "mid_attn.k", "mid_attn.v", "mid_attn.proj",
                "mid_attn.ff1", "mid_attn.ff2"]


# -- schedule -------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas_cum: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        if np.any(np.diff(betas) < -1e-15):
            raise ValueError("betas must be non-decreasing")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas_cum", np.asarray(self.alphas_cum, dtype=np.float64))
        if self.alphas_cum.shape != betas.shape:
            raise ValueError("alphas_cum must match betas in length")

    @property
    def T(self) -> int:
        return len(self.betas)

    @classmethod
    def linear(cls, T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
               beta_end: float = DEFAULT_BETA_END) -> "NoiseSchedule":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        return cls(betas=betas, alphas_cum=np.cumprod(1.0 - betas))

    def alpha_cum_at(self, t: int) -> float:
        """Cumulative signal fraction; t = 0 is the identity convention (1.0)."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise BadTimestep(f"t must lie in [0, {self.T}], got {t}")
        return float(self.alphas_cum[t - 1])


def forward_diffuse(x0: torch.Tensor, t: int, eps: torch.Tensor,
                    schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward noising of a [-1, 1] image at step t."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    ac = schedule.alpha_cum_at(t)
    return math.sqrt(ac) * x0 + math.sqrt(1.0 - ac) * eps


# -- denoiser network -------------------------------------------------------------


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 64
    base_channels: int = 32
    emb_dim: int = 128
    num_classes: int = 3

    def __post_init__(self):
        size = self.image_size
        if size < 64 or size & (size - 1) != 0:
            raise ValueError(f"image_size must be a power of two >= 64, got {size}")


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.cond = nn.Linear(emb_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = h + self.cond(emb)[:, :, None, None]
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention2d(nn.Module):
    """Single-head attention plus feed-forward over flattened spatial tokens."""

    def __init__(self, channels):
        super().__init__()
        self.norm = nn.GroupNorm(8, channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.proj = nn.Linear(channels, channels)
        self.ff_norm = nn.LayerNorm(channels)
        self.ff1 = nn.Linear(channels, channels * 2)
        self.ff2 = nn.Linear(channels * 2, channels)
        self.scale = channels ** -0.5

    def forward(self, x):
        b, c, h, w = x.shape
        tokens = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        q, k, v = self.q(tokens), self.k(tokens), self.v(tokens)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        tokens = tokens + self.proj(attn @ v)
        tokens = tokens + self.ff2(nn.functional.silu(self.ff1(self.ff_norm(tokens))))
        return x + tokens.transpose(1, 2).reshape(b, c, h, w)


class DenoiserNet(nn.Module):
    """Three-level U-Net predicting the noise content of a noisy tri-channel image."""

    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        cfg = config or DenoiserConfig()
        self.config = cfg
        c = cfg.base_channels
        emb = cfg.emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.class_emb = nn.Embedding(cfg.num_classes, emb)

        self.stem = nn.Conv2d(3, c, 3, padding=1)
        self.down1 = ResBlock(c, c, emb)
        self.pool1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.down2 = ResBlock(2 * c, 2 * c, emb)
        self.pool2 = nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1)
        self.mid1 = ResBlock(4 * c, 4 * c, emb)
        self.mid_attn = SelfAttention2d(4 * c)
        self.mid2 = ResBlock(4 * c, 4 * c, emb)
        self.up2 = nn.ConvTranspose2d(4 * c, 2 * c, 4, stride=2, padding=1)
        self.dec2 = ResBlock(4 * c, 2 * c, emb)
        self.up1 = nn.ConvTranspose2d(2 * c, c, 4, stride=2, padding=1)
        self.dec1 = ResBlock(2 * c, c, emb)
        self.head = nn.Sequential(nn.GroupNorm(8, c), nn.SiLU(),
                                  nn.Conv2d(c, 3, 3, padding=1))
        self.trained = False

    def forward(self, x: torch.Tensor, t: torch.Tensor, class_ids: torch.Tensor):
        emb = self.time_mlp(sinusoidal_embedding(t, self.config.emb_dim))
        emb = emb + self.class_emb(class_ids)
        h0 = self.stem(x)
        h1 = self.down1(h0, emb)
        h2 = self.down2(self.pool1(h1), emb)
        m = self.mid1(self.pool2(h2), emb)
        m = self.mid_attn(m)
        m = self.mid2(m, emb)
        u2 = self.dec2(torch.cat([self.up2(m), h2], dim=1), emb)
        u1 = self.dec1(torch.cat([self.up1(u2), h1], dim=1), emb)
        return self.head(u1)


def module_checksum(module: nn.Module, only_base: bool = False) -> str:
    """SHA-256 over parameter bytes in name order; adapter factors can be skipped."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        if only_base and ("lora_A" in name or "lora_B" in name):
            continue
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# -- training -----------------------------------------------------------------------


@dataclass
class DiffusionTrainConfig:
    mode: str = "from_scratch"  # or "lora_finetune"
    epochs: int = 1
    batch_size: int = 4
    learning_rate: float = 1e-4  # constant schedule
    lora_rank: int = 8
    lora_seed: int = 0
    seed: int = 0
    max_steps: int | None = None  # step cap overriding epochs when set
    ema_decay: float | None = None  # e.g. 0.999; None disables the shadow copy


def pairs_to_tris(pairs: list[AnnotatedPair]) -> list[tuple[TriChannelImage, Trimester]]:
    return [(compose_tri_channel(p.image, p.mask), p.trimester) for p in pairs]


def tri_to_tensor(tri: TriChannelImage) -> torch.Tensor:
    return torch.from_numpy(tri.planes.astype(np.float32) / 127.5 - 1.0)


def tensor_to_tri(x: torch.Tensor, mask_plane_index: int = 2) -> TriChannelImage:
    planes = ((x.clamp(-1, 1) + 1.0) * 127.5).round().clamp(0, 255)
    return TriChannelImage(planes=planes.cpu().numpy().astype(np.uint8),
                           mask_plane_index=mask_plane_index)


@dataclass
class TrainResult:
    model: DenoiserNet
    losses: list[float]
    base_checksum_before: str
    base_checksum_after: str
    config: DiffusionTrainConfig
    lora_wrapped: list[str] = field(default_factory=list)
    ema_model: DenoiserNet | None = None  # shadow weights when ema_decay is set


def train_denoiser(data: list[tuple[TriChannelImage, Trimester]],
                   config: DiffusionTrainConfig,
                   schedule: NoiseSchedule | None = None,
                   model: DenoiserNet | None = None) -> TrainResult:
    """Noise-prediction MSE training; deterministic for a fixed seed and
    thread count. In adapter mode only low-rank factors are trainable."""
    if not data:
        raise EmptyDataset("need at least one training pair")
    if config.mode not in ("from_scratch", "lora_finetune"):
        raise ValueError(f"unknown mode {config.mode!r}")
    schedule = schedule or NoiseSchedule.linear()
    torch.manual_seed(config.seed)
    size = data[0][0].height
    if model is None:
        model = DenoiserNet(DenoiserConfig(image_size=size))

    wrapped: list[str] = []
    if config.mode == "lora_finetune":
        wrapped = lora.attach_adapters(model, LORA_TARGETS, r=config.lora_rank,
                                       seed=config.lora_seed, alpha=lora.TRAIN_ALPHA)
    checksum_before = module_checksum(model, only_base=True)

    x_all = torch.stack([tri_to_tensor(tri) for tri, _ in data])
    y_all = torch.tensor([t.class_id for _, t in data], dtype=torch.long)

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    sqrt_ac = torch.from_numpy(np.sqrt(schedule.alphas_cum)).float()
    sqrt_1m = torch.from_numpy(np.sqrt(1.0 - schedule.alphas_cum)).float()
    ema = ({k: v.detach().clone() for k, v in model.state_dict().items()}
           if config.ema_decay else None)

    losses: list[float] = []
    step = 0
    done = False
    model.train()
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(data), config.batch_size):
            idx = order[start:start + config.batch_size]
            x0 = x_all[idx]
            cls = y_all[idx]
            t = torch.randint(1, schedule.T + 1, (len(idx),))
            eps = torch.randn_like(x0)
            x_t = sqrt_ac[t - 1][:, None, None, None] * x0 \
                + sqrt_1m[t - 1][:, None, None, None] * eps
            pred = model(x_t, t, cls)
            loss = nn.functional.mse_loss(pred, eps)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    f"loss became non-finite at step {step} (epoch {epoch}, "
                    f"lr {config.learning_rate})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if ema is not None:
                with torch.no_grad():
                    current = model.state_dict()
                    for k, shadow in ema.items():
                        if shadow.dtype.is_floating_point:
                            shadow.mul_(config.ema_decay).add_(
                                current[k], alpha=1.0 - config.ema_decay)
                        else:
                            shadow.copy_(current[k])
            losses.append(float(loss.item()))
            log.debug("diffusion step %d loss %.5f", step, losses[-1])
            step += 1
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break
        if done:
            break

    model.trained = True
    ema_model = None
    if ema is not None:
        import copy

        ema_model = copy.deepcopy(model)
        ema_model.load_state_dict(ema)
        ema_model.trained = True
    return TrainResult(model=model, losses=losses,
                       base_checksum_before=checksum_before,
                       base_checksum_after=module_checksum(model, only_base=True),
                       config=config, lora_wrapped=wrapped, ema_model=ema_model)


def train_per_trimester(datasets: dict[Trimester, list[tuple[TriChannelImage, Trimester]]],
                        base_model: DenoiserNet, config: DiffusionTrainConfig,
                        schedule: NoiseSchedule | None = None,
                        ) -> dict[Trimester, "AdapterCheckpoint"]:
    """Three independent adapters over one shared frozen base."""
    import copy

    results = {}
    for trimester in (Trimester.first, Trimester.second, Trimester.third):
        subset = datasets.get(trimester, [])
        if not subset:
            raise EmptyDataset(f"no training pairs for trimester {trimester.value}")
        if any(t != trimester for _, t in subset):
            raise ValueError(f"dataset for {trimester.value} contains other labels")
        model_copy = copy.deepcopy(base_model)
        cfg = DiffusionTrainConfig(**{**asdict(config), "mode": "lora_finetune"})
        out = train_denoiser(subset, cfg, schedule=schedule, model=model_copy)
        adapter_state = {k: v.detach().clone()
                         for k, v in out.model.state_dict().items()
                         if "lora_A" in k or "lora_B" in k}
        results[trimester] = AdapterCheckpoint(
            adapter_id=f"adapter-{trimester.value}",
            trimester=trimester,
            rank=cfg.lora_rank,
            seed=cfg.lora_seed,
            state=adapter_state,
            base_checksum=out.base_checksum_after,
        )
    return results


@dataclass
class AdapterCheckpoint:
    adapter_id: str
    trimester: Trimester
    rank: int
    seed: int
    state: dict[str, torch.Tensor]
    base_checksum: str


# -- sampling --------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 20
    seed: int = 0
    alpha_merge: float = lora.GENERATION_ALPHA

    def validate(self, T: int):
        if not 1 <= self.steps <= T:
            raise ValueError(f"steps must lie in [1, {T}], got {self.steps}")


def strided_timesteps(T: int, steps: int) -> list[int]:
    ts = np.unique(np.linspace(T, 1, steps).round().astype(int))[::-1]
    return [int(t) for t in ts]


def sample_batch(model: DenoiserNet, trimester: Trimester, count: int,
                 sampler: SamplerConfig, schedule: NoiseSchedule | None = None,
                 ) -> list[TriChannelImage]:
    """Ancestral reverse diffusion from seeded noise over strided timesteps."""
    if not getattr(model, "trained", False):
        raise UntrainedModel("sample from a trained model or loaded checkpoint")
    schedule = schedule or NoiseSchedule.linear()
    sampler.validate(schedule.T)
    size = model.config.image_size
    gen = torch.Generator().manual_seed(sampler.seed)
    x = torch.randn(count, 3, size, size, generator=gen)
    cls = torch.full((count,), Trimester(trimester).class_id, dtype=torch.long)
    steps = strided_timesteps(schedule.T, sampler.steps)
    model.eval()
    with torch.no_grad():
        for i, t in enumerate(steps):
            t_prev = steps[i + 1] if i + 1 < len(steps) else 0
            ac = schedule.alpha_cum_at(t)
            ac_prev = schedule.alpha_cum_at(t_prev)
            eps_hat = model(x, torch.full((count,), t, dtype=torch.long), cls)
            x0 = (x - math.sqrt(1.0 - ac) * eps_hat) / math.sqrt(ac)
            x0 = x0.clamp(-1.0, 1.0)
            var = (1.0 - ac_prev) / (1.0 - ac) * (1.0 - ac / ac_prev)
            var = max(var, 0.0)
            dir_coeff = math.sqrt(max(1.0 - ac_prev - var, 0.0))
            x = math.sqrt(ac_prev) * x0 + dir_coeff * eps_hat
            if t_prev > 0 and var > 0:
                x = x + math.sqrt(var) * torch.randn(x.shape, generator=gen)
            if not torch.isfinite(x).all():
                raise NonFiniteLoss(f"non-finite state in reverse pass at t={t}")
    return [tensor_to_tri(x[i]) for i in range(count)]


def sample(model: DenoiserNet, trimester: Trimester, sampler: SamplerConfig,
           schedule: NoiseSchedule | None = None) -> TriChannelImage:
    return sample_batch(model, trimester, 1, sampler, schedule=schedule)[0]


def apply_adapter(base_model: DenoiserNet, ckpt: AdapterCheckpoint,
                  alpha: float = lora.GENERATION_ALPHA) -> DenoiserNet:
    """Clone the base and overlay one trimester adapter at the given merge scale."""
    import copy

    model = copy.deepcopy(base_model)
    lora.attach_adapters(model, LORA_TARGETS, r=ckpt.rank, seed=ckpt.seed, alpha=alpha)
    missing = model.load_state_dict(
        {**model.state_dict(), **ckpt.state}, strict=True)
    assert not missing.missing_keys
    model.trained = True
    log.info("sampling with %s (alpha=%.2f)", ckpt.adapter_id, alpha)
    return model


# -- checkpoint container -----------------------------------------------------------


def save_checkpoint(path: str | Path, model: DenoiserNet,
                    schedule: NoiseSchedule, train_config: DiffusionTrainConfig,
                    adapters: dict[Trimester, AdapterCheckpoint] | None = None):
    payload = {
        "model_config": asdict(model.config),
        "state_dict": model.state_dict(),
        "schedule": {"betas": schedule.betas, "alphas_cum": schedule.alphas_cum},
        "train_config": asdict(train_config),
        "base_checksum": module_checksum(model, only_base=True),
        "trained": model.trained,
        "adapters": {
            t.value: {"adapter_id": a.adapter_id, "rank": a.rank, "seed": a.seed,
                      "state": a.state, "base_checksum": a.base_checksum}
            for t, a in (adapters or {}).items()
        },
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path):
    payload = torch.load(path, weights_only=False)
    model = DenoiserNet(DenoiserConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.trained = payload["trained"]
    schedule = NoiseSchedule(**payload["schedule"])
    config = DiffusionTrainConfig(**payload["train_config"])
    adapters = {
        Trimester(t): AdapterCheckpoint(adapter_id=a["adapter_id"], trimester=Trimester(t),
                                        rank=a["rank"], seed=a["seed"], state=a["state"],
                                        base_checksum=a["base_checksum"])
        for t, a in payload["adapters"].items()
    }
    return model, schedule, config, adapters
