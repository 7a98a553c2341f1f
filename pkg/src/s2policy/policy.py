"""Training and inference for spatial-semantic diffusion policies.

Four observation variants share one architecture and differ only in which
channels reach the encoder:

=============  ==========================================
variant        encoder input
=============  ==========================================
s2             fused mask + normalized depth (2 channels)
rgb            raw RGB / 255 (3 channels)
semantic-only  fused mask
spatial-only   normalized depth
=============  ==========================================
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import nets
from .data import Batch, DemoDataset, RangeStats, sample_batch
from .errors import InvalidArgument, PerceptionError, TrainingDiverged
from .fusion import fuse_masks, normalize_depth_stack
from .percept import perceive
from .sched import NoiseSchedule, make_schedule, sample_chain

log = logging.getLogger(__name__)

VARIANTS = ("s2", "rgb", "semantic-only", "spatial-only")
VARIANT_CHANNELS = {"s2": 2, "rgb": 3, "semantic-only": 1, "spatial-only": 1}
VARIANT_INPUTS = {"s2": ("mask", "depth"), "rgb": ("rgb",), "semantic-only": ("mask",), "spatial-only": ("depth",)}


@dataclass
class PolicyConfig:
    variant: str = "s2"
    n_obs: int = 2
    pred_horizon: int = 16
    act_horizon: int = 8
    K: int = 100
    n_infer_steps: int = 10
    eta: float = 0.0
    epochs: int = 500
    lr: float = 1e-4
    warmup_steps: int = 500
    lr_decay: str = "cosine"
    batch_size: int = 64
    ema_decay: float = 0.995
    weight_decay: float = 1e-6
    seed: int = 0
    feature_dim: int = 128
    encoder_widths: tuple[int, ...] = (16, 32, 64, 128)
    down_dims: tuple[int, ...] = (64, 128, 256)
    kernel_size: int = 5
    timestep_embed_dim: int = 64
    shift_px: int = 0  # random-shift image augmentation during training

    def __post_init__(self):
        self.encoder_widths = tuple(self.encoder_widths)
        self.down_dims = tuple(self.down_dims)
        if self.variant not in VARIANTS:
            raise InvalidArgument(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.act_horizon > self.pred_horizon:
            raise InvalidArgument("act_horizon must not exceed pred_horizon")
        if self.n_infer_steps > self.K:
            raise InvalidArgument("n_infer_steps must not exceed K")
        if self.lr_decay not in ("cosine", "constant"):
            raise InvalidArgument(f"unknown lr_decay {self.lr_decay!r}")
        if self.shift_px < 0:
            raise InvalidArgument("shift_px must be >= 0")

    @classmethod
    def desk(cls, **overrides) -> "PolicyConfig":
        """Compact setting that trains on one CPU core in minutes."""
        base = dict(
            epochs=150,
            lr=1e-3,
            warmup_steps=200,
            batch_size=32,
            feature_dim=64,
            encoder_widths=(8, 16, 32, 64),
            down_dims=(32, 64),
            shift_px=8,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def tiny(cls, **overrides) -> "PolicyConfig":
        """Smallest useful network, for gradient and overfitting checks."""
        base = dict(
            pred_horizon=4,
            act_horizon=4,
            K=20,
            n_infer_steps=5,
            epochs=1,
            lr=1e-3,
            warmup_steps=0,
            batch_size=8,
            feature_dim=16,
            encoder_widths=(4, 8, 8, 16),
            down_dims=(16, 32),
            kernel_size=3,
            timestep_embed_dim=16,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["down_dims"] = list(self.down_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def model_configs(self, action_dim: int, proprio_dim: int) -> tuple[nets.EncoderConfig, nets.DenoiserConfig]:
        enc = nets.EncoderConfig(
            in_channels=VARIANT_CHANNELS[self.variant], feature_dim=self.feature_dim, widths=self.encoder_widths
        )
        den = nets.DenoiserConfig(
            action_dim=action_dim,
            pred_horizon=self.pred_horizon,
            n_obs=self.n_obs,
            feature_dim=self.feature_dim,
            proprio_dim=proprio_dim,
            timestep_embed_dim=self.timestep_embed_dim,
            down_dims=self.down_dims,
            kernel_size=self.kernel_size,
        )
        return enc, den


# -- observations ------------------------------------------------------------


def variant_observation(variant: str, rgb=None, mask=None, depth=None) -> np.ndarray:
    """Encoder input for ``variant`` from (..., H, W[, 3]) frame stacks.

    Only the inputs the variant needs are touched; the others may be None.
    """
    if variant == "rgb":
        if rgb is None:
            raise PerceptionError("rgb variant needs RGB frames")
        return np.moveaxis(np.asarray(rgb, dtype=np.float32) / 255.0, -1, -3)
    parts = []
    for name in VARIANT_INPUTS[variant]:
        if name == "mask":
            if mask is None:
                raise PerceptionError(f"{variant} variant needs a segmentation mask")
            parts.append(np.asarray(mask, dtype=np.float32))
        else:
            if depth is None:
                raise PerceptionError(f"{variant} variant needs a depth map")
            parts.append(normalize_depth_stack(depth))
    return np.stack(parts, axis=-3)


@dataclass
class ObsWindow:
    """The last ``n_obs`` frames seen by the policy, oldest first.

    ``mask`` is the fused segmentation mask and ``depth`` the raw relative
    depth; either may be None for variants that do not use it.
    """

    proprio: np.ndarray
    rgb: np.ndarray | None = None
    mask: np.ndarray | None = None
    depth: np.ndarray | None = None


class WindowBuilder:
    """Accumulates per-step observations into an :class:`ObsWindow`.

    Runs perception only when the variant needs it; the window starts by
    repeating the first frame.
    """

    def __init__(self, variant: str, n_obs: int, backend=None, prompt: str | None = None):
        self.variant = variant
        self.n_obs = n_obs
        self.backend = backend
        self.prompt = prompt
        self.frames: list[dict] = []

    def push(self, rgb: np.ndarray, q: np.ndarray) -> None:
        frame = {"proprio": np.asarray(q, dtype=np.float32)}
        needs = VARIANT_INPUTS.get(self.variant, ())
        if "rgb" in needs:
            frame["rgb"] = rgb
        if "mask" in needs or "depth" in needs:
            if self.backend is None:
                raise PerceptionError(f"{self.variant} variant needs a perception backend")
            result = perceive(self.backend, rgb, self.prompt)
            frame["mask"] = fuse_masks(result.masks)
            frame["depth"] = result.raw_depth
        if not self.frames:
            self.frames = [frame] * self.n_obs
        else:
            self.frames = self.frames[1:] + [frame]

    def window(self) -> ObsWindow:
        stack = lambda key: np.stack([f[key] for f in self.frames]) if key in self.frames[0] else None  # noqa: E731
        return ObsWindow(proprio=stack("proprio"), rgb=stack("rgb"), mask=stack("mask"), depth=stack("depth"))


# -- training ----------------------------------------------------------------


def lr_at(step: int, cfg: PolicyConfig, total_steps: int) -> float:
    """Linear warm-up to ``cfg.lr`` followed by cosine decay to zero."""
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    if cfg.lr_decay == "constant":
        return cfg.lr
    span = max(total_steps - cfg.warmup_steps, 1)
    progress = min(max(step - cfg.warmup_steps, 0) / span, 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainState:
    model: nets.S2Model
    ema: nets.S2Model
    optimizer: torch.optim.Optimizer
    step: int = 0
    total_steps: int = 1


def make_train_state(model: nets.S2Model, cfg: PolicyConfig, total_steps: int) -> TrainState:
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=(0.95, 0.999), eps=1e-8, weight_decay=cfg.weight_decay)
    ema = copy.deepcopy(model)
    ema.requires_grad_(False)
    return TrainState(model=model, ema=ema, optimizer=opt, total_steps=total_steps)


def diffusion_loss(model: nets.S2Model, obs: torch.Tensor, q: torch.Tensor, a0: torch.Tensor, k: torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule, reduction: str = "mean") -> torch.Tensor:
    """MSE between the clean chunk and the prediction from its noised copy.

    ``obs`` is (B, n_obs, C, H, W); ``q`` is (B, n_obs, Dq).
    """
    from .sched import forward_noise

    B, n_obs = obs.shape[:2]
    f_v = nets.encode_obs(model, obs.reshape((B * n_obs,) + tuple(obs.shape[2:]))).reshape(B, n_obs, -1)
    a_k = forward_noise(sched, a0, k, eps)
    pred = nets.predict_clean_action(model, a_k, k, f_v, q)
    per_sample = F.mse_loss(pred, a0, reduction="none").mean(dim=(1, 2))
    return per_sample.mean() if reduction == "mean" else per_sample


def batch_tensors(batch: Batch, variant: str) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    obs = variant_observation(variant, rgb=batch.rgb if variant == "rgb" else None, mask=batch.mask, depth=batch.depth)
    return torch.from_numpy(obs), torch.from_numpy(batch.proprio), torch.from_numpy(batch.action)


@torch.no_grad()
def _ema_update(ema: nets.S2Model, model: nets.S2Model, decay: float) -> None:
    for pe, pm in zip(ema.parameters(), model.parameters()):
        pe.mul_(decay).add_(pm.detach(), alpha=1.0 - decay)


def random_shift(obs: torch.Tensor, pad: int, gen: torch.Generator) -> torch.Tensor:
    """Shift each sample's frames by up to ``pad`` pixels (edge-replicated).

    All frames of one observation window move together, so relative
    positions inside the image are preserved.
    """
    if pad == 0:
        return obs
    B, T, C, H, W = obs.shape
    padded = F.pad(obs.reshape(B, T * C, H, W), (pad, pad, pad, pad), mode="replicate")
    dx, dy = torch.randint(0, 2 * pad + 1, (2, B), generator=gen).tolist()
    out = torch.stack([padded[i, :, dy[i] : dy[i] + H, dx[i] : dx[i] + W] for i in range(B)])
    return out.reshape(B, T, C, H, W)


def train_step(state: TrainState, batch, sched: NoiseSchedule, gen: torch.Generator, cfg: PolicyConfig) -> tuple[float, TrainState]:
    """One optimizer update on a batch.

    ``batch`` is either a :class:`Batch` or a ``(obs, q, a0)`` tensor triple.
    """
    obs, q, a0 = batch_tensors(batch, cfg.variant) if isinstance(batch, Batch) else batch
    obs = random_shift(obs, cfg.shift_px, gen)
    B = a0.shape[0]
    k = torch.randint(1, sched.K + 1, (B,), generator=gen)
    eps = torch.randn(a0.shape, generator=gen, dtype=a0.dtype)
    lr = lr_at(state.step, cfg, state.total_steps)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.model.train()
    loss = diffusion_loss(state.model, obs, q, a0, k, eps, sched)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss.item()} at step {state.step}")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    _ema_update(state.ema, state.model, cfg.ema_decay)
    state.step += 1
    return float(loss.detach()), state


@dataclass
class TrainedPolicy:
    model: nets.S2Model  # EMA weights; used for inference
    config: PolicyConfig
    stats: dict[str, RangeStats]
    sched: NoiseSchedule
    task: str
    train_model: nets.S2Model | None = None
    history: list[dict] = field(default_factory=list)

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def n_obs(self) -> int:
        return self.config.n_obs

    @property
    def act_horizon(self) -> int:
        return self.config.act_horizon

    def save(self, run_dir: str | Path) -> Path:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        tensors = {f"ema.{k}": v for k, v in self.model.state_dict().items()}
        if self.train_model is not None:
            tensors.update({f"model.{k}": v for k, v in self.train_model.state_dict().items()})
        header = {
            "configs": self.model.configs(),
            "policy": self.config.to_dict(),
            "stats": {k: v.to_dict() for k, v in self.stats.items()},
            "schedule": {"K": self.sched.K, "kind": self.sched.kind},
            "task": self.task,
        }
        path = run_dir / "checkpoint.s2ckpt"
        nets.save_checkpoint(path, tensors, header)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "TrainedPolicy":
        path = Path(path)
        if path.is_dir():
            path = path / "checkpoint.s2ckpt"
        tensors, header = nets.load_checkpoint(path)
        model = nets.model_from_header(header)
        nets.load_state(model, tensors, "ema.")
        model.eval()
        train_model = None
        if any(k.startswith("model.") for k in tensors):
            train_model = nets.model_from_header(header)
            nets.load_state(train_model, tensors, "model.")
        cfg = PolicyConfig.from_dict(header["policy"])
        return cls(
            model=model,
            config=cfg,
            stats={k: RangeStats.from_dict(v) for k, v in header["stats"].items()},
            sched=make_schedule(header["schedule"]["K"], header["schedule"]["kind"]),
            task=header["task"],
            train_model=train_model,
        )

    # -- inference -----------------------------------------------------------

    @torch.no_grad()
    def predict_batch(self, windows: list[ObsWindow], rngs: list[np.random.Generator]) -> np.ndarray:
        """Denormalized action chunks, shape (N, pred_horizon, action_dim)."""
        cfg = self.config
        obs = np.stack(
            [variant_observation(cfg.variant, rgb=w.rgb if cfg.variant == "rgb" else None, mask=w.mask, depth=w.depth) for w in windows]
        )
        q = np.stack([self.stats["proprio"].normalize(w.proprio) for w in windows]).astype(np.float32)
        N = len(windows)
        self.model.eval()
        f_v = nets.encode_obs(self.model, torch.from_numpy(obs).reshape((N * cfg.n_obs,) + obs.shape[2:]))
        f_v = f_v.reshape(N, cfg.n_obs, -1)
        q_t = torch.from_numpy(q)

        def denoise(a_k, k, _cond):
            a = torch.from_numpy(a_k.astype(np.float32))
            x0 = nets.predict_clean_action(self.model, a, torch.full((N,), k, dtype=torch.long), f_v, q_t)
            return np.clip(x0.numpy().astype(np.float64), -1.0, 1.0)

        den_cfg = self.model.denoiser_cfg
        shape = (N, den_cfg.pred_horizon, den_cfg.action_dim)
        a0 = sample_chain(self.sched, denoise, None, cfg.n_infer_steps, cfg.eta, list(rngs), shape)
        return self.stats["action"].denormalize(a0)

    def predict_action(self, window: ObsWindow, rng: np.random.Generator) -> np.ndarray:
        return self.predict_batch([window], [rng])[0]

    def plan(self, envs, windows, rngs) -> list[np.ndarray]:
        chunks = self.predict_batch(windows, rngs)
        return [c[: self.act_horizon] for c in chunks]


def predict_action(policy: TrainedPolicy, obs_window: ObsWindow, rng: np.random.Generator) -> np.ndarray:
    return policy.predict_action(obs_window, rng)


def _prepare_observations(dataset: DemoDataset, variant: str) -> np.ndarray:
    flat = dataset.flat()
    return variant_observation(
        variant, rgb=flat["rgb"] if variant == "rgb" else None, mask=flat["gt_mask"], depth=flat["gt_depth"]
    )


def fit(dataset: DemoDataset, config: PolicyConfig, sched: NoiseSchedule | None = None, log_path: str | Path | None = None) -> TrainedPolicy:
    """Train a policy variant on a recorded dataset.

    Each epoch draws ``ceil(total_steps / batch_size)`` uniformly sampled
    batches. Returns a policy whose inference weights are the EMA weights.
    """
    if len(dataset) == 0 or dataset.stats is None:
        raise InvalidArgument("cannot fit on an empty dataset")
    sched = make_schedule(config.K) if sched is None else sched
    if sched.K != config.K:
        raise InvalidArgument(f"schedule has K={sched.K}, config says K={config.K}")
    enc_cfg, den_cfg = config.model_configs(dataset.action_dim, dataset.proprio_dim)
    model = nets.init_params(enc_cfg, den_cfg, config.seed)
    flat = dataset.flat()
    n_samples = int(flat["lengths"].sum())
    per_epoch = math.ceil(n_samples / config.batch_size)
    state = make_train_state(model, config, total_steps=max(per_epoch * config.epochs, 1))

    # frames are gathered from a precomputed variant tensor instead of re-running fusion per batch
    frames = torch.from_numpy(_prepare_observations(dataset, config.variant))
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    history = []
    log_file = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            losses = []
            for _ in range(per_epoch):
                batch = sample_batch(dataset, config, rng)
                obs_idx = _flat_obs_index(flat, batch, config.n_obs)
                obs = frames[torch.from_numpy(obs_idx)]
                loss, state = train_step(
                    state, (obs, torch.from_numpy(batch.proprio), torch.from_numpy(batch.action)), sched, gen, config
                )
                losses.append(loss)
            record = {
                "epoch": epoch,
                "mean_loss": float(np.mean(losses)),
                "lr": lr_at(state.step, config, state.total_steps),
                "wall_ms": (time.perf_counter() - t0) * 1000.0,
            }
            history.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            log.info("epoch %d loss %.5f lr %.2e", epoch, record["mean_loss"], record["lr"])
    finally:
        if log_file is not None:
            log_file.close()
    state.ema.eval()
    return TrainedPolicy(
        model=state.ema, config=config, stats=dataset.stats, sched=sched, task=dataset.task,
        train_model=state.model, history=history,
    )


def _flat_obs_index(flat: dict, batch: Batch, n_obs: int) -> np.ndarray:
    starts = flat["starts"][batch.episode]
    offsets = np.maximum(batch.t[:, None] + np.arange(-n_obs + 1, 1)[None], 0)
    return offsets + starts[:, None]
