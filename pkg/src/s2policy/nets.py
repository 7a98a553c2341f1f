"""Observation encoder, conditional temporal U-Net denoiser, and checkpoint I/O.

The encoder is a small residual CNN (group norm, strided stages) pooled by a
spatial softmax into keypoint coordinates (global average pool is available
as an option). Two constant coordinate planes are appended to the input so
features keep track of *where* things are in the frame.

The denoiser is a 1-D U-Net over the action-chunk axis. Every residual block
is modulated (scale and shift) by a conditioning vector made of the
diffusion-step embedding, the encoded observation window and proprioception.
It predicts the clean action chunk.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import CorruptionError, InvalidArgument, UnsupportedFormat

CKPT_MAGIC = b"S2CKPT1\0"
POOLS = ("spatial-softmax", "avg")


@dataclass
class EncoderConfig:
    in_channels: int = 2
    feature_dim: int = 128
    image_size: int = 64
    widths: tuple[int, ...] = (16, 32, 64, 128)
    coord_channels: bool = True
    strides: tuple[int, ...] = (1, 2, 2, 1)
    pool: str = "spatial-softmax"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.strides = tuple(int(s) for s in self.strides)
        if self.in_channels not in (1, 2, 3):
            raise InvalidArgument(f"in_channels must be 1, 2 or 3, got {self.in_channels}")
        if self.feature_dim < 8:
            raise InvalidArgument(f"feature_dim must be >= 8, got {self.feature_dim}")
        if len(self.widths) != 4 or len(self.strides) != 4:
            raise InvalidArgument("encoder has exactly 4 stages")
        if self.pool not in POOLS:
            raise InvalidArgument(f"unknown pool {self.pool!r}; expected one of {POOLS}")
        if any(s not in (1, 2) for s in self.strides):
            raise InvalidArgument(f"stage strides must be 1 or 2, got {self.strides}")


@dataclass
class DenoiserConfig:
    action_dim: int
    pred_horizon: int = 16
    n_obs: int = 2
    feature_dim: int = 128
    proprio_dim: int = 2
    timestep_embed_dim: int = 64
    down_dims: tuple[int, ...] = (64, 128, 256)
    kernel_size: int = 5
    n_groups: int = 8

    def __post_init__(self):
        self.down_dims = tuple(int(d) for d in self.down_dims)
        for name in ("action_dim", "pred_horizon", "n_obs", "feature_dim", "proprio_dim", "timestep_embed_dim"):
            if getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must be >= 1")
        if self.pred_horizon % (2 ** (len(self.down_dims) - 1)):
            raise InvalidArgument("pred_horizon must be divisible by 2**(len(down_dims)-1)")

    @property
    def cond_dim(self) -> int:
        return self.n_obs * self.feature_dim + self.n_obs * self.proprio_dim + self.timestep_embed_dim


def _groups(channels: int, preferred: int = 8) -> int:
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


# -- encoder -----------------------------------------------------------------


class ResidualBlock2d(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.norm1 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.skip = (
            nn.Identity() if stride == 1 and cin == cout else nn.Conv2d(cin, cout, 1, stride, bias=False)
        )

    def forward(self, x: Tensor) -> Tensor:
        h = F.mish(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.mish(h + self.skip(x))


class SpatialSoftmax(nn.Module):
    """Expected (x, y) image coordinates of learned keypoint heat maps."""

    def __init__(self, channels: int, n_keypoints: int):
        super().__init__()
        self.keypoints = nn.Conv2d(channels, n_keypoints, 1)

    def forward(self, h: Tensor) -> Tensor:
        B, _, H, W = h.shape
        attn = torch.softmax(self.keypoints(h).flatten(2), dim=-1)  # (B, K, H*W)
        ys = torch.linspace(-1.0, 1.0, H, dtype=h.dtype, device=h.device)
        xs = torch.linspace(-1.0, 1.0, W, dtype=h.dtype, device=h.device)
        grid_y, grid_x = torch.meshgrid(ys, xs, indexing="ij")
        ex = (attn * grid_x.reshape(1, 1, -1)).sum(-1)
        ey = (attn * grid_y.reshape(1, 1, -1)).sum(-1)
        return torch.cat([ex, ey], dim=-1)


class ObsEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        cin = cfg.in_channels + (2 if cfg.coord_channels else 0)
        w = cfg.widths
        self.stem = nn.Sequential(
            nn.Conv2d(cin, w[0], 3, 2, 1, bias=False), nn.GroupNorm(_groups(w[0]), w[0]), nn.Mish()
        )
        self.stages = nn.Sequential(*[ResidualBlock2d(w[max(i - 1, 0)], w[i], cfg.strides[i]) for i in range(4)])
        if cfg.pool == "spatial-softmax":
            self.pool = SpatialSoftmax(w[-1], w[-1])
            self.head = nn.Linear(2 * w[-1], cfg.feature_dim)
        else:
            self.pool = None
            self.head = nn.Linear(w[-1], cfg.feature_dim)
        if cfg.coord_channels:
            lin = torch.linspace(-1.0, 1.0, cfg.image_size)
            yy, xx = torch.meshgrid(lin, lin, indexing="ij")
            self.register_buffer("coords", torch.stack([xx, yy])[None], persistent=False)

    def forward(self, z: Tensor) -> Tensor:
        if z.ndim != 4 or z.shape[1] != self.cfg.in_channels:
            raise InvalidArgument(f"expected (B, {self.cfg.in_channels}, H, W) observations, got {tuple(z.shape)}")
        if self.cfg.coord_channels:
            z = torch.cat([z, self.coords.to(z.dtype).expand(z.shape[0], -1, -1, -1)], dim=1)
        h = self.stages(self.stem(z))
        return self.head(self.pool(h) if self.pool is not None else h.mean(dim=(2, 3)))


# -- denoiser ----------------------------------------------------------------


class SinusoidalStepEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        half = dim // 2
        freqs = torch.exp(torch.arange(half, dtype=torch.float64) * (-math.log(10000.0) / max(half - 1, 1)))
        # follows the module dtype under .double()/.float()
        self.register_buffer("freqs", freqs.float(), persistent=False)
        self._freqs64 = freqs

    def forward(self, k: Tensor) -> Tensor:
        args = k.to(torch.float64)[:, None] * self._freqs64.to(k.device)[None]
        return torch.cat([args.sin(), args.cos()], dim=-1).to(self.freqs.dtype)


class Conv1dBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int, kernel_size: int, n_groups: int):
        super().__init__(
            nn.Conv1d(cin, cout, kernel_size, padding=kernel_size // 2),
            nn.GroupNorm(_groups(cout, n_groups), cout),
            nn.Mish(),
        )


class FiLMResidualBlock1d(nn.Module):
    """Two conv blocks; the first output is scaled and shifted by the conditioning."""

    def __init__(self, cin: int, cout: int, cond_dim: int, kernel_size: int, n_groups: int):
        super().__init__()
        self.block1 = Conv1dBlock(cin, cout, kernel_size, n_groups)
        self.block2 = Conv1dBlock(cout, cout, kernel_size, n_groups)
        self.film = nn.Sequential(nn.Mish(), nn.Linear(cond_dim, 2 * cout))
        self.skip = nn.Conv1d(cin, cout, 1) if cin != cout else nn.Identity()
        self.cout = cout

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        h = self.block1(x)
        scale, shift = self.film(cond).unsqueeze(-1).chunk(2, dim=1)
        h = self.block2(scale * h + shift)
        return h + self.skip(x)


class TemporalUnet(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        dsed = cfg.timestep_embed_dim
        self.step_encoder = nn.Sequential(
            SinusoidalStepEmbedding(dsed), nn.Linear(dsed, 4 * dsed), nn.Mish(), nn.Linear(4 * dsed, dsed)
        )
        cond_dim = cfg.cond_dim
        ks, ng = cfg.kernel_size, cfg.n_groups
        dims = (cfg.action_dim,) + cfg.down_dims
        pairs = list(zip(dims[:-1], dims[1:]))

        self.down = nn.ModuleList()
        for i, (cin, cout) in enumerate(pairs):
            last = i == len(pairs) - 1
            self.down.append(
                nn.ModuleList(
                    [
                        FiLMResidualBlock1d(cin, cout, cond_dim, ks, ng),
                        FiLMResidualBlock1d(cout, cout, cond_dim, ks, ng),
                        nn.Conv1d(cout, cout, 3, 2, 1) if not last else nn.Identity(),
                    ]
                )
            )
        mid = cfg.down_dims[-1]
        self.mid = nn.ModuleList(
            [FiLMResidualBlock1d(mid, mid, cond_dim, ks, ng), FiLMResidualBlock1d(mid, mid, cond_dim, ks, ng)]
        )
        self.up = nn.ModuleList()
        for cin, cout in reversed(pairs[1:]):
            self.up.append(
                nn.ModuleList(
                    [
                        FiLMResidualBlock1d(cout * 2, cin, cond_dim, ks, ng),
                        FiLMResidualBlock1d(cin, cin, cond_dim, ks, ng),
                        nn.ConvTranspose1d(cin, cin, 4, 2, 1),
                    ]
                )
            )
        start = cfg.down_dims[0]
        self.final = nn.Sequential(Conv1dBlock(start, start, ks, ng), nn.Conv1d(start, cfg.action_dim, 1))

    def forward(self, a_k: Tensor, k: Tensor, global_cond: Tensor) -> Tensor:
        x = a_k.transpose(1, 2)  # (B, action_dim, horizon)
        cond = torch.cat([self.step_encoder(k), global_cond], dim=-1)
        skips = []
        for res1, res2, down in self.down:
            x = res2(res1(x, cond), cond)
            skips.append(x)
            x = down(x)
        for block in self.mid:
            x = block(x, cond)
        for res1, res2, up in self.up:
            x = torch.cat([x, skips.pop()], dim=1)
            x = res2(res1(x, cond), cond)
            x = up(x)
        return self.final(x).transpose(1, 2)


class S2Model(nn.Module):
    """Encoder + denoiser: the full set of trainable parameters."""

    def __init__(self, encoder_cfg: EncoderConfig, denoiser_cfg: DenoiserConfig):
        super().__init__()
        if encoder_cfg.feature_dim != denoiser_cfg.feature_dim:
            raise InvalidArgument("encoder and denoiser disagree on feature_dim")
        self.encoder_cfg = encoder_cfg
        self.denoiser_cfg = denoiser_cfg
        self.encoder = ObsEncoder(encoder_cfg)
        self.denoiser = TemporalUnet(denoiser_cfg)

    def configs(self) -> dict:
        return {"encoder": asdict(self.encoder_cfg), "denoiser": asdict(self.denoiser_cfg)}

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


ModelParams = S2Model


def init_params(encoder_cfg: EncoderConfig, denoiser_cfg: DenoiserConfig, seed: int) -> S2Model:
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        model = S2Model(encoder_cfg, denoiser_cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def encode_obs(params: S2Model, z: Tensor) -> Tensor:
    """(B, C, H, W) observations -> (B, feature_dim) features."""
    return params.encoder(z)


def predict_clean_action(params: S2Model, a_k: Tensor, k: Tensor, f_v: Tensor, q: Tensor) -> Tensor:
    """Predict the clean chunk from a noisy one.

    ``f_v`` is (B, n_obs, feature_dim) and ``q`` is (B, n_obs, proprio_dim).
    """
    cfg = params.denoiser_cfg
    B = a_k.shape[0]
    if tuple(a_k.shape[1:]) != (cfg.pred_horizon, cfg.action_dim):
        raise InvalidArgument(f"a_k must be (B, {cfg.pred_horizon}, {cfg.action_dim}), got {tuple(a_k.shape)}")
    if tuple(f_v.shape) != (B, cfg.n_obs, cfg.feature_dim):
        raise InvalidArgument(f"f_v must be ({B}, {cfg.n_obs}, {cfg.feature_dim}), got {tuple(f_v.shape)}")
    if tuple(q.shape) != (B, cfg.n_obs, cfg.proprio_dim):
        raise InvalidArgument(f"q must be ({B}, {cfg.n_obs}, {cfg.proprio_dim}), got {tuple(q.shape)}")
    k = torch.as_tensor(k, device=a_k.device).reshape(-1)
    if k.numel() == 1 and B > 1:
        k = k.expand(B)
    if k.shape[0] != B:
        raise InvalidArgument(f"need one step index per batch row, got {k.shape[0]} for {B}")
    global_cond = torch.cat([f_v.reshape(B, -1), q.reshape(B, -1)], dim=-1)
    return params.denoiser(a_k, k, global_cond)


# -- checkpoint format -------------------------------------------------------
# magic | u32 header_len | JSON header | per tensor: u32 ndim, u32 dims..., f32 LE data


def save_checkpoint(path: str | Path, tensors: dict[str, Tensor | np.ndarray], header: dict) -> None:
    names = list(tensors)
    head = dict(header)
    head["tensors"] = names
    raw_header = json.dumps(head, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(raw_header)))
    buf.write(raw_header)
    for name in names:
        t = tensors[name]
        arr = t.detach().cpu().numpy() if isinstance(t, Tensor) else np.asarray(t)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise UnsupportedFormat(f"{path}: not an S2CKPT1 checkpoint")
    try:
        off = len(CKPT_MAGIC)
        (hlen,) = struct.unpack_from("<I", data, off)
        off += 4
        header = json.loads(data[off : off + hlen].decode("utf-8"))
        off += hlen
        tensors = {}
        for name in header["tensors"]:
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if off + 4 * count > len(data):
                raise CorruptionError(f"{path}: tensor {name!r} is truncated")
            tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).copy()
            off += 4 * count
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError, KeyError) as exc:
        raise CorruptionError(f"{path}: malformed checkpoint: {exc}") from exc
    if off != len(data):
        raise CorruptionError(f"{path}: {len(data) - off} trailing bytes")
    return tensors, header


def model_from_header(header: dict) -> S2Model:
    enc = EncoderConfig(**header["configs"]["encoder"])
    den = DenoiserConfig(**header["configs"]["denoiser"])
    return S2Model(enc, den)


def load_state(model: nn.Module, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    state = {k[len(prefix):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith(prefix)}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise InvalidArgument(f"checkpoint tensors do not fit the model: {exc}") from exc
