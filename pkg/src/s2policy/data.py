"""Demonstration recording, the on-disk episode format, and batch sampling.

A dataset directory holds ``manifest.json`` and one ``ep_NNNNN.bin`` per
episode. Episode layout::

    16 bytes   magic  b"S2EPISODE\\0" zero-padded
    u32        header length (little endian)
    ...        JSON header: task, instance, seed, arrays [{name, dtype, shape, offset, nbytes}]
    per array  raw little-endian bytes followed by a u32 CRC32 of those bytes

Ground-truth masks (fused over the instance prompt) and raw pseudo-depth are
stored next to RGB so every observation variant trains without re-running
perception.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import sim
from .errors import CorruptionError, EnvironmentMisconfiguration, InvalidArgument, UnsupportedFormat
from .fusion import fuse_masks

log = logging.getLogger(__name__)

FORMAT_VERSION = "1"
EPISODE_MAGIC = b"S2EPISODE\0".ljust(16, b"\0")
ARRAY_NAMES = ("rgb", "gt_mask", "gt_depth", "proprio", "action")
DEFAULT_DEMOS = {"wiping": 40, "scooping": 60}


@dataclass
class Episode:
    rgb: np.ndarray  # (T, 64, 64, 3) uint8
    gt_mask: np.ndarray  # (T, 64, 64) float32
    gt_depth: np.ndarray  # (T, 64, 64) float32
    proprio: np.ndarray  # (T, Dq) float32
    action: np.ndarray  # (T, Da) float32
    instance: sim.InstanceSpec
    seed: int
    task: str = ""

    def __post_init__(self):
        lengths = {name: len(getattr(self, name)) for name in ARRAY_NAMES}
        if len(set(lengths.values())) != 1:
            raise InvalidArgument(f"episode arrays disagree on length: {lengths}")

    def __len__(self) -> int:
        return len(self.action)

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "rgb": np.ascontiguousarray(self.rgb, dtype=np.uint8),
            "gt_mask": np.ascontiguousarray(self.gt_mask, dtype="<f4"),
            "gt_depth": np.ascontiguousarray(self.gt_depth, dtype="<f4"),
            "proprio": np.ascontiguousarray(self.proprio, dtype="<f4"),
            "action": np.ascontiguousarray(self.action, dtype="<f4"),
        }


def write_episode(path: Path, ep: Episode) -> None:
    arrays = ep.arrays()
    entries, offset = [], 0
    for name, arr in arrays.items():
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes + 4
    header = json.dumps(
        {"version": FORMAT_VERSION, "task": ep.task, "instance": ep.instance.to_dict(), "seed": ep.seed, "arrays": entries},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(EPISODE_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for arr in arrays.values():
            raw = arr.tobytes()
            f.write(raw)
            f.write(struct.pack("<I", zlib.crc32(raw)))


def read_episode(path: Path) -> Episode:
    name = Path(path).name
    data = Path(path).read_bytes()
    if data[:16] != EPISODE_MAGIC:
        raise CorruptionError(f"episode {name}: bad magic")
    try:
        (hlen,) = struct.unpack_from("<I", data, 16)
        header = json.loads(data[20 : 20 + hlen].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"episode {name}: unreadable header ({exc})") from exc
    if header.get("version") != FORMAT_VERSION:
        raise UnsupportedFormat(f"episode {name}: format version {header.get('version')!r} not supported")
    base = 20 + hlen
    out = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end + 4 > len(data):
            raise CorruptionError(f"episode {name}: array {entry['name']!r} is truncated")
        raw = data[start:end]
        (crc,) = struct.unpack_from("<I", data, end)
        if zlib.crc32(raw) != crc:
            raise CorruptionError(f"episode {name}: checksum mismatch in array {entry['name']!r}")
        out[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return Episode(
        **{k: out[k] for k in ARRAY_NAMES},
        instance=sim.InstanceSpec.from_dict(header["instance"]),
        seed=int(header["seed"]),
        task=header.get("task", ""),
    )


# -- normalization -----------------------------------------------------------


@dataclass
class RangeStats:
    """Per-dimension min/max; maps values affinely onto [-1, 1]."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=np.float64)
        self.max = np.asarray(self.max, dtype=np.float64)

    @classmethod
    def of(cls, x: np.ndarray) -> "RangeStats":
        x = np.asarray(x, dtype=np.float64).reshape(-1, np.shape(x)[-1])
        return cls(x.min(axis=0), x.max(axis=0))

    def _span(self) -> np.ndarray:
        span = self.max - self.min
        return np.where(span < 1e-8, 2.0, span)

    def normalize(self, x):
        return 2.0 * (np.asarray(x, dtype=np.float64) - self.min) / self._span() - 1.0

    def denormalize(self, y):
        return (np.asarray(y, dtype=np.float64) + 1.0) / 2.0 * self._span() + self.min

    def to_dict(self) -> dict:
        return {"min": [float(v) for v in self.min], "max": [float(v) for v in self.max]}

    @classmethod
    def from_dict(cls, d: dict) -> "RangeStats":
        return cls(np.array(d["min"]), np.array(d["max"]))


def compute_stats(episodes) -> dict[str, RangeStats] | None:
    eps = list(episodes)
    if not eps:
        return None
    return {
        "action": RangeStats.of(np.concatenate([e.action for e in eps])),
        "proprio": RangeStats.of(np.concatenate([e.proprio for e in eps])),
    }


# -- dataset -----------------------------------------------------------------


class DemoDataset:
    """Lazy view over a recorded dataset directory."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        manifest_path = self.path / "manifest.json"
        if not manifest_path.exists():
            raise InvalidArgument(f"{self.path} has no manifest.json")
        self.manifest = json.loads(manifest_path.read_text())
        version = str(self.manifest.get("format_version"))
        if version != FORMAT_VERSION:
            raise UnsupportedFormat(f"dataset format version {version!r} not supported (expected {FORMAT_VERSION!r})")
        self.task = self.manifest["task"]
        self.instance = sim.InstanceSpec.from_dict(self.manifest["instance"])
        self.prompt = self.manifest["prompt"]
        stats = self.manifest.get("stats")
        self.stats = None if stats is None else {k: RangeStats.from_dict(v) for k, v in stats.items()}
        self._cache: dict[int, Episode] = {}
        self._flat = None

    def __len__(self) -> int:
        return len(self.manifest["episodes"])

    @property
    def lengths(self) -> list[int]:
        return [e["length"] for e in self.manifest["episodes"]]

    def episode(self, i: int) -> Episode:
        if i not in self._cache:
            entry = self.manifest["episodes"][i]
            ep = read_episode(self.path / entry["file"])
            if len(ep) != entry["length"]:
                raise CorruptionError(f"episode {entry['file']}: length {len(ep)} != manifest {entry['length']}")
            self._cache[i] = ep
        return self._cache[i]

    def __iter__(self):
        return (self.episode(i) for i in range(len(self)))

    def flat(self) -> dict[str, np.ndarray]:
        """All episodes concatenated along time, plus ``starts`` / ``lengths``."""
        if self._flat is None:
            eps = list(self)
            self._flat = {name: np.concatenate([getattr(e, name) for e in eps]) for name in ARRAY_NAMES}
            lengths = np.array([len(e) for e in eps])
            self._flat["lengths"] = lengths
            self._flat["starts"] = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        return self._flat

    @property
    def action_dim(self) -> int:
        return sim.ENV_CLASSES[self.task].action_dim

    @property
    def proprio_dim(self) -> int:
        return sim.ENV_CLASSES[self.task].proprio_dim


def load_dataset(path: str | Path) -> DemoDataset:
    return DemoDataset(path)


def save_dataset(path: str | Path, task: str, inst: sim.InstanceSpec, episodes: list[Episode], seed: int, prompt: str | None = None) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    prompt = inst.prompt if prompt is None else prompt
    entries = []
    for i, ep in enumerate(episodes):
        fname = f"ep_{i:05d}.bin"
        write_episode(out / fname, ep)
        entries.append({"file": fname, "length": len(ep), "seed": ep.seed})
    stats = compute_stats(episodes)
    manifest = {
        "format_version": FORMAT_VERSION,
        "task": task,
        "instance": inst.to_dict(),
        "prompt": prompt,
        "seed": seed,
        "episodes": entries,
        "stats": None if stats is None else {k: v.to_dict() for k, v in stats.items()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def record_episode(env, seed: int, jitter_seed, prompt: str) -> tuple[Episode, bool]:
    rng = np.random.default_rng(jitter_seed)
    obs = env.reset(seed)
    frames = {name: [] for name in ARRAY_NAMES}
    done = False
    while not done:
        gt = obs.gt_perception(prompt)
        a = env.expert_action(rng)
        frames["rgb"].append(obs.rgb)
        frames["gt_mask"].append(fuse_masks(gt.masks))
        frames["gt_depth"].append(gt.raw_depth)
        frames["proprio"].append(obs.q)
        frames["action"].append(a.astype(np.float32))
        obs, done, _ = env.step(a)
    ep = Episode(**{k: np.stack(v) for k, v in frames.items()}, instance=env.instance, seed=seed, task=env.task)
    return ep, env.success()


def record_demos(
    task: str,
    inst: sim.InstanceSpec,
    n_episodes: int,
    seed: int,
    out_dir: str | Path,
    step_limit: int | None = None,
) -> Path:
    """Record ``n_episodes`` successful expert episodes into ``out_dir``.

    Failed rollouts are dropped and replaced by a fresh seed. Raises
    :class:`EnvironmentMisconfiguration` once more than half of the attempts fail.
    """
    if n_episodes < 0:
        raise InvalidArgument("n_episodes must be >= 0")
    env = sim.make_env(task, inst, step_limit)
    prompt = inst.prompt
    seeds = np.random.SeedSequence(seed)
    episodes: list[Episode] = []
    attempts = failures = 0
    while len(episodes) < n_episodes:
        child = seeds.spawn(1)[0]
        env_seed = int(child.generate_state(1)[0] % (2**31))
        ep, ok = record_episode(env, env_seed, child, prompt)
        attempts += 1
        if ok:
            episodes.append(ep)
        else:
            failures += 1
            log.info("expert failed on seed %d; discarded", env_seed)
            if failures > n_episodes and failures / attempts > 0.5:
                raise EnvironmentMisconfiguration(
                    f"expert failed {failures} of {attempts} attempts on {task}/{inst.render_style}"
                )
    return save_dataset(out_dir, task, inst, episodes, seed, prompt)


# -- batch sampling ----------------------------------------------------------


@dataclass
class Batch:
    rgb: np.ndarray  # (B, n_obs, H, W, 3) uint8
    mask: np.ndarray  # (B, n_obs, H, W)
    depth: np.ndarray  # (B, n_obs, H, W) raw
    proprio: np.ndarray  # (B, n_obs, Dq) normalized
    action: np.ndarray  # (B, pred_horizon, Da) normalized
    padded: np.ndarray  # (B, pred_horizon) bool
    episode: np.ndarray
    t: np.ndarray

    def __len__(self) -> int:
        return len(self.action)


def window_indices(t: np.ndarray, length: np.ndarray, n_obs: int, pred_horizon: int):
    """Frame indices (clamped at 0) and chunk indices (clamped at T-1) within each episode."""
    t = np.asarray(t)[:, None]
    length = np.asarray(length)[:, None]
    obs_idx = np.maximum(t + np.arange(-n_obs + 1, 1)[None], 0)
    raw_act = t + np.arange(pred_horizon)[None]
    act_idx = np.minimum(raw_act, length - 1)
    return obs_idx, act_idx, raw_act > length - 1


def gather_batch(dataset: DemoDataset, episode: np.ndarray, t: np.ndarray, n_obs: int, pred_horizon: int) -> Batch:
    flat = dataset.flat()
    starts, lengths = flat["starts"][episode], flat["lengths"][episode]
    obs_idx, act_idx, padded = window_indices(t, lengths, n_obs, pred_horizon)
    obs_idx = obs_idx + starts[:, None]
    act_idx = act_idx + starts[:, None]
    stats = dataset.stats
    return Batch(
        rgb=flat["rgb"][obs_idx],
        mask=flat["gt_mask"][obs_idx],
        depth=flat["gt_depth"][obs_idx],
        proprio=stats["proprio"].normalize(flat["proprio"][obs_idx]).astype(np.float32),
        action=stats["action"].normalize(flat["action"][act_idx]).astype(np.float32),
        padded=padded,
        episode=np.asarray(episode),
        t=np.asarray(t),
    )


def sample_batch(dataset: DemoDataset, config, rng: np.random.Generator, batch_size: int | None = None) -> Batch:
    """Uniformly sample (episode, t) pairs over all recorded timesteps.

    ``config`` needs ``n_obs``, ``pred_horizon`` and ``batch_size``.
    """
    if len(dataset) == 0:
        raise InvalidArgument("cannot sample from an empty dataset")
    flat = dataset.flat()
    B = config.batch_size if batch_size is None else batch_size
    total = int(flat["lengths"].sum())
    g = rng.integers(0, total, size=B)
    episode = np.searchsorted(flat["starts"], g, side="right") - 1
    t = g - flat["starts"][episode]
    return gather_batch(dataset, episode, t, config.n_obs, config.pred_horizon)
