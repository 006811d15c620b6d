"""Grasp-trial collection, volume binning, normalisation, cropping and folds."""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import RangeError, SplitError
from .simworld import N_TACTILE, SceneConfig, scene_init

BIN_WIDTH_ML = 10.0
EXAMPLES_PER_TRIAL = 2581 / 110
HOLD_TICKS = 50  # 5 s at 10 Hz
PRE_LIFT_TICKS = 3
DEFAULT_GRIP_RANGE = (8.0, 25.0)
DEFAULT_VOLUME_RANGE = (10.0, 150.0)
CROP_RATIO = 224 / 256


def n_classes(capacity: float) -> int:
    return int(math.ceil(capacity / BIN_WIDTH_ML))


def bin_volume(v: float, capacity: float = 150.0) -> int:
    """Label at 10 ml resolution: 0-10 ml -> 0, (10, 20] -> 1, ..."""
    if not 0.0 <= v <= capacity:
        raise RangeError(f"volume {v} ml outside [0, {capacity}]")
    if v <= BIN_WIDTH_ML:
        return 0
    return int(math.ceil(v / BIN_WIDTH_ML)) - 1


def bin_volumes(v: np.ndarray, capacity: float = 150.0) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size and (v.min() < 0 or v.max() > capacity):
        raise RangeError(f"volumes outside [0, {capacity}]")
    return np.where(v <= BIN_WIDTH_ML, 0, np.ceil(v / BIN_WIDTH_ML) - 1).astype(np.int64)


def crop_size(image_size: int) -> int:
    return int(round(image_size * CROP_RATIO))


@dataclass
class VolumeDataset:
    """Raw (unnormalised) aligned examples.

    ``images`` is N x 3 x S x S in [0, 1]; ``tactile`` is N x 27.
    """

    images: np.ndarray
    tactile: np.ndarray
    volumes: np.ndarray
    labels: np.ndarray
    trial_ids: np.ndarray
    times: np.ndarray
    capacity: float = 150.0
    seed: int = 0
    scene_config: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.volumes)

    @property
    def n_trials(self) -> int:
        return int(len(np.unique(self.trial_ids)))

    @property
    def image_size(self) -> int:
        return int(self.images.shape[-1])

    def subset(self, idx) -> VolumeDataset:
        idx = np.asarray(idx)
        return VolumeDataset(
            images=self.images[idx],
            tactile=self.tactile[idx],
            volumes=self.volumes[idx],
            labels=self.labels[idx],
            trial_ids=self.trial_ids[idx],
            times=self.times[idx],
            capacity=self.capacity,
            seed=self.seed,
            scene_config=self.scene_config,
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.images, self.tactile, self.volumes, self.labels, self.trial_ids):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def _trial_sizes(n_trials: int, per_trial: float) -> list[int]:
    return [int(math.floor((i + 1) * per_trial)) - int(math.floor(i * per_trial)) for i in range(n_trials)]


def collect(
    config: SceneConfig | None = None,
    n_trials: int = 110,
    seed: int = 0,
    examples_per_trial: float = EXAMPLES_PER_TRIAL,
    grip_range: tuple[float, float] = DEFAULT_GRIP_RANGE,
    volume_range: tuple[float, float] = DEFAULT_VOLUME_RANGE,
) -> VolumeDataset:
    """Run ``n_trials`` grasp-lift-hold trials and record aligned pairs.

    Each trial holds a fixed, pre-measured volume; volumes are stratified over
    ``volume_range`` and shuffled across trials. The gripper closes with a
    trial-specific force, the contact point is perturbed, the cup is lifted
    and held for 5 s while frames are recorded at the sensor rate once the
    lift transient has passed.
    """
    if n_trials < 1:
        raise ValueError(f"n_trials must be >= 1, got {n_trials}")
    config = config or SceneConfig()
    sizes = _trial_sizes(n_trials, examples_per_trial)
    if max(sizes) > HOLD_TICKS:
        raise ValueError("examples_per_trial exceeds the frames available in a 5 s hold")
    rng = np.random.default_rng([seed, 0x5EED])
    order = rng.permutation(n_trials)
    lo, hi = volume_range
    images, tactile, volumes, trials, times = [], [], [], [], []
    for i in range(n_trials):
        trng = np.random.default_rng([seed, i])
        volume = lo + (hi - lo) * (order[i] + trng.random()) / n_trials
        force = trng.uniform(*grip_range)
        scene_seed = int(trng.integers(2**31))
        try:
            scene = scene_init(scene_seed, config, volume=min(volume, config.capacity_ml))
            scene.set_grip(force)
            for _ in range(PRE_LIFT_TICKS):
                scene.step()
            scene.lift()
            keep = set(np.linspace(3, HOLD_TICKS - 1, sizes[i]).round().astype(int).tolist())
            for tick in range(HOLD_TICKS):
                obs = scene.step()
                if tick in keep:
                    images.append(obs.image.transpose(2, 0, 1))
                    tactile.append(obs.tactile)
                    volumes.append(obs.v_gt)
                    trials.append(i)
                    times.append(obs.t)
            scene.close()
        except Exception as exc:
            raise RuntimeError(f"trial {i} failed: {exc}") from exc
    volumes = np.asarray(volumes, dtype=np.float32)
    return VolumeDataset(
        images=np.stack(images).astype(np.float32),
        tactile=np.stack(tactile).astype(np.float32),
        volumes=volumes,
        labels=bin_volumes(volumes, config.capacity_ml),
        trial_ids=np.asarray(trials, dtype=np.int32),
        times=np.asarray(times, dtype=np.float32),
        capacity=config.capacity_ml,
        seed=seed,
        scene_config=config.to_dict(),
    )


# ---------------------------------------------------------------------------
# normalisation


@dataclass
class NormStats:
    image_mean: np.ndarray
    image_std: np.ndarray
    tactile_mean: np.ndarray
    tactile_std: np.ndarray

    def images(self, images: np.ndarray) -> np.ndarray:
        """Standardise N x 3 x H x W images channel-wise."""
        m = self.image_mean.reshape(1, -1, 1, 1)
        s = self.image_std.reshape(1, -1, 1, 1)
        return ((images - m) / s).astype(np.float32)

    def tactile(self, tactile: np.ndarray) -> np.ndarray:
        return ((tactile - self.tactile_mean) / self.tactile_std).astype(np.float32)

    def to_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k), dtype=np.float64).tolist() for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> NormStats:
        return cls(**{k: np.asarray(d[k], dtype=np.float32) for k in cls.__dataclass_fields__})


def _safe_std(std: np.ndarray, what: str) -> np.ndarray:
    flat = std <= 1e-8
    if flat.any():
        warnings.warn(f"{what}: {int(flat.sum())} zero-variance dimension(s); dividing by 1", RuntimeWarning)
    return np.where(flat, 1.0, std)


def fit_stats(data: VolumeDataset, idx=None) -> NormStats:
    """Per-channel image and per-dimension tactile statistics of the given rows."""
    if len(data) == 0:
        raise ValueError("cannot normalise an empty dataset")
    images = data.images if idx is None else data.images[idx]
    tactile = data.tactile if idx is None else data.tactile[idx]
    if len(tactile) == 0:
        raise ValueError("cannot normalise an empty split")
    im = images.astype(np.float64)
    tac = tactile.astype(np.float64)
    return NormStats(
        image_mean=im.mean(axis=(0, 2, 3)).astype(np.float32),
        image_std=_safe_std(im.std(axis=(0, 2, 3)), "image").astype(np.float32),
        tactile_mean=tac.mean(axis=0).astype(np.float32),
        tactile_std=_safe_std(tac.std(axis=0), "tactile").astype(np.float32),
    )


def normalize(data: VolumeDataset, train_idx=None) -> tuple[np.ndarray, np.ndarray, NormStats]:
    """Standardise every example with statistics from the training rows only."""
    stats = fit_stats(data, train_idx)
    return stats.images(data.images), stats.tactile(data.tactile), stats


# ---------------------------------------------------------------------------
# cropping


def augment_crop(image: np.ndarray, crop: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Square crop of a C x H x W image; random position if ``rng`` is given, else centred."""
    h, w = image.shape[-2:]
    if crop >= min(h, w):
        raise ValueError(f"crop {crop} must be smaller than the image ({h}x{w})")
    if rng is None:
        oy, ox = (h - crop) // 2, (w - crop) // 2
    else:
        oy, ox = int(rng.integers(0, h - crop + 1)), int(rng.integers(0, w - crop + 1))
    return image[..., oy : oy + crop, ox : ox + crop]


def crop_batch(images: np.ndarray, crop: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Crop each image of an N x C x H x W batch independently."""
    n, c, h, w = images.shape
    if crop >= min(h, w):
        raise ValueError(f"crop {crop} must be smaller than the image ({h}x{w})")
    if rng is None:
        oy, ox = (h - crop) // 2, (w - crop) // 2
        return np.ascontiguousarray(images[:, :, oy : oy + crop, ox : ox + crop])
    oys = rng.integers(0, h - crop + 1, size=n)
    oxs = rng.integers(0, w - crop + 1, size=n)
    out = np.empty((n, c, crop, crop), dtype=images.dtype)
    for i in range(n):
        out[i] = images[i, :, oys[i] : oys[i] + crop, oxs[i] : oxs[i] + crop]
    return out


# ---------------------------------------------------------------------------
# folds


def kfold_split(n_trials: int, k: int = 3, seed: int = 0) -> np.ndarray:
    """Fold index for each trial id 0..n_trials-1; fold sizes differ by at most one."""
    if k < 2:
        raise SplitError(f"k must be >= 2, got {k}")
    if k > n_trials:
        raise SplitError(f"cannot split {n_trials} trial(s) into {k} folds")
    perm = np.random.default_rng([seed, 0xF01D]).permutation(n_trials)
    folds = np.empty(n_trials, dtype=np.int64)
    folds[perm] = np.arange(n_trials) % k
    return folds


def example_folds(trial_ids: np.ndarray, k: int = 3, seed: int = 0) -> np.ndarray:
    """Per-example fold assignment grouped by trial."""
    uniq, inverse = np.unique(trial_ids, return_inverse=True)
    return kfold_split(len(uniq), k, seed)[inverse]


# ---------------------------------------------------------------------------
# storage


MANIFEST_VERSION = 1


def save_dataset(data: VolumeDataset, out_dir, k: int = 3, fold_seed: int | None = None) -> dict:
    """Write manifest.json plus little-endian float32 blobs; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fold_seed = data.seed if fold_seed is None else fold_seed
    n = len(data)
    targets = np.stack([data.volumes, data.labels, data.trial_ids, data.times], axis=1)
    blobs = {
        "images.f32": data.images,
        "tactile.f32": data.tactile,
        "targets.f32": targets,
    }
    for name, arr in blobs.items():
        (out / name).write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    folds = example_folds(data.trial_ids, k, fold_seed) if data.n_trials >= k else None
    manifest = {
        "version": MANIFEST_VERSION,
        "n_trials": data.n_trials,
        "n_examples": n,
        "seed": data.seed,
        "capacity_ml": data.capacity,
        "n_classes": n_classes(data.capacity),
        "scene_config": data.scene_config,
        "arrays": {
            "images.f32": {"shape": list(data.images.shape), "dtype": "<f4", "order": "C", "axes": "N,C,H,W"},
            "tactile.f32": {"shape": [n, N_TACTILE], "dtype": "<f4", "order": "C", "axes": "N,(Bx,By,Bz)x9 taxel-major"},
            "targets.f32": {"shape": [n, 4], "dtype": "<f4", "order": "C", "columns": ["v_gt_ml", "label", "trial_id", "t_s"]},
        },
        "normalization": fit_stats(data).to_dict(),
        "folds": {"k": k, "seed": fold_seed, "assignment": None if folds is None else folds.tolist()},
        "fingerprint": data.fingerprint(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_dataset(path) -> tuple[VolumeDataset, dict]:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"{root}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    arrays = {}
    for name, entry in manifest["arrays"].items():
        raw = np.frombuffer((root / name).read_bytes(), dtype=entry["dtype"])
        arrays[name] = raw.reshape(entry["shape"]).astype(np.float32)
    targets = arrays["targets.f32"]
    data = VolumeDataset(
        images=arrays["images.f32"],
        tactile=arrays["tactile.f32"],
        volumes=targets[:, 0].copy(),
        labels=targets[:, 1].astype(np.int64),
        trial_ids=targets[:, 2].astype(np.int32),
        times=targets[:, 3].copy(),
        capacity=float(manifest["capacity_ml"]),
        seed=int(manifest["seed"]),
        scene_config=manifest["scene_config"],
    )
    return data, manifest
