"""Synthetic grasp rig: deformable cup, inflow pump, 3x3 Hall taxel pad, camera.

The tactile and optical models are deliberately simple. Liquid weight shows
up as shear (Bx) on the taxels once the cup is lifted, grip force shows up as
normal flux (Bz), and the camera sees a fill level proportional to volume.
Each grasp adds its own errors: a tangential preload on the pad, a tilt of
the cup that shifts the visible level, and liquid displaced by the fingers in
proportion to grip force. Neither modality can undo its own share, but the
other modality can.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, LifecycleError, RangeError, StateError

N_TAXELS = 9
N_TACTILE = 3 * N_TAXELS
GRAVITY = 9.81
WATER_DENSITY_KG_PER_ML = 1e-3
LOAD_SHARE = 0.5  # one of the two fingers carries the sensor
SPIKE_PROFILE = (1.0, 0.5, 0.25)

# taxel centres in taxel-pitch units, row-major over the 3x3 pad
_TAXEL_UV = np.array([(u, v) for v in (-1.0, 0.0, 1.0) for u in (-1.0, 0.0, 1.0)])

LIQUID_RGB = np.array([0.15, 0.30, 0.70])
EMPTY_RGB = np.array([0.90, 0.90, 0.93])
WALL_RGB = np.array([0.25, 0.25, 0.28])
BACKGROUND_RGB = np.array([0.70, 0.68, 0.62])
# cup interior as fractions of the frame
CUP_TOP, CUP_BOTTOM = 0.04, 0.96
CUP_HALF_WIDTH = 0.42
FULL_LEVEL = 0.8  # nominal capacity fills this fraction of the interior height


@dataclass
class SceneConfig:
    capacity_ml: float = 150.0
    flow_rate_ml_s: float = 10.0
    sensor_hz: float = 10.0
    image_size: int = 24
    tactile_noise: float = 1.0
    pixel_noise: float = 0.1
    baseline_common: float = 0.5
    baseline_spread: float = 0.3
    contact_jitter: float = 0.25
    footprint_sigma: float = 0.8
    normal_gain: float = 1.0
    shear_snr: float = 80.0
    spike_amplitude: float = 40.0
    max_grip_force: float = 40.0
    stiffness: float = 12.0
    squeeze_ml_per_n: float = 0.4  # liquid displaced by the finger indentation
    lateral_jitter_px: int = 2
    lighting_spread: float = 0.08
    shear_gain_spread: float = 0.0  # per-grasp relative spread of the pad's shear sensitivity
    shear_preload_ml: float = 5.0  # per-grasp tangential preload, as the load of this much liquid
    level_offset_ml: float = 5.0  # per-grasp tilt of the cup in the hand, as an apparent volume
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.capacity_ml > 0:
            raise ConfigError(f"capacity_ml must be positive, got {self.capacity_ml}")
        if not self.flow_rate_ml_s > 0:
            raise ConfigError(f"flow_rate_ml_s must be positive, got {self.flow_rate_ml_s}")
        if not self.sensor_hz > 0:
            raise ConfigError(f"sensor_hz must be positive, got {self.sensor_hz}")
        if int(self.image_size) < 16:
            raise ConfigError(f"image_size must be at least 16, got {self.image_size}")
        if not self.max_grip_force > 0:
            raise ConfigError("max_grip_force must be positive")
        for name in ("tactile_noise", "pixel_noise", "baseline_common", "baseline_spread", "contact_jitter", "shear_gain_spread", "squeeze_ml_per_n",
                     "shear_preload_ml", "level_offset_ml"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    @property
    def dt(self) -> float:
        return 1.0 / self.sensor_hz

    @property
    def shear_gain(self) -> float:
        """Flux units per newton of shear; full-cup weight maps to ``shear_snr`` noise sigmas."""
        full_weight = WATER_DENSITY_KG_PER_ML * GRAVITY * self.capacity_ml
        return self.shear_snr * max(self.tactile_noise, 1e-12) / full_weight

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> SceneConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> SceneConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ContainerState:
    volume: float = 0.0
    capacity: float = 150.0
    grip_force: float = 0.0
    lifted: bool = False
    contact_offset: tuple[float, float] = (0.0, 0.0)


@dataclass
class PumpState:
    on: bool = False
    flow_rate: float = 10.0


@dataclass
class Observation:
    """One aligned camera/tactile pair, with the ground-truth volume alongside."""

    image: np.ndarray  # H x W x 3, values in [0, 1]
    tactile: np.ndarray  # 27 values, (Bx, By, Bz) per taxel, taxel-major
    t: float
    v_gt: float = float("nan")


def bx(tactile: np.ndarray) -> np.ndarray:
    return np.asarray(tactile)[..., 0::3]


def by(tactile: np.ndarray) -> np.ndarray:
    return np.asarray(tactile)[..., 1::3]


def bz(tactile: np.ndarray) -> np.ndarray:
    return np.asarray(tactile)[..., 2::3]


def nominal_baseline() -> np.ndarray:
    """Fixed zero-load flux pattern of the pad (the magnet film's own field)."""
    rng = np.random.default_rng(20210)
    base = np.empty((N_TAXELS, 3))
    base[:, 0] = 15.0 + 3.0 * rng.standard_normal(N_TAXELS)
    base[:, 1] = -10.0 + 3.0 * rng.standard_normal(N_TAXELS)
    base[:, 2] = 300.0 + 10.0 * rng.standard_normal(N_TAXELS)
    return base.reshape(-1)


def footprint(offset, sigma: float) -> np.ndarray:
    d2 = ((_TAXEL_UV - np.asarray(offset, dtype=float)) ** 2).sum(axis=1)
    return np.exp(-d2 / (2.0 * sigma * sigma))


class Scene:
    """One grasp trial. Owned by a single caller; not thread safe."""

    def __init__(self, config: SceneConfig, seed: int, volume: float = 0.0, contact_offset=None):
        self.config = config
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        rng = self.rng
        common = config.baseline_common * rng.standard_normal()
        self.baseline = nominal_baseline() + common + config.baseline_spread * rng.standard_normal(N_TACTILE)
        if contact_offset is None:
            contact_offset = np.clip(config.contact_jitter * rng.standard_normal(2), -0.5, 0.5)
        self.jitter_px = int(rng.integers(-config.lateral_jitter_px, config.lateral_jitter_px + 1))
        self.lighting = 1.0 + config.lighting_spread * (2.0 * rng.random() - 1.0)
        # pad compliance differs from grasp to grasp
        self.shear_scale = max(1.0 + config.shear_gain_spread * rng.standard_normal(), 0.5)
        self.preload_ml = config.shear_preload_ml * rng.standard_normal()
        self.level_offset = config.level_offset_ml * rng.standard_normal()
        if not 0.0 <= volume <= config.capacity_ml:
            raise RangeError(f"initial volume {volume} outside [0, {config.capacity_ml}]")
        self.state = ContainerState(
            volume=float(volume),
            capacity=config.capacity_ml,
            contact_offset=(float(contact_offset[0]), float(contact_offset[1])),
        )
        self.pump = PumpState(on=False, flow_rate=config.flow_rate_ml_s)
        self.tick = 0
        self.t = 0.0
        self.closed = False
        self._spike_left = 0
        self._weights = footprint(self.state.contact_offset, config.footprint_sigma)

    # -- actuation ---------------------------------------------------------

    def set_pump(self, on: bool) -> None:
        self._check_open()
        self.pump.on = bool(on)

    def set_grip(self, force: float) -> None:
        self._check_open()
        force = float(force)
        if not 0.0 <= force <= self.config.max_grip_force:
            raise RangeError(f"grip force {force} N outside [0, {self.config.max_grip_force}]")
        self.state.grip_force = force

    def lift(self) -> None:
        self._check_open()
        if self.state.grip_force <= 0:
            raise StateError("cannot lift: the container is not grasped")
        if not self.state.lifted:
            self.state.lifted = True
            self._spike_left = len(SPIKE_PROFILE)

    def close(self) -> None:
        self.closed = True

    # -- sensing -----------------------------------------------------------

    def step(self, dt: float | None = None) -> Observation:
        self._check_open()
        dt = self.config.dt if dt is None else float(dt)
        if not dt > 0:
            raise ValueError(f"dt must be positive, got {dt}")
        if self.pump.on:
            self.state.volume = min(self.state.volume + self.pump.flow_rate * dt, self.state.capacity)
        self.tick += 1
        self.t += dt
        tactile = self.tactile()
        image = self.render()
        if self._spike_left:
            self._spike_left -= 1
        return Observation(image=image, tactile=tactile, t=self.t, v_gt=self.state.volume)

    def tactile_mean(self) -> np.ndarray:
        """Noise-free flux the pad would read right now."""
        cfg = self.config
        s = self.state
        w = self._weights
        signal = np.zeros((N_TAXELS, 3))
        signal[:, 2] = cfg.normal_gain * s.grip_force * w
        if s.grip_force > 0:
            preload = LOAD_SHARE * WATER_DENSITY_KG_PER_ML * GRAVITY * self.preload_ml
            signal[:, 0] = cfg.shear_gain * preload * w
        if s.lifted:
            load = LOAD_SHARE * WATER_DENSITY_KG_PER_ML * GRAVITY * s.volume
            signal[:, 0] += cfg.shear_gain * self.shear_scale * load * w
            if self._spike_left:
                k = len(SPIKE_PROFILE) - self._spike_left
                signal[:, 0] += cfg.spike_amplitude * SPIKE_PROFILE[k] * w
        return self.baseline + signal.reshape(-1)

    def tactile(self) -> np.ndarray:
        noise = self.config.tactile_noise * self.rng.standard_normal(N_TACTILE)
        return (self.tactile_mean() + noise).astype(np.float32)

    def render(self) -> np.ndarray:
        self._check_open()
        clean = render_container(
            self.config,
            self.state.volume,
            self.state.grip_force,
            self.jitter_px,
            self.lighting,
            self.level_offset,
        )
        if self.config.pixel_noise > 0:
            clean = clean + self.config.pixel_noise * self.rng.standard_normal(clean.shape)
        return np.clip(clean, 0.0, 1.0).astype(np.float32)

    def _check_open(self) -> None:
        if self.closed:
            raise LifecycleError("scene is closed")


def scene_init(seed: int, config: SceneConfig | None = None, volume: float = 0.0, contact_offset=None) -> Scene:
    config = config or SceneConfig()
    config.validate()
    return Scene(config, seed, volume=volume, contact_offset=contact_offset)


# ---------------------------------------------------------------------------
# camera model


def interior_rows(size: int) -> tuple[int, int]:
    """First and one-past-last image rows of the cup's interior."""
    return round(CUP_TOP * size), round(CUP_BOTTOM * size)


def fill_height(config: SceneConfig, volume: float, grip_force: float = 0.0, offset_ml: float = 0.0) -> float:
    """Liquid column height in rows.

    The fingers' indentation displaces liquid and lifts the level; a tilted
    cup shifts where the level meets the wall by ``offset_ml`` worth of volume.
    """
    top, bottom = interior_rows(config.image_size)
    volume = min(max(volume, 0.0), config.capacity_ml)
    apparent = volume + min(config.squeeze_ml_per_n * grip_force, volume) + min(max(offset_ml, -volume), volume)
    return (bottom - top) * min(FULL_LEVEL * apparent / config.capacity_ml, 1.0)


def fill_rows(config: SceneConfig, volume: float, grip_force: float = 0.0) -> int:
    """Number of interior rows that contain any liquid."""
    return int(math.ceil(fill_height(config, volume, grip_force) - 1e-9))


def bulge_px(config: SceneConfig, grip_force: float) -> float:
    return 2.0 * grip_force / config.stiffness * config.image_size / 32.0


def render_container(
    config: SceneConfig,
    volume: float,
    grip_force: float,
    jitter_px: int = 0,
    lighting: float = 1.0,
    offset_ml: float = 0.0,
):
    """Noise-free H x W x 3 view of the cup from the wrist camera."""
    size = int(config.image_size)
    img = np.empty((size, size, 3))
    img[:] = BACKGROUND_RGB
    top, bottom = interior_rows(size)
    height = bottom - top
    cx = size / 2.0 + jitter_px
    half = CUP_HALF_WIDTH * size
    h_fill = fill_height(config, volume, grip_force, offset_ml)
    squeeze = bulge_px(config, grip_force)
    cols = np.arange(size) + 0.5
    for r in range(top, bottom):
        depth = (r - top + 0.5) / height
        inward = squeeze * math.sin(math.pi * depth)
        left, right = cx - half + inward, cx + half - inward
        inside = (cols > left + 1) & (cols < right - 1)
        wall = (cols >= left) & (cols <= right) & ~inside
        # fraction of this row below the liquid surface
        below = bottom - r
        frac = min(max(h_fill - (below - 1), 0.0), 1.0)
        img[r, inside] = frac * LIQUID_RGB + (1.0 - frac) * EMPTY_RGB
        img[r, wall] = WALL_RGB
    base_left, base_right = cx - half, cx + half
    img[bottom, (cols >= base_left) & (cols <= base_right)] = WALL_RGB
    return np.clip(img * lighting, 0.0, 1.0)
