"""Visuo-tactile fusion network and the combined multi-task loss."""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .dataset import NormStats, crop_batch, n_classes as default_n_classes
from .errors import ContractError
from .numkit import Tensor

VARIANTS = ("vision", "tactile", "fused")
TASKS = ("classification", "regression", "multitask")
CONV_CHANNELS = (8, 16, 32, 64)
VISION_FEATURES = 512
TACTILE_FEATURES = 27
# uniform init bound is gain / sqrt(fan_in); small heads keep the lambda_2 = 100
# multitask loss inside the stable step size of lr 0.001
INIT_GAIN = {"conv": 1.3, "vis_fc": 0.8, "tac_fc": 1.0, "cls": 0.1, "reg": 0.1}
INPUT_BOUND = 50.0  # |x| beyond this on a standardised input means it was never normalised


@dataclass(frozen=True)
class LossWeights:
    ce: float = 1.0  # lambda_1
    mse: float = 100.0  # lambda_2

    def __post_init__(self):
        if self.ce < 0 or self.mse < 0 or (self.ce == 0 and self.mse == 0):
            raise ValueError("loss weights must be non-negative and not both zero")


def uses_vision(variant: str) -> bool:
    return variant in ("vision", "fused")


def uses_tactile(variant: str) -> bool:
    return variant in ("tactile", "fused")


def class_midpoint(label) -> np.ndarray:
    label = np.asarray(label)
    return np.where(label == 0, 5.5, 10.0 * label + 5.5)


def _vision_flat_size(crop: int) -> int:
    s = crop
    for _ in CONV_CHANNELS:
        s //= 2
    if s < 1:
        raise ValueError(f"crop {crop} too small for {len(CONV_CHANNELS)} pooling stages")
    return CONV_CHANNELS[-1] * s * s


def _param_shapes(variant: str, task: str, n_cls: int, crop: int) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every parameter, in a fixed order."""
    shapes = []
    fused = 0
    if uses_vision(variant):
        c_in = 3
        for i, c_out in enumerate(CONV_CHANNELS):
            shapes.append((f"conv{i}.w", (c_out, c_in, 3, 3), c_in * 9))
            shapes.append((f"conv{i}.b", (c_out,), c_in * 9))
            c_in = c_out
        flat = _vision_flat_size(crop)
        shapes.append(("vis_fc.w", (flat, VISION_FEATURES), flat))
        shapes.append(("vis_fc.b", (VISION_FEATURES,), flat))
        fused += VISION_FEATURES
    if uses_tactile(variant):
        shapes.append(("tac_fc.w", (TACTILE_FEATURES, TACTILE_FEATURES), TACTILE_FEATURES))
        shapes.append(("tac_fc.b", (TACTILE_FEATURES,), TACTILE_FEATURES))
        fused += TACTILE_FEATURES
    if task in ("classification", "multitask"):
        shapes.append(("cls.w", (fused, n_cls), fused))
        shapes.append(("cls.b", (n_cls,), fused))
    if task in ("regression", "multitask"):
        shapes.append(("reg.w", (fused, 1), fused))
        shapes.append(("reg.b", (1,), fused))
    return shapes


class FusionModel:
    """Vision branch, tactile branch, concatenation, classification/regression heads.

    Only the branches and heads the variant and task need are built, so an
    absent modality has no parameters and no influence on the outputs.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        variant: str = "fused",
        task: str = "multitask",
        n_classes: int = 15,
        capacity: float = 150.0,
        crop: int = 21,
        stats: NormStats | None = None,
        weights: LossWeights = LossWeights(),
        scene_config: dict | None = None,
    ):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
        self.params = params
        self.variant = variant
        self.task = task
        self.n_classes = n_classes
        self.capacity = capacity
        self.crop = crop
        self.stats = stats
        self.weights = weights
        self.scene_config = scene_config  # simulator settings the training data came from

    @property
    def fusion_width(self) -> int:
        return VISION_FEATURES * uses_vision(self.variant) + TACTILE_FEATURES * uses_tactile(self.variant)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def _check(self, x: np.ndarray | None, shape: tuple, what: str) -> Tensor:
        if x is None:
            raise ContractError(f"{self.variant} model needs {what} input")
        x = np.asarray(x)
        if x.ndim != len(shape) or any(s is not None and s != d for s, d in zip(shape, x.shape)):
            raise ContractError(f"{what} input has shape {x.shape}, expected {shape}")
        if not np.all(np.isfinite(x)):
            raise ContractError(f"{what} input contains non-finite values")
        if np.abs(x).max(initial=0.0) > INPUT_BOUND:
            raise ContractError(f"{what} input exceeds {INPUT_BOUND} in magnitude; normalise it first")
        dtype = self.params[next(iter(self.params))].dtype
        return Tensor(x.astype(dtype, copy=False))

    def fusion_features(self, images=None, tactile=None) -> Tensor:
        p = self.params
        parts = []
        if uses_vision(self.variant):
            h = self._check(images, (None, 3, self.crop, self.crop), "image")
            for i in range(len(CONV_CHANNELS)):
                # conv -> relu -> pool; relu commutes with max pooling, so apply it on the smaller map
                h = nk.relu(nk.maxpool2(nk.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=1, pad=1)))
            f = nk.linear(nk.flatten(h), p["vis_fc.w"], p["vis_fc.b"])
            parts.append(f)
        if uses_tactile(self.variant):
            t = self._check(tactile, (None, TACTILE_FEATURES), "tactile")
            f = nk.linear(t, p["tac_fc.w"], p["tac_fc.b"])
            parts.append(f)
        return nk.concat(parts, axis=1)

    def forward(self, images=None, tactile=None) -> tuple[Tensor | None, Tensor | None]:
        """Return ``(logits, volume)``; either is None when the task lacks that head.

        ``volume`` is the regression output in capacity-normalised units.
        """
        z = self.fusion_features(images, tactile)
        p = self.params
        logits = volume = None
        if "cls.w" in p:
            logits = nk.linear(z, p["cls.w"], p["cls.b"])
        if "reg.w" in p:
            out = nk.linear(z, p["reg.w"], p["reg.b"])
            volume = nk.reshape(out, (out.shape[0],))
        return logits, volume

    __call__ = forward

    def descriptor(self) -> dict:
        return {
            "variant": self.variant,
            "task": self.task,
            "n_classes": self.n_classes,
            "capacity_ml": self.capacity,
            "crop": self.crop,
            "loss_weights": {"ce": self.weights.ce, "mse": self.weights.mse},
            "normalization": None if self.stats is None else self.stats.to_dict(),
            "scene_config": self.scene_config,
        }

    def save(self, path, seed: int = 0, epoch: int = 0, extra: dict | None = None) -> None:
        meta = {"model": self.descriptor(), "seed": seed, "epoch": epoch}
        if extra:
            meta.update(extra)
        nk.save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> FusionModel:
        arrays, header = nk.load_checkpoint(path)
        d = header["model"]
        stats = None if d["normalization"] is None else NormStats.from_dict(d["normalization"])
        params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return cls(
            params,
            variant=d["variant"],
            task=d["task"],
            n_classes=d["n_classes"],
            capacity=d["capacity_ml"],
            crop=d["crop"],
            stats=stats,
            weights=LossWeights(**d["loss_weights"]),
            scene_config=d.get("scene_config"),
        )


def init_params(
    seed: int,
    variant: str = "fused",
    task: str = "multitask",
    n_classes: int | None = None,
    capacity: float = 150.0,
    crop: int = 21,
    dtype=np.float32,
    weights: LossWeights = LossWeights(),
) -> FusionModel:
    """Seeded fan-in-scaled uniform initialisation.

    Weights are uniform in +-gain / sqrt(fan_in) with a per-layer gain from
    ``INIT_GAIN``; biases start at zero. Each parameter draws from its own
    stream keyed on its name, so a branch starts identical across variants.
    """
    if variant not in VARIANTS or task not in TASKS:
        raise ValueError(f"unknown variant/task {variant!r}/{task!r}")
    n_cls = default_n_classes(capacity) if n_classes is None else n_classes
    params = {}
    for name, shape, fan_in in _param_shapes(variant, task, n_cls, crop):
        if name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            bound = INIT_GAIN[name.split(".")[0].rstrip("0123456789")] / np.sqrt(fan_in)
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return FusionModel(params, variant, task, n_cls, capacity, crop, weights=weights)


def overall_loss(
    logits: Tensor | None,
    volume_pred: Tensor | None,
    labels,
    targets,
    weights: LossWeights = LossWeights(),
    task: str = "multitask",
) -> Tensor:
    """Training loss for the given task.

    multitask -> ce * CE + mse * MSE; classification -> CE; regression -> MSE.
    ``targets`` are capacity-normalised volumes.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    ce = mse = None
    if task in ("classification", "multitask"):
        if logits is None:
            raise ContractError(f"{task} loss needs classification logits")
        ce = nk.cross_entropy_loss(logits, labels)
    if task in ("regression", "multitask"):
        if volume_pred is None:
            raise ContractError(f"{task} loss needs the regression output")
        mse = nk.mse_loss(volume_pred, np.asarray(targets, dtype=volume_pred.dtype))
    if task == "classification":
        return ce
    if task == "regression":
        return mse
    return combine_losses(ce, mse, weights)


def combine_losses(ce: Tensor, mse: Tensor, weights: LossWeights = LossWeights()) -> Tensor:
    """``ce_weight * ce + mse_weight * mse`` on already reduced scalar losses."""
    return ce * weights.ce + mse * weights.mse


def decode_volume(model: FusionModel, logits: Tensor | None, volume: Tensor | None) -> np.ndarray:
    """Head outputs -> millilitres, clamped to [0, capacity]."""
    if volume is not None:
        ml = volume.data.astype(np.float64) * model.capacity
    else:
        ml = class_midpoint(logits.data.argmax(axis=1))
    return np.clip(ml, 0.0, model.capacity)


def prepare_inputs(model: FusionModel, images=None, tactile=None):
    """Normalise raw N x 3 x S x S images / N x 27 tactile and centre-crop the images."""
    if model.stats is None:
        raise ContractError("model has no normalisation statistics; train it or attach stats")
    im = tac = None
    if uses_vision(model.variant):
        im = crop_batch(model.stats.images(np.asarray(images, dtype=np.float32)), model.crop)
    if uses_tactile(model.variant):
        tac = model.stats.tactile(np.asarray(tactile, dtype=np.float32))
    return im, tac


def predict_volumes(model: FusionModel, images=None, tactile=None, batch_size: int = 256) -> np.ndarray:
    """Volume estimates in ml for raw (unnormalised, uncropped) inputs."""
    n = len(images) if images is not None else len(tactile)
    out = np.empty(n)
    with nk.no_grad():
        for start in range(0, n, batch_size):
            sl = slice(start, start + batch_size)
            im, tac = prepare_inputs(
                model,
                None if images is None else images[sl],
                None if tactile is None else tactile[sl],
            )
            out[sl] = decode_volume(model, *model.forward(im, tac))
    return out


def predict_volume(model: FusionModel, observation) -> float:
    """Estimate f(s) for one simulator observation."""
    image = np.asarray(observation.image).transpose(2, 0, 1)[None]
    tactile = np.asarray(observation.tactile)[None]
    return float(predict_volumes(model, image, tactile)[0])
