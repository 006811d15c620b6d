"""Estimator-driven pump switching, lift detection and grip adjustment."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ControlAbort
from .model import FusionModel, predict_volume
from .simworld import Observation, Scene, SceneConfig, bx, bz, scene_init

LIFT_WINDOW = 5
LIFT_KAPPA = 6.0
LIFT_TIMEOUT_TICKS = 50

Estimator = Callable[[Observation], float]


def pump_policy(v_expected: float, v_estimate: float) -> bool:
    """Bang-bang pump command: on while the estimate is still short of the target."""
    return bool(v_expected - v_estimate > 0)


class LiftDetector:
    """Flags the Bx transient that accompanies a successful lift.

    Each tick's change is the taxel-averaged ``|dBx|``; the detector fires when
    it exceeds ``kappa`` times the median change over the previous ``window``
    ticks.
    """

    def __init__(self, window: int = LIFT_WINDOW, kappa: float = LIFT_KAPPA):
        self.window = window
        self.kappa = kappa
        self._prev: np.ndarray | None = None
        self._changes: list[float] = []

    def update(self, tactile) -> bool:
        cur = bx(np.asarray(tactile, dtype=np.float64))
        if self._prev is None:
            self._prev = cur
            return False
        change = float(np.mean(np.abs(cur - self._prev)))
        self._prev = cur
        history = self._changes[-self.window :]
        self._changes.append(change)
        if len(history) < self.window:
            return False
        return change > self.kappa * float(np.median(history))


def detect_lift(stream: Iterable, window: int = LIFT_WINDOW, kappa: float = LIFT_KAPPA) -> int:
    """Index of the first frame of ``stream`` (27-value tactile frames) showing a lift."""
    det = LiftDetector(window, kappa)
    n = 0
    for i, frame in enumerate(stream):
        n = i + 1
        if det.update(frame):
            return i
    raise ControlAbort(f"no lift detected in {n} tactile frames")


@dataclass
class GraspPlan:
    grip_force: float = 15.0
    theta1: float = 50.0
    theta2: float = 100.0
    low: float = 8.0
    mid: float = 15.0
    high: float = 25.0

    def __post_init__(self):
        if not self.theta1 < self.theta2:
            raise ValueError("theta1 must be below theta2")
        if not self.low < self.mid < self.high:
            raise ValueError("force levels must satisfy low < mid < high")


@dataclass(frozen=True)
class GraspAction:
    direction: str  # "decrease" | "unchanged" | "increase"
    delta: float  # newtons, target minus current


def grasp_adjust(plan: GraspPlan, v_estimate: float) -> GraspAction:
    """Map the volume estimate to a discrete grip level and return the force change.

    Below ``theta1`` the grip drops to ``low``; above ``theta2`` it rises to
    ``high``; in between it is left alone. ``plan.grip_force`` is updated.
    """
    if v_estimate < plan.theta1:
        target = plan.low
    elif v_estimate > plan.theta2:
        target = plan.high
    else:
        target = plan.grip_force
    delta = target - plan.grip_force
    plan.grip_force = target
    if delta < 0:
        return GraspAction("decrease", delta)
    if delta > 0:
        return GraspAction("increase", delta)
    return GraspAction("unchanged", 0.0)


@dataclass
class FillTask:
    v_expected: float
    trace: list[dict] = field(default_factory=list)
    lift_tick: int = -1
    v_final_gt: float = float("nan")
    error: float = float("nan")

    @property
    def pump_states(self) -> list[int]:
        return [row["pump"] for row in self.trace]

    def trace_rows(self) -> list[dict]:
        return [
            {k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()}
            for row in self.trace
        ]


def model_estimator(model: FusionModel) -> Estimator:
    return lambda obs: predict_volume(model, obs)


def oracle_estimator(obs: Observation) -> float:
    return float(obs.v_gt)


def _record(task: FillTask, scene: Scene, obs: Observation, v_est: float) -> None:
    task.trace.append(
        {
            "tick": scene.tick,
            "t": float(obs.t),
            "Bx_mean": float(np.mean(bx(obs.tactile))),
            "Bz_mean": float(np.mean(bz(obs.tactile))),
            "v_estimate": float(v_est),
            "v_gt": float(obs.v_gt),
            "pump": int(scene.pump.on),
            "grip_force": float(scene.state.grip_force),
        }
    )


def run_fill(
    scene: Scene,
    estimator: Estimator | FusionModel,
    v_expected: float,
    plan: GraspPlan | None = None,
    max_ticks: int | None = None,
    lift_timeout: int = LIFT_TIMEOUT_TICKS,
) -> FillTask:
    """Lift the grasped cup, then fill it to ``v_expected`` under estimator control.

    Sensing runs at the scene's rate. Before the lift is detected the pump stays
    off and no estimates are made. Afterwards every tick goes observe ->
    estimate -> pump policy -> grip adjustment -> actuate, until the pump is
    switched off.
    """
    if isinstance(estimator, FusionModel):
        estimator = model_estimator(estimator)
    plan = plan or GraspPlan()
    if scene.state.grip_force <= 0:
        scene.set_grip(plan.grip_force)
    cfg = scene.config
    if max_ticks is None:
        max_ticks = int(math.ceil(2 * cfg.capacity_ml / cfg.flow_rate_ml_s * cfg.sensor_hz)) + 20
    task = FillTask(v_expected=float(v_expected))

    detector = LiftDetector()
    for _ in range(LIFT_WINDOW + 1):
        obs = scene.step()
        detector.update(obs.tactile)
        _record(task, scene, obs, float("nan"))
    scene.lift()
    for _ in range(lift_timeout):
        obs = scene.step()
        _record(task, scene, obs, float("nan"))
        if detector.update(obs.tactile):
            task.lift_tick = scene.tick
            break
    else:
        raise ControlAbort(f"lift not detected within {lift_timeout} ticks")

    for _ in range(max_ticks):
        obs = scene.step()
        v_est = float(estimator(obs))
        if not math.isfinite(v_est):
            raise ControlAbort(f"estimator returned {v_est} at tick {scene.tick}")
        _record(task, scene, obs, v_est)
        on = pump_policy(v_expected, v_est)
        grasp_adjust(plan, v_est)
        scene.set_grip(plan.grip_force)
        scene.set_pump(on)
        if not on:
            break
    else:
        raise ControlAbort(f"pump still running after {max_ticks} ticks")

    task.v_final_gt = float(scene.state.volume)
    task.error = abs(task.v_expected - task.v_final_gt)
    return task


@dataclass
class BatchResult:
    v_expected: float
    errors: list[float]
    finals: list[float]

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.errors))

    def histogram(self, bins: Sequence[float] | int = 10) -> tuple[np.ndarray, np.ndarray]:
        return np.histogram(self.errors, bins=bins)


def fill_scene(seed: int, config: SceneConfig | None = None, plan: GraspPlan | None = None) -> Scene:
    """Fresh empty cup grasped at the plan's initial force with a centred contact."""
    scene = scene_init(seed, config, volume=0.0, contact_offset=(0.0, 0.0))
    scene.set_grip((plan or GraspPlan()).grip_force)
    return scene


def batch_eval(
    estimator: Estimator | FusionModel,
    v_expected: Sequence[float],
    n: int = 50,
    seed: int = 0,
    config: SceneConfig | None = None,
    keep_tasks: bool = False,
) -> list[BatchResult] | tuple[list[BatchResult], list[list[FillTask]]]:
    """Run ``n`` seeded fill tasks per target volume and collect the errors."""
    if n < 1:
        raise ValueError("n must be >= 1")
    results, all_tasks = [], []
    for target in v_expected:
        errors, finals, tasks = [], [], []
        for i in range(n):
            run_seed = int(np.random.default_rng([seed, int(round(target * 1000)), i]).integers(2**31))
            plan = GraspPlan()
            scene = fill_scene(run_seed, config, plan)
            try:
                task = run_fill(scene, estimator, target, plan)
            except ControlAbort as exc:
                raise ControlAbort(f"run {i} (target {target} ml): {exc}") from exc
            errors.append(task.error)
            finals.append(task.v_final_gt)
            if keep_tasks:
                tasks.append(task)
        results.append(BatchResult(float(target), errors, finals))
        all_tasks.append(tasks)
    return (results, all_tasks) if keep_tasks else results
