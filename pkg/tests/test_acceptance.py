"""Acceptance suite: one marked group per criterion, summarised at the end of the run."""

import math
import time

import numpy as np
import pytest

from visuotactile import cli
from visuotactile import numkit as nk
from visuotactile.control import GraspPlan, batch_eval, grasp_adjust, oracle_estimator, pump_policy
from visuotactile.dataset import bin_volume, collect, kfold_split
from visuotactile.model import LossWeights, combine_losses, init_params, overall_loss
from visuotactile.numkit import LrSchedule, Tensor, lr_at
from visuotactile.simworld import SceneConfig
from visuotactile.trainkit import TrainConfig, train, variant_matrix

N_SHAPES = 20
FD_STEP = 1e-3
MATRIX_SEEDS = (0, 1, 2)
MATRIX_EPOCHS = 45
MATRIX_BUDGET_S = 1800.0
FILL_EPOCHS = 45

_grad_seconds: list[float] = []


# ---------------------------------------------------------------------------
# 1. gradients


def _leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, dtype=np.float64)


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


def _distinct(rng, shape):
    """Values whose pairwise gaps exceed the step, so no max switches under a nudge."""
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) - n / 2) * 0.01


def _fd_check(build, leaves, h=FD_STEP, tol=1e-4):
    build().backward()
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad.copy()
        leaf.grad = None
        numeric = np.zeros_like(leaf.data)
        flat, nflat = leaf.data.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = build().item()
            flat[i] = old - h
            down = build().item()
            flat[i] = old
            nflat[i] = (up - down) / (2 * h)
        scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
        worst = max(worst, float(np.abs(analytic - numeric).max() / scale))
    assert worst < tol
    return worst


def _layer_case(layer, rng):
    if layer == "linear":
        b, i, o = rng.integers(1, 7, size=3)
        x, w, bias = _leaf(rng.standard_normal((b, i))), _leaf(rng.standard_normal((i, o))), _leaf(rng.standard_normal(o))
        wts = rng.standard_normal((b, o))
        return lambda: _weighted(nk.linear(x, w, bias), wts), [x, w, bias]
    if layer == "conv2d":
        b, c, f = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 5)
        h, w = rng.integers(3, 8, size=2)
        pad, stride = int(rng.integers(0, 2)), int(rng.integers(1, 3))
        x, k, bias = _leaf(rng.standard_normal((b, c, h, w))), _leaf(rng.standard_normal((f, c, 3, 3))), _leaf(rng.standard_normal(f))
        ho, wo = (h + 2 * pad - 3) // stride + 1, (w + 2 * pad - 3) // stride + 1
        wts = rng.standard_normal((b, f, ho, wo))
        return lambda: _weighted(nk.conv2d(x, k, bias, stride=stride, pad=pad), wts), [x, k, bias]
    if layer == "relu":
        shape = tuple(rng.integers(1, 6, size=int(rng.integers(1, 4))))
        x = _leaf(_away_from_zero(rng, shape))
        wts = rng.standard_normal(shape)
        return lambda: _weighted(nk.relu(x), wts), [x]
    if layer == "maxpool2":
        b, c = rng.integers(1, 3, size=2)
        h, w = rng.integers(2, 9, size=2)
        x = _leaf(_distinct(rng, (b, c, h, w)))
        wts = rng.standard_normal((b, c, h // 2, w // 2))
        return lambda: _weighted(nk.maxpool2(x), wts), [x]
    if layer == "flatten":
        shape = tuple(rng.integers(1, 5, size=int(rng.integers(2, 5))))
        x = _leaf(rng.standard_normal(shape))
        wts = rng.standard_normal((shape[0], int(np.prod(shape[1:]))))
        return lambda: _weighted(nk.flatten(x), wts), [x]
    if layer == "concat":
        b = int(rng.integers(1, 5))
        a, c = _leaf(rng.standard_normal((b, int(rng.integers(1, 6))))), _leaf(rng.standard_normal((b, int(rng.integers(1, 6)))))
        wts = rng.standard_normal((b, a.shape[1] + c.shape[1]))
        return lambda: _weighted(nk.concat([a, c]), wts), [a, c]
    if layer == "cross_entropy":
        b, n = int(rng.integers(1, 6)), int(rng.integers(2, 16))
        x = _leaf(3 * rng.standard_normal((b, n)))
        labels = rng.integers(0, n, size=b)
        return lambda: nk.cross_entropy_loss(x, labels), [x]
    if layer == "mse":
        b = int(rng.integers(1, 9))
        x, y = _leaf(rng.standard_normal(b)), rng.standard_normal(b)
        return lambda: nk.mse_loss(x, y), [x]
    raise KeyError(layer)


def _weighted(out, wts):
    """Fixed random linear functional of ``out`` so every output entry contributes."""
    return nk.total(nk._result(out.data * wts, (out,), lambda g: (g * wts,)))


LAYERS = ["linear", "conv2d", "relu", "maxpool2", "flatten", "concat", "cross_entropy", "mse"]


@pytest.mark.criterion(1, "gradient correctness")
@pytest.mark.parametrize("layer", LAYERS)
def test_layer_gradients_match_finite_differences(layer):
    t0 = time.perf_counter()
    for i in range(N_SHAPES):
        rng = np.random.default_rng([1, LAYERS.index(layer), i])
        build, leaves = _layer_case(layer, rng)
        _fd_check(build, leaves)
    _grad_seconds.append(time.perf_counter() - t0)


def _end_to_end_case(rng, variant):
    crop = int(rng.integers(16, 20))
    batch = int(rng.integers(1, 4))
    model = init_params(int(rng.integers(1000)), variant, "multitask", crop=crop, dtype=np.float64)
    images = rng.standard_normal((batch, 3, crop, crop))
    tactile = rng.standard_normal((batch, 27))
    labels, targets = rng.integers(0, 15, batch), rng.random(batch)

    def loss():
        logits, vol = model.forward(images, tactile)
        return overall_loss(logits, vol, labels, targets, LossWeights(1.0, 100.0))

    return model, loss


@pytest.mark.criterion(1, "gradient correctness")
@pytest.mark.parametrize("variant", ["fused", "vision", "tactile"])
def test_overall_loss_gradients_end_to_end(variant):
    # perturbing a weight moves many ReLU inputs at once; a small step keeps all of
    # them on the same side of the kink
    h = 1e-6
    t0 = time.perf_counter()
    for i in range(N_SHAPES):
        rng = np.random.default_rng([2, i, len(variant)])
        model, loss = _end_to_end_case(rng, variant)
        loss().backward()
        for name, p in model.params.items():
            analytic = p.grad.reshape(-1).copy()
            p.grad = None
            flat = p.data.reshape(-1)
            picks = rng.choice(flat.size, size=min(4, flat.size), replace=False)
            numeric = np.empty(len(picks))
            for j, k in enumerate(picks):
                old = flat[k]
                flat[k] = old + h
                up = loss().item()
                flat[k] = old - h
                down = loss().item()
                flat[k] = old
                numeric[j] = (up - down) / (2 * h)
            ana = analytic[picks]
            scale = max(np.abs(ana).max(), np.abs(numeric).max(), 1e-8)
            assert np.abs(ana - numeric).max() / scale < 1e-4, (name, i)
    _grad_seconds.append(time.perf_counter() - t0)


@pytest.mark.criterion(1, "gradient correctness")
def test_gradient_checks_fit_the_time_budget(note):
    assert len(_grad_seconds) == len(LAYERS) + 3, "run the whole gradient group"
    total = sum(_grad_seconds)
    note(f"{total:.1f} s")
    assert total < 60.0


# ---------------------------------------------------------------------------
# 2. loss identities


@pytest.mark.criterion(2, "loss identities")
def test_loss_identities():
    uniform = Tensor(np.zeros((1, 15)), dtype=np.float64)
    assert abs(nk.cross_entropy_loss(uniform, [3]).item() - math.log(15)) < 1e-9
    x = Tensor(np.random.default_rng(0).standard_normal(9), dtype=np.float64)
    assert nk.mse_loss(x, x.data.copy()).item() == 0.0
    ce, mse = Tensor(np.float64(2.0), dtype=np.float64), Tensor(np.float64(0.01), dtype=np.float64)
    assert combine_losses(ce, mse, LossWeights(1.0, 100.0)).item() == 3.0


# ---------------------------------------------------------------------------
# 3. schedule


@pytest.mark.criterion(3, "schedule exactness")
def test_schedule_is_bit_exact():
    s = LrSchedule(0.001, (40, 70), 0.1)
    for epoch in range(100):
        want = 0.001 if epoch < 40 else (0.0001 if epoch < 70 else 0.00001)
        assert lr_at(s, epoch) == want, epoch


# ---------------------------------------------------------------------------
# 4. binning


@pytest.mark.criterion(4, "binning")
def test_binning_examples_and_monotone_sweep():
    for v, c in [(5, 0), (10, 0), (11, 1), (20, 1), (142, 14)]:
        assert bin_volume(v) == c
    sweep = [bin_volume(i / 10) for i in range(1501)]
    assert all(a <= b for a, b in zip(sweep, sweep[1:]))


# ---------------------------------------------------------------------------
# 5. folds


@pytest.mark.criterion(5, "fold hygiene")
@pytest.mark.parametrize("seed", [0, 1, 7])
def test_trial_grouped_folds(seed):
    folds = kfold_split(110, 3, seed)
    assert len(folds) == 110 and set(folds.tolist()) == {0, 1, 2}
    assert sorted(np.bincount(folds).tolist()) == [36, 37, 37]
    # each trial id carries exactly one fold; examples inherit it
    trial_ids = np.repeat(np.arange(110), 3)
    per_example = folds[trial_ids]
    for t in range(110):
        assert len(set(per_example[trial_ids == t].tolist())) == 1
    members = [set(np.flatnonzero(folds == f).tolist()) for f in range(3)]
    assert not (members[0] & members[1]) and not (members[0] & members[2]) and not (members[1] & members[2])
    assert members[0] | members[1] | members[2] == set(range(110))


# ---------------------------------------------------------------------------
# 6. table structure


@pytest.fixture(scope="module")
def default_data():
    return collect(SceneConfig(), seed=0)


@pytest.fixture(scope="module")
def matrix_reports(default_data):
    t0 = time.perf_counter()
    reports = [variant_matrix(default_data, TrainConfig(epochs=MATRIX_EPOCHS, seed=s)) for s in MATRIX_SEEDS]
    return reports, time.perf_counter() - t0


def _seed_verdict(report):
    rows_ok = all(
        report.cell("fused", t).mean < min(report.cell("vision", t).mean, report.cell("tactile", t).mean)
        for t in ("classification", "regression", "multitask")
    )
    col = [report.cell("fused", t).mean for t in ("multitask", "regression", "classification")]
    return rows_ok, col[0] <= col[1] <= col[2], col[0] <= 5.0


@pytest.mark.criterion(6, "table structure reproduction")
def test_table_structure(matrix_reports, default_data, note):
    reports, seconds = matrix_reports
    assert 2300 <= len(default_data) <= 2900
    passes = 0
    for seed, report in zip(MATRIX_SEEDS, reports):
        print(f"seed {seed}\n{report.format_table()}")
        verdict = _seed_verdict(report)
        passes += all(verdict)
        note(f"seed {seed}: rows={verdict[0]} column={verdict[1]} mt={report.cell('fused', 'multitask').mean:.2f}")
    note(f"{seconds:.0f} s")
    assert passes >= 2
    assert seconds <= MATRIX_BUDGET_S


# ---------------------------------------------------------------------------
# 7. oracle fill


@pytest.mark.criterion(7, "oracle closed-loop bound")
def test_oracle_fill_within_one_tick(note):
    cfg = SceneConfig()
    assert (cfg.flow_rate_ml_s, cfg.sensor_hz) == (10.0, 10.0)
    results = batch_eval(oracle_estimator, [40.0, 80.0, 120.0, 140.0], n=50, seed=0, config=cfg)
    worst = max(max(r.errors) for r in results)
    note(f"max |E| {worst:.3f} ml")
    assert worst <= 1.0


# ---------------------------------------------------------------------------
# 8. learned fill


@pytest.fixture(scope="module")
def fill_errors(default_data):
    errors = {}
    for variant in ("fused", "vision", "tactile"):
        model = train(TrainConfig(epochs=FILL_EPOCHS, variant=variant, task="multitask", seed=0), default_data).model
        errors[variant] = batch_eval(model, [140.0], n=50, seed=0)[0].mean_error
    return errors


@pytest.mark.criterion(8, "learned closed-loop")
def test_learned_fill_ordering(fill_errors, note):
    note(", ".join(f"{k} {v:.2f}" for k, v in fill_errors.items()))
    assert fill_errors["fused"] <= 5.0
    assert fill_errors["fused"] < fill_errors["vision"]
    assert fill_errors["fused"] < fill_errors["tactile"]


# ---------------------------------------------------------------------------
# 9. policies


@pytest.mark.criterion(9, "grasp and pump policy")
def test_grasp_levels():
    for estimate, direction in [(30.0, "decrease"), (75.0, "unchanged"), (120.0, "increase")]:
        plan = GraspPlan(theta1=50.0, theta2=100.0)
        assert grasp_adjust(plan, estimate).direction == direction


@pytest.mark.criterion(9, "grasp and pump policy")
def test_pump_truth_table():
    grid = np.arange(0.0, 150.5, 2.5)
    for target in grid:
        for estimate in grid:
            assert pump_policy(target, estimate) == (target - estimate > 0)
        assert pump_policy(target, target) is False
        assert pump_policy(target, np.nextafter(target, -np.inf)) is True


# ---------------------------------------------------------------------------
# 10. determinism


def _files(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


@pytest.mark.criterion(10, "determinism")
def test_matrix_and_fill_reports_are_byte_identical(tmp_path):
    data = tmp_path / "data"
    assert cli.main(["gen-data", "--trials", "6", "--seed", "3", "--out", str(data)]) == 0
    assert cli.main(["train", "--data", str(data), "--epochs", "1", "--out", str(tmp_path / "train")]) == 0
    ckpt = tmp_path / "train" / "model.ckpt"
    runs = []
    for name in ("a", "b"):
        m, f, g = tmp_path / name / "matrix", tmp_path / name / "fill", tmp_path / name / "oracle"
        assert cli.main(["matrix", "--data", str(data), "--epochs", "1", "--seed", "5", "--out", str(m)]) == 0
        assert cli.main(["fill", "--model", str(ckpt), "--target-ml", "60", "--n", "3", "--seed", "5", "--out", str(f)]) == 0
        assert cli.main(["fill", "--estimator", "oracle", "--n", "3", "--seed", "5", "--out", str(g)]) == 0
        runs.append({k: _files(d) for k, d in (("matrix", m), ("fill", f), ("oracle", g))})
    for kind in ("matrix", "fill", "oracle"):
        assert runs[0][kind], kind
        assert runs[0][kind] == runs[1][kind], kind
