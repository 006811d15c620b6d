import json
import math

import numpy as np
import pytest

from visuotactile import trainkit as T
from visuotactile.dataset import example_folds
from visuotactile.errors import NumericError, SplitError
from visuotactile.model import init_params
from visuotactile.numkit import LrSchedule
from visuotactile.trainkit import CellResult, TrainConfig


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        TrainConfig(variant="sonar")
    with pytest.raises(ValueError):
        TrainConfig(task="ranking")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    cfg = TrainConfig(epochs=7, seed=3, schedule=LrSchedule(0.01, (2, 5), 0.5))
    back = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
    assert TrainConfig().batch_size == 32 and TrainConfig().epochs == 100


def test_zero_epochs_returns_init(small_data):
    res = T.train(TrainConfig(epochs=0, seed=4), small_data)
    ref = init_params(4, crop=res.model.crop)
    assert res.loss_curve == []
    for k, p in ref.params.items():
        assert np.array_equal(p.data, res.model.params[k].data)


def test_training_is_deterministic_and_reduces_loss(small_data):
    cfg = TrainConfig(epochs=8, seed=1, variant="fused", task="multitask")
    a = T.train(cfg, small_data)
    b = T.train(cfg, small_data)
    for k in a.model.params:
        assert np.array_equal(a.model.params[k].data, b.model.params[k].data)
    assert a.loss_curve == b.loss_curve
    assert a.loss_curve[-1] < 0.5 * a.loss_curve[0]


def test_seed_changes_the_result(small_data):
    a = T.train(TrainConfig(epochs=1, seed=1, variant="tactile"), small_data)
    b = T.train(TrainConfig(epochs=1, seed=2, variant="tactile"), small_data)
    assert not np.array_equal(a.model.params["tac_fc.w"].data, b.model.params["tac_fc.w"].data)


def test_checkpoint_carries_stats_and_scene(small_data):
    model = T.train(TrainConfig(epochs=0), small_data).model
    assert model.stats is not None
    assert model.scene_config == small_data.scene_config


def test_divergence_is_reported(small_data):
    cfg = TrainConfig(epochs=3, schedule=LrSchedule(start_lr=1e4), variant="tactile")
    with np.errstate(all="ignore"), pytest.raises(NumericError, match="epoch"):
        T.train(cfg, small_data)


class _Fake:
    def __init__(self, volumes):
        self.volumes = np.asarray(volumes, dtype=np.float64)
        self.images = np.zeros((len(self.volumes), 1))
        self.tactile = np.zeros((len(self.volumes), 1))

    def __len__(self):
        return len(self.volumes)


def test_error_metric_oracles(monkeypatch):
    data = _Fake(np.linspace(10.0, 150.0, 140_001))
    monkeypatch.setattr(T, "predict_volumes", lambda m, im, tac: data.volumes.copy())
    assert T.eval_ml_error(None, data) == 0.0
    monkeypatch.setattr(T, "predict_volumes", lambda m, im, tac: np.full(len(data), 75.0))
    # E|U - 75| for U ~ Uniform(10, 150)
    assert T.eval_ml_error(None, data) == pytest.approx((65**2 + 75**2) / (2 * 140), abs=1e-3)
    with pytest.raises(ValueError):
        T.eval_ml_error(None, _Fake([]))


def test_cell_statistics():
    c = CellResult("fused", "multitask", [1.0, 2.0, 4.0])
    assert c.mean == pytest.approx(7 / 3)
    assert c.stderr == pytest.approx(np.std([1.0, 2.0, 4.0], ddof=1) / math.sqrt(3))
    assert CellResult("fused", "multitask", [3.0]).stderr == 0.0


def test_fold_leakage_is_refused(small_data):
    folds = example_folds(small_data.trial_ids, 3, 0)
    bad = folds.copy()
    first = np.flatnonzero(small_data.trial_ids == small_data.trial_ids[0])
    bad[first[0]] = (bad[first[0]] + 1) % 3
    with pytest.raises(SplitError):
        T.run_fold(small_data, TrainConfig(epochs=0), bad, 0)


def test_no_test_trial_is_trained_on(small_data):
    folds = example_folds(small_data.trial_ids, 3, 0)
    for f in range(3):
        tr, te = T._fold_indices(small_data, folds, f)
        assert not set(small_data.trial_ids[tr]) & set(small_data.trial_ids[te])
        assert len(tr) + len(te) == len(small_data)


def test_cross_validate_trains_k_models(small_data, monkeypatch):
    calls = []
    real = T.train

    def spy(cfg, data, stats=None):
        calls.append(len(data))
        return real(cfg, data, stats)

    monkeypatch.setattr(T, "train", spy)
    cell = T.cross_validate(small_data, TrainConfig(epochs=1, variant="tactile"), k=3)
    assert len(calls) == 3 and len(cell.fold_errors) == 3
    assert all(e >= 0 for e in cell.fold_errors)


@pytest.fixture(scope="module")
def tiny_report(small_data):
    return T.variant_matrix(small_data, TrainConfig(epochs=1, seed=5), k=3, workers=1)


def test_matrix_has_nine_cells(tiny_report, tmp_path):
    assert len(tiny_report.cells) == 9
    tiny_report.write(tmp_path)
    table = (tmp_path / "table.csv").read_text().splitlines()
    folds = (tmp_path / "report.csv").read_text().splitlines()
    assert table[0] == "variant,task,mean_ml,stderr_ml" and len(table) == 10
    assert folds[0] == "variant,task,fold,error_ml,mean_ml,stderr_ml" and len(folds) == 28
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["metric"] == T.ERROR_METRIC
    assert report["config"]["seed"] == 5


def test_reported_statistics_recompute_exactly(tiny_report):
    for c in tiny_report.to_json()["cells"]:
        errs = c["fold_errors_ml"]
        assert c["mean_ml"] == float(np.mean(errs))
        assert c["stderr_ml"] == float(np.std(errs, ddof=1) / math.sqrt(len(errs)))


def test_matrix_is_reproducible(tiny_report, small_data, tmp_path):
    again = T.variant_matrix(small_data, TrainConfig(epochs=1, seed=5), k=3, workers=1)
    tiny_report.write(tmp_path / "a")
    again.write(tmp_path / "b")
    for name in ("report.csv", "table.csv", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert "multitask" in again.format_table()


def test_min_volume_filter(small_data):
    with pytest.raises(ValueError):
        T.train(TrainConfig(epochs=1, min_volume_ml=1e9), small_data)
