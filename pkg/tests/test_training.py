import json

import numpy as np
import pytest

from adaptvig import model as M
from adaptvig import tensor as T
from adaptvig import training as TR
from adaptvig.layers import parameters


@pytest.fixture(scope="module")
def blobs():
    return TR.synthetic_blobs(42, 64, 2, 16, 16)


def test_blobs_deterministic():
    a, la = TR.synthetic_blobs(5, 10, 3, 8, 8)
    b, lb = TR.synthetic_blobs(5, 10, 3, 8, 8)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(la, lb)
    assert a.shape == (10, 3, 8, 8)


def test_blobs_linear_probe():
    x, y = TR.synthetic_blobs(42, 200, 2, 16, 16)
    pooled = x.mean(axis=1).reshape(200, 4, 4, 4, 4).mean(axis=(2, 4)).reshape(200, -1)
    feats = np.hstack([pooled, np.ones((200, 1))])
    w, *_ = np.linalg.lstsq(feats, np.where(y == 1, 1.0, -1.0), rcond=None)
    assert ((feats @ w > 0) == (y == 1)).mean() > 0.99


def test_blobs_validation():
    with pytest.raises(ValueError):
        TR.synthetic_blobs(0, 10, 1, 16, 16)


def test_dataset_roundtrip(tmp_path, blobs):
    x, y = blobs
    img, _ = TR.write_dataset(tmp_path, x, y)
    x2, y2 = TR.read_dataset(img)
    np.testing.assert_array_equal(x2, x.astype(np.float32))
    np.testing.assert_array_equal(y2, y)


def test_zero_learning_rate_is_noop(blobs):
    x, y = blobs
    cfg = TR.TrainConfig(learning_rate=0.0, steps=5, batch_size=8)
    before = [p.data.copy() for p in parameters(M.init_model(cfg.model, seed=cfg.seed))]
    res = TR.train(cfg, x, y)
    for a, b in zip(before, parameters(res.params)):
        np.testing.assert_array_equal(a, b.data)
    assert all(t == 1.0 for t in res.temperatures())


def test_training_deterministic_and_logged(blobs):
    x, y = blobs
    cfg = TR.TrainConfig(steps=25, batch_size=16, log_interval=10)
    a = TR.train(cfg, x, y)
    b = TR.train(cfg, x, y)
    assert a.history == b.history
    assert [r["step"] for r in a.history] == [0, 10, 20, 25]
    assert sum(1 for k in a.history[0] if k.startswith("T")) == len(a.params.gatings())


def test_loss_decreases(blobs):
    x, y = blobs
    res = TR.train(TR.TrainConfig(steps=40, batch_size=16), x, y)
    assert res.final["loss"] < res.initial["loss"]


def test_non_finite_loss_reports_step(blobs):
    x, y = blobs
    bad = x.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(TR.NonFiniteLoss) as err:
        TR.train(TR.TrainConfig(steps=3), bad, y)
    assert err.value.step == 0


def test_label_range_checked(blobs):
    x, y = blobs
    with pytest.raises(ValueError):
        TR.train(TR.TrainConfig(steps=1), x, y + 5)


def test_config_validation():
    with pytest.raises(ValueError):
        TR.TrainConfig(optimizer="adam")
    with pytest.raises(ValueError):
        TR.TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TR.TrainConfig(dataset="tensor_file")
    with pytest.raises(ValueError):
        TR.TrainConfig.from_dict({"lr": 0.1})


def test_artifacts(tmp_path, blobs):
    x, y = blobs
    cfg = TR.TrainConfig(steps=10, batch_size=16)
    res = TR.train(cfg, x, y)
    paths = TR.write_run(tmp_path, cfg, res)
    lines = paths["metrics"].read_text().splitlines()
    assert lines[0] == "step,loss,accuracy,T0,T1" and len(lines) == 3
    flat = T.load_tensor(paths["params"])
    assert flat.shape == (1, 1, 1, M.param_count(cfg.model))
    index = json.loads(paths["index"].read_text())
    assert index[-1]["offset"] + int(np.prod(index[-1]["shape"])) == flat.size
    echoed = TR.TrainConfig.from_dict(json.loads(paths["config"].read_text()))
    assert echoed == cfg
