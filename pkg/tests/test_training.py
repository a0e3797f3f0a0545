import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facechannel.model import build_model
from facechannel.synthetic import blob_dataset
from facechannel.training import (
    LabelSchemaError,
    TrainConfig,
    ccc_loss,
    cross_entropy,
    evaluate,
    finetune,
    mse_loss,
    read_history,
    sgd_step,
    soft_cross_entropy,
    train,
    write_history,
)

from conftest import tiny_config


def test_soft_cross_entropy_examples():
    assert soft_cross_entropy([[0.5, 0.5]], [[1.0, 0.0]]) == pytest.approx(np.log(2), abs=1e-12)
    expected = -(0.7 * np.log(0.7) + 0.3 * np.log(0.3))
    assert expected == pytest.approx(0.610864, abs=1e-6)
    assert soft_cross_entropy([[0.7, 0.3]], [[0.7, 0.3]]) == pytest.approx(expected, abs=1e-12)


def test_soft_cross_entropy_rejects_non_stochastic():
    with pytest.raises(ValueError, match="row 1"):
        soft_cross_entropy([[0.5, 0.5], [0.5, 0.4]], [[1, 0], [1, 0]])


def test_soft_matches_hard_on_one_hot(rng):
    p = rng.dirichlet(np.ones(6), size=50)
    labels = rng.integers(0, 6, 50)
    assert soft_cross_entropy(p, np.eye(6)[labels]) == pytest.approx(cross_entropy(p, labels), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.integers(2, 8))
def test_cross_entropy_bounded_below_by_entropy(seed, k):
    r = np.random.default_rng(seed)
    t = r.dirichlet(np.ones(k), size=5)
    p = r.dirichlet(np.ones(k), size=5)
    entropy = -(t * np.log(t)).sum(axis=1).mean()
    assert soft_cross_entropy(p, t) >= entropy - 1e-9
    assert soft_cross_entropy(t, t) == pytest.approx(entropy, abs=1e-9)


def test_mse_examples():
    a = np.array([[0.1, 0.2], [0.3, 0.4]])
    assert mse_loss(a, a) == 0
    assert mse_loss(a + 1, a) == pytest.approx(1.0)
    assert mse_loss([[0.5, 0.0]], [[0.0, 0.5]]) == pytest.approx(0.25)
    with pytest.raises(ValueError, match="shape mismatch"):
        mse_loss(np.zeros((2, 2)), np.zeros((3, 2)))


def test_ccc_loss_gradient(rng):
    x = rng.standard_normal((7, 2))
    y = rng.standard_normal((7, 2))
    _, g = ccc_loss(x, y)
    num = np.zeros_like(x)
    eps = 1e-6
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        num[idx] = (ccc_loss(xp, y)[0] - ccc_loss(xm, y)[0]) / (2 * eps)
    np.testing.assert_allclose(g, num, rtol=1e-6, atol=1e-9)


def test_sgd_examples():
    p = {"w": np.array([1.0])}
    sgd_step(p, {"w": np.array([2.0])}, 0.1, 0.0, {})
    assert p["w"][0] == pytest.approx(0.8)

    p = {"w": np.array([0.5, -0.5])}
    sgd_step(p, {"w": np.zeros(2)}, 0.1, 0.0, {})
    np.testing.assert_array_equal(p["w"], [0.5, -0.5])


def test_sgd_momentum_recurrence():
    # v1 = -0.1, p1 = -0.1; v2 = 0.9 * -0.1 - 0.1 = -0.19, p2 = -0.29
    p, v = {"w": np.array([0.0])}, {}
    sgd_step(p, {"w": np.array([1.0])}, 0.1, 0.9, v)
    assert p["w"][0] == pytest.approx(-0.1, abs=1e-15)
    sgd_step(p, {"w": np.array([1.0])}, 0.1, 0.9, v)
    assert p["w"][0] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_frozen_untouched():
    p = {"a": np.array([1.0]), "b": np.array([1.0])}
    sgd_step(p, {"a": np.array([1.0]), "b": np.array([1.0])}, 0.5, 0.0, {}, frozen={"a"})
    assert p["a"][0] == 1.0 and p["b"][0] == 0.5


def test_update_linear_in_lr(rng):
    g = {"w": rng.standard_normal(10)}
    steps = []
    for lr in (1e-3, 5e-4):
        p = {"w": np.zeros(10)}
        sgd_step(p, g, lr, 0.0, {})
        steps.append(np.linalg.norm(p["w"]))
    assert 1.9 <= steps[0] / steps[1] <= 2.1


@pytest.fixture(scope="module")
def blobs():
    return blob_dataset(32, 2, seed=0)


def test_overfit_separable_set(blobs):
    model = build_model(tiny_config())
    history = train(model, blobs, TrainConfig(epochs=200, batch_size=8, seed=0, target_metric=1.0),
                    val=blobs)
    assert evaluate(model, blobs).accuracy >= 0.95
    assert len(history) <= 200


def test_loss_window_means_non_increasing(blobs):
    model = build_model(tiny_config())
    history = train(model, blobs, TrainConfig(epochs=40, batch_size=8, learning_rate=0.005, seed=0))
    losses = np.array([h["loss"] for h in history])
    means = losses.reshape(-1, 20).mean(axis=1)
    assert np.all(np.diff(means) <= 0)


def test_zero_learning_rate_keeps_weights(blobs):
    model = build_model(tiny_config())
    before = {k: v.copy() for k, v in model.named_parameters().items()}
    train(model, blobs, TrainConfig(epochs=1, learning_rate=0.0))
    for k, v in model.named_parameters().items():
        assert np.array_equal(v, before[k]), k


def test_training_is_deterministic(blobs):
    runs = []
    for _ in range(2):
        model = build_model(tiny_config(seed=4))
        runs.append(train(model, blobs, TrainConfig(epochs=3, seed=9), val=blobs))
    assert runs[0] == runs[1]


def test_schema_mismatch(blobs):
    model = build_model(tiny_config(head="dimensional"))
    with pytest.raises(LabelSchemaError, match="label schema"):
        train(model, blobs, TrainConfig(epochs=1))


def test_distribution_labels_train(rng):
    data = blob_dataset(8, 2, seed=3, schema="distribution")
    model = build_model(tiny_config())
    history = train(model, data, TrainConfig(epochs=2), val=data)
    assert len(history) == 2 and np.isfinite(history[-1]["loss"])


def test_dimensional_training_reports_ccc():
    data = blob_dataset(12, seed=5, schema="dimensional")
    model = build_model(tiny_config(head="dimensional"))
    train(model, data, TrainConfig(epochs=2, loss="ccc"))
    rep = evaluate(model, data)
    assert rep.accuracy is None and -1 <= rep.ccc_valence <= 1


def _pretrained(blobs):
    model = build_model(tiny_config(seed=2))
    train(model, blobs, TrainConfig(epochs=5, batch_size=8, seed=1))
    return model


def test_finetune_full_freeze_only_head_changes(blobs):
    model = _pretrained(blobs)
    task_b = blob_dataset(16, 2, seed=11, palette_offset=2)
    trunk = model.trunk_parameter_names()
    before = {k: v.copy() for k, v in model.state().items()}
    finetune(model, task_b, TrainConfig(epochs=3, freeze_prefix=len(model.units), learning_rate=0.1))
    state = model.state()
    for k in before:
        if k.startswith("cat_head"):
            continue
        assert state[k].tobytes() == before[k].tobytes(), k
    assert not np.array_equal(state["cat_head.weight"], before["cat_head.weight"])
    assert trunk


def test_finetune_without_freeze_updates_trunk(blobs):
    model = _pretrained(blobs)
    before = model.named_parameters()["conv1.weight"].copy()
    finetune(model, blobs, TrainConfig(epochs=1, freeze_prefix=0))
    assert not np.array_equal(before, model.named_parameters()["conv1.weight"])


def test_finetune_improves_task_b(blobs):
    model = _pretrained(blobs)
    task_b = blob_dataset(16, 2, seed=11, palette_offset=2)
    start = evaluate(model, task_b).accuracy
    _, history = finetune(model, task_b, TrainConfig(epochs=15, freeze_prefix=len(model.units),
                                                     learning_rate=0.5, batch_size=4), val=task_b)
    assert history[-1]["val_metric"] > start or max(h["val_metric"] for h in history) > start


def test_finetune_reinitializes_head_for_new_classes(blobs):
    model = _pretrained(blobs)
    three = blob_dataset(12, 3, seed=4)
    finetune(model, three, TrainConfig(epochs=1))
    assert model.heads["cat_head"].params["weight"].shape == (16, 3)


def test_finetune_freeze_out_of_range(blobs):
    model = _pretrained(blobs)
    with pytest.raises(ValueError, match="freeze_prefix"):
        finetune(model, blobs, TrainConfig(freeze_prefix=len(model.units) + 1))


def test_history_csv_round_trip(tmp_path):
    hist = [{"epoch": 1, "loss": 0.5, "val_metric": float("nan")},
            {"epoch": 2, "loss": 0.25, "val_metric": 0.75}]
    path = tmp_path / "h.csv"
    write_history(hist, path)
    assert path.read_text().splitlines()[0] == "epoch,loss,val_metric"
    back = read_history(path)
    assert back[1] == hist[1] and np.isnan(back[0]["val_metric"])
