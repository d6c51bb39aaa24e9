import numpy as np
import pytest
from hypothesis import given, strategies as st

from patternprune.admm import PruneConfig, prune_model
from patternprune.modelio import FormatError, model_to_bytes
from patternprune.retrain import (
    Dataset,
    accuracy,
    dataset_from_bytes,
    dataset_to_bytes,
    masked_retrain,
    synthetic_two_class,
    train,
)
from patternprune.toy import toy_model


def test_dataset_container_layout():
    ds = Dataset(np.arange(2 * 1 * 2 * 2, dtype=np.uint8).reshape(2, 1, 2, 2),
                 np.array([3, 65535]))
    buf = dataset_to_bytes(ds)
    assert buf == (b"\x02\x00\x00\x00" + b"\x03\x00" + bytes([0, 1, 2, 3])
                   + b"\xff\xff" + bytes([4, 5, 6, 7]))
    again = dataset_from_bytes(buf, (1, 2, 2))
    np.testing.assert_array_equal(again.images, ds.images)
    np.testing.assert_array_equal(again.labels, ds.labels)


@given(seed=st.integers(0, 2**16), n=st.integers(0, 20))
def test_dataset_round_trip(seed, n):
    r = np.random.default_rng(seed)
    ds = Dataset(r.integers(0, 256, (n, 3, 4, 5), dtype=np.uint8), r.integers(0, 10, n))
    assert dataset_to_bytes(dataset_from_bytes(dataset_to_bytes(ds), (3, 4, 5))) == \
        dataset_to_bytes(ds)


def test_dataset_errors():
    buf = dataset_to_bytes(synthetic_two_class(3, (1, 2, 2)))
    with pytest.raises(FormatError):
        dataset_from_bytes(buf[:-1], (1, 2, 2))
    with pytest.raises(FormatError):
        dataset_from_bytes(buf, (1, 2, 3))
    with pytest.raises(FormatError):
        dataset_from_bytes(b"\x01", (1, 2, 2))
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 2, 2), np.float32), np.zeros(2))
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 2, 2), np.uint8), np.zeros(3))
    with pytest.raises(ValueError):
        dataset_to_bytes(Dataset(np.zeros((1, 1, 1, 1), np.uint8), np.array([70000])))


def test_generator_is_balanced_and_reproducible():
    a = synthetic_two_class(101, seed=4)
    b = synthetic_two_class(101, seed=4)
    assert a.images.tobytes() == b.images.tobytes()
    assert abs(int(a.labels.sum()) - 50) <= 1
    assert a.images.shape == (101, 3, 16, 16)
    assert synthetic_two_class(10, seed=5).images.tobytes() != a.images[:10].tobytes()


def test_zero_epochs_returns_unchanged_model():
    model = toy_model(0)
    ds = synthetic_two_class(16)
    out = masked_retrain(model, {}, ds, 0, 0.1)
    assert model_to_bytes(out) == model_to_bytes(model)
    assert out is not model


def test_masked_positions_stay_exactly_zero():
    model = prune_model(toy_model(0), PruneConfig(K=1, inner_steps=0, beta=0.5))
    pruned = model.model
    masks = model.weight_masks()
    ds = synthetic_two_class(64, seed=1)
    losses = []
    out = masked_retrain(pruned, masks, ds, 2, 0.05, on_epoch=lambda e, l: losses.append(l))
    assert len(losses) == 2
    changed = False
    for n, mask in masks.items():
        before = pruned.layers[n].weights
        after = out.layers[n].weights
        assert after[mask == 0].tobytes() == before[mask == 0].tobytes()
        assert not after[mask == 0].any()
        changed |= not np.array_equal(after[mask != 0], before[mask != 0])
    assert changed


def test_training_reduces_loss():
    ds = synthetic_two_class(128, seed=2)
    losses = []
    train(toy_model(0), ds, 4, 0.01, on_epoch=lambda e, l: losses.append(l))
    assert losses[-1] < losses[0]


def test_train_validation():
    model = toy_model(0)
    ds = synthetic_two_class(8)
    with pytest.raises(ValueError):
        masked_retrain(model, {0: np.ones((1, 1, 3, 3))}, ds, 1, 0.1)
    with pytest.raises(ValueError):
        masked_retrain(model, {7: np.ones((8, 3, 3, 3))}, ds, 1, 0.1)
    with pytest.raises(ValueError):
        train(model, ds, -1, 0.1)
    with pytest.raises(ValueError):
        train(model, ds, 1, 0.0)


def test_accuracy_counts_matches():
    model = toy_model(0)
    ds = synthetic_two_class(20)
    pred = np.argmax(model.logits(model.preprocess(ds.images)), axis=1)
    assert accuracy(model, ds, batch_size=7) == float(np.mean(pred == ds.labels))
