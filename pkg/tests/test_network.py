import numpy as np
import pytest

from volres import autodiff as ad
from volres.errors import ConfigError, DimensionError
from volres.network import CONV, IDENTITY, NetworkSpec, build, count_parameters, count_parameters_for

from oracles import closed_form_param_count

# trainable / with BN running statistics, for 40 classes
FROZEN_COUNTS = {
    1: (49_968, 50_288),
    2: (197_048, 197_688),
    4: (782_664, 783_944),
    8: (3_119_720, 3_122_280),
    16: (12_457_128, 12_462_248),
}


@pytest.mark.parametrize("k", [1, 2, 4])
def test_counts_match_closed_form_and_frozen(k):
    assert tuple(count_parameters_for(k)) == closed_form_param_count(k) == FROZEN_COUNTS[k]


def test_frozen_counts_large_k_closed_form():
    for k in (8, 16):
        assert closed_form_param_count(k) == FROZEN_COUNTS[k]


def test_block_layout():
    kinds = [b.kind for b in NetworkSpec(k=2).blocks()]
    assert kinds == [CONV, IDENTITY, IDENTITY, CONV, IDENTITY, IDENTITY]
    assert NetworkSpec(k=2).widths == [16, 16, 16, 32, 32, 32]


def test_spec_validation():
    with pytest.raises(ConfigError):
        NetworkSpec(k=0)
    with pytest.raises(ConfigError):
        NetworkSpec(k=1, dropout_rate=1.0)


def test_forward_shapes_and_input_check():
    net = build(NetworkSpec(k=1), seed=0)
    x = np.zeros((2, 1, 30, 30, 30), np.float32)
    assert net.forward(x).data.shape == (2, 40)
    with pytest.raises(DimensionError, match="expected input"):
        net.forward(np.zeros((2, 1, 28, 28, 28), np.float32))


def test_predict_proba_rows_sum_to_one():
    net = build(NetworkSpec(k=1, num_classes=5), seed=3)
    x = (np.random.default_rng(0).random((3, 1, 30, 30, 30)) < 0.1).astype(np.float32)
    p = net.predict_proba(x)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=1e-6)


def test_fingerprint_ignores_dropout_only():
    a = NetworkSpec(k=2)
    assert a.fingerprint() == NetworkSpec(k=2, dropout_rate=0.5).fingerprint()
    assert a.fingerprint() != NetworkSpec(k=4).fingerprint()
    assert a.fingerprint() != NetworkSpec(k=2, num_classes=10).fingerprint()
    assert NetworkSpec.from_dict(a.to_dict()) == a


def test_state_dict_round_trip():
    spec = NetworkSpec(k=1, num_classes=3)
    a, b = build(spec, seed=1), build(spec, seed=2)
    b.load_state_dict(a.state_dict())
    x = np.ones((1, 1, 30, 30, 30), np.float32)
    np.testing.assert_array_equal(a.forward(x).data, b.forward(x).data)
    bad = a.state_dict()
    bad.pop("head.dense.bias")
    with pytest.raises(DimensionError):
        b.load_state_dict(bad)


def test_same_seed_same_weights():
    spec = NetworkSpec(k=1)
    a, b = build(spec, seed=5).state_dict(), build(spec, seed=5).state_dict()
    assert all(np.array_equal(a[n], b[n]) for n in a)
    assert count_parameters(build(spec, seed=None)) == FROZEN_COUNTS[1]


def test_train_forward_gradients_reach_every_parameter():
    spec = NetworkSpec(k=1, num_classes=4, dropout_rate=0.3)
    net = build(spec, dtype=np.float64, seed=0)
    rng = np.random.default_rng(0)
    x = (rng.random((2, 1, 30, 30, 30)) < 0.2).astype(np.float64)
    loss, _ = ad.softmax_xent(net.forward(x, train=True, rng=rng), np.array([0, 3]))
    ad.backward(loss)
    for name, p in net.parameters().items():
        assert p.grad is not None and p.grad.shape == p.data.shape, name
