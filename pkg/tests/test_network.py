import math

import numpy as np
import pytest

from dkel.autodiff import Tensor
from dkel.errors import ConfigurationError, ParameterError, ShapeError
from dkel.network import (
    MultiPeerNetwork, NetworkConfig, copy_parameters, load_parameters, param_norm, param_vector,
    save_parameters,
)
from dkel.trainer import SGD

from conftest import fd_grad

CFG = NetworkConfig(input_dim=2, hidden_dim=6, feature_dim=4, num_classes=3, num_peers=3)


def zero_out(net, params=None):
    for p in params if params is not None else net.parameters():
        p.data[...] = 0.0


def np_forward_peer(net, x, p):
    """Independent numpy re-implementation of one peer's forward pass."""
    h = x
    for layer in net.backbone:
        h = np.maximum(h @ layer.weight.data + layer.bias.data, 0)
    feat, out = net.peer_heads[p]
    f = np.maximum(h @ feat.weight.data + feat.bias.data, 0)
    return f, f @ out.weight.data + out.bias.data


@pytest.fixture
def net():
    return MultiPeerNetwork(CFG, seed=7)


@pytest.fixture
def x(rng):
    return rng.standard_normal((5, 2))


class TestForward:
    def test_zero_weights_zero_logits(self, net, x):
        zero_out(net)
        for p in range(3):
            _, z = net.forward_peer(x, p)
            assert np.array_equal(z.data, np.zeros((5, 3)))

    def test_deterministic(self, net, x):
        a = net.forward_peer(x, 1)[1].data
        b = net.forward_peer(x, 1)[1].data
        assert np.array_equal(a, b)

    def test_matches_numpy_reference(self, net, x):
        for p in range(3):
            f, z = net.forward_peer(x, p)
            rf, rz = np_forward_peer(net, x, p)
            np.testing.assert_allclose(f.data, rf, rtol=1e-14, atol=1e-15)
            np.testing.assert_allclose(z.data, rz, rtol=1e-14, atol=1e-15)

    def test_backbone_gradient(self, net, x):
        w = net.backbone[0].weight
        net.forward_peer(x, 0)[1].sum().backward()
        w0 = w.data.copy()

        def oracle(v):
            w.data[...] = v
            out = np_forward_peer(net, x, 0)[1].sum()
            w.data[...] = w0
            return out

        num = fd_grad(oracle, w0)
        assert np.max(np.abs(w.grad - num) / np.maximum(1, np.abs(num))) < 1e-4

    def test_peer_isolation(self, net, x):
        before = net.forward_peer(x, 0)[1].data.copy()
        for t in (*net.peer_heads[1][0].parameters(), *net.peer_heads[2][1].parameters()):
            t.data += 1.0
        assert np.array_equal(net.forward_peer(x, 0)[1].data, before)

    def test_bad_peer_index(self, net, x):
        with pytest.raises(ParameterError):
            net.forward_peer(x, 3)


class TestEnsemble:
    def test_concatenation_width(self, rng):
        net = MultiPeerNetwork(NetworkConfig(hidden_dim=5, feature_dim=4, num_peers=2), seed=1)
        assert net.ensemble_head.weight.shape == (8, 3)
        feats = [Tensor(rng.standard_normal((6, 4))) for _ in range(2)]
        expected = np.concatenate([f.data for f in feats], axis=1) @ net.ensemble_head.weight.data
        np.testing.assert_allclose(net.forward_ensemble(feats).data, expected, rtol=1e-14)

    def test_zero_head(self, net, rng):
        zero_out(net, net.ensemble_head.parameters())
        feats = [Tensor(rng.standard_normal((2, 4))) for _ in range(3)]
        assert np.array_equal(net.forward_ensemble(feats).data, np.zeros((2, 3)))

    def test_gradient_reaches_every_feature(self, net, rng):
        f0 = [rng.standard_normal((3, 4)) for _ in range(3)]
        feats = [Tensor(f, requires_grad=True) for f in f0]
        net.forward_ensemble(feats).sum().backward()
        w, b = net.ensemble_head.weight.data, net.ensemble_head.bias.data
        for k in range(3):
            def oracle(v, k=k):
                parts = [v if j == k else f0[j] for j in range(3)]
                return float((np.concatenate(parts, axis=1) @ w + b).sum())

            np.testing.assert_allclose(feats[k].grad, fd_grad(oracle, f0[k]), rtol=1e-7, atol=1e-9)
            assert np.any(feats[k].grad != 0)

    def test_any_feature_moves_ensemble(self, net, rng):
        feats = [rng.standard_normal((2, 4)) for _ in range(3)]
        base = net.forward_ensemble([Tensor(f) for f in feats]).data
        for k in range(3):
            moved = [f + (j == k) * 0.5 for j, f in enumerate(feats)]
            assert not np.allclose(net.forward_ensemble([Tensor(f) for f in moved]).data, base)

    def test_wrong_feature_count(self, net, rng):
        with pytest.raises(ConfigurationError):
            net.forward_ensemble([Tensor(np.zeros((2, 4)))] * 2)


class TestCopyAndStorage:
    def test_copy_gives_identical_outputs(self, net, x):
        other = MultiPeerNetwork(CFG, seed=99)
        copy_parameters(net, other)
        assert np.array_equal(param_vector(net), param_vector(other))
        assert np.array_equal(net.forward([x] * 3)[2].data, other.forward([x] * 3)[2].data)

    def test_mutating_source_leaves_copy(self, net):
        other = MultiPeerNetwork(CFG, seed=99)
        copy_parameters(net, other)
        snap = param_vector(other)
        for p in net.parameters():
            p.data += 3.0
        assert np.array_equal(param_vector(other), snap)

    def test_sgd_on_copy_leaves_source(self, net, x):
        other = MultiPeerNetwork(CFG, seed=99)
        copy_parameters(net, other)
        snap = param_vector(net)
        other.forward_peer(x, 0)[1].sum().backward()
        SGD(other.parameters(), 0.1, momentum=0.9, weight_decay=1e-3).step()
        assert np.array_equal(param_vector(net), snap)
        assert not np.array_equal(param_vector(other), snap)

    def test_student_teacher_share_no_storage(self, net):
        other = MultiPeerNetwork(CFG, seed=7)
        copy_parameters(net, other)
        for a in net.parameters():
            for b in other.parameters():
                assert not np.shares_memory(a.data, b.data)

    def test_config_mismatch(self, net):
        with pytest.raises(ConfigurationError):
            copy_parameters(net, MultiPeerNetwork(NetworkConfig(), seed=0))

    def test_same_seed_same_init(self):
        assert np.array_equal(param_vector(MultiPeerNetwork(CFG, 3)), param_vector(MultiPeerNetwork(CFG, 3)))
        assert not np.array_equal(param_vector(MultiPeerNetwork(CFG, 3)), param_vector(MultiPeerNetwork(CFG, 4)))

    def test_init_bound(self):
        net = MultiPeerNetwork(CFG, seed=0)
        w = net.backbone[1].weight.data
        assert np.abs(w).max() <= math.sqrt(6 / 12)
        assert np.all(net.backbone[1].bias.data == 0)


class TestNorm:
    def test_zero(self, net):
        zero_out(net)
        assert param_norm(net) == 0.0

    def test_single_weight(self, net):
        zero_out(net)
        net.backbone[0].weight.data[0, 0] = 3.0
        assert param_norm(net) == 3.0

    def test_scalar_loop(self, net):
        total = 0.0
        for p in net.parameters():
            for v in p.data.reshape(-1).tolist():
                total += v * v
        assert param_norm(net) == pytest.approx(math.sqrt(total), rel=1e-13)


class TestSaveLoad:
    def test_round_trip_bitwise(self, net, tmp_path):
        save_parameters(net, tmp_path / "p.bin")
        other = MultiPeerNetwork(CFG, seed=1)
        load_parameters(other, tmp_path / "p.bin")
        assert param_vector(other).tobytes() == param_vector(net).tobytes()

    def test_header_mismatch(self, net, tmp_path):
        save_parameters(net, tmp_path / "p.bin")
        with pytest.raises(ConfigurationError):
            load_parameters(MultiPeerNetwork(NetworkConfig(), seed=0), tmp_path / "p.bin")

    def test_truncated_payload(self, net, tmp_path):
        path = tmp_path / "p.bin"
        save_parameters(net, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ShapeError):
            load_parameters(MultiPeerNetwork(CFG, seed=0), path)

    def test_needs_two_peers(self):
        with pytest.raises(ConfigurationError):
            NetworkConfig(num_peers=1)
