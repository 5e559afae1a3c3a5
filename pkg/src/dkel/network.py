"""Multi-peer dense network used for both the student and the decoupled teacher.

Layout: a shared two-layer ReLU backbone, ``m`` peer heads (dense+ReLU feature
layer followed by a linear classifier), and an ensemble head that maps the
concatenated peer features to class logits.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, concat, matmul, relu
from .errors import ConfigurationError, ParameterError, ShapeError

_MAGIC = "dkel-params/1"


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int = 2
    hidden_dim: int = 32
    feature_dim: int = 16
    num_classes: int = 3
    num_peers: int = 3
    init_scale: float = 1.0

    def __post_init__(self):
        if self.num_peers < 2:
            raise ConfigurationError(f"num_peers must be >= 2, got {self.num_peers}")
        for name in ("input_dim", "hidden_dim", "feature_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class Linear:
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, scale: float = 1.0):
        bound = scale * np.sqrt(6.0 / (fan_in + fan_out))
        self.weight = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]


class MultiPeerNetwork:
    def __init__(self, config: NetworkConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        s = c.init_scale
        self.backbone = [Linear(c.input_dim, c.hidden_dim, rng, s), Linear(c.hidden_dim, c.hidden_dim, rng, s)]
        self.peer_heads = [
            (Linear(c.hidden_dim, c.feature_dim, rng, s), Linear(c.feature_dim, c.num_classes, rng, s))
            for _ in range(c.num_peers)
        ]
        self.ensemble_head = Linear(c.num_peers * c.feature_dim, c.num_classes, rng, s)

    @property
    def num_peers(self) -> int:
        return self.config.num_peers

    def parameters(self) -> List[Tensor]:
        """Stable ordering: backbone, peer heads in index order, ensemble head."""
        params = []
        for layer in self.backbone:
            params += layer.parameters()
        for feat, out in self.peer_heads:
            params += feat.parameters() + out.parameters()
        params += self.ensemble_head.parameters()
        return params

    def requires_grad_(self, flag: bool) -> "MultiPeerNetwork":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def forward_peer(self, x, p: int) -> Tuple[Tensor, Tensor]:
        """Return (penultimate feature, logits) of peer ``p`` on its view ``x``."""
        if not 0 <= p < self.num_peers:
            raise ParameterError(f"peer index {p} outside [0, {self.num_peers})")
        h = x if isinstance(x, Tensor) else Tensor(x)
        for layer in self.backbone:
            h = relu(layer(h))
        feat_layer, out_layer = self.peer_heads[p]
        feature = relu(feat_layer(h))
        return feature, out_layer(feature)

    def forward_ensemble(self, features: Sequence[Tensor]) -> Tensor:
        """Ensemble logits from the stacked peer features."""
        if len(features) != self.num_peers:
            raise ConfigurationError(f"expected {self.num_peers} peer features, got {len(features)}")
        shape = features[0].shape
        if any(f.shape != shape for f in features) or shape[-1] != self.config.feature_dim:
            raise ConfigurationError(f"peer features must all be N x {self.config.feature_dim}")
        return self.ensemble_head(concat(features, axis=1))

    def forward(self, views: Sequence) -> Tuple[List[Tensor], List[Tensor], Tensor]:
        """Run every peer on its own view; returns (features, logits, ensemble logits)."""
        if len(views) != self.num_peers:
            raise ConfigurationError(f"expected {self.num_peers} views, got {len(views)}")
        feats, logits = [], []
        for p, x in enumerate(views):
            f, z = self.forward_peer(x, p)
            feats.append(f)
            logits.append(z)
        return feats, logits, self.forward_ensemble(feats)


def _require_same_config(a: MultiPeerNetwork, b: MultiPeerNetwork) -> None:
    if a.config != b.config:
        raise ConfigurationError(f"network configurations differ: {a.config} vs {b.config}")


def copy_parameters(src: MultiPeerNetwork, dst: MultiPeerNetwork) -> None:
    """Overwrite ``dst`` parameters with ``src`` values (bitwise), keeping storage separate."""
    _require_same_config(src, dst)
    for s, d in zip(src.parameters(), dst.parameters()):
        np.copyto(d.data, s.data)


def param_vector(net: MultiPeerNetwork) -> np.ndarray:
    return np.concatenate([p.data.reshape(-1) for p in net.parameters()])


def param_norm(net: MultiPeerNetwork) -> float:
    return float(np.sqrt(sum(float(np.sum(p.data * p.data)) for p in net.parameters())))


def save_parameters(net: MultiPeerNetwork, path) -> None:
    """One JSON header line, then the flat parameter vector as little-endian float64."""
    vec = param_vector(net)
    header = {
        "format": _MAGIC,
        "config_hash": net.config.digest(),
        "config": asdict(net.config),
        "m": net.num_peers,
        "shapes": [list(p.shape) for p in net.parameters()],
        "count": int(vec.size),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(vec.astype("<f8").tobytes())


def load_parameters(net: MultiPeerNetwork, path) -> None:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        payload = fh.read()
    if header.get("format") != _MAGIC:
        raise ConfigurationError(f"{path}: not a parameter file")
    if header["config_hash"] != net.config.digest():
        raise ConfigurationError(f"{path}: saved for config {header['config']}, target is {asdict(net.config)}")
    vec = np.frombuffer(payload, dtype="<f8")
    if vec.size != header["count"]:
        raise ShapeError(f"{path}: expected {header['count']} values, found {vec.size}")
    offset = 0
    for p in net.parameters():
        n = p.data.size
        p.data[...] = vec[offset:offset + n].reshape(p.shape)
        offset += n
