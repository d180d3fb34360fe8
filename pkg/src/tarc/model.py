"""Multi-head MLP learner: backbone plus contrastive, classification and rotation heads."""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, DimensionError, Tensor

ROT_CLASSES = 4
HEADS = ("ssl", "cls", "rot")


@dataclass
class NetworkConfig:
    input_dim: int
    hidden_dims: List[int] = field(default_factory=lambda: [100, 100])
    num_classes: int = 10
    ssl_proj_dim: int = 64
    rot_classes: int = ROT_CLASSES
    batch_norm: bool = True

    def __post_init__(self):
        dims = [self.input_dim, *self.hidden_dims, self.num_classes, self.ssl_proj_dim]
        if not self.hidden_dims or any(int(d) < 1 for d in dims):
            raise ValueError(f"all network dimensions must be >= 1, got {dims}")
        if self.rot_classes != ROT_CLASSES:
            raise ValueError("rot_classes is fixed to 4")
        self.hidden_dims = [int(d) for d in self.hidden_dims]

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[-1]


def _linear_shapes(prefix: str, fan_in: int, fan_out: int):
    return [(f"{prefix}.weight", (fan_in, fan_out)), (f"{prefix}.bias", (fan_out,))]


def parameter_layout(config: NetworkConfig) -> List[tuple]:
    """Ordered ``(name, shape)`` list: backbone layers, then ssl, cls, rot heads."""
    layout = []
    dims = [config.input_dim, *config.hidden_dims]
    for i in range(len(dims) - 1):
        layout += _linear_shapes(f"backbone.{i}", dims[i], dims[i + 1])
    h = config.feature_dim
    layout += _linear_shapes("ssl.0", h, h)
    layout += _linear_shapes("ssl.1", h, h)
    layout += [("ssl.bn.weight", (h,)), ("ssl.bn.bias", (h,))]
    layout += _linear_shapes("ssl.2", h, config.ssl_proj_dim)
    layout += _linear_shapes("cls", h, config.num_classes)
    layout += _linear_shapes("rot", h, config.rot_classes)
    return layout


def parameter_count(config: NetworkConfig, prefix: Optional[str] = None) -> int:
    return sum(int(np.prod(s)) for n, s in parameter_layout(config) if prefix is None or n.startswith(prefix))


class MultiHeadNet:
    """Backbone ``f`` with heads ``ssl`` (unit-norm projection), ``cls`` and ``rot``.

    Parameters are :class:`Tensor` leaves kept in a fixed, ordered dict; the
    flat-vector views follow that order.
    """

    def __init__(self, config: NetworkConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        self.training = True
        rng = np.random.default_rng(seed)
        self.params: Dict[str, Tensor] = {}
        for name, shape in parameter_layout(config):
            if name.endswith("bn.weight"):
                data = np.ones(shape)
            elif name.endswith("bias"):
                data = np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(shape[0])
                data = rng.uniform(-bound, bound, size=shape)
            self.params[name] = Tensor(data, requires_grad=True)
        self.bn = BatchNormState(config.feature_dim, momentum=0.9)

    # -- modes ---------------------------------------------------------------
    def train(self) -> "MultiHeadNet":
        self.training = True
        return self

    def eval(self) -> "MultiHeadNet":
        self.training = False
        return self

    def clone(self) -> "MultiHeadNet":
        return copy.deepcopy(self)

    def names(self, prefix: str) -> List[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward -------------------------------------------------------------
    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        return T.add(T.matmul(x, self.params[f"{prefix}.weight"]), self.params[f"{prefix}.bias"])

    def forward_backbone(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64).reshape(len(x), -1))
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise DimensionError(f"backbone expects [batch, {self.config.input_dim}], got {x.shape}")
        h = x
        for i in range(len(self.config.hidden_dims)):
            h = T.relu(self._linear(h, f"backbone.{i}"))
        return h

    def forward_head(self, features: Tensor, head: str) -> Tensor:
        if head == "cls":
            return self._linear(features, "cls")
        if head == "rot":
            return self._linear(features, "rot")
        if head == "ssl":
            z = self._linear(self._linear(features, "ssl.0"), "ssl.1")
            if self.config.batch_norm:
                z = T.batch_norm(z, self.params["ssl.bn.weight"], self.params["ssl.bn.bias"], self.bn, self.training)
            z = self._linear(T.relu(z), "ssl.2")
            return T.l2_normalize(z)
        raise ValueError(f"unknown head {head!r}; expected one of {HEADS}")

    def predict_logits(self, images: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        """Evaluation-mode class logits for a stack of images (no tape kept)."""
        flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        out = []
        for start in range(0, len(flat), batch_size):
            h = flat[start : start + batch_size]
            for i in range(len(self.config.hidden_dims)):
                W = self.params[f"backbone.{i}.weight"].data
                b = self.params[f"backbone.{i}.bias"].data
                h = np.maximum(h @ W + b, 0.0)
            out.append(h @ self.params["cls.weight"].data + self.params["cls.bias"].data)
        if not out:
            return np.zeros((0, self.config.num_classes))
        return np.concatenate(out, axis=0)

    def features(self, images: np.ndarray) -> np.ndarray:
        h = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        for i in range(len(self.config.hidden_dims)):
            h = np.maximum(h @ self.params[f"backbone.{i}.weight"].data + self.params[f"backbone.{i}.bias"].data, 0.0)
        return h

    # -- flat parameter views -----------------------------------------------
    @property
    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def get_flat_params(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.params.values()])

    def set_flat_params(self, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.ndim != 1 or vector.size != self.num_params:
            raise DimensionError(f"expected a flat vector of {self.num_params} parameters, got {vector.shape}")
        offset = 0
        for p in self.params.values():
            n = p.data.size
            p.data = vector[offset : offset + n].reshape(p.data.shape).copy()
            offset += n

    def get_flat_grads(self) -> np.ndarray:
        return np.concatenate(
            [(p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1) for p in self.params.values()]
        )

    def slices(self) -> Dict[str, slice]:
        out, offset = {}, 0
        for name, p in self.params.items():
            out[name] = slice(offset, offset + p.data.size)
            offset += p.data.size
        return out


def init(config: NetworkConfig, seed: int) -> MultiHeadNet:
    return MultiHeadNet(config, seed)


def forward_backbone(net: MultiHeadNet, x) -> Tensor:
    return net.forward_backbone(x)


def forward_head(net: MultiHeadNet, features: Tensor, head: str) -> Tensor:
    return net.forward_head(features, head)


def get_flat_params(net: MultiHeadNet) -> np.ndarray:
    return net.get_flat_params()


def set_flat_params(net: MultiHeadNet, vector: np.ndarray) -> None:
    net.set_flat_params(vector)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------
#
# layout: uint32 LE header length | UTF-8 JSON header | float64 LE raw array.
# The raw array holds, in order: flat parameters, batch-norm running mean and
# running variance, then (optionally) replay-buffer images and labels.


def save_checkpoint(path, net: MultiHeadNet, buffer=None, extra: Optional[dict] = None) -> None:
    params = net.get_flat_params()
    bn = np.concatenate([net.bn.running_mean, net.bn.running_var])
    header = {
        "format": "tarc-checkpoint-1",
        "config": asdict(net.config),
        "param_count": int(params.size),
        "bn_state_count": int(bn.size),
        "seed": net.seed,
    }
    chunks = [params, bn]
    if buffer is not None:
        manifest, arrays = buffer.snapshot()
        header["buffer"] = manifest
        chunks += arrays
    if extra:
        header["extra"] = extra
    raw = np.concatenate([np.asarray(c, dtype="<f8").reshape(-1) for c in chunks])
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(raw.astype("<f8").tobytes())


def load_checkpoint(path):
    """Return ``(net, buffer_or_None, header)``."""
    from .buffer import ReplayBuffer

    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise ValueError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<I", blob[:4])
    header = json.loads(blob[4 : 4 + hlen].decode("utf-8"))
    raw = np.frombuffer(blob[4 + hlen :], dtype="<f8").astype(np.float64)
    config = NetworkConfig(**header["config"])
    net = MultiHeadNet(config, header["seed"])
    n_p, n_bn = header["param_count"], header["bn_state_count"]
    if n_p != net.num_params:
        raise ValueError(f"{path}: parameter count {n_p} does not match config ({net.num_params})")
    net.set_flat_params(raw[:n_p])
    bn = raw[n_p : n_p + n_bn]
    net.bn.running_mean = bn[: n_bn // 2].copy()
    net.bn.running_var = bn[n_bn // 2 :].copy()
    buffer = None
    if "buffer" in header:
        buffer = ReplayBuffer.restore(header["buffer"], raw[n_p + n_bn :])
    return net, buffer, header
