"""A deliberately small trainable-function substrate on top of numpy.

Supports exactly the layer kinds the tracker's networks need: dense,
3x3 valid convolution, ReLU, sigmoid, reshape and channel concatenation of a
pair of inputs. Gradients are computed by an explicit reverse pass over a
recorded tape; there is no general autodiff.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_FORMAT = "fusiontrack-params/1"
KINDS = ("dense", "conv3x3_valid", "relu", "sigmoid", "reshape", "concat")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One layer. ``dims`` by kind:

    dense: (in, out); conv3x3_valid: (in_channels, out_channels);
    reshape: target per-sample shape; concat/relu/sigmoid: ().
    """

    kind: str
    dims: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))


@dataclass(frozen=True)
class Net:
    name: str
    layers: Tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        for i, layer in enumerate(self.layers):
            if layer.kind == "concat" and i != 0:
                raise ValueError("concat is only supported as the first layer")

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        for i, layer in enumerate(self.layers):
            if layer.kind == "dense":
                n_in, n_out = layer.dims
                shapes[f"{i}.W"] = (n_out, n_in)
                shapes[f"{i}.b"] = (n_out,)
            elif layer.kind == "conv3x3_valid":
                c_in, c_out = layer.dims
                shapes[f"{i}.W"] = (c_out, c_in, 3, 3)
                shapes[f"{i}.b"] = (c_out,)
        return shapes

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "layers": [[l.kind, list(l.dims)] for l in self.layers]})

    @classmethod
    def from_json(cls, text: str) -> "Net":
        data = json.loads(text)
        return cls(data["name"], tuple(LayerSpec(k, tuple(d)) for k, d in data["layers"]))


@dataclass
class ParamStore:
    params: Dict[str, np.ndarray]
    grads: Dict[str, np.ndarray] = field(default_factory=dict)
    frozen: bool = False

    def __post_init__(self):
        self.zero_grad()

    def zero_grad(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.params.items()}, frozen=self.frozen)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in sorted(self.params)])


def init_params(net: Net, rng: np.random.Generator, final_scale: float = 1.0) -> ParamStore:
    """Glorot-uniform weights, zero biases; the last weighted layer is scaled by ``final_scale``."""
    shapes = net.param_shapes()
    weighted = [k for k in shapes if k.endswith(".W")]
    last = max(weighted, key=lambda k: int(k.split(".")[0])) if weighted else None
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
            continue
        receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=shape)
        params[name] = w * final_scale if name == last else w
    return ParamStore(params)


# keeps probabilities strictly inside (0, 1) so cross-entropy stays finite
PROB_EPS = 1e-12


def sigmoid(x: np.ndarray) -> np.ndarray:
    return np.clip(0.5 * (1.0 + np.tanh(0.5 * x)), PROB_EPS, 1.0 - PROB_EPS)


class Tape:
    """Intermediates recorded by :func:`forward` for one call."""

    def __init__(self, net: Net):
        self.net = net
        self.cache: List[object] = []


def _conv_cols(x: np.ndarray) -> np.ndarray:
    # (B, C, H, W) -> (B, Ho, Wo, C*9)
    win = sliding_window_view(x, (3, 3), axis=(2, 3))  # B, C, Ho, Wo, 3, 3
    B, C, Ho, Wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho, Wo, C * 9)


def forward(net: Net, params: ParamStore, x, record: bool = True):
    """Run ``net`` on a batch. Returns ``(output, tape)``; tape is None when not recording."""
    tape = Tape(net) if record else None
    for i, layer in enumerate(net.layers):
        kind = layer.kind
        if kind == "concat":
            a, b = (np.asarray(v, dtype=float) for v in x)
            if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
                raise ShapeError(f"{net.name} layer {i} (concat): incompatible {a.shape} and {b.shape}")
            cache = a.shape[1]
            x = np.concatenate([a, b], axis=1)
        elif kind == "dense":
            W, bias = params.params[f"{i}.W"], params.params[f"{i}.b"]
            x = np.asarray(x, dtype=float)
            if x.ndim != 2 or x.shape[1] != W.shape[1]:
                raise ShapeError(f"{net.name} layer {i} (dense): expected (batch, {W.shape[1]}), got {x.shape}")
            cache = x
            x = x @ W.T + bias
        elif kind == "conv3x3_valid":
            W, bias = params.params[f"{i}.W"], params.params[f"{i}.b"]
            x = np.asarray(x, dtype=float)
            if x.ndim != 4 or x.shape[1] != W.shape[1] or x.shape[2] < 3 or x.shape[3] < 3:
                raise ShapeError(
                    f"{net.name} layer {i} (conv3x3_valid): expected (batch, {W.shape[1]}, >=3, >=3), got {x.shape}"
                )
            cols = _conv_cols(x)
            out = cols @ W.reshape(W.shape[0], -1).T + bias  # B, Ho, Wo, Cout
            cache = (x.shape, cols)
            x = out.transpose(0, 3, 1, 2)
        elif kind == "relu":
            cache = x > 0
            x = np.where(cache, x, 0.0)
        elif kind == "sigmoid":
            x = sigmoid(x)
            cache = x
        elif kind == "reshape":
            target = layer.dims
            cache = x.shape
            try:
                x = x.reshape((x.shape[0],) + target)
            except ValueError:
                raise ShapeError(f"{net.name} layer {i} (reshape): cannot reshape {x.shape[1:]} to {target}") from None
        if tape is not None:
            tape.cache.append(cache)
    return x, tape


def backward(net: Net, params: ParamStore, tape: Optional[Tape], grad_out: np.ndarray):
    """Reverse pass. Accumulates parameter gradients; returns the input gradient.

    For nets starting with concat the input gradient is a pair.
    """
    if tape is None or tape.net is not net or len(tape.cache) != len(net.layers):
        raise RuntimeError(f"backward on {net.name} without a recorded forward pass")
    g = np.asarray(grad_out, dtype=float)
    accumulate = not params.frozen
    for i in range(len(net.layers) - 1, -1, -1):
        kind, cache = net.layers[i].kind, tape.cache[i]
        if kind == "dense":
            W = params.params[f"{i}.W"]
            if accumulate:
                params.grads[f"{i}.W"] += g.T @ cache
                params.grads[f"{i}.b"] += g.sum(axis=0)
            g = g @ W
        elif kind == "conv3x3_valid":
            W = params.params[f"{i}.W"]
            in_shape, cols = cache
            B, Cin, H, Wd = in_shape
            c_out = W.shape[0]
            gmat = g.transpose(0, 2, 3, 1)  # B, Ho, Wo, Cout
            if accumulate:
                params.grads[f"{i}.W"] += (gmat.reshape(-1, c_out).T @ cols.reshape(-1, cols.shape[-1])).reshape(W.shape)
                params.grads[f"{i}.b"] += gmat.sum(axis=(0, 1, 2))
            gcols = (gmat @ W.reshape(c_out, -1)).reshape(B, H - 2, Wd - 2, Cin, 3, 3)
            gx = np.zeros(in_shape)
            for di in range(3):
                for dj in range(3):
                    gx[:, :, di:di + H - 2, dj:dj + Wd - 2] += gcols[..., di, dj].transpose(0, 3, 1, 2)
            g = gx
        elif kind == "relu":
            g = np.where(cache, g, 0.0)
        elif kind == "sigmoid":
            g = g * cache * (1.0 - cache)
        elif kind == "reshape":
            g = g.reshape(cache)
        elif kind == "concat":
            g = (g[:, :cache], g[:, cache:])
    return g


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, store: ParamStore) -> None:
        if store.frozen:
            raise RuntimeError("cannot step a frozen parameter store")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in store.params.items():
            g = store.grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def save_checkpoint(path, net: Net, store: ParamStore) -> None:
    """Write named tensors (row-major float64) plus the layer list; atomic replace."""
    path = os.fspath(path)
    payload = {f"param:{k}": np.ascontiguousarray(v) for k, v in store.params.items()}
    payload["__format__"] = np.array(CHECKPOINT_FORMAT)
    payload["__net__"] = np.array(net.to_json())
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".npz.tmp")
    os.close(fd)
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def load_checkpoint(path) -> Tuple[Net, ParamStore]:
    with np.load(os.fspath(path), allow_pickle=False) as data:
        fmt = str(data["__format__"]) if "__format__" in data.files else None
        if fmt != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {fmt!r}")
        net = Net.from_json(str(data["__net__"]))
        params = {k[len("param:"):]: data[k].astype(float) for k in data.files if k.startswith("param:")}
    expected = net.param_shapes()
    if {k: v.shape for k, v in params.items()} != expected:
        raise ValueError(f"{path}: parameter shapes do not match the stored layer list")
    return net, ParamStore(params)


__all__ = [
    "Adam",
    "LayerSpec",
    "Net",
    "ParamStore",
    "ShapeError",
    "Tape",
    "backward",
    "forward",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "sigmoid",
]
