"""Dense neural network machinery written directly in numpy.

Only the layer kinds needed by the teacher and student models are supported:
dense, batch norm, sigmoid and linear classification heads (softmax is applied
inside the losses). Parameters live in an ordered ``dict`` of named float64
blocks so that federated code can flatten, clip and noise them as one vector.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit, log_softmax

from .errors import ConfigError, InputError, TrainingError

DENSE = "dense"
BATCHNORM = "batchnorm"
SIGMOID = "sigmoid"
LAYER_KINDS = (DENSE, BATCHNORM, SIGMOID)

BN_MOMENTUM = 0.99
BN_EPS = 1e-5

# weight init schemes: uniform(+-1/sqrt(fan_in)), or Glorot uniform with the
# gain of 4 that keeps activations from collapsing in sigmoid stacks without
# batch norm
FAN_IN = "fan_in"
XAVIER_SIGMOID = "xavier_sigmoid"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    bias: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError(f"layer dims must be positive, got {self.in_dim}->{self.out_dim}")
        if self.kind != DENSE and self.in_dim != self.out_dim:
            raise ConfigError(f"{self.kind} layer must preserve width")


@dataclass(frozen=True)
class NetworkSpec:
    """Trunk layers plus named linear+softmax heads on the trunk output."""

    trunk: tuple[LayerSpec, ...]
    heads: tuple[tuple[str, int], ...] = ()
    init: str = FAN_IN

    def __post_init__(self):
        if self.init not in (FAN_IN, XAVIER_SIGMOID):
            raise ConfigError(f"unknown init scheme {self.init!r}")
        if not self.trunk:
            raise ConfigError("network needs at least one trunk layer")
        for prev, nxt in zip(self.trunk, self.trunk[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ConfigError(
                    f"layer dim mismatch: {prev.kind} outputs {prev.out_dim}, "
                    f"next {nxt.kind} expects {nxt.in_dim}"
                )
        names = [name for name, _ in self.heads]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate head names in {names}")
        for name, dim in self.heads:
            if dim < 1:
                raise ConfigError(f"head {name!r} needs a positive output dim")

    @property
    def input_dim(self) -> int:
        return self.trunk[0].in_dim

    @property
    def embedding_dim(self) -> int:
        return self.trunk[-1].out_dim

    def to_dict(self) -> dict:
        return {
            "trunk": [asdict(layer) for layer in self.trunk],
            "heads": [list(h) for h in self.heads],
            "init": self.init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(
            trunk=tuple(LayerSpec(**layer) for layer in d["trunk"]),
            heads=tuple((str(name), int(dim)) for name, dim in d["heads"]),
            init=d.get("init", FAN_IN),
        )


def mlp_spec(
    input_dim: int,
    hidden: tuple[int, ...] | list[int],
    embedding_dim: int | None = None,
    heads: tuple[tuple[str, int], ...] = (),
    batch_norm: bool = True,
    init: str = FAN_IN,
) -> NetworkSpec:
    """Build a Dense -> [BatchNorm] -> Sigmoid stack.

    If ``embedding_dim`` is given a final Dense -> [BatchNorm] layer without
    activation is appended and serves as the embedding. Dense layers that feed
    a batch norm carry no bias since normalisation cancels it.
    """
    layers: list[LayerSpec] = []
    width = input_dim
    for h in hidden:
        layers.append(LayerSpec(DENSE, width, h, bias=not batch_norm))
        if batch_norm:
            layers.append(LayerSpec(BATCHNORM, h, h))
        layers.append(LayerSpec(SIGMOID, h, h))
        width = h
    if embedding_dim is not None:
        layers.append(LayerSpec(DENSE, width, embedding_dim, bias=not batch_norm))
        if batch_norm:
            layers.append(LayerSpec(BATCHNORM, embedding_dim, embedding_dim))
    return NetworkSpec(tuple(layers), tuple(heads), init)


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 256

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class ForwardResult:
    logits: dict[str, np.ndarray]
    embedding: np.ndarray


class Network:
    """A parameterised instance of a :class:`NetworkSpec`.

    Parameter names are ``trunk.<i>.<W|b|gamma|beta>`` and ``head.<name>.<W|b>``;
    batch-norm running statistics live in :attr:`buffers`.
    """

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator | None = None):
        self.spec = spec
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache: list = []
        self._head_inputs: np.ndarray | None = None
        if rng is None:
            rng = np.random.default_rng(0)
        for i, layer in enumerate(spec.trunk):
            if layer.kind == DENSE:
                self._init_dense(f"trunk.{i}", layer.in_dim, layer.out_dim, layer.bias, rng, spec.init)
            elif layer.kind == BATCHNORM:
                self.params[f"trunk.{i}.gamma"] = np.ones(layer.out_dim)
                self.params[f"trunk.{i}.beta"] = np.zeros(layer.out_dim)
                self.buffers[f"trunk.{i}.running_mean"] = np.zeros(layer.out_dim)
                self.buffers[f"trunk.{i}.running_var"] = np.ones(layer.out_dim)
        for name, dim in spec.heads:
            self._init_dense(f"head.{name}", spec.embedding_dim, dim, True, rng, FAN_IN)

    def _init_dense(self, prefix, n_in, n_out, bias, rng, scheme):
        if scheme == XAVIER_SIGMOID:
            scale = 4.0 * np.sqrt(6.0 / (n_in + n_out))
        else:
            scale = 1.0 / np.sqrt(n_in)
        self.params[f"{prefix}.W"] = rng.uniform(-scale, scale, size=(n_in, n_out))
        if bias:
            self.params[f"{prefix}.b"] = np.zeros(n_out)

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray, mode: str = "train", heads: bool = True) -> ForwardResult:
        if mode not in ("train", "infer"):
            raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ConfigError(f"expected batch of shape (n, {self.spec.input_dim}), got {x.shape}")
        train = mode == "train"
        cache = []
        h = x
        for i, layer in enumerate(self.spec.trunk):
            p = f"trunk.{i}"
            if layer.kind == DENSE:
                out = h @ self.params[f"{p}.W"]
                if layer.bias:
                    out += self.params[f"{p}.b"]
                cache.append(h)
            elif layer.kind == BATCHNORM:
                out, c = self._bn_forward(p, h, train)
                cache.append(c)
            else:
                out = expit(h)
                cache.append(out)
            h = out
        self._cache = cache
        self._head_inputs = h
        logits = {}
        if heads:
            for name, _ in self.spec.heads:
                logits[name] = h @ self.params[f"head.{name}.W"] + self.params[f"head.{name}.b"]
        return ForwardResult(logits, h)

    def _bn_forward(self, p, h, train):
        gamma, beta = self.params[f"{p}.gamma"], self.params[f"{p}.beta"]
        if train:
            mean = h.mean(axis=0)
            var = h.var(axis=0)
            rm, rv = self.buffers[f"{p}.running_mean"], self.buffers[f"{p}.running_var"]
            rm *= BN_MOMENTUM
            rm += (1 - BN_MOMENTUM) * mean
            rv *= BN_MOMENTUM
            rv += (1 - BN_MOMENTUM) * var
        else:
            mean = self.buffers[f"{p}.running_mean"]
            var = self.buffers[f"{p}.running_var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (h - mean) * inv_std
        return xhat * gamma + beta, (xhat, inv_std)

    def backward(
        self,
        grad_logits: dict[str, np.ndarray],
        grad_embedding: np.ndarray | None = None,
    ) -> dict[str, np.ndarray]:
        """Backpropagate through the last train-mode forward pass.

        Heads missing from ``grad_logits`` contribute no gradient (their
        parameter gradients are zero).
        """
        h = self._head_inputs
        if h is None:
            raise TrainingError("backward called before forward")
        grads: dict[str, np.ndarray] = {}
        g = np.zeros_like(h) if grad_embedding is None else np.array(grad_embedding, dtype=np.float64)
        for name, _ in self.spec.heads:
            W = self.params[f"head.{name}.W"]
            gl = grad_logits.get(name)
            if gl is None:
                grads[f"head.{name}.W"] = np.zeros_like(W)
                grads[f"head.{name}.b"] = np.zeros(W.shape[1])
                continue
            grads[f"head.{name}.W"] = h.T @ gl
            grads[f"head.{name}.b"] = gl.sum(axis=0)
            g += gl @ W.T
        for i in reversed(range(len(self.spec.trunk))):
            layer, c, p = self.spec.trunk[i], self._cache[i], f"trunk.{i}"
            if layer.kind == DENSE:
                grads[f"{p}.W"] = c.T @ g
                if layer.bias:
                    grads[f"{p}.b"] = g.sum(axis=0)
                g = g @ self.params[f"{p}.W"].T
            elif layer.kind == BATCHNORM:
                xhat, inv_std = c
                grads[f"{p}.gamma"] = (g * xhat).sum(axis=0)
                grads[f"{p}.beta"] = g.sum(axis=0)
                dxhat = g * self.params[f"{p}.gamma"]
                n = g.shape[0]
                g = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            else:
                g = g * c * (1.0 - c)
        return {k: grads[k] for k in self.params}

    # -- parameter vector views --------------------------------------------

    @property
    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def flat_params(self) -> np.ndarray:
        if not self.params:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self.params.values()])

    def set_flat_params(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.num_params,):
            raise ConfigError(f"flat vector has shape {vec.shape}, expected ({self.num_params},)")
        offset = 0
        for k, v in self.params.items():
            v[...] = vec[offset:offset + v.size].reshape(v.shape)
            offset += v.size

    def copy(self) -> "Network":
        other = Network.__new__(Network)
        other.spec = self.spec
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        other._cache = []
        other._head_inputs = None
        return other

    def has_batchnorm(self) -> bool:
        return any(layer.kind == BATCHNORM for layer in self.spec.trunk)


# -- losses -------------------------------------------------------------------


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean softmax cross entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise InputError(f"labels shape {labels.shape} does not match batch size {n}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise InputError(f"label out of range [0, {c})")
    logp = log_softmax(logits, axis=1)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    return float(loss), grad


# -- optimisation -------------------------------------------------------------


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    cfg: OptimizerConfig,
    velocity: dict[str, np.ndarray],
) -> dict[str, np.ndarray]:
    """Momentum SGD with L2 weight decay folded into the gradient.

    ``v <- momentum * v + grad + weight_decay * param``; ``param <- param - lr * v``.
    Updates ``params`` and ``velocity`` in place and returns ``params``.
    """
    for k, g in grads.items():
        # a NaN or inf anywhere makes the sum non-finite
        if not math.isfinite(float(np.sum(g))):
            raise TrainingError(f"non-finite gradient in block {k!r}")
    for k, p in params.items():
        g = grads[k]
        v = velocity.get(k)
        if v is None:
            v = velocity[k] = np.zeros_like(p)
        if p.shape != g.shape or p.shape != v.shape:
            raise ConfigError(f"shape mismatch in block {k!r}")
        v *= cfg.momentum
        v += g
        if cfg.weight_decay:
            v += cfg.weight_decay * p
        p -= cfg.learning_rate * v
    return params


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches covering ``range(n)`` once."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_epoch(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    cfg: OptimizerConfig,
    velocity: dict[str, np.ndarray],
    rng: np.random.Generator,
    head: str,
) -> float:
    """One epoch of cross-entropy minibatch SGD on a single head; returns mean loss."""
    total = 0.0
    for idx in minibatches(len(x), cfg.batch_size, rng):
        out = net.forward(x[idx], "train")
        loss, g = cross_entropy_loss(out.logits[head], y[idx])
        sgd_step(net.params, net.backward({head: g}), cfg, velocity)
        total += loss * len(idx)
    return total / max(len(x), 1)


def predict(net: Network, x: np.ndarray, head: str, batch_size: int = 4096) -> np.ndarray:
    """Inference-mode logits for ``head`` computed in chunks."""
    out = [net.forward(x[i:i + batch_size], "infer").logits[head] for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, dict(net.spec.heads)[head]))


def accuracy(net: Network, x: np.ndarray, y: np.ndarray, head: str) -> float:
    if len(x) == 0:
        return float("nan")
    return float(np.mean(predict(net, x, head).argmax(axis=1) == y))


# -- gradient checking --------------------------------------------------------


LossFn = Callable[[Network], tuple[float, dict[str, np.ndarray]]]


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tolerance: float) -> bool:
        return self.max_error < tolerance


def ce_loss_fn(batch: np.ndarray, labels: np.ndarray, head: str | None = None, mode: str = "train") -> LossFn:
    """Cross entropy on ``head`` (or on the raw trunk output when the net has no heads)."""

    def fn(net: Network):
        out = net.forward(batch, mode)
        name = head if head is not None else (net.spec.heads[0][0] if net.spec.heads else None)
        if name is None:
            loss, g = cross_entropy_loss(out.embedding, labels)
            return loss, net.backward({}, grad_embedding=g)
        loss, g = cross_entropy_loss(out.logits[name], labels)
        return loss, net.backward({name: g})

    return fn


def grad_check(
    net: Network,
    batch: np.ndarray | None = None,
    labels: np.ndarray | None = None,
    h: float = 1e-5,
    loss_fn: LossFn | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    Reports, per parameter block, ``max |a - n| / max(|a|, |n|, 1e-8)``.
    Batch-norm running statistics are restored after every evaluation so the
    check leaves the network untouched.
    """
    if loss_fn is None:
        loss_fn = ce_loss_fn(batch, labels)
    saved = {k: v.copy() for k, v in net.buffers.items()}

    def restore():
        for k, v in saved.items():
            net.buffers[k][...] = v

    _, analytic = loss_fn(net)
    restore()
    report = GradCheckReport()
    for name, p in net.params.items():
        numeric = np.zeros_like(p)
        flat = p.reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            plus, _ = loss_fn(net)
            restore()
            flat[j] = orig - h
            minus, _ = loss_fn(net)
            restore()
            flat[j] = orig
            nflat[j] = (plus - minus) / (2 * h)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        report.errors[name] = float(np.max(np.abs(a - numeric) / denom)) if p.size else 0.0
    return report


# -- checkpoints --------------------------------------------------------------

# Container: an uncompressed zip (npz layout) with one .npy member per block,
# named ``param/<block>`` or ``buffer/<block>``, plus ``spec.json`` holding the
# NetworkSpec and free-form metadata. Member timestamps are fixed so identical
# networks serialise to identical bytes.

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _write_member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path, net: Network, metadata: dict | None = None) -> None:
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        header = {"spec": net.spec.to_dict(), "metadata": metadata or {}}
        _write_member(zf, "spec.json", json.dumps(header, sort_keys=True).encode())
        for kind, blocks in (("param", net.params), ("buffer", net.buffers)):
            for name, arr in blocks.items():
                buf = io.BytesIO()
                np.save(buf, arr, allow_pickle=False)
                _write_member(zf, f"{kind}/{name}.npy", buf.getvalue())


def load_checkpoint(path) -> tuple[Network, dict]:
    with zipfile.ZipFile(path, "r") as zf:
        header = json.loads(zf.read("spec.json"))
        net = Network(NetworkSpec.from_dict(header["spec"]))
        for info in zf.infolist():
            if not info.filename.endswith(".npy"):
                continue
            kind, name = info.filename[:-4].split("/", 1)
            arr = np.load(io.BytesIO(zf.read(info)), allow_pickle=False)
            target = net.params if kind == "param" else net.buffers
            if name not in target or target[name].shape != arr.shape:
                raise InputError(f"checkpoint block {name!r} does not match the stored spec")
            target[name][...] = arr
    return net, header["metadata"]
