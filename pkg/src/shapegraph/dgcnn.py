"""Dynamic-graph EdgeConv network over 2-D point clouds.

Every EdgeConv layer rebuilds a k-nearest-neighbour graph from its own
input features, computes for each edge (i, j)::

    e_ij = BN(act(theta . (x_j - x_i) + phi . x_i))

and takes the elementwise max over the k edges of node i. The four layer
outputs are concatenated per point (64+64+128+256 = 512) and pooled over
points by max and by sum into a 1024-d embedding, which feeds a dense
head (1024 -> 256 with batch norm, LeakyReLU and dropout, then 256 -> C).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .dataio import META_MAGIC, BadMagic, Truncated, pack_meta, unpack_meta
from .tensorcore import ShapeMismatch, Tensor

CHECKPOINT_MAGIC = b"DGW1"
CHECKPOINT_VERSION = 1


class KTooLarge(ValueError):
    pass


class CloudTooSmall(ValueError):
    pass


class ArchMismatch(ValueError):
    pass


# --------------------------------------------------------------------------
# graphs

def pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    """Squared l2 distances between rows, from explicit differences.

    ``x`` is (N, D) or (B, N, D). Differences are formed directly rather
    than via the |a|^2 + |b|^2 - 2ab expansion, which loses ties.
    """
    n, d = x.shape[-2], x.shape[-1]
    out = np.empty(x.shape[:-1] + (n,), dtype=x.dtype)
    step = max(1, (1 << 22) // max(1, n * d * (x.size // (n * d))))
    for lo in range(0, n, step):
        diff = x[..., lo : lo + step, None, :] - x[..., None, :, :]
        out[..., lo : lo + step, :] = np.einsum("...d,...d->...", diff, diff)
    return out


def knn_graph(features, k: int) -> np.ndarray:
    """Indices of the k nearest other rows, ordered by (distance, index).

    Returns an int array of shape (..., N, k) for features (..., N, D).
    """
    x = features.data if isinstance(features, Tensor) else np.asarray(features)
    n = x.shape[-2]
    if k >= n or k < 1:
        raise KTooLarge(f"k={k} needs 1 <= k < N={n}")
    d2 = pairwise_sq_dists(x)
    diag = np.arange(n)
    d2[..., diag, diag] = np.inf
    return np.argsort(d2, axis=-1, kind="stable")[..., :k]


# --------------------------------------------------------------------------
# model

@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    k: int = 5
    widths: tuple = (64, 64, 128, 256)
    hidden: int = 256
    in_dim: int = 2
    keep_prob: float = 0.5
    slope: float = 0.2  # 0.0 gives plain ReLU
    use_bn: bool = True
    bn_momentum: float = 0.9

    @property
    def point_dim(self) -> int:
        return int(sum(self.widths))

    @property
    def embed_dim(self) -> int:
        return 2 * self.point_dim


@dataclass
class EdgeConvLayer:
    """EdgeConv weights; ``theta`` and ``phi`` are stored (in_dim, out_dim)."""

    theta: Tensor
    phi: Tensor
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray

    @property
    def out_dim(self) -> int:
        return self.theta.shape[1]

    def params(self) -> list[Tensor]:
        return [self.theta, self.phi, self.gamma, self.beta]


def _glorot(rng, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


@dataclass
class DgcnnModel:
    config: ModelConfig
    layers: list
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    head_gamma: Tensor
    head_beta: Tensor
    head_mean: np.ndarray
    head_var: np.ndarray
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0), repr=False)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "DgcnnModel":
        rng = np.random.default_rng(seed)
        layers = []
        fan_in = config.in_dim
        for width in config.widths:
            layers.append(
                EdgeConvLayer(
                    theta=Tensor(_glorot(rng, fan_in, width, dtype), requires_grad=True),
                    phi=Tensor(_glorot(rng, fan_in, width, dtype), requires_grad=True),
                    gamma=Tensor(np.ones(width, dtype), requires_grad=True),
                    beta=Tensor(np.zeros(width, dtype), requires_grad=True),
                    running_mean=np.zeros(width, dtype),
                    running_var=np.ones(width, dtype),
                )
            )
            fan_in = width
        e, h, c = config.embed_dim, config.hidden, config.num_classes
        return cls(
            config,
            layers,
            w1=Tensor(_glorot(rng, e, h, dtype), requires_grad=True),
            b1=Tensor(np.zeros(h, dtype), requires_grad=True),
            w2=Tensor(_glorot(rng, h, c, dtype), requires_grad=True),
            b2=Tensor(np.zeros(c, dtype), requires_grad=True),
            head_gamma=Tensor(np.ones(h, dtype), requires_grad=True),
            head_beta=Tensor(np.zeros(h, dtype), requires_grad=True),
            head_mean=np.zeros(h, dtype),
            head_var=np.ones(h, dtype),
            rng=np.random.default_rng([seed, 1]),
        )

    def params(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out + [self.w1, self.b1, self.head_gamma, self.head_beta, self.w2, self.b2]

    def buffers(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.running_mean, layer.running_var])
        return out + [self.head_mean, self.head_var]

    def zero_grad(self):
        for p in self.params():
            p.grad = None

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params())

    def astype(self, dtype) -> "DgcnnModel":
        """Deep copy with every array cast to ``dtype``."""
        def cp(t):
            return Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)

        layers = [
            EdgeConvLayer(cp(l.theta), cp(l.phi), cp(l.gamma), cp(l.beta),
                          l.running_mean.astype(dtype), l.running_var.astype(dtype))
            for l in self.layers
        ]
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng.bit_generator.state
        return DgcnnModel(
            self.config, layers, cp(self.w1), cp(self.b1), cp(self.w2), cp(self.b2),
            cp(self.head_gamma), cp(self.head_beta),
            self.head_mean.astype(dtype), self.head_var.astype(dtype), rng,
        )

    def copy(self) -> "DgcnnModel":
        return self.astype(self.w1.dtype)


def edgeconv_forward(x: Tensor, graph: np.ndarray, layer: EdgeConvLayer, config: ModelConfig, train: bool) -> Tensor:
    """One EdgeConv layer on (B, N, M_in) features with a (B, N, k) graph."""
    if x.ndim != 3 or x.shape[-1] != layer.theta.shape[0]:
        raise ShapeMismatch(f"edgeconv: input {x.shape} vs theta {layer.theta.shape}")
    if graph.shape[:2] != x.shape[:2]:
        raise ShapeMismatch(f"edgeconv: graph {graph.shape} vs input {x.shape}")
    # theta.(x_j - x_i) + phi.x_i == (x theta)_j + (x (phi - theta))_i
    local = tc.matmul(x, layer.theta)
    centre = tc.sub(tc.matmul(x, layer.phi), local)
    b, n, m = local.shape
    edges = tc.add(tc.gather_rows(local, graph), tc.reshape(centre, (b, n, 1, m)))
    edges = tc.leaky_relu(edges, config.slope)
    if config.use_bn:
        edges = tc.batch_norm(edges, layer.gamma, layer.beta, layer.running_mean, layer.running_var,
                              train, config.bn_momentum)
    out, _ = tc.max_over_axis(edges, axis=2)
    return out


def _as_batch(clouds) -> tuple[Tensor, bool]:
    if isinstance(clouds, Tensor):
        x = clouds
    else:
        pts = getattr(clouds, "points", clouds)
        x = Tensor(np.asarray(pts))
    single = x.ndim == 2
    if single:
        x = tc.reshape(x, (1,) + x.shape)
    return x, single


def forward(model: DgcnnModel, clouds, train: bool = False, rng: np.random.Generator | None = None):
    """Run the network on one (S, 2) cloud or a (B, S, 2) batch.

    Returns ``(logits, embedding)`` tensors; the leading batch axis is
    dropped for single-cloud input. ``rng`` drives dropout in training mode
    and defaults to the model's own generator.
    """
    cfg = model.config
    x, single = _as_batch(clouds)
    if x.dtype != model.w1.dtype:
        x = Tensor(x.data.astype(model.w1.dtype), requires_grad=x.requires_grad)
    if x.shape[-1] != cfg.in_dim:
        raise ShapeMismatch(f"expected {cfg.in_dim}-d points, got {x.shape}")
    if x.shape[1] < cfg.k + 1:
        raise CloudTooSmall(f"cloud has {x.shape[1]} points, need at least k+1 = {cfg.k + 1}")

    feats = []
    h = x
    for layer in model.layers:
        graph = knn_graph(h.data, cfg.k)
        h = edgeconv_forward(h, graph, layer, cfg, train)
        feats.append(h)
    per_point = tc.concat(feats, axis=-1)
    pooled_max, _ = tc.max_over_axis(per_point, axis=1)
    pooled_sum = tc.sum_over_axis(per_point, axis=1)
    embedding = tc.concat([pooled_max, pooled_sum], axis=-1)

    hid = tc.add(tc.matmul(embedding, model.w1), model.b1)
    if cfg.use_bn:
        hid = tc.batch_norm(hid, model.head_gamma, model.head_beta, model.head_mean, model.head_var,
                            train, cfg.bn_momentum)
    hid = tc.leaky_relu(hid, cfg.slope)
    hid = tc.dropout(hid, cfg.keep_prob, train, rng if rng is not None else model.rng)
    logits = tc.add(tc.matmul(hid, model.w2), model.b2)
    if single:
        return tc.reshape(logits, logits.shape[1:]), tc.reshape(embedding, embedding.shape[1:])
    return logits, embedding


def predict(model: DgcnnModel, clouds: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode logits for a (n, S, 2) array, batched."""
    out = []
    for lo in range(0, len(clouds), batch_size):
        logits, _ = forward(model, np.asarray(clouds[lo : lo + batch_size]), train=False)
        out.append(logits.data)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes), model.w1.dtype)


def embed(model: DgcnnModel, clouds: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode 1024-d embeddings for a (n, S, 2) array."""
    out = []
    for lo in range(0, len(clouds), batch_size):
        _, emb = forward(model, np.asarray(clouds[lo : lo + batch_size]), train=False)
        out.append(emb.data)
    return np.concatenate(out) if out else np.zeros((0, model.config.embed_dim), model.w1.dtype)


# --------------------------------------------------------------------------
# DGW1 checkpoints (little-endian):
#   "DGW1", u32 version, u32 in_dim, u32 n_layers, u32 widths[n_layers],
#   u32 hidden, u32 num_classes, u32 k, u32 use_bn,
#   f64 keep_prob, f64 slope, f64 bn_momentum,
#   then f32 arrays: per layer theta, phi, gamma, beta, running_mean, running_var;
#   head w1, b1, bn gamma, bn beta, bn running_mean, bn running_var, w2, b2.

def _checkpoint_arrays(model: DgcnnModel) -> list[np.ndarray]:
    arrays = []
    for l in model.layers:
        arrays += [l.theta.data, l.phi.data, l.gamma.data, l.beta.data, l.running_mean, l.running_var]
    return arrays + [
        model.w1.data, model.b1.data, model.head_gamma.data, model.head_beta.data,
        model.head_mean, model.head_var, model.w2.data, model.b2.data,
    ]


def save_model(model: DgcnnModel, path, meta: dict | None = None) -> None:
    cfg = model.config
    header = CHECKPOINT_MAGIC + struct.pack("<III", CHECKPOINT_VERSION, cfg.in_dim, len(cfg.widths))
    header += struct.pack(f"<{len(cfg.widths)}I", *cfg.widths)
    header += struct.pack("<IIII", cfg.hidden, cfg.num_classes, cfg.k, int(cfg.use_bn))
    header += struct.pack("<ddd", cfg.keep_prob, cfg.slope, cfg.bn_momentum)
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in _checkpoint_arrays(model))
    Path(path).write_bytes(header + body + pack_meta(meta))


def load_model(path, expect: ModelConfig | None = None) -> DgcnnModel:
    """Load a DGW1 checkpoint.

    Raises ArchMismatch if the header disagrees with ``expect`` or with the
    size of the weight payload.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise Truncated(f"{path}: {len(raw)} bytes")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"{path}: magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    version, in_dim, n_layers = struct.unpack_from("<III", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ArchMismatch(f"{path}: unsupported checkpoint version {version}")
    if n_layers > 64:
        raise ArchMismatch(f"{path}: implausible layer count {n_layers}")
    pos = 16
    widths = struct.unpack_from(f"<{n_layers}I", raw, pos)
    pos += 4 * n_layers
    hidden, num_classes, k, use_bn = struct.unpack_from("<IIII", raw, pos)
    pos += 16
    keep_prob, slope, momentum = struct.unpack_from("<ddd", raw, pos)
    pos += 24
    cfg = ModelConfig(
        num_classes=num_classes, k=k, widths=tuple(widths), hidden=hidden, in_dim=in_dim,
        keep_prob=keep_prob, slope=slope, use_bn=bool(use_bn), bn_momentum=momentum,
    )
    if expect is not None:
        arch = ("num_classes", "widths", "hidden", "in_dim")
        if any(getattr(expect, a) != getattr(cfg, a) for a in arch):
            raise ArchMismatch(f"{path}: checkpoint architecture {cfg} != expected {expect}")
        cfg = expect

    model = DgcnnModel.init(cfg)
    arrays = _checkpoint_arrays(model)
    need = sum(a.size for a in arrays) * 4
    tail = raw[pos + need :]
    if len(raw) - pos < need or (tail and tail[:4] != META_MAGIC):
        raise ArchMismatch(f"{path}: header implies {need} weight bytes, file holds {len(raw) - pos}")
    unpack_meta(tail, path)
    for a in arrays:
        a[...] = np.frombuffer(raw, dtype="<f4", count=a.size, offset=pos).reshape(a.shape)
        pos += a.size * 4
    return model
