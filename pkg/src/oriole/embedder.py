"""Feature extractor, softmax classifier and their SGD training.

The extractor is a fixed two-layer strided convolution stack followed by
an affine projection::

    (1, S, S) -> conv3x3/2, 8 maps, ReLU -> conv3x3/2, 16 maps, ReLU
              -> flatten -> affine -> feature_dim

Forward and backward passes are written out by hand over numpy arrays
(im2col for the convolutions).  All parameters live in one flat float64
vector; per-layer arrays are reshaped views into it.
"""

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, InputError, NumericError
from .rng import stream

log = logging.getLogger(__name__)

KERNEL = 3
STRIDE = 2
CHANNELS = (8, 16)


def _conv_out(n):
    return (n - KERNEL) // STRIDE + 1


@dataclass(frozen=True)
class Architecture:
    image_size: int = 32
    feature_dim: int = 32

    @property
    def spatial(self):
        s1 = _conv_out(self.image_size)
        return s1, _conv_out(s1)

    @property
    def shapes(self):
        s2 = self.spatial[1]
        c1, c2 = CHANNELS
        return {
            "w1": (c1, 1, KERNEL, KERNEL),
            "b1": (c1,),
            "w2": (c2, c1, KERNEL, KERNEL),
            "b2": (c2,),
            "w3": (c2 * s2 * s2, self.feature_dim),
            "b3": (self.feature_dim,),
        }

    @property
    def n_params(self):
        return sum(int(np.prod(s)) for s in self.shapes.values())

    def fan_in(self, name):
        shape = self.shapes[name]
        if name.startswith("w"):
            return int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        return self.fan_in("w" + name[1:])

    def descriptor(self):
        c1, c2 = CHANNELS
        return (
            f"in={self.image_size}x{self.image_size}x1;"
            f"conv{KERNEL}s{STRIDE}x{c1};relu;conv{KERNEL}s{STRIDE}x{c2};relu;"
            f"flatten;affine{self.feature_dim}"
        )

    def hash(self):
        return hashlib.sha256(self.descriptor().encode()).digest()[:8]


@dataclass
class EmbeddingModel:
    arch: Architecture
    params: np.ndarray

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (self.arch.n_params,):
            raise DimensionError(
                f"{self.arch.n_params} parameters expected, got {self.params.shape}"
            )

    @property
    def feature_dim(self):
        return self.arch.feature_dim

    def unpack(self, flat=None):
        """Named views into `flat` (defaults to the model's own parameters)."""
        flat = self.params if flat is None else flat
        out, off = {}, 0
        for name, shape in self.arch.shapes.items():
            n = int(np.prod(shape))
            out[name] = flat[off : off + n].reshape(shape)
            off += n
        return out

    def copy(self):
        return EmbeddingModel(self.arch, self.params.copy())

    @classmethod
    def zeros(cls, arch=None):
        arch = arch or Architecture()
        return cls(arch, np.zeros(arch.n_params))

    @classmethod
    def init(cls, seed, arch=None, scale=1.0):
        """Uniform(-s, s) weights with s = scale / sqrt(fan_in); zero biases."""
        arch = arch or Architecture()
        model = cls.zeros(arch)
        views = model.unpack()
        gen = stream(seed, "embedder-init")
        for name, view in views.items():
            if name.startswith("w"):
                s = scale / np.sqrt(arch.fan_in(name))
                view[...] = gen.uniform(-s, s, size=view.shape)
        return model


def _im2col(x):
    # x: (N, C, H, W) -> (N, Ho, Wo, C*K*K)
    v = sliding_window_view(x, (KERNEL, KERNEL), axis=(2, 3))[:, :, ::STRIDE, ::STRIDE]
    n, c, ho, wo = v.shape[:4]
    return v.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * KERNEL * KERNEL)


def _col2im(dcols, in_shape):
    n, c, h, w = in_shape
    ho, wo = dcols.shape[1:3]
    d = dcols.reshape(n, ho, wo, c, KERNEL, KERNEL)
    dx = np.zeros(in_shape)
    for i in range(KERNEL):
        for j in range(KERNEL):
            dx[:, :, i : i + STRIDE * ho : STRIDE, j : j + STRIDE * wo : STRIDE] += (
                d[..., i, j].transpose(0, 3, 1, 2)
            )
    return dx


def _as_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    s = model.arch.image_size
    if x.ndim != 3 or x.shape[1:] != (s, s):
        raise DimensionError(f"expected (N, {s}, {s}) input, got {x.shape}")
    return x, single


def _blas_mm(a, b):
    return a @ b


def _row_mm(a, b):
    # einsum's plain loops give each row the same bits whatever the batch
    # size; BLAS picks size-dependent kernels
    return np.einsum("...k,kj->...j", a, b)


def _forward(p, x, mm=_row_mm):
    n = x.shape[0]
    cols1 = _im2col(x[:, None])
    z1 = mm(cols1, p["w1"].reshape(len(p["b1"]), -1).T) + p["b1"]
    h1 = np.maximum(z1, 0.0)  # (N, H1, W1, C1)
    h1c = h1.transpose(0, 3, 1, 2)
    cols2 = _im2col(h1c)
    z2 = mm(cols2, p["w2"].reshape(len(p["b2"]), -1).T) + p["b2"]
    h2 = np.maximum(z2, 0.0)
    flat = h2.transpose(0, 3, 1, 2).reshape(n, -1)
    feats = mm(flat, p["w3"]) + p["b3"]
    cache = (x, cols1, z1, h1c, cols2, z2, flat)
    return feats, cache


def _backward(p, cache, upstream, want_params=True, mm=_row_mm):
    x, cols1, z1, h1c, cols2, z2, flat = cache
    grads = {}
    if want_params:
        grads["w3"] = flat.T @ upstream
        grads["b3"] = upstream.sum(axis=0)
    dflat = mm(upstream, p["w3"].T)
    dh2 = dflat.reshape(z2.shape[0], z2.shape[3], z2.shape[1], z2.shape[2])
    dz2 = dh2.transpose(0, 2, 3, 1) * (z2 > 0)
    c2 = z2.shape[3]
    dz2m = dz2.reshape(-1, c2)
    if want_params:
        grads["w2"] = (dz2m.T @ cols2.reshape(-1, cols2.shape[-1])).reshape(p["w2"].shape)
        grads["b2"] = dz2m.sum(axis=0)
    dcols2 = mm(dz2, p["w2"].reshape(c2, -1))
    dh1 = _col2im(dcols2, h1c.shape)
    dz1 = dh1.transpose(0, 2, 3, 1) * (z1 > 0)
    c1 = z1.shape[3]
    dz1m = dz1.reshape(-1, c1)
    if want_params:
        grads["w1"] = (dz1m.T @ cols1.reshape(-1, cols1.shape[-1])).reshape(p["w1"].shape)
        grads["b1"] = dz1m.sum(axis=0)
    dcols1 = mm(dz1, p["w1"].reshape(c1, -1))
    dx = _col2im(dcols1, (x.shape[0], 1) + x.shape[1:])[:, 0]
    return dx, grads


def forward(model, x):
    """Features of one image (d,) or a batch (N, d)."""
    xb, single = _as_batch(model, x)
    feats, _ = _forward(model.unpack(), xb)
    return feats[0] if single else feats


def _check_upstream(model, upstream, n, single):
    up = np.asarray(upstream, dtype=np.float64)
    want = (model.feature_dim,) if single else (n, model.feature_dim)
    if up.shape != want:
        raise DimensionError(f"upstream shape {up.shape}, expected {want}")
    return up[None] if single else up


def input_gradient(model, x, upstream):
    """d <forward(model, x), upstream> / dx."""
    xb, single = _as_batch(model, x)
    up = _check_upstream(model, upstream, len(xb), single)
    p = model.unpack()
    _, cache = _forward(p, xb)
    dx, _ = _backward(p, cache, up, want_params=False)
    return dx[0] if single else dx


def param_gradient(model, x, upstream):
    """d <forward(model, x), upstream> / d params, summed over the batch."""
    xb, single = _as_batch(model, x)
    up = _check_upstream(model, upstream, len(xb), single)
    p = model.unpack()
    _, cache = _forward(p, xb)
    _, grads = _backward(p, cache, up)
    return np.concatenate([grads[k].ravel() for k in model.arch.shapes])


def value_and_input_gradient(model, x, upstream_fn):
    """Forward a batch, then backprop `upstream_fn(features)` to the input.

    `upstream_fn` returns ``(per_image_value, d value / d features)``.
    """
    p = model.unpack()
    feats, cache = _forward(p, x)
    value, up = upstream_fn(feats)
    dx, _ = _backward(p, cache, up, want_params=False)
    return feats, value, dx


# --------------------------------------------------------------------------
# classifier


@dataclass
class ClassifierModel:
    backbone: EmbeddingModel
    head_w: np.ndarray
    head_b: np.ndarray
    class_labels: tuple = field(default_factory=tuple)

    def __post_init__(self):
        d = self.backbone.feature_dim
        c = len(self.class_labels)
        if self.head_w.shape != (d, c) or self.head_b.shape != (c,):
            raise DimensionError(
                f"head shapes {self.head_w.shape}/{self.head_b.shape} do not match d={d}, classes={c}"
            )

    def logits(self, x):
        xb, single = _as_batch(self.backbone, x)
        z = _row_mm(forward(self.backbone, xb), self.head_w) + self.head_b
        return z[0] if single else z

    def predict_proba(self, x):
        return softmax(self.logits(x))

    def predict(self, x):
        idx = np.argmax(self.logits(x), axis=-1)
        return np.asarray(self.class_labels)[idx]

    def flat_params(self):
        return np.concatenate([self.backbone.params, self.head_w.ravel(), self.head_b])


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    seed: int = 0
    weight_init_scale: float = 1.0
    # 0 freezes the backbone; 1 trains it at the full rate
    backbone_lr_scale: float = 1.0
    # L2 penalty on the head weights
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise InputError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InputError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise InputError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not self.weight_init_scale > 0:
            raise InputError("weight_init_scale must be > 0")
        if self.backbone_lr_scale < 0:
            raise InputError("backbone_lr_scale must be >= 0")
        if self.weight_decay < 0:
            raise InputError("weight_decay must be >= 0")


def _head_step(head_w, head_b, feats, yb):
    probs = softmax(feats @ head_w + head_b)
    n = len(yb)
    loss = -np.log(probs[np.arange(n), yb] + 1e-300).mean()
    dz = probs
    dz[np.arange(n), yb] -= 1.0
    dz /= n
    return loss, dz


def dataset_loss(clf, images, labels):
    """Mean cross-entropy of `clf` on (images, labels)."""
    idx = _label_indices(clf.class_labels, labels)
    probs = clf.predict_proba(images)
    return float(-np.log(probs[np.arange(len(idx)), idx] + 1e-300).mean())


def _label_indices(class_labels, labels):
    lookup = {lab: i for i, lab in enumerate(class_labels)}
    try:
        return np.array([lookup[lab] for lab in np.asarray(labels).tolist()], dtype=np.int64)
    except KeyError as exc:
        raise InputError(f"label {exc.args[0]!r} not in label set") from None


def train_classifier(dataset, cfg, init_backbone=None, class_labels=None):
    """Mini-batch SGD on softmax cross-entropy.

    `dataset` is anything with `images` (N, S, S) and `labels` (N,).
    The backbone starts from `init_backbone` when given (it is copied, never
    mutated), otherwise from a seeded random initialization.
    """
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = np.asarray(dataset.labels)
    if len(images) == 0:
        raise InputError("cannot train on an empty dataset")
    if class_labels is None:
        class_labels = tuple(sorted(set(labels.tolist())))
    y = _label_indices(class_labels, labels)

    if init_backbone is not None:
        backbone = init_backbone.copy()
        if images.shape[1:] != (backbone.arch.image_size,) * 2:
            raise DimensionError(f"images {images.shape[1:]} do not fit the backbone")
    else:
        arch = Architecture(image_size=images.shape[1])
        backbone = EmbeddingModel.init(cfg.seed, arch, cfg.weight_init_scale)
    d, c = backbone.feature_dim, len(class_labels)
    gen = stream(cfg.seed, "head-init")
    s = cfg.weight_init_scale / np.sqrt(d)
    head_w = gen.uniform(-s, s, size=(d, c))
    head_b = np.zeros(c)

    order_gen = stream(cfg.seed, "minibatch-order")
    lr = cfg.learning_rate
    lr_bb = lr * cfg.backbone_lr_scale
    train_bb = lr_bb > 0
    n = len(images)
    p = backbone.unpack()
    # a frozen backbone maps every image to the same features all run long
    frozen = None if train_bb else _forward(p, images, mm=_blas_mm)[0]
    for epoch in range(cfg.epochs):
        order = order_gen.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if frozen is None:
                feats, cache = _forward(p, images[idx], mm=_blas_mm)
            else:
                feats = frozen[idx]
            loss, dz = _head_step(head_w, head_b, feats, y[idx])
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            total += loss * len(idx)
            if frozen is None:
                _, g_bb = _backward(p, cache, dz @ head_w.T, mm=_blas_mm)
            head_w -= lr * (feats.T @ dz + cfg.weight_decay * head_w)
            head_b -= lr * dz.sum(axis=0)
            if frozen is None:
                for name, g in g_bb.items():
                    p[name] -= lr_bb * g
        log.debug("epoch %d loss %.6f", epoch, total / n)
    return ClassifierModel(backbone, head_w, head_b, tuple(class_labels))


def pretrain_feature_extractor(public_pool, cfg):
    """Train a classifier on the public pool and keep only its backbone."""
    return train_classifier(public_pool, cfg).backbone
