"""Switchable task heads and task metrics.

Two heads can sit on top of the shared backbone:

* classification: 1x1 conv -> BN -> Swish -> global pool -> linear
* segmentation: ASPP (dilated depthwise-separable branches plus an
  image-pooling branch) -> 1x1 fuse -> per-pixel classifier -> bilinear
  upsampling back to the input resolution

Head parameters live in the same store as the backbone under the
``head.`` prefix, so attaching or detaching a head never touches backbone
tensors.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError, UsageError
from .nn import (
    BatchNorm,
    BilinearUpsample,
    Conv2d,
    DepthwiseConv2d,
    GlobalAvgPool,
    Linear,
    Module,
    ReLU,
    Sequential,
    Swish,
)

TASKS = ("classification", "segmentation")
# the metric that search and validation logs optimise, per task
TASK_METRIC = {"classification": "oa", "segmentation": "mean_f1"}
HEAD_PREFIX = "head."


@dataclass(frozen=True)
class HeadSpec:
    task: str
    num_classes: int
    channels: int = 64
    rates: tuple = (1, 2, 4)

    def __post_init__(self):
        if self.task not in TASKS:
            raise UsageError(f"unknown task {self.task!r}")
        object.__setattr__(self, "rates", tuple(int(r) for r in self.rates))

    def to_dict(self):
        d = asdict(self)
        d["rates"] = list(self.rates)
        return d

    @classmethod
    def from_dict(cls, d):
        return None if d is None else cls(**d)


def classification_head(space, num_classes=None):
    return HeadSpec("classification", num_classes or space.num_classes, space.head_channels)


def segmentation_head(num_classes, channels=64, rates=(1, 2, 4)):
    return HeadSpec("segmentation", num_classes, channels, rates)


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _bn_init(params, buffers, prefix, c, dtype):
    params[prefix + ".gamma"] = np.ones(c, dtype)
    params[prefix + ".beta"] = np.zeros(c, dtype)
    buffers[prefix + ".mean"] = np.zeros(c, dtype)
    buffers[prefix + ".var"] = np.ones(c, dtype)


def init_head_params(spec, c_in, rng, dtype=np.float32):
    p, b = {}, {}
    h = HEAD_PREFIX
    if spec.task == "classification":
        p[h + "conv.w"] = _he(rng, (1, 1, c_in, spec.channels), c_in, dtype)
        _bn_init(p, b, h + "bn", spec.channels, dtype)
        p[h + "fc.w"] = (rng.standard_normal((spec.channels, spec.num_classes)) * 0.01).astype(dtype)
        p[h + "fc.b"] = np.zeros(spec.num_classes, dtype)
        return p, b
    a = spec.channels
    for r in spec.rates:
        pre = f"{h}aspp.r{r}"
        p[pre + ".dw.w"] = _he(rng, (3, 3, c_in), 9, dtype)
        _bn_init(p, b, pre + ".bn1", c_in, dtype)
        p[pre + ".pw.w"] = _he(rng, (1, 1, c_in, a), c_in, dtype)
        _bn_init(p, b, pre + ".bn2", a, dtype)
    p[h + "aspp.pool.w"] = _he(rng, (c_in, a), c_in, dtype)
    p[h + "aspp.pool.b"] = np.zeros(a, dtype)
    n_cat = a * (len(spec.rates) + 1)
    p[h + "fuse.w"] = _he(rng, (1, 1, n_cat, a), n_cat, dtype)
    _bn_init(p, b, h + "fuse.bn", a, dtype)
    p[h + "cls.w"] = (rng.standard_normal((1, 1, a, spec.num_classes)) * 0.01).astype(dtype)
    p[h + "cls.b"] = np.zeros(spec.num_classes, dtype)
    return p, b


class ASPP(Module):
    """Parallel branches concatenated on channels, then fused."""

    def __init__(self, branches, pool, fuse):
        self.branches = branches
        self.pool = pool
        self.fuse = fuse

    def layers(self):
        for br in self.branches:
            yield from br.layers()
        yield from self.pool.layers()
        yield from self.fuse.layers()

    def forward(self, x, mode="train"):
        outs = [br.forward(x, mode) for br in self.branches]
        pooled = self.pool.forward(x, mode)
        n, h, w, _ = x.shape
        outs.append(np.broadcast_to(pooled[:, None, None, :], (n, h, w, pooled.shape[1])))
        self._widths = [o.shape[-1] for o in outs]
        return self.fuse.forward(np.concatenate(outs, axis=-1), mode)

    def backward(self, dout):
        dcat = self.fuse.backward(dout)
        splits = np.split(dcat, np.cumsum(self._widths)[:-1], axis=-1)
        dx = self.pool.backward(splits[-1].sum(axis=(1, 2)))
        for br, d in zip(self.branches, splits[:-1]):
            dx = dx + br.backward(d)
        return dx


def _bind(layer, store, names_keys, buffers=()):
    for name, key in names_keys:
        layer.params[name] = store.params[key]
        layer.refs[name] = (key, Ellipsis)
    for name, key in buffers:
        layer.buffers[name] = store.buffers[key]
        layer.refs[name] = (key, Ellipsis)
    return layer


def _bn_layer(store, prefix):
    return _bind(
        BatchNorm(store.params[prefix + ".gamma"], store.params[prefix + ".beta"],
                  store.buffers[prefix + ".mean"], store.buffers[prefix + ".var"]),
        store, [("gamma", prefix + ".gamma"), ("beta", prefix + ".beta")],
        [("mean", prefix + ".mean"), ("var", prefix + ".var")])


def _conv(store, key, bias_key=None, **kw):
    bias = store.params[bias_key] if bias_key else None
    layer = Conv2d(store.params[key], bias, **kw)
    return _bind(layer, store, [("w", key)] + ([("b", bias_key)] if bias_key else []))


def build_head(spec, store, output_size):
    """Executable head module bound to the ``head.*`` tensors of ``store``."""
    h = HEAD_PREFIX
    if spec.task == "classification":
        fc = Linear(store.params[h + "fc.w"], store.params[h + "fc.b"])
        _bind(fc, store, [("w", h + "fc.w"), ("b", h + "fc.b")])
        return Sequential(_conv(store, h + "conv.w"), _bn_layer(store, h + "bn"), Swish(),
                          GlobalAvgPool(), fc)
    branches = []
    for r in spec.rates:
        pre = f"{h}aspp.r{r}"
        dw = _bind(DepthwiseConv2d(store.params[pre + ".dw.w"], dilation=r), store,
                   [("w", pre + ".dw.w")])
        branches.append(Sequential(dw, _bn_layer(store, pre + ".bn1"), ReLU(),
                                   _conv(store, pre + ".pw.w"), _bn_layer(store, pre + ".bn2"),
                                   ReLU()))
    pool_fc = Linear(store.params[h + "aspp.pool.w"], store.params[h + "aspp.pool.b"])
    _bind(pool_fc, store, [("w", h + "aspp.pool.w"), ("b", h + "aspp.pool.b")])
    pool = Sequential(GlobalAvgPool(), pool_fc, ReLU())
    fuse = Sequential(_conv(store, h + "fuse.w"), _bn_layer(store, h + "fuse.bn"), ReLU())
    return Sequential(ASPP(branches, pool, fuse), _conv(store, h + "cls.w", h + "cls.b"),
                      BilinearUpsample((output_size, output_size)))


def attach_head(store, spec, seed=0):
    """Add freshly initialised head tensors to ``store`` (in place)."""
    if store.head is not None:
        raise UsageError(f"a {store.head.task} head is already attached; detach it first")
    rng = np.random.default_rng(seed)
    dtype = store.dtype
    params, buffers = init_head_params(spec, store.space.stages[-1].out_channels, rng, dtype)
    store.params.update(params)
    store.buffers.update(buffers)
    store.head = spec
    return store


def detach_head(store):
    if store.head is None:
        raise UsageError("no head attached")
    for d in (store.params, store.buffers):
        for k in [k for k in d if k.startswith(HEAD_PREFIX)]:
            del d[k]
    store.head = None
    return store


def confusion_matrix(pred, labels, num_classes):
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    return np.bincount(labels * num_classes + pred,
                       minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def _safe_div(a, b):
    out = np.zeros_like(a, dtype=np.float64)
    np.divide(a, b, out=out, where=b > 0)
    return out


def classification_metrics(pred, labels, num_classes):
    """OA plus per-class precision at the argmax decision; mAP is their mean.

    Classes that neither occur nor get predicted are left out of the mean.
    """
    cm = confusion_matrix(pred, labels, num_classes)
    total = cm.sum()
    if total == 0:
        raise DataError("empty split")
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = _safe_div(tp, predicted)
    present = (predicted + actual) > 0
    return {
        "oa": float(tp.sum() / total),
        "map": float(precision[present].mean()),
        "per_class_precision": precision.tolist(),
    }


def segmentation_metrics(pred, labels, num_classes):
    """Pixel OA, per-class F1 = 2PR/(P+R), mean F1 and per-class pixel accuracy."""
    cm = confusion_matrix(pred, labels, num_classes)
    total = cm.sum()
    if total == 0:
        raise DataError("empty split")
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = _safe_div(tp, predicted)
    recall = _safe_div(tp, actual)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    present = (predicted + actual) > 0
    return {
        "oa": float(tp.sum() / total),
        "mean_f1": float(f1[present].mean()),
        "per_class_f1": f1.tolist(),
        "per_class_accuracy": recall.tolist(),
    }


def metric_report(task, pred, labels, num_classes):
    if task == "classification":
        metrics = classification_metrics(pred, labels, num_classes)
    elif task == "segmentation":
        metrics = segmentation_metrics(pred, labels, num_classes)
    else:
        raise UsageError(f"unknown task {task!r}")
    per_class = {k: metrics.pop(k) for k in list(metrics) if k.startswith("per_class")}
    return {"task": task, "metrics": metrics, "per_class": per_class}


def evaluate(model, images, labels, task=None, batch_size=256):
    """Metric report for a subnet view or standalone model on one split.

    ``model`` needs ``predict(images, batch_size)`` returning logits and a
    ``head`` attribute. Subnet views should be recalibrated beforehand.
    """
    if len(images) == 0:
        raise DataError("empty split")
    head = model.head
    task = task or head.task
    if task != head.task:
        raise DataError(f"model carries a {head.task} head, asked to evaluate {task}")
    logits = model.predict(images, batch_size=batch_size)
    return metric_report(task, logits.argmax(axis=-1), labels, head.num_classes)
