"""Shared supernet weights and executable subnet views.

Every searchable layer owns one weight slot per kernel size, allocated at
the maximal expansion ratio. A subnet view picks the slot named by each gene
and activates the leading ``hidden_channels(e, c_in)`` channels of it: the
first output channels of the expand conv, the matching depthwise and SE
channels, and the matching input channels of the project conv. Layers of
the view hold numpy *views* of those prefixes, so a forward through the
view reads the store directly and gradients scatter back into exactly the
selected slices.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointError,
    CheckpointHashError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ShapeError,
    UsageError,
)
from .heads import HeadSpec, build_head
from .nn import (
    BatchNorm,
    Conv2d,
    DepthwiseConv2d,
    Residual,
    Sequential,
    SqueezeExcite,
    activation,
)
from .space import (
    Genotype,
    SearchSpace,
    decode_genotype,
    encode_genotype,
    hidden_channels,
    validate_genotype,
)

FORMAT_VERSION = 1
BLOB_NAME = "tensors.bin"
MANIFEST_NAME = "manifest.json"


@dataclass
class WeightStore:
    """Supernet (or standalone) parameters plus stage metadata.

    ``genotype`` is set for standalone models, whose tensors hold only the
    slices one architecture uses.
    """

    space: SearchSpace
    params: dict
    buffers: dict
    stage: str = "init"
    head: HeadSpec = None
    genotype: Genotype = None
    provenance: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def is_standalone(self):
        return self.genotype is not None

    def backbone_items(self):
        return {k: v for k, v in self.params.items() if not k.startswith("head.")}

    def num_params(self):
        return int(sum(v.size for v in self.params.values()))

    def copy(self):
        return WeightStore(self.space, {k: v.copy() for k, v in self.params.items()},
                           {k: v.copy() for k, v in self.buffers.items()}, self.stage,
                           self.head, self.genotype, dict(self.provenance))


def slot_prefix(layer, kernel):
    return f"L{layer}.k{kernel}"


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _bn_init(params, buffers, prefix, c, dtype):
    params[prefix + ".gamma"] = np.ones(c, dtype)
    params[prefix + ".beta"] = np.zeros(c, dtype)
    buffers[prefix + ".mean"] = np.zeros(c, dtype)
    buffers[prefix + ".var"] = np.ones(c, dtype)


def _init_block(params, buffers, prefix, rng, c_in, hidden, c_out, k, dtype, expand=True):
    if expand:
        params[prefix + ".expand.w"] = _he(rng, (1, 1, c_in, hidden), c_in, dtype)
        _bn_init(params, buffers, prefix + ".bn1", hidden, dtype)
    params[prefix + ".dw.w"] = _he(rng, (k, k, hidden), k * k, dtype)
    _bn_init(params, buffers, prefix + ".bn2", hidden, dtype)
    params[prefix + ".se.w1"] = _he(rng, (hidden, hidden), hidden, dtype)
    params[prefix + ".se.b1"] = np.zeros(hidden, dtype)
    params[prefix + ".se.w2"] = _he(rng, (hidden, hidden), hidden, dtype)
    params[prefix + ".se.b2"] = np.zeros(hidden, dtype)
    params[prefix + ".project.w"] = _he(rng, (1, 1, hidden, c_out), hidden, dtype)
    _bn_init(params, buffers, prefix + ".bn3", c_out, dtype)


def init_weight_store(space, seed=0, dtype=np.float32, head=None):
    """Fan-in scaled normal conv/linear weights, BN gamma=1, beta=0."""
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}
    c0 = space.stem_channels
    params["stem.conv.w"] = _he(rng, (3, 3, space.in_channels, c0), 9 * space.in_channels, dtype)
    _bn_init(params, buffers, "stem.bn", c0, dtype)
    _init_block(params, buffers, "first", rng, c0, c0, space.first_block_channels, 3, dtype,
                expand=False)
    for li, (c_in, c_out, _, _, _) in enumerate(space.layer_plan()):
        hidden = hidden_channels(space.max_expansion, c_in)
        for k in space.kernel_choices:
            _init_block(params, buffers, slot_prefix(li, k), rng, c_in, hidden, c_out, k, dtype)
    store = WeightStore(space, params, buffers)
    if head is not None:
        from .heads import attach_head
        attach_head(store, head, seed=seed + 1)
    return store


class _Binder:
    """Builds layers whose tensors are prefix views into ``store``."""

    def __init__(self, store):
        self.store = store

    def conv(self, key, c_in, c_out, stride=1):
        slc = (slice(None), slice(None), slice(0, c_in), slice(0, c_out))
        layer = Conv2d(self.store.params[key][slc], stride=stride)
        layer.refs["w"] = (key, slc)
        return layer

    def depthwise(self, key, c, stride, dilation):
        slc = (slice(None), slice(None), slice(0, c))
        layer = DepthwiseConv2d(self.store.params[key][slc], stride=stride, dilation=dilation)
        layer.refs["w"] = (key, slc)
        return layer

    def bn(self, prefix, c):
        slc = (slice(0, c),)
        p, b = self.store.params, self.store.buffers
        layer = BatchNorm(p[prefix + ".gamma"][slc], p[prefix + ".beta"][slc],
                          b[prefix + ".mean"][slc], b[prefix + ".var"][slc])
        for name in ("gamma", "beta"):
            layer.refs[name] = (f"{prefix}.{name}", slc)
        for name in ("mean", "var"):
            layer.refs[name] = (f"{prefix}.{name}", slc)
        return layer

    def se(self, prefix, c):
        p = self.store.params
        sq = (slice(0, c), slice(0, c))
        vec = (slice(0, c),)
        layer = SqueezeExcite(p[prefix + ".w1"][sq], p[prefix + ".b1"][vec],
                              p[prefix + ".w2"][sq], p[prefix + ".b2"][vec])
        layer.refs.update(w1=(prefix + ".w1", sq), b1=(prefix + ".b1", vec),
                          w2=(prefix + ".w2", sq), b2=(prefix + ".b2", vec))
        return layer

    def block(self, prefix, c_in, hidden, c_out, k, stride, dilation, act, expand=True):
        mods = []
        if expand:
            mods += [self.conv(prefix + ".expand.w", c_in, hidden),
                     self.bn(prefix + ".bn1", hidden), activation(act)]
        mods += [self.depthwise(prefix + ".dw.w", hidden, stride, dilation),
                 self.bn(prefix + ".bn2", hidden), activation(act),
                 self.se(prefix + ".se", hidden),
                 self.conv(prefix + ".project.w", hidden, c_out),
                 self.bn(prefix + ".bn3", c_out)]
        body = Sequential(*mods)
        if stride == 1 and c_in == c_out:
            return Residual(body)
        return body


def _stage_geometry(space, dilate_last):
    """Per searchable layer ``(stride, dilation)``.

    With ``dilate_last`` the last downsampling stage keeps its resolution and
    dilates its depthwise convs (and those of any later stage) instead.
    """
    plan = space.layer_plan()
    geo = [(stride, 1) for _, _, stride, _, _ in plan]
    if not dilate_last:
        return geo
    strided = [si for si, s in enumerate(space.stages) if s.stride > 1]
    if not strided:
        return geo
    last = strided[-1]
    return [(1, 2) if si >= last else g for g, (_, _, _, _, si) in zip(geo, plan)]


def build_network(store, genotype, head=True):
    """Executable module for ``genotype`` reading tensors from ``store``."""
    space = store.space
    validate_genotype(space, genotype)
    b = _Binder(store)
    c0 = space.stem_channels
    mods = [b.conv("stem.conv.w", space.in_channels, c0, space.stem_stride),
            b.bn("stem.bn", c0), activation("relu"),
            b.block("first", c0, c0, space.first_block_channels, 3, 1, 1, "relu", expand=False)]
    dilate = head and store.head is not None and store.head.task == "segmentation"
    for li, ((c_in, c_out, _, act, _), (k, e), (stride, dil)) in enumerate(
            zip(space.layer_plan(), genotype, _stage_geometry(space, dilate))):
        mods.append(b.block(slot_prefix(li, k), c_in, hidden_channels(e, c_in), c_out, k,
                            stride, dil, act))
    if head:
        if store.head is None:
            raise UsageError("no head attached to the store")
        mods.append(build_head(store.head, store, space.input_resolution))
    return Sequential(*mods)


class SubnetView:
    """One architecture executed with weights inherited from a store."""

    def __init__(self, store, genotype, head=True):
        self.store = store
        self.genotype = genotype
        self.network = build_network(store, genotype, head=head)
        self.recalibrated = False

    @property
    def head(self):
        return self.store.head

    @property
    def space(self):
        return self.store.space

    def forward(self, x, mode="train"):
        return self.network.forward(x, mode)

    def backward(self, dout):
        return self.network.backward(dout)

    def layers(self):
        return list(self.network.layers())

    def bn_layers(self):
        return [layer for layer in self.network.layers() if isinstance(layer, BatchNorm)]

    def predict(self, images, batch_size=256):
        outs = [self.network.forward(images[i:i + batch_size], "eval")
                for i in range(0, len(images), batch_size)]
        return np.concatenate(outs, axis=0)

    def accumulate_grads(self, grads, scale=1.0):
        """Add this view's parameter gradients into full-size ``grads``.

        Returns the set of store keys that received a gradient.
        """
        touched = set()
        for layer in self.network.layers():
            for name, g in layer.grads.items():
                key, slc = layer.refs[name]
                full = grads.get(key)
                if full is None:
                    full = grads[key] = np.zeros_like(self.store.params[key])
                if scale == 1.0:
                    full[slc] += g
                else:
                    full[slc] += scale * g
                touched.add(key)
            layer.grads = {}
        return touched

    def param_refs(self):
        """``(key, slice)`` of every parameter and buffer the view reads."""
        refs = {}
        for layer in self.network.layers():
            for name, (key, slc) in layer.refs.items():
                refs[key] = slc
        return refs


def materialize_subnet(store, genotype=None):
    if genotype is None:
        genotype = store.genotype
    if genotype is None:
        raise UsageError("a genotype is required for a supernet store")
    validate_genotype(store.space, genotype)
    return SubnetView(store, genotype)


def bn_recalibrate(view, batches, n_batches=8):
    """Re-estimate the view's BN statistics from scratch.

    The view's BN layers get private running buffers (the store's shared
    statistics are not modified), filled with the cumulative average of the
    batch statistics of the first ``n_batches`` input batches.
    """
    if n_batches < 1:
        raise UsageError("n_batches must be >= 1")
    dtype = view.store.dtype
    for layer in view.bn_layers():
        layer.reset_stats(dtype)
    seen = 0
    for x in batches:
        view.forward(x, "stat_collect")
        seen += 1
        if seen >= n_batches:
            break
    if seen == 0:
        raise UsageError("empty batch stream for BN recalibration")
    view.recalibrated = True
    return view


def export_standalone(store, genotype, fresh_seed=None):
    """Copy the slices ``genotype`` uses into a self-contained store.

    With ``fresh_seed`` the slices come from a newly initialised supernet of
    the same space and head instead of ``store``.
    """
    source = store
    if fresh_seed is not None:
        source = init_weight_store(store.space, fresh_seed, dtype=store.dtype)
        if store.head is not None:
            from .heads import attach_head
            attach_head(source, store.head, seed=fresh_seed + 1)
    view = SubnetView(source, genotype)
    params, buffers = {}, {}
    for key, slc in view.param_refs().items():
        if key in source.params:
            params[key] = source.params[key][slc].copy()
        else:
            buffers[key] = source.buffers[key][slc].copy()
    return WeightStore(store.space, params, buffers, stage="standalone", head=store.head,
                       genotype=genotype, provenance=dict(store.provenance))


# checkpoints ---------------------------------------------------------------


def _sha256(data):
    return hashlib.sha256(data).hexdigest()


def checkpoint_digest(path):
    """SHA-256 of a checkpoint's tensor blob, used for provenance chains."""
    return json.loads((Path(path) / MANIFEST_NAME).read_text())["blob_sha256"]


def save_checkpoint(store, path):
    """Write ``manifest.json`` plus one little-endian f32 blob into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for kind, tensors in (("param", store.params), ("buffer", store.buffers)):
        for name in sorted(tensors):
            raw = np.ascontiguousarray(tensors[name], dtype="<f4").tobytes()
            entries.append({"name": name, "kind": kind, "shape": list(tensors[name].shape),
                            "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "float32-le",
        "space": store.space.to_dict(),
        "space_hash": store.space.hash(),
        "stage": store.stage,
        "head": None if store.head is None else store.head.to_dict(),
        "genotype": None if store.genotype is None else encode_genotype(store.genotype),
        "provenance": store.provenance,
        "blob": BLOB_NAME,
        "blob_bytes": len(blob),
        "blob_sha256": _sha256(blob),
        "tensors": entries,
    }
    (path / BLOB_NAME).write_bytes(blob)
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path, expected_space=None):
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST_NAME).read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"no checkpoint manifest in {path}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointTruncatedError(f"unreadable manifest in {path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format {version}, expected {FORMAT_VERSION}")
    space = SearchSpace.from_dict(manifest["space"])
    if space.hash() != manifest["space_hash"]:
        raise CheckpointHashError("manifest space does not match its recorded hash")
    if expected_space is not None and expected_space.hash() != manifest["space_hash"]:
        raise CheckpointHashError(
            f"checkpoint was trained for space {manifest['space_hash']}, "
            f"configured space is {expected_space.hash()}")
    blob_path = path / manifest["blob"]
    blob = blob_path.read_bytes() if blob_path.exists() else b""
    if len(blob) < manifest["blob_bytes"]:
        raise CheckpointTruncatedError(
            f"tensor blob has {len(blob)} bytes, manifest expects {manifest['blob_bytes']}")
    if _sha256(blob[:manifest["blob_bytes"]]) != manifest["blob_sha256"] or \
            len(blob) != manifest["blob_bytes"]:
        raise CheckpointHashError("tensor blob does not match its recorded SHA-256")
    params, buffers = {}, {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).astype(np.float32).reshape(e["shape"])
        (params if e["kind"] == "param" else buffers)[e["name"]] = arr
    genotype = manifest["genotype"]
    store = WeightStore(space, params, buffers, stage=manifest["stage"],
                        head=HeadSpec.from_dict(manifest["head"]),
                        genotype=None if genotype is None else decode_genotype(genotype, space),
                        provenance=manifest["provenance"])
    if store.is_standalone:
        view = SubnetView(store, store.genotype)
        for key, slc in view.param_refs().items():
            src = store.params if key in store.params else store.buffers
            if src[key][slc].shape != src[key].shape:
                raise ShapeError(f"standalone tensor {key} does not match its genotype")
    return store
