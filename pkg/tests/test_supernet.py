import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_space
from oneshot_nas.errors import (
    CheckpointError,
    CheckpointHashError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    UsageError,
)
from oneshot_nas.heads import attach_head, classification_head, detach_head, segmentation_head
from oneshot_nas.nn import softmax_cross_entropy
from oneshot_nas.space import (
    Genotype,
    enumerate_genotypes,
    hidden_channels,
    layer_choices,
    maximal_genotype,
)
from oneshot_nas.supernet import (
    SubnetView,
    bn_recalibrate,
    checkpoint_digest,
    export_standalone,
    init_weight_store,
    load_checkpoint,
    materialize_subnet,
    save_checkpoint,
    slot_prefix,
)


def _store(space, task="classification", dtype=np.float64, seed=0):
    head = classification_head(space) if task == "classification" else segmentation_head(3, 4)
    return init_weight_store(space, seed=seed, dtype=dtype, head=head)


def _expected_active(space, genotype):
    """Store key -> active index box, derived from the genotype alone."""
    plan = space.layer_plan()
    active = {}
    for li, ((c_in, c_out, _, _, _), (k, e)) in enumerate(zip(plan, genotype)):
        h = hidden_channels(e, c_in)
        p = slot_prefix(li, k)
        active[p + ".expand.w"] = (slice(None), slice(None), slice(0, c_in), slice(0, h))
        active[p + ".dw.w"] = (slice(None), slice(None), slice(0, h))
        active[p + ".project.w"] = (slice(None), slice(None), slice(0, h), slice(0, c_out))
        active[p + ".se.w1"] = active[p + ".se.w2"] = (slice(0, h), slice(0, h))
        for name in ("bn1.gamma", "bn1.beta", "bn2.gamma", "bn2.beta", "se.b1", "se.b2"):
            active[f"{p}.{name}"] = (slice(0, h),)
        for name in ("bn3.gamma", "bn3.beta"):
            active[f"{p}.{name}"] = (slice(0, c_out),)
    return active


def _subnet_grads(store, g, x, y):
    view = SubnetView(store, g)
    out = view.forward(x, "train")
    _, dout = softmax_cross_entropy(out, y)
    view.backward(dout)
    grads = {}
    view.accumulate_grads(grads)
    return grads


def test_masked_gradient_law_exhaustive():
    """Gradients outside the sampled path are exactly zero, for every topology."""
    sp = tiny_space(expansions=(2.0, 3.0))
    store = _store(sp)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 8, 8, 3))
    y = rng.integers(0, 3, 4)
    genotypes = list(enumerate_genotypes(sp))
    assert len(genotypes) == 16
    for g in genotypes:
        grads = _subnet_grads(store, g, x, y)
        active = _expected_active(sp, g)
        for key in store.params:
            if key.startswith(("L0.", "L1.")):
                if key not in active:
                    assert key not in grads or not grads[key].any(), key
                    continue
                mask = np.ones(store.params[key].shape, dtype=bool)
                mask[active[key]] = False
                assert not grads[key][mask].any(), key
                assert grads[key][active[key]].any(), key
            else:
                assert key in grads, key  # stem, first block and head are always on the path


def _standalone_forward(store, g, x):
    model = export_standalone(store, g)
    for key, arr in model.params.items():
        assert arr.flags["C_CONTIGUOUS"] and arr.base is None, key
    return SubnetView(model, g).forward(x, "eval")


def test_slicing_equivalence_all_genotypes():
    sp = tiny_space(expansions=(2.0, 3.0, 4.0))
    store = _store(sp)
    rng = np.random.default_rng(1)
    for key in store.buffers:  # non-trivial running statistics
        if key.endswith(".var"):
            store.buffers[key][:] = rng.uniform(0.5, 2.0, store.buffers[key].shape)
        else:
            store.buffers[key][:] = rng.normal(0, 0.3, store.buffers[key].shape)
    xs = rng.standard_normal((10, 8, 8, 3))
    for g in enumerate_genotypes(sp):
        a = SubnetView(store, g).forward(xs, "eval")
        b = _standalone_forward(store, g, xs)
        np.testing.assert_allclose(a, b, atol=1e-6, rtol=0)


def test_view_reads_store_memory():
    sp = tiny_space()
    store = _store(sp)
    g = maximal_genotype(sp)
    view = SubnetView(store, g)
    for key, slc in view.param_refs().items():
        if key in store.params:
            assert np.shares_memory(store.params[key], store.params[key][slc])
    x = np.random.default_rng(0).standard_normal((2, 8, 8, 3))
    before = view.forward(x, "eval")
    store.params["head.fc.b"] += 1.0
    np.testing.assert_allclose(view.forward(x, "eval"), before + 1.0)


def test_nested_prefix_slices():
    """A narrower expansion reads a prefix of the channels a wider one reads."""
    sp = tiny_space(expansions=(2.0, 3.0))
    store = _store(sp)
    narrow = SubnetView(store, Genotype(((3, 2.0), (5, 2.0)))).param_refs()
    wide = SubnetView(store, Genotype(((3, 3.0), (5, 3.0)))).param_refs()
    assert set(narrow) == set(wide)
    for key in narrow:
        full = np.zeros(store.params.get(key, store.buffers.get(key)).shape, dtype=bool)
        n_mask, w_mask = full.copy(), full.copy()
        n_mask[narrow[key]] = True
        w_mask[wide[key]] = True
        assert not (n_mask & ~w_mask).any(), key


def test_full_width_view_uses_whole_slot():
    sp = tiny_space()
    store = _store(sp)
    g = maximal_genotype(sp)
    refs = SubnetView(store, g).param_refs()
    for key, slc in refs.items():
        arr = store.params.get(key, store.buffers.get(key))
        assert arr[slc].shape == arr.shape


def test_init_sanity():
    sp = tiny_space()
    store = _store(sp, dtype=np.float32)
    assert all(np.isfinite(v).all() for v in store.params.values())
    assert store.params["L0.k3.bn1.gamma"].dtype == np.float32
    np.testing.assert_array_equal(store.params["L1.k5.bn2.gamma"], 1.0)
    np.testing.assert_array_equal(store.params["L1.k5.bn2.beta"], 0.0)
    h = hidden_channels(sp.max_expansion, 4)
    assert store.params["L0.k5.dw.w"].shape == (5, 5, h)
    assert store.params["L0.k3.expand.w"].shape == (1, 1, 4, h)
    w = init_weight_store(tiny_space(), seed=0, dtype=np.float64)
    again = init_weight_store(tiny_space(), seed=0, dtype=np.float64)
    assert all(np.array_equal(w.params[k], again.params[k]) for k in w.params)


def test_fan_in_init_scale():
    from oneshot_nas.space import desk_space
    sp = desk_space()
    store = init_weight_store(sp, seed=0)
    w = store.params["L7.k5.expand.w"]
    assert w.std() == pytest.approx(np.sqrt(2.0 / w.shape[2]), rel=0.05)


def test_bn_recalibration_leaves_store_untouched():
    sp = tiny_space()
    store = _store(sp)
    before = {k: v.copy() for k, v in store.buffers.items()}
    view = SubnetView(store, maximal_genotype(sp))
    rng = np.random.default_rng(0)
    batches = [rng.standard_normal((4, 8, 8, 3)) * 2 + 1 for _ in range(3)]
    bn_recalibrate(view, iter(batches), n_batches=3)
    for k in store.buffers:
        np.testing.assert_array_equal(store.buffers[k], before[k])
    stem_bn = view.bn_layers()[0]
    assert stem_bn.num_batches == 3
    assert not np.allclose(stem_bn.buffers["mean"], 0)
    with pytest.raises(UsageError):
        bn_recalibrate(view, iter([]), n_batches=2)


def test_recalibration_makes_eval_match_batch_statistics():
    """After one-batch recalibration, eval on that batch equals batch-statistics mode
    once the unbiased running variance is scaled back to the biased one."""
    sp = tiny_space()
    store = _store(sp)
    view = SubnetView(store, maximal_genotype(sp), head=False)
    x = np.random.default_rng(0).standard_normal((64, 8, 8, 3))
    counts = {}
    for i, bn in enumerate(view.bn_layers()):
        orig = bn._update_running

        def record(mean, var, m, _orig=orig, _i=i):
            counts[_i] = m
            return _orig(mean, var, m)
        bn._update_running = record
    bn_recalibrate(view, iter([x]), 1)
    train_out = view.forward(x, "train")
    for i, bn in enumerate(view.bn_layers()):
        bn.buffers["var"] *= (counts[i] - 1) / counts[i]
    np.testing.assert_allclose(view.forward(x, "eval"), train_out, atol=1e-9)


def test_materialize_requires_genotype():
    sp = tiny_space()
    with pytest.raises(UsageError):
        materialize_subnet(_store(sp))
    model = export_standalone(_store(sp), maximal_genotype(sp))
    assert materialize_subnet(model).genotype == maximal_genotype(sp)


def test_head_swap_preserves_backbone_bytes():
    sp = tiny_space()
    store = _store(sp)
    backbone = {k: v.tobytes() for k, v in store.backbone_items().items()}
    detach_head(store)
    attach_head(store, segmentation_head(3, 4), seed=5)
    detach_head(store)
    attach_head(store, classification_head(sp), seed=5)
    assert {k: v.tobytes() for k, v in store.backbone_items().items()} == backbone
    with pytest.raises(UsageError):
        attach_head(store, classification_head(sp))


def test_segmentation_view_output_resolution():
    sp = tiny_space()
    store = _store(sp, task="segmentation")
    out = SubnetView(store, maximal_genotype(sp)).forward(np.zeros((2, 8, 8, 3)), "eval")
    assert out.shape == (2, 8, 8, 3)


@pytest.mark.parametrize("task", ["classification", "segmentation"])
def test_checkpoint_roundtrip(tmp_path, task):
    sp = tiny_space()
    store = _store(sp, task=task, dtype=np.float32)
    store.stage = "pretrained"
    store.provenance = {"seed": 3}
    save_checkpoint(store, tmp_path / "ck")
    loaded = load_checkpoint(tmp_path / "ck", expected_space=sp)
    assert loaded.stage == "pretrained" and loaded.head == store.head
    assert loaded.provenance == {"seed": 3}
    for d1, d2 in ((store.params, loaded.params), (store.buffers, loaded.buffers)):
        assert set(d1) == set(d2)
        for k in d1:
            np.testing.assert_array_equal(d1[k], d2[k])
    # saving again is byte-identical
    save_checkpoint(loaded, tmp_path / "ck2")
    for name in ("manifest.json", "tensors.bin"):
        assert (tmp_path / "ck" / name).read_bytes() == (tmp_path / "ck2" / name).read_bytes()
    assert checkpoint_digest(tmp_path / "ck") == checkpoint_digest(tmp_path / "ck2")


def test_standalone_checkpoint_roundtrip(tmp_path):
    sp = tiny_space()
    g = Genotype(((5, 2.0), (3, 3.0)))
    model = export_standalone(_store(sp, dtype=np.float32), g)
    save_checkpoint(model, tmp_path / "m")
    loaded = load_checkpoint(tmp_path / "m")
    assert loaded.genotype == g and loaded.is_standalone
    x = np.random.default_rng(0).standard_normal((2, 8, 8, 3)).astype(np.float32)
    np.testing.assert_array_equal(SubnetView(model, g).forward(x, "eval"),
                                  SubnetView(loaded, g).forward(x, "eval"))


def _saved(tmp_path):
    sp = tiny_space()
    path = save_checkpoint(_store(sp, dtype=np.float32), tmp_path / "ck")
    return sp, path


def test_checkpoint_version_error(tmp_path):
    _, path = _saved(tmp_path)
    m = json.loads((path / "manifest.json").read_text())
    m["format_version"] = 99
    (path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_checkpoint_space_mismatch(tmp_path):
    _, path = _saved(tmp_path)
    with pytest.raises(CheckpointHashError):
        load_checkpoint(path, expected_space=tiny_space(expansions=(2.0, 4.0)))


def test_checkpoint_truncated_blob(tmp_path):
    _, path = _saved(tmp_path)
    blob = (path / "tensors.bin").read_bytes()
    (path / "tensors.bin").write_bytes(blob[:-8])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)


def test_checkpoint_corrupted_blob(tmp_path):
    _, path = _saved(tmp_path)
    blob = bytearray((path / "tensors.bin").read_bytes())
    blob[10] ^= 0xFF
    (path / "tensors.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointHashError):
        load_checkpoint(path)


def test_checkpoint_missing(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")


def test_checkpoint_tensor_layout_is_little_endian_f32(tmp_path):
    sp, path = _saved(tmp_path)
    m = json.loads((path / "manifest.json").read_text())
    entry = next(e for e in m["tensors"] if e["name"] == "stem.conv.w")
    raw = (path / "tensors.bin").read_bytes()[entry["offset"]:entry["offset"] + entry["nbytes"]]
    arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
    store = _store(sp, dtype=np.float32)
    np.testing.assert_array_equal(arr, store.params["stem.conv.w"])


@settings(max_examples=15, deadline=None)
@given(st.lists(st.sampled_from(layer_choices(tiny_space(expansions=(2.0, 3.0, 4.0)))),
                min_size=2, max_size=2), st.integers(0, 2 ** 16))
def test_gradient_of_view_equals_gradient_of_standalone(genes, seed):
    sp = tiny_space(expansions=(2.0, 3.0, 4.0))
    store = _store(sp)
    g = Genotype(tuple(genes))
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 8, 8, 3))
    y = rng.integers(0, 3, 3)
    sup = _subnet_grads(store, g, x, y)
    model = export_standalone(store, g)
    alone = _subnet_grads(model, g, x, y)
    refs = SubnetView(store, g).param_refs()
    for key, gk in alone.items():
        np.testing.assert_allclose(sup[key][refs[key]], gk, atol=1e-10)
