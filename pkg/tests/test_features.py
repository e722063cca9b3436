import itertools

import numpy as np
import pytest

from hypermap.data import read_pgm_array
from hypermap.errors import InputError, ShapeError
from hypermap.features import (
    LayerSelector,
    assemble_hypercolumns,
    batch_fcn_features,
    capture_activations,
    descriptor_dim,
    dump_hypercolumns,
    fcn_features,
)
from hypermap.net import TrainConfig, build_network, default_spec, forward, make_spec, reduced_spec

CONVS = ("conv1", "conv2", "conv3", "conv4")


def test_selector_parsing():
    assert LayerSelector.parse("conv1..conv4").layers == CONVS
    assert LayerSelector.parse("conv3, conv1").layers == ("conv3", "conv1")
    with pytest.raises(InputError):
        LayerSelector.parse("")
    with pytest.raises(InputError):
        LayerSelector.parse("conv1..fcn2")


def test_capture_matches_forward(random_net):
    patch = np.random.default_rng(0).random((1, 36, 36), dtype=np.float32)
    stack = capture_activations(random_net, patch)
    logits, _ = forward(random_net, patch)
    np.testing.assert_allclose(stack.logits, logits, rtol=1e-5, atol=1e-6)
    again = capture_activations(random_net, patch)
    for (n1, m1), (n2, m2) in zip(stack.conv, again.conv):
        assert n1 == n2 and np.array_equal(m1, m2)


def test_capture_sizes_non_increasing(random_net):
    stack = capture_activations(random_net, np.zeros((1, 36, 36), np.float32))
    sizes = [m.shape[1] for _, m in stack.conv]
    assert sizes == [36, 18, 9, 5]
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))


def test_capture_default_spec_sizes():
    net = build_network(default_spec(), TrainConfig(seed=0))
    stack = capture_activations(net, np.zeros((1, 144, 144), np.float32))
    assert [m.shape[1] for _, m in stack.conv] == [144, 72, 36, 18]


def test_capture_wrong_size(random_net):
    with pytest.raises(ShapeError):
        capture_activations(random_net, np.zeros((1, 30, 30), np.float32))


def test_default_spec_descriptor_dim():
    assert descriptor_dim(build_network(default_spec()), LayerSelector()) == 320


@pytest.mark.parametrize("spec_seed", range(3))
def test_descriptor_dim_formula_random_selectors(spec_seed):
    rng = np.random.default_rng(spec_seed)
    widths = tuple(int(w) for w in rng.integers(1, 6, 4))
    fc = int(rng.integers(2, 9))
    spec = make_spec(widths, (3, 3, 3, 3), fc, input_size=12, num_classes=2)
    net = build_network(spec, TrainConfig(seed=spec_seed))
    patch = rng.random((1, 12, 12), dtype=np.float32)
    stack = capture_activations(net, patch)
    subsets = [s for r in range(1, 5) for s in itertools.combinations(range(4), r)]
    for pick in rng.choice(len(subsets), 10, replace=False):
        chosen = subsets[pick]
        include = bool(rng.integers(2))
        sel = LayerSelector(tuple(CONVS[i] for i in chosen), include)
        expected = sum(widths[i] for i in chosen) + (fc if include else 0)
        hc = assemble_hypercolumns(stack, sel)
        assert descriptor_dim(net, sel) == expected == hc.descriptor_dim
        assert (hc.height, hc.width) == (12, 12)


def test_conv1_passes_through_bit_exact(random_net):
    patch = np.random.default_rng(1).random((1, 36, 36), dtype=np.float32)
    stack = capture_activations(random_net, patch)
    hc = assemble_hypercolumns(stack, LayerSelector(("conv1",)))
    assert hc.descriptor_dim == 8
    np.testing.assert_array_equal(hc.data, stack.conv_map("conv1"))
    full = assemble_hypercolumns(stack, LayerSelector())
    np.testing.assert_array_equal(full.data[:8], stack.conv_map("conv1"))


def test_network_order_regardless_of_selector_order(random_net):
    stack = capture_activations(random_net, np.random.default_rng(2).random((1, 36, 36), dtype=np.float32))
    a = assemble_hypercolumns(stack, LayerSelector(("conv3", "conv1")))
    b = assemble_hypercolumns(stack, LayerSelector(("conv1", "conv3")))
    np.testing.assert_array_equal(a.data, b.data)
    assert [name for name, _ in a.layers] == ["conv1", "conv3"]


def test_fcn_broadcast_is_identical_per_pixel(random_net):
    stack = capture_activations(random_net, np.random.default_rng(3).random((1, 36, 36), dtype=np.float32))
    hc = assemble_hypercolumns(stack, LayerSelector(("conv2",), include_fcn=True))
    tail = hc.pixels()[:, 16:]
    assert np.all(tail == stack.fcn1[None, :])


def test_missing_layer_raises(random_net):
    stack = capture_activations(random_net, np.zeros((1, 36, 36), np.float32))
    with pytest.raises(InputError):
        assemble_hypercolumns(stack, LayerSelector(("conv9",)))
    with pytest.raises(InputError):
        descriptor_dim(random_net, LayerSelector(("pool1",)))


def test_constant_patch_interior_descriptors_identical():
    net = build_network(reduced_spec(), TrainConfig(seed=4))
    stack = capture_activations(net, np.full((1, 36, 36), 0.6, np.float32))
    # conv1 and conv2 maps see no border within this margin of the centre.
    hc = assemble_hypercolumns(stack, LayerSelector(("conv1", "conv2")))
    interior = hc.data[:, 8:28, 8:28].reshape(hc.descriptor_dim, -1)
    np.testing.assert_allclose(interior, interior[:, :1] * np.ones_like(interior), rtol=1e-6, atol=1e-7)


def test_upsampled_descriptor_continuity(random_net):
    stack = capture_activations(random_net, np.random.default_rng(5).random((1, 36, 36), dtype=np.float32))
    for name in ("conv2", "conv3", "conv4"):
        m = stack.conv_map(name).astype(np.float64)
        hc = assemble_hypercolumns(stack, LayerSelector((name,))).data.astype(np.float64)
        cell_step = max(np.abs(np.diff(m, axis=1)).max(), np.abs(np.diff(m, axis=2)).max())
        px_step = max(np.abs(np.diff(hc, axis=1)).max(), np.abs(np.diff(hc, axis=2)).max())
        assert px_step <= cell_step + 1e-6


def test_fcn_features(random_net):
    patch = np.random.default_rng(6).random((1, 36, 36), dtype=np.float32)
    v = fcn_features(random_net, patch)
    assert v.shape == (64,)
    np.testing.assert_array_equal(v, capture_activations(random_net, patch).fcn1)
    batch = batch_fcn_features(random_net, patch[None].repeat(3, 0), chunk=2)
    np.testing.assert_allclose(batch, np.tile(v, (3, 1)), rtol=1e-5, atol=1e-6)


def test_fcn_features_default_width_and_zero_net():
    assert fcn_features(build_network(default_spec()), np.zeros((1, 144, 144), np.float32)).shape == (512,)
    zero = build_network(reduced_spec(), TrainConfig(init_std=0.0))
    assert not fcn_features(zero, np.ones((1, 36, 36), np.float32)).any()


def test_dump_hypercolumns(tmp_path, random_net):
    stack = capture_activations(random_net, np.random.default_rng(7).random((1, 36, 36), dtype=np.float32))
    hc = assemble_hypercolumns(stack, LayerSelector(("conv1",)))
    paths = dump_hypercolumns(hc, tmp_path / "planes")
    assert len(paths) == 8
    arr, maxval = read_pgm_array(paths[0])
    assert maxval == 65535 and arr.shape == (36, 36)
