import numpy as np
import pytest

from hypermap.data import SyntheticSceneConfig, generate_synthetic_scene, label_patch, tile_scene
from hypermap.net import PatchSet, TrainConfig, build_network, reduced_spec, train


def scene_patches(seeds, size=576, patch=36):
    xs, ys = [], []
    for seed in seeds:
        scene, mask = generate_synthetic_scene(SyntheticSceneConfig(width=size, height=size, seed=seed))
        for p, off in tile_scene(scene, patch, patch):
            xs.append(p[None])
            ys.append(label_patch(off, patch, mask))
    return PatchSet(np.array(xs, np.float32), np.array(ys, np.int64))


@pytest.fixture(scope="session")
def small_sets():
    return scene_patches([100, 101]), scene_patches([102])


@pytest.fixture(scope="session")
def trained_net(small_sets):
    """Reduced network briefly trained on small synthetic scenes; treat as read-only."""
    cfg = TrainConfig(epochs=6, seed=3, batch_size=32, learning_rate=0.01)
    net = build_network(reduced_spec(), cfg)
    train(net, *small_sets, cfg)
    return net


@pytest.fixture
def random_net():
    return build_network(reduced_spec(), TrainConfig(seed=7))


ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key}: {detail}")
