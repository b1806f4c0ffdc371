import numpy as np
import pytest
from hypothesis import settings

from plu_forge.masks import InstanceMask, Scene
from plu_forge.simulator import SimConfig, generate_scene

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def rect(shape, r0, c0, r1, c1):
    bm = np.zeros(shape, dtype=bool)
    bm[r0:r1, c0:c1] = True
    return bm


def scene_of(bitmaps, ids=None, **kw):
    h, w = bitmaps[0].shape
    ids = ids or list(range(1, len(bitmaps) + 1))
    return Scene(kw.pop("image_path", None), w, h,
                 [InstanceMask.from_bitmap(b, i) for b, i in zip(bitmaps, ids)], **kw)


def random_blobs(rng, shape=(24, 24), n=4, p=0.5):
    """Non-empty random rectangles-with-noise masks."""
    out = []
    h, w = shape
    while len(out) < n:
        r0, c0 = rng.integers(0, h - 3), rng.integers(0, w - 3)
        r1, c1 = rng.integers(r0 + 2, h + 1), rng.integers(c0 + 2, w + 1)
        bm = rect(shape, r0, c0, r1, c1) & (rng.random(shape) < p + 0.4)
        if bm.any():
            out.append(bm)
    return out


@pytest.fixture(scope="session")
def overlap_scenes():
    cfg = SimConfig(overlap_bias=0.9)
    return [generate_scene(cfg, seed) for seed in range(40)]


def perturbed(sim, rng):
    """Prediction scene: dropped, shifted and spurious instances with random scores."""
    h, w = sim.scene.height, sim.scene.width
    bms = []
    for m in sim.scene.instances:
        if rng.random() < 0.15:
            continue
        bms.append(np.roll(m.bitmap, tuple(rng.integers(-3, 4, 2)), axis=(0, 1)))
    if rng.random() < 0.5:
        r, c = rng.integers(0, h - 8), rng.integers(0, w - 8)
        bms.append(rect((h, w), r, c, r + 6, c + 6))
    bms = [b for b in bms if b.any()]
    if not bms:
        bms = [sim.scene.instances[0].bitmap]
    return scene_of(bms, scores=tuple(rng.random(len(bms))))


# acceptance criteria verdicts, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
