import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def winding_number(px, py, ring):
    """Signed crossing count winding number (Sunday's algorithm)."""
    wn = 0
    for (x0, y0), (x1, y1) in zip(ring[:-1], ring[1:]):
        cross = (x1 - x0) * (py - y0) - (px - x0) * (y1 - y0)
        if y0 <= py:
            if y1 > py and cross > 0:
                wn += 1
        elif y1 <= py and cross < 0:
            wn -= 1
    return wn


def seg_distance(px, py, ring):
    """Planar distance from a point to the closest edge of a ring."""
    a = ring[:-1]
    b = ring[1:]
    ab = b - a
    t = ((px - a[:, 0]) * ab[:, 0] + (py - a[:, 1]) * ab[:, 1]) / np.maximum(
        (ab ** 2).sum(axis=1), 1e-300)
    t = np.clip(t, 0.0, 1.0)
    cx = a[:, 0] + t * ab[:, 0]
    cy = a[:, 1] + t * ab[:, 1]
    return float(np.min(np.hypot(px - cx, py - cy)))


def star_polygon(rng, n_vertices=None, cx=0.0, cy=0.0, r_min=0.2, r_max=1.0):
    """Closed ring of a random (usually concave) star-shaped polygon."""
    n = n_vertices or int(rng.integers(5, 16))
    theta = np.sort(rng.uniform(0, 2 * np.pi, n))
    r = rng.uniform(r_min, r_max, n)
    ring = np.column_stack([cx + r * np.cos(theta), cy + r * np.sin(theta)])
    return np.vstack([ring, ring[:1]])


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """A small seeded fixture written once per session."""
    from habitat.synth import SynthConfig, generate, write_fixture
    out = tmp_path_factory.mktemp("fixture")
    cfg = SynthConfig(seed=7, ncols=30, nrows=30, cellsize=0.2, n_occurrences=120)
    write_fixture(generate(cfg), cfg, str(out))
    return out
