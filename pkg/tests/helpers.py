import numpy as np


def random_quad(rng, canvas=64.0, min_size=3.0, max_size=30.0, convex=True):
    """Star-shaped (hence simple) random quad inside ``[0, canvas]^2``."""
    size = rng.uniform(min_size, min(max_size, canvas / 2 - 1))
    center = rng.uniform(size, canvas - size, size=2)
    if convex:
        base = rng.uniform(0, 2 * np.pi)
        # keep consecutive gaps below pi so the quad stays convex
        angles = base + np.array([0, 1, 2, 3]) * np.pi / 2 + rng.uniform(-0.5, 0.5, 4)
        radii = size * rng.uniform(0.6, 1.0, 4)
    else:
        angles = rng.uniform(0, 2 * np.pi) + np.array([0, 1, 2, 3]) * np.pi / 2 + rng.uniform(-0.6, 0.6, 4)
        radii = size * rng.uniform(0.2, 1.0, 4)
    return center + np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)


def random_rbox_quad(rng, canvas=256.0, min_side=8.0, max_side=80.0):
    """Corners of a random rotated rectangle fully inside the canvas."""
    w = rng.uniform(min_side, max_side)
    h = rng.uniform(min_side, min(w, max_side))
    theta = rng.uniform(-np.pi, np.pi)
    half = np.hypot(w, h) / 2
    c = rng.uniform(half + 1, canvas - half - 1, size=2)
    u = np.array([np.cos(theta), np.sin(theta)])
    v = np.array([-u[1], u[0]])
    return np.stack([c - u * w / 2 - v * h / 2, c + u * w / 2 - v * h / 2,
                     c + u * w / 2 + v * h / 2, c - u * w / 2 + v * h / 2])
