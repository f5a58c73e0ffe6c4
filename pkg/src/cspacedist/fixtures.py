"""Reference robots and scenes shared by tests, benchmarks and examples."""
from __future__ import annotations

import math

import numpy as np

from .geometry import RobotModel, Scene


def two_link(link_radius: float = 0.05) -> RobotModel:
    return RobotModel.planar([1.0, 1.0], link_radius)


def disc_scene() -> Scene:
    """One disc in front of the arm; the default single-mode fixture."""
    return Scene.discs([(1.2, 0.0, 0.3)], id="disc")


TWO_MODE_ANGLE = 0.8


def two_mode_scene(angle: float = TWO_MODE_ANGLE, radius_from_base: float = 0.5,
                   disc_radius: float = 0.1) -> Scene:
    """Two discs mirrored across the x-axis, reachable only by the first link
    for moderate elbow angles. Queries ``(0, q2)`` then sit exactly between two
    equidistant colliding bands ``q1 = +/-(angle - half_width)``."""
    x = radius_from_base * math.cos(angle)
    y = radius_from_base * math.sin(angle)
    return Scene.discs([(x, y, disc_radius), (x, -y, disc_radius)], id="two_mode")


def two_mode_axis_queries(n: int, q2_max: float = 1.5, rng=None) -> np.ndarray:
    """Queries on the symmetry axis ``q1 = 0``."""
    if rng is None:
        q2 = np.linspace(-q2_max, q2_max, n)
    else:
        q2 = rng.uniform(-q2_max, q2_max, n)
    return np.stack([np.zeros(n), q2], axis=1)


def narrow_gap_scene(gap: float = 0.42) -> Scene:
    """Two discs leaving a narrow passage the arm has to thread."""
    return Scene.discs([(1.45, 0.5 * gap + 0.25, 0.25), (1.45, -0.5 * gap - 0.25, 0.25)], id="narrow_gap")


def button_scene(center, radius: float = 0.1, id: str | None = None) -> Scene:
    cx, cy = center
    return Scene.discs([(cx, cy, radius)], id=id or f"button_{cx:+.3f}_{cy:+.3f}")


def engineered_button_scenes(robot: RobotModel, n: int = 8, radius: float = 0.1, seed: int = 0):
    """Buttons in the mid-reach annulus, where both elbow branches can touch them
    and the contact set in joint space splits into two modes."""
    rng = np.random.default_rng(seed)
    scenes = []
    for i in range(n):
        rho = rng.uniform(0.45, 0.8) * robot.reach
        phi = rng.uniform(-math.pi, math.pi)
        scenes.append(Scene.discs([(rho * math.cos(phi), rho * math.sin(phi), radius)], id=f"button{i}"))
    return scenes


def named_problem(name: str):
    """``(robot, [scenes])`` for the built-in fixtures used by the command line."""
    robot = two_link()
    table = {
        "disc": lambda: [disc_scene()],
        "two_mode": lambda: [two_mode_scene()],
        "narrow_gap": lambda: [narrow_gap_scene()],
        "buttons": lambda: engineered_button_scenes(robot),
        "empty": lambda: [Scene((), id="empty")],
    }
    if name not in table:
        raise KeyError(f"unknown fixture {name!r}; choose from {sorted(table)}")
    return robot, table[name]()
