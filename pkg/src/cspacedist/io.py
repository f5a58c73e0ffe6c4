"""JSON files for robots, scenes and run configs.

A problem file looks like::

    {
      "robot": {"link_lengths": [1.0, 1.0], "link_radii": [0.05, 0.05],
                "joint_limits": [[-3.14159, 3.14159], [-3.14159, 3.14159]]},
      "scene": {"id": "fixture", "obstacles": [{"center": [1.2, 0.0], "radius": 0.3}]}
    }

Angles are radians, lengths metres. ``"scenes": [...]`` may replace
``"scene"`` to list several scenes.
"""
from __future__ import annotations

import json
from pathlib import Path

from .geometry import Obstacle, RobotModel, Scene


def robot_to_dict(model: RobotModel) -> dict:
    return {
        "link_lengths": list(model.link_lengths),
        "link_radii": list(model.link_radii),
        "joint_limits": [list(lim) for lim in model.joint_limits],
    }


def robot_from_dict(d: dict) -> RobotModel:
    return RobotModel(tuple(d["link_lengths"]), tuple(d["link_radii"]),
                      tuple(tuple(lim) for lim in d["joint_limits"]))


def scene_to_dict(scene: Scene) -> dict:
    return {"id": scene.id,
            "obstacles": [{"center": list(o.center), "radius": o.radius} for o in scene.obstacles]}


def scene_from_dict(d: dict) -> Scene:
    return Scene(tuple(Obstacle(tuple(o["center"]), o["radius"]) for o in d.get("obstacles", [])),
                 d.get("id", "scene"))


def save_problem(path, robot: RobotModel, scenes) -> None:
    if isinstance(scenes, Scene):
        scenes = [scenes]
    payload = {"robot": robot_to_dict(robot), "scenes": [scene_to_dict(s) for s in scenes]}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_problem(path):
    """Return ``(robot, [scene, ...])``."""
    d = json.loads(Path(path).read_text())
    if "robot" not in d:
        raise ValueError(f"{path}: missing 'robot' section")
    if "scene" in d:
        scenes = [scene_from_dict(d["scene"])]
    else:
        scenes = [scene_from_dict(s) for s in d.get("scenes", [])]
    return robot_from_dict(d["robot"]), scenes
