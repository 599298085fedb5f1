from .dataset import (CSV_COLUMNS, FORMAT_VERSION, DatasetError, SamplePair, generate_dataset, make_pair,
                      params_from_manifest, read_dataset, read_manifest, write_dataset)
from .render import render_ground, render_satellite, satellite_frame
from .scene import SceneError, SceneSpec, SynthParams, generate_scene, placement_feasible, sample_camera_pose

__all__ = [
    "CSV_COLUMNS", "FORMAT_VERSION", "DatasetError", "SamplePair", "generate_dataset", "make_pair",
    "params_from_manifest", "read_dataset", "read_manifest", "write_dataset", "render_ground", "render_satellite",
    "satellite_frame", "SceneError", "SceneSpec", "SynthParams", "generate_scene",
    "placement_feasible", "sample_camera_pose",
]
