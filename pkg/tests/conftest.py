import sys
from pathlib import Path

import pytest

# Set the project root path
sys.path.insert(0, str(Path(__file__).parent.parent))

from configs.settings import PipelineConfig
from core.facemodel import generate_synthetic_model
from tools.scene import generate_scene


# --- Shared Fixtures ---

@pytest.fixture(scope="session")
def small_config():
    """Reduced resolutions and budgets so a whole pipeline run takes seconds."""
    return PipelineConfig(
        uv_resolution=48,
        image_width=64,
        image_height=64,
        model_vertices=200,
        k_id=4,
        k_exp=2,
        k_alb=4,
        gn_max_iters=15,
        adam_steps_per_block=60,
        block_passes=2,
        refine_iters=30,
    )


@pytest.fixture(scope="session")
def small_model():
    return generate_synthetic_model(seed=0, z=200, k_id=4, k_exp=2, k_alb=4)


@pytest.fixture(scope="session")
def small_scene(small_config):
    return generate_scene(seed=3, n_frames=2, specular_strength=1.0, detail_strength=1.0,
                          noise_sigma=0.0, config=small_config)


@pytest.fixture(scope="session")
def scene_dir(tmp_path_factory, small_scene):
    from tools.scene import write_scene
    return write_scene(small_scene, tmp_path_factory.mktemp("scene"))
