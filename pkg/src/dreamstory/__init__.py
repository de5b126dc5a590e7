"""Training-free multi-subject story visualisation: an LLM story director plus
masked mutual self/cross-attention inside a diffusion denoiser."""

from .config import DirectorConfig, RenderConfig
from .director import SceneSpec, StoryPlan, SubjectSpec, build_story_plan, load_plan, save_plan
from .pipeline import MultimodalAnchor, SceneRender, StoryResult, generate_anchor, rehearsal_render, render_scene_msd, run_story

__version__ = "0.1.0"

__all__ = [
    "DirectorConfig",
    "MultimodalAnchor",
    "RenderConfig",
    "SceneRender",
    "SceneSpec",
    "StoryPlan",
    "StoryResult",
    "SubjectSpec",
    "build_story_plan",
    "generate_anchor",
    "load_plan",
    "rehearsal_render",
    "render_scene_msd",
    "run_story",
    "save_plan",
]
