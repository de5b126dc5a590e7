from .director import (
    annotate_presence,
    build_story_plan,
    extract_subjects,
    generate_scenes,
    rewrite_scene,
)
from .parsing import parse_structured_response
from .plan import SceneSpec, StoryPlan, SubjectSpec, load_plan, plan_problems, save_plan, validate_plan
from .templates import load_templates

__all__ = [
    "SceneSpec",
    "StoryPlan",
    "SubjectSpec",
    "annotate_presence",
    "build_story_plan",
    "extract_subjects",
    "generate_scenes",
    "load_plan",
    "load_templates",
    "parse_structured_response",
    "plan_problems",
    "rewrite_scene",
    "save_plan",
    "validate_plan",
]
