from __future__ import annotations

import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dreamstory.backends import FixtureDirectorLLM, make_backends, make_replay_llm
from dreamstory.config import DirectorConfig, RenderConfig
from dreamstory.director import build_story_plan

FIXTURES = Path(__file__).parent / "fixtures"

settings.register_profile("ci", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def story_text() -> str:
    return (FIXTURES / "kondo_story.txt").read_text(encoding="utf-8")


@pytest.fixture(scope="session")
def world_llm() -> FixtureDirectorLLM:
    return FixtureDirectorLLM.from_file(FIXTURES / "kondo_world.json")


@pytest.fixture(scope="session")
def replay_llm():
    return make_replay_llm(FIXTURES / "kondo_transcript.json")


@pytest.fixture(scope="session")
def bench_llm():
    return make_replay_llm(FIXTURES / "bench_transcript.json")


@pytest.fixture()
def plan(story_text, replay_llm):
    return build_story_plan(story_text, DirectorConfig(), replay_llm)


@pytest.fixture()
def backends():
    return make_backends("mock", seed=0)


@pytest.fixture()
def small_cfg() -> RenderConfig:
    return RenderConfig(steps=6, width=64, height=64)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
