"""Record replay transcripts from the rule-based fixture LLM.

    python scripts/record_transcript.py            # rewrites tests/fixtures/*_transcript.json

The transcripts let tests and the CLI run the director and the benchmark
builder without any network access (``--llm replay:PATH``).
"""

from __future__ import annotations

import argparse
from pathlib import Path

from dreamstory.bench import build_benchmark, evaluate_annotation
from dreamstory.backends import FixtureDirectorLLM, RecordingLLM
from dreamstory.config import DirectorConfig
from dreamstory.director import build_story_plan

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--fixtures", type=Path, default=FIXTURES)
    ap.add_argument("--per-group", type=int, default=10)
    ap.add_argument("--pool-size", type=int, default=12)
    args = ap.parse_args()

    world = FixtureDirectorLLM.from_file(args.fixtures / "kondo_world.json")
    rec = RecordingLLM(world)
    story = (args.fixtures / "kondo_story.txt").read_text(encoding="utf-8")
    build_story_plan(story, DirectorConfig(), rec)
    build_story_plan(story, DirectorConfig(n_scenes=4), rec)
    out = rec.save(args.fixtures / "kondo_transcript.json")
    print(f"{out}: {len(rec.transcript()['entries'])} exchanges")

    rec = RecordingLLM(FixtureDirectorLLM({"model_id": "fixture-bench"}))
    groups = {k: args.per_group for k in range(4)}
    manifest = build_benchmark(rec, groups, pool_size=args.pool_size, seed=0)
    evaluate_annotation(manifest, rec, distractors=1, seed=0)
    out = rec.save(args.fixtures / "bench_transcript.json")
    print(f"{out}: {len(rec.transcript()['entries'])} exchanges")


if __name__ == "__main__":
    main()
