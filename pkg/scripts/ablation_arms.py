"""Render one story under every ablation arm and compare the metrics.

    python scripts/ablation_arms.py --out runs/ablation
    python scripts/ablation_arms.py --llm openai:gpt-4o --story my_story.txt --backend mybackend

Defaults use the bundled replay transcript and the mock stack, so the whole
sweep runs offline in a few seconds. Numbers from the mock stack only show
that the arms are wired differently; they say nothing about image quality.
"""

from __future__ import annotations

import argparse
import json
from dataclasses import replace
from pathlib import Path

from dreamstory.backends import make_backends, make_llm
from dreamstory.config import DirectorConfig, RenderConfig
from dreamstory.director import build_story_plan
from dreamstory.metrics import aggregate_report, evaluate_run, render_metrics_table
from dreamstory.pipeline import run_story

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"

ARMS = {
    "full": {},
    "no-mmsa": {"mmsa_enabled": False},
    "no-mmca": {"mmca_enabled": False},
    "no-msd": {"mmsa_enabled": False, "mmca_enabled": False},
    "no-rewrite": {"rewrite": False},
    "no-refine": {"mask_refine": "off"},
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--story", type=Path, default=FIXTURES / "kondo_story.txt")
    ap.add_argument("--llm", default=f"replay:{FIXTURES / 'kondo_transcript.json'}")
    ap.add_argument("--backend", default="mock")
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--size", type=int, nargs=2, default=(128, 128), metavar=("W", "H"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--arms", default=",".join(ARMS), help="comma list of arms to run")
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    args = ap.parse_args()

    plan = build_story_plan(args.story.read_text(encoding="utf-8"), DirectorConfig(), make_llm(args.llm))
    backends = make_backends(args.backend, seed=args.seed)
    base = RenderConfig(steps=args.steps, width=args.size[0], height=args.size[1], seed=args.seed)

    summary = {}
    scenes = []
    for arm in args.arms.split(","):
        cfg = replace(base, **ARMS[arm])
        res = run_story(plan, cfg, backends.denoiser, backends.segmenter, args.out, run_id=arm)
        report = evaluate_run(res.run_dir, backends)
        summary[arm] = report.aggregates[-1]
        for s in report.scenes:
            s.scene_id = f"{arm}/{s.scene_id}"
        scenes.extend(report.scenes)

    by_arm = aggregate_report(scenes, grouping=lambda s: s.scene_id.split("/")[0])
    by_arm.aggregates = [a for a in by_arm.aggregates if a["group"] != "all"]  # a mean over arms means nothing
    print(render_metrics_table(by_arm))
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
