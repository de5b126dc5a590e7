"""Optional manual integration run on a real diffusion backbone.

This is a smoke test, not a gate: it checks that the pipeline runs end to end
at full settings (50 steps, guidance 7.0, 1280x768) and prints the metric
table. Scores from published comparisons need SDXL-class backbones and a
GPT-4-class director; nothing here asserts that they are reproduced.

The package ships only the mock stack. Bring your own backend by writing a
small module that calls ``dreamstory.backends.register_backend("name", factory)``
where ``factory(seed=0)`` returns a ``Backends`` bundle (denoiser with
attention-processor hooks, segmenter, detector, similarity, CLIP and aesthetic
scorers). Then:

    python scripts/integration_smoke.py --plugin my_backends --backend sdxl \\
        --llm openai:gpt-4o --story story.txt --out runs/smoke

``--llm openai:MODEL`` reads DREAMSTORY_LLM_API_KEY or OPENAI_API_KEY, and DREAMSTORY_LLM_BASE_URL.
Run it with ``--dry-run`` to print the effective configuration only.
"""

from __future__ import annotations

import argparse
import importlib
import json
import time
from pathlib import Path

from dreamstory.backends import make_backends, make_llm
from dreamstory.config import DirectorConfig, RenderConfig
from dreamstory.director import build_story_plan
from dreamstory.metrics import evaluate_run, write_metrics
from dreamstory.pipeline import run_story

FULL_SCALE = RenderConfig(steps=50, guidance_scale=7.0, width=1280, height=768)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--plugin", action="append", default=[], help="module to import before resolving --backend")
    ap.add_argument("--backend", required=True)
    ap.add_argument("--llm", required=True)
    ap.add_argument("--story", type=Path, required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/smoke"))
    ap.add_argument("--dry-run", action="store_true")
    args = ap.parse_args()

    cfg = RenderConfig(**{**FULL_SCALE.to_dict(), "seed": args.seed})
    print(json.dumps({"backend": args.backend, "llm": args.llm, "render": cfg.to_dict()}, indent=2))
    if args.dry_run:
        return
    for mod in args.plugin:
        importlib.import_module(mod)
    backends = make_backends(args.backend, seed=args.seed)

    t0 = time.perf_counter()
    plan = build_story_plan(args.story.read_text(encoding="utf-8"), DirectorConfig(), make_llm(args.llm))
    print(f"plan: {len(plan.subjects)} subjects, {len(plan.scenes)} scenes ({time.perf_counter() - t0:.0f}s)")
    res = run_story(plan, cfg, backends.denoiser, backends.segmenter, args.out)
    failed = [s["index"] for s in res.manifest["scenes"] if s["status"] != "ok"]
    print(f"render: {res.run_dir} ({time.perf_counter() - t0:.0f}s), failed scenes: {failed or 'none'}")
    report = evaluate_run(res.run_dir, backends)
    write_metrics(report, res.run_dir / "metrics.json")
    print(report.table())


if __name__ == "__main__":
    main()
