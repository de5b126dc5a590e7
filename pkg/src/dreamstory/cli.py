"""``dreamstory`` command line.

Exit codes: 0 success, 1 usage / IO / validation errors, 2 the LLM kept
answering in an unusable format, 3 a file failed schema validation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

from . import __version__
from .backends.registry import available_backends, make_backends, make_llm
from .config import DirectorConfig, RenderConfig, load_config_file, render_config_from
from .errors import ConfigError, DreamStoryError, LLMFormatError, SchemaError

log = logging.getLogger("dreamstory")

EXIT_OK, EXIT_USAGE, EXIT_LLM_FORMAT, EXIT_SCHEMA = 0, 1, 2, 3

R = RenderConfig()
D = DirectorConfig()


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        doc = {"time": round(record.created, 3), "level": record.levelname, "logger": record.name,
               "message": record.getMessage()}
        if record.exc_info:
            doc["exc"] = self.formatException(record.exc_info)
        return json.dumps(doc)


def _setup_logging(mode: str, verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if mode == "json" else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


# --- arguments -------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON config file; flags override it (default: none)")
    p.add_argument("--log", choices=("text", "json"), default="text", help="log format on stderr (default: text)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def _add_llm(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--llm", required=required,
                   help="LLM client as kind:arg, e.g. replay:transcript.json, fixture:world.json, openai:gpt-4o")


def _add_director(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scenes", type=int, help="number of scenes to split the story into (default: LLM decides)")
    p.add_argument("--max-subjects", type=int, help=f"cap on extracted subjects (default: {D.max_subjects})")
    p.add_argument("--word-limit", type=int, help=f"scene prompt word limit (default: {D.word_limit})")
    p.add_argument("--retries", type=int, help=f"re-asks per LLM stage (default: {D.retries})")
    p.add_argument("--director-workers", type=int, help=f"parallel scene annotation (default: {D.workers})")


def _add_render(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", default=None, help=f"backend stack, one of {available_backends()} (default: mock)")
    p.add_argument("--seed", type=int, help=f"global seed (default: {R.seed})")
    p.add_argument("--run-id", help="run directory name (default: hash of plan and config)")
    p.add_argument("--disable-mmsa", action="store_true", help="turn masked mutual self-attention off")
    p.add_argument("--disable-mmca", action="store_true", help="turn masked mutual cross-attention off")
    p.add_argument("--disable-rewrite", action="store_true", help="render raw scene prompts (names kept)")
    p.add_argument("--lambda", dest="lam", type=float, help=f"MMCA fusion weight (default: {R.lam})")
    p.add_argument("--dropout", type=float, help=f"MMSA reference token dropout (default: {R.dropout})")
    p.add_argument("--steps", type=int, help=f"denoising steps (default: {R.steps})")
    p.add_argument("--guidance", type=float, help=f"classifier-free guidance scale (default: {R.guidance_scale})")
    p.add_argument("--width", type=int, help=f"image width (default: {R.width})")
    p.add_argument("--height", type=int, help=f"image height (default: {R.height})")
    p.add_argument("--style", help="style suffix appended to every prompt (default: none)")
    p.add_argument("--mask-refine", choices=("off", "auto", "on"), help=f"attention mask refinement (default: {R.mask_refine})")
    p.add_argument("--mmsa-layers", choices=("decoder", "all"), help=f"MMSA layer set (default: {R.mmsa_layers})")
    p.add_argument("--mmca-layers", choices=("decoder", "all"), help=f"MMCA layer set (default: {R.mmca_layers})")
    p.add_argument("--workers", type=int, help=f"concurrent scene renders (default: {R.workers})")
    p.add_argument("--fail-fast", action="store_true", help="stop at the first failed scene")
    p.add_argument("--no-resume", action="store_true", help="re-render scenes already present in the run directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dreamstory", description="Multi-subject story visualisation.")
    parser.add_argument("--version", action="version", version=f"dreamstory {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("plan", help="story text -> plan.json")
    _add_common(p)
    p.add_argument("--story", required=True, help="story text file")
    _add_llm(p)
    _add_director(p)
    p.add_argument("--out", default="plan.json", help="output plan file (default: plan.json)")

    for name, help_ in (("run", "story or plan -> rendered run directory"), ("render", "plan -> rendered run directory")):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        if name == "run":
            src = p.add_mutually_exclusive_group(required=True)
            src.add_argument("--story", help="story text file (planned first, needs --llm)")
            src.add_argument("--plan", help="existing plan.json")
            _add_llm(p, required=False)
            _add_director(p)
        else:
            p.add_argument("--plan", required=True, help="existing plan.json")
        _add_render(p)
        p.add_argument("--out", default="out", help="output root; the run lands in OUT/RUN_ID (default: out)")

    bench = sub.add_parser("bench", help="benchmark tools")
    bsub = bench.add_subparsers(dest="bench_command", required=True, parser_class=_Parser)
    p = bsub.add_parser("build", help="generate a subject pool and k-subject cases -> bench.json")
    _add_common(p)
    _add_llm(p)
    p.add_argument("--per-group", type=int, default=100, help="cases per subject-count group (default: 100)")
    p.add_argument("--groups", help="explicit sizes as k:n pairs, e.g. 0:10,1:10,2:10,3:10 (overrides --per-group)")
    p.add_argument("--pool-size", type=int, default=20, help="subjects in the pool (default: 20)")
    p.add_argument("--word-limit", type=int, default=D.word_limit, help=f"scene prompt word limit (default: {D.word_limit})")
    p.add_argument("--seed", type=int, default=0, help="case sampling seed (default: 0)")
    p.add_argument("--out", default="bench.json", help="output file (default: bench.json)")

    p = bsub.add_parser("render", help="render every non-rejected case of bench.json")
    _add_common(p)
    p.add_argument("--bench", required=True, help="bench.json")
    _add_render(p)
    p.add_argument("--out", default="out", help="output root (default: out)")

    p = bsub.add_parser("eval", help="LLM annotation accuracy (and image metrics with --results)")
    _add_common(p)
    p.add_argument("--bench", required=True, help="bench.json")
    _add_llm(p, required=False)
    p.add_argument("--distractors", type=int, default=1, help="absent pool subjects asked about per case (default: 1)")
    p.add_argument("--results", help="run directory produced by `bench render`")
    p.add_argument("--backend", default="mock", help="scoring backends (default: mock)")
    p.add_argument("--metrics", help="comma list of aes,clip_t,ds,dc_ds (default: all)")
    p.add_argument("--seed", type=int, default=0, help="distractor sampling seed (default: 0)")
    p.add_argument("--out", default="metrics.json", help="output file (default: metrics.json)")

    p = sub.add_parser("eval", help="score a run directory -> metrics.json + table")
    _add_common(p)
    p.add_argument("--results", required=True, help="run directory (contains manifest.json)")
    p.add_argument("--bench", help="bench.json; groups by case and skips rejected cases")
    p.add_argument("--backend", default="mock", help="scoring backends (default: mock)")
    p.add_argument("--metrics", help="comma list of aes,clip_t,ds,dc_ds (default: all)")
    p.add_argument("--out", default="metrics.json", help="output file (default: metrics.json)")
    p.add_argument("--table-out", help="also write the rendered table here")
    return parser


# --- effective configs ------------------------------------------------------------


def _file_config(args) -> dict:
    return load_config_file(args.config) if getattr(args, "config", None) else {}


def director_config(args, doc: dict) -> DirectorConfig:
    known = {f.name for f in fields(DirectorConfig)}
    base = dict(doc.get("director") or {})
    unknown = set(base) - known
    if unknown:
        raise ConfigError(f"unknown director options {sorted(unknown)}")
    flags = {
        "n_scenes": getattr(args, "scenes", None),
        "max_subjects": getattr(args, "max_subjects", None),
        "word_limit": getattr(args, "word_limit", None),
        "retries": getattr(args, "retries", None),
        "workers": getattr(args, "director_workers", None),
    }
    base.update({k: v for k, v in flags.items() if v is not None})
    return replace(DirectorConfig(), **base)


def effective_render_config(args, doc: dict) -> RenderConfig:
    section = doc.get("render", {k: v for k, v in doc.items() if k not in ("director", "backend", "llm")})
    return render_config_from(
        section,
        seed=args.seed,
        lam=args.lam,
        dropout=args.dropout,
        steps=args.steps,
        guidance_scale=args.guidance,
        width=args.width,
        height=args.height,
        style_suffix=args.style,
        mask_refine=args.mask_refine,
        mmsa_layers=args.mmsa_layers,
        mmca_layers=args.mmca_layers,
        workers=args.workers,
        mmsa_enabled=False if args.disable_mmsa else None,
        mmca_enabled=False if args.disable_mmca else None,
        rewrite=False if args.disable_rewrite else None,
        fail_fast=True if args.fail_fast else None,
    )


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FileNotFoundError(f"cannot read {path}: {exc.strerror or exc}") from exc


# --- commands -----------------------------------------------------------------------


def cmd_plan(args) -> int:
    from .director import build_story_plan, save_plan

    doc = _file_config(args)
    story = _read_text(args.story)
    cfg = director_config(args, doc)
    llm = make_llm(args.llm or doc.get("llm", ""))
    plan = build_story_plan(story, cfg, llm)
    save_plan(plan, args.out)
    print(f"wrote {args.out}: {len(plan.subjects)} subjects, {len(plan.scenes)} scenes")
    return EXIT_OK


def _render(plan, args, doc, case_ids=None):
    from .pipeline import run_story

    cfg = effective_render_config(args, doc)
    backends = make_backends(args.backend or doc.get("backend", "mock"), seed=0)
    t0 = time.perf_counter()
    result = run_story(plan, cfg, backends.denoiser, backends.segmenter, args.out,
                       run_id=args.run_id, resume=not args.no_resume)
    if case_ids is not None:
        from .schemas import write_json_atomic

        write_json_atomic(result.run_dir / "cases.json", {str(k): v for k, v in case_ids.items()})
    scenes = result.manifest["scenes"]
    failed = [s["index"] for s in scenes if s["status"] != "ok"]
    print(f"run {result.manifest['run_id']}: {len(scenes) - len(failed)}/{len(scenes)} scenes ok "
          f"in {time.perf_counter() - t0:.1f}s -> {result.run_dir}")
    if failed:
        log.error("failed scenes: %s", failed)
        return EXIT_USAGE
    return EXIT_OK


def cmd_run(args) -> int:
    from .director import build_story_plan, load_plan, save_plan

    doc = _file_config(args)
    if getattr(args, "story", None):
        spec = args.llm or doc.get("llm")
        if not spec:
            raise UsageError("--story needs --llm")
        plan = build_story_plan(_read_text(args.story), director_config(args, doc), make_llm(spec))
    else:
        if not Path(args.plan).is_file():
            raise FileNotFoundError(f"cannot read {args.plan}: no such file")
        plan = load_plan(args.plan)
    return _render(plan, args, doc)


def _groups(args) -> dict[int, int]:
    if not args.groups:
        return {k: args.per_group for k in range(4)}
    out = {}
    for part in args.groups.split(","):
        k, _, n = part.partition(":")
        try:
            out[int(k)] = int(n)
        except ValueError:
            raise UsageError(f"bad --groups entry {part!r}; expected k:n") from None
    return out


def cmd_bench_build(args) -> int:
    from .bench import build_benchmark, export_manifest

    doc = _file_config(args)
    manifest = build_benchmark(make_llm(args.llm), _groups(args), pool_size=args.pool_size,
                               word_limit=args.word_limit, seed=args.seed, config=director_config(args, doc))
    export_manifest(manifest, args.out)
    sizes = ", ".join(f"k={k}: {n}" for k, n in sorted(manifest.group_sizes.items()))
    print(f"wrote {args.out}: {len(manifest.pool)} subjects, {len(manifest.cases)} cases ({sizes})")
    return EXIT_OK


def cmd_bench_render(args) -> int:
    from .bench import bench_plan, import_manifest

    doc = _file_config(args)
    plan, case_ids = bench_plan(import_manifest(args.bench))
    return _render(plan, args, doc, case_ids)


def _case_ids(run_dir: Path) -> dict[int, str] | None:
    path = run_dir / "cases.json"
    if not path.is_file():
        return None
    return {int(k): v for k, v in json.loads(path.read_text(encoding="utf-8")).items()}


def cmd_eval(args) -> int:
    from .bench import import_manifest
    from .metrics import evaluate_run, parse_metric_list, write_metrics

    run_dir = Path(args.results)
    if not (run_dir / "manifest.json").is_file():
        raise FileNotFoundError(f"no manifest.json in {run_dir}")
    exclude = set()
    if args.bench:
        exclude = {c.case_id for c in import_manifest(args.bench).cases if c.review_status == "rejected"}
    backends = make_backends(args.backend)
    report = evaluate_run(run_dir, backends, parse_metric_list(args.metrics), _case_ids(run_dir), exclude)
    write_metrics(report, args.out)
    table = report.table()
    print(table)
    if args.table_out:
        Path(args.table_out).write_text(table + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_bench_eval(args) -> int:
    from .bench import evaluate_annotation, import_manifest
    from .metrics import MetricsReport, evaluate_run, parse_metric_list, render_accuracy_table, write_metrics

    manifest = import_manifest(args.bench)
    if not args.llm and not args.results:
        raise UsageError("bench eval needs --llm (annotation accuracy) and/or --results (image metrics)")
    if args.results:
        rejected = {c.case_id for c in manifest.cases if c.review_status == "rejected"}
        run_dir = Path(args.results)
        report = evaluate_run(run_dir, make_backends(args.backend), parse_metric_list(args.metrics),
                              _case_ids(run_dir), rejected)
        print(report.table())
    else:
        report = MetricsReport([], [], [])
    if args.llm:
        llm = make_llm(args.llm)
        table = evaluate_annotation(manifest, llm, distractors=args.distractors, seed=args.seed)
        report.annotation_accuracy[llm.model_id] = table
        print(render_accuracy_table(report.annotation_accuracy))
        print(render_accuracy_table(report.annotation_accuracy, "per_scene"))
    write_metrics(report, args.out)
    return EXIT_OK


COMMANDS = {
    "plan": cmd_plan,
    "run": cmd_run,
    "render": cmd_run,
    "eval": cmd_eval,
    ("bench", "build"): cmd_bench_build,
    ("bench", "render"): cmd_bench_render,
    ("bench", "eval"): cmd_bench_eval,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    _setup_logging(getattr(args, "log", "text"), getattr(args, "verbose", False))
    key = (args.command, args.bench_command) if args.command == "bench" else args.command
    try:
        return COMMANDS[key](args)
    except LLMFormatError as exc:
        print(f"error: the LLM answer could not be used: {exc}", file=sys.stderr)
        return EXIT_LLM_FORMAT
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (UsageError, DreamStoryError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
