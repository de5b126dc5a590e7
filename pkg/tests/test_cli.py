import json

import pytest

from dreamstory.backends import CallableLLM
from dreamstory.backends.registry import register_llm
from dreamstory.cli import build_parser, effective_render_config, main

register_llm("garbage", lambda rest: CallableLLM(lambda m: "I'd rather not answer in JSON.", "garbage"))


@pytest.fixture()
def files(fixtures_dir):
    return {
        "story": str(fixtures_dir / "kondo_story.txt"),
        "llm": f"replay:{fixtures_dir / 'kondo_transcript.json'}",
        "bench_llm": f"replay:{fixtures_dir / 'bench_transcript.json'}",
    }


SMALL = ["--steps", "4", "--width", "64", "--height", "64"]


def run_dir_of(out):
    (d,) = [p for p in out.iterdir() if p.is_dir()]
    return d


# --- help and parsing -------------------------------------------------------------------


def test_help_shows_defaults(capsys):
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args(["run", "--help"])
    assert info.value.code == 0
    text = " ".join(capsys.readouterr().out.split())
    for default in ("(default: 50)", "(default: 7.0)", "(default: 1280)", "(default: 768)",
                    "(default: 0.9)", "(default: 0.5)"):
        assert default in text


def test_flags_beat_config_file(tmp_path):
    args = build_parser().parse_args(["render", "--plan", "p.json", "--steps", "9", "--disable-mmca"])
    cfg = effective_render_config(args, {"render": {"steps": 30, "lambda": 0.7, "mmsa": {"layers": "all"}}})
    assert cfg.steps == 9 and cfg.lam == 0.7 and cfg.mmsa_layers == "all" and cfg.mmca_enabled is False


def test_usage_errors_exit_1(capsys):
    assert main(["run"]) == 1
    assert main(["bench"]) == 1
    assert main(["plan", "--story", "x.txt"]) == 1


# --- plan ---------------------------------------------------------------------------------


def test_plan_ok(tmp_path, files, capsys):
    out = tmp_path / "plan.json"
    assert main(["plan", "--story", files["story"], "--llm", files["llm"], "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["schema"] == "dreamstory.plan.v1" and len(doc["scenes"]) == 4
    assert "2 subjects, 4 scenes" in capsys.readouterr().out


def test_plan_missing_story_names_the_path(tmp_path, files, capsys):
    assert main(["plan", "--story", str(tmp_path / "nope.txt"), "--llm", files["llm"]]) == 1
    assert "nope.txt" in capsys.readouterr().err


def test_plan_garbage_llm_exits_2(tmp_path, files, capsys):
    code = main(["plan", "--story", files["story"], "--llm", "garbage:", "--retries", "0",
                 "--out", str(tmp_path / "p.json")])
    assert code == 2
    assert "stage subjects" in capsys.readouterr().err
    assert not (tmp_path / "p.json").exists()


def test_plan_replay_miss_exits_1(tmp_path, files):
    assert main(["plan", "--story", files["story"], "--llm", files["llm"], "--scenes", "7",
                 "--out", str(tmp_path / "p.json")]) == 1


def test_json_logging(tmp_path, files, capsys):
    main(["plan", "--story", str(tmp_path / "nope.txt"), "--llm", files["llm"], "--log", "json"])
    assert "nope.txt" in capsys.readouterr().err


# --- run / render -------------------------------------------------------------------------


def test_run_twice_is_identical(tmp_path, files):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["run", "--story", files["story"], "--llm", files["llm"], "--out", str(out)] + SMALL) == 0
        outs.append(run_dir_of(out))
    a, b = outs
    assert a.name == b.name
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    for img in sorted((a / "scenes").iterdir()):
        assert img.read_bytes() == (b / "scenes" / img.name).read_bytes()


def test_double_ablation_reproduces_rehearsal(tmp_path, files):
    plan = tmp_path / "plan.json"
    main(["plan", "--story", files["story"], "--llm", files["llm"], "--out", str(plan)])
    out = tmp_path / "out"
    assert main(["render", "--plan", str(plan), "--disable-mmsa", "--disable-mmca", "--out", str(out)] + SMALL) == 0
    run = run_dir_of(out)
    man = json.loads((run / "manifest.json").read_text())
    assert man["arm"] == {"mmsa": False, "mmca": False, "rewrite": True} and man["layers"] == {}
    for s in man["scenes"]:
        assert (run / s["image"]).read_bytes() == (run / s["rehearsal"]).read_bytes()


def test_run_bad_values(tmp_path, files):
    base = ["run", "--story", files["story"], "--llm", files["llm"], "--out", str(tmp_path)] + SMALL
    assert main(base + ["--lambda", "1.5"]) == 1
    assert main(base + ["--width", "60"]) == 1
    assert main(["run", "--plan", str(tmp_path / "missing.json")]) == 1
    assert main(["run", "--story", files["story"]]) == 1


def test_run_with_old_plan_exits_3(tmp_path, files):
    plan = tmp_path / "plan.json"
    main(["plan", "--story", files["story"], "--llm", files["llm"], "--out", str(plan)])
    doc = json.loads(plan.read_text())
    doc["schema"] = "dreamstory.plan.v0"
    plan.write_text(json.dumps(doc))
    assert main(["render", "--plan", str(plan), "--out", str(tmp_path / "o")] + SMALL) == 3


def test_config_file(tmp_path, files):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("render:\n  steps: 3\n  width: 64\n  height: 64\n  mmca:\n    lambda: 0.8\n")
    out = tmp_path / "out"
    assert main(["run", "--story", files["story"], "--llm", files["llm"], "--config", str(cfg), "--out", str(out)]) == 0
    man = json.loads((run_dir_of(out) / "manifest.json").read_text())
    assert man["config"]["steps"] == 3 and man["config"]["lam"] == 0.8


# --- bench and eval ---------------------------------------------------------------------------


def test_bench_flow(tmp_path, files, capsys):
    bench = tmp_path / "bench.json"
    assert main(["bench", "build", "--llm", files["bench_llm"], "--per-group", "10", "--pool-size", "12",
                 "--out", str(bench)]) == 0
    assert "40 cases" in capsys.readouterr().out

    out = tmp_path / "out"
    assert main(["bench", "render", "--bench", str(bench), "--out", str(out)] + SMALL) == 0
    run = run_dir_of(out)
    assert len(json.loads((run / "cases.json").read_text())) == 40

    metrics = tmp_path / "metrics.json"
    assert main(["eval", "--results", str(run), "--bench", str(bench), "--out", str(metrics),
                 "--table-out", str(tmp_path / "table.txt")]) == 0
    doc = json.loads(metrics.read_text())
    assert [a["group"] for a in doc["aggregates"]] == ["0-Subject", "1-Subject", "2-Subject", "3-Subject", "all"]
    assert doc["scenes"][0]["scene_id"] == "k0-000"
    assert "D&C-DS" in (tmp_path / "table.txt").read_text()

    capsys.readouterr()
    assert main(["bench", "eval", "--bench", str(bench), "--llm", files["bench_llm"],
                 "--out", str(tmp_path / "acc.json")]) == 0
    printed = capsys.readouterr().out
    assert "LLM annotation accuracy (%)" in printed and "100.00" in printed
    assert "fixture-bench" in json.loads((tmp_path / "acc.json").read_text())["annotation_accuracy"]


def test_bench_eval_needs_something(tmp_path, files):
    bench = tmp_path / "bench.json"
    main(["bench", "build", "--llm", files["bench_llm"], "--groups", "0:10,1:10,2:10,3:10", "--pool-size", "12",
          "--out", str(bench)])
    assert main(["bench", "eval", "--bench", str(bench)]) == 1


def test_old_bench_file_exits_3(tmp_path, capsys):
    bench = tmp_path / "bench.json"
    bench.write_text(json.dumps({"schema": "dreamstory.bench.v0", "cases": []}))
    assert main(["bench", "render", "--bench", str(bench)]) == 3
    assert "migration" in capsys.readouterr().err


def test_eval_without_manifest(tmp_path):
    assert main(["eval", "--results", str(tmp_path)]) == 1


def test_bad_groups_flag(tmp_path, files):
    assert main(["bench", "build", "--llm", files["bench_llm"], "--groups", "0-10"]) == 1
