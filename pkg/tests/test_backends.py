import json

import httpx
import numpy as np
import pytest

from dreamstory.backends import (
    AttnKind,
    BlockKind,
    CallableLLM,
    FixtureDirectorLLM,
    LayerId,
    MockAestheticScorer,
    MockClipScorer,
    MockDenoiser,
    MockDetector,
    MockSegmenter,
    MockSimilarity,
    MockSpec,
    OpenAIChatLLM,
    RateLimitedLLM,
    RecordingLLM,
    ReplayLLM,
    TokenEmbeddings,
    make_backends,
    make_llm,
    make_replay_llm,
    message_hash,
    register_backend,
)
from dreamstory.backends.base import check_image
from dreamstory.backends.mock_vision import image_digest
from dreamstory.backends.registry import available_backends
from dreamstory.errors import ConfigError, InputError, InvalidSpec, LLMTransportError, ReplayMiss, SchemaError, ShapeMismatch


# --- denoiser -----------------------------------------------------------------------


def test_layer_id_keys_round_trip():
    layer = LayerId(BlockKind.decoder, 1, AttnKind.cross)
    assert layer.key == "decoder.cross.1"
    assert LayerId.parse(layer.key) == layer


def test_catalog_and_grids():
    d = MockDenoiser()
    cat = d.layer_catalog()
    assert len(cat) == 8
    assert sum(1 for l in cat if l.block_kind is BlockKind.decoder and l.attn_kind is AttnKind.self) == 2
    mid = [l for l in cat if l.block_kind is BlockKind.middle][0]
    assert d.layer_grid(mid) == (4, 4)
    assert d.layer_grid(cat[0]) == (8, 8)


def test_catalog_validation():
    with pytest.raises(InvalidSpec):
        MockDenoiser(spec=MockSpec(catalog=[(BlockKind.decoder, AttnKind.self)]))
    with pytest.raises(InvalidSpec):
        MockDenoiser(spec=MockSpec(catalog=[]))


def test_text_encoding_is_deterministic_and_indexed():
    d = MockDenoiser()
    a, b = d.encode_text("A towering gorilla"), d.encode_text("a towering gorilla")
    assert np.array_equal(a.values, b.values)
    assert a.token_count == 4
    assert d.token_indices("a towering gorilla on a roof", "towering gorilla") == [2, 3]


def test_token_embeddings_validate():
    with pytest.raises(ValueError):
        TokenEmbeddings(np.zeros(3))


def test_render_is_deterministic_and_seed_sensitive():
    d = MockDenoiser()
    emb = d.encode_text("a cat")
    run = lambda s: d.decode(d.run_steps(d.init_latents(s, 32, 32), [emb], 4, 7.0)[0], 32, 32)
    assert np.array_equal(run(1), run(1))
    assert not np.array_equal(run(1), run(2))
    img = run(1)
    assert img.shape == (32, 32, 3) and img.dtype == np.uint8


def test_joint_batch_is_bit_identical_to_single_streams():
    d = MockDenoiser()
    e1, e2 = d.encode_text("a cat"), d.encode_text("a dog on a sofa")
    l1, l2 = d.init_latents(1, 16, 16), d.init_latents(2, 16, 16)
    joint = d.run_steps(np.stack([l1, l2]), [e1, e2], 3, 7.0)
    assert np.array_equal(joint[0], d.run_steps(l1, [e1], 3, 7.0)[0])
    assert np.array_equal(joint[1], d.run_steps(l2, [e2], 3, 7.0)[0])


def test_dimensions_must_tile_latent_grid():
    with pytest.raises(ShapeMismatch):
        MockDenoiser().init_latents(0, 30, 32)


def test_processors_see_every_call_and_can_replace_outputs():
    d = MockDenoiser()
    seen = []
    layer = d.layer_catalog()[4]

    def proc(call):
        seen.append((call.timestep, call.pass_tag, call.n_streams, call.grid))
        return [np.zeros_like(q) for q in call.q]

    emb = d.encode_text("a cat")
    lat = d.init_latents(0, 16, 16)
    base = d.run_steps(lat, [emb], 2, 7.0)
    out = d.run_steps(lat, [emb], 2, 7.0, {layer: proc})
    assert seen == [(0, "uncond", 1, (8, 8)), (0, "cond", 1, (8, 8)), (1, "uncond", 1, (8, 8)), (1, "cond", 1, (8, 8))]
    assert not np.array_equal(base, out)


def test_processor_output_count_checked():
    d = MockDenoiser()
    with pytest.raises(ShapeMismatch):
        d.run_steps(d.init_latents(0, 8, 8), [d.encode_text("x")], 1, 1.0, {d.layer_catalog()[0]: lambda c: []})


# --- vision mocks -------------------------------------------------------------------


def test_segmenter_and_detector_agree_on_hashed_layout():
    img = np.random.default_rng(0).integers(0, 255, (32, 32, 3), dtype=np.uint8)
    segs = MockSegmenter().segment(img, ["dog"])
    dets = MockDetector().detect(img, "dog")
    assert [s.box for s in segs] == [d.box for d in dets]
    assert all(s.mask.sum() > 0 for s in segs)
    assert [d.score for d in dets] == sorted((d.score for d in dets), reverse=True)


def test_fixture_tables_take_priority():
    img = np.zeros((16, 16, 3), np.uint8)
    det = MockDetector({"cat": [((0, 0, 4, 4), 0.5)]}, by_image={image_digest(img): {"cat": [((1, 1, 2, 2), 0.9)]}})
    assert det.detect(img, "cat")[0].box == (1, 1, 2, 2)
    assert det.detect(np.ones((16, 16, 3), np.uint8), "cat")[0].box == (0, 0, 4, 4)
    assert MockDetector(fallback="none").detect(img, "cat") == []


def test_similarity_identity_and_range():
    a = np.random.default_rng(0).integers(0, 255, (20, 20, 3), dtype=np.uint8)
    sim = MockSimilarity()
    assert sim.similarity(a, a) == 1.0
    assert 0.0 < sim.similarity(a, 255 - a) < 1.0


def test_scorers_constants_tables_and_ranges():
    img = np.zeros((4, 4, 3), np.uint8)
    assert MockClipScorer(0.38).score(img, "x") == 0.38
    assert MockClipScorer(table={(image_digest(img), "x"): 0.2}).score(img, "x") == 0.2
    assert 0.30 <= MockClipScorer().score(img, "y") <= 0.40
    assert MockAestheticScorer(6.7).score(img) == 6.7
    assert 5.5 <= MockAestheticScorer().score(img) <= 7.0


def test_check_image_rejects_corrupt_input():
    with pytest.raises(InputError):
        check_image(np.zeros((4, 4), np.uint8))
    with pytest.raises(InputError):
        check_image(np.zeros((4, 4, 3), np.float32))
    with pytest.raises(InputError):
        check_image("not an image")


# --- LLM clients --------------------------------------------------------------------


def test_record_then_replay(tmp_path):
    rec = RecordingLLM(CallableLLM(lambda m: m[-1][1].upper(), "echo"))
    msgs = [("system", "s"), ("user", "hello")]
    assert rec.complete(msgs) == "HELLO"
    path = rec.save(tmp_path / "t.json")
    replay = make_replay_llm(path)
    assert replay.complete(msgs) == "HELLO"
    assert replay.model_id == "echo"
    with pytest.raises(ReplayMiss):
        replay.complete([("user", "other")])


def test_message_hash_is_order_sensitive():
    assert message_hash([("a", "b"), ("c", "d")]) != message_hash([("c", "d"), ("a", "b")])


def test_bad_transcript_is_schema_error(tmp_path):
    p = tmp_path / "t.json"
    p.write_text(json.dumps({"schema": "other"}))
    with pytest.raises(SchemaError):
        make_replay_llm(p)


def test_rate_limiter_spaces_requests():
    now = [0.0]
    slept = []

    def sleep(dt):
        slept.append(dt)
        now[0] += dt

    llm = RateLimitedLLM(ReplayLLM({}, "x"), 60, clock=lambda: now[0], sleep=sleep)
    llm.inner = CallableLLM(lambda m: "ok")
    for _ in range(3):
        llm.complete([("user", "q")])
    assert slept == [1.0, 1.0]


def test_openai_adapter_with_mock_transport():
    def handler(request):
        body = json.loads(request.content)
        assert body["messages"][0] == {"role": "user", "content": "hi"}
        assert request.headers["authorization"] == "Bearer k"
        return httpx.Response(200, json={"choices": [{"message": {"content": '{"ok": true}'}}]})

    llm = OpenAIChatLLM("m", api_key="k", base_url="http://test", transport=httpx.MockTransport(handler))
    assert llm.complete([("user", "hi")]) == '{"ok": true}'


def test_openai_adapter_maps_http_errors():
    llm = OpenAIChatLLM("m", api_key="k", base_url="http://test",
                        transport=httpx.MockTransport(lambda r: httpx.Response(500, text="boom")))
    with pytest.raises(LLMTransportError):
        llm.complete([("user", "hi")])


def test_fixture_llm_answers_unknown_stage_with_prose():
    assert not FixtureDirectorLLM().complete([("system", "hello"), ("user", "x")]).startswith("{")


# --- registry -----------------------------------------------------------------------


def test_registry(tmp_path, fixtures_dir):
    assert "mock" in available_backends()
    b = make_backends("mock")
    assert b.denoiser.name == "mock"
    with pytest.raises(ConfigError):
        make_backends("sdxl")
    register_backend("tiny", lambda seed=0, **_: make_backends("mock", seed))
    assert make_backends("tiny").denoiser.name == "mock"
    assert make_llm(f"fixture:{fixtures_dir / 'kondo_world.json'}").model_id == "fixture-director"
    assert len(make_llm(f"replay:{fixtures_dir / 'kondo_transcript.json'}")) > 0
    with pytest.raises(ConfigError):
        make_llm("carrier-pigeon:x")
