import threading

import httpx
import numpy as np
import pytest

from s2policy import sim
from s2policy.errors import InvalidArgument, PerceptionError, ProtocolError, RetryableTransportError
from s2policy.fusion import fuse_masks, normalize_depth
from s2policy.percept import (
    Fixture,
    MockPerceptionServer,
    OracleBackend,
    RemoteBackend,
    decode_png,
    encode_png,
    perceive,
    quantize_depth,
    quantize_mask,
    split_prompt,
)


@pytest.fixture(scope="module")
def scene():
    inst = sim.instance("wiping", "red")
    env = sim.make_env("wiping", inst)
    obs = env.reset(3)
    return obs.rgb, env.ground_truth_perception(inst.prompt), inst.prompt


@pytest.fixture
def server(scene):
    _, result, _ = scene
    with MockPerceptionServer(Fixture.from_result(result)) as srv:
        yield srv


class SleepRecorder:
    def __init__(self):
        self.calls = []

    def __call__(self, s):
        self.calls.append(s)


def test_split_prompt():
    assert split_prompt("handwriting. sponge.") == ["handwriting", "sponge"]
    assert split_prompt(" Rice .bowl") == ["rice", "bowl"]
    assert split_prompt("...") == []


@pytest.mark.parametrize("dtype,hi", [(np.uint8, 255), (np.uint16, 65535)])
def test_png_codec_lossless(dtype, hi):
    arr = np.random.default_rng(0).integers(0, hi + 1, size=(13, 17)).astype(dtype)
    out = decode_png(encode_png(arr))
    assert out.dtype == dtype
    assert np.array_equal(out, arr)


def test_png_codec_rgb():
    arr = np.random.default_rng(1).integers(0, 256, size=(8, 9, 3)).astype(np.uint8)
    assert np.array_equal(decode_png(encode_png(arr)), arr)


def test_png_rejects_floats_and_garbage():
    with pytest.raises(InvalidArgument):
        encode_png(np.zeros((2, 2), np.float32))
    with pytest.raises(ProtocolError):
        decode_png("not base64 png!!")


def test_quantizers():
    m = np.array([[0.0, 0.5, 1.0, 0.002]])
    assert quantize_mask(m).tolist() == [[0, 128, 255, 1]]
    d = quantize_depth(np.array([[2.0, 3.0, 4.0]]))
    assert d.tolist() == [[0, 32768, 65535]]
    assert not quantize_depth(np.full((2, 2), 5.0)).any()


def test_oracle_backend_matches_env(scene):
    rgb, result, prompt = scene
    env = sim.make_env("wiping", sim.instance("wiping", "red"))
    env.reset(3)
    got = perceive(OracleBackend(env), rgb, prompt)
    assert got.masks.labels == result.masks.labels
    assert np.array_equal(got.masks.masks, result.masks.masks)
    assert np.array_equal(got.raw_depth, result.raw_depth)


def test_perceive_validates_inputs(scene):
    rgb, _, prompt = scene
    with pytest.raises(InvalidArgument):
        perceive(OracleBackend(None), rgb[..., 0], prompt)
    with pytest.raises(InvalidArgument):
        perceive(OracleBackend(None), rgb, " . ")


def test_perceive_wraps_backend_failures(scene):
    rgb, _, prompt = scene

    class Broken:
        name = "broken"

        def perceive(self, rgb, prompt):
            raise RuntimeError("boom")

    with pytest.raises(PerceptionError, match="broken"):
        perceive(Broken(), rgb, prompt)


def test_remote_round_trip_within_quantization(scene, server):
    rgb, result, prompt = scene
    with RemoteBackend(server.url) as client:
        got = perceive(client, rgb, prompt)
    assert got.masks.labels == result.masks.labels
    assert np.abs(got.masks.masks - result.masks.masks).max() <= 1 / 255
    assert np.abs(fuse_masks(got.masks) - fuse_masks(result.masks)).max() <= 1 / 255
    assert np.abs(normalize_depth(got.raw_depth) - normalize_depth(result.raw_depth)).max() <= 1 / 255
    assert got.latency_ms > 0


def test_fixture_save_load(tmp_path, scene):
    fx = Fixture.from_result(scene[1])
    fx.save(tmp_path / "fx.npz")
    back = Fixture.load(tmp_path / "fx.npz")
    assert back.labels == fx.labels
    assert np.array_equal(back.masks, fx.masks) and np.array_equal(back.depth, fx.depth)


def test_retry_after_5xx_with_backoff(scene, server):
    rgb, _, prompt = scene
    server.fail_next = 2
    sleeps = SleepRecorder()
    with RemoteBackend(server.url, sleep=sleeps) as client:
        got = client.perceive(rgb, prompt)
    assert len(got.masks) == len(split_prompt(prompt))
    assert sleeps.calls == [0.5, 1.0]
    # two failed segment calls, one good segment call, one depth call
    assert [p for p, _ in server.requests] == ["/segment"] * 3 + ["/depth"]


def test_retries_exhausted(scene, server):
    rgb, _, prompt = scene
    server.fail_next = 3
    sleeps = SleepRecorder()
    with RemoteBackend(server.url, sleep=sleeps) as client:
        with pytest.raises(RetryableTransportError):
            client.segment(rgb, prompt)
    assert sleeps.calls == [0.5, 1.0]
    assert len(server.requests) == 3


def test_backoff_wall_clock(scene, server):
    # real sleeps: the gaps between attempts follow 0.5 s then 1 s
    rgb, _, prompt = scene
    server.fail_next = 2
    with RemoteBackend(server.url) as client:
        client.segment(rgb, prompt)
    t = [ts for _, ts in server.requests]
    assert 0.45 <= t[1] - t[0] < 0.9
    assert 0.95 <= t[2] - t[1] < 1.5


def _mock_transport(status, body=None, calls=None):
    def handler(request):
        if calls is not None:
            calls.append(request.url.path)
        return httpx.Response(status, json=body if body is not None else {"error": "x"})

    return httpx.MockTransport(handler)


def test_4xx_is_protocol_error_without_retry(scene):
    rgb, _, prompt = scene
    calls, sleeps = [], SleepRecorder()
    client = RemoteBackend("http://perception.invalid", transport=_mock_transport(422, calls=calls), sleep=sleeps)
    with pytest.raises(ProtocolError):
        client.perceive(rgb, prompt)
    assert calls == ["/segment"] and sleeps.calls == []


def test_timeout_is_retried(scene):
    rgb, _, prompt = scene
    calls = []

    def handler(request):
        calls.append(request.url.path)
        raise httpx.ReadTimeout("slow", request=request)

    client = RemoteBackend("http://perception.invalid", transport=httpx.MockTransport(handler), sleep=lambda s: None)
    with pytest.raises(RetryableTransportError):
        client.depth(rgb)
    assert len(calls) == 3


def test_malformed_response_is_protocol_error(scene):
    rgb, _, prompt = scene
    client = RemoteBackend("http://p.invalid", transport=_mock_transport(200, {"labels": ["a"], "masks": []}))
    with pytest.raises(ProtocolError):
        client.segment(rgb, prompt)
    bad_shape = {"labels": ["a"], "masks": [encode_png(np.zeros((4, 4), np.uint8))]}
    client = RemoteBackend("http://p.invalid", transport=_mock_transport(200, bad_shape))
    with pytest.raises(ProtocolError):
        client.segment(rgb, prompt)


def test_mock_server_rejects_bad_requests(server):
    with httpx.Client(base_url=server.url) as c:
        assert c.post("/segment", json={"image": "x"}).status_code == 400
        assert c.post("/nothing", json={"image": "x"}).status_code == 404
        assert c.post("/depth", content=b"{not json").status_code == 400


def test_empty_segmentation_gives_zero_mask(scene):
    rgb, result, prompt = scene
    fx = Fixture([], np.zeros((0, 64, 64), np.uint8), quantize_depth(result.raw_depth))
    with MockPerceptionServer(fx) as srv, RemoteBackend(srv.url) as client:
        got = client.perceive(rgb, prompt)
    assert len(got.masks) == 0
    assert not fuse_masks(got.masks).any()


def test_cache_hits_skip_network(scene, server):
    rgb, _, prompt = scene
    with RemoteBackend(server.url) as client:
        a = client.perceive(rgb, prompt)
        b = client.perceive(rgb.copy(), prompt)
        assert a is b
        assert len(server.requests) == 2
        client.perceive(rgb, "sponge.")
        assert len(server.requests) == 4


def test_cache_concurrent_readers(scene, server):
    rgb, _, prompt = scene
    client = RemoteBackend(server.url)
    client.perceive(rgb, prompt)
    out, errors = [], []

    def read():
        try:
            out.append(client.perceive(rgb, prompt))
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=read) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    client.close()
    assert not errors and len(out) == 8
    assert all(r is out[0] for r in out)
    assert len(server.requests) == 2
