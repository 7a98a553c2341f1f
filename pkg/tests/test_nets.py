import numpy as np
import pytest
import torch

from s2policy import nets
from s2policy.errors import CorruptionError, InvalidArgument, UnsupportedFormat
from s2policy.policy import PolicyConfig, diffusion_loss
from s2policy.sched import make_schedule


def tiny_model(variant="s2", seed=0, dtype=torch.float32):
    cfg = PolicyConfig.tiny(variant=variant)
    enc, den = cfg.model_configs(action_dim=2, proprio_dim=2)
    return nets.init_params(enc, den, seed).to(dtype), cfg


def inputs(model, B=3, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    ec, dc = model.encoder_cfg, model.denoiser_cfg
    obs = torch.rand(B, dc.n_obs, ec.in_channels, ec.image_size, ec.image_size, generator=g, dtype=dtype)
    q = torch.rand(B, dc.n_obs, dc.proprio_dim, generator=g, dtype=dtype) * 2 - 1
    a0 = torch.rand(B, dc.pred_horizon, dc.action_dim, generator=g, dtype=dtype) * 2 - 1
    return obs, q, a0


def test_config_invariants():
    with pytest.raises(InvalidArgument):
        nets.EncoderConfig(in_channels=4)
    with pytest.raises(InvalidArgument):
        nets.EncoderConfig(in_channels=2, feature_dim=4)
    with pytest.raises(InvalidArgument):
        nets.DenoiserConfig(action_dim=0)


def test_cond_dim_formula():
    d = nets.DenoiserConfig(action_dim=2, n_obs=2, feature_dim=128, proprio_dim=2, timestep_embed_dim=64)
    assert d.cond_dim == 2 * 128 + 2 * 2 + 64


@pytest.mark.parametrize("cin", [1, 2, 3])
def test_encoder_shapes(cin):
    enc = nets.ObsEncoder(nets.EncoderConfig(in_channels=cin, feature_dim=32, widths=(4, 8, 8, 16)))
    out = enc(torch.rand(5, cin, 64, 64))
    assert out.shape == (5, 32)


def test_spatial_softmax_locates_peak():
    ss = nets.SpatialSoftmax(1, 1)
    with torch.no_grad():
        ss.keypoints.weight.fill_(1.0)
        ss.keypoints.bias.zero_()
    h = torch.zeros(1, 1, 9, 9)
    h[0, 0, 2, 6] = 100.0  # row 2, column 6 on a [-1, 1] grid with step 0.25
    out = ss(h)
    assert out.shape == (1, 2)
    np.testing.assert_allclose(out[0].detach().numpy(), [0.5, -0.5], atol=1e-4)


def test_spatial_softmax_uniform_map_is_centered():
    out = nets.SpatialSoftmax(3, 5)(torch.zeros(2, 3, 8, 8))
    assert out.shape == (2, 10)
    np.testing.assert_allclose(out.detach().numpy(), 0.0, atol=1e-6)


def test_encoder_avg_pool_option():
    cfg = nets.EncoderConfig(in_channels=2, feature_dim=16, widths=(4, 8, 8, 16), pool="avg")
    enc = nets.ObsEncoder(cfg)
    assert enc(torch.rand(3, 2, 64, 64)).shape == (3, 16)
    with pytest.raises(InvalidArgument):
        nets.EncoderConfig(pool="max")
    with pytest.raises(InvalidArgument):
        nets.EncoderConfig(strides=(1, 2, 3, 1))


def test_encoder_rejects_wrong_channels():
    enc = nets.ObsEncoder(nets.EncoderConfig(in_channels=2, feature_dim=16, widths=(4, 8, 8, 16)))
    with pytest.raises(InvalidArgument):
        enc(torch.rand(1, 3, 64, 64))


@pytest.mark.parametrize("horizon", [4, 8, 16])
def test_denoiser_preserves_chunk_shape(horizon):
    den = nets.DenoiserConfig(action_dim=3, pred_horizon=horizon, n_obs=2, feature_dim=16, down_dims=(16, 32, 64))
    unet = nets.TemporalUnet(den)
    a = torch.randn(4, horizon, 3)
    out = unet(a, torch.tensor([1, 5, 9, 99]), torch.randn(4, den.cond_dim - den.timestep_embed_dim))
    assert out.shape == a.shape


def test_predict_clean_action_shape_checks():
    model, cfg = tiny_model()
    obs, q, a0 = inputs(model)
    f_v = nets.encode_obs(model, obs.flatten(0, 1)).reshape(3, cfg.n_obs, -1)
    out = nets.predict_clean_action(model, a0, torch.tensor(3), f_v, q)
    assert out.shape == a0.shape
    with pytest.raises(InvalidArgument):
        nets.predict_clean_action(model, a0[:, :2], torch.tensor(3), f_v, q)
    with pytest.raises(InvalidArgument):
        nets.predict_clean_action(model, a0, torch.tensor(3), f_v[:, :1], q)
    with pytest.raises(InvalidArgument):
        nets.predict_clean_action(model, a0, torch.tensor([1, 2]), f_v, q)


def test_step_embedding_distinguishes_steps():
    emb = nets.SinusoidalStepEmbedding(16)
    e = emb(torch.arange(0, 100))
    assert e.shape == (100, 16)
    assert torch.cdist(e, e).fill_diagonal_(1.0).min() > 1e-3


def test_init_is_seeded_and_leaves_global_rng_alone():
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    a, _ = tiny_model(seed=7)
    after = torch.rand(1)
    b, _ = tiny_model(seed=7)
    c, _ = tiny_model(seed=8)
    assert torch.equal(before, after)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert any(not torch.equal(sa[k], sc[k]) for k in sa)


def test_tiny_model_is_small():
    model, _ = tiny_model()
    assert model.num_parameters() < 300_000


def test_parameters_finite_and_fixed_shape():
    model, _ = tiny_model()
    for p in model.parameters():
        assert torch.isfinite(p).all()


def test_gradient_matches_central_differences():
    torch.manual_seed(0)
    model, cfg = tiny_model(dtype=torch.float64)
    sched = make_schedule(cfg.K)
    obs, q, a0 = inputs(model, B=2, dtype=torch.float64)
    g = torch.Generator().manual_seed(1)
    k = torch.randint(1, cfg.K + 1, (2,), generator=g)
    eps = torch.randn(a0.shape, generator=g, dtype=torch.float64)
    model.train()

    def loss():
        return diffusion_loss(model, obs, q, a0, k, eps, sched)

    model.zero_grad()
    loss().backward()
    params = [p for p in model.parameters() if p.requires_grad]
    rng = np.random.default_rng(2)
    checked, worst = 0, 0.0
    h = 1e-6
    while checked < 24:
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = p.grad[idx].item()
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + h
            up = loss().item()
            p[idx] = orig - h
            down = loss().item()
            p[idx] = orig
        numeric = (up - down) / (2 * h)
        scale = max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, abs(analytic - numeric) / scale)
        checked += 1
    assert worst <= 1e-3


def test_checkpoint_round_trip(tmp_path):
    model, _ = tiny_model(seed=3)
    header = {"configs": model.configs(), "note": "x"}
    nets.save_checkpoint(tmp_path / "m.s2ckpt", model.state_dict(), header)
    tensors, head = nets.load_checkpoint(tmp_path / "m.s2ckpt")
    assert head["note"] == "x"
    clone = nets.model_from_header(head)
    nets.load_state(clone, tensors)
    for k, v in model.state_dict().items():
        assert torch.equal(clone.state_dict()[k].float(), v.float()), k


def test_checkpoint_bytes_deterministic(tmp_path):
    for name in ("a", "b"):
        m, _ = tiny_model(seed=4)
        nets.save_checkpoint(tmp_path / name, m.state_dict(), {"configs": m.configs()})
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_checkpoint_corruption(tmp_path):
    m, _ = tiny_model()
    path = tmp_path / "m.s2ckpt"
    nets.save_checkpoint(path, m.state_dict(), {"configs": m.configs()})
    raw = path.read_bytes()
    (tmp_path / "short").write_bytes(raw[:-10])
    with pytest.raises(CorruptionError):
        nets.load_checkpoint(tmp_path / "short")
    (tmp_path / "magic").write_bytes(b"NOTCKPT!" + raw[8:])
    with pytest.raises(UnsupportedFormat):
        nets.load_checkpoint(tmp_path / "magic")


def test_load_state_rejects_mismatched_shapes():
    a, _ = tiny_model()
    b, _ = tiny_model(variant="rgb")
    tensors = {k: v.numpy() for k, v in b.state_dict().items()}
    with pytest.raises(InvalidArgument):
        nets.load_state(a, tensors)
