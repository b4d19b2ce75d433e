import numpy as np
import pytest
import torch

from pse_distill.checkpoint import MAGIC, load_checkpoint, load_model, save_model
from pse_distill.dsp import log_mel
from pse_distill.model import (
    LogMel,
    PseConfig,
    PseNet,
    PvadConfig,
    PvadNet,
    build_model,
    config_dict,
    pse_forward,
    pvad_forward,
)


def _dvec(rng, b=1):
    d = rng.standard_normal((b, 128))
    return torch.from_numpy(d / np.linalg.norm(d, axis=1, keepdims=True))


@pytest.fixture(scope="module")
def pse():
    return PseNet(PseConfig(seed=3)).double().eval()


@pytest.fixture(scope="module")
def pvad():
    m = PvadNet(PvadConfig(seed=4)).double().eval()
    with torch.no_grad():
        m.feat_mean.fill_(-8.0)
        m.feat_scale.fill_(0.3)
    return m


@pytest.mark.parametrize("n", [16000, 16001, 16159])
def test_output_length_equals_input_length(pse, rng, n):
    x = torch.from_numpy(rng.standard_normal((2, n)))
    with torch.no_grad():
        assert pse(x, _dvec(rng, 2)).shape == (2, n)


def test_too_short_input_rejected(pse, rng):
    with pytest.raises(ValueError, match="shorter"):
        pse(torch.zeros(1, 300, dtype=torch.float64), _dvec(rng))


@pytest.mark.parametrize("t", [0, 3, 17, 60])
def test_pse_causality(pse, rng, t):
    # samples >= n lie outside input frames <= t; output up to the end of frame t's hop is final
    n = 160 * t + 320
    x = rng.standard_normal(16000)
    x2 = x.copy()
    x2[n:] = 10 * rng.standard_normal(16000 - n)
    d = _dvec(rng)
    with torch.no_grad():
        a = pse(torch.from_numpy(x)[None], d)[0]
        b = pse(torch.from_numpy(x2)[None], d)[0]
    assert torch.max(torch.abs(a[: n - 160] - b[: n - 160])) < 1e-6
    assert torch.max(torch.abs(a[n:] - b[n:])) > 1e-6  # the probe really perturbs something


@pytest.mark.parametrize("t", [0, 5, 40])
def test_pvad_causality(pvad, rng, t):
    n = 160 * t + 320
    x = 0.1 * rng.standard_normal(8000)
    x2 = x.copy()
    x2[n:] = rng.standard_normal(8000 - n)
    d = _dvec(rng)
    with torch.no_grad():
        a = pvad(torch.from_numpy(x)[None], d)[0]
        b = pvad(torch.from_numpy(x2)[None], d)[0]
    assert torch.max(torch.abs(a[: t + 1] - b[: t + 1])) < 1e-6
    assert torch.max(torch.abs(a[t + 1 :] - b[t + 1 :])) > 1e-9


def test_zero_input_zero_bias_gives_zero_output(rng):
    m = PseNet(PseConfig()).double()
    with torch.no_grad():
        for name, p in m.named_parameters():
            if name.endswith("bias") or "bias_" in name:
                p.zero_()
        y = m(torch.zeros(1, 4000, dtype=torch.float64), _dvec(rng))
    assert torch.all(y == 0)


def test_masks_are_nonnegative(pse, rng):
    with torch.no_grad():
        _, mask = pse.encode_and_mask(torch.from_numpy(rng.standard_normal((1, 3200))), _dvec(rng))
    assert mask.shape == (1, 19, 128)
    assert torch.all(mask >= 0)


def test_posteriors_valid_and_frame_aligned(pvad, rng):
    x = torch.from_numpy(rng.standard_normal((3, 4000)))
    with torch.no_grad():
        logits = pvad.logits(x, _dvec(rng, 3))
        p = pvad(x, _dvec(rng, 3))
    probs = torch.softmax(logits, -1)
    assert torch.max(torch.abs(probs.sum(-1) - 1)) < 1e-6
    assert p.shape == (3, 1 + (4000 - 320) // 160)
    assert torch.all((p >= 0) & (p <= 1))


def test_logmel_module_matches_dsp(rng):
    x = rng.standard_normal(4000)
    np.testing.assert_allclose(LogMel()(torch.from_numpy(x)[None].float())[0].double().numpy(), log_mel(x), rtol=1e-4, atol=1e-3)


def test_numpy_helpers(pse, pvad, rng):
    x = rng.standard_normal(3200)
    d = _dvec(rng)[0].numpy()
    assert pse_forward(x, d, pse).shape == (3200,)
    assert pvad_forward(x, d, pvad).shape == (19,)


def test_finite_difference_gradients(rng):
    torch.manual_seed(0)
    m = PseNet(PseConfig(encoder_filters=8, lstm_dim=6, ffn_dim=5, lstm_blocks=1)).double()
    x = torch.from_numpy(rng.standard_normal((1, 960)))
    d = _dvec(rng)
    target = torch.from_numpy(rng.standard_normal((1, 960)))

    def loss():
        return torch.mean((m(x, d) - target) ** 2)

    m.zero_grad()
    loss().backward()
    params = dict(m.named_parameters())
    checked = 0
    for name in ("encoder.weight", "blocks.0.lstm.weight_hh_l0", "blocks.0.fc1.weight", "mask_fc.bias", "decoder.weight", "in_proj.weight"):
        p = params[name]
        flat = p.data.view(-1)
        for idx in rng.choice(flat.numel(), size=3, replace=False):
            g = p.grad.view(-1)[idx].item()
            h = 1e-6
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + h
                up = loss().item()
                flat[idx] = orig - h
                down = loss().item()
                flat[idx] = orig
            fd = (up - down) / (2 * h)
            assert abs(fd - g) <= 1e-3 * max(abs(fd), abs(g), 1e-6), (name, idx, fd, g)
            checked += 1
    assert checked == 18


def test_full_and_toy_configs_construct():
    toy = PseNet(PseConfig())
    big = PseNet(PseConfig.full())
    assert type(toy.blocks[0]) is type(big.blocks[0])
    assert big.encoder.out_channels == 2048 and len(big.blocks) == 4 and big.cfg.lstm_dim == 256
    assert sum(p.numel() for p in big.parameters()) > 20 * sum(p.numel() for p in toy.parameters())
    pv = PvadNet(PvadConfig.full())
    assert len(pv.blocks) == 3 and pv.classifier.out_features == 2


@pytest.mark.parametrize(
    "kw", [{"encoder_kernel": 400}, {"encoder_stride": 80}, {"lstm_dim": 0}, {"encoder_filters": -1}]
)
def test_invalid_configs_rejected(kw):
    with pytest.raises(ValueError):
        PseConfig(**kw)


def test_seeded_init_is_reproducible():
    a, b = PseNet(PseConfig(seed=7)), PseNet(PseConfig(seed=7))
    c = PseNet(PseConfig(seed=8))
    for (k, v), w in zip(a.state_dict().items(), b.state_dict().values()):
        assert torch.equal(v, w), k
    assert not torch.equal(a.encoder.weight, c.encoder.weight)


def test_checkpoint_round_trip(tmp_path, pse, rng):
    path = tmp_path / "m.ckpt"
    save_model(path, pse, "pse", config_dict(pse.cfg), seed=3, extra={"note": "x"})
    assert path.read_bytes()[:8] == MAGIC
    model, meta = load_model(path, expect_kind="pse")
    assert meta["seed"] == 3 and meta["config"]["seed"] == 3 and meta["note"] == "x"
    x = torch.from_numpy(rng.standard_normal((1, 2000)))
    d = _dvec(rng)
    with torch.no_grad():
        assert torch.equal(model(x, d), pse(x, d))
    state, _ = load_checkpoint(path)
    assert set(state) == set(pse.state_dict())


def test_checkpoint_kind_and_shape_mismatch(tmp_path, pse):
    path = tmp_path / "m.ckpt"
    save_model(path, pse, "pse", config_dict(pse.cfg), seed=3)
    with pytest.raises(ValueError, match="expected a pvad"):
        load_model(path, expect_kind="pvad")
    cfg = config_dict(pse.cfg)
    cfg["lstm_dim"] = 32
    save_model(path, pse, "pse", cfg, seed=3)
    with pytest.raises(ValueError, match="do not match"):
        load_model(path)


def test_build_model_from_dict():
    m = build_model("pvad", {"lstm_dim": 16, "ffn_dim": 8, "unused": 1})
    assert isinstance(m, PvadNet) and m.cfg.lstm_dim == 16
