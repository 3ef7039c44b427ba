import numpy as np
import pytest
import torch

from fusionlungnet.network import (
    ABLATION_GRID,
    BASELINE,
    AblationFlags,
    BackboneConfig,
    ChannelAggregationAttention,
    FusionLungNet,
    MultiScaleFusion,
    ResidualRefinement,
    SelfRefinement,
    ShapeError,
    count_parameters,
    load_model,
    model_forward,
    rrm_forward,
    save_checkpoint,
)
from fusionlungnet.network.backbone import build_encoder, encode

from oracles import caa_reference, mff_reference, randomize_norms, sr_reference

TINY = BackboneConfig("tiny")


def _seeded(module, seed):
    torch.manual_seed(seed)
    for m in module.modules():
        if isinstance(m, torch.nn.Conv2d):
            torch.nn.init.normal_(m.weight, 0, 0.3)
            if m.bias is not None:
                torch.nn.init.normal_(m.bias, 0, 0.1)
    randomize_norms(module, np.random.default_rng(seed))
    return module.double().eval()


def _x(shape, seed=0):
    return torch.as_tensor(np.random.default_rng(seed).standard_normal(shape))


# ---- encoder ----------------------------------------------------------------

def test_tiny_encoder_shapes():
    feats = encode(torch.rand(2, 3, 160, 160), build_encoder(TINY))
    assert [tuple(f.shape) for f in feats] == [(2, 16, 40, 40), (2, 32, 20, 20), (2, 64, 10, 10), (2, 128, 5, 5)]


def test_resnet50_encoder_shapes():
    enc = build_encoder(BackboneConfig("resnet50")).eval()
    with torch.no_grad():
        feats = encode(torch.rand(1, 3, 320, 320), enc)
    assert [tuple(f.shape) for f in feats] == [(1, 256, 80, 80), (1, 512, 40, 40), (1, 1024, 20, 20), (1, 2048, 10, 10)]


@pytest.mark.parametrize("shape", [(1, 3, 100, 100), (1, 3, 64, 48), (3, 64, 64)])
def test_encoder_shape_error(shape):
    with pytest.raises(ShapeError):
        encode(torch.rand(*shape), build_encoder(TINY))


@pytest.mark.parametrize("kwargs", [
    {"variant": "vgg"},
    {"variant": "resnet50", "stage_channels": (16, 32, 64, 128)},
    {"variant": "tiny", "stage_channels": (4, 32, 64, 128)},
    {"variant": "tiny", "pretrained": True},
])
def test_backbone_config_validation(kwargs):
    with pytest.raises(ValueError):
        BackboneConfig(**kwargs)


# ---- CAA --------------------------------------------------------------------

def test_caa_shape():
    caa = ChannelAggregationAttention(2048, 256).eval()
    with torch.no_grad():
        assert caa(torch.rand(1, 2048, 10, 10)).shape == (1, 256, 10, 10)


def test_caa_matches_reference():
    caa = _seeded(ChannelAggregationAttention(4, 6), 1)
    x = _x((2, 4, 4, 4), 2)
    with torch.no_grad():
        out, w = caa(x, return_weights=True)
    for b in range(2):
        ref, ref_w = caa_reference(x[b].numpy(), caa)
        np.testing.assert_allclose(out[b].numpy(), ref, atol=1e-6)
        np.testing.assert_allclose(w[b, :, 0, 0].numpy(), ref_w, atol=1e-6)


def test_caa_weights_one_scalar_per_channel():
    caa = ChannelAggregationAttention(8, 8).eval()
    x = torch.rand(3, 8, 5, 7)
    with torch.no_grad():
        out, w = caa(x, return_weights=True)
        i4 = caa.spatial(caa.reduce(x))
    assert w.shape == (3, 8, 1, 1)
    torch.testing.assert_close(w, caa.asym(i4).mean(dim=(2, 3), keepdim=True))
    torch.testing.assert_close(out, i4 * w.expand_as(i4))


def _center_average(conv, fan_in):
    with torch.no_grad():
        conv.weight.zero_()
        kh, kw = conv.weight.shape[-2:]
        conv.weight[:, :, kh // 2, kw // 2] = 1.0 / fan_in
        if conv.bias is not None:
            conv.bias.zero_()


def test_caa_constant_input_with_averaging_kernels():
    caa = ChannelAggregationAttention(4, 4).double().eval()
    # a norm layer maps a constant map to its bias, so take it out to expose
    # the conv / pooling / product wiring
    caa.reduce[1] = torch.nn.Identity()
    caa.spatial[1] = torch.nn.Identity()
    for m in caa.modules():
        if isinstance(m, torch.nn.Conv2d):
            _center_average(m, m.in_channels)
    c = 0.7
    with torch.no_grad():
        out, w = caa(torch.full((1, 4, 4, 4), c, dtype=torch.float64), return_weights=True)
    torch.testing.assert_close(w, torch.full_like(w, c), rtol=0, atol=1e-12)
    torch.testing.assert_close(out, torch.full_like(out, c * c), rtol=0, atol=1e-12)


def test_caa_box_kernels_match_reference():
    # full averaging kernels see the zero padding at the borders, so the
    # output is not constant; the loop-level reference pins it down
    caa = ChannelAggregationAttention(4, 4).double().eval()
    for m in caa.modules():
        if isinstance(m, torch.nn.Conv2d):
            with torch.no_grad():
                m.weight.fill_(1.0 / m.weight[0].numel())
                if m.bias is not None:
                    m.bias.zero_()
    x = torch.full((1, 4, 4, 4), 0.7, dtype=torch.float64)
    with torch.no_grad():
        out = caa(x)
    np.testing.assert_allclose(out[0].numpy(), caa_reference(x[0].numpy(), caa)[0], atol=1e-6)


# ---- MFF --------------------------------------------------------------------

def test_mff_shape():
    mff = MultiScaleFusion(256, 1024, 256, 256).eval()
    with torch.no_grad():
        out = mff(torch.rand(1, 256, 10, 10), torch.rand(1, 1024, 20, 20), torch.rand(1, 256, 10, 10))
    assert out.shape == (1, 256, 20, 20)


def test_mff_matches_reference():
    mff = _seeded(MultiScaleFusion(3, 5, 4, 6), 3)
    i1, i2, i3 = _x((1, 3, 2, 2), 4), _x((1, 5, 4, 4), 5), _x((1, 4, 2, 2), 6)
    with torch.no_grad():
        out = mff(i1, i2, i3)
    ref = mff_reference(i1[0].numpy(), i2[0].numpy(), i3[0].numpy(), mff)
    np.testing.assert_allclose(out[0].numpy(), ref, atol=1e-6)


def test_mff_symmetric_inputs_give_equal_products():
    mff = MultiScaleFusion(4, 4, 4, 4).eval()
    mff.proj2.load_state_dict(mff.proj1.state_dict())
    mff.proj3.load_state_dict(mff.proj1.state_dict())
    x = torch.rand(2, 4, 6, 6)
    with torch.no_grad():
        ab, ac, bc = mff.pairwise(x, x, x)
    torch.testing.assert_close(ab, ac, rtol=0, atol=0)
    torch.testing.assert_close(ab, bc, rtol=0, atol=0)


def test_mff_batch_mismatch():
    mff = MultiScaleFusion(4, 4, 4, 4)
    with pytest.raises(ShapeError):
        mff(torch.rand(1, 4, 2, 2), torch.rand(2, 4, 4, 4), torch.rand(1, 4, 2, 2))


# ---- SR ---------------------------------------------------------------------

def test_sr_shape():
    sr = SelfRefinement(256, 256).eval()
    with torch.no_grad():
        assert sr(torch.rand(1, 256, 20, 20)).shape == (1, 256, 20, 20)


def test_sr_matches_reference():
    sr = _seeded(SelfRefinement(8, 5), 7)
    x = _x((1, 8, 4, 4), 8)
    with torch.no_grad():
        out = sr(x)
    np.testing.assert_allclose(out[0].numpy(), sr_reference(x[0].numpy(), sr), atol=1e-6)


def test_sr_identity_terms():
    sr = SelfRefinement(6, 4).eval()
    with torch.no_grad():
        sr.expand.weight.zero_()
        sr.expand.bias.copy_(torch.tensor([1.0] * 4 + [0.0] * 4))
        x = torch.randn(2, 6, 8, 8)
        torch.testing.assert_close(sr(x), torch.relu(sr.compress(x)), rtol=0, atol=0)


# ---- RRM --------------------------------------------------------------------

def test_rrm_zero_head_passthrough():
    rrm = ResidualRefinement(4, 8).eval()
    with torch.no_grad():
        rrm.head.weight.zero_()
        rrm.head.bias.zero_()
        logit = torch.randn(2, 1, 64, 64)
        torch.testing.assert_close(rrm(logit, torch.rand(2, 3, 64, 64)), logit, rtol=0, atol=0)
        coarse = torch.rand(2, 1, 64, 64)
        torch.testing.assert_close(rrm_forward(rrm, coarse, torch.rand(2, 3, 64, 64)), coarse, rtol=0, atol=1e-6)


def test_rrm_shape_and_depth():
    rrm = ResidualRefinement(4, 8).eval()
    seen = {}

    def hook(module, inputs, output):
        seen["deep"] = output.shape

    rrm.enc[4].register_forward_hook(hook)
    with torch.no_grad():
        out = rrm_forward(rrm, torch.rand(1, 1, 320, 320), torch.rand(1, 3, 320, 320))
    assert out.shape == (1, 1, 320, 320)
    assert 0 <= out.min() and out.max() <= 1
    assert seen["deep"][-2:] == (20, 20)


def test_model_zero_head_primary_equals_coarse():
    model = FusionLungNet(TINY).eval()
    with torch.no_grad():
        model.rrm.head.weight.zero_()
        model.rrm.head.bias.zero_()
        out = model(torch.rand(1, 3, 64, 64), supervision=True)
    assert torch.equal(out.primary, out.supplementary[0])


# ---- decoder side outputs -----------------------------------------------------

def test_zero_logits_give_half():
    model = FusionLungNet(TINY, AblationFlags(True, True, False)).eval()
    with torch.no_grad():
        for stage in model.decoder:
            stage.head.weight.zero_()
            stage.head.bias.zero_()
        out = model(torch.rand(1, 3, 64, 64), supervision=True)
    for m in out.maps():
        assert torch.all(m == 0.5)


def test_saturating_logits_give_one():
    model = FusionLungNet(TINY).eval()
    with torch.no_grad():
        model.decoder[2].head.weight.zero_()
        model.decoder[2].head.bias.fill_(1e4)
        out = model(torch.rand(1, 3, 64, 64), supervision=True)
    assert torch.all(out.supplementary[2] == 1.0)


# ---- full model ---------------------------------------------------------------

@pytest.mark.parametrize("size", [160, 320, 640])
def test_model_shapes_tiny(size):
    model = FusionLungNet(TINY).eval()
    with torch.no_grad():
        out = model_forward(model, torch.rand(1, 3, size, size))
    assert len(out.maps()) == 5
    for m in out.maps():
        assert m.shape == (1, 1, size, size)
        assert torch.isfinite(m).all() and m.min() >= 0 and m.max() <= 1


def test_model_shapes_resnet50():
    model = FusionLungNet(BackboneConfig("resnet50")).eval()
    with torch.no_grad():
        out = model_forward(model, torch.rand(2, 3, 320, 320))
    assert [tuple(m.shape) for m in out.maps()] == [(2, 1, 320, 320)] * 5


def test_inference_mode_skips_side_outputs():
    model = FusionLungNet(TINY).eval()
    with torch.no_grad():
        x = torch.rand(1, 3, 64, 64)
        fast = model(x)
        full = model(x, supervision=True)
    assert fast.supplementary == []
    assert torch.equal(fast.primary, full.primary)


def test_inference_bitwise_deterministic():
    model = FusionLungNet(TINY).eval()
    x = torch.rand(2, 3, 96, 96)
    with torch.no_grad():
        assert torch.equal(model(x).primary, model(x).primary)


def test_construction_seeded():
    a, b = FusionLungNet(TINY, seed=5), FusionLungNet(TINY, seed=5)
    for (k, v), w in zip(a.state_dict().items(), b.state_dict().values()):
        assert torch.equal(v, w), k
    c = FusionLungNet(TINY, seed=6)
    assert not torch.equal(a.caa.reduce[0].weight, c.caa.reduce[0].weight)


def test_baseline_parameter_count():
    model = FusionLungNet(TINY, BASELINE)
    assert model.mff is None and model.sr is None and model.rrm is None
    expected = count_parameters(model.encoder) + count_parameters(model.caa) + count_parameters(model.decoder)
    assert count_parameters(model) == expected


def test_ablation_grid_rows():
    labels = [f.label for f in ABLATION_GRID]
    assert labels == ["baseline", "baseline + MFF", "baseline + RRM", "baseline + MFF + SR",
                      "baseline + MFF + SR + RRM"]
    with pytest.raises(ValueError):
        AblationFlags(use_mff=False, use_sr=True)


@pytest.mark.parametrize("flags", ABLATION_GRID)
def test_every_ablation_runs(flags):
    model = FusionLungNet(TINY, flags).train()
    out = model(torch.rand(2, 3, 64, 64))
    assert len(out.supplementary) == 4
    sum(m.mean() for m in out.maps()).backward()


def test_checkpoint_roundtrip(tmp_path):
    model = FusionLungNet(TINY, AblationFlags(True, False, True), seed=3).eval()
    x = torch.rand(2, 3, 64, 64)
    with torch.no_grad():
        before = model(x).primary
    save_checkpoint(tmp_path / "m.pt", model, epoch=4, seed=3, config={"a": 1})
    loaded, payload = load_model(tmp_path / "m.pt")
    with torch.no_grad():
        assert torch.equal(loaded(x).primary, before)
    assert payload["manifest"]["epoch"] == 4 and payload["manifest"]["seed"] == 3
    assert loaded.flags == model.flags


def test_load_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "none.pt")


# ---- gradient check -----------------------------------------------------------

def _rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def test_gradient_check_new_blocks():
    """Analytic vs central-difference gradients for CAA, MFF, SR and RRM parameters."""
    model = FusionLungNet(TINY, seed=0).double().eval()
    x = torch.rand(1, 3, 64, 64, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    target = (torch.rand(1, 1, 64, 64, dtype=torch.float64, generator=torch.Generator().manual_seed(2)) > 0.5).double()

    def loss():
        out = model(x, supervision=True)
        return sum(((m - target) ** 2).mean() for m in out.maps())

    model.zero_grad()
    loss().backward()
    rng = np.random.default_rng(0)
    h = 1e-6
    worst = 0.0
    checked = 0
    for part in (model.caa, model.mff, model.sr, model.rrm):
        for name, p in part.named_parameters():
            flat = p.data.view(-1)
            grad = p.grad.view(-1)
            for i in rng.choice(flat.numel(), size=min(2, flat.numel()), replace=False):
                orig = flat[i].item()
                with torch.no_grad():
                    flat[i] = orig + h
                    up = loss().item()
                    flat[i] = orig - h
                    down = loss().item()
                    flat[i] = orig
                numeric = (up - down) / (2 * h)
                if max(abs(numeric), abs(grad[i].item())) < 1e-7:
                    continue  # dead unit; relative error undefined
                worst = max(worst, _rel_err(grad[i].item(), numeric))
                checked += 1
    assert checked > 100
    assert worst < 1e-3
