import pytest
import torch
import torch.nn.functional as F

from conftest import micro_config, micro_registry
from meduniseg.backbone import (
    Backbone,
    ModelConfig,
    PromptConfig,
    PseudoConv3d,
    stage_shapes,
)
from meduniseg.errors import ConfigurationError, RoutingError
from meduniseg.network import build_model
from meduniseg.registry import build_registry


def seven_class_registry():
    return build_registry([("ct", 1, "3D"), ("x", 3, "2D")], [("a", 5, 0), ("b", 6, 0), ("c", 7, 1)]).freeze()


def test_default_config_shapes():
    cfg = ModelConfig().validate()
    assert cfg.prompt_dims == (4, 6, 6)
    assert stage_shapes(cfg.patch_3d, cfg.stage_strides)[-1] == (4, 6, 6)
    assert cfg.widths == (32, 64, 128, 256, 320, 320)


def test_default_patch_encode_and_decode_shapes():
    reg = seven_class_registry()
    cfg = ModelConfig(width_scale=1 / 32, prompt=PromptConfig(16, 4), max_class_count=7)
    model = build_model(cfg, reg, seed=0)
    with torch.no_grad():
        x = torch.randn(2, 1, 64, 192, 192)
        feats = model.backbone.encode(x)
        assert tuple(feats.bottleneck.shape) == (2, cfg.bottleneck_channels, 4, 6, 6)
        logits = model(x[:1], 0, 0)
    assert tuple(logits[0].shape) == (1, 7, 64, 192, 192)
    assert len(logits) == 4


def test_2d_patch_keeps_depth_one():
    reg = seven_class_registry()
    cfg = ModelConfig(width_scale=1 / 32, prompt=PromptConfig(16, 4), max_class_count=7)
    model = build_model(cfg, reg, seed=0)
    with torch.no_grad():
        feats = model.backbone.encode(torch.randn(1, 3, 1, 512, 512))
    for f in feats.skips + [feats.bottleneck]:
        assert f.shape[2] == 1
    assert tuple(feats.bottleneck.shape[2:]) == (1, 16, 16)


def test_desk_patch_validation():
    base = dict(width_scale=1 / 8)
    with pytest.raises(ConfigurationError):
        ModelConfig(patch_3d=(16, 48, 48), patch_2d=(64, 64), **base).validate()
    cfg = ModelConfig(patch_3d=(16, 96, 96), patch_2d=(64, 64), **base).validate()
    assert cfg.prompt_dims == (1, 3, 3)


def test_degenerate_bottleneck_rejected():
    with pytest.raises(ConfigurationError, match="degenerate"):
        ModelConfig(patch_3d=(16, 32, 32), patch_2d=(64, 64)).validate()


@pytest.mark.parametrize(
    "kw",
    [
        dict(stage_widths=(8, 8, 8, 8, 8)),
        dict(stage_strides=((1, 1, 1),) * 5),
        dict(stage_strides=((2, 2, 2),) + ((1, 1, 1),) * 5),
        dict(variant="Nope"),
        dict(patch_2d=(100, 100)),
        dict(prompt=PromptConfig(fuse_blocks=0)),
    ],
)
def test_invalid_configs(kw):
    with pytest.raises(ConfigurationError):
        micro_config(**kw).validate()


def test_config_dict_round_trip():
    cfg = micro_config(variant="UniSeg")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_supervised_scale_count():
    assert micro_config().supervised_scales == 4


def _capture_shapes(model, x, task_id, modal_id):
    shapes = {}
    hooks = []
    for i, stage in enumerate(model.backbone.encoder):
        hooks.append(stage.register_forward_hook(lambda m, a, o, i=i: shapes.__setitem__(("enc", i), tuple(o.shape[2:]))))
    for u, stage in enumerate(model.backbone.decoder):
        hooks.append(stage.register_forward_hook(lambda m, a, o, u=u: shapes.__setitem__(("dec", u), tuple(o.shape[2:]))))
    logits = model(x, task_id, modal_id)
    for h in hooks:
        h.remove()
    return shapes, logits


@pytest.mark.parametrize("task_id,modal_id,dims", [(0, 0, (8, 24, 24)), (2, 2, (1, 24, 24))])
def test_shape_law_micro(task_id, modal_id, dims):
    model = build_model(micro_config(), micro_registry(), seed=0)
    c = model.registry.modality(modal_id).channel_count
    with torch.no_grad():
        shapes, logits = _capture_shapes(model, torch.randn(1, c, *dims), task_id, modal_id)
    oracle = stage_shapes(dims, model.config.stage_strides)
    for s in range(6):
        assert shapes[("enc", s)] == oracle[s]
    for u in range(5):
        assert shapes[("dec", u)] == oracle[4 - u]
    for i, lg in enumerate(logits):
        assert tuple(lg.shape[2:]) == oracle[i]
        assert lg.shape[1] == 3


def test_zero_parameters_give_zero_logits():
    model = build_model(micro_config(), micro_registry(), seed=0)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
        logits = model(torch.randn(2, 1, 8, 24, 24), 0, 0)
    for lg in logits:
        assert torch.count_nonzero(lg) == 0


def test_stem_exclusivity():
    model = build_model(micro_config(), micro_registry(), seed=0)
    logits = model(torch.randn(2, 2, 8, 24, 24), 1, 1)
    logits[0].square().mean().backward()
    stems = model.backbone.stem.stems
    for c, stem in enumerate(stems, start=1):
        grad = stem.weight.grad
        if c == 2:
            assert grad is not None and grad.abs().sum() > 0
        else:
            assert grad is None or torch.count_nonzero(grad) == 0


def test_channel_count_outside_range():
    bb = Backbone(micro_config())
    with pytest.raises(RoutingError):
        bb.encode(torch.randn(1, 5, 8, 24, 24))


def test_channel_modality_mismatch():
    model = build_model(micro_config(), micro_registry(), seed=0)
    with pytest.raises(RoutingError):
        model(torch.randn(1, 3, 8, 24, 24), 0, 0)


def test_decoder_channel_mismatch():
    bb = Backbone(micro_config())
    with torch.no_grad():
        feats = bb.encode(torch.randn(1, 1, 8, 24, 24))
        with pytest.raises(ConfigurationError):
            bb.decode(feats, torch.cat([feats.bottleneck, feats.bottleneck], 1))


def test_output_channels_constant_across_tasks():
    model = build_model(micro_config(), micro_registry(), seed=0)
    with torch.no_grad():
        a = model(torch.randn(1, 1, 8, 24, 24), 0, 0)
        b = model(torch.randn(1, 2, 8, 24, 24), 1, 1)
        c = model(torch.randn(1, 3, 1, 24, 24), 2, 2)
    assert a[0].shape[1] == b[0].shape[1] == c[0].shape[1] == 3


def test_pseudo_conv_matches_zero_padded_depth():
    torch.manual_seed(0)
    conv = PseudoConv3d(3, 4, 3, stride=(2, 2, 2), padding=1)
    x = torch.randn(2, 3, 1, 10, 10)
    ref = F.conv3d(x, conv.weight, conv.bias, (1, 2, 2), 1)
    torch.testing.assert_close(conv(x), ref, rtol=1e-5, atol=1e-6)


def test_build_requires_frozen_registry():
    reg = build_registry([("ct", 1, "3D")], [("a", 2, 0)])
    with pytest.raises(ConfigurationError):
        build_model(micro_config(max_class_count=2), reg)


def test_build_is_seed_deterministic():
    a = build_model(micro_config(), micro_registry(), seed=3)
    b = build_model(micro_config(), micro_registry(), seed=3)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
