import numpy as np
import pytest
import torch

from contourdet.datasets import SynthConfig, generate_synthetic
from contourdet.losses import joint_loss
from contourdet.model import (
    BackboneConfig,
    ConfigError,
    ModelVariant,
    NonFiniteOutputError,
    build_model,
    count_shared_parameters,
    preprocess_images,
)
from contourdet.targets import build_targets
from contourdet.training import collate_targets

SMALL = BackboneConfig(stage_channels=(8, 8, 16, 16, 32), decoder_channels=(16, 16, 16), input_size=256)
VARIANTS = list(ModelVariant)


def forward(net, x):
    net.eval()
    with torch.no_grad():
        return net(x)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("size", [256, 512])
def test_output_shapes_and_ranges(variant, size):
    net = build_model(variant, SMALL, seed=0)
    out = forward(net, torch.randn(1, 3, size, size))
    q = size // 4
    assert out.score.shape == (1, 1, q, q)
    assert out.distances.shape == (1, 4, q, q)
    assert out.angle.shape == (1, 1, q, q)
    assert (out.contour is None) == (variant is ModelVariant.BASELINE)
    if out.contour is not None:
        assert out.contour.shape == (1, 1, q, q)
        assert torch.all((out.contour > 0) & (out.contour < 1))
    assert torch.all((out.score > 0) & (out.score < 1))
    assert torch.all(out.distances >= 0)
    assert torch.all((out.angle >= -np.pi / 4) & (out.angle <= 3 * np.pi / 4))


def test_non_square_input_and_bad_size():
    net = build_model("cascade2", SMALL, seed=0)
    assert forward(net, torch.zeros(1, 3, 256, 384)).score.shape == (1, 1, 64, 96)
    with pytest.raises(ConfigError):
        forward(net, torch.zeros(1, 3, 250, 256))


def test_zero_image_finite():
    for v in VARIANTS:
        out = forward(build_model(v, SMALL, seed=1), torch.zeros(2, 3, 256, 256))
        for k, a in out.numpy().items():
            if a is not None:
                assert np.isfinite(a).all(), (v, k)


def test_nan_is_attributed_to_a_layer():
    net = build_model("aux2", SMALL, seed=0)
    with torch.no_grad():
        net.encoder.stages[0][0][0].weight.fill_(float("nan"))
    with pytest.raises(NonFiniteOutputError, match="encoder"):
        forward(net, torch.zeros(1, 3, 256, 256))


def test_shared_parameter_reports():
    reports = {v: count_shared_parameters(build_model(v, SMALL, seed=0)) for v in VARIANTS}
    assert reports[ModelVariant.CASCADE1]["shared"] == []
    assert reports[ModelVariant.CASCADE1]["shared_parameters"] == 0
    assert reports[ModelVariant.AUX1]["shared"] == ["encoder"]
    enc = reports[ModelVariant.AUX1]["subsystems"]["encoder"]
    assert reports[ModelVariant.AUX1]["shared_parameters"] == enc
    assert set(reports[ModelVariant.AUX2]["shared"]) == {"encoder", "decoder"}
    assert set(reports[ModelVariant.CASCADE2]["shared"]) == {"encoder", "decoder"}
    assert reports[ModelVariant.BASELINE]["shared"] == []
    for r in reports.values():
        assert sum(r["subsystems"].values()) == r["total_parameters"]


def test_cascade2_parameter_arithmetic():
    aux2 = count_shared_parameters(build_model("aux2", SMALL, seed=0))["total_parameters"]
    cas2 = count_shared_parameters(build_model("cascade2", SMALL, seed=0))["total_parameters"]
    feat, depth = SMALL.decoder_channels[-1], 32
    # three bias-free 3x3 convs plus GroupNorm affine pairs
    merge = 9 * (feat + 1) * depth + 2 * 9 * depth * depth + 3 * 2 * depth
    # six 1x1 output channels (score, four distances, angle) see the new depth
    head_delta = 6 * (depth - feat)
    assert cas2 == aux2 + merge + head_delta


def _perturb(module, scale=0.5, seed=0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(torch.randn(p.shape, generator=g) * scale)


@pytest.mark.parametrize("variant", ["cascade1", "cascade2"])
def test_cascade_detection_depends_on_contour_weights(variant):
    net = build_model(variant, SMALL, seed=0)
    x = torch.randn(1, 3, 256, 256, generator=torch.Generator().manual_seed(3))
    before = forward(net, x)
    _perturb(net.contour_head)
    after = forward(net, x)
    assert not torch.allclose(before.score, after.score)
    assert not torch.allclose(before.distances, after.distances)


@pytest.mark.parametrize("variant", ["aux1", "aux2"])
def test_aux_detection_independent_of_contour_head(variant):
    net = build_model(variant, SMALL, seed=0)
    x = torch.randn(1, 3, 256, 256)
    before = forward(net, x)
    _perturb(net.contour_head)
    after = forward(net, x)
    assert torch.equal(before.score, after.score)
    assert not torch.equal(before.contour, after.contour)


def test_baseline_has_no_contour_modules():
    net = build_model("baseline", SMALL, seed=0)
    names = {n for n, _ in net.named_children()}
    assert not names & {"contour_head", "contour_encoder", "contour_decoder", "merge"}


def test_duplicated_batch_no_leakage():
    for v in VARIANTS:
        net = build_model(v, SMALL, seed=0)
        x = torch.randn(1, 3, 256, 256)
        single = forward(net, x)
        double = forward(net, torch.cat([x, x]))
        assert torch.allclose(double.score[0], single.score[0], atol=1e-5)
        assert torch.allclose(double.score[1], single.score[0], atol=1e-5)
        assert torch.allclose(double.distances[1], single.distances[0], atol=1e-4)


def test_cascade2_gradient_reaches_contour_head_through_both_paths():
    net = build_model("cascade2", SMALL, seed=0)
    x = torch.randn(1, 3, 256, 256)
    out = net(x)
    # detection-only loss: gradient must arrive via the merge concatenation
    out.score.sum().backward()
    g = net.contour_head.conv.weight.grad
    assert g is not None and g.abs().sum() > 0
    net.zero_grad()
    out = net(x)
    out.contour.sum().backward()
    assert net.contour_head.conv.weight.grad.abs().sum() > 0


def test_stop_contour_gradient_blocks_detection_path():
    net = build_model("cascade2", SMALL, seed=0, stop_contour_gradient=True)
    net(torch.randn(1, 3, 256, 256)).score.sum().backward()
    g = net.contour_head.conv.weight.grad
    assert g is None or g.abs().sum() == 0


def test_seeded_build_is_reproducible():
    a, b = build_model("aux1", SMALL, seed=7), build_model("aux1", SMALL, seed=7)
    for (na, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb), na


def test_preprocess_images():
    imgs = np.full((2, 64, 96, 3), 255, np.uint8)
    x = preprocess_images(imgs)
    assert x.shape == (2, 3, 64, 96) and x.dtype == torch.float32


def test_backbone_config_validation():
    with pytest.raises((ConfigError, ValueError)):
        BackboneConfig(stage_channels=(8, 16))
    with pytest.raises((ConfigError, ValueError)):
        BackboneConfig(input_size=250)


def test_largest_stage_size_shape():
    out = forward(build_model("cascade2", SMALL, seed=0), torch.zeros(1, 3, 768, 768))
    assert out.score.shape == (1, 1, 192, 192) and out.contour.shape == (1, 1, 192, 192)


def test_seeded_forward_is_reproducible():
    x = torch.randn(1, 3, 256, 256, generator=torch.Generator().manual_seed(0))
    a = forward(build_model("cascade1", SMALL, seed=4), x)
    b = forward(build_model("cascade1", SMALL, seed=4), x)
    assert torch.max(torch.abs(a.score - b.score)) <= 1e-6


@pytest.mark.parametrize("variant", VARIANTS)
def test_joint_loss_reaches_every_parameter(variant):
    samples = generate_synthetic(SynthConfig(canvas=256, seed=0), 2)
    images = np.stack([s.image for s in samples])
    targets = collate_targets([build_targets(s) for s in samples])
    net = build_model(variant, SMALL, seed=0)
    net.train()
    total, _ = joint_loss(net(preprocess_images(images)), targets)
    total.backward()
    dead = [n for n, p in net.named_parameters() if p.grad is None or not torch.any(p.grad != 0)]
    assert dead == []


def test_pretrained_encoder_is_loaded(tmp_path):
    donor = build_model("aux2", SMALL, seed=11)
    path = tmp_path / "donor.pt"
    torch.save(donor.state_dict(), path)
    cfg = BackboneConfig(SMALL.stage_channels, SMALL.decoder_channels, 256, pretrained_id=str(path))
    net = build_model("baseline", cfg, seed=0)
    for (name, a), b in zip(net.encoder.state_dict().items(), donor.encoder.state_dict().values()):
        assert torch.equal(a, b), name
    c1 = build_model("cascade1", cfg, seed=0)
    assert torch.equal(c1.contour_encoder.stages[0][0][0].weight, donor.encoder.stages[0][0][0].weight)
    assert c1.encoder.stages[0][0][0].weight.shape[1] == 4
