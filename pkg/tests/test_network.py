import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from toolpresence.errors import ConfigurationError, ShapeError, WeightsLoadError
from toolpresence.network import (
    BackboneSpec,
    ConvLayer,
    ModelSpec,
    ToolPresenceNet,
    alexnet_backbone,
    forward,
    init_model,
    layer_groups,
    load_checkpoint,
    load_weights,
    preprocess,
    reduced_backbone,
    save_checkpoint,
    save_weights,
)


def param_arrays(model):
    return {k: v.detach().numpy().copy() for k, v in model.named_parameters()}


def test_same_seed_is_bit_identical(reduced_spec):
    a = param_arrays(init_model(reduced_spec, seed=3))
    b = param_arrays(init_model(reduced_spec, seed=3))
    c = param_arrays(init_model(reduced_spec, seed=4))
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not all(np.array_equal(a[k], c[k]) for k in a)


def test_toolnet_has_no_phase_head(reduced_spec):
    model = init_model(reduced_spec)
    assert model.fc_phase is None
    assert not any(name.startswith("fc_phase") for name, _ in model.named_parameters())


def test_endonet_alexnet_phase_head_shape():
    spec = ModelSpec(variant="EndoNet", phase_count=8)
    assert spec.feature_dim == 4096
    model = ToolPresenceNet(spec)
    assert tuple(model.fc_phase.weight.shape) == (8, 4103)
    assert tuple(model.fc_tool.weight.shape) == (7, 4096)
    assert tuple(model.backbone.fc6.weight.shape) == (4096, 256 * 6 * 6)
    assert tuple(model.backbone.conv2.weight.shape) == (256, 48, 5, 5)


def test_spec_contracts():
    with pytest.raises(ConfigurationError):
        ModelSpec(variant="EndoNet")
    with pytest.raises(ConfigurationError):
        ModelSpec(variant="EndoNet", phase_count=1)
    with pytest.raises(ConfigurationError):
        ModelSpec(variant="ToolNet", phase_count=8)
    with pytest.raises(ConfigurationError):
        ModelSpec(tool_count=6)


def test_spec_dict_round_trip(tiny_endonet_spec):
    assert ModelSpec.from_dict(tiny_endonet_spec.to_dict()) == tiny_endonet_spec
    assert ModelSpec.from_dict(ModelSpec().to_dict()) == ModelSpec()


def test_batch_of_fifty(reduced_spec, rng):
    out = forward(init_model(reduced_spec), rng.normal(size=(50, 3, 32, 32)).astype(np.float32))
    assert tuple(out.tool_logits.shape) == (50, 7)
    assert tuple(out.features.shape) == (50, reduced_spec.feature_dim)
    assert out.phase_logits is None


def test_zero_tool_head_gives_half(reduced_spec, rng):
    model = init_model(reduced_spec)
    with torch.no_grad():
        model.fc_tool.weight.zero_()
        model.fc_tool.bias.zero_()
    out = forward(model, rng.normal(size=(4, 3, 32, 32)))
    assert torch.all(out.tool_confidences == 0.5)


def test_hand_computed_forward():
    # 1x1 single-channel image, one hidden unit: feature = relu(w*x + b)
    spec = ModelSpec(input_shape=(1, 1, 1), backbone=BackboneSpec(fc_dims=(1,)), pixel_mean=(0.0,))
    model = init_model(spec).double()
    w_tool = [0.3, -1.2, 0.0, 2.5, -0.7, 1.1, 0.05]
    b_tool = [0.1, 0.2, -0.3, 0.0, 0.4, -1.0, 0.0]
    with torch.no_grad():
        model.backbone.fc1.weight.fill_(2.0)
        model.backbone.fc1.bias.fill_(-0.5)
        model.fc_tool.weight.copy_(torch.tensor(w_tool, dtype=torch.float64)[:, None])
        model.fc_tool.bias.copy_(torch.tensor(b_tool, dtype=torch.float64))
    out = forward(model, np.array([[[[0.75]]]]))
    feature = max(0.0, 2.0 * 0.75 - 0.5)
    for i in range(7):
        logit = w_tool[i] * feature + b_tool[i]
        assert abs(out.tool_logits[0, i].item() - logit) < 1e-12
        assert abs(out.tool_confidences[0, i].item() - 1 / (1 + math.exp(-logit))) < 1e-12
    # negative pre-activation is clipped
    out = forward(model, np.array([[[[0.1]]]]))
    assert np.allclose(out.tool_logits[0].detach().numpy(), b_tool, atol=1e-12)


def test_forward_shape_error(reduced_spec):
    with pytest.raises(ShapeError, match=r"\(N, 3, 32, 32\).*\(2, 3, 16, 16\)"):
        forward(init_model(reduced_spec), np.zeros((2, 3, 16, 16), np.float32))


def test_layer_groups(reduced_spec, tiny_endonet_spec):
    for spec, heads in ((reduced_spec, {"fc_tool"}), (tiny_endonet_spec, {"fc_tool", "fc_phase"})):
        model = init_model(spec)
        groups = layer_groups(model)
        names = {n for n, _ in model.named_parameters()}
        assert {n.split(".")[0] for n in groups["new_heads"]} == heads
        assert set(groups["backbone"]) | set(groups["new_heads"]) == names
        assert not set(groups["backbone"]) & set(groups["new_heads"])


def test_head_init(reduced_spec):
    model = init_model(ModelSpec(variant="EndoNet", phase_count=8, input_shape=(3, 32, 32),
                                 backbone=reduced_backbone(feature_dim=512)), seed=0)
    for head in (model.fc_tool, model.fc_phase):
        assert torch.all(head.bias == 0)
    w = torch.cat([model.fc_tool.weight.flatten(), model.fc_phase.weight.flatten()])
    assert abs(w.mean().item()) < 1e-3
    assert 0.009 < w.std().item() < 0.011


@st.composite
def random_specs(draw):
    n_conv = draw(st.integers(0, 2))
    convs = tuple(
        ConvLayer(draw(st.integers(1, 6)), draw(st.sampled_from([1, 3])), padding=1, pool=draw(st.booleans()))
        for _ in range(n_conv)
    )
    fc = tuple(draw(st.lists(st.integers(1, 12), max_size=2)))
    pool = draw(st.sampled_from([None, "max", "avg"]))
    variant = draw(st.sampled_from(["ToolNet", "EndoNet"]))
    size = draw(st.integers(8, 12))
    return ModelSpec(
        variant=variant,
        phase_count=draw(st.integers(2, 9)) if variant == "EndoNet" else None,
        input_shape=(3, size, size),
        backbone=BackboneSpec(convs=convs, fc_dims=fc, global_pool=pool),
    )


def expected_shapes(spec):
    shapes = {}
    c, h, w = spec.input_shape
    for i, layer in enumerate(spec.backbone.convs, start=1):
        shapes[f"backbone.conv{i}.weight"] = (layer.out_channels, c // layer.groups, layer.kernel, layer.kernel)
        shapes[f"backbone.conv{i}.bias"] = (layer.out_channels,)
        h = h + 2 * layer.padding - layer.kernel + 1
        w = w + 2 * layer.padding - layer.kernel + 1
        if layer.pool:
            h, w = (h - 3) // 2 + 1, (w - 3) // 2 + 1
        c = layer.out_channels
    width = c if spec.backbone.global_pool else c * h * w
    for j, dim in enumerate(spec.backbone.fc_dims, start=len(spec.backbone.convs) + 1):
        shapes[f"backbone.fc{j}.weight"] = (dim, width)
        shapes[f"backbone.fc{j}.bias"] = (dim,)
        width = dim
    shapes["fc_tool.weight"] = (7, width)
    shapes["fc_tool.bias"] = (7,)
    if spec.variant == "EndoNet":
        shapes["fc_phase.weight"] = (spec.phase_count, width + 7)
        shapes["fc_phase.bias"] = (spec.phase_count,)
    return shapes


@given(random_specs(), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_shape_audit_and_finite_forward(spec, seed):
    model = init_model(spec, seed=seed)
    assert {n: tuple(p.shape) for n, p in model.named_parameters()} == expected_shapes(spec)
    x = np.random.default_rng(seed).normal(size=(3,) + spec.input_shape)
    out = forward(model, x.astype(np.float32))
    assert torch.isfinite(out.tool_logits).all()
    if out.phase_logits is not None:
        assert torch.isfinite(out.phase_logits).all()


@given(st.lists(st.floats(-30, 30), min_size=7, max_size=7))
def test_confidences_strictly_inside_unit_interval(logits):
    spec = ModelSpec(input_shape=(1, 1, 1), backbone=BackboneSpec(), pixel_mean=(0.0,))
    model = init_model(spec).double()
    with torch.no_grad():
        model.fc_tool.weight.zero_()
        model.fc_tool.bias.copy_(torch.tensor(logits, dtype=torch.float64))
    conf = forward(model, np.zeros((1, 1, 1, 1))).tool_confidences
    assert torch.all((conf > 0) & (conf < 1))


@pytest.mark.parametrize("phase_input", ["confidences", "logits"])
def test_phase_head_perturbation_leaves_tools_unchanged(tiny_endonet_spec, rng, phase_input):
    from dataclasses import replace

    spec = replace(tiny_endonet_spec, phase_input=phase_input)
    model = init_model(spec, seed=2)
    x = rng.normal(size=(5, 3, 6, 6)).astype(np.float32)
    before = forward(model, x)
    with torch.no_grad():
        model.fc_phase.weight.add_(torch.from_numpy(rng.normal(size=model.fc_phase.weight.shape)).float())
        model.fc_phase.bias.add_(1.0)
    after = forward(model, x)
    assert torch.equal(before.tool_logits, after.tool_logits)
    assert not torch.equal(before.phase_logits, after.phase_logits)


def test_phase_head_consumes_features_and_confidences(tiny_endonet_spec, rng):
    model = init_model(tiny_endonet_spec, seed=1).double()
    out = forward(model, rng.normal(size=(2, 3, 6, 6)))
    cat = torch.cat([out.features, out.tool_confidences], dim=1)
    expected = cat @ model.fc_phase.weight.T + model.fc_phase.bias
    assert torch.allclose(out.phase_logits, expected, atol=1e-12)


def test_preprocess(reduced_spec):
    img = np.full((2, 32, 32, 3), 255, np.uint8)
    x = preprocess(img, reduced_spec)
    assert tuple(x.shape) == (2, 3, 32, 32)
    assert torch.allclose(x, torch.full_like(x, 0.5))


def test_weights_file_round_trip(tmp_path, rng):
    tensors = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b.bias": np.arange(5, dtype=np.float32)}
    save_weights(tmp_path / "w.tpw", tensors, {"note": "x"})
    loaded, meta = load_weights(tmp_path / "w.tpw")
    assert meta == {"note": "x"}
    assert all(np.array_equal(loaded[k], tensors[k]) for k in tensors)
    raw = (tmp_path / "w.tpw").read_bytes()
    # buffers are little-endian float32 appended after the header line
    assert raw.endswith(tensors["a"].astype("<f4").tobytes() + tensors["b.bias"].astype("<f4").tobytes())


def test_checkpoint_round_trip(tmp_path, tiny_endonet_spec):
    model = init_model(tiny_endonet_spec, seed=9)
    save_checkpoint(tmp_path / "m.tpw", model)
    again = load_checkpoint(tmp_path / "m.tpw")
    assert again.spec == tiny_endonet_spec
    a, b = param_arrays(model), param_arrays(again)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_pretrained_backbone_loaded_heads_random(tmp_path, reduced_spec):
    donor = init_model(reduced_spec, seed=1)
    save_weights(tmp_path / "bb.tpw", dict(donor.backbone.named_parameters()))
    model = init_model(reduced_spec, pretrained_backbone=tmp_path / "bb.tpw", seed=2)
    fresh = init_model(reduced_spec, seed=2)
    for name, p in donor.backbone.named_parameters():
        assert torch.equal(p, dict(model.backbone.named_parameters())[name])
    assert torch.equal(model.fc_tool.weight, fresh.fc_tool.weight)
    # a full checkpoint also works as a backbone source
    save_checkpoint(tmp_path / "full.tpw", donor)
    model2 = init_model(ModelSpec(variant="EndoNet", phase_count=4, input_shape=(3, 32, 32),
                                  backbone=reduced_backbone()), tmp_path / "full.tpw")
    assert torch.equal(model2.backbone.conv1.weight, donor.backbone.conv1.weight)


def test_pretrained_shape_mismatch_lists_layers(tmp_path, reduced_spec):
    donor = init_model(ModelSpec(input_shape=(3, 32, 32), backbone=reduced_backbone(width=8)))
    save_weights(tmp_path / "bb.tpw", dict(donor.backbone.named_parameters()))
    with pytest.raises(WeightsLoadError) as info:
        init_model(reduced_spec, tmp_path / "bb.tpw")
    names = " ".join(info.value.mismatched)
    assert "conv1.weight" in names and "conv2.weight" in names
    assert "fc4.weight" not in names


def test_alexnet_default_backbone():
    spec = ModelSpec()
    assert spec.input_shape == (3, 227, 227)
    assert len(spec.backbone.convs) == 5 and spec.backbone.fc_dims == (4096, 4096)
    assert alexnet_backbone() == spec.backbone
