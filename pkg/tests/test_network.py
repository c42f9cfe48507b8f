"""Network tests: counts against published targets, per-layer finite
difference gradient checks, shape contracts, and checkpoint round trips."""

import math

import numpy as np
import pytest
import torch
from torch import nn

from pitomo.errors import (
    FormatError,
    InvalidSpec,
    MissingPI,
    ShapeMismatch,
    SpatialUnderflow,
    SpecMismatch,
)
from pitomo.network import (
    CHECKPOINT_MAGIC,
    FusionProbe,
    InputRepr,
    ModelSpec,
    ResidualBlock,
    SideChain,
    SurrogateNet,
    broadcast_measurements,
    build_model,
    count_parameters,
    describe_params,
    fuse,
    fusion_gradient_probe,
    init_weights,
    load_checkpoint,
    param_table,
    save_checkpoint,
)


def spec_of(backbone, use_pi, n=3, numz=8, numr=9, act="relu"):
    return ModelSpec(
        backbone=backbone, use_pi=use_pi, final_activation=act, n=n, numz=numz, numr=numr
    )


TINY = spec_of("vgg", False)


# Published totals for the four variants at both instrument scales.
COUNT_TARGETS = [
    ("vgg", False, 40, 32, 36, 7_620_672),
    ("vgg", True, 40, 32, 36, 9_438_432),
    ("res", False, 40, 32, 36, 13_071_792),
    ("res", True, 40, 32, 36, 10_834_512),
    ("vgg", False, 92, 75, 50, 54_620_796),
    ("vgg", True, 92, 75, 50, 64_226_700),
    ("res", False, 92, 75, 50, 230_353_860),
    ("res", True, 92, 75, 50, 71_599_764),
]


class TestModelSpec:
    def test_rejects_unknown_backbone(self):
        with pytest.raises(InvalidSpec):
            spec_of("dense", False)

    def test_rejects_unknown_activation(self):
        with pytest.raises(InvalidSpec):
            spec_of("vgg", False, act="tanh")

    def test_rejects_nonpositive_dims(self):
        with pytest.raises(InvalidSpec):
            spec_of("vgg", False, n=0)
        with pytest.raises(InvalidSpec):
            spec_of("vgg", False, numz=-4)

    def test_variant_names(self):
        assert spec_of("vgg", False).variant_name == "VggOnion"
        assert spec_of("vgg", True).variant_name == "VggOnion_PI"
        assert spec_of("res", False).variant_name == "ResOnion"
        assert spec_of("res", True).variant_name == "ResOnion_PI"

    def test_dict_round_trip(self):
        spec = spec_of("res", True, n=5, numz=12, numr=10, act="softplus")
        assert ModelSpec.from_dict(spec.to_dict()) == spec

    def test_from_dict_missing_key(self):
        d = TINY.to_dict()
        del d["numr"]
        with pytest.raises(InvalidSpec):
            ModelSpec.from_dict(d)

    def test_spec_hash_tracks_content(self):
        a = spec_of("vgg", False)
        b = spec_of("vgg", False)
        c = spec_of("vgg", True)
        assert a.spec_hash() == b.spec_hash()
        assert a.spec_hash() != c.spec_hash()

    def test_flat_features_pooled_variants(self):
        # adaptive 3x3 output regardless of grid size
        assert spec_of("vgg", False, n=40, numz=32, numr=36).flat_features() == 320 * 9
        assert spec_of("res", True, n=40, numz=32, numr=36).flat_features() == 320 * 9

    def test_flat_features_plain_res_follows_strides(self):
        # 16 -> 8 -> 4 -> 2 and 18 -> 9 -> 5 -> 3 under ceil-halving
        assert spec_of("res", False, n=20, numz=16, numr=18).flat_features() == 160 * 2 * 3
        # odd dims round up at each stage: 75 -> 38 -> 19 -> 10, 50 -> 25 -> 13 -> 7
        assert spec_of("res", False, n=92, numz=75, numr=50).flat_features() == 736 * 10 * 7


class TestParameterCounts:
    @pytest.mark.parametrize("backbone,use_pi,n,numz,numr,target", COUNT_TARGETS)
    def test_closed_form_hits_target(self, backbone, use_pi, n, numz, numr, target):
        spec = spec_of(backbone, use_pi, n=n, numz=numz, numr=numr)
        assert spec.param_count() == target

    @pytest.mark.parametrize("backbone,use_pi,n,numz,numr,target", COUNT_TARGETS[:4])
    def test_built_model_matches_target(self, backbone, use_pi, n, numz, numr, target):
        model = SurrogateNet(spec_of(backbone, use_pi, n=n, numz=numz, numr=numr))
        assert count_parameters(model) == target

    @pytest.mark.parametrize("backbone,use_pi,n,numz,numr,target", COUNT_TARGETS[4:])
    def test_large_scale_counted_without_allocation(self, backbone, use_pi, n, numz, numr, target):
        with torch.device("meta"):
            model = SurrogateNet(spec_of(backbone, use_pi, n=n, numz=numz, numr=numr))
        assert count_parameters(model) == target

    def test_closed_form_matches_built_for_odd_sizes(self):
        for spec in (
            spec_of("vgg", True, n=2, numz=5, numr=7),
            spec_of("res", False, n=3, numz=7, numr=4),
            spec_of("res", True, n=2, numz=6, numr=6),
        ):
            assert count_parameters(SurrogateNet(spec)) == spec.param_count()

    def test_param_table_sums_to_total(self):
        model = SurrogateNet(TINY)
        rows = param_table(model)
        assert sum(count for _, _, count in rows) == count_parameters(model)
        assert len({name for name, _, _ in rows}) == len(rows)

    def test_describe_params_reports_total(self):
        text = describe_params(SurrogateNet(TINY))
        assert f"{count_parameters(SurrogateNet(TINY)):,}" in text


class TestBroadcast:
    def test_single_sample_planes(self):
        x = torch.tensor([1.0, -2.0, 3.0])
        planes = broadcast_measurements(x, 4, 5)
        assert planes.shape == (3, 4, 5)
        for i in range(3):
            assert torch.all(planes[i] == x[i])

    def test_batched_planes(self):
        x = torch.arange(12.0).reshape(4, 3)
        planes = broadcast_measurements(x, 2, 6)
        assert planes.shape == (4, 3, 2, 6)
        assert torch.all(planes[2, 1] == x[2, 1])

    def test_rejects_3d(self):
        with pytest.raises(ShapeMismatch):
            broadcast_measurements(torch.zeros(2, 3, 4), 4, 4)


class TestInputRepr:
    def test_identity_init_reproduces_broadcast(self):
        repr_module = InputRepr(3, 5, 6)
        repr_module.identity_init()
        x = torch.randn(4, 3)
        out = repr_module(x)
        assert torch.equal(out, broadcast_measurements(x, 5, 6))

    def test_not_part_of_model_budget(self):
        # the shipped variants broadcast directly; no input conv parameters
        names = [name for name, _, _ in param_table(SurrogateNet(TINY))]
        assert all(name.startswith(("backbone.", "fc", "bn_fc")) for name in names)

    def test_wrong_width_rejected(self):
        with pytest.raises(ShapeMismatch):
            InputRepr(3, 5, 6)(torch.zeros(4, 7))


class TestShapes:
    def cmatrix_tensor(self, spec, seed=0):
        gen = torch.Generator().manual_seed(seed)
        return torch.rand((spec.n, spec.numz, spec.numr), generator=gen)

    @pytest.mark.parametrize("backbone,use_pi", [("vgg", False), ("vgg", True),
                                                 ("res", False), ("res", True)])
    def test_forward_output_shape(self, backbone, use_pi):
        spec = spec_of(backbone, use_pi)
        model = build_model(spec, seed=1).eval()
        cm = self.cmatrix_tensor(spec) if use_pi else None
        out = model(torch.randn(5, spec.n), cm)
        assert out.shape == (5, spec.out_size)

    def test_single_sample_promoted_to_batch(self):
        model = build_model(TINY, seed=1).eval()
        out = model(torch.randn(TINY.n))
        assert out.shape == (1, TINY.out_size)

    def test_vgg_feature_block(self):
        spec = spec_of("vgg", False, n=4, numz=12, numr=16)
        model = build_model(spec, seed=0).eval()
        assert model.features(torch.randn(2, 4)).shape == (2, 32, 3, 3)

    def test_plain_res_keeps_strided_map(self):
        spec = spec_of("res", False, n=4, numz=16, numr=18)
        model = build_model(spec, seed=0).eval()
        assert model.features(torch.randn(2, 4)).shape == (2, 32, 2, 3)

    def test_side_chain_output_block(self):
        spec = spec_of("res", True, n=4, numz=16, numr=18)
        model = build_model(spec, seed=0).eval()
        pi = model.side_chain(self.cmatrix_tensor(spec)[None])
        assert pi.shape == (1, 32, 3, 3)
        fused = model.features(torch.randn(2, 4), self.cmatrix_tensor(spec))
        assert fused.shape == (2, 32, 3, 3)

    def test_standalone_side_chain_shape(self):
        out = SideChain(3)(torch.randn(1, 3, 9, 11))
        assert out.shape == (1, 24, 3, 3)

    def test_pi_required(self):
        spec = spec_of("vgg", True)
        model = build_model(spec, seed=0).eval()
        with pytest.raises(MissingPI):
            model(torch.randn(2, spec.n))

    def test_pi_shape_checked(self):
        spec = spec_of("vgg", True)
        model = build_model(spec, seed=0).eval()
        with pytest.raises(ShapeMismatch):
            model(torch.randn(2, spec.n), torch.rand(spec.n, spec.numz + 1, spec.numr))

    def test_measurement_width_checked(self):
        model = build_model(TINY, seed=0).eval()
        with pytest.raises(ShapeMismatch):
            model(torch.randn(2, TINY.n + 1))

    def test_small_grids_rejected_when_pooling(self):
        for spec in (
            spec_of("vgg", False, numz=3, numr=8),
            spec_of("vgg", True, numz=8, numr=3),
            spec_of("res", True, numz=3, numr=3),
        ):
            with pytest.raises(SpatialUnderflow):
                SurrogateNet(spec)

    def test_plain_res_accepts_small_grid(self):
        spec = spec_of("res", False, numz=3, numr=8)
        model = build_model(spec, seed=0).eval()
        assert model(torch.randn(2, spec.n)).shape == (2, 24)


class TestActivations:
    def test_softplus_output_strictly_positive(self):
        spec = spec_of("vgg", False, act="softplus")
        model = build_model(spec, seed=3).eval()
        gen = torch.Generator().manual_seed(11)
        with torch.no_grad():
            for _ in range(10):
                out = model(torch.randn(10, spec.n, generator=gen))
                assert float(out.min()) > 0.0

    def test_relu_output_nonnegative(self):
        model = build_model(TINY, seed=3).eval()
        gen = torch.Generator().manual_seed(11)
        with torch.no_grad():
            out = model(torch.randn(100, TINY.n, generator=gen))
        assert float(out.min()) >= 0.0

    def test_zeroed_weights_give_constant_softplus_of_zero(self):
        spec = spec_of("vgg", False, act="softplus")
        model = build_model(spec, seed=0).eval()
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        out = model(torch.randn(4, spec.n))
        assert torch.allclose(out, torch.full_like(out, math.log(2.0)), atol=1e-6, rtol=0)


class TestDeterminism:
    def test_same_seed_same_weights(self):
        a = build_model(TINY, seed=42)
        b = build_model(TINY, seed=42)
        for (name, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert torch.equal(pa, pb), name

    def test_different_seed_different_weights(self):
        a = build_model(TINY, seed=42)
        b = build_model(TINY, seed=43)
        assert any(
            not torch.equal(pa, pb)
            for pa, pb in zip(a.parameters(), b.parameters())
        )

    def test_biases_zero_after_init(self):
        model = build_model(spec_of("res", True), seed=9)
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)) and module.bias is not None:
                assert torch.all(module.bias == 0)

    def test_conv_weight_scale_tracks_fan_in(self):
        model = build_model(spec_of("vgg", False, n=16, numz=8, numr=8), seed=5)
        conv = model.backbone.stack[0][0]
        fan_in = 16 * 9
        std = float(conv.weight.detach().std())
        assert abs(std - math.sqrt(2.0 / fan_in)) < 0.2 * math.sqrt(2.0 / fan_in)

    def test_forward_is_pure_in_eval_mode(self):
        model = build_model(TINY, seed=1).eval()
        x = torch.randn(3, TINY.n)
        assert torch.equal(model(x), model(x))


class TestFuse:
    def test_elementwise_product(self):
        a = torch.arange(12.0).reshape(1, 3, 2, 2)
        b = torch.full((1, 3, 2, 2), 2.0)
        assert torch.equal(fuse(a, b), a * 2.0)

    def test_zero_factor_annihilates(self):
        a = torch.randn(2, 3, 4, 4)
        assert torch.all(fuse(a, torch.zeros(1, 3, 4, 4)) == 0)

    def test_power_of_two_scaling_exact(self):
        gen = torch.Generator().manual_seed(2)
        a = torch.randn(2, 3, 4, 4, generator=gen)
        b = torch.randn(1, 3, 4, 4, generator=gen)
        assert torch.equal(fuse(4.0 * a, b), 4.0 * fuse(a, b))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeMismatch):
            fuse(torch.zeros(2, 3, 4, 4), torch.zeros(1, 3, 4, 5))


class TestFusionProbe:
    def test_multiplicative_example(self):
        probe = fusion_gradient_probe("multiply", [2.0], [3.0])
        assert probe.output == 6.0
        assert probe.grad_w.tolist() == [6.0]

    def test_additive_example(self):
        probe = fusion_gradient_probe("add", [2.0], [3.0])
        assert probe.output == 5.0
        assert probe.grad_w.tolist() == [5.0]

    def test_concat_splits_gradients(self):
        probe = fusion_gradient_probe("concat", [2.0, 1.0], [3.0, -1.0])
        assert probe.grad_w.tolist() == [2.0, 1.0]
        assert probe.grad_w_static.tolist() == [3.0, -1.0]

    def test_only_multiply_carries_static_factor(self):
        x = np.array([0.5, -1.5, 2.0])
        x_static = np.array([4.0, 0.25, -3.0])
        mult = fusion_gradient_probe("multiply", x, x_static)
        add = fusion_gradient_probe("add", x, x_static)
        assert np.array_equal(mult.grad_w, x * x_static)
        assert np.array_equal(add.grad_w, x + x_static)

    @pytest.mark.parametrize("mode", ["add", "concat", "multiply"])
    def test_gradient_matches_finite_differences(self, mode):
        rng = np.random.default_rng(7)
        x = rng.standard_normal(6)
        x_static = rng.standard_normal(6)
        w = rng.standard_normal(6)
        w_static = rng.standard_normal(6)
        bias = 0.37

        def output(wv, wsv):
            return fusion_gradient_probe(mode, x, x_static, wv, wsv, bias).output

        probe = fusion_gradient_probe(mode, x, x_static, w, w_static, bias)
        h = 1e-6
        for i in range(6):
            dw = np.zeros(6)
            dw[i] = h
            fd = (output(w + dw, w_static) - output(w - dw, w_static)) / (2 * h)
            assert abs(fd - probe.grad_w[i]) <= 1e-6 * max(1.0, abs(fd))
            if mode == "concat":
                fd_s = (output(w, w_static + dw) - output(w, w_static - dw)) / (2 * h)
                assert abs(fd_s - probe.grad_w_static[i]) <= 1e-6 * max(1.0, abs(fd_s))

    def test_unknown_mode_rejected(self):
        with pytest.raises(InvalidSpec):
            fusion_gradient_probe("average", [1.0], [1.0])


def check_grads(make_scalar, params, rtol=1e-4, h=1e-5, coords_per=5, seed=0):
    """Central-difference audit of autograd for a scalar-valued closure.

    ``params`` are float64 leaves read by the closure; a handful of
    coordinates per tensor are perturbed in place.
    """
    out = make_scalar()
    grads = torch.autograd.grad(out, params)
    rng = np.random.default_rng(seed)
    for p, g in zip(params, grads):
        data = p.data.reshape(-1)
        k = min(coords_per, data.numel())
        for c in rng.choice(data.numel(), size=k, replace=False):
            orig = float(data[c])
            data[c] = orig + h
            with torch.no_grad():
                up = float(make_scalar())
            data[c] = orig - h
            with torch.no_grad():
                down = float(make_scalar())
            data[c] = orig
            fd = (up - down) / (2 * h)
            ag = float(g.reshape(-1)[c])
            assert abs(fd - ag) <= rtol * max(1.0, abs(fd), abs(ag)), (fd, ag)


def spread_values(*shape, seed=0, gen_offset=0.0):
    """Distinct, well-separated float64 values; safe around max-pool ties
    and ReLU kinks for perturbations much smaller than the spacing."""
    numel = int(np.prod(shape))
    values = np.linspace(-1.0, 1.0, numel + 2)[1:-1]
    rng = np.random.default_rng(seed)
    rng.shuffle(values)
    return torch.tensor(values.reshape(shape) + gen_offset, dtype=torch.float64)


class TestLayerGradients:
    """Finite-difference audits for every layer type the variants use."""

    def projection(self, shape, seed):
        gen = torch.Generator().manual_seed(seed)
        return torch.randn(shape, generator=gen, dtype=torch.float64)

    def test_conv2d(self):
        layer = nn.Conv2d(2, 3, 3, padding=1).double()
        x = spread_values(2, 2, 5, 6, seed=1).requires_grad_(True)
        proj = self.projection((2, 3, 5, 6), 10)
        check_grads(lambda: (layer(x) * proj).sum(), [x, layer.weight, layer.bias])

    def test_linear(self):
        layer = nn.Linear(7, 4).double()
        x = spread_values(3, 7, seed=2).requires_grad_(True)
        proj = self.projection((3, 4), 11)
        check_grads(lambda: (layer(x) * proj).sum(), [x, layer.weight, layer.bias])

    def test_batchnorm2d_training_mode(self):
        layer = nn.BatchNorm2d(3).double().train()
        x = spread_values(4, 3, 4, 4, seed=3).requires_grad_(True)
        proj = self.projection((4, 3, 4, 4), 12)
        check_grads(lambda: (layer(x) * proj).sum(), [x, layer.weight, layer.bias])

    def test_batchnorm1d_training_mode(self):
        layer = nn.BatchNorm1d(6).double().train()
        x = spread_values(5, 6, seed=4).requires_grad_(True)
        proj = self.projection((5, 6), 13)
        check_grads(lambda: (layer(x) * proj).sum(), [x, layer.weight, layer.bias])

    def test_maxpool(self):
        x = spread_values(1, 2, 6, 6, seed=5).requires_grad_(True)
        proj = self.projection((1, 2, 3, 3), 14)
        check_grads(lambda: (nn.functional.max_pool2d(x, 2) * proj).sum(), [x])

    def test_adaptive_maxpool(self):
        x = spread_values(1, 2, 7, 5, seed=6).requires_grad_(True)
        proj = self.projection((1, 2, 3, 3), 15)
        check_grads(
            lambda: (nn.functional.adaptive_max_pool2d(x, (3, 3)) * proj).sum(), [x]
        )

    def test_relu_away_from_kink(self):
        x = spread_values(4, 9, seed=7).requires_grad_(True)
        proj = self.projection((4, 9), 16)
        check_grads(lambda: (torch.relu(x) * proj).sum(), [x])

    def test_softplus(self):
        x = spread_values(4, 9, seed=8).requires_grad_(True)
        proj = self.projection((4, 9), 17)
        check_grads(lambda: (nn.functional.softplus(x) * proj).sum(), [x])

    def test_residual_block_with_projection_shortcut(self):
        block = ResidualBlock(2, 4, stride=2).double().train()
        x = spread_values(3, 2, 6, 6, seed=9).requires_grad_(True)
        proj = self.projection((3, 4, 3, 3), 18)
        params = [x, block.conv1.weight, block.conv2.bias, block.shortcut[0].weight]
        check_grads(lambda: (block(x) * proj).sum(), params)

    def test_fuse_both_factors(self):
        a = spread_values(2, 3, 4, 4, seed=10).requires_grad_(True)
        b = spread_values(1, 3, 4, 4, seed=11, gen_offset=0.1).requires_grad_(True)
        proj = self.projection((2, 3, 4, 4), 19)
        check_grads(lambda: (fuse(a, b) * proj).sum(), [a, b])

    def test_full_tiny_model_end_to_end(self):
        # side-chain batch norm sees one cmatrix; the grid must keep at
        # least two pooled values per channel in training mode
        spec = spec_of("vgg", True, n=2, numz=8, numr=8, act="softplus")
        model = build_model(spec, seed=21).double().train()
        # the fusion gate starts at gamma 0 (unit mask); move it off zero so
        # gradient flows through the whole side chain for this audit
        with torch.no_grad():
            model.side_chain.stack[-2][1].weight.fill_(0.7)
        gen = torch.Generator().manual_seed(22)
        x = torch.randn(3, 2, generator=gen, dtype=torch.float64)
        cm = torch.rand((2, 8, 8), generator=gen, dtype=torch.float64)
        proj = self.projection((3, 64), 20)
        params = [model.fc1.weight, model.fc2.bias, model.backbone.stack[0][0].weight,
                  model.side_chain.stack[0][0].weight, model.bn_fc.weight]
        check_grads(lambda: (model(x, cm) * proj).sum(), params, coords_per=4)


class TestCheckpoint:
    def populated_model(self, spec=None, seed=5):
        """Model with non-trivial batch norm statistics and counters."""
        spec = spec or spec_of("vgg", True, n=2, numz=8, numr=9)
        model = build_model(spec, seed=seed).train()
        gen = torch.Generator().manual_seed(seed + 100)
        cm = torch.rand((spec.n, spec.numz, spec.numr), generator=gen) if spec.use_pi else None
        for _ in range(3):
            model(torch.randn(4, spec.n, generator=gen), cm)
        return model.eval(), cm

    def test_round_trip_bit_identical(self, tmp_path):
        model, cm = self.populated_model()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.spec == model.spec
        original = model.state_dict()
        restored = loaded.state_dict()
        assert set(original) == set(restored)
        for name in original:
            a, b = original[name], restored[name]
            assert a.dtype == b.dtype, name
            assert torch.equal(a, b), name

    def test_round_trip_preserves_predictions(self, tmp_path):
        model, cm = self.populated_model()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(model, path)
        loaded = load_checkpoint(path).eval()
        x = torch.randn(6, model.spec.n, generator=torch.Generator().manual_seed(0))
        assert torch.equal(model(x, cm), loaded(x, cm))

    def test_save_load_save_is_byte_stable(self, tmp_path):
        model, _ = self.populated_model()
        first = tmp_path / "a.ckpt"
        second = tmp_path / "b.ckpt"
        save_checkpoint(model, str(first))
        save_checkpoint(load_checkpoint(str(first)), str(second))
        assert first.read_bytes() == second.read_bytes()

    def test_step_counter_survives(self, tmp_path):
        model, _ = self.populated_model()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        counter = loaded.state_dict()["bn_fc.num_batches_tracked"]
        assert counter.dtype == torch.int64
        assert int(counter) == 3

    def test_plain_res_round_trip(self, tmp_path):
        model, _ = self.populated_model(spec_of("res", False, n=2, numz=6, numr=5))
        path = str(tmp_path / "res.ckpt")
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        for name, tensor in model.state_dict().items():
            assert torch.equal(tensor, loaded.state_dict()[name]), name

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTAMODEL" + b"\x00" * 64)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(str(path))

    def test_truncated_blob_rejected(self, tmp_path):
        model, _ = self.populated_model()
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, str(path))
        raw = path.read_bytes()
        path.write_bytes(raw[:-40])
        with pytest.raises(FormatError):
            load_checkpoint(str(path))

    def test_tampered_spec_rejected(self, tmp_path):
        model, _ = self.populated_model()
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, str(path))
        raw = bytearray(path.read_bytes())
        start = len(CHECKPOINT_MAGIC) + 4
        head_len = int(np.frombuffer(raw, "<u4", 1, len(CHECKPOINT_MAGIC))[0])
        header = raw[start : start + head_len].replace(b'"numz": 8', b'"numz": 7')
        assert len(header) == head_len
        raw[start : start + head_len] = header
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="hash"):
            load_checkpoint(str(path))

    def test_spec_mismatch_on_load(self, tmp_path):
        model, _ = self.populated_model()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(model, path)
        other = spec_of("vgg", True, n=2, numz=8, numr=10)
        with pytest.raises(SpecMismatch):
            load_checkpoint(path, expected_spec=other)

    def test_expected_spec_accepts_match(self, tmp_path):
        model, _ = self.populated_model()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(model, path)
        assert load_checkpoint(path, expected_spec=model.spec).spec == model.spec

    def test_counter_overflow_guarded(self, tmp_path):
        model, _ = self.populated_model()
        with torch.no_grad():
            model.bn_fc.num_batches_tracked.fill_(2**24)
        with pytest.raises(FormatError, match="float32"):
            save_checkpoint(model, str(tmp_path / "model.ckpt"))
