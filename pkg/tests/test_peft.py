import numpy as np
import pytest

from depthbayes import peft
from depthbayes.errors import DomainError, ShapeError
from depthbayes.model import ModelConfig, build_model
from depthbayes.tensor import ConvSpec, conv2d


def fresh(config=None):
    return build_model(config or ModelConfig())


def random_inputs(rng, cfg, count=10):
    return [rng.uniform(0.0, 1.0, size=(3, cfg.image_height, cfg.image_width)) for _ in range(count)]


def attach(model, method, rank=None, seed=0):
    return peft.build_subspace(model, method, rank, seed=seed, cap_rank=True)


class TestWarmStart:
    @pytest.mark.parametrize("method,rank", [("bitfit", None), ("difffit", None), ("lora", 4), ("colora", 4), ("full", None)])
    def test_fresh_attach_leaves_function_unchanged(self, method, rank, rng):
        base = fresh()
        reference = [base.forward(x) for x in random_inputs(rng, base.config)]
        adapted = fresh()
        attach(adapted, method, rank, seed=9)
        for x, want in zip(random_inputs(np.random.default_rng(12345), adapted.config), reference):
            got = adapted.forward(x)
            assert np.max(np.abs(got - want)) <= 1e-12


class TestLoRA:
    def test_dim_formula_default_model(self):
        model = fresh()
        desc = peft.attach_lora(model, rank=1, seed=0)
        cfg = model.config
        layers = [(cfg.patch_dim, cfg.embed_dim)]
        for _ in range(cfg.blocks):
            layers += [(cfg.embed_dim, cfg.embed_dim)] * 4
            layers += [(cfg.embed_dim, cfg.mlp_hidden), (cfg.mlp_hidden, cfg.embed_dim)]
        assert desc.dim == sum(din + dout for din, dout in layers)
        assert len(model.lora) == len(layers)

    @pytest.mark.parametrize("rank", [2, 4])
    def test_dim_scales_with_rank(self, rank):
        model = fresh()
        base = peft.attach_lora(model, 1, seed=0).dim
        assert peft.attach_lora(model, rank, seed=0).dim == rank * base

    def test_weight_substitution_oracle(self, small_config, rng):
        """Setting down @ up to a known perturbation must equal editing W."""
        adapted = fresh(small_config)
        peft.attach_lora(adapted, rank=2, seed=5)
        edited = fresh(small_config)
        for layer, adapter in adapted.lora.items():
            adapter.down = rng.normal(size=adapter.down.shape)
            adapter.up = rng.normal(size=adapter.up.shape)
            edited.params[f"{layer}.weight"] = edited.params[f"{layer}.weight"] + adapter.down @ adapter.up
        x = rng.uniform(0.0, 1.0, size=(3, 16, 16))
        got = adapted.forward(x)
        want = edited.forward(x)
        assert np.max(np.abs(got - want)) <= 1e-10

    def test_rank_too_large_strict(self):
        with pytest.raises(DomainError, match="rank 64 exceeds"):
            peft.attach_lora(fresh(), rank=64, seed=0)

    def test_rank_capped_per_layer(self):
        model = fresh()
        desc = peft.attach_lora(model, rank=64, seed=0, cap_rank=True)
        expected = 0
        for _, din, dout in model.linear_layers():
            r = min(64, din, dout)
            expected += r * (din + dout)
            assert model.lora is not None
        assert desc.dim == expected
        for layer, din, dout in model.linear_layers():
            assert model.lora[layer].rank == min(64, din, dout)


class TestCoLoRA:
    def test_slot_sizes_for_16_to_8_conv(self):
        model = fresh()  # decoder.conv1 maps 16 -> 8 channels with 3x3 kernels
        peft.attach_colora(model, rank=2, seed=0, cap_rank=True)
        adapter = model.colora["decoder.conv1"]
        assert adapter.core.size + adapter.channel_out.size + adapter.channel_in.size == 84
        assert adapter.core.shape == (2, 2, 3, 3)
        assert adapter.channel_out.shape == (8, 2)
        assert adapter.channel_in.shape == (16, 2)

    def test_dim_formula(self):
        model = fresh()
        desc = peft.attach_colora(model, rank=4, seed=0, cap_rank=True)
        expected = 0
        for layer, cin, cout, (k1, k2), _ in model.conv_layers():
            r = min(4, cin, cout)
            expected += r * r * k1 * k2 + r * cout + r * cin
        assert desc.dim == expected

    def test_strict_rank_rejected_on_output_conv(self):
        with pytest.raises(DomainError, match="decoder.out"):
            peft.attach_colora(fresh(), rank=2, seed=0)

    def test_materialized_kernel_oracle_full_model(self, rng):
        """Adapted forward equals the base model with W + delta substituted."""
        adapted = fresh()
        peft.attach_colora(adapted, rank=3, seed=2, cap_rank=True)
        edited = fresh()
        for layer, adapter in adapted.colora.items():
            adapter.core = rng.normal(size=adapter.core.shape)
            adapter.channel_out = rng.normal(size=adapter.channel_out.shape)
            adapter.channel_in = rng.normal(size=adapter.channel_in.shape)
            delta = peft.materialize_delta(adapter)
            edited.params[f"{layer}.weight"] = edited.params[f"{layer}.weight"] + delta
        x = rng.uniform(0.0, 1.0, size=(3, 32, 32))
        got = adapted.forward(x)
        want = edited.forward(x)
        assert np.max(np.abs(got - want)) / max(1.0, np.max(np.abs(want))) <= 1e-10


def random_adapter(rng, cin, cout, k, rank, stride, padding, zero_out=False):
    return peft.CoLoRAAdapter(
        layer="conv",
        rank=rank,
        core=rng.normal(size=(rank, rank, k, k)),
        channel_out=np.zeros((cout, rank)) if zero_out else rng.normal(size=(cout, rank)),
        channel_in=rng.normal(size=(cin, rank)),
        spec=ConvSpec(stride=(stride, stride), padding=(padding, padding)),
    )


class TestDeltaForward:
    def test_zero_output_factor_gives_zeros(self, rng):
        adapter = random_adapter(rng, cin=4, cout=3, k=3, rank=2, stride=1, padding=1, zero_out=True)
        out = peft.colora_delta_forward(rng.normal(size=(4, 6, 6)), adapter)
        np.testing.assert_array_equal(out, np.zeros_like(out))

    def test_full_rank_matches_materialized(self, rng):
        adapter = random_adapter(rng, cin=4, cout=4, k=3, rank=4, stride=1, padding=1)
        x = rng.normal(size=(4, 7, 7))
        got = peft.colora_delta_forward(x, adapter)
        want = conv2d(x, peft.materialize_delta(adapter), adapter.spec)
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)

    def test_strided_padded_matches_materialized(self, rng):
        adapter = random_adapter(rng, cin=4, cout=4, k=3, rank=2, stride=2, padding=1)
        x = rng.normal(size=(4, 9, 8))
        got = peft.colora_delta_forward(x, adapter)
        want = conv2d(x, peft.materialize_delta(adapter), adapter.spec)
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)

    def test_randomized_configurations(self, rng):
        for _ in range(40):
            cin, cout = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            k = int(rng.choice([1, 3]))
            stride = int(rng.choice([1, 2]))
            padding = int(rng.choice([0, 1]))
            rank = int(rng.integers(1, min(cin, cout) + 1))
            h = int(rng.integers(k + 2, k + 7))
            w = int(rng.integers(k + 2, k + 7))
            adapter = random_adapter(rng, cin, cout, k, rank, stride, padding)
            x = rng.normal(size=(cin, h, w))
            got = peft.colora_delta_forward(x, adapter)
            want = conv2d(x, peft.materialize_delta(adapter), adapter.spec)
            scale = max(1.0, np.max(np.abs(want)))
            assert np.max(np.abs(got - want)) / scale <= 1e-10

    def test_channel_mismatch_raises(self, rng):
        adapter = random_adapter(rng, cin=4, cout=3, k=1, rank=1, stride=1, padding=0)
        with pytest.raises(ShapeError):
            peft.colora_delta_forward(rng.normal(size=(3, 5, 5)), adapter)


class TestBitFitDiffFit:
    def test_bitfit_dim_enumerated(self):
        model = fresh()
        cfg = model.config
        desc = peft.attach_bitfit(model)
        expected = cfg.embed_dim  # patch embed bias
        per_block = 2 * cfg.embed_dim + 4 * cfg.embed_dim + cfg.mlp_hidden + cfg.embed_dim
        expected += cfg.blocks * per_block
        expected += sum(cfg.decoder_channels) + 1
        assert desc.dim == expected
        assert all(s.name.endswith((".bias", ".shift")) for s in desc.slots)

    def test_bitfit_ignores_weight_perturbations(self, rng):
        model = fresh()
        desc = peft.attach_bitfit(model)
        before = peft.flatten(model, desc)
        model.params["blocks.0.attn.q.weight"] = model.params["blocks.0.attn.q.weight"] + 1.0
        np.testing.assert_array_equal(peft.flatten(model, desc), before)

    def test_difffit_extends_bitfit(self):
        model = fresh()
        cfg = model.config
        bitfit = peft.attach_bitfit(model)
        difffit = peft.attach_difffit(model)
        norm_scales = cfg.blocks * 2 * cfg.embed_dim
        assert difffit.dim - bitfit.dim == 2 * cfg.blocks + norm_scales
        bit_names = {s.name for s in bitfit.slots}
        diff_names = {s.name for s in difffit.slots}
        assert bit_names < diff_names

    def test_difffit_gamma_slots_start_at_one(self):
        model = fresh()
        desc = peft.attach_difffit(model)
        vec = peft.flatten(model, desc)
        for slot in desc.slots:
            if "gamma" in slot.name:
                assert vec[slot.offset] == 1.0


class TestFlattenUnflatten:
    @pytest.mark.parametrize("method,rank", [("bitfit", None), ("difffit", None), ("lora", 2), ("colora", 2), ("full", None)])
    def test_round_trip_bit_exact(self, method, rank, rng):
        model = fresh()
        desc = attach(model, method, rank, seed=1)
        vec = rng.normal(size=desc.dim)
        peft.unflatten(model, desc, vec)
        np.testing.assert_array_equal(peft.flatten(model, desc), vec)

    def test_offsets_contiguous_and_complete(self):
        model = fresh()
        for method, rank in (("bitfit", None), ("lora", 3), ("colora", 2), ("full", None)):
            desc = attach(model, method, rank)
            offset = 0
            for slot in desc.slots:
                assert slot.offset == offset
                offset += slot.size
            assert offset == desc.dim

    def test_zero_vector_restores_base_function(self, rng):
        base = fresh()
        model = fresh()
        desc = attach(model, "lora", 4, seed=7)
        peft.unflatten(model, desc, np.zeros(desc.dim))
        x = rng.uniform(0.0, 1.0, size=(3, 32, 32))
        assert np.max(np.abs(model.forward(x) - base.forward(x))) <= 1e-12

    def test_single_coordinate_write_is_localized(self):
        model = fresh()
        desc = attach(model, "difffit", None)
        baseline = {name: value.copy() for name, value in model.params.items()}
        slot = desc.slots[3]
        vec = peft.flatten(model, desc)
        vec[slot.offset] += 1.0
        peft.unflatten(model, desc, vec)
        for name, value in model.params.items():
            changed = np.sum(value != baseline[name])
            assert changed == (1 if name == slot.name else 0)

    def test_length_mismatch_raises(self):
        model = fresh()
        desc = peft.attach_bitfit(model)
        with pytest.raises(ShapeError):
            peft.unflatten(model, desc, np.zeros(desc.dim + 1))


class TestDimOrdering:
    def test_subspace_sizes_nest_as_expected(self):
        model = fresh()
        d_bitfit = peft.attach_bitfit(model).dim
        d_difffit = peft.attach_difffit(model).dim
        d_lora = peft.attach_lora(model, 4, seed=0).dim
        d_full = peft.full_subspace(model).dim
        assert d_bitfit < d_difffit < d_lora < d_full
        assert d_full == model.parameter_count()

    def test_build_subspace_validation(self):
        model = fresh()
        with pytest.raises(DomainError, match="requires a rank"):
            peft.build_subspace(model, "lora")
        with pytest.raises(DomainError, match="does not take a rank"):
            peft.build_subspace(model, "bitfit", rank=2)
        with pytest.raises(DomainError, match="unknown method"):
            peft.build_subspace(model, "adapterless")
