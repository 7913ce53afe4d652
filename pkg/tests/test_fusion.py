import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vidfuse import (
    AttentionStore,
    AttnKey,
    FusionConfig,
    align_prompts,
    compute_blend_mask,
    cross_fuse,
    self_blend,
)
from vidfuse.errors import ConfigError, ContractError, ShapeError, StoreLookupError
from vidfuse.fusion import MaskVolume, controller_step
from vidfuse.unet import AttentionTensor

from reference import ref_blend_mask, ref_cross_fuse, ref_self_blend


def softmax_map(shape, seed=0, kind="cross", block="down4", resolution=None):
    g = torch.Generator().manual_seed(seed)
    values = torch.softmax(torch.randn(shape, generator=g), dim=-1)
    res = resolution or int(round(shape[2] ** 0.5))
    return AttentionTensor(values, kind, block, res)


class TestFusionConfig:
    def test_style_preset(self):
        cfg = FusionConfig.from_preset("style_attribute")
        assert (cfg.t_s, cfg.t_c, cfg.tau) == (0.2, 0.3, 1.0)

    def test_shape_preset(self):
        cfg = FusionConfig.from_preset("shape")
        assert (cfg.t_s, cfg.t_c, cfg.tau) == (0.5, 0.5, 0.3)

    def test_preset_overridable(self):
        cfg = FusionConfig.from_preset("shape", tau=0.7, total_steps=10)
        assert cfg.tau == 0.7 and cfg.t_s == 0.5 and cfg.total_steps == 10

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="preset"):
            FusionConfig.from_preset("vivid")

    def test_gates_are_strict(self):
        cfg = FusionConfig(t_s=0.2, t_c=0.3, total_steps=50)
        assert not cfg.self_active(10)  # 10/50 == 0.2 exactly
        assert cfg.self_active(11)
        assert not cfg.cross_active(15)
        assert cfg.cross_active(16)

    def test_field_validation(self):
        with pytest.raises(ConfigError, match="t_s"):
            FusionConfig(t_s=1.5)
        with pytest.raises(ConfigError, match="s_cfg"):
            FusionConfig(s_cfg=0.5)


class TestBlendMask:
    def test_hand_example(self):
        # one frame, 2x2 map for the edited word: [[0.10, 0.20], [0.90, 0.60]]
        word = torch.tensor([0.10, 0.20, 0.90, 0.60])
        values = torch.zeros(1, 1, 4, 2)
        values[0, 0, :, 0] = word
        values[0, 0, :, 1] = 1.0 - word
        c_src = AttentionTensor(values, "cross", "down2", 2)
        plan = align_prompts("red", "blue", positional=True)
        assert plan.src_edited == {0}
        mask = compute_blend_mask(c_src, plan, tau=0.3, resolution=2)
        # normalized: 0.111, 0.222, 1.0, 0.667 -> threshold 0.3
        assert mask.values.tolist() == [[[0.0, 0.0], [1.0, 1.0]]]

    def test_tau_one_is_empty(self):
        c_src = softmax_map((2, 2, 16, 5), seed=3)
        plan = align_prompts("a red square", "a blue square", positional=True)
        mask = compute_blend_mask(c_src, plan, tau=1.0, resolution=4)
        assert float(mask.values.sum()) == 0.0

    def test_tau_zero_covers_all_strictly_positive(self):
        c_src = softmax_map((1, 2, 16, 5), seed=4)
        plan = align_prompts("a red square", "a blue square", positional=True)
        mask = compute_blend_mask(c_src, plan, tau=0.0, resolution=4)
        assert (mask.values == 1.0).all()  # softmax output is strictly positive

    def test_empty_edited_set_all_zero(self):
        c_src = softmax_map((2, 1, 16, 5), seed=5)
        plan = align_prompts("a red square", "a red square")
        mask = compute_blend_mask(c_src, plan, tau=0.0, resolution=4)
        assert float(mask.values.sum()) == 0.0

    def test_requires_cross_map(self):
        s = softmax_map((1, 1, 16, 16), kind="self")
        plan = align_prompts("red", "blue")
        with pytest.raises(ContractError, match="cross"):
            compute_blend_mask(s, plan, 0.5, 4)

    def test_incompatible_resolution_rejected(self):
        c_src = softmax_map((1, 1, 16, 4))
        plan = align_prompts("red", "blue", positional=True)
        with pytest.raises(ConfigError, match="resolution"):
            compute_blend_mask(c_src, plan, 0.5, resolution=3)

    def test_monotone_in_tau(self):
        c_src = softmax_map((2, 2, 16, 6), seed=9)
        plan = align_prompts("a red square moving", "a blue circle moving", positional=True)
        counts = []
        for tau in [i / 10 for i in range(11)]:
            mask = compute_blend_mask(c_src, plan, tau, 4)
            counts.append(int(mask.values.sum()))
        assert counts == sorted(counts, reverse=True)
        assert counts[-1] == 0

    def test_resample_down_and_up(self):
        c_src = softmax_map((1, 1, 16, 3), seed=11)
        plan = align_prompts("red", "blue", positional=True)
        down = compute_blend_mask(c_src, plan, 0.4, resolution=2)
        up = compute_blend_mask(c_src, plan, 0.4, resolution=8)
        assert down.values.shape == (1, 2, 2)
        assert up.values.shape == (1, 8, 8)

    def test_mask_graymap_dump(self, tmp_path):
        from vidfuse import codec

        c_src = softmax_map((2, 1, 16, 3), seed=13)
        plan = align_prompts("red", "blue", positional=True)
        mask = compute_blend_mask(c_src, plan, 0.5, resolution=4)
        mask.save_graymaps(tmp_path / "masks")
        files = sorted((tmp_path / "masks").glob("*.pgm"))
        assert len(files) == 2
        img = codec.read_graymap(files[0])
        assert img.shape == (4, 4)
        assert set(np.unique(img)) <= {0, 255}
        assert np.array_equal(img == 255, mask.values[0].numpy() == 1.0)


class TestCrossFuse:
    def _plan(self):
        return align_prompts("a x c", "a y c", positional=True)

    def test_below_gate_returns_live(self):
        cfg = FusionConfig(t_c=0.5, total_steps=10)
        edit, src = softmax_map((1, 1, 4, 12), 1), softmax_map((1, 1, 4, 12), 2)
        out = cross_fuse(edit, src, self._plan(), t=5, cfg=cfg)
        assert torch.equal(out.values, edit.values)

    def test_identical_prompts_full_source_on_nonpad(self):
        cfg = FusionConfig(t_c=0.0, total_steps=10)
        plan = align_prompts("a red square", "a red square")
        edit, src = softmax_map((2, 1, 4, 12), 3), softmax_map((2, 1, 4, 12), 4)
        out = cross_fuse(edit, src, plan, t=10, cfg=cfg)
        assert torch.equal(out.values[..., :3], src.values[..., :3])
        assert torch.equal(out.values[..., 3:], edit.values[..., 3:])  # pad columns stay live

    def test_column_assembly_oracle_example(self):
        # L=3, aligned {0<->0, 2<->2}, edited position 1 on the edit side
        cfg = FusionConfig(t_c=0.0, total_steps=1)
        edit, src = softmax_map((1, 1, 1, 3), 5), softmax_map((1, 1, 1, 3), 6)
        plan = self._plan()
        out = cross_fuse(edit, src, plan, t=1, cfg=cfg)
        a, b = src.values[0, 0, 0], edit.values[0, 0, 0]
        assert out.values[0, 0, 0].tolist() == [a[0].item(), b[1].item(), a[2].item()]

    def test_shape_mismatch_rejected(self):
        cfg = FusionConfig()
        with pytest.raises(ContractError):
            cross_fuse(softmax_map((1, 1, 4, 12)), softmax_map((1, 2, 4, 12)), self._plan(), 50, cfg)

    def test_never_changes_shape(self):
        cfg = FusionConfig(t_c=0.0, total_steps=2)
        edit = softmax_map((2, 2, 9, 12), 7)
        out = cross_fuse(edit, softmax_map((2, 2, 9, 12), 8), self._plan(), 2, cfg)
        assert out.values.shape == edit.values.shape


class TestSelfBlend:
    def _mask(self, rows, resolution):
        values = torch.tensor(rows, dtype=torch.float32).reshape(-1, resolution, resolution)
        return MaskVolume(values, resolution)

    def test_all_ones_keeps_edit_all_zeros_takes_source(self):
        cfg = FusionConfig(t_s=0.0, total_steps=2)
        edit, src = softmax_map((1, 2, 4, 4), 1, kind="self"), softmax_map((1, 2, 4, 4), 2, kind="self")
        ones = self._mask([1.0] * 4, 2)
        zeros = self._mask([0.0] * 4, 2)
        assert torch.equal(self_blend(edit, src, ones, 2, cfg).values, edit.values)
        assert torch.equal(self_blend(edit, src, zeros, 2, cfg).values, src.values)

    def test_below_gate_returns_live(self):
        cfg = FusionConfig(t_s=0.9, total_steps=10)
        edit, src = softmax_map((1, 1, 4, 4), 3, kind="self"), softmax_map((1, 1, 4, 4), 4, kind="self")
        out = self_blend(edit, src, self._mask([0.0] * 4, 2), 5, cfg)
        assert torch.equal(out.values, edit.values)

    def test_row_selection_example(self):
        # 2-query, 2-key maps with mask [1, 0]: row 1 live, row 2 from source
        cfg = FusionConfig(t_s=0.0, total_steps=1)
        edit = AttentionTensor(torch.tensor([[[[0.7, 0.3], [0.2, 0.8]]]]), "self", "b", 1)
        src = AttentionTensor(torch.tensor([[[[0.5, 0.5], [0.9, 0.1]]]]), "self", "b", 1)
        mask = MaskVolume(torch.tensor([[[1.0, 0.0]]]), 1)
        out = self_blend(edit, src, mask, 1, cfg)
        assert torch.equal(out.values[0, 0, 0], edit.values[0, 0, 0])
        assert torch.equal(out.values[0, 0, 1], src.values[0, 0, 1])

    def test_rows_stay_stochastic(self):
        cfg = FusionConfig(t_s=0.0, total_steps=2)
        edit, src = softmax_map((2, 2, 4, 8), 5, kind="self"), softmax_map((2, 2, 4, 8), 6, kind="self")
        mask = self._mask([1.0, 0.0, 0.0, 1.0] * 2, 2)
        out = self_blend(edit, src, mask, 2, cfg)
        sums = out.values.sum(-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-4)

    def test_shape_mismatch(self):
        cfg = FusionConfig()
        with pytest.raises(ShapeError):
            self_blend(
                softmax_map((1, 1, 4, 4), kind="self"),
                softmax_map((1, 1, 4, 8), kind="self"),
                self._mask([1.0] * 4, 2), 50, cfg,
            )


def random_case(rng):
    frames = int(rng.integers(1, 3))
    heads = int(rng.integers(1, 3))
    res = int(rng.choice([2, 4]))
    tokens = int(rng.integers(2, 7))
    q = res * res
    torch_gen = torch.Generator().manual_seed(int(rng.integers(0, 2**31)))
    c_edit = torch.softmax(torch.randn(frames, heads, q, tokens, generator=torch_gen), -1)
    c_src = torch.softmax(torch.randn(frames, heads, q, tokens, generator=torch_gen), -1)
    s_keys = q * int(rng.choice([1, 2]))
    s_edit = torch.softmax(torch.randn(frames, heads, q, s_keys, generator=torch_gen), -1)
    s_src = torch.softmax(torch.randn(frames, heads, q, s_keys, generator=torch_gen), -1)
    positions = list(range(tokens))
    rng.shuffle(positions)
    n_aligned = int(rng.integers(0, tokens + 1))
    alignment = tuple(sorted((p, p) for p in positions[:n_aligned]))
    edited = sorted(positions[n_aligned:])
    tau = float(rng.uniform(0, 1))
    t = int(rng.integers(1, 11))
    cfg = FusionConfig(
        t_s=float(rng.choice([0.0, 0.3, 1.0])),
        t_c=float(rng.choice([0.0, 0.5, 1.0])),
        tau=tau, total_steps=10,
    )
    return c_edit, c_src, s_edit, s_src, alignment, edited, t, cfg, res


class _FakePlan:
    """Plan stub carrying explicit alignment and edited sets."""

    def __init__(self, alignment, src_edited):
        self.alignment = tuple(alignment)
        self.src_edited = frozenset(src_edited)
        self.edit_edited = frozenset()
        self.is_identity = False


def test_oracle_equivalence_100_random_cases():
    rng = np.random.default_rng(20240511)
    for case in range(100):
        c_edit, c_src, s_edit, s_src, alignment, edited, t, cfg, res = random_case(rng)
        plan = _FakePlan(alignment, edited)

        fused = cross_fuse(
            AttentionTensor(c_edit, "cross", "b", res),
            AttentionTensor(c_src, "cross", "b", res),
            plan, t, cfg,
        ).values
        expected = ref_cross_fuse(c_edit.numpy(), c_src.numpy(), alignment, t, cfg.t_c, cfg.total_steps)
        assert np.array_equal(fused.numpy(), expected), f"cross_fuse differs in case {case}"

        mask = compute_blend_mask(AttentionTensor(c_src, "cross", "b", res), plan, cfg.tau, res)
        ref_mask = ref_blend_mask(c_src.numpy(), edited, cfg.tau, res)
        assert np.array_equal(mask.values.numpy(), ref_mask), f"mask differs in case {case}"

        blended = self_blend(
            AttentionTensor(s_edit, "self", "b", res),
            AttentionTensor(s_src, "self", "b", res),
            mask, t, cfg,
        ).values
        mask_rows = mask.values.numpy().reshape(mask.values.shape[0], -1)
        ref_blend = ref_self_blend(
            s_edit.numpy(), s_src.numpy(), mask_rows, t, cfg.t_s, cfg.total_steps
        )
        assert np.array_equal(blended.numpy(), ref_blend), f"self_blend differs in case {case}"


def test_mask_resample_matches_oracle_across_resolutions():
    rng = np.random.default_rng(7)
    for res, target in [(4, 2), (2, 4), (4, 4)]:
        g = torch.Generator().manual_seed(int(rng.integers(0, 2**31)))
        c_src = torch.softmax(torch.randn(2, 2, res * res, 4, generator=g), -1)
        plan = _FakePlan([], [0, 2])
        for tau in (0.0, 0.25, 0.5, 0.9, 1.0):
            mask = compute_blend_mask(AttentionTensor(c_src, "cross", "b", res), plan, tau, target)
            ref = ref_blend_mask(c_src.numpy(), [0, 2], tau, target)
            assert np.array_equal(mask.values.numpy(), ref)


class TestControllerStep:
    def _setup(self, identical=False):
        plan = align_prompts("a red square", "a red square" if identical else "a blue square")
        store = AttentionStore()
        cfg = FusionConfig(t_s=0.0, t_c=0.0, tau=0.5, total_steps=4)
        for step in range(4):
            for kind, keys in (("self", 8), ("cross", 12)):
                g = torch.Generator().manual_seed(100 + step * 2 + (kind == "self"))
                vals = torch.softmax(torch.randn(1, 1, 4, keys, generator=g), -1)
                store.record(AttnKey(step, "down2", kind), AttentionTensor(vals, kind, "down2", 2))
        return plan, store, cfg

    def _live(self, kind, keys, seed=0):
        g = torch.Generator().manual_seed(seed)
        return AttentionTensor(torch.softmax(torch.randn(1, 1, 4, keys, generator=g), -1), kind, "down2", 2)

    def test_missing_key_raises_lookup(self):
        plan, store, cfg = self._setup()
        with pytest.raises(StoreLookupError):
            controller_step(cfg, AttentionStore(), plan, 2, "down2", "cross", self._live("cross", 12))

    def test_cross_routes_to_cross_fuse(self):
        plan, store, cfg = self._setup()
        live = self._live("cross", 12, seed=1)
        out = controller_step(cfg, store, plan, 3, "down2", "cross", live)
        src = store.fetch(AttnKey(2, "down2", "cross")).values
        expected = ref_cross_fuse(
            live.values.numpy(), src.numpy(), plan.alignment, 3, cfg.t_c, cfg.total_steps
        )
        assert np.array_equal(out.numpy(), expected)

    def test_self_blends_under_mask_from_same_block_cross(self):
        plan, store, cfg = self._setup()
        live = self._live("self", 8, seed=2)
        out = controller_step(cfg, store, plan, 2, "down2", "self", live)
        c_src = store.fetch(AttnKey(1, "down2", "cross")).values
        mask = ref_blend_mask(c_src.numpy(), sorted(plan.src_edited), cfg.tau, 2)
        s_src = store.fetch(AttnKey(1, "down2", "self")).values
        expected = ref_self_blend(
            live.values.numpy(), s_src.numpy(), mask.reshape(1, 4), 2, cfg.t_s, cfg.total_steps
        )
        assert np.array_equal(out.numpy(), expected)

    def test_style_preset_replaces_self_entirely(self):
        plan, store, _ = self._setup()
        cfg = FusionConfig.from_preset("style_attribute", total_steps=4)
        live = self._live("self", 8, seed=3)
        out = controller_step(cfg, store, plan, 4, "down2", "self", live)  # 4/4 > 0.2
        assert torch.equal(out, store.fetch(AttnKey(3, "down2", "self")).values)

    def test_identity_plan_passes_live_through(self):
        plan, store, cfg = self._setup(identical=True)
        live = self._live("self", 8, seed=4)
        out = controller_step(cfg, store, plan, 2, "down2", "self", live)
        assert out is live.values

    def test_skip_blocks_opt_out(self):
        plan, store, cfg = self._setup()
        cfg = cfg.with_overrides(skip_blocks=frozenset({"down2"}))
        live = self._live("cross", 12, seed=5)
        assert controller_step(cfg, store, plan, 3, "down2", "cross", live) is live.values


@settings(max_examples=30, deadline=None)
@given(
    tau1=st.floats(0, 1), tau2=st.floats(0, 1),
    seed=st.integers(0, 2**31 - 1),
)
def test_mask_count_monotone_property(tau1, tau2, seed):
    lo, hi = sorted((tau1, tau2))
    g = torch.Generator().manual_seed(seed)
    c_src = AttentionTensor(torch.softmax(torch.randn(1, 2, 4, 4, generator=g), -1), "cross", "b", 2)
    plan = _FakePlan([], [1, 3])
    mask_lo = compute_blend_mask(c_src, plan, lo, 2)
    mask_hi = compute_blend_mask(c_src, plan, hi, 2)
    assert float(mask_lo.values.sum()) >= float(mask_hi.values.sum())
    assert ((mask_hi.values == 1) <= (mask_lo.values == 1)).all()
