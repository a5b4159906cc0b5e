import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_seg_model, random_cls_model, random_seg_model
from smolk.compress import absorb_weights
from smolk.exceptions import (
    AbsorbedModel,
    BadClass,
    InsufficientSamples,
    SignalTooShort,
    UnknownGroup,
)
from smolk.interpret import (
    bonferroni,
    contribution_map,
    dump_kernels,
    group_importance_stats,
    group_response,
    kernel_importance,
    ttest,
)
from smolk.model import (
    ClassificationModel,
    KernelBank,
    KernelGroup,
    SegmentationModel,
    feature_maps,
    segment_logits,
)


def _single_kernel_cls(taps, bias=0.0, w=1.0, n_classes=2):
    bank = KernelBank([KernelGroup("short", np.array([taps], float), np.array([bias]))], 64.0)
    cw = np.zeros((1, n_classes))
    cw[0, 0] = w
    return ClassificationModel(bank, cw, np.zeros((4, n_classes)), np.zeros(n_classes), 30.0,
                               [f"c{j}" for j in range(n_classes)])


class TestImportance:
    def test_normalized_kernel(self):
        taps = np.array([0.6, 0.8])  # sum of squares 1, bias 0
        model = make_seg_model([[taps]], [[0.0]], [-1.7])
        assert kernel_importance(model)[0].importance == pytest.approx(-1.7)
        assert kernel_importance(model)[0].sign == -1

    def test_hand_example(self):
        model = make_seg_model([[[1.0, 1.0]]], [[-2.0]], [5.0])
        assert kernel_importance(model)[0].importance == 0.0

    def test_zero_weight(self):
        model = make_seg_model([[[3.0, -4.0]]], [[1.0]], [0.0])
        assert kernel_importance(model)[0].importance == 0.0

    def test_records(self):
        model = random_seg_model(np.random.default_rng(0), counts=(1, 2, 3))
        recs = kernel_importance(model)
        assert [r.group for r in recs] == ["short", "moderate", "moderate", "long", "long", "long"]
        assert all(r.sign == np.sign(r.importance) for r in recs)

    def test_absorbed(self):
        with pytest.raises(AbsorbedModel):
            kernel_importance(absorb_weights(random_seg_model(np.random.default_rng(0))))


class TestGroupResponse:
    def test_partition(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            model = random_seg_model(rng, counts=tuple(rng.integers(1, 4, 3)))
            x = rng.standard_normal(120)
            total = sum(group_response(model, x, g) for g in ("short", "moderate", "long"))
            np.testing.assert_allclose(total, segment_logits(model, x), atol=1e-9)

    def test_single_group(self):
        rng = np.random.default_rng(2)
        model = random_seg_model(rng, counts=(0, 3, 0))
        x = rng.standard_normal(60)
        np.testing.assert_array_equal(group_response(model, x, "moderate"), segment_logits(model, x))

    def test_zero_weight_group(self):
        rng = np.random.default_rng(3)
        model = random_seg_model(rng)
        w = model.weights.copy()
        w[:2] = 0
        model = SegmentationModel(model.bank, w)
        assert not group_response(model, rng.standard_normal(40), "short").any()

    def test_unknown_group(self):
        with pytest.raises(UnknownGroup):
            group_response(random_seg_model(np.random.default_rng(0)), np.zeros(30), "huge")


class TestStatistics:
    def test_identical_populations(self):
        t, p = ttest([1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0])
        assert t == pytest.approx(0.0, abs=1e-12) and p == pytest.approx(1.0)

    def test_separated_populations(self):
        rng = np.random.default_rng(0)
        _, p = ttest(rng.normal(0, 1, 100), rng.normal(10, 1, 100))
        assert p < 1e-6

    def test_bonferroni(self):
        np.testing.assert_allclose(bonferroni([0.01, 0.2, 0.5]), [0.03, 0.6, 1.0])

    def test_too_few(self):
        with pytest.raises(InsufficientSamples):
            ttest([1.0], [1.0, 2.0])

    def test_group_stats(self):
        rng = np.random.default_rng(4)
        models = [random_seg_model(rng) for _ in range(3)]
        X = rng.standard_normal((4, 80))
        y = (rng.random((4, 80)) < 0.3).astype(np.uint8)
        stats = group_importance_stats(models, X, y)
        assert set(stats.importance_mean) == {"short", "moderate", "long"}
        assert len(stats.importance_tests) == 3 and len(stats.response_tests) == 3
        assert all(0 <= c.p_bonferroni <= 1 for c in stats.importance_tests)
        assert "| group |" in stats.to_markdown()

    def test_group_stats_single_kernel(self):
        model = random_seg_model(np.random.default_rng(5), counts=(1, 2, 2))
        with pytest.raises(InsufficientSamples):
            group_importance_stats([model], np.zeros((1, 40)), np.zeros((1, 40)))


class TestContributionMap:
    def test_hand_example(self):
        model = _single_kernel_cls([1.0, 0.0])
        x = np.array([1.0, -1.0, 0.0])
        np.testing.assert_array_equal(feature_maps(model.bank, x).maps[0], [1.0, 0.0])
        np.testing.assert_allclose(contribution_map(model, x, 0).values, [0.5, 0.5, 0.0])

    def test_zero_class_weights(self):
        model = _single_kernel_cls([1.0, 2.0], w=3.0)
        assert not contribution_map(model, np.ones(10), 1).values.any()

    def test_conservation(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            model = random_cls_model(rng)
            x = rng.standard_normal(int(rng.integers(20, 200)))
            j = int(rng.integers(0, 3))
            cmap = contribution_map(model, x, j)
            fm = feature_maps(model.bank, x).maps
            ref = sum(model.class_weights[m, j] * fm[m].sum() for m in range(model.n_kernels))
            assert cmap.values.sum() == pytest.approx(ref, rel=1e-6, abs=1e-12)
            assert cmap.values.size == x.size

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-5, 5))
    def test_linear_in_class_weights(self, seed, c):
        rng = np.random.default_rng(seed)
        model = random_cls_model(rng)
        x = rng.standard_normal(64)
        scaled = ClassificationModel(model.bank, model.class_weights * c, model.spectrum_weights,
                                     model.class_bias, model.f_max_hz, model.class_names)
        np.testing.assert_allclose(contribution_map(scaled, x, 1).values,
                                   c * contribution_map(model, x, 1).values, atol=1e-9)

    def test_logit_accounting(self):
        from smolk.model import classify_logits

        rng = np.random.default_rng(7)
        model = random_cls_model(rng)
        x = rng.standard_normal(100)
        fm = feature_maps(model.bank, x).maps
        # the map sums to the kernel part of the logit before the per-kernel mean
        kernel_part = sum(model.class_weights[m, 2] * fm[m].mean() for m in range(6))
        cmap = contribution_map(model, x, 2)
        z = classify_logits(model, [x])[0, 2]
        assert kernel_part + cmap.spectrum_share + cmap.bias == pytest.approx(z, rel=1e-9)

    def test_errors(self):
        model = random_cls_model(np.random.default_rng(0))
        with pytest.raises(SignalTooShort):
            contribution_map(model, np.zeros(5), 0)
        with pytest.raises(BadClass):
            contribution_map(model, np.zeros(40), 3)

    def test_csv(self, tmp_path):
        cmap = contribution_map(_single_kernel_cls([1.0, 0.0]), np.array([1.0, -1.0, 0.0]), 0)
        cmap.write_csv(tmp_path / "c.csv", 64.0)
        assert (tmp_path / "c.csv").read_text().splitlines()[0] == "t,value"


class TestDumpKernels:
    def test_twelve_traces(self, tmp_path):
        model = random_seg_model(np.random.default_rng(0), counts=(4, 4, 4))
        csv_path, svg_path = dump_kernels(model, tmp_path / "k")
        rows = csv_path.read_text().splitlines()[1:]
        assert len({r.split(",")[0] for r in rows}) == 12
        assert svg_path.read_text().count("<polyline") == 12

    def test_absorbed_signs(self, tmp_path):
        model = random_seg_model(np.random.default_rng(1))
        absorbed = absorb_weights(model)
        csv_path, _ = dump_kernels(absorbed, tmp_path / "k")
        signs = {}
        for r in csv_path.read_text().splitlines()[1:]:
            m, _, s, _, _ = r.split(",")
            signs[int(m)] = int(s)
        assert [signs[m] for m in range(6)] == list(absorbed.signs)

    def test_empty(self, tmp_path):
        model = SegmentationModel(KernelBank([], 64.0), np.zeros(0))
        with pytest.raises(ValueError):
            dump_kernels(model, tmp_path / "k")
