import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import naive_conv2d, rel_err
from detnas import diffcore as dc
from detnas.diffcore import Tensor
from detnas.errors import ConfigError, InputError
from detnas.kernelreuse import (
    ALL_OPS,
    BOTTLENECK_OPS,
    CandidateOp,
    UnifiedKernel,
    build_mask,
    compound_conv,
    embed_kernel,
    extract_candidate_kernel,
    independent_param_count,
    shared_param_count,
)


def explicit_sum(x, uk, alpha, stride):
    """Each candidate as its own native convolution, mixed in float64."""
    out = 0.0
    for a, op in zip(alpha, uk.candidates):
        k = extract_candidate_kernel(uk, op)
        b = None if uk.bias is None else uk.bias.data
        out = out + a * naive_conv2d(x, k, stride, op.padding, op.dilation, b)
    return out


class TestMasks:
    def test_footprints(self):
        np.testing.assert_array_equal(build_mask(CandidateOp.CONV1X1), np.pad([[1.0]], 2))
        np.testing.assert_array_equal(build_mask(CandidateOp.CONV3X3), np.pad(np.ones((3, 3)), 1))
        np.testing.assert_array_equal(build_mask(CandidateOp.CONV5X5), np.ones((5, 5)))
        dil = np.zeros((5, 5))
        dil[::2, ::2] = 1.0
        np.testing.assert_array_equal(build_mask(CandidateOp.CONV3X3_DIL2), dil)

    def test_oversized_receptive_field_rejected(self):
        with pytest.raises(ConfigError):
            build_mask(CandidateOp.CONV3X3, k=3, dilation=3)
        with pytest.raises(ConfigError):
            build_mask(CandidateOp.CONV5X5, k=7, dilation=1)

    def test_receptive_fields(self):
        assert [op.receptive_field for op in ALL_OPS] == [1, 3, 5, 5]

    def test_labels_round_trip(self):
        for op in ALL_OPS:
            assert CandidateOp.from_label(op.label) is op
        with pytest.raises(InputError):
            CandidateOp.from_label("conv7x7")


class TestParamCounts:
    def test_shared_bank_size(self):
        assert shared_param_count(3, 5) == 5 * 3 * 25 + 5

    def test_independent_kernels(self):
        # 1 + 9 + 25 + 9 taps, one bias per candidate
        assert independent_param_count(3, 5) == 44 * 15 + 4 * 5
        assert independent_param_count(2, 2, BOTTLENECK_OPS) == 43 * 4 + 3 * 2

    def test_reuse_saves_parameters(self):
        for c in (1, 8, 64):
            assert shared_param_count(c, c) < independent_param_count(c, c)

    def test_unified_kernel_count(self, rng):
        assert UnifiedKernel.init(4, 2, rng).param_count() == shared_param_count(2, 4)
        assert UnifiedKernel.init(4, 2, rng, bias=False).param_count() == 4 * 2 * 25


class TestExtractEmbed:
    def test_round_trip_equals_masked_bank(self, rng):
        uk = UnifiedKernel.init(3, 2, rng)
        for op in ALL_OPS:
            k = extract_candidate_kernel(uk, op)
            assert k.shape == (3, 2, op.k, op.k)
            np.testing.assert_array_equal(embed_kernel(k, op), uk.theta.data * build_mask(op))

    def test_dilated_taps(self):
        theta = np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5)
        uk = UnifiedKernel(Tensor(theta), None, ALL_OPS)
        np.testing.assert_array_equal(
            extract_candidate_kernel(uk, CandidateOp.CONV3X3_DIL2)[0, 0], [[0, 2, 4], [10, 12, 14], [20, 22, 24]]
        )
        assert extract_candidate_kernel(uk, CandidateOp.CONV1X1)[0, 0, 0, 0] == 12

    def test_extraction_is_a_copy(self, rng):
        uk = UnifiedKernel.init(1, 1, rng)
        k = extract_candidate_kernel(uk, CandidateOp.CONV5X5)
        k[:] = 0
        assert np.abs(uk.theta.data).sum() > 0

    def test_foreign_candidate_rejected(self, rng):
        uk = UnifiedKernel.init(1, 1, rng, candidates=BOTTLENECK_OPS)
        with pytest.raises(InputError):
            extract_candidate_kernel(uk, CandidateOp.CONV1X1)

    def test_bad_bank_shape_rejected(self):
        with pytest.raises(InputError):
            UnifiedKernel(Tensor(np.zeros((1, 1, 3, 3))), None, ALL_OPS)


class TestCompoundConv:
    def test_one_hot_alpha_is_native_conv(self, rng, f64):
        uk = UnifiedKernel.init(3, 2, rng)
        x = rng.standard_normal((1, 2, 6, 6))
        for i, op in enumerate(ALL_OPS):
            alpha = np.eye(4)[i]
            got = compound_conv(Tensor(x), uk, alpha).data
            want = naive_conv2d(x, extract_candidate_kernel(uk, op), 1, op.padding, op.dilation, uk.bias.data)
            assert rel_err(got, want) < 1e-12

    @pytest.mark.parametrize("stride", [1, 2])
    def test_mixture_matches_explicit_sum(self, rng, stride):
        uk = UnifiedKernel.init(4, 3, rng, dtype=np.float32)
        uk.bias.data = rng.standard_normal(4).astype(np.float32)
        alpha = dc.softmax(Tensor(rng.standard_normal(4), dtype=np.float32)).data
        x = rng.standard_normal((2, 3, 7, 7)).astype(np.float32)
        got = compound_conv(Tensor(x), uk, alpha, stride).data
        assert rel_err(got, explicit_sum(x, uk, alpha, stride)) <= 1e-5

    def test_channel_slices(self, rng, f64):
        uk = UnifiedKernel.init(4, 3, rng)
        x = rng.standard_normal((1, 2, 5, 5))
        alpha = np.full(4, 0.25)
        got = compound_conv(Tensor(x), uk, alpha, c_out=3).data
        sliced = UnifiedKernel(Tensor(uk.theta.data[:3, :2]), Tensor(uk.bias.data[:3]), ALL_OPS)
        np.testing.assert_allclose(got, compound_conv(Tensor(x), sliced, alpha).data, rtol=1e-13)

    def test_gradients(self, rng, f64):
        uk = UnifiedKernel.init(2, 2, rng)
        x = Tensor(rng.standard_normal((1, 2, 5, 5)), requires_grad=True)
        alpha = Tensor(rng.standard_normal(4), requires_grad=True)
        err = dc.gradcheck(
            lambda xx, th, b, al: compound_conv(xx, UnifiedKernel(th, b, ALL_OPS), dc.softmax(al), stride=2),
            [x, uk.theta, uk.bias, alpha],
        )
        assert err <= 1e-5

    def test_too_many_input_channels(self, rng):
        uk = UnifiedKernel.init(2, 2, rng)
        with pytest.raises(InputError):
            compound_conv(Tensor(np.zeros((1, 3, 4, 4))), uk, np.ones(4) / 4)

    def test_alpha_length_checked(self, rng):
        uk = UnifiedKernel.init(2, 2, rng)
        with pytest.raises(InputError):
            compound_conv(Tensor(np.zeros((1, 2, 4, 4))), uk, np.ones(3) / 3)


@settings(max_examples=30, deadline=None)
@given(
    c_in=st.integers(1, 4), c_out=st.integers(1, 4), size=st.integers(1, 8),
    stride=st.sampled_from([1, 2]), seed=st.integers(0, 2 ** 16),
)
def test_mixture_property(c_in, c_out, size, stride, seed):
    rng = np.random.default_rng(seed)
    with dc.precision(np.float64):
        uk = UnifiedKernel.init(c_out, c_in, rng)
        uk.bias.data = rng.standard_normal(c_out)
        alpha = rng.dirichlet(np.ones(4))
        x = rng.standard_normal((1, c_in, size, size))
        got = compound_conv(Tensor(x), uk, alpha, stride).data
    assert rel_err(got, explicit_sum(x, uk, alpha, stride)) <= 1e-12
