import numpy as np
import pytest

from lowbit import igemm, quant, tensor
from lowbit.errors import ShapeError, UsageError
from lowbit.igemm import DynamicAct, FullAct, IntAccumulator, StaticAct
from lowbit.quant import QuantizedActivation, QuantizedMatrix

F32 = np.float32


def make_qact(values: np.ndarray, scales=None, static=None, bits=8) -> QuantizedActivation:
    if static is not None:
        return QuantizedActivation(values=values.astype(np.int8), bits=bits, static_scale=static)
    if scales is None:
        scales = np.ones(values.shape[0], dtype=F32)
    return QuantizedActivation(
        values=values.astype(np.int8), bits=bits, token_scales=np.asarray(scales, dtype=F32)
    )


def make_qmat(values: np.ndarray, scales=None, bits=8) -> QuantizedMatrix:
    n = values.shape[0]
    if scales is None:
        scales = np.ones(1, dtype=F32)
    return QuantizedMatrix(
        values=values.astype(np.int8),
        bits=bits,
        group_scales=np.asarray(scales, dtype=F32),
        group_layout=[(0, n)],
    )


def naive_igemm_i64(xv: np.ndarray, wv: np.ndarray) -> np.ndarray:
    t, d = xv.shape
    n = wv.shape[0]
    out = np.zeros((t, n), dtype=np.int64)
    for i in range(t):
        for j in range(n):
            s = 0
            for p in range(d):
                s += int(xv[i, p]) * int(wv[j, p])
            out[i, j] = s
    return out


class TestIgemm:
    def test_forced_arithmetic(self):
        acc = igemm.igemm(make_qact(np.array([[1, 2]])), make_qmat(np.array([[3, 4]])))
        assert acc.acc.dtype == np.int32
        assert acc.acc.tolist() == [[11]]

    def test_zero_activation(self):
        acc = igemm.igemm(
            make_qact(np.zeros((3, 5), dtype=np.int8)),
            make_qmat(np.arange(10).reshape(2, 5) - 5),
        )
        assert not acc.acc.any()

    def test_matches_naive_int_oracle_exactly(self, np_rng):
        for _ in range(20):
            t, d, n = np_rng.integers(1, 9), np_rng.integers(1, 17), np_rng.integers(1, 7)
            xv = np_rng.integers(-127, 128, (t, d))
            wv = np_rng.integers(-127, 128, (n, d))
            acc = igemm.igemm(make_qact(xv), make_qmat(wv))
            assert np.array_equal(acc.acc, naive_igemm_i64(xv, wv))

    def test_matches_int64_einsum_oracle_on_larger_shapes(self, np_rng):
        for _ in range(10):
            t, d, n = np_rng.integers(1, 65), np_rng.integers(1, 257), np_rng.integers(1, 129)
            xv = np_rng.integers(-127, 128, (t, d))
            wv = np_rng.integers(-127, 128, (n, d))
            acc = igemm.igemm(make_qact(xv), make_qmat(wv))
            ref = np.einsum("ip,jp->ij", xv.astype(np.int64), wv.astype(np.int64))
            assert np.array_equal(acc.acc.astype(np.int64), ref)

    def test_bit_identical_across_runs(self, np_rng):
        xv = np_rng.integers(-127, 128, (16, 64))
        wv = np_rng.integers(-127, 128, (32, 64))
        first = igemm.igemm(make_qact(xv), make_qmat(wv)).acc
        for _ in range(3):
            assert np.array_equal(igemm.igemm(make_qact(xv), make_qmat(wv)).acc, first)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            igemm.igemm(make_qact(np.zeros((1, 3))), make_qmat(np.zeros((2, 4))))

    def test_overflow_guard_rejects_before_compute(self):
        igemm.check_overflow_guard(133000, 8, 8)  # just under the cap
        with pytest.raises(UsageError):
            igemm.check_overflow_guard(140000, 8, 8)
        xq = make_qact(np.zeros((1, 150000), dtype=np.int8))
        wq = make_qmat(np.zeros((1, 150000), dtype=np.int8))
        with pytest.raises(UsageError):
            igemm.igemm(xq, wq)


class TestEpilogue:
    def test_forced_arithmetic(self):
        acc = IntAccumulator(acc=np.array([[11]], dtype=np.int32))
        w = make_qmat(np.array([[1]]), scales=[0.25])
        out = igemm.dequant_epilogue(acc, np.array([0.5], dtype=F32), w)
        assert abs(out[0, 0] - 1.375) < 1e-7

    def test_zero_accumulator_gives_bias(self):
        acc = IntAccumulator(acc=np.zeros((2, 3), dtype=np.int32))
        w = make_qmat(np.ones((3, 4)), scales=[0.1])
        bias = np.array([1.0, -2.0, 3.0], dtype=F32)
        out = igemm.dequant_epilogue(acc, np.ones(2, dtype=F32), w, bias)
        assert np.array_equal(out, np.tile(bias, (2, 1)))

    def test_full_path_matches_float_oracle(self, np_rng):
        for _ in range(10):
            t, d, n = 8, 32, 16
            x = (np_rng.standard_normal((t, d)) * 2).astype(F32)
            w = (np_rng.standard_normal((n, d)) * 0.5).astype(F32)
            bias = np_rng.standard_normal(n).astype(F32)
            xq = quant.quantize_activation_tokenwise(x, 8)
            wq = quant.quantize_weight_groupwise(w, 4, 8)
            out = igemm.dequant_epilogue(igemm.igemm(xq, wq), xq.token_scales, wq, bias)
            ref = tensor.matmul(xq.dequantize(), wq.dequantize().T) + bias[None, :]
            denom = np.linalg.norm(ref) or 1.0
            assert np.linalg.norm(out - ref) / denom < 1e-5

    def test_group_scale_selection(self):
        # two groups with different scales: each output channel uses its own
        acc = IntAccumulator(acc=np.array([[10, 10]], dtype=np.int32))
        w = QuantizedMatrix(
            values=np.ones((2, 1), dtype=np.int8),
            bits=8,
            group_scales=np.array([1.0, 3.0], dtype=F32),
            group_layout=[(0, 1), (1, 1)],
        )
        out = igemm.dequant_epilogue(acc, np.array([2.0], dtype=F32), w)
        assert out.tolist() == [[20.0, 60.0]]

    def test_scale_linearity_power_of_two(self, np_rng):
        xv = np_rng.integers(-127, 128, (4, 16))
        wv = np_rng.integers(-127, 128, (8, 16))
        w = make_qmat(wv, scales=[0.37])
        acc = igemm.igemm(make_qact(xv), w)
        scales = np_rng.uniform(0.01, 1, 4).astype(F32)
        base = igemm.dequant_epilogue(acc, scales, w)
        doubled = igemm.dequant_epilogue(acc, scales * F32(2.0), w)
        assert np.array_equal(doubled, base * F32(2.0))


class TestQuantizedLinear:
    def test_full_mode_exact_on_representable_weights(self, np_rng):
        # integer weight payload with power-of-two scale dequantizes exactly
        x = np_rng.standard_normal((5, 8)).astype(F32)
        wv = np_rng.integers(-127, 128, (6, 8))
        w = make_qmat(wv, scales=[2.0**-6])
        out = igemm.quantized_linear(x, w, None, FullAct())
        ref = tensor.matmul(x, (wv.astype(F32) * F32(2.0**-6)).T)
        assert np.array_equal(out, ref)

    def test_dynamic_matches_dequant_oracle(self, np_rng):
        for _ in range(10):
            x = (np_rng.standard_normal((7, 24)) * 3).astype(F32)
            w = (np_rng.standard_normal((5, 24)) * 0.1).astype(F32)
            bias = np_rng.standard_normal(5).astype(F32)
            wq = quant.quantize_weight_groupwise(w, 5, 8)
            out = igemm.quantized_linear(x, wq, bias, DynamicAct(8))
            xq = quant.quantize_activation_tokenwise(x, 8)
            ref = tensor.matmul(xq.dequantize(), wq.dequantize().T) + bias[None, :]
            denom = np.linalg.norm(ref) or 1.0
            assert np.linalg.norm(out - ref) / denom < 1e-5

    def test_static_mse_at_least_dynamic(self, np_rng):
        worse = 0
        for trial in range(10):
            r = np.random.default_rng(trial)
            x = r.standard_normal((16, 32)).astype(F32)
            x[: 4] *= 4.0  # heterogeneous token ranges
            w = (r.standard_normal((8, 32)) * 0.1).astype(F32)
            wq = quant.quantize_weight_groupwise(w, 8, 8)
            ref = tensor.matmul(x, w.T)
            static_scale = quant.compute_scale(x, 8)  # calibrated on the same data
            dyn = igemm.quantized_linear(x, wq, None, DynamicAct(8))
            sta = igemm.quantized_linear(x, wq, None, StaticAct(static_scale, 8))
            mse_dyn = float(np.mean((dyn - ref) ** 2))
            mse_sta = float(np.mean((sta - ref) ** 2))
            if mse_sta >= mse_dyn:
                worse += 1
        assert worse >= 9

    def test_fused_path_never_materializes_dequant(self, np_rng, monkeypatch):
        x = np_rng.standard_normal((4, 16)).astype(F32)
        w = np_rng.standard_normal((4, 16)).astype(F32)
        wq = quant.quantize_weight_groupwise(w, 2, 8)

        def boom(self):
            raise AssertionError("fused path materialized a dequantized matrix")

        monkeypatch.setattr(QuantizedMatrix, "dequantize", boom)
        monkeypatch.setattr(QuantizedActivation, "dequantize", boom)
        igemm.quantized_linear(x, wq, None, DynamicAct(8))
        igemm.quantized_linear(x, wq, None, StaticAct(0.05, 8))


class TestFusedQuantizeOnWrite:
    def test_layer_norm_quantize_value_identical(self, np_rng):
        x = np_rng.standard_normal((6, 12)).astype(F32)
        gamma = np_rng.standard_normal(12).astype(F32)
        beta = np_rng.standard_normal(12).astype(F32)
        fused = igemm.layer_norm_quantize(x, gamma, beta, 8)
        plain = quant.quantize_activation_tokenwise(tensor.layer_norm(x, gamma, beta), 8)
        assert np.array_equal(fused.values, plain.values)
        assert np.array_equal(fused.token_scales, plain.token_scales)

    def test_gelu_quantize_value_identical(self, np_rng):
        x = (np_rng.standard_normal((6, 12)) * 2).astype(F32)
        fused = igemm.gelu_quantize(x, 8)
        plain = quant.quantize_activation_tokenwise(tensor.gelu(x), 8)
        assert np.array_equal(fused.values, plain.values)
        assert np.array_equal(fused.token_scales, plain.token_scales)
