import math
from fractions import Fraction

import numpy as np
import pytest

from refimpl import block_fp_reference, softfloat_round, softfloat_saturate

from wavepress import numerics
from wavepress.numerics import (
    FORMATS,
    CalibrationRequiredError,
    IntQuantParams,
    bits_per_value,
    calibrate_int8,
    dequantize_int8,
    fake_quantize_int8,
    quantize_block_fp,
    quantize_int8,
    quantize_tensor,
    round_float,
    saturate_float,
)

RNG = np.random.default_rng(1234)


def sweep_values():
    """All 65,536 upper-half float32 bit patterns crossed with four low-half
    fillers: exact values, the bfloat16 and binary16 tie positions, and an
    all-ones sticky pattern."""
    upper = np.arange(65536, dtype=np.uint32) << 16
    out = []
    with np.errstate(invalid="ignore"):  # the sweep contains NaN patterns
        for low in (0x0000, 0x1000, 0x8000, 0xFFFF):
            out.append((upper | np.uint32(low)).view(np.float32).astype(np.float64))
    return np.concatenate(out)


def random_floats(n, lo_exp=-160, hi_exp=140):
    mantissa = RNG.uniform(-2.0, 2.0, n)
    exponents = RNG.integers(lo_exp, hi_exp, n).astype(np.float64)
    return mantissa * np.exp2(exponents)


class TestFormatTable:
    def test_bit_layouts(self):
        expected = {
            "FP32": (8, 23, "FP32"), "TF32": (8, 10, "FP32"),
            "bfloat16": (8, 7, "FP32"), "BFP16": (8, 7, "FP32"),
            "FP16.16": (5, 10, "FP16"), "FP16.32": (5, 10, "FP32"),
            "INT8": (0, 8, "INT8"),
        }
        assert set(FORMATS) == set(expected)
        for name, (e, m, acc) in expected.items():
            spec = FORMATS[name]
            assert (spec.exponent_bits, spec.mantissa_bits) == (e, m)
            assert spec.accumulation == acc

    def test_block_size(self):
        assert FORMATS["BFP16"].block_size == 10

    def test_storage_bits(self):
        widths = {"FP32": 32, "TF32": 19, "bfloat16": 16,
                  "FP16.16": 16, "FP16.32": 16, "INT8": 8}
        for name, bits in widths.items():
            assert FORMATS[name].storage_bits == bits


class TestRoundFloat:
    def test_exact_value_in_every_format(self):
        for spec in FORMATS.values():
            if spec.kind == "floating":
                assert round_float(1.0, spec.exponent_bits, spec.mantissa_bits) == 1.0

    def test_one_third_bfloat16(self):
        x = float(np.float32(1.0 / 3.0))
        got = round_float(x, 8, 7)
        assert got == softfloat_round(x, 8, 7)
        assert got == 0.333984375  # the ties-to-even neighbor

    def test_binary16_overflow_boundary(self):
        # 65520 ties between 65504 and 65536; even mantissa wins, so inf
        assert softfloat_round(65520.0, 5, 10) == math.inf
        assert round_float(65520.0, 5, 10) == math.inf
        assert round_float(65519.999, 5, 10) == 65504.0
        assert round_float(-65520.0, 5, 10) == -math.inf

    def test_exhaustive_sweep_bfloat16_and_fp16(self):
        values = sweep_values()
        for e, m in ((8, 7), (5, 10)):
            got = round_float(values, e, m)
            want = np.array([softfloat_round(float(v), e, m) for v in values])
            both_nan = np.isnan(got) & np.isnan(want)
            same = (got == want) | both_nan
            # signed zero must survive too
            zero = want == 0.0
            same &= ~zero | (np.signbit(got) == np.signbit(want))
            assert int((~same).sum()) == 0

    def test_specials_propagate(self):
        out = round_float(np.array([np.nan, np.inf, -np.inf, 0.0, -0.0]), 5, 10)
        assert np.isnan(out[0]) and out[1] == np.inf and out[2] == -np.inf
        assert out[3] == 0 and not np.signbit(out[3])
        assert out[4] == 0 and np.signbit(out[4])

    def test_idempotent(self):
        x = random_floats(200_000)
        for e, m in ((8, 7), (8, 10), (5, 10)):
            once = round_float(x, e, m)
            assert np.array_equal(round_float(once, e, m), once)

    def test_monotone(self):
        x = np.sort(random_floats(200_000))
        for e, m in ((8, 7), (5, 10)):
            y = round_float(x, e, m)
            assert np.all(y[1:] >= y[:-1])  # inf >= inf holds, diff would NaN

    def test_sign_symmetry(self):
        x = random_floats(200_000)
        for e, m in ((8, 7), (8, 10), (5, 10)):
            assert np.array_equal(round_float(-x, e, m), -round_float(x, e, m))

    def test_subnormal_region_against_oracle(self):
        x = random_floats(20_000, lo_exp=-150, hi_exp=-120)
        got = round_float(x, 5, 10)
        want = np.array([softfloat_round(float(v), 5, 10) for v in x])
        assert np.array_equal(got, want)

    def test_saturate_matches_oracle(self):
        x = np.array([70_000.0, -70_000.0, 65519.999, np.inf, -np.inf, 1.5])
        got = saturate_float(x, 5, 10)
        want = [softfloat_saturate(float(v), 5, 10) for v in x]
        assert np.array_equal(got, want)
        assert got[0] == 65504.0


class TestQuantizeTensor:
    def test_fp32_identity(self):
        t = RNG.normal(size=(40, 7)).astype(np.float32)
        assert np.array_equal(quantize_tensor(t, FORMATS["FP32"]), t)

    def test_powers_of_two_exact_in_bfloat16(self):
        t = np.exp2(RNG.integers(-30, 30, size=256).astype(np.float64))
        t *= RNG.choice([-1.0, 1.0], size=256)
        assert np.array_equal(quantize_tensor(t, FORMATS["bfloat16"]), t)

    def test_tf32_mantissa_width(self):
        t = RNG.normal(size=4096).astype(np.float32)
        q = quantize_tensor(t, FORMATS["TF32"])
        # fixed point of the rounding, and at most 10 mantissa bits survive
        assert np.array_equal(quantize_tensor(q, FORMATS["TF32"]), q)
        bits = q.astype(np.float32).view(np.uint32)
        assert np.all((bits & np.uint32((1 << 13) - 1)) == 0)

    def test_integer_requires_calibration(self):
        with pytest.raises(CalibrationRequiredError):
            quantize_tensor(np.ones(4), FORMATS["INT8"])


class TestBlockFloatingPoint:
    def test_equal_block_exact(self):
        t = np.full(10, 0.5)
        assert np.array_equal(quantize_block_fp(t, 0), t)

    def test_small_value_flushes(self):
        t = np.array([1.0, 2.0 ** -12] + [0.0] * 8)
        q = quantize_block_fp(t, 0)
        assert q[0] == 1.0 and q[1] == 0.0

    def test_block_count_for_256_channels(self):
        bpv = bits_per_value(FORMATS["BFP16"], (4, 256), channel_axis=1)
        assert bpv == Fraction(8 * 256 + 8 * 26, 256)  # 25 full blocks + one of 6

    def test_matches_reference_loops(self):
        for _ in range(50):
            vals = (RNG.normal(size=37) * np.exp2(RNG.integers(-20, 20, 37))).tolist()
            got = quantize_block_fp(np.array(vals), 0)
            want = block_fp_reference(vals)
            assert np.allclose(got, want, rtol=0, atol=0)

    def test_sign_symmetry_zero_idempotence_monotone(self):
        t = random_floats(120_000).reshape(-1, 10)
        q = quantize_block_fp(t, 1)
        assert np.array_equal(quantize_block_fp(-t, 1), -q)        # sign symmetry
        assert np.all(q[t == 0.0] == 0.0)                          # zero exactness
        assert np.array_equal(quantize_block_fp(q, 1), q)          # idempotence
        # within a block the mapping shares one grid, so order is preserved
        order = np.argsort(t, axis=1, kind="stable")
        rows = np.arange(t.shape[0])[:, None]
        assert np.all(np.diff(q[rows, order], axis=1) >= 0)

    def test_channel_axis_handling(self):
        t = RNG.normal(size=(6, 23, 4))
        q = quantize_block_fp(t, channel_axis=1)
        assert q.shape == t.shape
        moved = np.moveaxis(t, 1, -1)
        q2 = np.moveaxis(quantize_block_fp(moved, channel_axis=2), -1, 1)
        assert np.array_equal(q, q2)


class TestInt8:
    def test_scale_from_max_abs(self):
        w = np.array([0.3, -1.27, 0.9])
        params = calibrate_params_for(w)
        assert params.scale == pytest.approx(0.01)

    def test_zero_tensor_sentinel(self):
        params = numerics._scale_from_max_abs(0.0)
        assert params.degenerate and params.scale > 0

    def test_zero_maps_to_zero(self):
        p = IntQuantParams(scale=0.037)
        assert quantize_int8(np.array(0.0), p) == 0
        assert dequantize_int8(quantize_int8(np.array(0.0), p), p) == 0.0

    def test_exact_multiples(self):
        p = IntQuantParams(scale=0.02)
        assert quantize_int8(np.array(2.0), p) == 100

    def test_round_trip_error_bound(self):
        p = IntQuantParams(scale=0.01)
        grid = np.linspace(-1.27, 1.27, 200_001)
        back = dequantize_int8(quantize_int8(grid, p), p)
        assert np.max(np.abs(grid - back)) <= 0.01 / 2 + 1e-12

    def test_clamp_symmetric(self):
        p = IntQuantParams(scale=0.01)
        assert quantize_int8(np.array(50.0), p) == 127
        assert quantize_int8(np.array(-50.0), p) == -127

    def test_properties(self):
        p = IntQuantParams(scale=0.037)
        x = random_floats(150_000, lo_exp=-10, hi_exp=4)
        q = quantize_int8(x, p)
        assert np.array_equal(quantize_int8(-x, p), -q)            # sign symmetry
        fq = fake_quantize_int8(x, p)
        assert np.array_equal(fake_quantize_int8(fq, p), fq)       # idempotence
        xs = np.sort(x)
        assert np.all(np.diff(quantize_int8(xs, p).astype(int)) >= 0)  # monotone

    def test_zero_point_fixed(self):
        with pytest.raises(ValueError):
            IntQuantParams(scale=0.1, zero_point=3)
        with pytest.raises(ValueError):
            IntQuantParams(scale=-1.0)


def calibrate_params_for(w):
    return numerics._scale_from_max_abs(float(np.max(np.abs(w))))


class TestCalibration:
    def test_empty_calibration_set(self, desk_cfg, paper_params):
        with pytest.raises(ValueError):
            calibrate_int8({}, [], desk_cfg)

    def test_weight_and_site_scales(self, desk_cfg, desk_dataset):
        from wavepress import audio_io, model

        params = model.build(desk_cfg, 3)
        clip, feats = desk_dataset[0]
        codes = audio_io.mulaw_encode(clip.samples)[:800]
        scales = calibrate_int8(params, [(feats, codes)], desk_cfg)
        for name, tensor in params.items():
            if name.endswith(".bias"):
                continue
            assert scales["weight:" + name].scale == pytest.approx(
                float(np.max(np.abs(tensor))) / 127.0)
        assert "site:logits" in scales and "site:features" in scales

    def test_scale_covers_each_clip(self, desk_cfg, desk_dataset):
        from wavepress import audio_io, model

        params = model.build(desk_cfg, 3)
        clips = []
        for clip, feats in desk_dataset[:2]:
            clips.append((feats, audio_io.mulaw_encode(clip.samples)[:600]))
        merged = calibrate_int8(params, clips, desk_cfg)
        for single in clips:
            alone = calibrate_int8(params, [single], desk_cfg)
            for key in alone:
                assert merged[key].scale >= alone[key].scale - 1e-12


class TestBitsPerValue:
    def test_fixed_widths(self):
        assert bits_per_value(FORMATS["FP32"]) == 32
        assert bits_per_value(FORMATS["TF32"]) == 19
        assert bits_per_value(FORMATS["bfloat16"]) == 16
        assert bits_per_value(FORMATS["FP16.16"]) == 16
        assert bits_per_value(FORMATS["FP16.32"]) == 16
        assert bits_per_value(FORMATS["INT8"]) == 8

    def test_block_full_runs(self):
        assert bits_per_value(FORMATS["BFP16"], (240, 120, 1), 1) == Fraction(44, 5)

    def test_block_needs_shape(self):
        with pytest.raises(ValueError):
            bits_per_value(FORMATS["BFP16"])

    def test_bias_rides_in_accumulation_format(self):
        assert bits_per_value(FORMATS["BFP16"], (240,)) == 32
