"""The three coding schemes: context construction, closed-loop determinism,
ablation equivalences, and the predictor file format."""

from dataclasses import replace

import numpy as np
import pytest

from rvqcodec.grids import LatentGrid, SourceConfig, gauss_markov_sample, rng_for
from rvqcodec.quantizers import QuantizerSet
from rvqcodec.schemes import (
    CodedLatent,
    ContextPredictor,
    SchemeConfig,
    cm_decode,
    cm_encode,
    fixed_length_bits,
    iq_decode,
    iq_encode,
    rd_decode,
    rd_encode,
    read_predictor_file,
    train_cm_model,
    train_iq_model,
    train_rd_model,
    write_predictor_file,
)
from rvqcodec.timing import PhaseTimer

_SOURCE = SourceConfig(channels=1, height=32, width=32, rho=0.9, variance=1.0, seed=40)


def _corpus(count, offset=0, config=_SOURCE):
    return [gauss_markov_sample(config, index=offset + i) for i in range(count)]


@pytest.fixture(scope="module")
def rd_model():
    predictor, qset = train_rd_model(_corpus(12), (16, 16), iterations=8, seed=3)
    return predictor, qset


@pytest.fixture(scope="module")
def holdout():
    return gauss_markov_sample(_SOURCE, index=500)


def _identity_predictor(channels=1):
    # mu = 0, log sigma = 0: standardization becomes a no-op
    weights = tuple(
        np.zeros((channels * i, 2 * channels)) for i in range(4)
    )
    biases = tuple(np.zeros(2 * channels) for _ in range(4))
    return ContextPredictor(
        weights=weights, biases=biases, channels=channels, uses_hyper=False
    )


def test_predictor_validation():
    with pytest.raises(ValueError, match="four groups"):
        ContextPredictor(
            weights=(np.zeros((0, 2)),),
            biases=(np.zeros(2),),
            channels=1,
            uses_hyper=False,
        )
    with pytest.raises(ValueError, match="weight shape"):
        ContextPredictor(
            weights=tuple(np.zeros((5, 2)) for _ in range(4)),
            biases=tuple(np.zeros(2) for _ in range(4)),
            channels=1,
            uses_hyper=False,
        )
    with pytest.raises(ValueError, match="sigma_min"):
        _p = _identity_predictor()
        ContextPredictor(
            weights=_p.weights,
            biases=_p.biases,
            channels=1,
            uses_hyper=False,
            sigma_min=0.0,
        )


def test_predict_applies_affine_map_and_floors_sigma():
    p = _identity_predictor()
    w = tuple(
        np.full((1 * i, 2), 0.5) if i else np.zeros((0, 2)) for i in range(4)
    )
    b = tuple(np.array([1.0, -50.0]) for _ in range(4))
    pred = ContextPredictor(weights=w, biases=b, channels=1, uses_hyper=False)
    ctx = np.array([[2.0], [4.0]])
    mu, sigma = pred.predict(1, ctx)
    assert np.allclose(mu[:, 0], [2.0, 3.0])
    # log sigma of -49 is far below the floor
    assert np.array_equal(sigma, np.full((2, 1), pred.sigma_min))
    del p


def test_scheme_config_validation():
    with pytest.raises(ValueError, match="unknown scheme"):
        SchemeConfig(scheme="xx")
    with pytest.raises(ValueError, match="delta"):
        SchemeConfig(scheme="cm")
    with pytest.raises(ValueError, match="m must be"):
        SchemeConfig(scheme="rd", m=0)
    SchemeConfig(scheme="cm", delta=0.5)


def test_rd_with_identity_predictor_equals_iq(holdout):
    qset = train_iq_model(_corpus(12), (16, 16), iterations=8, seed=3)
    ident = _identity_predictor()
    for m in (1, 2):
        rd = rd_encode(holdout, ident, qset, m=m)
        iq = iq_encode(holdout, qset, m=m)
        for a, b in zip(rd.group_stacks, iq.group_stacks):
            for sa, sb in zip(a.indices, b.indices):
                assert np.array_equal(sa, sb)
        assert np.array_equal(rd.reconstruction.data, iq.reconstruction.data)
        assert rd.rate_bits == iq.rate_bits


def test_rd_decode_is_bit_identical_to_encoder_reconstruction(rd_model, holdout):
    predictor, qset = rd_model
    coded = rd_encode(holdout, predictor, qset, m=2)
    stripped = replace(coded, reconstruction=None)
    recon = rd_decode(stripped, predictor, qset)
    assert np.array_equal(recon.data, coded.reconstruction.data)


def test_rd_encode_is_deterministic(rd_model, holdout):
    predictor, qset = rd_model
    a = rd_encode(holdout, predictor, qset, m=1)
    b = rd_encode(holdout, predictor, qset, m=1)
    for sa, sb in zip(a.group_stacks, b.group_stacks):
        assert all(np.array_equal(x, y) for x, y in zip(sa.indices, sb.indices))
    assert np.array_equal(a.reconstruction.data, b.reconstruction.data)


def test_rd_beats_iq_on_correlated_source(rd_model, holdout):
    predictor, qset = rd_model
    iq_qset = train_iq_model(_corpus(12), (16, 16), iterations=8, seed=3)
    rd = rd_encode(holdout, predictor, qset, m=1)
    iq = iq_encode(holdout, iq_qset, m=1)
    mse_rd = float(np.mean((rd.reconstruction.data - holdout.data) ** 2))
    mse_iq = float(np.mean((iq.reconstruction.data - holdout.data) ** 2))
    assert mse_rd < mse_iq


def test_iq_decode_round_trip(holdout):
    qset = train_iq_model(_corpus(12), (16,), iterations=8, seed=3)
    coded = iq_encode(holdout, qset, m=1)
    recon = iq_decode(replace(coded, reconstruction=None), qset)
    assert np.array_equal(recon.data, coded.reconstruction.data)


def test_fixed_length_rate_accounting(rd_model, holdout):
    predictor, qset = rd_model
    coded = rd_encode(holdout, predictor, qset, m=2)
    n_group = (holdout.height // 2) * (holdout.width // 2) // 4 * 1
    # 16x16 latent -> 8x8 groups of 64 positions each; two K=16 stages
    assert n_group == 64
    expected = fixed_length_bits(qset, 2, 256, None)
    assert expected == 4 * 256 * 2 * np.log2(16)
    assert coded.rate_bits == expected
    with pytest.raises(ValueError, match="hyper"):
        fixed_length_bits(qset, 1, 256, 16)


def test_encode_rejects_bad_m(rd_model, holdout):
    predictor, qset = rd_model
    with pytest.raises(ValueError):
        rd_encode(holdout, predictor, qset, m=0)
    with pytest.raises(ValueError):
        rd_encode(holdout, predictor, qset, m=3)


def test_encode_rejects_odd_geometry(rd_model):
    predictor, qset = rd_model
    odd = LatentGrid(np.zeros((1, 6, 7)))
    with pytest.raises(ValueError, match="multiple"):
        rd_encode(odd, predictor, qset, m=1)


def test_train_rd_model_rejects_thin_corpora():
    tiny = SourceConfig(channels=1, height=4, width=4, rho=0.5, seed=1)
    with pytest.raises(ValueError, match="training"):
        train_rd_model([gauss_markov_sample(tiny)], (2,), iterations=2, seed=0)
    with pytest.raises(ValueError):
        train_rd_model([], (16,), iterations=2, seed=0)


def test_hyper_path_round_trip():
    cfg = SourceConfig(channels=1, height=64, width=64, rho=0.9, variance=1.0, seed=41)
    latents = [gauss_markov_sample(cfg, index=i) for i in range(12)]
    held = gauss_markov_sample(cfg, index=600)
    predictor, qset = train_rd_model(
        latents, (16,), hyper_stage_sizes=(16,), iterations=8, seed=3
    )
    assert predictor.uses_hyper
    assert qset.hyper is not None
    coded = rd_encode(held, predictor, qset, m=1)
    assert coded.hyper_stack is not None
    recon = rd_decode(replace(coded, reconstruction=None), predictor, qset)
    assert np.array_equal(recon.data, coded.reconstruction.data)
    # hyper grid positions pay rate too
    assert coded.rate_bits == fixed_length_bits(qset, 1, 32 * 32, 16 * 16)


def test_hyper_geometry_must_divide_by_four(rd_model):
    cfg = SourceConfig(channels=1, height=64, width=64, rho=0.5, seed=42)
    latents = [gauss_markov_sample(cfg, index=i) for i in range(12)]
    predictor, qset = train_rd_model(
        latents, (4,), hyper_stage_sizes=(4,), iterations=4, seed=1
    )
    bad = LatentGrid(np.zeros((1, 6, 6)))
    with pytest.raises(ValueError, match="multiple of 4"):
        rd_encode(bad, predictor, qset, m=1)


def test_predictor_file_round_trip(rd_model, tmp_path):
    predictor, _ = rd_model
    path = tmp_path / "p.efpr"
    write_predictor_file(path, predictor)
    back = read_predictor_file(path)
    assert back.channels == predictor.channels
    assert back.uses_hyper == predictor.uses_hyper
    assert back.sigma_min == predictor.sigma_min
    for w0, b0, w1, b1 in zip(
        predictor.weights, predictor.biases, back.weights, back.biases
    ):
        assert np.array_equal(w0, w1)
        assert np.array_equal(b0, b1)


def test_predictor_file_rejects_corruption(rd_model, tmp_path):
    predictor, _ = rd_model
    path = tmp_path / "p.efpr"
    write_predictor_file(path, predictor)
    raw = path.read_bytes()
    bad = tmp_path / "bad.efpr"
    bad.write_bytes(b"ZZZZ" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        read_predictor_file(bad)
    bad.write_bytes(raw[:4] + b"\x06" + raw[5:])
    with pytest.raises(ValueError, match="version"):
        read_predictor_file(bad)
    bad.write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="truncated"):
        read_predictor_file(bad)


@pytest.fixture(scope="module")
def cm_model():
    return train_cm_model(_corpus(12), delta=0.5, seed=3)


def test_cm_round_trip_is_bit_exact(cm_model, holdout):
    config = SchemeConfig(scheme="cm", delta=0.5)
    coded = cm_encode(holdout, cm_model, config)
    assert coded.scheme == "cm"
    assert coded.group_streams is not None and len(coded.group_streams) == 4
    recon = cm_decode(replace(coded, reconstruction=None), cm_model, config)
    assert np.array_equal(recon.data, coded.reconstruction.data)


def test_cm_rate_is_the_measured_stream_size(cm_model, holdout):
    config = SchemeConfig(scheme="cm", delta=0.5)
    coded = cm_encode(holdout, cm_model, config)
    assert coded.rate_bits == sum(s.bits for s in coded.group_streams)
    assert coded.self_information_bits is not None
    # measured payload tracks the model's own code-length estimate
    assert coded.rate_bits <= coded.self_information_bits * 1.01 + 4 * 32 + 64


def test_cm_finer_delta_costs_more_and_distorts_less(cm_model, holdout):
    fine = cm_encode(holdout, cm_model, SchemeConfig(scheme="cm", delta=0.125))
    coarse = cm_encode(holdout, cm_model, SchemeConfig(scheme="cm", delta=1.0))
    mse_f = float(np.mean((fine.reconstruction.data - holdout.data) ** 2))
    mse_c = float(np.mean((coarse.reconstruction.data - holdout.data) ** 2))
    assert fine.rate_bits > coarse.rate_bits
    assert mse_f < mse_c


def test_cm_clamps_out_of_support_symbols(cm_model):
    data = np.zeros((1, 8, 8))
    data[0, 3, 3] = 500.0  # far outside the [-255, 255] integer support at this delta
    spike = LatentGrid(data)
    config = SchemeConfig(scheme="cm", delta=0.125)
    coded = cm_encode(spike, cm_model, config)
    assert coded.clamp_count > 0
    recon = cm_decode(replace(coded, reconstruction=None), cm_model, config)
    assert np.array_equal(recon.data, coded.reconstruction.data)


def test_cm_is_deterministic(cm_model, holdout):
    config = SchemeConfig(scheme="cm", delta=0.25)
    a = cm_encode(holdout, cm_model, config)
    b = cm_encode(holdout, cm_model, config)
    assert a.rate_bits == b.rate_bits
    for sa, sb in zip(a.group_streams, b.group_streams):
        assert sa.payload == sb.payload and sa.state == sb.state


def test_phase_timers_expose_the_entropy_coding_gap(rd_model, cm_model, holdout):
    predictor, qset = rd_model
    rd_timer = PhaseTimer()
    rd_encode(holdout, predictor, qset, m=1, timer=rd_timer)
    cm_timer = PhaseTimer()
    cm_encode(holdout, cm_model, SchemeConfig(scheme="cm", delta=0.25), timer=cm_timer)
    rd_ms = rd_timer.as_dict()
    cm_ms = cm_timer.as_dict()
    for phases in (rd_ms, cm_ms):
        assert set(phases) == {"quantize", "autoregressive", "pack", "entropy_code"}
    assert rd_ms["entropy_code"] == 0.0
    assert cm_ms["entropy_code"] > 0.0
    assert rd_ms["quantize"] > 0.0


def test_coded_latent_carries_shape_and_m(rd_model, holdout):
    predictor, qset = rd_model
    coded = rd_encode(holdout, predictor, qset, m=1)
    assert isinstance(coded, CodedLatent)
    assert coded.shape == holdout.shape
    assert coded.m == 1
    assert coded.delta is None
