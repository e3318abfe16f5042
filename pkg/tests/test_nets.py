import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sacf import autodiff as ad
from sacf.acvf import FusionVariant, SpatialAttentionFusion, spatial_attention_param_count
from sacf.autodiff import ContractViolation, Tensor
from sacf.nets import (
    MLP,
    AudioEncoder,
    AudioEncoderConfig,
    Conv2d,
    GRUCell,
    Linear,
    LSTMCell,
    VisualEncoder,
    VisualEncoderConfig,
    audio_encoder_count,
    conv_count,
    count_parameters,
    gru_count,
    linear_count,
    lstm_count,
    orthogonal,
    visual_encoder_count,
)
from sacf.policy import ModelConfig, PolicyNetwork


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- encoders


def test_visual_zero_depth_shape_and_finite():
    enc = VisualEncoder(VisualEncoderConfig(), rng())
    out = enc(Tensor(np.zeros((3, 32))))
    assert out.shape == (3, 16, 4, 4)
    assert np.all(np.isfinite(out.values))


def test_visual_distinct_inputs_give_distinct_outputs():
    enc = VisualEncoder(VisualEncoderConfig(), rng(1))
    r = rng(2)
    for _ in range(100):
        a, b = r.uniform(0, 1, (1, 32)), r.uniform(0, 1, (1, 32))
        assert not np.array_equal(enc(Tensor(a)).values, enc(Tensor(b)).values)


def test_visual_deterministic_for_seed():
    x = Tensor(rng(3).uniform(0, 1, (2, 32)))
    a = VisualEncoder(VisualEncoderConfig(), rng(7))(x).values
    b = VisualEncoder(VisualEncoderConfig(), rng(7))(x).values
    assert a.tobytes() == b.tobytes()


def test_visual_wrong_length_refused():
    with pytest.raises(ContractViolation):
        VisualEncoder(VisualEncoderConfig(), rng())(Tensor(np.zeros((1, 31))))


def test_visual_zero_channels_refused():
    with pytest.raises(ContractViolation):
        VisualEncoder(VisualEncoderConfig(channels=0), rng())


def test_audio_zero_input_shapes():
    fmap, emb = AudioEncoder(AudioEncoderConfig(), rng())(Tensor(np.zeros((4, 2, 8))))
    assert fmap.shape == (4, 16, 2, 2) and emb.shape == (4, 32)
    assert np.all(np.isfinite(fmap.values)) and np.all(np.isfinite(emb.values))


def test_audio_pooled_vector_is_linear_head_on_mean_pool():
    enc = AudioEncoder(AudioEncoderConfig(), rng(4))
    fmap, emb = enc(Tensor(rng(5).uniform(0, 0.5, (3, 2, 8))))
    pooled = fmap.values.mean(axis=(2, 3))
    expected = pooled @ enc.pool_proj.weight.values + enc.pool_proj.bias.values
    np.testing.assert_allclose(emb.values, expected, rtol=1e-5, atol=1e-6)


def test_audio_distinct_inputs_give_distinct_outputs():
    enc = AudioEncoder(AudioEncoderConfig(), rng(6))
    r = rng(8)
    for _ in range(100):
        a, b = r.uniform(0, 0.5, (1, 2, 8)), r.uniform(0, 0.5, (1, 2, 8))
        assert not np.array_equal(enc(Tensor(a))[1].values, enc(Tensor(b))[1].values)


def test_audio_deterministic_for_seed():
    x = Tensor(rng(9).uniform(0, 1, (2, 2, 8)))
    a = AudioEncoder(AudioEncoderConfig(), rng(7))(x)[0].values
    b = AudioEncoder(AudioEncoderConfig(), rng(7))(x)[0].values
    assert a.tobytes() == b.tobytes()


def test_audio_negative_intensity_refused():
    x = np.zeros((1, 2, 8))
    x[0, 1, 3] = -1e-3
    with pytest.raises(ContractViolation):
        AudioEncoder(AudioEncoderConfig(), rng())(Tensor(x))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float32, (2, 32), elements=st.floats(-1e3, 1e3, width=32)),
       hnp.arrays(np.float32, (2, 2, 8), elements=st.floats(0, 1e3, width=32)))
def test_encoders_finite_for_finite_input(depth, audio):
    assert np.all(np.isfinite(VisualEncoder(VisualEncoderConfig(), rng())(Tensor(depth)).values))
    fmap, emb = AudioEncoder(AudioEncoderConfig(), rng())(Tensor(audio))
    assert np.all(np.isfinite(fmap.values)) and np.all(np.isfinite(emb.values))


# ---------------------------------------------------------------- cells


def test_zero_gru_on_zero_state_stays_zero():
    cell = GRUCell(5, 4, rng(), zero=True)
    assert np.all(cell(Tensor(np.zeros((2, 5))), Tensor(np.zeros((2, 4)))).values == 0)


def test_zero_lstm_on_zero_state_stays_zero():
    cell = LSTMCell(5, 4, rng(), zero=True)
    h, (h2, c) = cell(Tensor(np.zeros((2, 5))), (Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4)))))
    assert np.all(h.values == 0) and np.all(c.values == 0)


def test_single_unit_gru_hand_value():
    cell = GRUCell(1, 1, rng(), zero=True)
    cell.w_x.values[...] = [[0.0, 0.0, 1.0]]
    cell.w_h.values[...] = [[0.0, 0.0, 2.0]]
    # r = z = 0.5; n = tanh(1 + 0.5 * (2 * 0.5)); h' = 0.5 n + 0.5 * 0.5
    out = cell(Tensor([[1.0]]), Tensor([[0.5]])).item()
    assert out == pytest.approx(0.5 * math.tanh(1.5) + 0.25, abs=1e-6)


def test_single_unit_lstm_hand_value():
    cell = LSTMCell(1, 1, rng(), zero=True)
    cell.w_x.values[...] = [[0.0, 0.0, 1.0, 0.0]]
    # i = f = o = 0.5, g = tanh(1), c' = 0.5 * 1 + 0.5 * tanh(1)
    h, (_, c) = cell(Tensor([[1.0]]), (Tensor([[0.0]]), Tensor([[1.0]])))
    c_hand = 0.5 + 0.5 * math.tanh(1.0)
    assert c.item() == pytest.approx(c_hand, abs=1e-6)
    assert h.item() == pytest.approx(0.5 * math.tanh(c_hand), abs=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_unrolled_gru_gradient(seed):
    r = rng(seed)
    with ad.precision(np.float64):
        cell = GRUCell(3, 4, r)
        for p in cell.parameters():
            p.values[...] = r.standard_normal(p.shape) * 0.7
        xs = [Tensor(r.standard_normal((2, 3)), requires_grad=True) for _ in range(3)]
        w = Tensor(r.standard_normal((2, 4)))

        def loss():
            h = Tensor(np.zeros((2, 4)))
            for x in xs:
                h = cell(x, h)
            return ad.sum_(ad.mul(h, w))

        assert ad.finite_difference_check(loss, xs + cell.parameters(), h=1e-5, max_coords=96, rng=rng(seed)) < 1e-2


@pytest.mark.parametrize("seed", range(20))
def test_unrolled_lstm_gradient(seed):
    r = rng(seed)
    with ad.precision(np.float64):
        cell = LSTMCell(3, 4, r)
        for p in cell.parameters():
            p.values[...] = r.standard_normal(p.shape) * 0.7
        xs = [Tensor(r.standard_normal((2, 3)), requires_grad=True) for _ in range(3)]
        w = Tensor(r.standard_normal((2, 4)))

        def loss():
            state = (Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))))
            for x in xs:
                h, state = cell(x, state)
            return ad.add(ad.sum_(ad.mul(h, w)), ad.sum_(state[1]))

        assert ad.finite_difference_check(loss, xs + cell.parameters(), h=1e-5, max_coords=96, rng=rng(seed)) < 1e-2


def test_cell_dimension_mismatch_refused():
    with pytest.raises(ContractViolation):
        GRUCell(3, 4, rng())(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 4))))
    with pytest.raises(ContractViolation):
        LSTMCell(3, 4, rng())(Tensor(np.zeros((1, 3))), (Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 3)))))


def test_orthogonal_init_is_orthogonal():
    q = orthogonal(rng(), (6, 6))
    np.testing.assert_allclose(q @ q.T, np.eye(6), atol=1e-10)
    wide = orthogonal(rng(), (3, 5))
    np.testing.assert_allclose(wide @ wide.T, np.eye(3), atol=1e-10)


# ---------------------------------------------------------------- counting


def test_linear_three_to_two_has_eight():
    assert linear_count(3, 2) == 8
    assert count_parameters(Linear(3, 2, rng()))["total"] == 8


@pytest.mark.parametrize("n_in, hidden", [(1, 1), (3, 4), (7, 2)])
def test_layer_formulas_match_built_modules(n_in, hidden):
    assert count_parameters(GRUCell(n_in, hidden, rng()))["total"] == gru_count(n_in, hidden)
    assert count_parameters(LSTMCell(n_in, hidden, rng()))["total"] == lstm_count(n_in, hidden)
    assert count_parameters(Conv2d(n_in, hidden, (2, 3), rng()))["total"] == conv_count(n_in, hidden, 2, 3)
    mlp = MLP([n_in, 5, hidden], rng())
    assert count_parameters(mlp)["total"] == linear_count(n_in, 5) + linear_count(5, hidden)


def test_encoder_formulas_match_built_modules():
    vc, ac = VisualEncoderConfig(rays=20, channels=8, conv_channels=(4, 6), hidden=32), AudioEncoderConfig(bands=5)
    assert count_parameters(VisualEncoder(vc, rng()))["total"] == visual_encoder_count(vc)
    assert count_parameters(AudioEncoder(ac, rng()))["total"] == audio_encoder_count(ac)


def test_spatial_attention_formula_matches_constructor():
    att = SpatialAttentionFusion(16, 4, 4, 32, rng())
    assert count_parameters(att)["total"] == spatial_attention_param_count(16, 4, 4, 32)


def test_count_ordering_concat_sacf_attention():
    concat = count_parameters(PolicyNetwork(ModelConfig(variant=FusionVariant.CONCAT), rng()))["total"]
    model = PolicyNetwork(ModelConfig(variant=FusionVariant.SACF), rng())
    sacf = count_parameters(model)["total"]
    assert sacf - concat == sum(model.overhead_breakdown().values())
    assert concat < sacf < concat + spatial_attention_param_count(16, 4, 4, 32)


# ---------------------------------------------------------------- reset


@pytest.mark.parametrize("variant", list(FusionVariant))
def test_reset_reproduces_first_episode(variant):
    pol = PolicyNetwork(ModelConfig(variant=variant), rng(11))
    r = rng(12)
    depth = r.uniform(0, 1, (4, 2, 32)).astype(np.float32)
    audio = r.uniform(0, 0.3, (4, 2, 2, 8)).astype(np.float32)

    def run(state, first_start):
        outs = []
        for t in range(4):
            starts = np.full(2, 1.0 if t == 0 and first_start else 0.0)
            with ad.no_grad():
                out, state = pol.step(depth[t], audio[t], state, starts)
            outs.append(out.logits.values.copy())
        return outs, state

    first, state = run(pol.initial_state(2), True)
    # state carried over, but the start flag wipes it
    second, _ = run(state, True)
    for a, b in zip(first, second):
        assert a.tobytes() == b.tobytes()
    carried, _ = run(state, False)
    assert not np.array_equal(carried[0], first[0])
