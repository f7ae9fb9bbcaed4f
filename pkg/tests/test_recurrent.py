"""Tests for shardgrad.network.recurrent."""
import numpy as np
import pytest

from shardgrad.errors import RangeError, ShapeError
from shardgrad.network import forward, gradient_check, init_params, lstm_spec, rnn_spec, sample_sequence, tbptt_step
from shardgrad.network.recurrent import run_sequence, step, tbptt_with_state, zero_state


def _sequence(rng, steps: int, vocab: int):
    eye = np.eye(vocab)
    return eye[rng.integers(0, vocab, steps)], eye[rng.integers(0, vocab, steps)]


@pytest.fixture(params=["rnn", "lstm"])
def recurrent_net(request, rng):
    builder = rnn_spec if request.param == "rnn" else lstm_spec
    spec = builder(4, (5, 3))
    return spec, init_params(spec, rng)


def test_zero_state_shapes():
    states = zero_state(lstm_spec(4, (5, 3)))
    assert [s.h.shape for s in states] == [(5,), (3,)]
    assert all(s.c is not None and not s.c.any() for s in states)
    assert all(s.c is None for s in zero_state(rnn_spec(4, (5,))))


def test_feedforward_pass_rejects_recurrent_net(recurrent_net):
    spec, params = recurrent_net
    with pytest.raises(ShapeError):
        forward(spec, params, np.zeros(4))


def test_bptt_matches_finite_differences(recurrent_net, rng):
    spec, params = recurrent_net
    seq, tgt = _sequence(rng, 5, 4)
    mask = np.array([1.0, 1.0, 1.0, 1.0, 0.0])
    report = gradient_check(spec, params, seq, tgt, mask=mask)
    assert report.passed(1e-5), report


def test_masked_tail_contributes_nothing(recurrent_net, rng):
    spec, params = recurrent_net
    seq, tgt = _sequence(rng, 6, 4)
    mask = np.array([1.0, 1.0, 1.0, 1.0, 0.0, 0.0])
    masked, masked_loss = tbptt_step(spec, params, seq, tgt, mask)
    short, short_loss = tbptt_step(spec, params, seq[:4], tgt[:4])
    assert masked_loss == pytest.approx(short_loss)
    assert masked.max_relative_error(short) < 1e-12
    assert not masked.deltas[-1][4:].any()


def test_lstm_gates_and_cell_stay_bounded_over_long_sequence(rng):
    spec = lstm_spec(4, (5, 3))
    params = init_params(spec, rng)
    seq, _ = _sequence(rng, 100, 4)
    states = zero_state(spec)
    for t, x in enumerate(seq, start=1):
        states, cache = step(spec, params, x, states)
        for cell, state in zip(cache.cells, states):
            i, f, o, g = cell.gates
            for gate in (i, f, o):
                assert np.all((gate > 0.0) & (gate < 1.0))
            assert np.abs(g).max() <= 1.0
            assert np.isfinite(state.c).all()
            assert np.abs(state.c).max() <= t
            assert np.abs(state.h).max() < 1.0


def test_masked_step_passes_state_through(recurrent_net, rng):
    spec, params = recurrent_net
    seq, _ = _sequence(rng, 3, 4)
    outputs, states = run_sequence(spec, params, seq, mask=np.array([1.0, 0.0, 1.0]))
    assert outputs[1] is None
    _, expected = run_sequence(spec, params, seq[[0, 2]])
    for got, want in zip(states, expected):
        assert np.array_equal(got.h, want.h)


def test_truncation_changes_gradients_not_loss(recurrent_net, rng):
    spec, params = recurrent_net
    seq, tgt = _sequence(rng, 8, 4)
    full, full_loss = tbptt_step(spec, params, seq, tgt, truncation=8)
    cut, cut_loss = tbptt_step(spec, params, seq, tgt, truncation=2)
    assert cut_loss == pytest.approx(full_loss)
    assert full.max_relative_error(cut) > 0.0


def test_state_carries_across_calls(recurrent_net, rng):
    spec, params = recurrent_net
    seq, tgt = _sequence(rng, 6, 4)
    _, whole_loss, whole_state = tbptt_with_state(spec, params, seq, tgt)
    _, first_loss, state = tbptt_with_state(spec, params, seq[:3], tgt[:3])
    _, second_loss, final = tbptt_with_state(spec, params, seq[3:], tgt[3:], states=state)
    assert first_loss + second_loss == pytest.approx(whole_loss)
    assert np.allclose(final[-1].h, whole_state[-1].h)


def test_bad_mask_and_truncation(recurrent_net, rng):
    spec, params = recurrent_net
    seq, tgt = _sequence(rng, 3, 4)
    with pytest.raises(ShapeError):
        tbptt_step(spec, params, seq, tgt, mask=np.array([1.0, 0.5, 1.0]))
    with pytest.raises(ShapeError):
        tbptt_step(spec, params, seq, tgt[:2])
    with pytest.raises(RangeError):
        tbptt_step(spec, params, seq, tgt, truncation=0)


# ── Sampling ─────────────────────────────────────────────────────────────────

def test_sample_sequence_length_and_range(recurrent_net, rng):
    spec, params = recurrent_net
    out = sample_sequence(spec, params, 0, 300, rng)
    assert len(out) == 300
    assert all(0 <= c < 4 for c in out)


def test_greedy_sampling_is_deterministic(recurrent_net, rng):
    spec, params = recurrent_net
    from shardgrad.tensor import Rng
    assert sample_sequence(spec, params, 1, 20, Rng(0), "greedy") == sample_sequence(spec, params, 1, 20, Rng(9),
                                                                                      "greedy")


def test_sample_sequence_validates_inputs(recurrent_net, rng):
    spec, params = recurrent_net
    with pytest.raises(RangeError):
        sample_sequence(spec, params, 4, 10, rng)
    with pytest.raises(RangeError):
        sample_sequence(spec, params, 0, 0, rng)
