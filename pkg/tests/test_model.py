import math

import numpy as np
import pytest

from asyrec import tensor as T
from asyrec.data import NOXI, UDIVA, SynthConfig, synth_generate
from asyrec.model import (AsyrecParams, ClipPrediction, ForwardOptions, clip_loss, dumps_checkpoint, forward,
                          forward_batch, load_checkpoint, loads_checkpoint, loss, predict_arrays, predict_video,
                          save_checkpoint)


def randomized(d=8, schema=NOXI, seed=0, aggregate="counterpart"):
    p = AsyrecParams.init(d, schema, seed, aggregate=aggregate)
    rng = np.random.default_rng(seed + 100)
    for t in p.parameters():
        t.data[...] = rng.normal(0, 0.3, t.shape) + (np.abs(t.data) if t is p.temporal.weight else 0)
    p.temporal.weight.data[...] = np.abs(p.temporal.weight.data) + 0.1
    return p


@pytest.fixture(scope="module")
def data():
    return synth_generate(SynthConfig(dim=8, dyads_per_class=3, clips=5), 0)


def test_zero_heads_give_uniform(data):
    p = AsyrecParams.init(8, NOXI, 0)
    p_ij, p_ji = predict_arrays(p, data.arrays())
    assert np.all(p_ij == 0.25) and np.all(p_ji == 0.25)
    arr = data.arrays()
    L = loss(p, arr.x[:7], arr.t[:7], arr.t_max[:7], arr.y_ij[:7], arr.y_ji[:7])
    assert abs(L.item() - 2 * math.log(4)) <= 1e-12


def test_probabilities_sum_to_one(data):
    p = randomized()
    for probs in predict_arrays(p, data.arrays()):
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_clip_forward_matches_batch(data):
    p = randomized()
    arr = data.arrays()
    p_ij, p_ji = predict_arrays(p, arr)
    for k, clip in enumerate(data.clips()):
        pred = forward(clip, p)
        np.testing.assert_allclose(pred.p_i_to_j, p_ij[k], atol=1e-14)
        np.testing.assert_allclose(pred.p_j_to_i, p_ji[k], atol=1e-14)
        if k > 10:
            break


def test_dimension_mismatch(data):
    p = randomized(d=4)
    with pytest.raises(ValueError, match="d=4"):
        forward(next(data.clips()), p)


def test_heads_are_independent(data):
    p = randomized()
    arr = data.arrays()
    before = predict_arrays(p, arr)[0]
    p.head_ji.weight.data += 5.0
    after = predict_arrays(p, arr)[0]
    assert before.tobytes() == after.tobytes()


def test_forward_is_deterministic(data):
    p = randomized()
    arr = data.arrays()
    a, b = predict_arrays(p, arr), predict_arrays(p, arr)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_clip_loss_examples(data):
    clip = next(data.clips())
    uniform = ClipPrediction(np.full(4, 0.25), np.full(4, 0.25), 0)
    assert clip_loss(uniform, clip) == pytest.approx(2 * math.log(4))
    perfect = ClipPrediction(np.eye(4)[clip.label_i_to_j], np.eye(4)[clip.label_j_to_i], 0)
    assert clip_loss(perfect, clip) == 0.0
    clip.label_j_to_i = None
    with pytest.raises(ValueError):
        clip_loss(uniform, clip)


def test_loss_requires_reverse_label(data):
    arr = data.arrays()
    p = AsyrecParams.init(8, NOXI, 0)
    with pytest.raises(ValueError):
        loss(p, arr.x[:2], arr.t[:2], arr.t_max[:2], arr.y_ij[:2], None)


def test_unidirectional_model():
    ds = synth_generate(SynthConfig(dim=8, n_classes=2, dyads_per_class=2, clips=4, bidirectional=False), 0)
    assert ds.schema == UDIVA
    p = AsyrecParams.init(8, UDIVA, 0)
    assert p.head_ji is None
    arr = ds.arrays()
    p_ij, p_ji = predict_arrays(p, arr)
    assert p_ji is None and p_ij.shape == (len(arr), 2)
    L = loss(p, arr.x, arr.t, arr.t_max, arr.y_ij)
    assert L.item() == pytest.approx(math.log(2))


@pytest.mark.parametrize("aggregate", ["counterpart", "self"])
def test_full_loss_gradient(data, aggregate):
    p = randomized(aggregate=aggregate)
    p.fit_standardizer(data)
    arr = data.arrays().take(np.arange(4))
    err = T.grad_check(lambda: loss(p, arr.x, arr.t, arr.t_max, arr.y_ij, arr.y_ji), p.parameters())
    assert err <= 1e-4


def test_predict_video_examples():
    p = np.array([0.2, 0.8])
    out, none = predict_video([ClipPrediction(p, None, 0), ClipPrediction(p, None, 1)])
    np.testing.assert_allclose(out, p)
    assert none is None
    out, _ = predict_video([ClipPrediction(np.array([1.0, 0.0]), None, 0),
                            ClipPrediction(np.array([0.0, 1.0]), None, 1)])
    np.testing.assert_array_equal(out, [0.5, 0.5])
    with pytest.raises(ValueError):
        predict_video([])


def test_standardizer_pools_persons(data):
    p = AsyrecParams.init(8, NOXI, 0)
    p.fit_standardizer(data)
    z = p.standardize(data.arrays().x)
    pooled = z.transpose(2, 0, 1, 3).reshape(4, -1, 8)
    np.testing.assert_allclose(pooled.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(pooled.std(axis=1), 1.0, atol=1e-12)


def test_checkpoint_round_trip_is_bit_exact(tmp_path, data):
    p = randomized()
    p.fit_standardizer(data)
    path = tmp_path / "m.ckpt"
    save_checkpoint(p, path, {"seed": 4})
    q = load_checkpoint(path)
    for name, arr in p.state().items():
        assert q.state()[name].tobytes() == arr.tobytes(), name
    assert q.schema == p.schema and q.aggregate == p.aggregate
    assert dumps_checkpoint(q, {"seed": 4}) == path.read_text()
    arr = data.arrays()
    assert predict_arrays(p, arr)[0].tobytes() == predict_arrays(q, arr)[0].tobytes()


def test_checkpoint_errors():
    with pytest.raises(ValueError, match="header"):
        loads_checkpoint("nothing here\n")
    text = dumps_checkpoint(AsyrecParams.init(2, NOXI, 0))
    lines = text.splitlines()
    lines[2] = lines[2].replace("0x", "zz", 1)
    with pytest.raises(ValueError, match="line 3"):
        loads_checkpoint("\n".join(lines))


def test_copy_is_independent():
    p = randomized()
    q = p.copy()
    q.graph.phi.data += 1.0
    assert not np.array_equal(p.graph.phi.data, q.graph.phi.data)


def test_time_keep_zeroes_code(data):
    p = randomized()
    arr = data.arrays().take(np.arange(6))
    keep = np.array([1, 0, 1, 0, 1, 0], dtype=float)
    a, _ = forward_batch(p, arr.x, arr.t, arr.t_max, ForwardOptions(time_keep=keep))
    p.temporal.weight.data += 3.0
    b, _ = forward_batch(p, arr.x, arr.t, arr.t_max, ForwardOptions(time_keep=keep))
    # clips with zeroed codes no longer depend on the temporal encoder
    np.testing.assert_array_equal(a.data[1::2], b.data[1::2])
    assert not np.allclose(a.data[0::2], b.data[0::2])
