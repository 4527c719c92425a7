import numpy as np
import pytest

from oracles import lif_loops, unrolled_snn_loss
from spikedistill import ann, network as nw, snn
from spikedistill.encoding import encode_batch


def toy_ckpt(w1, w2, theta):
    spec = nw.NetworkSpec((nw.linear(w1.shape[0]), nw.relu(), nw.linear(w2.shape[0])),
                          (w1.shape[1],), w2.shape[0], "student-snn")
    return nw.Checkpoint(spec, [{"weight": w1}, {}, {"weight": w2}], thresholds=[theta])


def test_lif_hand_sequence():
    # theta 1, no leak, constant input 0.6
    currents = np.full((5, 1), 0.6)
    spikes, membrane = snn.lif_scan(currents, 1.0, 1.0)
    np.testing.assert_allclose(membrane[:, 0], [0.6, 1.2, 0.8, 1.4, 1.0])
    np.testing.assert_array_equal(spikes[:, 0], [0, 1, 0, 1, 0])


def test_lif_step_matches_scan_and_loops():
    rng = np.random.default_rng(0)
    for trial in range(100):
        leak = float(rng.uniform(0.5, 1.0))
        theta = float(rng.uniform(0.2, 2.0))
        currents = rng.uniform(-0.5, 1.5, size=(int(rng.integers(1, 12)), 4))
        volts, spikes = lif_loops(currents, leak, theta)
        got_s, got_v = snn.lif_scan(currents, leak, theta)
        np.testing.assert_array_equal(got_s, spikes)
        np.testing.assert_allclose(got_v, volts, atol=1e-12)
        v, o = np.zeros(4), np.zeros(4)
        for t in range(len(currents)):
            v, o = snn.lif_step(v, o, currents[t], leak, theta)
            np.testing.assert_array_equal(v, got_v[t])


def test_surrogate_shape():
    v = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 3.0])
    np.testing.assert_allclose(snn.surrogate_grad(v, 1.0, 0.3), 0.3 * np.array([0, 0.5, 1, 0.5, 0, 0]))
    with pytest.raises(snn.SnnError):
        snn.surrogate_grad(v, 0.0)


def test_config_validation():
    with pytest.raises(snn.SnnError):
        snn.SnnConfig(leak=0.0)
    with pytest.raises(snn.SnnError):
        snn.SnnConfig(gamma=1.5)
    with pytest.raises(snn.SnnError):
        snn.SnnConfig(time_steps=0)


def _bptt_trial(rng, reset_grad=True, leak_grad=True, with_spike_loss=False):
    steps = int(rng.integers(1, 6))
    n_in, hidden, k = int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(2, 4))
    theta = float(rng.choice([0.5, 0.75, 1.0, 1.25]))
    leak = float(rng.choice([1.0, 0.875, 0.5]))
    gamma = 0.3
    x = rng.uniform(0.0, 1.0, size=(steps, n_in))
    w1 = rng.uniform(-0.5, 1.5, size=(hidden, n_in))
    w2 = rng.standard_normal((k, hidden))
    label = int(rng.integers(k))
    weights = rng.standard_normal((steps, hidden)) if with_spike_loss else None

    loss, g1, g2 = unrolled_snn_loss(x, w1, w2, label, theta, leak, gamma, reset_grad, leak_grad,
                                     weights)
    ckpt = toy_ckpt(w1, w2, theta)
    cfg = snn.SnnConfig(leak=leak, gamma=gamma, time_steps=steps, reset_grad=reset_grad,
                        leak_grad=leak_grad)
    _, rec = snn.snn_forward(ckpt, x[:, None, :], cfg)
    logits = rec.output_potential[-1]
    ce, grad = ann.cross_entropy(logits, np.array([label]))
    extra = {0: weights[:, None, :]} if weights is not None else None
    grads = snn.snn_backward(rec, ckpt, cfg, grad, spike_grads=extra)
    if weights is not None:
        ce += float((weights * rec.spikes[0][:, 0]).sum())
    assert abs(ce - loss) < 1e-10
    return np.abs(grads[0]["weight"] - g1).max(), np.abs(grads[2]["weight"] - g2).max()


@pytest.mark.parametrize("reset_grad,leak_grad,spike_loss", [
    (True, True, False), (True, True, True), (False, True, False), (True, False, True),
])
def test_bptt_matches_unrolled_oracle(reset_grad, leak_grad, spike_loss):
    rng = np.random.default_rng(hash((reset_grad, leak_grad, spike_loss)) % 2**32)
    for _ in range(50):
        e1, e2 = _bptt_trial(rng, reset_grad, leak_grad, spike_loss)
        assert e1 < 1e-10 and e2 < 1e-10


def test_membrane_grads_enter_dv():
    rng = np.random.default_rng(1)
    w1, w2 = rng.uniform(0, 1, (3, 2)), rng.standard_normal((2, 3))
    ckpt = toy_ckpt(w1, w2, 1.0)
    cfg = snn.SnnConfig(time_steps=4)
    x = rng.uniform(0, 1, (4, 1, 2))
    _, rec = snn.snn_forward(ckpt, x, cfg)
    zero = np.zeros((1, 2))
    extra_v = rng.standard_normal((4, 1, 3))
    grads = snn.snn_backward(rec, ckpt, cfg, zero, membrane_grads={0: extra_v})
    # with no output gradient and leak 1 the current gradient is a reverse cumulative sum
    # of extra_v routed through the surrogate and reset; check the last step directly
    g_current = snn._lif_backward(rec, 0, np.zeros_like(rec.membrane[0]), None, extra_v, cfg)
    np.testing.assert_allclose(g_current[-1], extra_v[-1])
    np.testing.assert_allclose(grads[0]["weight"], np.einsum("tnh,tni->hi", g_current, x))


def test_gamma_zero_blocks_spike_path():
    rng = np.random.default_rng(2)
    w1, w2 = rng.uniform(0, 1, (4, 3)), rng.standard_normal((3, 4))
    ckpt = toy_ckpt(w1, w2, 0.75)
    cfg = snn.SnnConfig(gamma=0.0, time_steps=5)
    _, rec = snn.snn_forward(ckpt, rng.uniform(0, 1, (5, 2, 3)), cfg)
    grads = snn.snn_backward(rec, ckpt, cfg, rng.standard_normal((2, 3)),
                             spike_grads={0: rng.standard_normal((2, 4))})
    assert np.all(grads[0]["weight"] == 0)
    assert np.any(grads[2]["weight"] != 0)


def test_single_step_linear_snn_equals_ann_logits():
    rng = np.random.default_rng(3)
    spec = nw.NetworkSpec((nw.flatten(), nw.linear(10)), (1, 4, 4), 10, "intermediate")
    ann_ckpt = nw.Checkpoint(spec, nw.init_params(spec, 0))
    snn_ckpt = nw.Checkpoint(spec.with_role("student-snn"), ann_ckpt.params, thresholds=[])
    x = rng.uniform(-1, 1, (6, 1, 4, 4)).astype(np.float32)
    train = encode_batch(x, 1, "direct")
    _, rec = snn.snn_forward(snn_ckpt, train, snn.SnnConfig(time_steps=1))
    logits, _ = ann.ann_forward(ann_ckpt, x)
    np.testing.assert_array_equal(rec.output_potential[-1], logits)


def test_forward_rejects_wrong_role_and_steps():
    spec = nw.mlp(hidden=(4,))
    ann_ckpt = nw.Checkpoint(spec, nw.init_params(spec, 0))
    with pytest.raises(snn.SnnError):
        snn.snn_forward(ann_ckpt, np.zeros((2, 1, 28, 28)), snn.SnnConfig(time_steps=2))
    s = nw.Checkpoint(spec.with_role("student-snn"), ann_ckpt.params, thresholds=[1.0])
    with pytest.raises(snn.SnnError, match="steps"):
        snn.snn_forward(s, np.zeros((3, 1, 28, 28)), snn.SnnConfig(time_steps=2))
    with pytest.raises(snn.SnnError, match="shape"):
        snn.snn_forward(s, np.zeros((2, 1, 27, 28)), snn.SnnConfig(time_steps=2))


def test_last_spike_time_and_counts():
    rec = snn.SpikeRecord(time_steps=4, spikes={0: np.array([[1.0, 0], [0, 0], [1, 0], [0, 0]])})
    np.testing.assert_array_equal(rec.last_spike_time(0), [3, 0])
    np.testing.assert_array_equal(rec.last_spike_time(0, 2), [1, 0])
    np.testing.assert_array_equal(rec.spike_counts(0), [2, 0])
    with pytest.raises(KeyError):
        rec.last_spike_time(5)


def test_simulate_chunks_do_not_change_results():
    spec = nw.three_conv_two_linear(channels=(2, 3, 3), hidden=8).with_role("student-snn")
    ckpt = nw.Checkpoint(spec, nw.init_params(spec, 1), thresholds=[0.5, 0.5, 0.5, 0.5])
    x = np.random.default_rng(4).uniform(-1, 1, (5, 1, 28, 28)).astype(np.float32)
    cfg = snn.SnnConfig(time_steps=6)
    whole = snn.simulate(ckpt, x, cfg, seed=3)
    pieces = snn.simulate(ckpt, x, cfg, seed=3, budget=1)
    np.testing.assert_array_equal(whole, pieces)
    np.testing.assert_allclose(whole.sum(axis=1), 1.0)


def test_readout_steps_equal_shorter_runs():
    spec = nw.mlp(hidden=(16,)).with_role("student-snn")
    ckpt = nw.Checkpoint(spec, nw.init_params(spec, 2), thresholds=[0.5])
    x = np.random.default_rng(5).uniform(-1, 1, (4, 1, 28, 28)).astype(np.float32)
    many = snn.simulate(ckpt, x, snn.SnnConfig(time_steps=20), seed=1, readout_steps=[5, 20])
    np.testing.assert_array_equal(many[5], snn.simulate(ckpt, x, snn.SnnConfig(time_steps=5), seed=1))
    with pytest.raises(snn.SnnError):
        snn.simulate(ckpt, x, snn.SnnConfig(time_steps=5), readout_steps=[6])
