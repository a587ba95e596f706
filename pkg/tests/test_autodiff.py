from __future__ import annotations

import math

import numpy as np
import pytest

from eventke.autodiff import ParameterStore, Tape, Tensor, grad_check


def test_tensor_rejects_rank_5():
    with pytest.raises(ValueError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))


def test_softmax_known_values():
    # logits [ln 2, 0] -> probabilities [2/3, 1/3]
    tape = Tape()
    out = tape.masked_softmax(Tensor([math.log(2.0), 0.0]))
    assert np.allclose(out.data, [2.0 / 3.0, 1.0 / 3.0], atol=1e-12)


def test_softmax_sums_to_one_and_is_shift_invariant():
    rng = np.random.default_rng(7)
    for _ in range(50):
        logits = rng.normal(size=rng.integers(1, 12))
        a = Tape().masked_softmax(Tensor(logits))
        b = Tape().masked_softmax(Tensor(logits + 3.7))
        assert abs(a.data.sum() - 1.0) <= 1e-12
        assert np.max(np.abs(a.data - b.data)) <= 1e-12


def test_softmax_empty_set_is_an_error():
    with pytest.raises(ValueError):
        Tape().masked_softmax(Tensor(np.zeros(0)))


def test_circ_corr_worked_example():
    # a=[1,2,3], b=[4,5,6] -> [32, 29, 29]
    out = Tape().circ_corr(Tensor([1.0, 2.0, 3.0]), Tensor([4.0, 5.0, 6.0]))
    assert np.array_equal(out.data, [32.0, 29.0, 29.0])


def test_circ_corr_identity_basis_vector():
    rng = np.random.default_rng(11)
    for d in (2, 3, 8, 17):
        e0 = np.zeros(d)
        e0[0] = 1.0
        b = rng.normal(size=d)
        out = Tape().circ_corr(Tensor(e0), Tensor(b))
        assert np.array_equal(out.data, b)


def test_circ_corr_matches_double_loop():
    rng = np.random.default_rng(13)
    for _ in range(40):
        d = int(rng.integers(2, 33))
        a = rng.normal(size=d)
        b = rng.normal(size=d)
        expect = np.zeros(d)
        for k in range(d):
            for i in range(d):
                expect[k] += a[i] * b[(k + i) % d]
        out = Tape().circ_corr(Tensor(a), Tensor(b))
        assert np.max(np.abs(out.data - expect)) <= 1e-12


def test_conv2d_worked_example():
    # 2x2 image, single 2x2 kernel picking the main diagonal -> [[5]]
    img = Tensor([[1.0, 2.0], [3.0, 4.0]])
    filt = Tensor([[[1.0, 0.0], [0.0, 1.0]]])
    out = Tape().conv2d(img, filt)
    assert out.data.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == 5.0


def test_conv2d_is_cross_correlation_not_flipped():
    img = Tensor([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    filt = Tensor([[[1.0, 2.0], [3.0, 4.0]]])
    out = Tape().conv2d(img, filt)
    # top-left output aligns kernel[0,0] with image[0,0]
    assert out.data[0, 0, 0] == 1.0
    assert out.data[0, 0, 1] == 0.0


def test_conv2d_kernel_must_fit():
    with pytest.raises(ValueError):
        Tape().conv2d(Tensor(np.zeros((2, 2))), Tensor(np.zeros((1, 3, 3))))


def test_sigmoid_backward_hand_value():
    # loss = sigmoid(w * x) at w=0, x=1: d/dw = 0.25
    tape = Tape()
    w = Tensor([0.0])
    x = Tensor([1.0])
    loss = tape.tensor_sum(tape.sigmoid(tape.dot(w, x)))
    tape.backward(loss)
    assert abs(w.grad[0] - 0.25) <= 1e-15


def test_relu_subgradient_at_zero_is_one():
    for op, extra in ((Tape.relu, ()), (Tape.leaky_relu, (0.2,))):
        tape = Tape()
        x = Tensor([0.0])
        y = op(tape, x, *extra)
        loss = tape.tensor_sum(y)
        tape.backward(loss)
        assert x.grad[0] == 1.0


def test_bce_known_values():
    tape = Tape()
    scores = Tensor([0.0, 0.0])
    loss = tape.bce_with_logits(scores, np.array([1.0, 0.0]))
    assert abs(loss.data - 2.0 * math.log(2.0)) <= 1e-12

    # saturated correct predictions contribute almost nothing
    sat = Tape().bce_with_logits(Tensor([20.0, -20.0]), np.array([1.0, 0.0]))
    assert sat.data < 1e-8


def test_bce_clamp_keeps_loss_finite():
    loss = Tape().bce_with_logits(Tensor([500.0]), np.array([0.0]))
    assert np.isfinite(loss.data)
    # bound is -log(1e-12) up to float rounding of the clamp endpoint
    assert loss.data <= -math.log(1e-12) + 1e-4


def test_cross_entropy_matches_log_softmax():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=5)
    loss = Tape().cross_entropy(Tensor(logits), 2)
    probs = np.exp(logits) / np.exp(logits).sum()
    assert abs(loss.data - (-math.log(probs[2]))) <= 1e-12


def test_backward_requires_scalar():
    tape = Tape()
    x = Tensor([1.0, 2.0])
    y = tape.relu(x)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_lookup_out_of_range():
    table = Tensor(np.zeros((3, 2)))
    with pytest.raises(IndexError):
        Tape().lookup(table, 3)


def _loss_through_all_ops(params: dict[str, Tensor]) -> tuple[Tape, Tensor]:
    """One scalar loss exercising every op at a non-kink point."""
    tape = Tape()
    table, w, wide, filt, proj = (
        params["table"],
        params["w"],
        params["wide"],
        params["filt"],
        params["proj"],
    )
    a = tape.lookup(table, 0)
    b = tape.lookup(table, 1)
    c = tape.lookup(table, 2)
    cat = tape.concat(a, b)
    hid = tape.leaky_relu(tape.affine(w, cat), 0.2)
    att = tape.masked_softmax(tape.affine(wide, cat))
    rows = tape.stack_rows([hid, tape.relu(c)])
    mixed = tape.add(tape.weighted_sum(att, rows), tape.mean_rows(rows))
    phi = tape.circ_corr(mixed, tape.scale(c, 0.5))
    img = tape.reshape2d(phi, 2, 2)
    conv = tape.conv2d(img, filt)
    feat = tape.flatten(conv)
    scores = tape.affine(proj, tape.sigmoid(feat))
    bce = tape.bce_with_logits(scores, np.array([1.0, 0.0, 1.0]))
    ce = tape.cross_entropy(scores, 1)
    return tape, tape.add(bce, ce)


def _all_op_params() -> dict[str, Tensor]:
    rng = np.random.default_rng(21)
    return {
        "table": Tensor(rng.normal(size=(3, 4)) + 0.3),
        "w": Tensor(rng.normal(size=(4, 8)) * 0.4),
        "wide": Tensor(rng.normal(size=(2, 8)) * 0.4),
        "filt": Tensor(rng.normal(size=(2, 2, 2)) * 0.5),
        "proj": Tensor(rng.normal(size=(3, 2)) * 0.5),
    }


def test_grad_check_every_op():
    params = _all_op_params()
    err = grad_check(lambda: _loss_through_all_ops(params), params.values())
    assert err < 1e-6


def test_replay_is_deterministic():
    params = _all_op_params()
    tape1, loss1 = _loss_through_all_ops(params)
    tape1.backward(loss1)
    grads1 = {k: v.grad.copy() for k, v in params.items()}
    for v in params.values():
        v.zero_grad()
    tape2, loss2 = _loss_through_all_ops(params)
    tape2.backward(loss2)
    assert loss1.data == loss2.data
    for k, v in params.items():
        assert np.array_equal(grads1[k], v.grad)


def test_add_n_matches_chained_add():
    rng = np.random.default_rng(5)
    xs = [Tensor(rng.normal(size=4)) for _ in range(5)]
    tape = Tape()
    total = tape.add_n(xs)
    loss = tape.dot(total, total)
    tape.backward(loss)
    grads = [x.grad.copy() for x in xs]

    for x in xs:
        x.zero_grad()
    tape2 = Tape()
    acc = xs[0]
    for x in xs[1:]:
        acc = tape2.add(acc, x)
    loss2 = tape2.dot(acc, acc)
    tape2.backward(loss2)
    assert loss.data == loss2.data
    for g, x in zip(grads, xs):
        assert np.array_equal(g, x.grad)


def test_gradients_accumulate_across_reuse():
    # x used twice: d(2x)/dx = 2 exactly
    tape = Tape()
    x = Tensor([3.0])
    loss = tape.tensor_sum(tape.add(x, x))
    tape.backward(loss)
    assert x.grad[0] == 2.0


def test_gather_rows_values_and_repeated_index_grads():
    table = Tensor(np.arange(12.0).reshape(4, 3))
    tape = Tape()
    picked = tape.gather_rows(table, [2, 0, 2])
    assert np.array_equal(picked.data, table.data[[2, 0, 2]])
    loss = tape.tensor_sum(picked)
    tape.backward(loss)
    # row 2 was used twice, row 1 never
    assert np.array_equal(table.grad, [[1.0] * 3, [0.0] * 3, [2.0] * 3, [0.0] * 3])

    with pytest.raises(IndexError):
        Tape().gather_rows(table, [4])


def test_rows_affine_matches_per_row_affine():
    rng = np.random.default_rng(17)
    x = Tensor(rng.normal(size=(5, 3)))
    w = Tensor(rng.normal(size=(4, 3)))
    out = Tape().rows_affine(x, w)
    for i in range(5):
        row = Tape().affine(w, Tensor(x.data[i]))
        assert np.max(np.abs(out.data[i] - row.data)) <= 1e-12


def test_segment_sum_and_mean_oracle():
    x = Tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    seg = [1, 0, 1]
    summed = Tape().segment_sum(x, seg, 2)
    assert np.array_equal(summed.data, [[3.0, 4.0], [6.0, 8.0]])
    # absent segment sums to zero but is an error for the mean
    padded = Tape().segment_sum(x, seg, 3)
    assert np.array_equal(padded.data[2], [0.0, 0.0])
    with pytest.raises(ValueError):
        Tape().segment_mean(x, seg, 3)
    mean = Tape().segment_mean(x, seg, 2)
    assert np.array_equal(mean.data, [[3.0, 4.0], [3.0, 4.0]])


def test_segment_softmax_matches_blockwise_masked_softmax():
    rng = np.random.default_rng(23)
    sizes = [1, 4, 2, 3]
    seg = np.repeat(np.arange(len(sizes)), sizes)
    logits = rng.normal(size=seg.size)
    out = Tape().segment_softmax(Tensor(logits), seg, len(sizes))
    lo = 0
    for s, width in enumerate(sizes):
        block = Tape().masked_softmax(Tensor(logits[lo : lo + width]))
        assert np.max(np.abs(out.data[lo : lo + width] - block.data)) <= 1e-12
        lo += width

    with pytest.raises(ValueError):
        Tape().segment_softmax(Tensor(logits), seg, len(sizes) + 1)


def test_replace_rows_keeps_other_rows_bitwise():
    base = Tensor(np.random.default_rng(2).normal(size=(4, 3)))
    rows = Tensor(np.ones((2, 3)))
    tape = Tape()
    out = tape.replace_rows(base, [3, 1], rows)
    assert np.array_equal(out.data[[0, 2]], base.data[[0, 2]])
    assert np.all(out.data[[3, 1]] == 1.0)
    loss = tape.tensor_sum(out)
    tape.backward(loss)
    assert np.array_equal(base.grad, [[1.0] * 3, [0.0] * 3, [1.0] * 3, [0.0] * 3])
    assert np.all(rows.grad == 1.0)

    with pytest.raises(ValueError):
        Tape().replace_rows(base, [1, 1], rows)


def test_circ_corr_rows_matches_per_vector_op():
    rng = np.random.default_rng(29)
    for d in (1, 2, 5, 16):
        a = rng.normal(size=(6, d))
        b = rng.normal(size=(6, d))
        out = Tape().circ_corr_rows(Tensor(a), Tensor(b))
        for i in range(6):
            one = Tape().circ_corr(Tensor(a[i]), Tensor(b[i]))
            assert np.max(np.abs(out.data[i] - one.data)) <= 1e-12


def _loss_through_batched_ops(params: dict[str, Tensor]) -> tuple[Tape, Tensor]:
    tape = Tape()
    table, w = params["btable"], params["bw"]
    seg = [0, 1, 1, 2]
    picked = tape.gather_rows(table, [0, 2, 1, 2])
    mapped = tape.rows_affine(picked, w)
    logits = tape.flatten(tape.rows_affine(picked, params["battn"]))
    alpha = tape.segment_softmax(logits, seg, 3)
    pooled = tape.segment_sum(tape.scale_rows(mapped, alpha), seg, 3)
    mixed = tape.concat_cols(pooled, tape.segment_mean(picked, seg, 3))
    phi = tape.circ_corr_rows(mixed, tape.relu(mixed))
    patched = tape.replace_rows(phi, [1], tape.gather_rows(mixed, [0]))
    return tape, tape.dot(tape.flatten(patched), tape.flatten(patched))


def test_grad_check_every_batched_op():
    rng = np.random.default_rng(31)
    params = {
        "btable": Tensor(rng.normal(size=(3, 4)) + 0.2),
        "bw": Tensor(rng.normal(size=(4, 4)) * 0.5),
        "battn": Tensor(rng.normal(size=(1, 4)) * 0.5),
    }
    err = grad_check(lambda: _loss_through_batched_ops(params), params.values())
    assert err < 1e-6


def test_parameter_store_basics():
    store = ParameterStore()
    a = store.add("a", np.ones((2, 3)))
    store.add("b", np.zeros(5))
    with pytest.raises(ValueError):
        store.add("a", np.zeros(1))
    assert store.parameter_count() == 11
    a.grad += 1.0
    store.zero_grads()
    assert np.all(a.grad == 0.0)
    assert set(store.names()) == {"a", "b"}


def test_parameter_store_state_round_trip():
    store = ParameterStore()
    store.add("w", np.arange(6.0).reshape(2, 3))
    store.slots("w")["m"][...] = 0.5
    arrays = {k: v.copy() for k, v in store.state_arrays().items()}

    other = ParameterStore()
    other.add("w", np.zeros((2, 3)))
    other.load_state_arrays(arrays)
    assert np.array_equal(other["w"].data, np.arange(6.0).reshape(2, 3))
    assert np.all(other.slots("w")["m"] == 0.5)

    bad = ParameterStore()
    bad.add("w", np.zeros((3, 2)))
    with pytest.raises(ValueError):
        bad.load_state_arrays(arrays)
