import struct
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fcsum import model, tensor as tc
from fcsum.corpus import HyperParams
from fcsum.gradcheck import numerical_grad, random_record, rel_error
from fcsum.tensor import Tape


def prefix_for(record, k):
    p = np.zeros(record.summary_ids.shape[0], dtype=np.int64)
    p[:k] = record.summary_ids[:k]
    return p


# -- init ------------------------------------------------------------------------

def test_concat_widths():
    assert model.concat_width(HyperParams(), True, True) == 1024
    assert model.concat_width(HyperParams(), False, False) == 512
    shapes = model.param_shapes(HyperParams(), True, True)
    assert shapes["squash.W"] == (1024, 256)
    assert shapes["out.W"] == (13 * 256, 10908)


def test_single_shared_code_embedding_and_context_gru(tiny_hp):
    shapes = model.param_shapes(tiny_hp, True, True)
    assert [k for k in shapes if "embed" in k] == ["code_embed", "summary_embed", "ast_embed"]
    assert sum(1 for k in shapes if k.startswith("ctx_gru.")) == 9


def test_flags_remove_parameters(tiny_hp):
    plain = set(model.param_shapes(tiny_hp, False, False))
    assert not any(k.startswith(("ast", "ctx")) for k in plain)
    assert set(model.param_shapes(tiny_hp, True, True)) - plain == \
        {"ast_embed"} | {f"ast_gru.{k}" for k in tc.GRU_NAMES} | {f"ctx_gru.{k}" for k in tc.GRU_NAMES}


def test_init_is_seeded(tiny_hp):
    a, b = model.init_model(tiny_hp, seed=3), model.init_model(tiny_hp, seed=3)
    c = model.init_model(tiny_hp, seed=4)
    assert all(a.arrays[k].tobytes() == b.arrays[k].tobytes() for k in a.arrays)
    assert any(a.arrays[k].tobytes() != c.arrays[k].tobytes() for k in a.arrays)


# -- encoders --------------------------------------------------------------------

def test_code_encoder_last_row_is_final_state(tiny_hp, rng):
    P = model.init_model(tiny_hp, seed=0).tensors()
    ids = rng.integers(0, tiny_hp.code_vocab, size=(2, tiny_hp.tdatlen))
    out, state = model.encode_code_text(P, ids)
    assert out.shape == (2, tiny_hp.tdatlen, tiny_hp.rnn_units)
    np.testing.assert_array_equal(out.value[:, -1], state.value)


def test_all_pad_code_gives_deterministic_nonzero_states(tiny_hp):
    params = model.init_model(tiny_hp, seed=0)
    params.arrays["code_gru.b_z"][:] = 0.5
    params.arrays["code_gru.b_h"][:] = 0.3
    ids = np.zeros((2, tiny_hp.tdatlen), dtype=np.int64)
    out, _ = model.encode_code_text(params.tensors(), ids)
    np.testing.assert_array_equal(out.value[0], out.value[1])
    assert np.abs(out.value).sum() > 0


def test_code_embedding_gradient_only_on_used_rows(tiny_hp):
    params = model.init_model(tiny_hp, False, False, seed=0, dtype=np.float64)
    P = params.tensors()
    ids = np.array([[4, 7, 4, 9, 9, 9]])
    with Tape() as tape:
        out, _ = model.encode_code_text(P, ids)
        loss = tc.sum_all(out)
    g = tc.backward(tape, loss, P)["code_embed"]
    used = np.flatnonzero(np.abs(g).sum(axis=1))
    assert set(used) == {4, 7, 9}

    table = params.arrays["code_embed"]

    def f():
        return float(model.encode_code_text(params.tensors(), ids)[0].value.sum())

    rows = table[[4, 7, 9]]
    num = numerical_grad(lambda: (table.__setitem__([4, 7, 9], rows), f())[1], rows)
    assert rel_error(g[[4, 7, 9]], num) < 1e-4


def test_context_encoder_weight_sharing(tiny_hp, rng):
    P = model.init_model(tiny_hp, seed=1).tensors()
    fc = rng.integers(2, tiny_hp.code_vocab, size=(1, tiny_hp.n, tiny_hp.m))
    fc[0, 1] = fc[0, 0]
    fc[0, 2] = 0
    senc = model.encode_file_context(P, fc)
    assert senc.shape == (1, tiny_hp.n, tiny_hp.rnn_units)
    np.testing.assert_array_equal(senc.value[0, 0], senc.value[0, 1])
    fc2 = np.zeros((2, tiny_hp.n, tiny_hp.m), dtype=np.int64)
    pad = model.encode_file_context(P, fc2).value
    assert np.all(pad == pad[0, 0])


def test_context_encoder_full_scale_shape():
    hp = HyperParams()
    P = {"code_embed": tc.constant(np.zeros((hp.code_vocab, 4), np.float32))}
    for k in tc.GRU_NAMES:
        shape = (4, hp.rnn_units) if k[0] == "W" else (hp.rnn_units,) * (2 if k[0] == "U" else 1)
        P[f"ctx_gru.{k}"] = tc.constant(np.zeros(shape, np.float32))
    senc = model.encode_file_context(P, np.zeros((1, hp.n, hp.m), dtype=np.int64))
    assert senc.shape[1:] == (20, 256)


# -- attention -------------------------------------------------------------------

def test_attend_single_position():
    dec = tc.constant(np.random.default_rng(0).normal(size=(4, 3)))
    enc = tc.constant(np.array([[1.0, 2.0, 3.0]]))
    w, ctx = model.attend(dec, enc)
    np.testing.assert_array_equal(w.value, np.ones((4, 1)))
    np.testing.assert_allclose(ctx.value, np.tile(enc.value, (4, 1)))


def test_attend_orthogonal_row_is_uniform():
    dec = tc.constant(np.array([[0.0, 0.0, 1.0]]))
    enc = tc.constant(np.array([[1.0, 0, 0], [0, 1.0, 0], [2.0, -1.0, 0]]))
    w, _ = model.attend(dec, enc)
    np.testing.assert_allclose(w.value, np.full((1, 3), 1 / 3))


def test_attend_shape_mismatch():
    with pytest.raises(tc.ShapeError):
        model.attend(tc.constant(np.zeros((2, 3))), tc.constant(np.zeros((4, 5))))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 10_000))
def test_attend_context_is_convex_combination(c, p, h, seed):
    rng = np.random.default_rng(seed)
    enc = rng.normal(size=(p, h))
    w, ctx = model.attend(tc.constant(rng.normal(size=(c, h))), tc.constant(enc))
    np.testing.assert_allclose(w.value.sum(axis=1), 1, atol=1e-5)
    assert np.all(ctx.value >= enc.min(axis=0) - 1e-9)
    assert np.all(ctx.value <= enc.max(axis=0) + 1e-9)


# -- forward ----------------------------------------------------------------------

@pytest.mark.parametrize("use_ast, use_fc", [(False, False), (True, False), (False, True), (True, True)])
def test_forward_outputs_and_attention(tiny_hp, use_ast, use_fc):
    params = model.init_model(tiny_hp, use_ast, use_fc, seed=2)
    rec = random_record(tiny_hp, np.random.default_rng(1))
    out = model.forward(params, rec, prefix_for(rec, 2))
    assert out.probs.shape == (tiny_hp.summary_vocab,)
    assert abs(out.probs.sum() - 1) < 1e-5
    att = out.attention
    assert att.tattn.shape == (tiny_hp.comlen, tiny_hp.tdatlen)
    assert (att.ast_attn is not None) == use_ast and (att.sattn is not None) == use_fc
    for m in (att.tattn, att.ast_attn, att.sattn):
        if m is not None:
            np.testing.assert_allclose(m.sum(axis=1), 1, atol=1e-5)
            assert m.min() >= 0 and m.max() <= 1
    if use_fc:
        assert att.sattn.shape == (tiny_hp.comlen, tiny_hp.n)


def test_plain_variant_ignores_ast_and_context(tiny_hp, rng):
    params = model.init_model(tiny_hp, False, False, seed=2)
    rec = random_record(tiny_hp, rng)
    other = replace(rec, sbt_ids=rec.sbt_ids[::-1].copy(), fc=np.zeros_like(rec.fc))
    a = model.forward(params, rec, prefix_for(rec, 3)).probs
    b = model.forward(params, other, prefix_for(rec, 3)).probs
    np.testing.assert_array_equal(a, b)


def test_forward_deterministic(tiny_hp, rng):
    params = model.init_model(tiny_hp, seed=2)
    rec = random_record(tiny_hp, rng)
    a = model.forward(params, rec, prefix_for(rec, 3))
    b = model.forward(params, rec, prefix_for(rec, 3))
    assert a.probs.tobytes() == b.probs.tobytes()
    assert a.attention.sattn.tobytes() == b.attention.sattn.tobytes()


def test_batched_forward_matches_single(tiny_hp, rng):
    params = model.init_model(tiny_hp, seed=2)
    recs = [random_record(tiny_hp, rng, f"r{i}") for i in range(2)]
    batch = [recs[0], recs[1], recs[0]]
    prefixes = np.stack([prefix_for(recs[0], 1), prefix_for(recs[1], 2), prefix_for(recs[0], 3)])
    probs, _ = model.forward_batch(params, params.tensors(), batch, prefixes)
    for i, r in enumerate(batch):
        single = model.forward(params, r, prefixes[i]).probs
        np.testing.assert_allclose(probs.value[i], single, rtol=1e-5, atol=1e-7)


def test_decoder_starts_from_code_state(tiny_hp, rng):
    # changing only the code ids changes the output even when the decoder saw the same prefix
    params = model.init_model(tiny_hp, False, False, seed=2)
    rec = random_record(tiny_hp, rng)
    a = model.forward(params, rec, prefix_for(rec, 1)).probs
    b = model.forward(params, model.ablate_code_text(rec), prefix_for(rec, 1)).probs
    assert not np.array_equal(a, b)


def test_prefix_length_checked(tiny_hp, rng):
    params = model.init_model(tiny_hp, seed=0)
    rec = random_record(tiny_hp, rng)
    with pytest.raises(tc.ShapeError):
        model.forward(params, rec, np.zeros(tiny_hp.comlen + 1, dtype=np.int64))


def test_gradient_keys_follow_flags(tiny_hp, rng):
    for use_ast, use_fc in [(False, False), (True, True)]:
        params = model.init_model(tiny_hp, use_ast, use_fc, seed=0)
        P = params.tensors()
        rec = random_record(tiny_hp, rng)
        with Tape() as tape:
            probs, _ = model.forward_batch(params, P, [rec], prefix_for(rec, 2)[None])
            loss = tc.cross_entropy(probs, np.array([5]))
        grads = tc.backward(tape, loss, P)
        assert set(grads) == set(model.param_shapes(tiny_hp, use_ast, use_fc))


def test_context_path_updates_shared_embedding(tiny_hp, rng):
    params = model.init_model(tiny_hp, False, True, seed=0, dtype=np.float64)
    rec = random_record(tiny_hp, rng)
    token = int(rec.fc[0, 0])
    rec = replace(rec, code_ids=np.full_like(rec.code_ids, 1))
    rec.fc[:] = token  # token reaches the model through the context path only
    before = model.encode_code_text(params.tensors(), np.array([[token]]))[0].value.copy()
    P = params.tensors()
    with Tape() as tape:
        probs, _ = model.forward_batch(params, P, [rec], prefix_for(rec, 2)[None])
        loss = tc.cross_entropy(probs, np.array([5]))
    grads = tc.backward(tape, loss, P)
    assert np.abs(grads["code_embed"][token]).sum() > 0
    tc.Adam(lr=0.01).step(params.arrays, grads)
    after = model.encode_code_text(params.tensors(), np.array([[token]]))[0].value
    assert not np.array_equal(before, after)


# -- ablation --------------------------------------------------------------------

def test_ablation_is_idempotent_and_local(tiny_hp, rng):
    rec = random_record(tiny_hp, rng)
    once = model.ablate_code_text(rec)
    twice = model.ablate_code_text(once)
    assert not once.code_ids.any()
    np.testing.assert_array_equal(once.code_ids, twice.code_ids)
    for f in ("summary_ids", "sbt_ids", "fc"):
        assert getattr(once, f).tobytes() == getattr(rec, f).tobytes()
    assert rec.code_ids.any()


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip(tiny_hp, rng, tmp_path):
    params = model.init_model(tiny_hp, True, False, seed=5)
    path = tmp_path / "m.fcsm"
    model.save_checkpoint(params, path)
    back = model.load_checkpoint(path, expect_hp=tiny_hp)
    assert (back.use_ast, back.use_fc) == (True, False)
    rec = random_record(tiny_hp, rng)
    a = model.forward(params, rec, prefix_for(rec, 2)).probs
    b = model.forward(back, rec, prefix_for(rec, 2)).probs
    assert a.tobytes() == b.tobytes()
    assert path.read_bytes()[:4] == b"FCSM"


def test_checkpoint_rejections(tiny_hp, tmp_path):
    params = model.init_model(tiny_hp, seed=5)
    path = tmp_path / "m.fcsm"
    model.save_checkpoint(params, path)
    data = path.read_bytes()
    bad = tmp_path / "bad.fcsm"
    bad.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(model.CheckpointError, match="magic"):
        model.load_checkpoint(bad)
    bad.write_bytes(data[:4] + struct.pack("<I", 99) + data[8:])
    with pytest.raises(model.CheckpointError, match="version"):
        model.load_checkpoint(bad)
    with pytest.raises(model.CheckpointError, match="do not match"):
        model.load_checkpoint(path, expect_hp=tiny_hp.replace(rnn_units=7))
    bad.write_bytes(data[:-10])
    with pytest.raises(model.CheckpointError):
        model.load_checkpoint(bad)
