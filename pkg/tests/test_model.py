import numpy as np
import pytest

from lens_lab import model as M
from lens_lab.corpus import BOS, EOS, PAD
from lens_lab.errors import ArgumentError, FormatError
from lens_lab.model import ModelConfig, ToyTransformer

from oracles import rel_error


def _small(trainable_from=0, seed=0, vocab=11, ctx=8):
    cfg = ModelConfig(vocab, d_model=8, n_layers=2, n_heads=2, d_ff=16, ctx=ctx, init_std=0.4, seed=seed, dtype="float64")
    m = ToyTransformer(cfg, trainable_from=trainable_from)
    # non-trivial norm parameters so their gradients are exercised too
    rng = np.random.default_rng(seed + 100)
    for k, v in m.params.items():
        if k.endswith(("_g", "_b", "b1", "b2")):
            v += rng.normal(scale=0.3, size=v.shape)
    return m


def _tokens(rng, b, t, vocab=11):
    x = rng.integers(3, vocab, size=(b, t))
    x[:, 0] = BOS
    x[1, t - 2 :] = PAD
    return x


def _numeric_grads(model, f, names, h=1e-6):
    out = {}
    for name in names:
        p = model.params[name]
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            fp = f()
            p[i] = old - h
            fm = f()
            p[i] = old
            g[i] = (fp - fm) / (2 * h)
        out[name] = g
    return out


def test_param_count_matches_closed_form():
    cfg = ModelConfig(195)
    m = ToyTransformer(cfg)
    assert m.n_params() == cfg.n_params() == 147520
    assert list(m.params) == M.param_names(4)


def test_shapes_and_single_bos():
    m = _small()
    tr = m.forward([BOS])
    assert tr.logits.shape == (1, 1, 11) and np.all(np.isfinite(tr.logits))
    assert tr.last.shape == (2, 1, 8) and len(tr.hidden) == 2
    with pytest.raises(ArgumentError):
        m.forward(np.zeros((1, 9), dtype=int))
    with pytest.raises(ArgumentError):
        m.forward([[0, 11]])


def test_causality_and_determinism():
    m = _small()
    rng = np.random.default_rng(0)
    x = rng.integers(3, 11, size=(2, 6))
    a = m.forward(x[:, :4]).logits
    b = m.forward(x).logits
    assert np.allclose(a, b[:, :4], atol=1e-12)
    assert np.array_equal(m.forward(x).logits, b)


def test_last_token_is_last_non_pad_position():
    m = _small()
    tr = m.forward([[BOS, 5, 6, PAD, PAD]])
    assert tr.last_pos.tolist() == [2]
    assert np.array_equal(tr.last[1][0], tr.hidden[1][0, 2])
    assert np.allclose(tr.last[1][0], m.forward([[BOS, 5, 6]]).last[1][0], atol=1e-12)


def test_fresh_init_cross_entropy_near_uniform():
    cfg = ModelConfig(195, dtype="float64")
    m = ToyTransformer(cfg)
    rng = np.random.default_rng(1)
    x = rng.integers(3, 195, size=(16, 32))
    assert abs(m.lm_loss(x) / np.log(195) - 1.0) < 0.05


def test_lm_gradient_check():
    m = _small(trainable_from=0)
    x = _tokens(np.random.default_rng(2), 3, 6)
    loss, grads = m.backward_lm(x)
    assert loss >= 0
    num = _numeric_grads(m, lambda: m.lm_loss(x), M.param_names(2))
    worst = max(rel_error(grads[k], num[k]) for k in num)
    assert worst <= 1e-4, worst


def test_lens_gradient_check():
    m = _small(trainable_from=0)
    rng = np.random.default_rng(3)
    x = _tokens(rng, 3, 6)
    gl = {0: rng.normal(size=(3, 8)), 1: rng.normal(size=(3, 8))}

    def f():
        tr = m.forward(x, with_logits=False)
        return float(sum(np.sum(tr.last[l] * gl[l]) for l in gl))

    grads = m.backward_lens(m.forward(x, keep_cache=True, with_logits=False), gl)
    num = _numeric_grads(m, f, [k for k in M.param_names(2) if not k.startswith("lnf")])
    worst = max(rel_error(grads[k], num[k]) for k in num)
    assert worst <= 1e-4, worst
    assert "lnf_g" not in grads


def test_frozen_layers_receive_no_gradient():
    m = _small(trainable_from=1)
    x = _tokens(np.random.default_rng(4), 3, 6)
    _, grads = m.backward_lm(x)
    assert set(grads) == set(m.trainable_names())
    assert not any(k.startswith(("h0.", "wte", "wpe")) for k in grads)
    tr = m.forward(x, keep_cache=True, with_logits=False)
    with pytest.raises(ArgumentError):
        m.backward_lens(tr, {0: np.ones((3, 8))})
    zero = m.backward_lens(tr, {1: np.zeros((3, 8))})
    assert all(not np.any(v) for v in zero.values())
    m.trainable_from = 2
    assert m.backward_lens(tr, {1: np.zeros((3, 8))}) == {}


def test_all_pad_batch_rejected():
    m = _small()
    with pytest.raises(ArgumentError):
        m.backward_lm([[BOS, PAD, PAD]])


def test_overfit_one_sequence():
    from lens_lab.optim import Adam

    cfg = ModelConfig(20, d_model=16, n_layers=1, n_heads=2, d_ff=32, ctx=12, seed=0)
    m = ToyTransformer(cfg, trainable_from=0)
    x = np.array([[BOS, 5, 9, 3, 17, 4, 4, 12, 8, EOS]])
    opt = Adam(m.params)
    for step in range(2000):
        loss, grads = m.backward_lm(x)
        if loss < 0.1:
            break
        opt.step(grads, 1e-2)
    assert loss < 0.1 and step < 2000


def _chain_model(successor):
    # one layer, attention switched off, the MLP writes the successor's embedding
    # direction into the residual stream; the tied head then picks it
    V = D = 8
    cfg = ModelConfig(V, d_model=D, n_layers=1, n_heads=1, d_ff=D, ctx=8, dtype="float64")
    p = ToyTransformer(cfg).params
    for k in p:
        p[k][...] = 0.0
    p["wte"][...] = 3.0 * np.eye(V)
    p["h0.ln1_g"][...] = p["h0.ln2_g"][...] = p["lnf_g"][...] = 1.0
    p["h0.w1"][...] = np.eye(D)
    p["h0.b1"][...] = -1.0
    for src, dst in successor.items():
        p["h0.w2"][src, dst] = 10.0
    return ToyTransformer(cfg, p)


def test_generate_follows_hand_built_chain():
    A, B = 3, 4
    m = _chain_model({BOS: A, A: B, B: A})
    assert m.generate([BOS], 5) == [A, B, A, B, A]
    assert m.generate([BOS], 20) == [A, B, A, B, A, B, A]  # ctx=8 caps the length
    stop = _chain_model({BOS: A, A: B, B: EOS})
    assert stop.generate([BOS], 10) == [A, B, EOS]
    assert stop.generate_batch([[BOS, A], [BOS, B]], 3) == [[B, EOS], [EOS]]


def test_generate_errors_and_determinism():
    m = _small()
    assert m.generate([BOS, 5], 4) == m.generate([BOS, 5], 4)
    with pytest.raises(ArgumentError):
        m.generate([], 3)
    with pytest.raises(ArgumentError):
        m.generate([BOS] * 9, 3)
    with pytest.raises(ArgumentError):
        m.generate_batch([[BOS], [BOS, 5]], 3)


def test_snapshot_is_read_only_and_tracks_reference():
    from lens_lab.optim import Adam

    m = _small(trainable_from=1)
    snap = M.snapshot(m)
    x = [[BOS, 4, 5, 6]]
    assert np.array_equal(M.rep_from_ref(snap, x[0], 1), m.forward(x).last[1][0])
    with pytest.raises(ValueError):
        snap.model.params["h1.wq"][0, 0] = 1.0
    tr = m.forward(x, keep_cache=True, with_logits=False)
    Adam(m.params).step(m.backward_lens(tr, {1: np.ones((1, 8))}), 1e-2)
    assert not np.array_equal(M.rep_from_ref(snap, x[0], 1), m.forward(x).last[1][0])
    assert snap.intact()
    assert m.checksum(m.frozen_names()) == snap.model.checksum(m.frozen_names())


def test_checkpoint_round_trip(tmp_path):
    for dtype in ("float32", "float64"):
        cfg = ModelConfig(30, d_model=8, n_layers=2, n_heads=2, d_ff=16, ctx=8, dtype=dtype)
        m = ToyTransformer(cfg, trainable_from=1)
        path = tmp_path / f"m_{dtype}.ckpt"
        digest = M.save_checkpoint(m, path)
        back = M.load_checkpoint(path)
        assert back.checksum() == m.checksum() and back.config == m.config
        assert back.trainable_from == 1
        x = [[BOS, 5, 6]]
        assert np.array_equal(back.forward(x).last, m.forward(x).last)
        assert len(digest) == 64


def test_checkpoint_corruption_detected(tmp_path):
    m = ToyTransformer(ModelConfig(30, d_model=8, n_layers=1, n_heads=2, d_ff=16, ctx=8))
    path = tmp_path / "m.ckpt"
    M.save_checkpoint(m, path)
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="manifest"):
        M.load_checkpoint(path)
    with pytest.raises(FormatError):
        M.decode_checkpoint(b"NOTACKPT" + bytes(raw[8:]))
    with pytest.raises(FormatError):
        M.decode_checkpoint(bytes(raw[:-3]))


def test_config_validation():
    with pytest.raises(ArgumentError):
        ModelConfig(10, d_model=10, n_heads=4)
    with pytest.raises(ArgumentError):
        ModelConfig(10, dtype="float16")
    with pytest.raises(ArgumentError):
        ToyTransformer(ModelConfig(10, n_layers=2), trainable_from=3)
