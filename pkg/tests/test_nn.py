import numpy as np
import pytest

import gradcheck
from eqd import autodiff as ad
from eqd.autodiff import Tensor
from eqd.errors import ConfigError, PatternMatchesNothing, SequenceTooLong
from eqd.expr import Kind, is_valid_prefix, tokenize
from eqd.nn import (
    EquationModel,
    ModelConfig,
    Vocab,
    decode_step,
    default_freeze_policy,
    freeze,
    generate,
    numeric_triplets,
    pad_batch,
)
from eqd.surrogate import reconstruction_loss

TINY = dict(d_model=8, n_heads=2, n_encoder_layers=1, n_decoder_layers=2, d_ff=16,
            evaluator_hidden=8, value_dim=4, n_memory=2, L=30)


@pytest.fixture
def model():
    return EquationModel.initialize(ModelConfig(**TINY), np.random.default_rng(0))


def test_numeric_triplets():
    s, m, e = numeric_triplets(np.array([3.14, -0.5, 0.0, 12345.0]))
    assert (s[0], m[0], e[0]) == (0, 3140, -3)
    assert (s[1], m[1], e[1]) == (1, 5000, -4)
    assert (m[2], e[2]) == (0, -8)
    assert m[3] * 10.0 ** e[3] == pytest.approx(12345.0, abs=10.0)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=3)
    cfg = ModelConfig(**TINY)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_vocab_roundtrip_and_placeholder():
    v = Vocab()
    toks = tokenize("add x_0 mul 2.5 sin x_9")
    assert v.decode(v.encode(toks)) == toks
    assert v.decode(v.encode(tokenize("3.7"))) == tokenize("C")
    assert (v.pad, v.bos, v.eos) == (0, 1, 2)


def test_pad_batch():
    ids, mask = pad_batch([[5, 6, 7], [8]], pad=0)
    assert ids.tolist() == [[5, 6, 7], [8, 0, 0]]
    assert mask.sum() == 4


def test_data_encoder_is_row_permutation_invariant(model):
    rng = np.random.default_rng(1)
    X = rng.uniform(-4, 4, size=(30, 2))
    y = X[:, 0] * X[:, 1]
    perm = rng.permutation(30)
    with ad.no_grad():
        a = model.data_encoder(X, y).data
        b = model.data_encoder(X[perm], y[perm]).data
    assert a.shape == (8,)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_fusion_is_residual(model):
    rng = np.random.default_rng(2)
    E_n = Tensor(rng.normal(size=(3, 8)))
    E_f, w = model.fused(E_n, [tokenize("x_0"), tokenize("add x_0 x_1"), tokenize("sin x_1")])
    assert E_f.shape == (3, 8)
    np.testing.assert_allclose(w.sum(axis=1), 1.0)
    assert (w[0, 1:] < 1e-6).all()  # padding slots get no weight
    model.use_eq_encoder = False
    same, _ = model.fused(E_n, [tokenize("x_0")] * 3)
    assert same is E_n


def test_decoder_is_causal(model):
    E = Tensor(np.random.default_rng(3).normal(size=(1, 8)))
    a = np.array([[1, 5, 6, 7]])
    b = np.array([[1, 5, 6, 9]])
    with ad.no_grad():
        la = model.decoder(E, a).data
        lb = model.decoder(E, b).data
    np.testing.assert_allclose(la[:, :3], lb[:, :3], atol=1e-12)
    assert not np.allclose(la[:, 3], lb[:, 3])


def test_decode_step_is_a_distribution(model):
    p = decode_step(model.decoder, model.vocab, Tensor(np.zeros(8)), tokenize("add x_0"))
    assert p.shape == (len(model.vocab),)
    assert p.sum() == pytest.approx(1.0)
    with pytest.raises(SequenceTooLong):
        decode_step(model.decoder, model.vocab, Tensor(np.zeros(8)), tokenize("sin " * 30 + "x_0"))


def test_generate_flags_instead_of_raising(model):
    out = generate(model.decoder, model.vocab, np.zeros((4, 8)), "sample", 1.0, np.random.default_rng(0), 5)
    assert len(out) == 4
    for g in out:
        assert g.valid or g.reason in ("no EOS within max_len", "invalid prefix")
        assert len(g.tokens) <= 5


def test_generate_validity_matches_prefix_scan(model):
    rng = np.random.default_rng(1)
    out = generate(model.decoder, model.vocab, rng.normal(size=(64, 8)), "sample", 2.0, rng)
    for g in out:
        assert g.valid == (g.reason == "")
        if g.valid:
            assert is_valid_prefix(g.tokens)
        assert all(t.kind is not Kind.SPECIAL for t in g.tokens) or not g.valid


def test_sequence_too_long(model):
    ids, mask = pad_batch([[3] * 31])
    with pytest.raises(SequenceTooLong):
        model.eq_encoder(ids, mask)


def test_freeze_policy(model):
    params = model.parameters()
    frozen = freeze(params, default_freeze_policy(model.config))
    assert all(n.startswith(("data_encoder.", "decoder.")) for n in frozen)
    assert not any(n.startswith("decoder.layers.1.") for n in frozen)
    assert any(n.startswith("decoder.layers.0.") for n in frozen)
    assert all(params[n].trainable for n in params if n.startswith("eq_encoder."))
    with pytest.raises(PatternMatchesNothing):
        freeze(params, ["nothing.*"])


def fused_graph_loss(model, X, y, eqs, r):
    E_n = model.data_encoder(X, y)
    E_f, _ = model.fused(E_n, eqs)
    r_hat = model.evaluator(E_f)
    return ad.scale(ad.mse(r_hat, r), 0.05) + ad.scale(reconstruction_loss(model, E_f, eqs), 1.0)


def test_full_graph_gradient(model):
    rng = np.random.default_rng(4)
    X = rng.uniform(-2, 2, size=(2, 6, 2))
    y = rng.uniform(-2, 2, size=(2, 6))
    eqs = [tokenize("add x_0 x_1"), tokenize("sin x_0")]
    r = np.array([0.3, -0.2])
    params = list(model.parameters().values())
    err = gradcheck.check(lambda: fused_graph_loss(model, X, y, eqs, r), params, max_coords=4, rng=rng)
    assert err < 1e-4
