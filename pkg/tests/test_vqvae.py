import numpy as np
import pytest

from loopvq import nn, synthetic
from loopvq.formats import BadMagicError, FileFormatError, TruncatedFileError
from loopvq.models import VQVAE, Codebook, VqConfig, load_model, manipulate_codes, quantize_nearest, save_model
from loopvq.models.vqvae import (code_frequency_report, code_histograms, codes_from_bytes, codes_to_bytes,
                                 load_codes, save_codes)
from loopvq.nn.functional import bce_with_logits


def codebook(rows):
    cb = Codebook(len(rows), len(rows[0]), rng=0)
    cb.set_entries(np.arange(len(rows)), np.asarray(rows, dtype=np.float64))
    return cb


def brute_force_nearest(z, e):
    out = []
    for row in z:
        best, best_d = 0, None
        for k, entry in enumerate(e):
            d = sum((a - b) ** 2 for a, b in zip(row, entry))
            if best_d is None or d < best_d:
                best, best_d = k, d
        out.append(best)
    return np.array(out)


def test_quantize_examples():
    cb = codebook([np.zeros(16), np.ones(16)])
    idx, q = quantize_nearest(np.full((1, 16), 0.4), cb)
    assert idx.tolist() == [0] and np.array_equal(q, np.zeros((1, 16)))
    d = cb.distances(np.full((1, 16), 0.4))
    assert d[0] == pytest.approx([2.56, 5.76])
    idx, _ = quantize_nearest(np.full((1, 16), 0.5), cb)
    assert idx.tolist() == [0]
    idx, q = quantize_nearest(np.ones((1, 16)), cb)
    assert idx.tolist() == [1] and np.array_equal(q, np.ones((1, 16)))


def test_quantize_matches_brute_force_with_ties():
    rng = np.random.default_rng(0)
    e = rng.integers(-2, 3, (8, 3)).astype(np.float64)
    cb = codebook(e)
    z = rng.integers(-4, 5, (300, 3)) / 2.0  # half-integer grid makes exact ties common
    assert np.array_equal(quantize_nearest(z, cb)[0], brute_force_nearest(z, e))


def test_quantize_codebook_rows_return_themselves():
    e = np.random.default_rng(1).standard_normal((32, 16))
    cb = codebook(e)
    idx, q = quantize_nearest(e, cb)
    assert idx.tolist() == list(range(32)) and np.array_equal(q, e)


def test_quantize_errors():
    cb = codebook(np.zeros((2, 4)))
    with pytest.raises(ValueError):
        cb.nearest(np.zeros((3, 5)))
    with pytest.raises(ValueError):
        cb.lookup([2])
    with pytest.raises(ValueError):
        Codebook(0, 4)


def test_ema_decay_zero_gives_batch_means():
    rng = np.random.default_rng(2)
    cb = Codebook(3, 4, decay=0.0, rng=0)
    z = rng.standard_normal((30, 4))
    idx = rng.integers(0, 3, 30)
    cb.ema_update(z, idx)
    for k in range(3):
        assert np.allclose(cb.embeddings[k], z[idx == k].mean(axis=0), rtol=1e-4, atol=1e-6)


def test_ema_decay_one_leaves_unassigned_entry():
    cb = Codebook(3, 4, decay=1.0, rng=0)
    before = cb.embeddings.copy()
    cb.ema_update(np.ones((5, 4)), np.zeros(5, dtype=int))
    assert np.array_equal(cb.embeddings[1:], before[1:])


def test_ema_matches_recurrence():
    rng = np.random.default_rng(3)
    cb = Codebook(4, 2, decay=0.9, eps=1e-5, rng=1)
    counts, sums = cb.ema_counts.copy(), cb.ema_sums.copy()
    for _ in range(5):
        z = rng.standard_normal((12, 2))
        idx = rng.integers(0, 4, 12)
        cb.ema_update(z, idx)
        counts = 0.9 * counts + 0.1 * np.bincount(idx, minlength=4)
        for k in range(4):
            sums[k] = 0.9 * sums[k] + 0.1 * z[idx == k].sum(axis=0)
        total = counts.sum()
        smoothed = (counts + 1e-5) / (total + 4e-5) * total
        assert np.allclose(cb.embeddings, sums / smoothed[:, None])


def test_dead_entries_are_reseeded():
    cb = Codebook(3, 2, decay=0.99, dead_after=2, rng=0)
    z = np.array([[5.0, 5.0], [5.0, 5.0]])
    rng = np.random.default_rng(0)
    cb.ema_update(z, np.array([0, 0]), rng)
    assert cb.unused.tolist() == [0, 1, 1]
    cb.ema_update(z, np.array([0, 0]), rng)
    assert cb.unused.tolist() == [0, 0, 0]
    assert np.allclose(cb.embeddings[1:], 5.0)


def test_kmeans_plus_plus_init_spreads_entries():
    rng = np.random.default_rng(4)
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    rows = np.concatenate([c + 0.01 * rng.standard_normal((50, 2)) for c in centers])
    cb = Codebook(3, 2, rng=0)
    cb.init_from(rows, rng=1)
    assert len(set(brute_force_nearest(cb.embeddings, centers))) == 3
    assert cb.initialized


def tiny_config(**kw):
    base = dict(t=4, latent_dim=3, num_codes=5, channels=4, embed_channels=5, n_steps=8, n_pitches=6)
    base.update(kw)
    return VqConfig(**base)


def test_config_validation():
    assert VqConfig().downsamples == 2
    assert VqConfig(t=64).downsamples == 1
    with pytest.raises(ValueError):
        VqConfig(t=48)
    with pytest.raises(ValueError):
        VqConfig(t=8)


def test_shapes_full_size():
    model = VQVAE(rng=0)
    x = synthetic.random_loops(2, 1)
    assert model.encode(x).shape == (2, 32, 16)
    codes = model.encode_to_codes(x)
    assert codes.shape == (2, 32) and codes.min() >= 0 and codes.max() < 512
    out = model.decode_codes(codes)
    assert out.shape == (2, 128, 93) and out.dtype == np.uint8
    assert np.array_equal(out, model.decode_codes(codes))
    with pytest.raises(ValueError):
        model.decode_codes(np.zeros((1, 31), dtype=int))
    with pytest.raises(ValueError):
        model.decode_codes(np.full((1, 32), 512))


def test_straight_through_gradient_against_finite_differences():
    model = VQVAE(tiny_config(), rng=0, dtype=np.float64)
    x = (np.random.default_rng(5).random((3, 8, 6)) < 0.4).astype(np.uint8)
    xin = model._input(x)
    ze0 = model.encoder.forward(xin).copy()
    rows = ze0.transpose(0, 2, 1).reshape(-1, 3)
    model.codebook.init_from(rows[::2], rng=0)
    idx = model.codebook.nearest(rows)
    q0 = model.codebook.embeddings[idx].reshape(3, 4, 3).transpose(0, 2, 1).copy()
    beta = model.config.beta

    def loss():
        # quantizer output as a constant offset of the encoder output: identity Jacobian,
        # assignment frozen, which is exactly what the straight-through estimator assumes
        ze = model.encoder.forward(xin)
        recon = bce_with_logits(model.decoder.forward(q0 + (ze - ze0)), xin)[0]
        return recon + beta * float(((ze - q0) ** 2).mean())

    model.zero_grad()
    out = model.train_step(x, rng=0)
    assert out["loss"] == pytest.approx(loss())
    params = model.parameters()
    grads = [p.grad.copy() for p in params]
    assert nn.grad_check(loss, [p.value for p in params], grads) < 1e-4


def test_commitment_zero_when_encoder_hits_codebook():
    model = VQVAE(tiny_config(num_codes=12), rng=0, dtype=np.float64)
    x = (np.random.default_rng(6).random((1, 8, 6)) < 0.4).astype(np.uint8)
    rows = model.encode(x).reshape(-1, 3)
    model.codebook.set_entries(np.arange(4), rows)
    model.codebook.initialized[()] = 1
    assert model.train_step(x, rng=0)["commit"] == pytest.approx(0, abs=1e-20)


def test_beta_zero_is_reconstruction_only():
    model = VQVAE(tiny_config(beta=0.0), rng=0, dtype=np.float64)
    x = (np.random.default_rng(7).random((2, 8, 6)) < 0.4).astype(np.uint8)
    out = model.train_step(x, rng=0)
    assert out["loss"] == out["recon"]


def test_training_lowers_reconstruction_loss():
    from loopvq.models import VqTrainer
    data = (np.random.default_rng(8).random((8, 8, 6)) < 0.3).astype(np.uint8)
    model = VQVAE(tiny_config(), rng=0)
    reports = VqTrainer(model, n_epochs=40, batch_size=4, lr_max=3e-3, rng=0).fit(data)
    assert reports[-1].recon < reports[0].recon
    assert "perplexity=" in reports[-1].line()


def test_model_checkpoint_round_trip(tmp_path):
    model = VQVAE(tiny_config(), rng=3)
    data = (np.random.default_rng(9).random((4, 8, 6)) < 0.3).astype(np.uint8)
    model.train_step(data, rng=0)
    model.eval()
    save_model(tmp_path / "m.ckpt", model)
    back = load_model(tmp_path / "m.ckpt")
    assert back.config == model.config
    for (na, a), (nb, b) in zip(sorted(model.state_dict().items()), sorted(back.state_dict().items())):
        assert na == nb and np.array_equal(np.asarray(a, np.float32), np.asarray(b, np.float32))
    assert np.array_equal(back.encode_to_codes(data), model.encode_to_codes(data))


def test_manipulate_codes():
    c = np.arange(32)
    m = manipulate_codes(c)
    assert m[16] == 0 and m[17] == 1 and np.array_equal(np.delete(m, [16, 17]), np.delete(c, [16, 17]))
    fixed = m.copy()
    assert np.array_equal(manipulate_codes(fixed), fixed)
    batch = np.random.default_rng(0).integers(0, 512, (5, 32))
    once = manipulate_codes(batch)
    assert np.array_equal(manipulate_codes(once), once)
    assert np.array_equal(batch, np.random.default_rng(0).integers(0, 512, (5, 32)))  # input untouched
    with pytest.raises(ValueError):
        manipulate_codes(np.arange(31))


def test_frequency_report():
    seq = np.arange(32) % 7
    report = code_frequency_report(np.tile(seq, (5, 1)), 8)
    assert np.array_equal(report["most"][0], seq)
    rng = np.random.default_rng(1)
    codes = rng.integers(0, 6, (40, 32))
    report = code_frequency_report(codes, 6)
    hist = report["histogram"]
    assert hist.shape == (32, 6) and (hist.sum(axis=1) == 40).all()
    assert np.array_equal(hist, code_histograms(codes, 6))
    for pos in range(32):
        counts = hist[pos]
        assert counts[report["most"][0, pos]] == counts.max()
        assert counts[report["most"][1, pos]] <= counts[report["most"][0, pos]]
        least = report["least"][0, pos]
        assert counts[least] == counts[counts > 0].min()
    with pytest.raises(ValueError):
        code_histograms(np.zeros((0, 32), dtype=int), 4)


def test_codes_file_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    for k in range(100):
        K = int(rng.integers(1, 600))
        codes = rng.integers(0, K, (int(rng.integers(0, 6)), 32))
        save_codes(tmp_path / "c.bin", codes, K)
        back, k2 = load_codes(tmp_path / "c.bin")
        assert k2 == K and np.array_equal(back, codes) and back.shape == codes.shape


def test_codes_file_errors():
    data = codes_to_bytes(np.zeros((2, 32), dtype=int), 4)
    assert data[:4] == b"CODE"
    with pytest.raises(TruncatedFileError):
        codes_from_bytes(data[:-1])
    with pytest.raises(BadMagicError):
        codes_from_bytes(b"EDOC" + data[4:])
    with pytest.raises(FileFormatError):
        codes_from_bytes(data + b"\x00\x00")
    with pytest.raises(ValueError):
        codes_to_bytes(np.array([[4]]), 4)
