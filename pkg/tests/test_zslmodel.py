import numpy as np
import pytest

from clusterzsl.ndcore import ShapeError, make_rng
from clusterzsl.objectives import kl_to_standard_normal
from clusterzsl.zslmodel import CHECKPOINT_MAGIC, CheckpointError, ZslModel, reparameterize
from oracles import central_difference, rel_error


def small_model(**kw):
    args = dict(hidden=8, seed=3)
    args.update(kw)
    return ZslModel(6, 4, 5, [0, 2, 5], **args)


def test_shapes_and_latent_width():
    m = small_model()
    assert m.d_z == m.d_a == 4
    mu, lv = m.encode(np.zeros((3, 6)))
    assert mu.shape == lv.shape == (3, 4)
    assert m.decode(mu, np.ones((3, 4))).shape == (3, 5)
    assert m.classifier.out_dim == 3
    assert m.embed(np.zeros((2, 6))).shape == (2, 5)


def test_no_projection_reconstructs_raw_width():
    m = small_model(use_projection=False)
    assert m.d_p == 6
    x = make_rng(0).standard_normal((2, 6))
    assert np.array_equal(m.embed(x), x)


def test_finetune_map_starts_at_identity():
    m = small_model()
    x = make_rng(0).standard_normal((3, 6))
    m.finetune_enabled = True
    assert np.allclose(m.finetune(x), x)


def test_width_errors():
    m = small_model()
    with pytest.raises(ShapeError):
        m.encode(np.zeros((2, 5)))
    with pytest.raises(ShapeError):
        m.decode(np.zeros((2, 4)), np.zeros((3, 4)))
    with pytest.raises(ShapeError):
        reparameterize(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((3, 3)))


def test_reparameterization_moments():
    rng = make_rng(1)
    mu = np.full((200_000, 2), [1.5, -0.5])
    lv = np.full((200_000, 2), [np.log(0.25), np.log(4.0)])
    z = reparameterize(mu, lv, rng.standard_normal(mu.shape))
    assert np.allclose(z.mean(0), [1.5, -0.5], atol=0.02)
    assert np.allclose(z.var(0), [0.25, 4.0], rtol=0.02)


def test_encoder_gradient_through_kl():
    m = small_model()
    x = make_rng(2).standard_normal((4, 6))

    def f():
        return kl_to_standard_normal(*m.encode(x))

    out, cache = m.encoder.forward(x)
    mu, lv = m.split_latent(out)
    n = x.shape[0]
    grads, _ = m.encoder.backward(cache, np.hstack([mu / n, 0.5 * (np.exp(lv) - 1) / n]))
    for p, g in zip(m.encoder.params(), grads):
        assert rel_error(g, central_difference(f, p)) < 1e-6


def test_synthesis_is_seeded_and_counted():
    m = small_model(decoder_output="linear")
    a = np.linspace(0, 1, 4)
    s1 = m.synthesize_features(a, 7, make_rng(5))
    assert s1.shape == (7, 5)
    assert np.array_equal(s1, m.synthesize_features(a, 7, make_rng(5)))
    with pytest.raises(ValueError):
        m.synthesize_features(a, 0, make_rng(5))


def test_synthesis_depends_on_attributes():
    m = small_model(decoder_output="linear")
    s1 = m.synthesize_features(np.zeros(4), 500, make_rng(0)).mean(0)
    s2 = m.synthesize_features(np.ones(4), 500, make_rng(0)).mean(0)
    assert np.linalg.norm(s1 - s2) > 1e-3


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = small_model()
    m.finetune_enabled = True
    m.gauss_weights[:] = make_rng(0).standard_normal(m.gauss_weights.shape)
    path = tmp_path / "m.cfzm"
    m.save(path)
    back = ZslModel.load(path)
    assert back.to_bytes() == path.read_bytes()
    for (n1, a), (n2, b) in zip(m.blocks(), back.blocks()):
        assert n1 == n2 and np.array_equal(a, b)
    assert back.finetune_enabled and back.use_projection
    assert np.array_equal(back.seen_classes, [0, 2, 5])


def test_checkpoint_layout_header():
    raw = small_model().to_bytes()
    assert raw[:4] == CHECKPOINT_MAGIC
    assert int.from_bytes(raw[4:8], "little") == 1


@pytest.mark.parametrize("mutate, message", [
    (lambda r: b"XXXX" + r[4:], "magic"),
    (lambda r: r[:4] + (9).to_bytes(4, "little") + r[8:], "version"),
    (lambda r: r[:-8], "truncated"),
    (lambda r: r + b"\0", "trailing"),
    (lambda r: r[:6], "truncated checkpoint header"),
])
def test_corrupted_checkpoints_are_rejected(mutate, message):
    with pytest.raises(CheckpointError, match=message):
        ZslModel.from_bytes(mutate(small_model().to_bytes()))
