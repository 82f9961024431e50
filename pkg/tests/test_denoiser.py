import numpy as np
import pytest

from rissole.denoiser import (CondMode, DenoiserConfig, Tape, backward, embed_condition, forward,
                              init_denoiser, load_denoiser, param_shapes, predict_noise,
                              save_denoiser, time_embedding)
from rissole.tensor import Rng, layer_norm

from oracles import fd_relative_errors, tiny_batch, tiny_model


def cfg_for(mode=CondMode.RAG, pos=False, **kw):
    base = dict(channels=2, block_h=3, block_w=3, b=4, k=3, T=20, width=8, n_res=2, d_t=6,
                cond_mode=mode, pos_enabled=pos)
    base.update(kw)
    return DenoiserConfig(**base)


@pytest.mark.parametrize("mode", list(CondMode))
@pytest.mark.parametrize("pos", [False, True])
def test_gradients_match_finite_differences(mode, pos):
    model = tiny_model(mode, pos)
    errs = fd_relative_errors(model, tiny_batch(model))
    assert set(errs) == set(model.params)
    assert max(errs.values()) < 1e-5, errs


def test_time_embedding():
    e = time_embedding(7, 10, 6)
    m = np.arange(3)
    np.testing.assert_allclose(e[0::2], np.sin(7 / 10000 ** (2 * m / 6)))
    np.testing.assert_allclose(e[1::2], np.cos(7 / 10000 ** (2 * m / 6)))
    # for the highest frequency index the argument is tiny: sin ~ 0, cos ~ 1
    wide = time_embedding(1, 10, 64)
    assert abs(wide[-2]) < 2e-4 and abs(wide[-1] - 1) < 1e-8
    with pytest.raises(ValueError):
        time_embedding(1, 10, 5)
    with pytest.raises(ValueError):
        time_embedding(11, 10, 4)


def test_no_rag_zero_convs_give_normalized_block(rng):
    model = init_denoiser(cfg_for(CondMode.NO_RAG, width=2), Rng(0))
    for name in ("in_w", "in_b", "nbr_w", "nbr_b"):
        model.params[name][:] = 0
    z = rng.normal(size=(2, 3, 3))
    np.testing.assert_allclose(embed_condition(model, z, None, 5, 0), layer_norm(z, 1.0, 0.0),
                               atol=1e-12)


def test_duplicate_neighbors_equal_single(rng):
    cfg = cfg_for(k=2)
    model = init_denoiser(cfg, Rng(1))
    z = rng.normal(size=cfg.block_shape)
    row = rng.normal(size=cfg.block_shape)
    two = embed_condition(model, z, np.stack([row, row]), 4, 1)
    one = embed_condition(model, z, row[None], 4, 1)
    np.testing.assert_allclose(two, one, atol=1e-14)


def test_neighbor_permutation_invariance():
    model = tiny_model(CondMode.RAG, True, seed=3)
    z, t, nbrs, pos, _ = tiny_batch(model, seed=3)
    out = forward(model, z, t, nbrs, pos)
    np.testing.assert_allclose(forward(model, z, t, nbrs[:, ::-1].copy(), pos), out, atol=1e-13)


def test_zero_network_predicts_zero(rng):
    cfg = cfg_for()
    model = init_denoiser(cfg, Rng(2))
    for v in model.params.values():
        v[:] = 0
    out = predict_noise(model, rng.normal(size=cfg.block_shape), 3,
                        rng.normal(size=(3,) + cfg.block_shape), 2)
    assert not out.any()


def test_zero_loss_gives_zero_gradients(rng):
    cfg = cfg_for()
    model = init_denoiser(cfg, Rng(2))
    for v in model.params.values():
        v[:] = 0
    tape = Tape()
    z = rng.normal(size=(2,) + cfg.block_shape)
    out = forward(model, z, np.array([1, 2]), rng.normal(size=(2, 3) + cfg.block_shape),
                  np.array([0, 1]), tape)
    grads = backward(model, tape, 2 * (out - 0))
    assert all(not g.any() for g in grads.values())


def test_backward_needs_forward():
    model = tiny_model(CondMode.RAG, False)
    with pytest.raises(RuntimeError):
        backward(model, Tape(), np.zeros((1, 1, 2, 2)))


def test_deterministic():
    model = tiny_model(CondMode.RAG_PREV, True)
    z, t, nbrs, pos, _ = tiny_batch(model)
    assert forward(model, z, t, nbrs, pos).tobytes() == forward(model, z, t, nbrs, pos).tobytes()


def test_batched_matches_single_block():
    model = tiny_model(CondMode.RAG, True, seed=4)
    z, t, nbrs, pos, _ = tiny_batch(model, seed=4)
    out = forward(model, z, t, nbrs, pos)
    for j in range(3):
        single = predict_noise(model, z[j], int(t[j]), nbrs[j], int(pos[j]))
        np.testing.assert_allclose(single, out[j], atol=1e-13)


def test_position_parameters_cost_b_times_width():
    for width in (4, 16):
        off = init_denoiser(cfg_for(width=width), Rng(0)).param_count()
        on = init_denoiser(cfg_for(width=width, pos=True), Rng(0)).param_count()
        assert on - off == 4 * width


def test_param_count_matches_shapes():
    cfg = cfg_for()
    model = init_denoiser(cfg, Rng(0))
    assert model.param_count() == sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def test_mode_contracts(rng):
    bs = (2, 3, 3)
    nb = rng.normal(size=(3,) + bs)
    z = rng.normal(size=bs)
    norag = init_denoiser(cfg_for(CondMode.NO_RAG), Rng(0))
    with pytest.raises(ValueError):
        embed_condition(norag, z, nb, 1, 0)
    rag = init_denoiser(cfg_for(CondMode.RAG), Rng(0))
    with pytest.raises(ValueError):
        predict_noise(rag, z, 1, None, 0)
    with pytest.raises(ValueError):
        predict_noise(rag, z, 1, nb, 1, prev_block=z)
    prev = init_denoiser(cfg_for(CondMode.RAG_PREV), Rng(0))
    with pytest.raises(ValueError):
        predict_noise(prev, z, 1, nb, 2)
    # block 0 has no predecessor: an all-zero previous block is used
    np.testing.assert_array_equal(predict_noise(prev, z, 1, nb, 0),
                                  predict_noise(prev, z, 1, nb, 0, prev_block=np.zeros(bs)))


def test_neighbors_change_prediction(rng):
    model = tiny_model(CondMode.RAG_PREV, False)
    z, t, nbrs, pos, _ = tiny_batch(model)
    other = nbrs.copy()
    other[:, -1] += 1.0  # only the previous-block row differs
    assert not np.allclose(forward(model, z, t, nbrs, pos), forward(model, z, t, other, pos))


def test_shape_errors(rng):
    model = tiny_model(CondMode.RAG, False)
    z, t, nbrs, pos, _ = tiny_batch(model)
    with pytest.raises(ValueError):
        forward(model, z[:, :, :1], t, nbrs, pos)
    with pytest.raises(ValueError):
        forward(model, z, t, nbrs[:2], pos)
    with pytest.raises(ValueError):
        forward(model, z, np.array([0, 1, 2]), nbrs, pos)
    with pytest.raises(ValueError):
        forward(model, z, t, nbrs, np.array([0, 1, 4]))


def test_config_validation():
    with pytest.raises(ValueError):
        cfg_for(width=1)
    with pytest.raises(ValueError):
        cfg_for(d_t=5)
    with pytest.raises(ValueError):
        cfg_for(k=0)
    cfg_for(CondMode.NO_RAG, k=0)


def test_checkpoint_round_trip(tmp_path):
    model = tiny_model(CondMode.RAG_PREV, True, seed=5)
    save_denoiser(model, tmp_path / "m")
    back = load_denoiser(tmp_path / "m")
    assert back.config == model.config
    for name, v in model.params.items():
        assert back.params[name].tobytes() == v.tobytes()


def test_time_embeddings_bounded_and_distinct():
    embs = np.stack([time_embedding(t, 100, 32) for t in range(1, 101)])
    assert np.abs(embs).max() <= 1
    d2 = ((embs[:, None] - embs[None]) ** 2).sum(-1)
    assert d2[~np.eye(100, dtype=bool)].min() > 0


def test_no_rag_neighbor_gradients_are_zero():
    model = tiny_model(CondMode.NO_RAG, True)
    z, t, _, pos, target = tiny_batch(model)
    tape = Tape()
    out = forward(model, z, t, None, pos, tape)
    grads = backward(model, tape, 2 * (out - target))
    assert not grads["nbr_w"].any() and not grads["nbr_b"].any()
    assert np.abs(grads["in_w"]).max() > 0


@pytest.mark.parametrize("mode", list(CondMode))
def test_output_shape_grid(mode):
    for b, hw, k in ((1, 4, 1), (4, 2, 3), (9, 3, 2)):
        cfg = DenoiserConfig(channels=2, block_h=hw, block_w=hw + 1, b=b, k=k, T=5, width=4,
                             n_res=1, d_t=4, cond_mode=mode, pos_enabled=True)
        model = init_denoiser(cfg, Rng(0))
        nb = None if mode is CondMode.NO_RAG else np.ones((k,) + cfg.block_shape)
        prev = np.ones(cfg.block_shape) if mode is CondMode.RAG_PREV else None
        assert predict_noise(model, np.ones(cfg.block_shape), 2, nb, b - 1, prev).shape == cfg.block_shape
