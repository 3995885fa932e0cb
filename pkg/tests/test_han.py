import math
import time

import numpy as np
import pytest

from cogbias import autodiff as ad
from cogbias.domain import Visit, Window, windows_to_arrays
from cogbias.errors import ShapeError
from cogbias.han import HierarchicalAttentionNetwork, ModelConfig, param_shapes, train

from conftest import central_differences, max_rel_error, random_windows, tiny_config

VARIANTS = {
    "static": {},
    "bidirectional": {"visit_encoder": "bidirectional"},
    "decoder_attention": {"visit_attention": "decoder"},
}


def loss_gradient_error(cfg: ModelConfig, seed: int, train_mode=False) -> float:
    rng = np.random.default_rng(seed)
    model = HierarchicalAttentionNetwork.initialize(cfg, seed)
    # larger weights than the default init so no gradient is trivially tiny
    model.params = {k: v * 3.0 for k, v in model.params.items()}
    batch = windows_to_arrays(random_windows(rng, 3, V=cfg.vocab_size, n=cfg.n, m=cfg.m))

    def f(params):
        P = {k: ad.constant(v) for k, v in params.items()}
        drop_rng = np.random.default_rng(seed) if train_mode else None
        return float(model.forward(batch, P=P, train=train_mode, rng=drop_rng)[0].value)

    P = model.leaves()
    loss, _ = model.forward(batch, P=P, train=train_mode,
                            rng=np.random.default_rng(seed) if train_mode else None)
    ad.backward(loss)
    analytic = {k: v.grad for k, v in P.items()}
    numeric = central_differences(f, {k: v.copy() for k, v in model.params.items()})
    return max_rel_error(analytic, numeric)


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradient_matches_finite_differences(seed):
    t0 = time.perf_counter()
    assert loss_gradient_error(tiny_config(), seed) < 1e-4
    assert time.perf_counter() - t0 < 30


@pytest.mark.parametrize("variant", ["bidirectional", "decoder_attention"])
@pytest.mark.parametrize("seed", range(2))
def test_loss_gradient_variants(variant, seed):
    assert loss_gradient_error(tiny_config(**VARIANTS[variant]), seed) < 1e-4


def test_loss_gradient_with_dropout():
    assert loss_gradient_error(tiny_config(dropout_p=0.3), 3, train_mode=True) < 1e-4


@pytest.mark.parametrize("variant", sorted(VARIANTS))
def test_attention_and_distributions_on_simplex(variant, rng):
    cfg = tiny_config(**VARIANTS[variant])
    model = HierarchicalAttentionNetwork.initialize(cfg, 0)
    tr = model.trace(random_windows(rng, 20))
    for probs in (tr.action_attention, tr.visit_attention, tr.decoder_distributions):
        assert (probs >= 0).all()
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)


def test_masked_actions_get_zero_attention(rng):
    model = HierarchicalAttentionNetwork.initialize(tiny_config(), 1)
    wins = random_windows(rng, 10)
    tr = model.trace(wins)
    mask = windows_to_arrays(wins)["ctx_mask"]
    assert (tr.action_attention[~mask] == 0).all()


def test_single_action_visit_attends_to_it():
    cfg = tiny_config()
    model = HierarchicalAttentionNetwork.initialize(cfg, 2)
    one = Visit((3, 5, 5, 5), (True, False, False, False))
    full = Visit((1, 2, 3, 4), (True,) * 4)
    tr = model.trace([Window((one, full), full)])
    np.testing.assert_array_equal(tr.action_attention[0, 0], [1.0, 0, 0, 0])


def test_action_context_is_weighted_sum_of_states(rng):
    cfg = tiny_config()
    model = HierarchicalAttentionNetwork.initialize(cfg, 3)
    batch = windows_to_arrays(random_windows(rng, 4))
    B, m, n = batch["ctx"].shape
    P = {k: ad.constant(v) for k, v in model.params.items()}
    ids, mask = batch["ctx"].reshape(B * m, n), batch["ctx_mask"].reshape(B * m, n)
    ctx, alpha = model.encode_actions(P, ids, mask)
    # recompute the bi-LSTM states outside the graph
    p = model.params
    x = p["embedding"][ids]
    fwd, _ = ad.lstm_numpy(x, p["act_fwd_W"], p["act_fwd_U"], p["act_fwd_b"], mask=mask)
    bwd, _ = ad.lstm_numpy(x, p["act_bwd_W"], p["act_bwd_U"], p["act_bwd_b"], mask=mask, reverse=True)
    h = np.concatenate([fwd, bwd], axis=-1)
    np.testing.assert_allclose(ctx.value, (alpha.value[..., None] * h).sum(axis=1), atol=1e-10)


def test_window_context_is_weighted_sum_of_visit_states(rng):
    cfg = tiny_config()
    model = HierarchicalAttentionNetwork.initialize(cfg, 4)
    batch = windows_to_arrays(random_windows(rng, 4))
    B, m, n = batch["ctx"].shape
    P = {k: ad.constant(v) for k, v in model.params.items()}
    c, _ = model.encode_actions(P, batch["ctx"].reshape(B * m, n), batch["ctx_mask"].reshape(B * m, n))
    c = ad.reshape(c, (B, m, c.shape[-1]))
    wctx, alpha = model.encode_visits(P, c)
    hv = model.visit_states(P, c).value
    np.testing.assert_allclose(wctx.value, (alpha.value[..., None] * hv).sum(axis=1), atol=1e-10)


def test_single_visit_window_attention_is_one(rng):
    cfg = tiny_config(m=1)
    model = HierarchicalAttentionNetwork.initialize(cfg, 5)
    alphas = model.visit_attention(random_windows(rng, 6, m=1))
    np.testing.assert_array_equal(alphas, np.ones((6, 1)))


def test_zero_logits_give_ln_v_loss(rng):
    cfg = ModelConfig(dropout_p=0.0, embed_dim=4, action_hidden=4, visit_hidden=4, decoder_hidden=4, m=2)
    model = HierarchicalAttentionNetwork.initialize(cfg, 0)
    model.params["out_W"] = np.zeros_like(model.params["out_W"])
    model.params["out_b"] = np.zeros_like(model.params["out_b"])
    wins = random_windows(rng, 5, V=33, n=21, m=2)
    assert model.loss(wins) == pytest.approx(math.log(33), abs=1e-12)
    assert math.log(33) == pytest.approx(3.4965, abs=1e-4)


def test_single_action_vocabulary_has_zero_loss():
    cfg = tiny_config(vocab_size=1)
    model = HierarchicalAttentionNetwork.initialize(cfg, 0)
    v = Visit((0, 0, 0, 0), (True,) * 4)
    assert model.loss([Window((v, v), v)]) == 0.0


def test_first_decoder_step_ignores_target_contents(rng):
    model = HierarchicalAttentionNetwork.initialize(tiny_config(), 6)
    ctx = random_windows(rng, 1)[0].context
    a = Visit((0, 1, 2, 3), (True,) * 4)
    b = Visit((4, 4, 0, 1), (True,) * 4)
    da = model.trace([Window(ctx, a)]).decoder_distributions
    db = model.trace([Window(ctx, b)]).decoder_distributions
    np.testing.assert_array_equal(da[0, 0], db[0, 0])
    assert not np.allclose(da[0, 1], db[0, 1])


def test_free_running_decode_is_deterministic(rng):
    model = HierarchicalAttentionNetwork.initialize(tiny_config(), 7)
    wins = random_windows(rng, 5)
    a = model.trace(wins, teacher_forcing=False).decoder_distributions
    b = model.trace(wins, teacher_forcing=False).decoder_distributions
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-9)


def test_decoder_attention_rejects_free_running(rng):
    model = HierarchicalAttentionNetwork.initialize(tiny_config(visit_attention="decoder"), 0)
    with pytest.raises(ValueError):
        model.trace(random_windows(rng, 2), teacher_forcing=False)


def test_training_decreases_loss(rng):
    cfg = ModelConfig(vocab_size=5, n=4, m=2, embed_dim=4, action_hidden=6, visit_hidden=6, decoder_hidden=6)
    wins = random_windows(rng, 50)
    result = train(HierarchicalAttentionNetwork.initialize(cfg, 0), wins, epochs=8, lr=1e-2, batch_size=10,
                   patience=100)
    assert len(result.epoch_losses) == 8
    assert result.epoch_losses[-1] < result.epoch_losses[0]


def test_training_is_deterministic_and_pure(rng):
    cfg = tiny_config(dropout_p=0.2)
    wins = random_windows(rng, 12)
    model = HierarchicalAttentionNetwork.initialize(cfg, 0)
    before = {k: v.copy() for k, v in model.params.items()}
    a = train(model, wins, epochs=2, seed=3, batch_size=5)
    b = train(model, wins, epochs=2, seed=3, batch_size=5)
    for k in before:
        np.testing.assert_array_equal(model.params[k], before[k])
        np.testing.assert_array_equal(a.model.params[k], b.model.params[k])


def test_trainable_subset_freezes_other_parameters(rng):
    cfg = tiny_config()
    model = HierarchicalAttentionNetwork.initialize(cfg, 0)
    res = train(model, random_windows(rng, 10), epochs=2, lr=1e-2, trainable=["vis_att_q"])
    changed = {k for k in model.params if not np.array_equal(model.params[k], res.model.params[k])}
    assert changed == {"vis_att_q"}
    with pytest.raises(KeyError):
        train(model, random_windows(rng, 2), epochs=1, trainable=["nope"])


def test_wrong_window_size_rejected(rng):
    model = HierarchicalAttentionNetwork.initialize(tiny_config(), 0)
    with pytest.raises(ShapeError):
        model.visit_attention(random_windows(rng, 2, m=3))


def test_param_names_depend_on_variant():
    assert "vis_bwd_W" in param_shapes(tiny_config(visit_encoder="bidirectional"))
    dyn = param_shapes(tiny_config(visit_attention="decoder"))
    assert "vis_att_S" in dyn and "dec_init_W" not in dyn
    with pytest.raises(ValueError):
        tiny_config(visit_encoder="sideways")


def test_published_scale_dimensions():
    cfg = ModelConfig.published_scale()
    assert (cfg.action_hidden, cfg.visit_hidden, cfg.decoder_hidden) == (512, 2048, 2048)
