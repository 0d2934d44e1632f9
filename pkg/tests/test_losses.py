import numpy as np
import pytest

from meditok import losses, nets, vq
from meditok import ndgrad as ng


@pytest.fixture
def feat_net():
    return nets.FeatureNet(1, seed=11)


def test_mse_identical_and_offset(rng):
    x = rng.normal(size=(2, 4, 4, 1))
    assert losses.mse_loss(ng.tensor(x), ng.tensor(x)).item() == 0.0
    off = losses.mse_loss(ng.tensor(x + 0.1), ng.tensor(x)).item()
    assert abs(off - 0.01) < 1e-12


def test_mse_against_direct_oracle(rng):
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    direct = float(np.mean((a - b) ** 2))
    assert abs(losses.mse_loss(ng.tensor(a), ng.tensor(b)).item() - direct) < 1e-12


def test_mse_shape_mismatch(rng):
    with pytest.raises(ValueError, match="mismatch"):
        losses.mse_loss(ng.tensor(np.zeros((2, 2))), ng.tensor(np.zeros((2, 3))))


def test_perceptual_identical_zero_and_symmetric(rng, feat_net):
    a = ng.tensor(rng.uniform(-1, 1, size=(2, 8, 8, 1)))
    b = ng.tensor(rng.uniform(-1, 1, size=(2, 8, 8, 1)))
    assert losses.perceptual_loss(a, a, feat_net).item() == 0.0
    assert abs(losses.perceptual_loss(a, b, feat_net).item()
               - losses.perceptual_loss(b, a, feat_net).item()) < 1e-12


def test_perceptual_positive_inside_receptive_field(rng, feat_net):
    a = np.zeros((8, 8, 1))
    b = a.copy()
    b[4, 4, 0] = 0.9
    assert losses.perceptual_loss(ng.tensor(a), ng.tensor(b), feat_net).item() > 0.0


def test_adversarial_margin_satisfied():
    real = ng.tensor(np.ones((2, 3, 3, 1)))
    fake = ng.tensor(-np.ones((2, 3, 3, 1)))
    d_loss, _ = losses.adversarial_losses(real, fake)
    assert d_loss.item() == 0.0


def test_adversarial_zero_fake_gives_zero_g():
    _, g_loss = losses.adversarial_losses(ng.tensor(np.ones((1, 2))), ng.tensor(np.zeros((1, 2))))
    assert g_loss.item() == 0.0


def test_adversarial_against_hinge_oracle(rng):
    real, fake = rng.normal(size=6), rng.normal(size=6)
    d_loss, g_loss = losses.adversarial_losses(ng.tensor(real), ng.tensor(fake))
    d_direct = 0.5 * (np.mean(np.maximum(0.0, 1.0 - real)) + np.mean(np.maximum(0.0, 1.0 + fake)))
    assert abs(d_loss.item() - d_direct) < 1e-12
    assert abs(g_loss.item() + np.mean(fake)) < 1e-12


def test_adaptive_weight_formula_and_clamps():
    assert abs(losses.adaptive_adv_weight(2.0, 1.0) - 2.0 / (1.0 + 1e-6)) < 1e-12
    assert losses.adaptive_adv_weight(1.0, 0.0) == 1e4  # 1/1e-6 clamped
    assert losses.adaptive_adv_weight(0.0, 3.0) == 0.0


def test_contrastive_identical_rows_is_log_n(rng):
    row = rng.normal(size=6)
    pooled = ng.tensor(np.tile(row, (4, 1)))
    loss = losses.contrastive_align(pooled, pooled, temperature=0.07)
    assert abs(loss.item() - np.log(4.0)) < 1e-9


def test_contrastive_orthogonal_pairs_small_temperature():
    eye = np.eye(4)
    loss = losses.contrastive_align(ng.tensor(eye), ng.tensor(eye), temperature=0.01)
    assert loss.item() < 1e-9


def test_contrastive_against_direct_oracle(rng):
    a = rng.normal(size=(5, 7))
    b = rng.normal(size=(5, 7))
    tau = 0.07
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    sim = an @ bn.T / tau

    def ce(logits):
        total = 0.0
        for i in range(logits.shape[0]):
            p = np.exp(logits[i] - logits[i].max())
            total -= np.log(p[i] / p.sum())
        return total / logits.shape[0]

    direct = 0.5 * (ce(sim) + ce(sim.T))
    got = losses.contrastive_align(ng.tensor(a), ng.tensor(b), tau).item()
    assert abs(got - direct) < 1e-10


def test_contrastive_needs_two_rows(rng):
    one = ng.tensor(rng.normal(size=(1, 4)))
    with pytest.raises(ValueError, match="at least 2"):
        losses.contrastive_align(one, one)


def test_contrastive_invariant_to_row_rescaling(rng):
    a = rng.normal(size=(4, 6))
    b = rng.normal(size=(4, 6))
    base = losses.contrastive_align(ng.tensor(a), ng.tensor(b), 0.07).item()
    scaled = a * rng.uniform(0.1, 10.0, size=(4, 1))
    again = losses.contrastive_align(ng.tensor(scaled), ng.tensor(b), 0.07).item()
    assert abs(base - again) < 1e-9


def test_cosine_identical_and_antiparallel(rng):
    v = rng.normal(size=(3, 5))
    assert abs(losses.cosine_align(ng.tensor(v), ng.tensor(v)).item()) < 1e-12
    assert abs(losses.cosine_align(ng.tensor(v), ng.tensor(-v)).item() - 2.0) < 1e-12


def test_cosine_against_dot_oracle(rng):
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    direct = np.mean([1.0 - a[i] @ b[i] / (np.linalg.norm(a[i]) * np.linalg.norm(b[i]))
                      for i in range(4)])
    assert abs(losses.cosine_align(ng.tensor(a), ng.tensor(b)).item() - direct) < 1e-12


def test_cosine_rejects_zero_vector(rng):
    a = np.zeros((2, 3))
    with pytest.raises(ValueError, match="zero"):
        losses.cosine_align(ng.tensor(a), ng.tensor(np.ones((2, 3))))


def test_pool_constant_grid():
    grid = np.tile(np.array([1.0, 2.0, 3.0]), (4, 5, 1))
    out = losses.pool_latent(ng.tensor(grid))
    assert np.allclose(out.data, [1.0, 2.0, 3.0])


def test_pool_mean_of_two_vectors():
    grid = np.stack([[np.array([1.0, 3.0]), np.array([5.0, 7.0])]])  # 1x2x2
    out = losses.pool_latent(ng.tensor(grid))
    assert np.allclose(out.data, [3.0, 5.0])


def test_pool_against_loop_oracle(rng):
    grid = rng.normal(size=(2, 3, 4, 5))
    out = losses.pool_latent(ng.tensor(grid)).data
    for n in range(2):
        expected = np.zeros(5)
        for i in range(3):
            for j in range(4):
                expected += grid[n, i, j]
        assert np.allclose(out[n], expected / 12.0)


def _objective_inputs(rng, feat_net, n=3):
    cb = vq.init_codebook(2, 4, 3, seed=4)
    target = ng.tensor(rng.uniform(-1, 1, size=(n, 4, 4, 1)))
    recon = ng.tensor(rng.uniform(-1, 1, size=(n, 4, 4, 1)), requires_grad=True)
    latents = ng.tensor(rng.normal(size=(n, 2, 2, 6)), requires_grad=True)
    quant = vq.quantize(latents, cb)
    st = vq.straight_through(latents, quant.quantized)
    vis = ng.tensor(rng.normal(size=(n, 6)), requires_grad=True)
    txt = ng.tensor(rng.normal(size=(n, 6)), requires_grad=True)
    return cb, target, recon, latents, quant, st, vis, txt


def test_stage1_zero_weight_equals_bare_reconstruction(rng, feat_net):
    cb, target, recon, latents, quant, st, vis, txt = _objective_inputs(rng, feat_net)
    w0 = losses.LossWeights(lambda_vis=0.0)
    with_align = losses.stage_objective("s1", w0, recon=recon, target=target, quant=quant,
                                        aligned_latents=st, feat_net=feat_net, vis_target=vis)
    rec_only = (losses.mse_loss(recon, target)
                + w0.lambda_perc * losses.perceptual_loss(recon, target, feat_net)
                + w0.lambda_vq * vq.vq_loss(quant, w0.beta))
    assert abs(with_align.total.item() - rec_only.item()) < 1e-12


def test_stage_objectives_equal_bare_rec_on_identical_inputs(rng, feat_net):
    cb, target, recon, latents, quant, st, vis, txt = _objective_inputs(rng, feat_net)
    s1 = losses.stage_objective("s1", losses.LossWeights(lambda_vis=0.0), recon=recon,
                                target=target, quant=quant, aligned_latents=st,
                                feat_net=feat_net, vis_target=vis)
    s2 = losses.stage_objective("s2", losses.LossWeights(lambda_txt=0.0), recon=recon,
                                target=target, quant=quant, aligned_latents=st,
                                feat_net=feat_net, txt_target=txt)
    assert abs(s1.total.item() - s2.total.item()) < 1e-12


def test_breakdown_recomposes_to_total(rng, feat_net):
    cb, target, recon, latents, quant, st, vis, txt = _objective_inputs(rng, feat_net)
    w = losses.LossWeights()
    fake = ng.tensor(rng.normal(size=(3, 2, 2, 1)), requires_grad=True)
    bd = losses.stage_objective("combined", w, recon=recon, target=target, quant=quant,
                                aligned_latents=st, feat_net=feat_net, vis_target=vis,
                                txt_target=txt, fake_logits=fake, adv_weight=0.7)
    recomposed = (bd.mse.item() + w.lambda_perc * bd.perceptual.item()
                  + bd.adv_weight * bd.adversarial_g.item() + w.lambda_vq * bd.vq.item()
                  + w.lambda_vis * bd.align_vis.item() + w.lambda_txt * bd.align_txt.item())
    assert abs(bd.total.item() - recomposed) < 1e-12


def test_stage1_matches_straight_line_oracle(rng, feat_net):
    """Independent recomposition of the full stage-1 objective on a micro-batch."""
    cb, target, recon, latents, quant, st, vis, txt = _objective_inputs(rng, feat_net)
    w = losses.LossWeights()
    bd = losses.stage_objective("s1", w, recon=recon, target=target, quant=quant,
                                aligned_latents=st, feat_net=feat_net, vis_target=vis)

    # straight-line re-implementation with plain numpy
    r, t = recon.data, target.data
    mse = np.mean((r - t) ** 2)
    fa = feat_net.features(recon)
    fb = feat_net.features(target)
    perc = np.mean([np.mean((x.data - y.data) ** 2) for x, y in zip(fa, fb)])
    chunks = latents.data.reshape(-1, 2, 3)
    qchunks = quant.quantized.data.reshape(-1, 2, 3)
    vq_term = (np.mean(((qchunks - chunks) ** 2).sum(-1))
               + w.beta * np.mean(((qchunks - chunks) ** 2).sum(-1)))
    pooled = st.data.mean(axis=(1, 2))
    pn = pooled / np.linalg.norm(pooled, axis=1, keepdims=True)
    vn = vis.data / np.linalg.norm(vis.data, axis=1, keepdims=True)
    sim = pn @ vn.T / w.contrast_temperature

    def ce(logits):
        total = 0.0
        for i in range(logits.shape[0]):
            p = np.exp(logits[i] - logits[i].max())
            total -= np.log(p[i] / p.sum())
        return total / logits.shape[0]

    align = 0.5 * (ce(sim) + ce(sim.T))
    oracle = mse + w.lambda_perc * perc + w.lambda_vq * vq_term + w.lambda_vis * align
    assert abs(bd.total.item() - oracle) < 1e-10


def test_stage2_requires_caption_embeddings(rng, feat_net):
    cb, target, recon, latents, quant, st, vis, txt = _objective_inputs(rng, feat_net)
    with pytest.raises(ValueError, match="caption"):
        losses.stage_objective("s2", losses.LossWeights(), recon=recon, target=target,
                               quant=quant, aligned_latents=st, feat_net=feat_net)


def test_every_loss_passes_grad_check(rng, feat_net):
    a = ng.tensor(rng.uniform(-0.8, 0.8, size=(2, 8, 8, 1)), requires_grad=True)
    b = ng.tensor(rng.uniform(-0.8, 0.8, size=(2, 8, 8, 1)))
    assert ng.grad_check(lambda a: losses.mse_loss(a, b), [a]) < 1e-5
    assert ng.grad_check(lambda a: losses.perceptual_loss(a, b, feat_net), [a]) < 1e-5
    real = ng.tensor(rng.normal(size=(2, 2, 2, 1)), requires_grad=True)
    fake = ng.tensor(rng.normal(size=(2, 2, 2, 1)) + 1.5, requires_grad=True)
    assert ng.grad_check(lambda r, f: losses.adversarial_losses(r, f)[0], [real, fake]) < 1e-5
    assert ng.grad_check(lambda r, f: losses.adversarial_losses(r, f)[1], [real, fake]) < 1e-5
    p = ng.tensor(rng.normal(size=(3, 5)), requires_grad=True)
    q = ng.tensor(rng.normal(size=(3, 5)), requires_grad=True)
    assert ng.grad_check(lambda p, q: losses.contrastive_align(p, q, 0.07), [p, q]) < 1e-5
    assert ng.grad_check(lambda p, q: losses.cosine_align(p, q), [p, q]) < 1e-5
    g = ng.tensor(rng.normal(size=(2, 3, 3, 4)), requires_grad=True)
    assert ng.grad_check(lambda g: ng.tensor_sum(losses.pool_latent(g) ** 2), [g]) < 1e-5


def test_full_stage1_objective_grad_check_toy_image(rng, feat_net):
    """Full stage-1 objective on a 4x4 toy image, stop-gradient semantics."""
    cfg = nets.EncoderConfig(downsample_factor=2, channels=(2, 3), latent_dim=4, in_channels=1)
    enc, dec = nets.Encoder(cfg, seed=0), nets.Decoder(cfg, seed=1)
    cb = vq.init_codebook(2, 3, 2, seed=2)
    proj = nets.Projector.create(4, 4, seed=3)
    w = losses.LossWeights(adv_mode="off")
    x_batch = ng.tensor(rng.uniform(-0.6, 0.6, size=(2, 4, 4, 1)))
    vis_emb = rng.normal(size=(2, 4))
    # nudge biases off zero so no relu sits on its kink within the probe step
    for net in (enc, dec):
        for t in net.params.values():
            if t.ndim == 1:
                t.data = rng.uniform(0.05, 0.15, size=t.shape)
    params = [*enc.param_list(), *dec.param_list(), cb.entries, proj.weight, proj.bias]

    def fn(*params):
        latents = enc.encode(x_batch)
        quant = vq.quantize(latents, cb)
        st = vq.straight_through(latents, quant.quantized)
        recon = dec.decode(st)
        vis_t = nets.project(vis_emb, proj)
        bd = losses.stage_objective("s1", w, recon=recon, target=x_batch, quant=quant,
                                    aligned_latents=st, feat_net=feat_net, vis_target=vis_t)
        return bd.total

    # eps below the bias nudge keeps every relu away from its kink
    assert ng.grad_check(fn, params, eps=1e-5, freeze_detach=True) < 1e-4
