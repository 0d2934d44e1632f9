import numpy as np
import pytest

from meditok import ndgrad as ng
from meditok import nets, vq


def _enc_cfg(f_d):
    widths = {2: (4, 6), 4: (4, 6, 8), 8: (4, 6, 8, 10), 16: (4, 6, 8, 10, 12)}[f_d]
    return nets.EncoderConfig(downsample_factor=f_d, channels=widths, latent_dim=8)


@pytest.mark.parametrize("f_d", [2, 4, 8, 16])
def test_encode_decode_shape_contract(rng, f_d):
    cfg = _enc_cfg(f_d)
    enc, dec = nets.Encoder(cfg, seed=0), nets.Decoder(cfg, seed=1)
    size = 2 * f_d
    x = ng.tensor(rng.uniform(-1, 1, size=(2, size, size, 1)))
    grid = enc.encode(x)
    assert grid.shape == (2, 2, 2, 8)
    out = dec.decode(grid)
    assert out.shape == x.shape


def test_encode_shape_32_by_4():
    cfg = _enc_cfg(4)
    enc = nets.Encoder(cfg, seed=0)
    grid = enc.encode(ng.tensor(np.zeros((32, 32, 1))))
    assert grid.shape == (8, 8, 8)


def test_encode_paper_scale_grid_arithmetic():
    # 256 x 256 at downsample 16 -> 16 x 16 token grid
    assert nets.PAPER_SCALE["image_size"] // nets.PAPER_SCALE["downsample_factor"] == 16


def test_encode_rejects_indivisible_resolution(rng):
    enc = nets.Encoder(_enc_cfg(8), seed=0)
    with pytest.raises(ValueError, match="divisible"):
        enc.encode(ng.tensor(np.zeros((2, 20, 20, 1))))


def test_encode_deterministic(rng):
    enc = nets.Encoder(_enc_cfg(4), seed=3)
    x = ng.tensor(rng.normal(size=(1, 16, 16, 1)))
    a = enc.encode(x).data
    b = enc.encode(x).data
    assert np.array_equal(a, b)


def test_decode_range_in_unit_interval(rng):
    cfg = _enc_cfg(4)
    dec = nets.Decoder(cfg, seed=1)
    out = dec.decode(ng.tensor(rng.normal(size=(2, 4, 4, 8)) * 5.0))
    assert out.data.min() >= -1.0 and out.data.max() <= 1.0


def test_decode_rejects_wrong_latent_dim(rng):
    dec = nets.Decoder(_enc_cfg(4), seed=1)
    with pytest.raises(ValueError, match="latent dim"):
        dec.decode(ng.tensor(np.zeros((2, 4, 4, 5))))


def test_decode_encode_straight_through_grad_check(rng):
    cfg = nets.EncoderConfig(downsample_factor=2, channels=(3, 4), latent_dim=4, in_channels=1)
    enc, dec = nets.Encoder(cfg, seed=0), nets.Decoder(cfg, seed=1)
    cb = vq.init_codebook(2, 4, 2, seed=2)
    x = ng.tensor(rng.uniform(-0.5, 0.5, size=(4, 4, 1)), requires_grad=True)
    target = rng.uniform(-0.5, 0.5, size=(4, 4, 1))

    def fn(x):
        latents = enc.encode(x)
        q = vq.quantize(latents, cb)
        recon = dec.decode(vq.straight_through(latents, q.quantized))
        diff = recon - target
        return ng.mean(diff * diff)

    assert ng.grad_check(fn, [x], eps=1e-4, freeze_detach=True) < 1e-4


def test_discriminator_logit_map(rng):
    disc = nets.PatchDiscriminator(1, seed=0)
    out = disc.discriminate(ng.tensor(np.zeros((2, 32, 32, 1))))
    assert out.shape == (2, 4, 4, 1)
    assert np.all(np.isfinite(out.data))


def test_discriminator_grad_check(rng):
    disc = nets.PatchDiscriminator(1, seed=0, widths=(3, 4, 4))
    x = ng.tensor(rng.uniform(-1, 1, size=(8, 8, 1)), requires_grad=True)
    err = ng.grad_check(lambda x: ng.mean(disc.discriminate(x) ** 2), [x])
    assert err < 1e-5


def test_feature_net_frozen_and_two_taps(rng):
    net = nets.FeatureNet(1, seed=0)
    assert all(not t.requires_grad for t in net.params.values())
    taps = net.features(ng.tensor(rng.normal(size=(2, 8, 8, 1))))
    assert len(taps) == 2
    assert taps[0].shape[1] == 8 and taps[1].shape[1] == 4


def test_projector_zero_embedding_gives_bias(rng):
    proj = nets.Projector.create(6, 4, seed=0)
    proj.bias.data = rng.normal(size=4)
    out = nets.project(np.zeros(6), proj)
    assert np.allclose(out.data, proj.bias.data)


def test_projector_identity_init_square(rng):
    proj = nets.Projector.create(5, 5, seed=0)
    proj.weight.data = np.eye(5)
    proj.bias.data = np.zeros(5)
    v = rng.normal(size=5)
    assert np.allclose(nets.project(v, proj).data, v)


def test_projector_against_matmul_oracle(rng):
    proj = nets.Projector.create(6, 4, seed=0)
    batch = rng.normal(size=(3, 6))
    out = nets.project(batch, proj).data
    assert np.max(np.abs(out - (batch @ proj.weight.data + proj.bias.data))) < 1e-12


def test_projector_dim_mismatch(rng):
    proj = nets.Projector.create(6, 4, seed=0)
    with pytest.raises(ValueError, match="dim"):
        nets.project(np.zeros(5), proj)


def _toy_semantic_dataset(rng, n=96, size=16):
    # class 1 images carry a bright block; class 0 do not
    images = rng.normal(0.0, 0.15, size=(n, size, size, 1))
    labels = rng.integers(0, 2, size=n)
    for i in range(n):
        if labels[i] == 1:
            images[i, 4:10, 4:10, 0] += 1.2
    caps = [f"modality:ct;lesion:{'present' if c else 'absent'};size:none;pos:none;class:{c}"
            for c in labels]
    return np.clip(images, -1, 1), labels, caps


def test_pretrain_semantic_encoders_accuracy(rng):
    images, labels, caps = _toy_semantic_dataset(rng)
    sem = nets.pretrain_semantic_encoders(images[:64], labels[:64], caps, embed_dim=16,
                                          seed=0, steps=150, batch_size=16)
    logits = sem.vision.logits(ng.tensor(images[64:])).data
    acc = np.mean(logits.argmax(axis=1) == labels[64:])
    assert acc > 0.9


def test_pretrained_vision_encoder_is_frozen(rng):
    images, labels, caps = _toy_semantic_dataset(rng, n=32)
    sem = nets.pretrain_semantic_encoders(images, labels, caps, embed_dim=8,
                                          seed=0, steps=20, batch_size=8)
    before = sem.vision.param_hash()
    # constant inputs give constant embeddings: no graph is built at all
    emb = sem.vision.embed(ng.tensor(images[:4]))
    assert not emb.requires_grad
    # differentiable inputs flow, but parameters never take gradients
    emb2 = sem.vision.embed(ng.tensor(images[:4], requires_grad=True))
    ng.backward(ng.mean(emb2 * emb2))
    assert all(t.grad is None for t in sem.vision.params.values())
    assert sem.vision.param_hash() == before


def test_pretrain_rejects_unlabelled():
    with pytest.raises(ValueError, match="label"):
        nets.pretrain_semantic_encoders(np.zeros((4, 8, 8, 1)), None, ["a:b"])


def test_text_encoder_deterministic_and_distinct():
    vocab = ["lesion:absent", "lesion:present", "modality:ct"]
    t1 = nets.TextEncoder(vocab, 8, seed=5)
    t2 = nets.TextEncoder(vocab, 8, seed=5)
    cap = "modality:ct;lesion:present"
    assert np.array_equal(t1.embed(cap), t2.embed(cap))
    assert not np.array_equal(t1.embed(cap), t1.embed("modality:ct;lesion:absent"))


def test_text_encoder_unknown_token():
    enc = nets.TextEncoder(["a:b"], 4, seed=0)
    with pytest.raises(KeyError, match="unknown"):
        enc.embed("c:d")


def test_forward_purity_parameter_hash_stable(rng):
    enc = nets.Encoder(_enc_cfg(4), seed=0)
    before = enc.param_hash()
    enc.encode(ng.tensor(rng.normal(size=(1, 16, 16, 1))))
    assert enc.param_hash() == before
