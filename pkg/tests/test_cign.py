import math

import numpy as np
import pytest
import torch
from PIL import Image

from cannet.cign import (CignConfig, build_cign, classification_loss, cign_generate, generator_loss, load_pgm,
                         pre_decoder, save_pgm, save_png, to_uint8, train_cign)
from cannet.checkpoint import Checkpoint
from cannet.datasets import RendererParams, VariableSchema, render_images
from cannet.errors import ContractViolation, ParseError, SchemaMismatch

from _fd import grads_agree, numeric_grad


def labels_schema(k):
    return VariableSchema(tuple(f"l{i}" for i in range(k)), (2,) * k)


def small(k=3, d=4, shape=(8, 8, 1), **cfg):
    base = dict(decoder_hidden=16, disc_hidden=16)
    base.update(cfg)
    return build_cign(labels_schema(k), d, shape, CignConfig(**base))


def test_celeba_sized_scm_dimension():
    m = build_cign(labels_schema(9), 128, (16, 16, 1), CignConfig(decoder_hidden=8, disc_hidden=8))
    assert m.n == 137 and m.A.shape == (137, 137) and m.decoder.fan_in == 137


def test_desk_scale_dimensions():
    m = build_cign(labels_schema(3), 16, (16, 16, 1))
    assert m.n == 19 and m.decoder.fan_out == 256 and m.pixels == 256
    imgs = cign_generate(m, np.eye(3, dtype=int), torch.zeros(3, 16, dtype=torch.float64))
    assert imgs.shape == (3, 16, 16, 1)


def test_needs_labels():
    with pytest.raises(ContractViolation):
        build_cign(labels_schema(0), 4)
    with pytest.raises(ContractViolation):
        build_cign(VariableSchema(("a",), (3,)), 4)


def test_zero_adjacency_concatenates_conditioning():
    m = small()
    lab = np.array([[1, 0, 1], [0, 1, 1]])
    Z = torch.randn(2, 4, dtype=torch.float64)
    h = pre_decoder(m, lab, Z)
    assert torch.equal(h, torch.cat([torch.as_tensor(lab, dtype=torch.float64), Z], 1))


def test_labels_stay_clamped_under_nonzero_adjacency():
    m = small()
    with torch.no_grad():
        m.gen_params["scm.A"].copy_(torch.randn(7, 7, dtype=torch.float64))
    lab = np.array([[1, 0, 1]])
    h = pre_decoder(m, lab, torch.randn(1, 4, dtype=torch.float64))
    assert h[0, :3].tolist() == [1.0, 0.0, 1.0]


def test_conditioning_is_live_and_pure():
    m = small()
    Z = torch.randn(1, 4, dtype=torch.float64)
    a, b = pre_decoder(m, [[1, 0, 0]], Z), pre_decoder(m, [[0, 1, 0]], Z)
    assert not torch.equal(a, b)
    x1 = cign_generate(m, [[1, 0, 1]], Z)
    assert torch.equal(x1, cign_generate(m, [[1, 0, 1]], Z))
    assert x1.abs().max() <= 1


def test_bad_inputs():
    m = small()
    with pytest.raises(SchemaMismatch):
        pre_decoder(m, [[1, 0]], torch.zeros(1, 4))
    with pytest.raises(SchemaMismatch):
        pre_decoder(m, [[1, 0, 1]], torch.zeros(1, 5))
    with pytest.raises(ContractViolation):
        pre_decoder(m, [[2, 0, 1]], torch.zeros(1, 4))


def _zero_head(m):
    with torch.no_grad():
        for t in m.disc_params.params.values():
            t.zero_()


def test_classifier_loss_perfect_and_uniform():
    m = small()
    x = torch.zeros(5, 64, dtype=torch.float64)
    lab = np.tile([1, 0, 1], (5, 1))
    _zero_head(m)
    assert classification_loss(m, x, lab, x, lab).item() == pytest.approx(2 * 3 * math.log(2))
    with torch.no_grad():
        m.disc_params["cls.0.bias"].copy_(torch.tensor([60.0, -60.0, 60.0], dtype=torch.float64))
    assert classification_loss(m, x, lab, x, lab).item() == pytest.approx(0.0, abs=1e-20)


def test_classifier_loss_half_right_on_real_only():
    m = small(k=1)
    _zero_head(m)
    with torch.no_grad():
        # feature 0 follows pixel 0 for nonnegative inputs; the label logit is 100 * pixel 0
        m.disc_params["trunk.0.weight"][0, 0] = 1.0
        m.disc_params["trunk.2.weight"][0, 0] = 1.0
        m.disc_params["cls.0.weight"][0, 0] = 100.0
    real = torch.zeros(4, 64, dtype=torch.float64)
    fake = torch.zeros(4, 64, dtype=torch.float64)
    fake[:, 0] = 1.0
    ones = np.ones((4, 1), dtype=int)
    assert classification_loss(m, real, ones, fake, ones).item() == pytest.approx(math.log(2), abs=1e-12)


def test_generator_loss_gradient_matches_differences():
    m = small(k=2, d=2, decoder_batch_norm=False)
    with torch.no_grad():
        m.gen_params["scm.A"].copy_(0.3 * torch.randn(4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(1)))
    m.lag.lambda_bar, m.lag.rho = 0.7, 2.0
    lab = np.array([[1, 0], [0, 1], [1, 1]])
    Z = torch.randn(3, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    A = m.gen_params["scm.A"]
    loss, _ = generator_loss(m, lab, Z)
    (g,) = torch.autograd.grad(loss, A)

    def fn(a):
        with torch.no_grad():
            A.copy_(a)
            return generator_loss(m, lab, Z)[0]

    base = A.detach().clone()
    num = numeric_grad(fn, base)
    with torch.no_grad():
        A.copy_(base)
    assert grads_agree(g, num, 1e-4)


def test_class_weight_zero_leaves_class_head_untouched():
    lab = np.random.default_rng(0).integers(0, 2, (64, 2))
    imgs = render_images(lab, (8, 8, 1), RendererParams(block=3), seed=0)
    cfg = CignConfig(epochs=2, class_weight=0.0, decoder_hidden=16, disc_hidden=16, seed=3)
    before = build_cign(labels_schema(2), 4, (8, 8, 1), cfg)
    ckpt, hist = train_cign(imgs, lab, cfg, noise_width=4)
    cls_names = [k for k in ckpt.tensors if "/param/cls." in k]
    assert cls_names
    for k in cls_names:
        name = k.split("/param/", 1)[1]
        assert np.array_equal(ckpt.tensors[k], before.disc_params[name].detach().numpy())
    trunk = [k for k in ckpt.tensors if "/param/trunk.0.weight" in k][0]
    assert not np.array_equal(ckpt.tensors[trunk], before.disc_params["trunk.0.weight"].detach().numpy())
    assert len(hist) == 2 and hist[-1]["epoch"] == 2


def test_training_deterministic_and_roundtrips():
    lab = np.random.default_rng(1).integers(0, 2, (40, 2))
    imgs = render_images(lab, (8, 8, 1), RendererParams(block=3), seed=1)
    cfg = CignConfig(epochs=1, decoder_hidden=16, disc_hidden=16)
    a, _ = train_cign(imgs, lab, cfg, noise_width=3)
    b, _ = train_cign(imgs, lab, cfg, noise_width=3)
    assert a.to_bytes() == b.to_bytes()
    assert Checkpoint.from_bytes(a.to_bytes()).to_bytes() == a.to_bytes()


def test_uint8_mapping():
    assert to_uint8([-1.0, 0.0, 1.0, 5.0]).tolist() == [0, 128, 255, 255]


def test_png_and_pgm_roundtrip(tmp_path):
    img = np.linspace(-1, 1, 48).reshape(6, 8, 1)
    save_png(tmp_path / "x.png", img)
    px = np.asarray(Image.open(tmp_path / "x.png"))
    assert px.shape == (6, 8) and np.array_equal(px, to_uint8(img)[:, :, 0])
    save_pgm(tmp_path / "x.pgm", img)
    back = load_pgm(tmp_path / "x.pgm")
    assert np.array_equal(to_uint8(back), to_uint8(img))
    (tmp_path / "a.pgm").write_text("P2\n# comment\n2 1\n255\n0 255\n")
    assert load_pgm(tmp_path / "a.pgm")[:, :, 0].tolist() == [[-1.0, 1.0]]
    (tmp_path / "bad.pgm").write_text("P7\n1 1\n255\n0")
    with pytest.raises(ParseError):
        load_pgm(tmp_path / "bad.pgm")
