import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import peak_signal_noise_ratio, structural_similarity
from sklearn.metrics import accuracy_score, jaccard_score

from gradprom import autodiff as ad
from gradprom.autodiff import Tape
from gradprom.losses import ce_loss, pixel_loss, unsup_vr_loss
from gradprom.metrics import accuracy, confusion, miou, psnr, ssim, ssim_map
from gradprom.models import classifier_config, init_params, recognizer_forward, segmenter_config


def val(t):
    return t.item()


@pytest.mark.parametrize("kind,pred,target,expected", [
    ("mse", [0.3, 0.7], [0.3, 0.7], 0.0),
    ("mse", [0.0, 0.0], [1.0, 1.0], 1.0),
    ("l1", [0.0, 0.5], [1.0, 0.5], 0.5),
])
def test_pixel_loss(kind, pred, target, expected):
    assert val(pixel_loss(kind, ad.constant(pred), target)) == expected


def test_pixel_loss_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        pixel_loss("mse", ad.constant([1.0]), [1.0, 2.0])


def test_ce_uniform_logits():
    assert abs(val(ce_loss("image_level", ad.constant(np.zeros((4, 3))), [0, 1, 2, 0])) - math.log(3)) < 1e-15


def test_ce_two_class_value():
    got = val(ce_loss("image_level", ad.constant([[1.0, 0.0]]), [0]))
    assert abs(got - math.log(1 + math.exp(-1))) < 1e-15
    assert abs(got - 0.31326) < 1e-5


def test_ce_saturated():
    logits = np.zeros((2, 3))
    logits[0, 1] = logits[1, 2] = 50.0
    assert val(ce_loss("image_level", ad.constant(logits), [1, 2])) < 1e-9


def test_ce_pixel_level_matches_manual(rng):
    logits = rng.standard_normal((2, 3, 4, 4))
    masks = rng.integers(0, 3, size=(2, 4, 4))
    lse = np.log(np.exp(logits).sum(axis=1))
    picked = np.take_along_axis(logits, masks[:, None], axis=1)[:, 0]
    expected = float(np.mean(lse - picked))
    assert abs(val(ce_loss("pixel_level", ad.constant(logits), masks)) - expected) < 1e-12


@pytest.mark.parametrize("labels", [[3], [-1]])
def test_ce_label_out_of_range(labels):
    with pytest.raises(ValueError):
        ce_loss("image_level", ad.constant(np.zeros((1, 3))), labels)


def test_ce_gradient_fd(rng):
    labels = [0, 2, 1]
    assert ad.grad_check(lambda x: ce_loss("image_level", x, labels), rng.standard_normal((3, 3))) < 1e-7


@pytest.mark.parametrize("cfg", [classifier_config(3, channels=4), segmenter_config(2, channels=4)],
                         ids=["clf", "seg"])
def test_unsup_vr_loss(cfg, rng):
    p = init_params(cfg, 0)
    clean = rng.uniform(size=(2, 1, 8, 8))
    enh = rng.uniform(size=(2, 1, 8, 8))
    assert val(unsup_vr_loss(p.on_tape(None), ad.constant(clean), clean, cfg)) == 0.0
    # two independent forwards
    za = predict_logits(p, enh, cfg)
    zb = predict_logits(p, clean, cfg)
    expected = float(np.mean((za - zb) ** 2))
    assert abs(val(unsup_vr_loss(p.on_tape(None), ad.constant(enh), clean, cfg)) - expected) < 1e-14


def predict_logits(p, x, cfg):
    return recognizer_forward(p.on_tape(None), x, cfg).numpy()


def test_unsup_clean_branch_gets_no_gradient(rng):
    cfg = classifier_config(3, channels=4)
    tape = Tape()
    clean = tape.leaf(rng.uniform(size=(2, 1, 8, 8)))
    enh = tape.leaf(rng.uniform(size=(2, 1, 8, 8)))
    loss = unsup_vr_loss(init_params(cfg, 0).on_tape(None), enh, clean, cfg)
    g = ad.backward(tape, loss, wrt=[clean, enh])
    assert np.all(g[clean.node] == 0.0)
    assert np.linalg.norm(g[enh.node]) > 0


# ---- PSNR

def test_psnr_examples():
    x = np.random.default_rng(0).uniform(size=(16, 16))
    assert psnr(x, x) == 99.0
    assert abs(psnr(np.full((8, 8), 0.5), np.full((8, 8), 0.6)) - 20.0) < 1e-9
    assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == 0.0


def test_psnr_matches_skimage(rng):
    a, b = rng.uniform(size=(32, 32)), rng.uniform(size=(32, 32))
    assert abs(psnr(a, b) - peak_signal_noise_ratio(b, a, data_range=1.0)) < 1e-10


def test_psnr_decreases_with_noise(rng):
    clean = rng.uniform(0.2, 0.8, size=(64, 64))
    e = rng.standard_normal(clean.shape)
    values = [psnr(clean + s * e, clean) for s in (0.05, 0.1, 0.2, 0.3)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


# ---- SSIM

def test_ssim_identity_and_constants(rng):
    x = rng.uniform(size=(32, 32))
    assert abs(ssim(x, x) - 1.0) < 1e-12
    expected = 1e-4 / (1 + 1e-4)
    assert abs(ssim(np.zeros((16, 16)), np.ones((16, 16))) - expected) < 1e-9


def test_ssim_map_matches_skimage(rng):
    a = rng.uniform(size=(24, 20))
    b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
    _, ref = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                   use_sample_covariance=False, full=True)
    np.testing.assert_allclose(ssim_map(a, b), ref, rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_ssim_symmetric_and_bounded(seed):
    r = np.random.default_rng(seed)
    a, b = r.uniform(size=(12, 12)), r.uniform(size=(12, 12))
    s = ssim(a, b)
    assert -1.0 <= s <= 1.0
    assert abs(s - ssim(b, a)) < 1e-14


def test_ssim_shift_below_one(rng):
    x = rng.uniform(0.1, 0.8, size=(16, 16))
    assert ssim(x, x + 0.05) < 1.0


def test_ssim_channels_averaged(rng):
    a, b = rng.uniform(size=(3, 12, 12)), rng.uniform(size=(3, 12, 12))
    assert abs(ssim(a, b) - np.mean([ssim(a[c], b[c]) for c in range(3)])) < 1e-15


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


# ---- accuracy / mIoU

def test_accuracy_examples():
    eye = np.eye(4)
    assert accuracy(eye, [0, 1, 2, 3]) == 1.0
    assert accuracy(eye, [0, 0, 0, 0]) == 0.25
    assert accuracy([[0.0, 0.0]], [0]) == 1.0


def test_accuracy_matches_sklearn(rng):
    logits = rng.standard_normal((50, 3))
    labels = rng.integers(0, 3, 50)
    assert accuracy(logits, labels) == accuracy_score(labels, logits.argmax(1))


def test_miou_hand_counted():
    gt = np.array([[[0, 1], [0, 1]]])
    logits = np.zeros((1, 2, 2, 2))
    logits[:, 0] = 1.0  # predict background everywhere
    assert miou(logits, gt) == 0.25


def test_miou_perfect_and_absent_class():
    gt = np.zeros((1, 3, 3), dtype=int)
    logits = np.zeros((1, 2, 3, 3))
    logits[:, 0] = 1.0
    assert miou(logits, gt) == 1.0


def test_miou_matches_sklearn_macro_jaccard(rng):
    masks = rng.integers(0, 3, size=(4, 6, 6))
    logits = rng.standard_normal((4, 3, 6, 6))
    ref = jaccard_score(masks.reshape(-1), logits.argmax(1).reshape(-1), average="macro")
    assert abs(miou(logits, masks) - ref) < 1e-15


def test_metrics_permutation_invariant(rng):
    logits = rng.standard_normal((6, 2, 4, 4))
    masks = rng.integers(0, 2, size=(6, 4, 4))
    perm = rng.permutation(6)
    assert miou(logits, masks) == miou(logits[perm], masks[perm])
    clf, lab = rng.standard_normal((6, 3)), rng.integers(0, 3, 6)
    assert accuracy(clf, lab) == accuracy(clf[perm], lab[perm])


def test_confusion_counts():
    logits = np.zeros((1, 2, 1, 3))
    logits[0, 1, 0, 0] = 1.0
    cm = confusion(logits, np.array([[[1, 1, 0]]]))
    np.testing.assert_array_equal(cm, [[1, 0], [1, 1]])
