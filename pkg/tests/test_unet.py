import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import max_rel_error, numeric_grad
from neutrocaps.autodiff import Tensor, precision
from neutrocaps.errors import ConfigError, DataError, ShapeError
from neutrocaps.synth import SynthConfig, generate_wsi
from neutrocaps.unet import (
    UNet,
    UNetConfig,
    SegTrainConfig,
    build_unet,
    dice_coefficient,
    seg_loss,
    segment,
    train_segmenter,
    upscale_mask,
)


def unet_param_formula(depth, base, k=3, cin=3):
    """Closed form: every level has two k x k convs; decoder conv1 sees skip + upsampled."""
    total = 0
    w = [base * 2**i for i in range(depth + 1)]
    prev = cin
    for i in range(depth):
        total += (prev * k * k + 1) * w[i] + (w[i] * k * k + 1) * w[i]
        prev = w[i]
    total += (prev * k * k + 1) * w[depth] + (w[depth] * k * k + 1) * w[depth]
    for i in reversed(range(depth)):
        total += ((w[i + 1] + w[i]) * k * k + 1) * w[i] + (w[i] * k * k + 1) * w[i]
    return total + w[0] + 1


def nearest_oracle(arr, out_h, out_w):
    in_h, in_w = arr.shape
    out = np.zeros((out_h, out_w), arr.dtype)
    for r in range(out_h):
        for c in range(out_w):
            # sample at the output pixel centre
            src_r = min(int((r + 0.5) * in_h / out_h), in_h - 1)
            src_c = min(int((c + 0.5) * in_w / out_w), in_w - 1)
            out[r, c] = arr[src_r, src_c]
    return out


def test_small_unet_output_range():
    model = build_unet(UNetConfig(depth=1, base_filters=4, train_size=(16, 16)))
    x = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 16, 16)))
    out = model(x)
    assert out.shape == (1, 1, 16, 16)
    assert np.all((out.data > 0) & (out.data < 1))


@pytest.mark.parametrize("depth,base", [(1, 4), (2, 8), (4, 16), (3, 5)])
def test_parameter_count_formula(depth, base):
    model = UNet(UNetConfig(depth=depth, base_filters=base, train_size=(32, 32)))
    assert model.count_parameters() == unet_param_formula(depth, base)


def test_doubling_filters_roughly_quadruples():
    small = UNet(UNetConfig(depth=3, base_filters=8, train_size=(32, 32))).count_parameters()
    large = UNet(UNetConfig(depth=3, base_filters=16, train_size=(32, 32))).count_parameters()
    assert large == unet_param_formula(3, 16)
    assert 3.5 < large / small < 4.1


@pytest.mark.parametrize("depth", [1, 2, 3, 4])
def test_skip_shapes_match(depth):
    model = UNet(UNetConfig(depth=depth, base_filters=2, train_size=(32, 48)))
    out, pairs = model(Tensor(np.zeros((1, 3, 32, 48))), return_skips=True)
    assert len(pairs) == depth
    for up, skip in pairs:
        assert up[2:] == skip[2:]
    assert out.shape == (1, 1, 32, 48)


def test_config_rejects_indivisible_size():
    with pytest.raises(ConfigError):
        UNetConfig(depth=4, train_size=(100, 128)).validate()


# ---------------------------------------------------------------- dice
def test_dice_identity_disjoint_hand():
    ones = np.ones((4, 4))
    assert abs(dice_coefficient(ones, ones) - 1.0) < 1e-3
    assert dice_coefficient(np.array([0.0, 1.0]), np.array([1.0, 0.0])) < 1e-3
    gt = np.array([[1, 1], [0, 0]], float)
    pred = np.array([[1, 0], [1, 0]], float)
    assert abs(dice_coefficient(pred, gt) - 0.5) < 1e-3


def test_dice_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_coefficient(np.zeros(3), np.zeros(4))


def test_seg_loss_bounds_and_extremes():
    gt = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert abs(seg_loss(Tensor(gt), gt).item()) < 1e-3
    assert abs(seg_loss(Tensor(1 - gt), gt).item() - 1.0) < 1e-3


def test_seg_loss_gradient():
    rng = np.random.default_rng(2)
    gt = (rng.random((1, 1, 4, 5)) > 0.5).astype(float)
    pred = rng.uniform(0.05, 0.95, size=gt.shape)
    with precision(np.float64):
        t = Tensor(pred.copy(), requires_grad=True)
        seg_loss(t, gt).backward()
        num = numeric_grad(lambda p: seg_loss(Tensor(p), gt).item(), [pred.copy()])[0]
    assert max_rel_error(t.grad, num) < 1e-4


binary = st.lists(st.integers(0, 1), min_size=1, max_size=40)


@settings(max_examples=100, deadline=None)
@given(binary, st.randoms(use_true_random=False))
def test_dice_properties(bits, rnd):
    x = np.array(bits, float)
    y = x.copy()
    rnd.shuffle(y)
    assert abs(dice_coefficient(x, y) - dice_coefficient(y, x)) < 1e-12
    assert dice_coefficient(x, x) >= dice_coefficient(x, y) - 1e-12
    assert 0.0 <= dice_coefficient(x, y) <= 1.0 + 1e-12
    loss = seg_loss(Tensor(y), x).item()
    assert -1e-6 <= loss <= 1.0 + 1e-6


# ---------------------------------------------------------------- segment / resize
def test_segment_native_size_full_resolution():
    model = UNet(UNetConfig(depth=1, base_filters=2, train_size=(48, 64)))
    image = np.random.default_rng(0).integers(0, 256, size=(1936, 2584, 3), dtype=np.uint8)
    mask = segment(model, image)
    assert mask.shape == (1936, 2584)
    assert set(np.unique(mask)) <= {0, 1}


def test_zero_probability_gives_empty_mask():
    assert not upscale_mask(np.zeros((12, 16)) >= 0.5, (97, 130)).any()


@pytest.mark.parametrize("src,dst", [((12, 16), (97, 130)), ((48, 64), (484, 646)), ((5, 7), (3, 4))])
def test_upscale_matches_nearest_oracle(src, dst):
    low = (np.random.default_rng(1).random(src) > 0.5).astype(np.uint8)
    np.testing.assert_array_equal(upscale_mask(low, dst), nearest_oracle(low, *dst))


# ---------------------------------------------------------------- training
def _tiny_data(n, seed=0):
    cfg = SynthConfig(height=96, width=128, band_thickness=(0.15, 0.2), tissue_top=(0.1, 0.2),
                      neutrophil_radius=(2.0, 3.0), seed=seed)
    recs = [generate_wsi(cfg, i) for i in range(n)]
    return [(r.image, r.sc_mask) for r in recs]


def test_training_deterministic_and_bounded():
    data = _tiny_data(3)
    cfg = UNetConfig(depth=2, base_filters=4, train_size=(32, 48))
    tc = SegTrainConfig(epochs=2, batch_size=2, lr=1e-2)
    m1, h1 = train_segmenter(data[:2], data[2:], cfg, tc, seed=4)
    m2, h2 = train_segmenter(data[:2], data[2:], cfg, tc, seed=4)
    assert h1 == h2
    for k in m1.params:
        assert m1.params[k].data.tobytes() == m2.params[k].data.tobytes()
    assert all(0.0 <= row["val_dice"] <= 1.0 for row in h1)
    assert [row["epoch"] for row in h1] == [1, 2]


def test_training_rejects_empty():
    with pytest.raises(DataError):
        train_segmenter([], [], UNetConfig(depth=1, base_filters=2, train_size=(16, 16)))


@pytest.mark.slow
def test_overfit_eight_images():
    data = _tiny_data(8, seed=3)
    cfg = UNetConfig(depth=3, base_filters=8, train_size=(48, 64))
    _, hist = train_segmenter(data, [], cfg, SegTrainConfig(epochs=40, batch_size=2, lr=1e-3), seed=0)
    assert hist[-1]["train_dice"] > 0.9
