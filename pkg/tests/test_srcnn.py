import numpy as np
import pytest
from hypothesis import given, strategies as st

from irissr import srcnn
from irissr.image import degrade
from irissr.nn import CorruptWeightsError
from irissr.srcnn import (DESK_INIT, MARGIN, OUT, PATCH, MissingWeightsError, SrcnnModel, TrainRegime,
                          build_default, cascade, desk_config, make_training_set, pass_count, super_resolve,
                          train)
from irissr.synth import texture_image


@pytest.fixture(scope="module")
def model():
    return build_default(2, seed=0, init_std=DESK_INIT)


def test_architecture(model):
    assert model.n_params == 9 * 9 * 64 + 64 + 64 * 32 + 32 + 5 * 5 * 32 + 1 == 8129
    assert model.forward(np.zeros((PATCH, PATCH))).shape == (OUT, OUT)
    assert model.forward(np.zeros((3, PATCH, PATCH))).shape == (3, OUT, OUT)
    assert MARGIN == 6


def test_default_initialisation_is_small_gaussian():
    m = build_default(2, seed=1)
    for layer in m.net.layers:
        assert abs(layer.weights.std() - 1e-3) < 2e-4
        assert not layer.bias.any()


def test_enhance_equals_patchwise_centres(model, rng):
    img = rng.random((40, 40))
    full = model.enhance(img)
    padded = np.pad(img, MARGIN, mode="reflect")
    for r, c in [(0, 0), (13, 29), (39, 39), (20, 5)]:
        window = padded[r : r + 13, c : c + 13]
        centre = model.forward(window)[0, 0]
        assert abs(np.clip(centre, 0, 1) - full[r, c]) < 1e-5


def test_wrong_architecture_rejected(model):
    with pytest.raises(ValueError):
        SrcnnModel(model.net, provenance="borrowed")
    net = build_default().net
    net.layers = net.layers[:2]
    with pytest.raises(ValueError):
        SrcnnModel(net)


def test_training_pairs_are_co_anchored(rng):
    hr = rng.random((60, 50))
    pairs = make_training_set([hr], 2, patch_stride=14)
    lr = degrade(hr, 2)
    assert len(pairs) == 2 * 2
    p = pairs[-1]  # origin (14, 14)
    assert np.array_equal(p.input, lr[14:47, 14:47])
    assert np.array_equal(p.target, hr[20:41, 20:41])


def test_small_images_are_skipped(rng):
    assert make_training_set([rng.random((20, 80))], 2) == []


@given(st.sampled_from([2, 4, 8, 16]), st.sampled_from([2, 4, 8, 16]))
def test_pass_count(target, trained):
    k = np.log2(target) / np.log2(trained)
    if k >= 1 and k == int(k):
        assert pass_count(target, trained) == int(k)
    else:
        with pytest.raises(ValueError):
            pass_count(target, trained)


def test_pass_count_rejects_non_powers():
    with pytest.raises(ValueError):
        pass_count(6, 2)
    with pytest.raises(ValueError):
        pass_count(4, 3)


def test_cascade_sizes_land_on_target():
    sizes = []
    out = cascade(np.zeros((28, 28)), 8, 2, lambda im: im, out_shape=(231, 231),
                  on_pass=lambda j, im: sizes.append(im.shape))
    assert sizes == [(57, 57), (115, 115), (231, 231)]
    assert out.shape == (231, 231)
    assert cascade(np.zeros((5, 7)), 4, 2, lambda im: im).shape == (20, 28)


@given(st.sampled_from([(2, 2), (4, 2), (8, 2), (16, 2), (4, 4), (16, 4), (8, 8), (16, 16)]))
def test_cascade_runs_the_model_once_per_pass(case):
    target, trained = case
    calls = []
    cascade(np.full((8, 8), 0.5), target, trained, lambda im: calls.append(im.shape) or im)
    assert len(calls) == pass_count(target, trained)


def test_super_resolve_constant_image_stays_constant():
    # an identity-like model: zero weights and the offset carry any constant through
    m = build_default(2, seed=0)
    for layer in m.net.layers:
        layer.weights[:] = 0
    out = super_resolve(np.full((10, 10), 0.5), 4, m)
    assert out.shape == (40, 40)
    np.testing.assert_allclose(out, 0.5, atol=1e-6)


def test_weights_roundtrip(tmp_path, model, rng):
    model.provenance = "fine-tuned"
    path = tmp_path / "m.nnw"
    model.save(path)
    back = SrcnnModel.load(path)
    assert (back.trained_factor, back.provenance, back.offset) == (2, "fine-tuned", 0.5)
    x = rng.random((PATCH, PATCH))
    assert np.array_equal(back.forward(x), model.forward(x))
    model.provenance = "scratch"


def test_load_errors(tmp_path):
    with pytest.raises(MissingWeightsError):
        SrcnnModel.load(tmp_path / "absent.nnw")
    (tmp_path / "bad.nnw").write_bytes(b"junk")
    with pytest.raises(CorruptWeightsError):
        SrcnnModel.load(tmp_path / "bad.nnw")


@pytest.fixture(scope="module")
def pairs():
    rng = np.random.default_rng(0)
    return make_training_set([texture_image(64, rng) for _ in range(3)], 2, patch_stride=7)


def test_from_scratch_training_reduces_loss(pairs):
    m = build_default(2, seed=0, init_std=DESK_INIT)
    cfg = desk_config(iterations=120, log_every=20)
    _, hist = train(m, pairs, TrainRegime("FS", 2, cfg))
    assert [h[0] for h in hist] == [20, 40, 60, 80, 100, 120]
    assert hist[-1][1] < 0.5 * hist[0][1]


def test_training_is_deterministic(pairs):
    cfg = desk_config(iterations=10)
    a, _ = train(build_default(2, seed=5, init_std=DESK_INIT), pairs, TrainRegime("FS", 2, cfg))
    b, _ = train(build_default(2, seed=5, init_std=DESK_INIT), pairs, TrainRegime("FS", 2, cfg))
    for pa, pb in zip(a.net.params(), b.net.params()):
        assert np.array_equal(pa, pb)


def test_divergence_is_reported(pairs):
    cfg = desk_config(iterations=50, learning_rate=1e6, last_layer_lr=1e6)
    with np.errstate(all="ignore"), pytest.raises(FloatingPointError):
        train(build_default(2, seed=0, init_std=DESK_INIT), pairs, TrainRegime("FS", 2, cfg))


def test_regimes(pairs, model):
    base = model.to_bytes()
    tl, hist = train(None, [], TrainRegime("TL", 4, desk_config(), base))
    assert hist == [] and tl.provenance == "transfer"
    for pa, pb in zip(tl.net.params(), model.net.params()):
        assert np.array_equal(pa, pb)
    ft, hist = train(None, pairs, TrainRegime("FT", 4, desk_config(iterations=5), base))
    assert ft.provenance == "fine-tuned" and ft.trained_factor == 4 and len(hist) == 1
    assert not np.array_equal(ft.net.layers[0].weights, model.net.layers[0].weights)
    # the base model is never modified in place
    assert np.array_equal(SrcnnModel.from_bytes(base).net.layers[0].weights, model.net.layers[0].weights)


def test_regime_validation():
    with pytest.raises(ValueError):
        TrainRegime("XX")
    with pytest.raises(ValueError):
        TrainRegime("FS", 2, base_weights=b"x")
    with pytest.raises(ValueError):
        TrainRegime("FS", 3)
    with pytest.raises(MissingWeightsError):
        train(None, [1], TrainRegime("FT", 2))
    with pytest.raises(ValueError):
        train(None, [], TrainRegime("FS", 2))


def test_default_config_follows_reference_rates():
    cfg = srcnn.SrcnnTrainConfig()
    assert (cfg.learning_rate, cfg.last_layer_lr, cfg.momentum) == (1e-4, 1e-5, 0.9)
