import numpy as np
import pytest

from gradcheck import relative_errors
from voxelbench.errors import FormatError, ShapeError, TrainingError
from voxelbench.neuralseg import (
    AdamState,
    TrainConfig,
    UNetConfig,
    UNetModel,
    adam_step,
    bce_loss,
    init_unet,
    load_model,
    model_footprint,
    predict_voi,
    save_model,
    threshold_mask,
    train_unet,
    unet_backward,
    unet_forward,
)
from voxelbench.neuralseg import unet as unet_mod
from voxelbench.neuralseg.training import axial_slices, build_samples
from voxelbench.neuralseg.unet import layer_plan, normalize_intensities
from voxelbench.volgrid import VoiPatch


def small_model(rank, dtype=np.float64, extent=16, seed=0):
    cfg = UNetConfig(rank=rank, depth=2, base_channels=2, input_extent=extent)
    return init_unet(cfg, seed, dtype)


def randomize_biases(model, rng):
    # zero biases put ReLU-dead neighbourhoods exactly on the kink, where a
    # central difference sees half the slope
    for name, v in model.params.items():
        if name.endswith(".b"):
            v[...] = rng.normal(0, 0.1, size=v.shape)


@pytest.mark.parametrize("rank", [2, 3])
def test_end_to_end_gradient_finite_difference(rank):
    # float64 backward pass against differences of an extended-precision copy;
    # the finer oracle allows steps that rarely straddle a ReLU or pooling switch
    rng = np.random.default_rng(rank)
    model = small_model(rank)
    randomize_biases(model, rng)
    n = 2 if rank == 3 else 3
    x = rng.normal(size=(n, 1) + (16,) * rank)
    target = (rng.uniform(size=x.shape) < 0.3).astype(float)
    prob, cache = unet_forward(model, x, keep_cache=True)
    _, dprob = bce_loss(prob, target)
    grads, dx = unet_backward(model, cache, dprob, need_input_grad=True)
    assert set(grads) == set(model.params)

    fine = UNetModel(model.config, {k: v.astype(np.longdouble) for k, v in model.params.items()})
    x_fine, t_fine = x.astype(np.longdouble), target.astype(np.longdouble)

    def loss():
        return bce_loss(unet_forward(fine, x_fine), t_fine)[0]

    for name, w in fine.params.items():
        errs = relative_errors(loss, w, grads[name], rng, n_coords=100, eps=(1e-6, 1e-7))
        assert errs.max() <= 1e-4, name
    assert relative_errors(loss, x_fine, dx, rng, n_coords=100, eps=(1e-6, 1e-7)).max() <= 1e-4


def test_footprint_matches_counted_forward_tensors(monkeypatch):
    counted = []

    def tally(fn, pick=lambda out: out):
        def wrapped(*args, **kwargs):
            out = fn(*args, **kwargs)
            counted.append(pick(out)[0].size)  # per batch item
            return out

        return wrapped

    layers = unet_mod.layers
    monkeypatch.setattr(layers, "conv_forward", tally(layers.conv_forward))
    monkeypatch.setattr(layers, "relu_forward", tally(layers.relu_forward, lambda o: o[0]))
    monkeypatch.setattr(layers, "maxpool_forward", tally(layers.maxpool_forward, lambda o: o[0]))
    monkeypatch.setattr(layers, "sigmoid", tally(layers.sigmoid))
    ups = []

    def up(fn):
        def wrapped(*args, **kwargs):
            out = fn(*args, **kwargs)
            ups.append(out[0].size)
            return out

        return wrapped

    monkeypatch.setattr(layers, "upconv_forward", up(layers.upconv_forward))
    for rank, depth in ((2, 2), (3, 2), (2, 3)):
        counted.clear()
        ups.clear()
        cfg = UNetConfig(rank=rank, depth=depth, base_channels=3, input_extent=16)
        model = init_unet(cfg, 0, np.float32)
        x = np.zeros((1, 1) + (16,) * rank, dtype=np.float32)
        unet_forward(model, x)
        # input + every layer output + upconv outputs + concatenations (twice the upconv size)
        total = x.size + sum(counted) + 3 * sum(ups)
        fp = model_footprint(cfg, batch_size=4)
        assert fp["activation_elements"] == total
        params = sum(v.size for v in model.params.values())
        assert fp["parameter_count"] == params
        assert fp["estimated_bytes"] == 4 * (4 * params + 4 * total)


def test_rank3_footprint_dominates_rank2():
    cfgs = {r: UNetConfig(rank=r, depth=2, base_channels=8, input_extent=48) for r in (2, 3)}
    fp = {r: model_footprint(c, batch_size=8) for r, c in cfgs.items()}
    assert fp[3]["activation_elements"] >= 5 * fp[2]["activation_elements"]
    assert fp[3]["estimated_bytes"] >= 5 * fp[2]["estimated_bytes"]


def test_config_validation_and_plan():
    with pytest.raises(ShapeError):
        UNetConfig(rank=4)
    with pytest.raises(ShapeError):
        UNetConfig(depth=4, input_extent=40)
    names = [n for n, _, _ in layer_plan(UNetConfig(depth=4))]
    assert names[:2] == ["enc0.conv1", "enc0.conv2"] and names[-1] == "head"
    assert sum(n.endswith(".up") for n in names) == 4


def test_he_init_scale():
    model = init_unet(UNetConfig(rank=3, depth=2, base_channels=16, input_extent=16), 3)
    w = model.params["enc1.conv2.w"]
    # enc1.conv2 maps 32 -> 32 channels with 27 taps
    assert w.std() == pytest.approx(np.sqrt(2 / (32 * 27)), rel=0.05)
    assert not model.params["enc1.conv2.b"].any()


def test_wrong_input_shape():
    model = small_model(2)
    with pytest.raises(ShapeError):
        unet_forward(model, np.zeros((1, 1, 16, 16, 16)))
    with pytest.raises(ShapeError):
        unet_forward(model, np.zeros((1, 1, 18, 16)))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_model_file_round_trip(tmp_path, dtype):
    model = small_model(3, dtype, seed=5)
    save_model(model, tmp_path / "m.unet")
    back = load_model(tmp_path / "m.unet")
    assert back.config == model.config and back.seed == model.seed
    for k, v in model.params.items():
        assert back.params[k].dtype == v.dtype
        assert back.params[k].tobytes() == v.tobytes()
    save_model(back, tmp_path / "again.unet")
    assert (tmp_path / "m.unet").read_bytes() == (tmp_path / "again.unet").read_bytes()


def test_model_file_errors(tmp_path):
    bad = tmp_path / "bad.unet"
    bad.write_bytes(b"something else\n")
    with pytest.raises(FormatError):
        load_model(bad)
    model = small_model(2)
    save_model(model, tmp_path / "m.unet")
    raw = (tmp_path / "m.unet").read_bytes().replace(b"depth = 2", b"depth = 1")
    bad.write_bytes(raw)
    with pytest.raises(FormatError):
        load_model(bad)


def test_adam_matches_hand_update():
    w = {"a": np.array([1.0, -2.0])}
    g = {"a": np.array([0.5, 0.1])}
    state = AdamState.for_weights(w, learning_rate=0.1)
    adam_step(state, w, g)
    # first bias-corrected step moves each weight by lr * sign(g) (up to epsilon)
    np.testing.assert_allclose(w["a"], [0.9, -2.1], atol=1e-7)
    first = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8)
    adam_step(state, w, {"a": np.array([-0.5, 0.1])})
    m = 0.9 * 0.05 + 0.1 * -0.5
    v = 0.999 * 0.00025 + 0.001 * 0.25
    step = (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert w["a"][0] == pytest.approx(first - 0.1 * step, abs=1e-12)


def test_normalize_intensities_window():
    cfg = UNetConfig(intensity_window=(-100.0, 300.0))
    out = normalize_intensities(np.array([-500.0, -100.0, 100.0, 300.0, 900.0]), cfg)
    np.testing.assert_allclose(out, [-1, -1, 0, 1, 1])


def _blob_patches(n, extent, rng):
    patches = []
    grid = np.indices((extent,) * 3).astype(float)
    for i in range(n):
        c = rng.uniform(extent * 0.35, extent * 0.65, size=3)
        r = rng.uniform(extent * 0.2, extent * 0.3)
        inside = ((grid - c[:, None, None, None]) ** 2).sum(0) <= r * r
        img = np.where(inside, 120.0, -80.0) + rng.normal(0, 10, size=inside.shape)
        patches.append(VoiPatch(img.astype(np.float32), inside.astype(np.uint8), source_case=f"p{i}"))
    return patches


def test_build_samples_keeps_every_slice():
    rng = np.random.default_rng(0)
    patches = _blob_patches(2, 16, rng)
    cfg2 = UNetConfig(rank=2, depth=2, input_extent=16)
    x, y = build_samples(cfg2, patches)
    assert x.shape == (32, 1, 16, 16) and y.shape == x.shape
    np.testing.assert_array_equal(y[16:, 0], axial_slices(patches[1].labels))
    with pytest.raises(TrainingError):
        build_samples(cfg2, [VoiPatch(patches[0].intensities)])


@pytest.mark.parametrize("rank", [2, 3])
def test_training_learns_and_is_deterministic(rank):
    rng = np.random.default_rng(rank)
    patches = _blob_patches(4, 16, rng)
    cfg = UNetConfig(rank=rank, depth=2, base_channels=4, input_extent=16)
    tcfg = TrainConfig(batch_size=1 if rank == 3 else 8, epochs=20 if rank == 3 else 6, seed=3)
    model, history = train_unet(cfg, patches, tcfg)
    assert history[-1] < 0.5 * history[0]
    again, _ = train_unet(cfg, patches, tcfg)
    for k in model.params:
        assert model.params[k].tobytes() == again.params[k].tobytes()
    prob = predict_voi(model, patches[0])
    assert prob.probabilities.shape == (16,) * 3 and prob.labels is None
    mask = threshold_mask(prob, 0.5).labels
    overlap = 2 * (mask & patches[0].labels).sum() / (mask.sum() + patches[0].labels.sum())
    assert overlap > 0.7


def test_rank2_prediction_is_slice_stacked():
    rng = np.random.default_rng(1)
    model = small_model(2, np.float32)
    patch = _blob_patches(1, 16, rng)[0]
    prob = predict_voi(model, patch).probabilities
    x = normalize_intensities(patch.intensities, model.config)
    for z in (0, 7, 15):
        single = unet_forward(model, x[None, None, :, :, z])[0, 0]
        np.testing.assert_allclose(prob[:, :, z], single, rtol=1e-5, atol=1e-6)


def test_threshold_mask_inclusive():
    p = VoiPatch(np.zeros((2, 2, 2), np.float32), probabilities=np.full((2, 2, 2), 0.3))
    assert threshold_mask(p, 0.3).labels.all()
    assert not threshold_mask(p, 0.31).labels.any()
    with pytest.raises(ValueError):
        threshold_mask(p, 1.0)
