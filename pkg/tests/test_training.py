import numpy as np
import pytest

from dubm3d import tensor as T
from dubm3d.imageio import make_phantom
from dubm3d.matching import MatchConfig, plan_matches
from dubm3d.pipeline import Model
from dubm3d.rng import SplitMix64
from dubm3d.training import (
    AdamState,
    Checkpoint,
    CheckpointError,
    Sample,
    TrainConfig,
    adam_step,
    fit,
    load_checkpoint,
    mse_loss,
    sample_loss,
    save_checkpoint,
    split_dataset,
    train_epoch,
)
from dubm3d.unet import Descriptor, init_identity, init_params

from oracles import central_diff, du_loss_ref, rel_err

TOY_MATCH = MatchConfig(patch=4, stride=2, window=2, group_size=2)


def toy_model(mode="du-bm3d", seed=0):
    return Model.create(mode, seed=seed, match=TOY_MATCH, width1=4, width2=6)


def toy_pairs(n, size=16, seed=0):
    rng = SplitMix64(seed)
    out = []
    for i in range(n):
        clean = make_phantom("disks", size, size, seed + i).pixels
        out.append(Sample(clean + 0.05 * rng.normal(clean.shape), clean))
    return out


def scalar_params(value):
    return {"theta": T.Tensor(np.array([value]), requires_grad=True)}


def test_mse_loss_values_and_gradient():
    x = SplitMix64(0).uniform((6, 5))
    assert mse_loss(x, x) == 0
    assert mse_loss(x + 0.1, x) == pytest.approx(0.01)
    with pytest.raises(ValueError):
        mse_loss(np.zeros((2, 2)), np.zeros((2, 3)))
    y = SplitMix64(1).uniform((6, 5))
    p = T.Tensor(x, requires_grad=True)
    with T.Tape() as tape:
        loss = T.mse(p, T.Tensor(y))
    T.backward(loss, tape)
    fd = central_diff(lambda v: np.mean((v - y) ** 2), x, h=1e-4)
    np.testing.assert_allclose(p.grad, 2 * (x - y) / x.size, rtol=1e-5, atol=1e-9)
    np.testing.assert_allclose(p.grad, fd, rtol=1e-3, atol=1e-8)


def test_adam_first_step():
    params = scalar_params(0.0)
    state = AdamState.zeros(params)
    new, state = adam_step(params, {"theta": np.array([1.0])}, state, TrainConfig())
    assert state.t == 1
    assert new["theta"].data[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-6)
    assert new["theta"].shape == (1,)


def test_adam_zero_gradient_keeps_params():
    params = init_params(Descriptor(channels=2, patch=4, width1=3, width2=4), 0)
    state = AdamState.zeros(params)
    new, _ = adam_step(params, {k: np.zeros(p.shape) for k, p in params.items()}, state, TrainConfig())
    assert list(new) == list(params)
    for k in params:
        assert new[k].data.tobytes() == params[k].data.tobytes()


def test_adam_descends_quadratic():
    params = scalar_params(1.0)
    state = AdamState.zeros(params)
    cfg = TrainConfig(lr=1e-2)
    prev = 1.0
    for _ in range(100):
        theta = params["theta"].data.astype(np.float64)
        params, state = adam_step(params, {"theta": 2 * theta}, state, cfg)
        cur = abs(float(params["theta"].data[0]))
        assert cur < prev
        prev = cur
    assert prev < 0.5


def test_split_sizes():
    tr, va, te = split_dataset(list(range(100)), (0.69, 0.14, 0.17), seed=3)
    assert (len(tr), len(va), len(te)) == (69, 14, 17)
    assert sorted(tr + va + te) == list(range(100))
    assert split_dataset(list(range(100)), seed=3) == (tr, va, te)
    assert split_dataset(list(range(10)), (1, 0, 0))[0] == split_dataset(list(range(10)), (1, 0, 0), seed=0)[0]
    assert len(split_dataset(list(range(10)), (1, 0, 0))[0]) == 10


@pytest.mark.parametrize("fractions", [(0.5, 0.5, 0.5), (0.5, 0.5), (1.2, -0.2, 0.0)])
def test_split_bad_fractions(fractions):
    with pytest.raises(ValueError):
        split_dataset([1, 2, 3], fractions)


def test_split_empty():
    with pytest.raises(ValueError):
        split_dataset([])


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(batch_size=0), dict(lr=0.0), dict(beta1=1.0), dict(mode="x")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_full_pipeline_gradient_against_float64_oracle():
    pair = toy_pairs(1)[0]
    model = toy_model(seed=4)
    rng = SplitMix64(8)
    for name, p in model.params.items():
        if name.endswith(".bias"):
            p.data[...] = rng.uniform_range(0.05, 0.2, p.shape)

    loss, tape = sample_loss(model, pair)
    T.backward(loss, tape)
    coords = pair.plan(TOY_MATCH).coords
    ref = {k: p.data.astype(np.float64) for k, p in model.params.items()}

    checked = 0
    for name in ("enc1.weight", "enc2.weight", "mid.weight", "dec1.weight", "out.weight", "out.bias"):
        flat = rng.permutation(model.params[name].size)[:3]
        for i in flat:
            idx = np.unravel_index(i, model.params[name].shape)

            def f(v, name=name, idx=idx):
                p = dict(ref)
                p[name] = ref[name].copy()
                p[name][idx] = v[0]
                return du_loss_ref(p, pair.noisy, pair.clean, coords, TOY_MATCH.patch)

            fd = central_diff(f, np.array([ref[name][idx]]), h=1e-6)[0]
            if abs(fd) < 1e-7:
                continue
            assert rel_err(model.params[name].grad[idx], fd) < 1e-3, (name, idx)
            checked += 1
    assert checked >= 10


def test_training_is_deterministic():
    data = toy_pairs(4)
    finals = []
    for _ in range(2):
        model = toy_model(seed=1)
        fit(data, model, TrainConfig(epochs=2, batch_size=2, seed=5))
        finals.append(b"".join(p.data.tobytes() for p in model.params.values()))
    assert finals[0] == finals[1]


def test_shuffle_depends_on_seed():
    data = toy_pairs(4)
    outs = []
    for seed in (0, 1):
        model = toy_model(seed=1)
        train_epoch(data, model, AdamState.zeros(model.params), TrainConfig(batch_size=3, seed=seed))
        outs.append(model.params["out.bias"].data.tobytes())
    assert outs[0] != outs[1]


def test_identity_pair_stays_near_zero_loss():
    clean = make_phantom("shepp-like", 16, 16, 2).pixels
    pair = Sample(clean, clean)
    desc = Descriptor(channels=TOY_MATCH.group_size, patch=TOY_MATCH.patch, width1=4, width2=6)
    model = Model("du-bm3d", desc, init_identity(desc), TOY_MATCH)
    before, _ = sample_loss(model, pair)
    state, after = train_epoch([pair], model, AdamState.zeros(model.params), TrainConfig(lr=1e-4))
    final, _ = sample_loss(model, pair)
    assert before.item() < 1e-10
    assert final.item() <= before.item() + 1e-6


def test_val_loss_decreases():
    data = toy_pairs(6, seed=10)
    model = toy_model(seed=2)
    _, hist = fit(data[:4], model, TrainConfig(epochs=8, batch_size=1, lr=3e-3), val=data[4:])
    assert hist[-1]["val_loss"] < hist[0]["val_loss"]


def test_empty_dataset_rejected():
    model = toy_model()
    with pytest.raises(ValueError):
        train_epoch([], model, AdamState.zeros(model.params), TrainConfig())


def test_non_finite_loss_raises():
    pair = toy_pairs(1)[0]
    model = toy_model()
    model.params["out.bias"].data[:] = np.nan
    with pytest.raises(FloatingPointError):
        train_epoch([pair], model, AdamState.zeros(model.params), TrainConfig())


def test_frozen_operators_after_training():
    probe = make_phantom("piecewise", 24, 24, 9).pixels
    before = plan_matches(probe, TOY_MATCH)
    data = toy_pairs(2)
    plans = [s.plan(TOY_MATCH).to_bytes() for s in data]
    model = toy_model()
    fit(data, model, TrainConfig(epochs=25, batch_size=1))
    after = plan_matches(probe, TOY_MATCH)
    assert after.to_bytes() == before.to_bytes()
    assert np.array_equal(after.weights, before.weights)
    assert [s.plan(TOY_MATCH).to_bytes() for s in data] == plans


@pytest.mark.parametrize("mode", ["du-bm3d", "unet-image"])
def test_checkpoint_roundtrip_bit_exact(tmp_path, mode):
    model = toy_model(mode, seed=3)
    state = AdamState.zeros(model.params)
    state, _ = train_epoch(toy_pairs(2), model, state, TrainConfig(batch_size=1))
    path = tmp_path / "m.dubm"
    save_checkpoint(path, Checkpoint(model, state, steps=state.t))
    back = load_checkpoint(path)
    assert back.model.mode == mode and back.steps == 2 and back.adam.t == 2
    assert back.model.descriptor == model.descriptor and back.model.match == model.match
    for k, p in model.params.items():
        assert back.model.params[k].data.tobytes() == p.data.tobytes()
        assert back.adam.m[k].tobytes() == state.m[k].tobytes()
        assert back.adam.v[k].tobytes() == state.v[k].tobytes()
    x = toy_pairs(1, seed=20)[0].noisy
    assert back.model(x).tobytes() == model(x).tobytes()

    path2 = tmp_path / "m2.dubm"
    save_checkpoint(path2, back)
    assert path2.read_bytes() == path.read_bytes()


def test_checkpoint_without_optimizer(tmp_path):
    path = tmp_path / "m.dubm"
    save_checkpoint(path, Checkpoint(toy_model()))
    assert load_checkpoint(path).adam is None


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "m.dubm"
    save_checkpoint(path, Checkpoint(toy_model(), AdamState.zeros(toy_model().params)))
    raw = path.read_bytes()
    cases = {
        "trunc": raw[: len(raw) // 2],
        "short": raw[:6],
        "magic": b"XUBM" + raw[4:],
        "version": raw[:4] + (2).to_bytes(4, "little") + raw[8:],
        "trailing": raw + b"\x00",
    }
    for name, data in cases.items():
        bad = tmp_path / f"{name}.dubm"
        bad.write_bytes(data)
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)
