"""Architecture wiring: presets, dense inputs, interconnections, consistency."""

import numpy as np
import pytest

from dircn import mri, network, phantom
from dircn.autodiff import Tensor
from dircn.network import DIRCN, ModelConfig, UNet, preset_config


def _sample(grid=16, coils=2, accel=2, seed=0):
    spec = phantom.PhantomSpec(grid=grid, coils=coils, noise_sigma=0.0, seed=seed)
    return mri.preprocess(phantom.make_kspace(spec), accel, 0.25)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(subnet="transformer")
    with pytest.raises(ValueError):
        ModelConfig(cascades=0)
    with pytest.raises(ValueError):
        ModelConfig(subnet="resxunet", base_channels=6, cardinality=4)


def test_config_dict_round_trip():
    config = preset_config("dircn", cascades=3)
    again = ModelConfig.from_dict(config.to_dict())
    assert again == config
    with pytest.raises(ValueError):
        ModelConfig.from_dict({**config.to_dict(), "flux": 1})


def test_preset_table():
    combos = {name: (cfg.subnet, cfg.dense, cfg.interconnections)
              for name, cfg in ((n, preset_config(n)) for n in network.PRESETS)}
    assert combos == {
        "baseline": ("plain_unet", False, False),
        "dense": ("plain_unet", True, False),
        "resxunet": ("resxunet", False, False),
        "interconn": ("plain_unet", False, True),
        "dircn": ("resxunet", True, True),
    }


def test_preset_rejects_identity_overrides():
    with pytest.raises(ValueError):
        preset_config("baseline", dense=True)
    with pytest.raises(ValueError):
        preset_config("nope")


def _stem_in_channels(model):
    out = []
    for cascade in model.cascades:
        w = cascade.subnet.stem.weight.data
        out.append(w.shape[1] * cascade.subnet.stem.groups)
    return out


def test_dense_connections_grow_subnet_inputs():
    dense = DIRCN(preset_config("dense", cascades=3, levels=2, base_channels=4,
                                sens_channels=2), seed=0)
    plain = DIRCN(preset_config("baseline", cascades=3, levels=2, base_channels=4,
                                sens_channels=2), seed=0)
    assert _stem_in_channels(dense) == [2, 4, 6]
    assert _stem_in_channels(plain) == [2, 2, 2]


def test_unet_feature_shapes_halve():
    rng = np.random.default_rng(0)
    net = UNet(rng, 2, 2, levels=3, base_channels=4)
    assert net.feature_shapes(20, 20) == [(4, 20, 20), (8, 10, 10), (16, 5, 5)]


def test_unet_handles_odd_sizes():
    rng = np.random.default_rng(0)
    net = UNet(rng, 2, 2, levels=3, base_channels=4)
    out, harvested = net.forward(Tensor(rng.standard_normal((1, 2, 13, 11))))
    assert out.shape == (1, 2, 13, 11)
    assert len(harvested) == 3


def test_unet_rejects_wrong_injected_shapes():
    rng = np.random.default_rng(0)
    net = UNet(rng, 2, 2, levels=2, base_channels=4, consume_injected=True)
    x = Tensor(rng.standard_normal((1, 2, 12, 12)))
    injected = net.zero_injected(1, 12, 12)
    net.forward(x, injected=injected)  # matching stand-ins pass
    bad = [Tensor(np.zeros((1, 4, 5, 5)))] + injected[1:]
    with pytest.raises(ValueError):
        net.forward(x, injected=bad)


def test_interconnections_thread_between_cascades():
    config = preset_config("interconn", cascades=2, levels=2, base_channels=4,
                           sens_channels=2)
    model = DIRCN(config, seed=1)
    sample = _sample()
    out = model.forward(sample.kspace, sample.mask)
    assert out.shape == sample.target.shape
    # consuming subnets widen their decoder and bottleneck inputs
    lone = UNet(np.random.default_rng(0), 2, 2, levels=2, base_channels=4)
    consuming = model.cascades[0].subnet
    assert consuming.bottleneck.conv1.weight.data.shape[1] > \
        lone.bottleneck.conv1.weight.data.shape[1]


def test_data_consistency_spot_value():
    mask = mri.make_equispaced_mask(4, 1, 0.5)
    k_meas = np.ones((1, 2, 4, 4))
    k_pred = Tensor(np.zeros((1, 2, 4, 4)))
    out = network.data_consistency(k_pred, k_meas, mask, 0.01)
    assert np.abs(out.data - 1.0 / 1.01).max() < 1e-15


def test_data_consistency_identity_at_zero_weight():
    rng = np.random.default_rng(2)
    mask = mri.make_equispaced_mask(8, 2, 0.25)
    k_meas = rng.standard_normal((1, 2, 8, 8)) * mask.kept_weights(4)
    k_pred = Tensor(rng.standard_normal((1, 2, 8, 8)))
    out = network.data_consistency(k_pred, k_meas, mask, 0.0)
    kept = mask.kept
    assert np.array_equal(out.data[..., kept], k_meas[..., kept])
    assert np.array_equal(out.data[..., ~kept], k_pred.data[..., ~kept])


def test_data_consistency_module_weight_matches_init():
    dc = network.DataConsistency(init=0.01)
    assert dc.weight().item() == pytest.approx(0.01, abs=1e-12)
    with pytest.raises(ValueError):
        network.DataConsistency(init=0.0)


def test_squeeze_excite_is_per_channel_gate():
    rng = np.random.default_rng(3)
    se = network.SqueezeExcite(rng, channels=6, ratio=3)
    x = Tensor(rng.standard_normal((2, 6, 5, 5)))
    out = se.forward(x)
    ratio = out.data / x.data
    per_channel = ratio.reshape(2, 6, -1)
    assert np.allclose(per_channel, per_channel[:, :, :1])
    assert (per_channel > 0).all() and (per_channel < 1).all()


def test_sensitivity_estimator_outputs_unit_rss():
    config = ModelConfig(sens_channels=4, levels=2)
    est = network.SensitivityEstimator(np.random.default_rng(0), config)
    sample = _sample(grid=16, coils=3)
    sens = est.forward(Tensor(sample.kspace), sample.mask)
    assert sens.shape == (3, 2, 16, 16)
    rss_sq = (sens.data ** 2).sum(axis=(0, 1))
    assert np.abs(rss_sq - 1.0).max() < 1e-12


def test_sensitivity_estimator_needs_center_lines():
    config = ModelConfig(sens_channels=4, levels=2)
    est = network.SensitivityEstimator(np.random.default_rng(0), config)
    sample = _sample(grid=16, coils=2)
    kept = sample.mask.kept.copy()
    no_center = mri.SamplingMask(kept=kept, center=np.zeros_like(kept),
                                 acceleration=2, center_fraction=0.0)
    with pytest.raises(ValueError):
        est.forward(Tensor(sample.kspace), no_center)


@pytest.mark.parametrize("preset", sorted(network.PRESETS))
def test_presets_forward_and_backward(preset):
    config = preset_config(preset, cascades=2, levels=2, base_channels=4,
                           cardinality=2, sens_channels=2)
    model = DIRCN(config, seed=0)
    sample = _sample()
    out = model.forward(sample.kspace, sample.mask)
    assert out.shape == sample.target.shape
    out.sum().backward()
    for name, p in model.named_parameters():
        assert np.isfinite(p.grad).all(), name
    total = sum(float(np.abs(p.grad).sum()) for _, p in model.named_parameters())
    assert total > 0


def test_forward_accepts_tensor_and_array_kspace():
    config = preset_config("baseline", cascades=1, levels=2, base_channels=4,
                           sens_channels=2)
    model = DIRCN(config, seed=0)
    sample = _sample()
    a = model.forward(sample.kspace, sample.mask)
    b = model.forward(Tensor(sample.kspace), sample.mask)
    assert np.array_equal(a.data, b.data)


def test_same_seed_same_weights():
    config = preset_config("dircn", cascades=1, levels=2, base_channels=4,
                           cardinality=2, sens_channels=2)
    a, b = DIRCN(config, seed=5), DIRCN(config, seed=5)
    c = DIRCN(config, seed=6)
    for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(pa.data, pb.data), name
    assert any(not np.array_equal(pa.data, pc.data)
               for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters()))


def test_reconstruct_returns_plain_array():
    config = preset_config("baseline", cascades=1, levels=2, base_channels=4,
                           sens_channels=2)
    model = DIRCN(config, seed=0)
    sample = _sample()
    recon = model.reconstruct(sample)
    assert isinstance(recon, np.ndarray)
    assert recon.shape == sample.target.shape
