import logging

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from scipy import stats
from torch import nn

import oracles
from speedrecon import synth
from speedrecon.errors import NumericalError, ValidationError
from speedrecon.grid import CellSpeeds, GridSpec, SparseSpeedField, TraceSet
from speedrecon.neuralnet import (CNN6, NetConfig, TraNet, TrainConfig, augment, build,
                                  infer_field, load_checkpoint, masked_imae_loss, n_params,
                                  paper_config, save_checkpoint, toy_config, train)
from speedrecon.neuralnet.models import DepthConv
from speedrecon.patches import PatchLayout

SMALL = NetConfig(k_t=32, k_x=32, l_t=16, l_x=16, stem_filters=(2,), enc_filters=(4, 8),
                  bottleneck_filters=8, bottleneck_convs=1, dec_filters=(8, 4), head_filters=4)


@pytest.fixture(scope="module")
def trace_sets():
    out = []
    for scn in synth.scenario_library(3, seed=5):
        truth = synth.render_ground_truth(scn)
        trajs = synth.sample_probes(truth, synth.default_probes(scn))
        out.append(TraceSet.from_trajectories(trajs, scn.spec, scn.name))
    return out


def test_tranet_output_shape():
    model = build("tranet").eval()
    assert model(torch.zeros(3, 2, 64, 64)).shape == (3, 32, 32)
    small = TraNet(SMALL).eval()
    assert small(torch.zeros(2, 2, 32, 32)).shape == (2, 16, 16)


def test_param_counts():
    a, b = n_params(build("tranet")), n_params(build("tranet"))
    assert a == b == 397465
    cnn = n_params(build("cnn6"))
    assert cnn < a
    paper = n_params(TraNet(paper_config()))
    assert abs(paper - 8_506_017) / 8_506_017 < 0.05


def test_cnn6_shape_and_resolution():
    model = CNN6().eval()
    assert model(torch.zeros(1, 2, 64, 64)).shape == (1, 32, 32)
    assert 64 // 2 ** 3 * 2 ** 2 == 32
    with pytest.raises(ValidationError):
        CNN6(PatchLayout(64, 64, 16, 16))


def test_incompatible_sizes():
    with pytest.raises(ValidationError):
        TraNet(NetConfig(k_t=72, k_x=72, l_t=40, l_x=40))
    with pytest.raises(ValidationError):
        TraNet(NetConfig(dec_filters=(8, 8)))
    with pytest.raises(ValidationError):
        build("resnet")


def test_depth_conv_matches_conv3d():
    torch.manual_seed(0)
    d = DepthConv(3, 5, 5)
    ref = nn.Conv3d(3, 5, (2, 5, 5), padding=(0, 2, 2))
    ref.weight.data.copy_(d.weight.data)
    nn.init.normal_(d.bias)
    ref.bias.data.copy_(d.bias.data)
    x = torch.randn(2, 3, 2, 12, 12)
    torch.testing.assert_close(d(x), ref(F.pad(x, (0, 0, 0, 0, 0, 1))), rtol=1e-5, atol=1e-5)


def test_batch_independence():
    torch.manual_seed(1)
    model = build("tranet").eval()
    x = torch.randn(4, 2, 64, 64)
    y = model(x)
    perm = torch.tensor([2, 0, 3, 1])
    torch.testing.assert_close(model(x[perm]), y[perm], rtol=1e-5, atol=1e-6)


def test_glorot_init_zero_bias():
    model = build("tranet")
    for name, p in model.named_parameters():
        if name.endswith("bias") and "stem" not in name and p.dim() == 1 and "." in name:
            if isinstance(dict(model.named_modules())[name.rsplit(".", 1)[0]], nn.Conv2d):
                assert torch.all(p == 0)
    assert torch.all(model.out.weight == 0)
    assert build("cnn6").out.weight.detach().abs().sum().item() > 0


# ------------------------------------------------------------------ loss

def _t(a, dtype=torch.float32):
    return torch.tensor(np.asarray(a), dtype=dtype)


def test_loss_examples():
    pred = _t([[[(100.0 - 65) / 100]]])
    assert float(masked_imae_loss(pred, _t([[[100.0]]]), torch.tensor([[[True]]]))) == pytest.approx(0.0, abs=1e-7)
    pred = _t([[[(50.0 - 65) / 100]]])
    assert float(masked_imae_loss(pred, _t([[[100.0]]]), torch.tensor([[[True]]]))) == pytest.approx(0.01, rel=1e-5)


def test_loss_excludes_empty_targets():
    pred = _t(np.full((2, 2, 2), -0.15))  # 50 km/h
    target = _t([[[100.0, 0], [0, 0]], [[0, 0], [0, 0]]])
    mask = target > 0
    assert float(masked_imae_loss(pred, target, mask)) == pytest.approx(0.01, rel=1e-5)
    assert float(masked_imae_loss(pred, target, torch.zeros_like(mask))) == 0.0


def test_loss_bounded_and_clamped():
    pred = _t(np.full((1, 3, 3), 9.0))  # far above 130 km/h
    target = _t(np.full((1, 3, 3), 3.0))
    loss = float(masked_imae_loss(pred, target, target > 0))
    assert loss == pytest.approx(1 / 3 - 1 / 130, rel=1e-5)
    assert loss <= 1 / 3 - 1 / 130 + 1e-6


def test_loss_gradient_survives_saturation():
    pred = _t(np.full((1, 2, 2), 9.0)).requires_grad_()
    masked_imae_loss(pred, _t(np.full((1, 2, 2), 50.0)), torch.ones(1, 2, 2, dtype=torch.bool)).backward()
    assert torch.all(pred.grad > 0)  # a descent step lowers the speed towards the target
    pred = _t(np.full((1, 2, 2), -9.0)).requires_grad_()
    masked_imae_loss(pred, _t(np.full((1, 2, 2), 50.0)), torch.ones(1, 2, 2, dtype=torch.bool)).backward()
    assert torch.all(pred.grad < 0)


def test_loss_gradient_matches_finite_differences():
    torch.manual_seed(3)
    model = TraNet(SMALL).double().eval()
    nn.init.normal_(model.out.weight, std=0.05)  # zero at init would hide every upstream gradient
    rng = np.random.default_rng(3)
    x = torch.zeros(4, 2, 32, 32, dtype=torch.float64)
    occ = rng.random((4, 32, 32)) < 0.3
    x[:, 0] = torch.from_numpy(np.where(occ, rng.uniform(-0.5, 0.5, occ.shape), 0.0))
    x[:, 1] = torch.from_numpy(occ.astype(float))
    mask = torch.from_numpy(rng.random((4, 16, 16)) < 0.4)
    target = torch.from_numpy(np.where(mask.numpy(), rng.uniform(10, 120, (4, 16, 16)), 0.0))

    with torch.no_grad():
        v = model(x) * 100 + 65
    assert v.min() > 3 and v.max() < 130  # clamp-free interior

    oracles.check_gradients(model, lambda: masked_imae_loss(model(x), target, mask), rng)


# ------------------------------------------------------------------ samples

def test_augment_deterministic_and_disjoint(trace_sets):
    a = augment(trace_sets, 200, seed=9)
    b = augment(trace_sets, 200, seed=9)
    assert len(a) == 200
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.target, b.target)
    c = augment(trace_sets, 200, seed=10)
    assert not np.array_equal(a.x, c.x)

    for s in range(0, 200, 13):
        ts = trace_sets[a.scenario[s]]
        inputs = set(a.input_traces[s].tolist())
        held = np.array(sorted(set(range(ts.n)) - inputs))
        r0, c0 = a.origin[s]
        expected = ts.window(held, r0, c0, 32, 32)
        np.testing.assert_allclose(a.target[s][a.mask[s]], expected[a.mask[s]], rtol=1e-6)
        assert np.array_equal(a.mask[s], np.isfinite(expected))
        inp = ts.window(sorted(inputs), r0 - 16, c0 - 16, 64, 64)
        assert np.array_equal(a.x[s, 1] == 1, np.isfinite(inp))


def test_augment_p_uniform(trace_sets):
    s = augment(trace_sets, 10000, seed=1)
    assert stats.kstest((s.p - 0.1) / 0.8, "uniform").pvalue > 0.01
    assert s.p.min() >= 0.1 and s.p.max() <= 0.9


def test_augment_skips_thin_scenarios(trace_sets, caplog):
    spec = GridSpec.from_shape(40, 40)
    thin = TraceSet(spec, [CellSpeeds(np.array([0]), np.array([0]), np.array([50.0]))], "thin")
    with caplog.at_level(logging.WARNING):
        s = augment([thin, trace_sets[0]], 20, seed=0)
    assert "thin" in caplog.text
    assert np.all(s.scenario == 1)
    with pytest.raises(ValidationError):
        augment([thin], 5)


# ------------------------------------------------------------------ training, checkpoints, inference

def test_history_length_and_checkpoint(trace_sets, tmp_path):
    samples = augment(trace_sets, 40, seed=2)
    model = build("tranet")
    res = train(model, samples, TrainConfig(epochs=2, rng_seed=4))
    assert len(res.history) == 2
    assert 1 <= res.best_epoch <= 2
    data = save_checkpoint(tmp_path / "m.ckpt", model, {"holdout": ["x"]})
    assert save_checkpoint(tmp_path / "m2.ckpt", model, {"holdout": ["x"]}) == data
    back, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"holdout": ["x"]}
    x = torch.from_numpy(samples.x[:4])
    with torch.no_grad():
        torch.testing.assert_close(back(x), model.eval()(x))
    (tmp_path / "bad.ckpt").write_bytes(b"nope" * 10)
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_training_is_seeded(trace_sets):
    samples = augment(trace_sets, 48, seed=2)
    cfg = TrainConfig(epochs=2, rng_seed=11)
    h1 = train(CNN6(), samples, cfg).history
    h2 = train(CNN6(), samples, cfg).history
    assert [r["train_loss"] for r in h1] == pytest.approx([r["train_loss"] for r in h2], rel=1e-6)


class _Broken(nn.Module):
    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.ones(1))
        self.layout = PatchLayout()

    def forward(self, x):
        return x[:, 0, :32, :32] * self.w * float("nan")


def test_divergence_raises(trace_sets):
    samples = augment(trace_sets, 8, seed=0)
    with pytest.raises(NumericalError):
        train(_Broken(), samples, TrainConfig(epochs=1), init=False)


def test_infer_field(trace_sets):
    ts = trace_sets[0]
    f = ts.field(np.arange(0, ts.n, 3))
    model = build("tranet").eval()
    a = infer_field(model, f)
    b = infer_field(model, f)
    assert a.v.shape == ts.spec.shape
    np.testing.assert_array_equal(a.v, b.v)
    assert a.v.min() >= 3 and a.v.max() <= 130
    with pytest.raises(ValidationError):
        infer_field(model, f, PatchLayout(48, 48, 32, 32))
    empty = infer_field(model, SparseSpeedField(ts.spec))
    assert empty.v.shape == ts.spec.shape


def test_config_round_trip():
    cfg = paper_config()
    assert NetConfig.from_dict(cfg.to_dict()) == cfg
    assert toy_config() == NetConfig()
