import numpy as np
import pytest
from dataclasses import replace

from hseg.dcn import DcnLayer
from hseg.gradcheck import tiny_model
from hseg.losses import mixed_loss
from hseg.network import (TABLE1, CheckpointError, EncoderSpec, HybridNet, LayerSpec, build_model, count_macs,
                          count_params, load_checkpoint, mac_table, module_macs, read_tensors, save_checkpoint)
from hseg.nn import Conv2d
from hseg.tensor_core import sigmoid

from oracles import encoder_param_sheet


@pytest.fixture(scope="module")
def model():
    return build_model(seed=0)


def test_same_seed_bitwise_identical():
    a, b = build_model(seed=3), build_model(seed=3)
    for (na, va), (nb, vb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and va.tobytes() == vb.tobytes()


def test_different_seed_differs():
    a, b = dict(build_model(seed=1).named_parameters()), dict(build_model(seed=2).named_parameters())
    assert any(not np.array_equal(a[k], b[k]) for k in a)


def test_parameter_names_unique_and_dotted(model):
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))
    assert "hcb1.l0.main.weight" in names and "stem.l0.conv.weight" in names


def test_table_has_four_downsamples_and_three_hybrid_blocks():
    spec = EncoderSpec()
    assert sum(r.stride == 2 for r in spec.rows) == 4
    groups = spec.groups()
    assert [spec.rows[g[0]].op for g in groups] == ["Conv2D", "DCN", "DCN", "DCN"]
    assert [len(g) for g in groups] == [1, 5, 5, 4]


@pytest.mark.parametrize("index,row,msg", [
    (3, LayerSpec("Pool", 24), "row 3"),
    (5, LayerSpec("MNBlock", 40, 1, (3, 4), 6), "row 5"),
    (6, LayerSpec("DCN", 40, 2), "row 6"),
])
def test_invalid_row_rejected_with_index(index, row, msg):
    rows = list(TABLE1)
    rows[index] = row
    with pytest.raises(ValueError, match=msg):
        build_model(EncoderSpec(rows=tuple(rows)))


def test_wrong_downsample_count_rejected():
    rows = list(TABLE1)
    rows[2] = replace(rows[2], stride=1)
    with pytest.raises(ValueError, match="4"):
        EncoderSpec(rows=tuple(rows)).validate()


def test_encoder_tap_shapes_at_512(model):
    model.eval()
    taps = model.encode(np.random.default_rng(0).random((1, 3, 512, 512)).astype(np.float32))
    model.clear_cache()
    assert [t.shape[1:] for t in taps] == [(16, 256, 256), (40, 128, 128), (80, 64, 64), (120, 32, 32)]


def test_forward_contract(model):
    x = np.random.default_rng(1).random((2, 3, 64, 48)).astype(np.float32)
    model.eval()
    out = model.forward(x)
    assert len(out["stage_logits"]) == 4
    assert all(l.shape == (2, 1, 64, 48) for l in out["stage_logits"])
    assert out["prob"].min() >= 0 and out["prob"].max() <= 1
    np.testing.assert_allclose(out["prob"], sigmoid(out["stage_logits"][-1]))
    again = model.forward(x)
    assert all(np.array_equal(a, b) for a, b in zip(out["stage_logits"], again["stage_logits"]))
    model.clear_cache()


def test_indivisible_input_rejected(model):
    with pytest.raises(ValueError, match="16"):
        model.forward(np.zeros((1, 3, 40, 64), np.float32))


def test_every_parameter_receives_gradient():
    model = tiny_model(seed=0, divisor=4)
    rng = np.random.default_rng(0)
    x = rng.random((2, 3, 32, 32)).astype(np.float32)
    y = (rng.random((2, 1, 32, 32)) < 0.2).astype(np.float32)
    model.train()
    out = model.forward(x)
    probs = [sigmoid(l.astype(np.float64)) for l in out["stage_logits"]]
    _, gps = mixed_loss(probs, y)
    model.zero_grad()
    gx = model.backward([(g * p * (1 - p)).astype(np.float32) for g, p in zip(gps, probs)])
    assert gx.shape == x.shape and np.all(np.isfinite(gx))
    for name, g in model.named_grads():
        assert g is not None and np.linalg.norm(g) > 0, name


def test_zero_branch_dcn_still_gets_branch_gradient():
    model = build_model(EncoderSpec().scaled(8), seed=0)
    x = np.random.default_rng(0).random((1, 3, 32, 32)).astype(np.float32)
    out = model.forward(x)
    model.zero_grad()
    model.backward([np.ones_like(l) for l in out["stage_logits"]])
    grads = dict(model.named_grads())
    for name, mod in model.named_modules():
        if isinstance(mod, DcnLayer):
            assert np.linalg.norm(grads[name + "branch.weight"]) > 0


# ----------------------------------------------------------------- accounting

def test_single_conv_params():
    assert count_params(Conv2d(3, 16, 3, bias=True)) == 448


def test_stem_plus_first_dcn_hand_count(model):
    stem = count_params(model.children["stem"])
    dcn = count_params(model.children["hcb1"].children["l0"])
    assert stem == 3 * 16 * 9 + 2 * 16
    assert dcn == (16 * 16 * 9 + 16) + (16 * 27 * 9 + 27)
    assert stem + dcn == 6699


def test_encoder_matches_closed_form_sheet(model):
    sheet = encoder_param_sheet()
    counted = [count_params(layer) for blk in model.encoder for layer in blk.children.values()]
    assert counted == sheet
    assert sum(sheet) == 687_147


def test_total_params_near_reported_size(model):
    assert abs(count_params(model) - 0.71e6) / 0.71e6 < 0.15


def test_total_macs_near_reported_cost(model):
    assert abs(count_macs(model, (1, 3, 512, 512)) - 3.52e9) / 3.52e9 < 0.15


def test_pointwise_conv_macs():
    # 16*16*256^2; the often-quoted 67,108,864 is the same layer at 512^2
    assert module_macs(Conv2d(16, 16, 1), (1, 16, 256, 256)) == 16 * 16 * 256 ** 2 == 16_777_216
    assert module_macs(Conv2d(16, 16, 1), (1, 16, 512, 512)) == 67_108_864


def test_conv_macs_scale_by_four(model):
    small = {n: m for n, k, m in mac_table(model, (1, 3, 256, 256)) if k == "conv"}
    big = {n: m for n, k, m in mac_table(model, (1, 3, 512, 512)) if k == "conv"}
    assert small.keys() == big.keys()
    assert all(big[n] == 4 * small[n] for n in small)


# ----------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip_bitwise(tmp_path, model):
    path = tmp_path / "m.hseg"
    nbytes = save_checkpoint(model, path)
    assert nbytes == path.stat().st_size
    loaded = load_checkpoint(path)
    assert count_params(loaded) == count_params(model)
    a, b = model.state_dict(), loaded.state_dict()
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_checkpoint_truncated_rejected(tmp_path, model):
    path = tmp_path / "m.hseg"
    save_checkpoint(model, path)
    data = path.read_bytes()
    for cut in (3, 20, len(data) // 2, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path, model):
    path = tmp_path / "m.hseg"
    save_checkpoint(model, path)
    data = bytearray(path.read_bytes())
    data[4] = 99
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version"):
        read_tensors(path)


def test_checkpoint_shape_mismatch_names_tensor(tmp_path):
    small = build_model(EncoderSpec().scaled(8), seed=0)
    path = tmp_path / "s.hseg"
    save_checkpoint(small, path)
    with pytest.raises(CheckpointError, match="stem.l0.conv.weight"):
        load_checkpoint(path, spec=EncoderSpec())


def test_loaded_model_replays_forward(tmp_path):
    a = build_model(EncoderSpec().scaled(4), seed=1)
    x = np.random.default_rng(2).random((1, 3, 32, 32)).astype(np.float32)
    # move the running stats off their defaults first
    a.train()
    a.forward(x)
    a.eval()
    save_checkpoint(a, tmp_path / "a.hseg")
    b = load_checkpoint(tmp_path / "a.hseg")
    b.eval()
    np.testing.assert_array_equal(a.forward(x)["prob"], b.forward(x)["prob"])


def test_scaled_spec_roundtrip_through_meta(tmp_path):
    m = build_model(EncoderSpec().scaled(8), seed=0)
    save_checkpoint(m, tmp_path / "t.hseg")
    assert load_checkpoint(tmp_path / "t.hseg").spec == m.spec


def test_hybridnet_rejects_wrong_channels(model):
    with pytest.raises(ValueError):
        model.forward(np.zeros((1, 1, 32, 32), np.float32))


def test_build_model_is_hybridnet():
    assert isinstance(build_model(EncoderSpec().scaled(8)), HybridNet)


def test_whole_model_gradcheck():
    from hseg.gradcheck import run_suite
    (report,) = [r for r in run_suite(seeds=(), model_seeds=(1,))]
    assert report.passed, report.errors
