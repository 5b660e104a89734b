import numpy as np
import pytest
from PIL import Image

from hseg import data as D


def _write_pair(root, ident, size=(16, 16), mask_values=(0, 255), rng=None):
    rng = rng or np.random.default_rng(0)
    w, h = size
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    Image.fromarray(rng.integers(0, 256, (h, w, 3), dtype=np.uint8), "RGB").save(root / "images" / f"{ident}.png")
    m = np.where(rng.random((h, w)) < 0.2, mask_values[1], mask_values[0]).astype(np.uint8)
    Image.fromarray(m, "L").save(root / "masks" / f"{ident}.png")


@pytest.mark.parametrize("kind,native,target", [
    ("DRIVE", (565, 584), (512, 512)),
    ("CHASE_DB1", (999, 960), (960, 960)),
    ("HRF", (876, 584), (784, 1168)),
])
def test_resize_rules(tmp_path, kind, native, target):
    _write_pair(tmp_path, "a", native)
    s = D.load_dataset(tmp_path, kind)[0]
    assert s.image.shape == (1, 3) + target and s.mask.shape == (1, 1) + target
    assert set(np.unique(s.mask)) <= {0.0, 1.0}


def test_synthetic_size_passes_through(tmp_path):
    _write_pair(tmp_path, "a", (64, 48))
    s = D.load_sample(tmp_path / "images/a.png", tmp_path / "masks/a.png", "synth")
    raw = np.asarray(Image.open(tmp_path / "images/a.png"), dtype=np.float32).transpose(2, 0, 1) / 255
    np.testing.assert_array_equal(s.image[0], raw)


def test_mask_binarised(tmp_path):
    _write_pair(tmp_path, "a", (32, 32))
    s = D.load_dataset(tmp_path, "synth")[0]
    raw = np.asarray(Image.open(tmp_path / "masks/a.png"))
    np.testing.assert_array_equal(s.mask[0, 0], (raw == 255).astype(np.float32))


def test_non_8bit_rejected(tmp_path):
    _write_pair(tmp_path, "a", (16, 16))
    Image.fromarray(np.zeros((16, 16), dtype=np.uint16)).save(tmp_path / "masks/a.png")
    with pytest.raises(ValueError, match="8-bit"):
        D.load_dataset(tmp_path, "synth")


def test_size_mismatch_rejected_with_path(tmp_path):
    _write_pair(tmp_path, "a", (16, 16))
    Image.fromarray(np.zeros((32, 16), np.uint8), "L").save(tmp_path / "masks/a.png")
    with pytest.raises(ValueError, match="a.png"):
        D.load_dataset(tmp_path, "synth")


def test_unreadable_rejected(tmp_path):
    _write_pair(tmp_path, "a", (16, 16))
    (tmp_path / "images/a.png").write_bytes(b"not a png")
    with pytest.raises(ValueError, match="unreadable"):
        D.load_dataset(tmp_path, "synth")


def test_missing_layout_lists_expectation(tmp_path):
    with pytest.raises(FileNotFoundError, match="images"):
        D.list_pairs(tmp_path)


def test_unpaired_files_listed(tmp_path):
    _write_pair(tmp_path, "a")
    _write_pair(tmp_path, "b")
    (tmp_path / "masks/b.png").unlink()
    with pytest.raises(FileNotFoundError, match="masks/b"):
        D.list_pairs(tmp_path)


def _fake_dir(root, ids):
    rng = np.random.default_rng(0)
    for i in ids:
        _write_pair(root, i, rng=rng)
    return root


def test_drive_split(tmp_path):
    ids = [f"{i:02d}_test" for i in range(1, 21)] + [f"{i:02d}_training" for i in range(21, 41)]
    spec = D.make_splits(_fake_dir(tmp_path, ids), "DRIVE")
    assert len(spec.train) == 20 and len(spec.test) == 20
    assert all("training" in i for i in spec.train)


def test_chase_split(tmp_path):
    ids = [f"Image_{i:02d}{s}" for i in range(1, 15) for s in "LR"]
    spec = D.make_splits(_fake_dir(tmp_path, ids), "CHASE_DB1")
    assert (len(spec.train), len(spec.test)) == (8, 20)
    assert spec.train == sorted(ids)[:8]


def test_hrf_split(tmp_path):
    ids = [f"{i:02d}_{c}" for i in range(1, 16) for c in ("h", "dr", "g")]
    spec = D.make_splits(_fake_dir(tmp_path, ids), "HRF")
    assert (len(spec.train), len(spec.test)) == (15, 30)
    for c in ("h", "dr", "g"):
        assert sum(i.endswith("_" + c) for i in spec.train) == 5


def test_split_wrong_count_rejected():
    with pytest.raises(ValueError, match="40"):
        D.split_ids("DRIVE", [f"{i}" for i in range(39)])


def test_split_text_roundtrip():
    spec = D.SplitSpec("HRF", ["a", "b"], ["c"])
    back = D.SplitSpec.from_text("HRF", spec.to_text())
    assert back == spec


def test_split_overlap_rejected():
    with pytest.raises(ValueError):
        D.SplitSpec("SYNTH", ["a"], ["a"])


# --------------------------------------------------------------- augmentation

@pytest.fixture(scope="module")
def sample():
    return D.synth_vessels(5, 64, 1)[0]


def test_augment_all_off_is_identity(sample):
    out = D.augment(sample, 123, D.AugmentConfig.off())
    np.testing.assert_array_equal(out.image, sample.image)
    np.testing.assert_array_equal(out.mask, sample.mask)


@pytest.mark.parametrize("axis", ["h", "v"])
def test_flip_involution(sample, axis):
    np.testing.assert_array_equal(D.flip(D.flip(sample.image, axis), axis), sample.image)


def test_flip_moves_mask_with_image(sample):
    out = D.augment(sample, 0, D.AugmentConfig(1, 0, 0, 0, 0))
    np.testing.assert_array_equal(out.image, sample.image[..., ::-1])
    np.testing.assert_array_equal(out.mask, sample.mask[..., ::-1])


def test_augment_deterministic(sample):
    cfg = D.AugmentConfig(1, 1, 1, 1, 1)
    a, b = D.augment(sample, [7, 3], cfg), D.augment(sample, [7, 3], cfg)
    assert a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes()
    c = D.augment(sample, [7, 4], cfg)
    assert c.image.tobytes() != a.image.tobytes()


def test_augment_preserves_shape_and_binary_mask(sample):
    for seed in range(10):
        out = D.augment(sample, seed)
        assert out.image.shape == sample.image.shape and out.mask.shape == sample.mask.shape
        assert set(np.unique(out.mask)) <= {0.0, 1.0}
        assert out.image.min() >= 0 and out.image.max() <= 1


# ------------------------------------------------------------------ synthetic

def test_synth_deterministic():
    a, b = D.synth_vessels(3, 64, 2), D.synth_vessels(3, 64, 2)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes()


def test_synth_foreground_fraction_over_100_seeds():
    fracs = [s.mask.mean() for seed in range(100) for s in D.synth_vessels(seed, 64, 1)]
    assert min(fracs) >= 0.02 and max(fracs) <= 0.25


def test_synth_empty():
    assert D.synth_vessels(0, 64, 0) == []


def test_synth_rejects_indivisible_size():
    with pytest.raises(ValueError):
        D.synth_vessels(0, 60, 1)


def test_save_dataset_roundtrip(tmp_path):
    samples = D.synth_vessels(1, 32, 3)
    D.save_dataset(samples, tmp_path)
    loaded = D.load_dataset(tmp_path, "synth")
    assert [s.id for s in loaded] == [s.id for s in samples]
    for a, b in zip(samples, loaded):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)


def test_dataset_kind_aliases():
    assert D.dataset_kind("chase") == "CHASE_DB1" and D.dataset_kind("synth") == "SYNTH"
    with pytest.raises(ValueError):
        D.dataset_kind("STARE")
