"""Image/mask ingestion, dataset splits, augmentation and a synthetic vessel generator.

Directory layout::

    <root>/images/<id>.png|jpg|tif   8-bit RGB
    <root>/masks/<id>.png            8-bit grayscale, vessels > 127

Images and masks pair up by basename.
"""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.spatial import cKDTree

from .network import DOWNSAMPLE

TARGET_SIZES = {
    "DRIVE": (512, 512),
    "CHASE_DB1": (960, 960),
    "HRF": (784, 1168),
    "SYNTH": None,
}
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".gif", ".bmp")
EIGHT_BIT_MODES = ("L", "P", "RGB", "RGBA", "LA")
LAYOUT_HELP = "expected <root>/images/<id>.png (8-bit RGB) and <root>/masks/<id>.png (8-bit grayscale)"


def dataset_kind(name):
    key = name.strip().upper().replace("-", "_")
    aliases = {"CHASE": "CHASE_DB1", "CHASEDB1": "CHASE_DB1"}
    key = aliases.get(key, key)
    if key not in TARGET_SIZES:
        raise ValueError(f"unknown dataset {name!r}; expected one of {', '.join(TARGET_SIZES)}")
    return key


@dataclass
class Sample:
    image: np.ndarray  # (1, 3, H, W) in [0, 1]
    mask: np.ndarray  # (1, 1, H, W) in {0, 1}
    id: str
    dataset: str = "SYNTH"

    def __post_init__(self):
        h, w = self.image.shape[2:]
        if self.mask.shape[2:] != (h, w):
            raise ValueError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} differ in size")
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise ValueError(f"{self.id}: size {h}x{w} is not a multiple of {DOWNSAMPLE}")


# ------------------------------------------------------------------ ingestion

def _open_8bit(path):
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise ValueError(f"{path}: unreadable image ({exc})") from exc
    if img.mode not in EIGHT_BIT_MODES:
        raise ValueError(f"{path}: not an 8-bit image (mode {img.mode})")
    return img


def load_sample(image_path, mask_path, dataset, sample_id=None):
    """Read, resize to the dataset's working size, and scale to [0, 1]."""
    kind = dataset_kind(dataset)
    img = _open_8bit(image_path).convert("RGB")
    msk = _open_8bit(mask_path).convert("L")
    if img.size != msk.size:
        raise ValueError(f"{image_path}: image size {img.size} does not match mask {mask_path} size {msk.size}")
    target = TARGET_SIZES[kind]
    if target is not None and img.size != (target[1], target[0]):
        img = img.resize((target[1], target[0]), Image.BILINEAR)
        msk = msk.resize((target[1], target[0]), Image.NEAREST)
    w, h = img.size
    if h % DOWNSAMPLE or w % DOWNSAMPLE:
        raise ValueError(f"{image_path}: size {h}x{w} is not a multiple of {DOWNSAMPLE}")
    image = (np.asarray(img, dtype=np.float32) / 255.0).transpose(2, 0, 1)[None]
    mask = (np.asarray(msk, dtype=np.float32) / 255.0 >= 0.5).astype(np.float32)[None, None]
    return Sample(np.ascontiguousarray(image), mask, sample_id or Path(image_path).stem, kind)


def list_pairs(root):
    """Sorted {id: (image_path, mask_path)}; unpaired files raise with the full list."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise FileNotFoundError(f"{root}: missing images/ or masks/ directory; {LAYOUT_HELP}")

    def scan(d):
        return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_EXTS}

    images, masks = scan(img_dir), scan(mask_dir)
    missing = [f"masks/{k}.*" for k in images if k not in masks] + [f"images/{k}.*" for k in masks if k not in images]
    if missing:
        raise FileNotFoundError(f"{root}: unpaired files, missing: {', '.join(sorted(missing))}")
    if not images:
        raise FileNotFoundError(f"{root}: no images found; {LAYOUT_HELP}")
    return {k: (images[k], masks[k]) for k in sorted(images)}


def load_dataset(root, dataset, ids=None):
    pairs = list_pairs(root)
    ids = sorted(pairs) if ids is None else ids
    return [load_sample(*pairs[i], dataset, sample_id=i) for i in ids]


# --------------------------------------------------------------------- splits

@dataclass
class SplitSpec:
    dataset: str
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def __post_init__(self):
        both = set(self.train) & set(self.test)
        if both:
            raise ValueError(f"ids in both train and test: {sorted(both)}")

    def to_text(self):
        return "".join([f"train {i}\n" for i in self.train] + [f"test {i}\n" for i in self.test])

    @classmethod
    def from_text(cls, dataset, text):
        train, test = [], []
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            role, _, ident = line.strip().partition(" ")
            if role not in ("train", "test") or not ident:
                raise ValueError(f"split line {n}: expected 'train <id>' or 'test <id>', got {line!r}")
            (train if role == "train" else test).append(ident)
        return cls(dataset, train, test)


def _expect(kind, ids, count):
    if len(ids) != count:
        raise ValueError(f"{kind} split needs {count} images, found {len(ids)}")


def split_ids(kind, ids):
    """Deterministic train/test split for a sorted id list."""
    kind = dataset_kind(kind)
    ids = sorted(ids)
    if kind == "DRIVE":
        _expect(kind, ids, 40)
        # the official file names carry their role; fall back to first-20 otherwise
        if all(("train" in i.lower()) != ("test" in i.lower()) for i in ids):
            train = [i for i in ids if "train" in i.lower()]
            if len(train) == 20:
                return SplitSpec(kind, train, [i for i in ids if i not in train])
        return SplitSpec(kind, ids[:20], ids[20:])
    if kind == "CHASE_DB1":
        _expect(kind, ids, 28)
        return SplitSpec(kind, ids[:8], ids[8:])
    if kind == "HRF":
        _expect(kind, ids, 45)
        cats = {}
        for i in ids:
            cats.setdefault(i.rsplit("_", 1)[-1].lower() if "_" in i else "", []).append(i)
        if len(cats) != 3 or any(len(v) != 15 for v in cats.values()):
            raise ValueError("HRF ids must fall into 3 categories of 15 by their _suffix (e.g. 01_h, 01_dr, 01_g), "
                             f"found {({k: len(v) for k, v in cats.items()})}")
        train = sorted(i for v in cats.values() for i in v[:5])
        return SplitSpec(kind, train, [i for i in ids if i not in train])
    half = (len(ids) + 1) // 2
    return SplitSpec(kind, ids[:half], ids[half:])


def make_splits(root, dataset):
    return split_ids(dataset, list(list_pairs(root)))


# --------------------------------------------------------------- augmentation

@dataclass
class AugmentConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_jitter: float = 0.5
    p_scale: float = 0.5
    p_shift: float = 0.5
    jitter: float = 0.2
    scale: float = 0.1
    shift: float = 0.05

    @classmethod
    def off(cls):
        return cls(0, 0, 0, 0, 0)


def flip(arr, axis):
    """Flip an (N, C, H, W) array along 'h' (left-right) or 'v' (up-down)."""
    return np.ascontiguousarray(arr[..., ::-1] if axis == "h" else arr[..., ::-1, :])


def augment(sample, rng_seed, config=AugmentConfig()):
    """Random flips, colour jitter, scale and shift; mask follows every geometric change."""
    rng = np.random.default_rng(rng_seed)
    # fixed draw order so each transform's stream is independent of the others
    coins = rng.random(5)
    bright, contrast = rng.uniform(1 - config.jitter, 1 + config.jitter, size=2)
    scale = rng.uniform(1 - config.scale, 1 + config.scale)
    shift = rng.uniform(-config.shift, config.shift, size=2)

    image, mask = sample.image, sample.mask
    if coins[0] < config.p_hflip:
        image, mask = flip(image, "h"), flip(mask, "h")
    if coins[1] < config.p_vflip:
        image, mask = flip(image, "v"), flip(mask, "v")
    if coins[2] < config.p_jitter:
        mean = image.mean()
        image = np.clip((image * bright - mean) * contrast + mean, 0, 1).astype(np.float32)
    do_scale = coins[3] < config.p_scale
    do_shift = coins[4] < config.p_shift
    if do_scale or do_shift:
        h, w = image.shape[2:]
        s = scale if do_scale else 1.0
        t = shift * np.array([h, w]) if do_shift else np.zeros(2)
        centre = (np.array([h, w]) - 1) / 2
        # output pixel o samples input at centre + (o - centre - t) / s
        offset = centre - (centre + t) / s
        matrix = np.diag([1 / s, 1 / s])
        image = np.stack([ndimage.affine_transform(ch, matrix, offset, order=1, mode="constant", cval=0.0)
                          for ch in image[0]])[None].astype(np.float32)
        mask = ndimage.affine_transform(mask[0, 0], matrix, offset, order=0, mode="constant", cval=0.0)
        mask = (mask >= 0.5).astype(np.float32)[None, None]
    return Sample(np.ascontiguousarray(image, dtype=np.float32), np.ascontiguousarray(mask, dtype=np.float32),
                  sample.id, sample.dataset)


# ---------------------------------------------------------- synthetic vessels

FG_RANGE = (0.02, 0.25)


def _bezier(p0, p1, p2, p3, step=0.25):
    length = np.linalg.norm(p1 - p0) + np.linalg.norm(p2 - p1) + np.linalg.norm(p3 - p2)
    t = np.linspace(0.0, 1.0, max(8, int(length / step) + 2))[:, None]
    return ((1 - t) ** 3) * p0 + 3 * ((1 - t) ** 2) * t * p1 + 3 * (1 - t) * t ** 2 * p2 + t ** 3 * p3


def _tree(rng, size, curves, start, direction, width, depth):
    length = rng.uniform(0.35, 0.7) * size * (0.6 ** (2 - depth))
    end = start + direction * length
    normal = np.array([-direction[1], direction[0]])
    c1 = start + direction * length / 3 + normal * rng.normal(0, length / 4)
    c2 = start + 2 * direction * length / 3 + normal * rng.normal(0, length / 4)
    pts = _bezier(start, c1, c2, end)
    curves.append((pts, width))
    if depth == 0:
        return
    for _ in range(rng.integers(1, 3)):
        j = rng.integers(len(pts) // 4, len(pts))
        ang = np.arctan2(direction[1], direction[0]) + rng.choice([-1, 1]) * rng.uniform(0.4, 1.1)
        child = np.array([np.cos(ang), np.sin(ang)])
        _tree(rng, size, curves, pts[j], child, max(1.0, width * rng.uniform(0.55, 0.8)), depth - 1)


def _draw(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    tint = np.zeros((size, size))
    for _ in range(3):
        f = rng.uniform(0.5, 2.0, size=2) * 2 * np.pi / size
        tint += rng.uniform(0.02, 0.06) * np.cos(f[0] * yy + f[1] * xx + rng.uniform(0, 2 * np.pi))
    base = rng.uniform(0.08, 0.2, size=3) * np.array([1.4, 0.9, 0.6])
    image = base[:, None, None] + tint[None]

    curves = []
    for _ in range(rng.integers(1, 4)):
        side = rng.integers(4)
        pos = rng.uniform(0.1, 0.9) * (size - 1)
        start = [np.array([0.0, pos]), np.array([size - 1.0, pos]), np.array([pos, 0.0]),
                 np.array([pos, size - 1.0])][side]
        direction = (size / 2 + rng.normal(0, size / 6, 2)) - start
        direction /= np.linalg.norm(direction)
        _tree(rng, size, curves, start, direction, rng.uniform(2.0, 4.0), 2)

    pix = np.stack([yy.ravel(), xx.ravel()], axis=1)
    cover = np.zeros(size * size)
    mask = np.zeros(size * size, dtype=bool)
    for pts, width in curves:
        dist, _ = cKDTree(pts).query(pix, distance_upper_bound=width / 2 + 1.5)
        mask |= dist <= width / 2
        cover = np.maximum(cover, np.clip(width / 2 + 0.5 - dist, 0, 1))
    colour = rng.uniform(0.55, 0.85) * np.array([1.0, 0.85, 0.7])
    image = image + cover.reshape(size, size)[None] * colour[:, None, None]
    image += rng.normal(0, 0.01, image.shape)
    image = np.round(np.clip(image, 0, 1) * 255) / 255
    return image.astype(np.float32), mask.reshape(size, size).astype(np.float32)


def synth_vessels(seed, size, count):
    """``count`` synthetic fundus-like images with exact vessel masks; deterministic in ``seed``."""
    if size % DOWNSAMPLE:
        raise ValueError(f"size {size} is not a multiple of {DOWNSAMPLE}")
    samples = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        while True:
            image, mask = _draw(rng, size)
            if FG_RANGE[0] <= mask.mean() <= FG_RANGE[1]:
                break
        samples.append(Sample(image[None], mask[None, None], f"synth_{seed}_{i:04d}", "SYNTH"))
    return samples


def save_dataset(samples, root):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        img = np.round(s.image[0].transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(img, "RGB").save(root / "images" / f"{s.id}.png")
        Image.fromarray((s.mask[0, 0] * 255).astype(np.uint8), "L").save(root / "masks" / f"{s.id}.png")
    return root
