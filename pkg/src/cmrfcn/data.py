"""Images, label maps, the binary container, preprocessing, augmentation and phantoms."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, FormatError, ShapeError

SHORT_AXIS_CLASSES = {0: "background", 1: "LV cavity", 2: "LV myocardium", 3: "RV cavity"}
LV_CAVITY, LV_MYO, RV_CAVITY = 1, 2, 3

# phantom defaults: 1.8 x 1.8 mm in-plane, 8 mm slices with a 2 mm gap
DEFAULT_SPACING = (1.8, 1.8, 10.0)


def _f32_round(v: float) -> float:
    # shortest decimal that survives a float32 round trip, e.g. 1.8 rather than 1.79999995
    return float(str(np.float32(v)))


@dataclass
class Volume:
    """Intensity image, shape (..., Z, H, W); spacing is (dx, dy, dz) in mm."""

    data: np.ndarray
    spacing: tuple = DEFAULT_SPACING
    frame_interval: float = 0.0

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume intensities must be finite")


@dataclass
class LabelMap:
    """Integer class labels, shape (..., Z, H, W)."""

    data: np.ndarray
    spacing: tuple = DEFAULT_SPACING
    classes: dict = field(default_factory=lambda: dict(SHORT_AXIS_CLASSES))
    frame_interval: float = 0.0

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if not np.issubdtype(self.data.dtype, np.integer):
            raise TypeError(f"label data must be integer, got {self.data.dtype}")
        if self.data.size and (self.data.min() < 0 or self.data.max() >= len(self.classes)):
            raise ValueError(f"labels must lie in [0, {len(self.classes)})")

    @property
    def k(self) -> int:
        return len(self.classes)

    def mask(self, class_id: int) -> np.ndarray:
        return self.data == class_id


# ---------------------------------------------------------------------------
# container format

MAGIC = b"CSG1"
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<i2")}


def write_container(path, item: Volume | LabelMap) -> None:
    if isinstance(item, LabelMap):
        code, arr = 1, item.data
        if arr.size and (arr.min() < np.iinfo(np.int16).min or arr.max() > np.iinfo(np.int16).max):
            raise ValueError("labels do not fit in int16")
    else:
        code, arr = 0, item.data
    arr = np.ascontiguousarray(arr, dtype=DTYPE_CODES[code])
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    header += struct.pack("<4f", *item.spacing, item.frame_interval)
    Path(path).write_bytes(header + arr.tobytes())


def read_container(path, classes: dict | None = None) -> Volume | LabelMap:
    raw = Path(path).read_bytes()
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, not a CSG1 container")
    code, rank = struct.unpack_from("<BB", raw, 4)
    if code not in DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    pos = 6
    if len(raw) < pos + 8 * rank + 16:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}Q", raw, pos)
    pos += 8 * rank
    *spacing, interval = struct.unpack_from("<4f", raw, pos)
    pos += 16
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) - pos != expected:
        raise FormatError(f"{path}: payload is {len(raw) - pos} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype=dtype, offset=pos).reshape(dims)
    spacing = tuple(_f32_round(s) for s in spacing)
    interval = _f32_round(interval)
    if code == 1:
        data = data.astype(np.int16)
        if classes is None:
            top = int(data.max()) + 1 if data.size else 1
            classes = {i: SHORT_AXIS_CLASSES.get(i, f"class {i}") for i in range(max(top, 2))}
        return LabelMap(data, spacing, classes, interval)
    return Volume(data.astype(np.float32), spacing, interval)


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class CropRecord:
    """Where a target-size window sits in the original in-plane grid."""

    original: tuple  # (H, W)
    target: int

    def _axis(self, size):
        if size >= self.target:
            return (size - self.target) // 2, 0  # crop start, pad before
        return 0, (self.target - size) // 2


def crop_or_pad(image: np.ndarray, target: int = 192):
    """Centre-crop or zero-pad the last two axes to ``target``.

    Returns the new array and a :class:`CropRecord` for :func:`uncrop`.
    """
    h, w = image.shape[-2:]
    rec = CropRecord((h, w), target)
    out = np.zeros(image.shape[:-2] + (target, target), dtype=image.dtype)
    (cy, py), (cx, px) = rec._axis(h), rec._axis(w)
    ny, nx = min(h, target), min(w, target)
    out[..., py:py + ny, px:px + nx] = image[..., cy:cy + ny, cx:cx + nx]
    return out, rec


def uncrop(image: np.ndarray, rec: CropRecord, fill=0) -> np.ndarray:
    """Place a target-size array back into the original grid, filling with ``fill``."""
    if image.shape[-2:] != (rec.target, rec.target):
        raise ShapeError(f"cannot invert crop: array is {image.shape[-2:]}, record expects "
                         f"{(rec.target, rec.target)}")
    h, w = rec.original
    out = np.full(image.shape[:-2] + (h, w), fill, dtype=image.dtype)
    (cy, py), (cx, px) = rec._axis(h), rec._axis(w)
    ny, nx = min(h, rec.target), min(w, rec.target)
    out[..., cy:cy + ny, cx:cx + nx] = image[..., py:py + ny, px:px + nx]
    return out


def normalize_intensity(image: np.ndarray) -> np.ndarray:
    """Min-max rescale every 2-D slice to [0, 1]; constant slices become zeros."""
    img = np.asarray(image, dtype=np.float32)
    lo = img.min(axis=(-2, -1), keepdims=True)
    span = img.max(axis=(-2, -1), keepdims=True) - lo
    safe = np.where(span > 0, span, 1)
    out = np.where(span > 0, (img - lo) / safe, 0).astype(np.float32)
    return np.clip(out, 0, 1, out=out)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    max_translation: float = 10.0  # px
    max_rotation: float = 15.0  # degrees
    scale_range: tuple = (0.9, 1.1)
    intensity_range: tuple = (0.8, 1.2)

    def __post_init__(self):
        if self.max_translation < 0 or self.max_rotation < 0:
            raise ConfigError("augmentation magnitudes must be non-negative")
        if not self.scale_range[0] <= 1 <= self.scale_range[1]:
            raise ConfigError("scale range must contain 1")
        if not self.intensity_range[0] <= 1 <= self.intensity_range[1]:
            raise ConfigError("intensity range must contain 1")


@dataclass(frozen=True)
class AugmentDraw:
    tx: float = 0.0  # columns
    ty: float = 0.0  # rows
    angle: float = 0.0  # degrees, counter-clockwise in display orientation
    scale: float = 1.0
    intensity: float = 1.0

    @classmethod
    def sample(cls, params: AugmentParams, rng: np.random.Generator) -> "AugmentDraw":
        t = params.max_translation
        return cls(tx=rng.uniform(-t, t), ty=rng.uniform(-t, t),
                   angle=rng.uniform(-params.max_rotation, params.max_rotation),
                   scale=rng.uniform(*params.scale_range),
                   intensity=rng.uniform(*params.intensity_range))


def apply_augmentation(image: np.ndarray, label: np.ndarray, draw: AugmentDraw):
    """Warp a 2-D image/label pair with one similarity transform.

    Bilinear for the image, nearest neighbour for labels, zero outside.
    """
    if image.shape != label.shape or image.ndim != 2:
        raise ShapeError("augment expects a paired 2-D image and label slice")
    centre = (np.array(image.shape, dtype=np.float64) - 1) / 2
    th = math.radians(draw.angle)
    fwd = draw.scale * np.array([[math.cos(th), math.sin(th)],
                                 [-math.sin(th), math.cos(th)]])
    shift = np.array([draw.ty, draw.tx])
    # scipy maps output coords to input coords: in = inv(fwd) @ (out - centre - shift) + centre
    inv = np.linalg.inv(fwd)
    offset = centre - inv @ (centre + shift)
    img = ndimage.affine_transform(image, inv, offset, order=1, mode="constant", cval=0.0)
    lab = ndimage.affine_transform(label, inv, offset, order=0, mode="constant", cval=0)
    img = np.clip(img * draw.intensity, 0.0, 1.0).astype(np.float32)
    return img, lab.astype(label.dtype)


def augment(image, label, params: AugmentParams, rng: np.random.Generator):
    return apply_augmentation(image, label, AugmentDraw.sample(params, rng))


def augment_batch(images, labels, params: AugmentParams, rng: np.random.Generator):
    out_i = np.empty_like(images)
    out_l = np.empty_like(labels)
    for i in range(len(images)):
        out_i[i], out_l[i] = augment(images[i], labels[i], params, rng)
    return out_i, out_l


# ---------------------------------------------------------------------------
# datasets


@dataclass
class SliceDataset:
    """Preprocessed 2-D training slices held in memory."""

    images: np.ndarray  # (M, S, S) float32 in [0, 1]
    labels: np.ndarray  # (M, S, S) int16
    keys: list = field(default_factory=list)  # (subject, frame, slice) per row

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "SliceDataset":
        idx = list(idx)
        return SliceDataset(self.images[idx], self.labels[idx], [self.keys[i] for i in idx] if self.keys else [])

    @classmethod
    def from_stacks(cls, items: Iterable, target: int) -> "SliceDataset":
        """Build from ``(subject_id, frame, image (Z,H,W), labels (Z,H,W))`` tuples."""
        imgs, labs, keys = [], [], []
        for sid, frame, img, lab in items:
            img, _ = crop_or_pad(img, target)
            lab, _ = crop_or_pad(lab, target)
            imgs.append(normalize_intensity(img))
            labs.append(lab.astype(np.int16))
            keys.extend((sid, frame, z) for z in range(img.shape[0]))
        if not imgs:
            return cls(np.zeros((0, target, target), np.float32), np.zeros((0, target, target), np.int16), [])
        return cls(np.concatenate(imgs), np.concatenate(labs), keys)


def iteration_rng(seed: int, iteration: int, worker: int = 0) -> np.random.Generator:
    """Independent, reproducible stream for one (seed, worker, iteration)."""
    return np.random.default_rng([seed, worker, iteration])


def sample_minibatch(dataset: SliceDataset, size: int, rng: np.random.Generator):
    """Uniform sampling with replacement over all slices."""
    if len(dataset) == 0:
        raise ConfigError("cannot sample from an empty dataset")
    idx = rng.integers(0, len(dataset), size)
    return dataset.images[idx], dataset.labels[idx]


MANIFEST_COLUMNS = ("subject_id", "path", "label_path", "frame_index", "slice_index", "phase", "split")


def write_manifest(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in MANIFEST_COLUMNS})


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return rows
    missing = {"path", "frame_index", "slice_index", "split"} - set(rows[0])
    if missing:
        raise ConfigError(f"manifest {path} lacks columns {sorted(missing)}")
    base = Path(path).parent
    for r in rows:
        r["frame_index"] = int(r["frame_index"])
        r["slice_index"] = int(r["slice_index"])
        r.setdefault("subject_id", Path(r["path"]).parent.name)
        for key in ("path", "label_path"):
            if r.get(key) and not Path(r[key]).is_absolute():
                r[key] = str(base / r[key])
    return rows


def dataset_from_manifest(path, split: str, target: int, phases=("ED", "ES")) -> SliceDataset:
    """Load the labelled slices of one split; ``phases=None`` keeps every frame."""
    rows = [r for r in read_manifest(path) if r["split"] == split
            and (phases is None or r.get("phase") in phases)]
    cache: dict[str, np.ndarray] = {}

    def load(p):
        if p not in cache:
            cache[p] = read_container(p).data
        return cache[p]

    imgs, labs, keys = [], [], []
    for r in rows:
        if not r.get("label_path"):
            raise ConfigError(f"manifest row for {r['path']} has no label_path")
        img = load(r["path"])[r["slice_index"]]
        lab = load(r["label_path"])[r["slice_index"]]
        img, _ = crop_or_pad(img, target)
        lab, _ = crop_or_pad(lab, target)
        imgs.append(normalize_intensity(img))
        labs.append(lab.astype(np.int16))
        keys.append((r["subject_id"], r["frame_index"], r["slice_index"]))
    if not imgs:
        return SliceDataset(np.zeros((0, target, target), np.float32), np.zeros((0, target, target), np.int16))
    return SliceDataset(np.stack(imgs), np.stack(labs), keys)


# ---------------------------------------------------------------------------
# synthetic short-axis phantoms


@dataclass(frozen=True)
class IntensityProfile:
    lv_blood: float = 0.9
    myocardium: float = 0.25
    rv_blood: float = 0.8
    background: float = 0.45


STANDARD_INTENSITY = IntensityProfile()
# contrast altered the way a different scanner/sequence might: darker blood,
# brighter myocardium and background
SHIFTED_INTENSITY = IntensityProfile(lv_blood=0.55, myocardium=0.75, rv_blood=0.5, background=0.3)


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and appearance of one synthetic short-axis cine stack (lengths in px)."""

    image_size: int = 48
    n_slices: int = 6
    n_frames: int = 20
    es_frame: int = 7
    centre: tuple = (23.5, 23.5)  # (row, col)
    lv_radius_ed: float = 9.0
    lv_radius_es: float = 6.0
    myo_thickness: float = 4.0  # at ED, base slice
    rv_radius: float = 10.0
    rv_angle: float = math.pi  # direction of the RV from the LV centre, radians
    apex_scale: float = 0.55  # cavity radius at the apical slice relative to the base
    spacing: tuple = DEFAULT_SPACING
    frame_interval: float = 0.04  # s
    intensity: IntensityProfile = STANDARD_INTENSITY
    noise_sigma: float = 0.03
    texture_amplitude: float = 0.12
    bias_amplitude: float = 0.1
    seed: int = 0

    def validate(self):
        if self.image_size <= 0 or self.n_slices <= 0:
            raise ConfigError("image size and slice count must be positive")
        if self.n_frames < 2 or not 0 < self.es_frame < self.n_frames:
            raise ConfigError("need at least 2 frames with ES strictly after the ED frame 0")
        if not 0 < self.lv_radius_es < self.lv_radius_ed:
            raise ConfigError("LV radius must shrink from ED to ES and stay positive")
        if self.myo_thickness <= 0 or self.rv_radius <= 0 or not 0 < self.apex_scale <= 1:
            raise ConfigError("myocardial thickness, RV radius and apex scale must be positive")
        reach = self._rv_offset() + self.rv_radius
        reach = max(reach, self.lv_radius_ed + self.myo_thickness)
        cy, cx = self.centre
        if min(cy, cx) - reach < 0 or max(cy, cx) + reach > self.image_size - 1:
            raise ConfigError(f"phantom geometry (reach {reach:.1f} px around {self.centre}) "
                              f"exceeds the {self.image_size} px image")

    def _rv_offset(self):
        return self.lv_radius_ed + self.myo_thickness - 0.35 * self.rv_radius

    def cavity_radius(self, frame: int) -> float:
        """Linear contraction to ES, then linear relaxation back toward ED."""
        if frame <= self.es_frame:
            phase = frame / self.es_frame
        else:
            phase = 1 - (frame - self.es_frame) / (self.n_frames - self.es_frame)
        return self.lv_radius_ed - (self.lv_radius_ed - self.lv_radius_es) * phase

    def slice_scale(self, z: int) -> float:
        if self.n_slices == 1:
            return 1.0
        return 1 - (1 - self.apex_scale) * (z / (self.n_slices - 1)) ** 1.5


def phantom_labels(spec: PhantomSpec) -> np.ndarray:
    """Exact class map (T, Z, H, W) from the generating geometry."""
    spec.validate()
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    cy, cx = spec.centre
    d_lv = np.hypot(yy - cy, xx - cx)
    ry, rx = cy + spec._rv_offset() * math.sin(spec.rv_angle), cx + spec._rv_offset() * math.cos(spec.rv_angle)
    d_rv = np.hypot(yy - ry, xx - rx)
    out = np.zeros((spec.n_frames, spec.n_slices, s, s), dtype=np.int16)
    wall_area = (spec.lv_radius_ed + spec.myo_thickness) ** 2 - spec.lv_radius_ed ** 2
    for t in range(spec.n_frames):
        contraction = spec.cavity_radius(t) / spec.lv_radius_ed
        for z in range(spec.n_slices):
            k = spec.slice_scale(z)
            r_cav = spec.cavity_radius(t) * k
            # myocardial area is conserved through the cycle: the wall thickens in systole
            r_epi = math.sqrt(r_cav ** 2 + wall_area * k * k)
            r_rv = spec.rv_radius * k * (0.5 + 0.5 * contraction)
            lab = out[t, z]
            lab[(d_rv <= r_rv) & (d_lv > r_epi)] = RV_CAVITY
            lab[d_lv <= r_epi] = LV_MYO
            lab[d_lv <= r_cav] = LV_CAVITY
    cavity = (out == LV_CAVITY).sum(axis=(1, 2, 3))
    others = np.delete(cavity, [0, spec.es_frame])
    if not (others.size == 0 or (cavity[0] > others.max() and cavity[spec.es_frame] < others.min())) \
            or cavity[0] <= cavity[spec.es_frame]:
        raise ConfigError("radius trajectory too flat: ED/ES cavity voxel counts are not strict extremes")
    return out


def generate_phantom(spec: PhantomSpec):
    """Synthetic cine stack and its exact labels: ``(Volume, LabelMap)`` of shape (T, Z, H, W)."""
    labels = phantom_labels(spec)
    rng = np.random.default_rng(spec.seed)
    t, z, s, _ = labels.shape
    ip = spec.intensity
    levels = np.array([ip.background, ip.lv_blood, ip.myocardium, ip.rv_blood], dtype=np.float64)
    img = levels[labels]
    bg = labels == 0
    if spec.texture_amplitude > 0:
        # static anatomy: one smooth texture per slice shared across frames
        tex = ndimage.gaussian_filter(rng.standard_normal((z, s, s)), sigma=(0, 2.0, 2.0))
        tex /= max(np.abs(tex).max(), 1e-12)
        img += np.where(bg, spec.texture_amplitude * tex[None], 0.0)
    if spec.bias_amplitude > 0:
        yy, xx = np.mgrid[0:s, 0:s] / max(s - 1, 1)
        a, b, ph = rng.uniform(-1, 1, 3)
        field_ = 1 + spec.bias_amplitude * np.sin(math.pi * (a * yy + b * xx) + math.pi * ph)
        img *= field_[None, None]
    if spec.noise_sigma > 0:
        img += rng.normal(0.0, spec.noise_sigma, img.shape)
    img = np.clip(img, 0.0, None).astype(np.float32)
    vol = Volume(img, spec.spacing, spec.frame_interval)
    lab = LabelMap(labels, spec.spacing, dict(SHORT_AXIS_CLASSES), spec.frame_interval)
    return vol, lab


def clean_spec(spec: PhantomSpec) -> PhantomSpec:
    """Same geometry with noise, texture and bias field switched off."""
    return replace(spec, noise_sigma=0.0, texture_amplitude=0.0, bias_amplitude=0.0)


def random_phantom_spec(rng: np.random.Generator, *, image_size=48, n_slices=6, n_frames=20,
                        intensity: IntensityProfile = STANDARD_INTENSITY, radius_scale=1.0,
                        seed=None) -> PhantomSpec:
    """One plausible subject: jittered size, contraction, RV placement and contrast."""
    unit = image_size / 48
    lv_ed = rng.uniform(7.5, 10.0) * unit * radius_scale
    ef_like = rng.uniform(0.25, 0.4)
    myo = rng.uniform(3.0, 4.5) * unit
    rv = rng.uniform(0.95, 1.2) * lv_ed
    es = int(rng.integers(max(1, round(0.3 * n_frames)), max(2, round(0.45 * n_frames)) + 1))
    es = min(es, n_frames - 1)
    jitter = lambda v: float(np.clip(v + rng.uniform(-0.06, 0.06), 0.05, 1.0))
    prof = IntensityProfile(*(jitter(getattr(intensity, f)) for f in
                              ("lv_blood", "myocardium", "rv_blood", "background")))
    base = PhantomSpec(image_size=image_size, n_slices=n_slices, n_frames=n_frames, es_frame=es,
                       lv_radius_ed=lv_ed, lv_radius_es=lv_ed * (1 - ef_like), myo_thickness=myo,
                       rv_radius=rv, rv_angle=math.pi + rng.uniform(-0.5, 0.5),
                       intensity=prof, seed=int(rng.integers(2**31)) if seed is None else seed)
    reach = base._rv_offset() + rv
    c = (image_size - 1) / 2
    # shift the LV away from the RV side so the whole heart fits, then jitter
    dy, dx = math.sin(base.rv_angle), math.cos(base.rv_angle)
    shift = max(0.0, reach - (image_size - 1) / 2 + 1.5)
    cy, cx = c - dy * shift, c - dx * shift
    for _ in range(20):
        jy, jx = rng.uniform(-2, 2, 2) * unit
        cand = replace(base, centre=(cy + jy, cx + jx))
        try:
            cand.validate()
            return cand
        except ConfigError:
            continue
    cand = replace(base, centre=(cy, cx))
    cand.validate()
    return cand


def synth_cohort(n_subjects: int, seed: int, **kw) -> list[PhantomSpec]:
    if n_subjects <= 0:
        raise ConfigError("need at least one subject")
    rng = np.random.default_rng(seed)
    return [random_phantom_spec(rng, **kw) for _ in range(n_subjects)]


def split_counts(n: int, fractions=(0.7, 0.1, 0.2)) -> tuple:
    """Train/val/test subject counts; rounding leftovers go to train."""
    if abs(sum(fractions) - 1) > 1e-9 or min(fractions) < 0:
        raise ConfigError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    val = int(round(n * fractions[1]))
    test = int(round(n * fractions[2]))
    return n - val - test, val, test


def phantom_dataset(specs: Sequence[PhantomSpec], target: int, frames="edes") -> SliceDataset:
    """Slices of ED and ES frames (or every frame with ``frames='all'``) of each phantom."""
    items = []
    for i, sp in enumerate(specs):
        vol, lab = generate_phantom(sp)
        picks = range(sp.n_frames) if frames == "all" else (0, sp.es_frame)
        for f in picks:
            items.append((i, f, vol.data[f], lab.data[f]))
    return SliceDataset.from_stacks(items, target)
