"""Synthetic two-domain cardiac-like corpus, augmentations and batch streams.

Each subject is a stack of short-axis-like slices containing three nested
structures: an inner disk (LV analogue), a ring around it (MYO analogue) and
a crescent-shaped blob on one side (RV analogue).  The same anatomy is
rendered under three appearance models:

* ``source``: smooth shading, dark myocardium, mild Gaussian noise.
* ``target``: compressed contrast, multiplicative bias field and speckle.
* ``aux``: compressed contrast with additive noise and a weaker bias field;
  only used to pretrain the style module.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

NUM_CLASSES = 4
CLASS_NAMES = ("BG", "MYO", "LV", "RV")
DOMAINS = ("source", "target", "aux")
MODES = ("oneshot", "fewshot", "full")


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # [1, H, W] float32 in [0, 1]
    label: np.ndarray  # [H, W] int64 class index
    domain_tag: str
    subject_id: int
    slice_id: int

    @property
    def onehot(self) -> np.ndarray:
        return np.eye(NUM_CLASSES, dtype=np.float32)[self.label].transpose(2, 0, 1)


@dataclass(frozen=True)
class Appearance:
    """Intensity model of one domain (values before min-max normalization)."""

    outside: float
    body: float
    myo: float
    lv: float
    rv: float
    organ: tuple[float, float]
    shading: float
    noise: float
    blur: float
    bias: float = 0.0
    speckle: float = 0.0
    jitter: float = 0.04


DEFAULT_APPEARANCE = {
    "source": Appearance(
        outside=0.0, body=0.45, myo=0.2, lv=0.9, rv=0.8,
        organ=(0.55, 0.7), shading=0.08, noise=0.03, blur=0.8,
    ),
    "target": Appearance(
        outside=0.0, body=0.4, myo=0.3, lv=0.6, rv=0.55,
        organ=(0.5, 0.8), shading=0.05, noise=0.02, blur=0.6,
        bias=0.35, speckle=0.25,
    ),
    "aux": Appearance(
        outside=0.0, body=0.35, myo=0.25, lv=0.6, rv=0.55,
        organ=(0.45, 0.75), shading=0.06, noise=0.06, blur=0.7,
        bias=0.2,
    ),
}


@dataclass(frozen=True)
class GeometryParams:
    size: int = 64
    lv_radius: tuple[float, float] = (6.5, 9.5)
    myo_thickness: tuple[float, float] = (3.0, 4.5)
    rv_axes: tuple[tuple[float, float], tuple[float, float]] = ((4.5, 6.5), (9.0, 13.0))
    center_jitter: float = 3.0
    slices: tuple[int, int] = (8, 12)

    def validate(self) -> None:
        if self.size < 16:
            raise ValueError(f"image size must be >= 16, got {self.size}")
        for name in ("lv_radius", "myo_thickness"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ValueError(f"invalid {name} range ({lo}, {hi})")
        for lo, hi in self.rv_axes:
            if lo <= 0 or hi < lo:
                raise ValueError(f"invalid rv_axes range ({lo}, {hi})")
        if self.slices[0] < 1 or self.slices[1] < self.slices[0]:
            raise ValueError(f"invalid slice count range {self.slices}")


@dataclass(frozen=True)
class _Subject:
    center: tuple[float, float]
    lv_radius: float
    thickness: float
    rv_angle: float
    rv_axes: tuple[float, float]
    n_slices: int
    organ_centers: np.ndarray
    organ_radii: np.ndarray


def _draw_subject(rng: np.random.Generator, geo: GeometryParams) -> _Subject:
    c = geo.size / 2 - 0.5
    return _Subject(
        center=(c + rng.uniform(-1, 1) * geo.center_jitter, c + rng.uniform(-1, 1) * geo.center_jitter),
        lv_radius=rng.uniform(*geo.lv_radius),
        thickness=rng.uniform(*geo.myo_thickness),
        rv_angle=np.deg2rad(rng.uniform(150.0, 210.0)),
        rv_axes=(rng.uniform(*geo.rv_axes[0]), rng.uniform(*geo.rv_axes[1])),
        n_slices=int(rng.integers(geo.slices[0], geo.slices[1] + 1)),
        organ_centers=rng.uniform(0.12, 0.88, size=(3, 2)) * geo.size,
        organ_radii=rng.uniform(3.0, 7.0, size=3),
    )


def _slice_label(subj: _Subject, pos: float, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Label map and body mask for a slice at relative position ``pos`` (0 = base, 1 = apex)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = subj.center
    scale = 1.0 - 0.45 * pos**2
    r_lv = subj.lv_radius * scale
    r_myo = r_lv + subj.thickness * (0.85 + 0.15 * scale)
    dist = np.hypot(yy - cy, xx - cx)

    label = np.zeros((size, size), dtype=np.int64)
    # RV: ellipse tangential to the myocardium, shrinking toward the apex
    rv_scale = 1.0 - 0.55 * pos
    a, b = subj.rv_axes[0] * rv_scale, subj.rv_axes[1] * rv_scale
    d = r_myo + 0.55 * a
    ry, rx = cy + d * np.sin(subj.rv_angle), cx + d * np.cos(subj.rv_angle)
    ca, sa = np.cos(subj.rv_angle), np.sin(subj.rv_angle)
    u = (xx - rx) * ca + (yy - ry) * sa
    v = -(xx - rx) * sa + (yy - ry) * ca
    label[(u / a) ** 2 + (v / b) ** 2 <= 1.0] = 3
    label[dist <= r_myo] = 1
    label[dist <= r_lv] = 2

    body = ((yy - size / 2) / (0.47 * size)) ** 2 + ((xx - size / 2) / (0.49 * size)) ** 2 <= 1.0
    return label, body


def _smooth_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="reflect")
    return f / (np.abs(f).max() + 1e-12)


def _minmax(img: np.ndarray) -> np.ndarray:
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-12:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def _render(
    label: np.ndarray,
    body: np.ndarray,
    subj: _Subject,
    app: Appearance,
    rng: np.random.Generator,
) -> np.ndarray:
    size = label.shape[0]
    jit = app.jitter
    levels = {
        "body": app.body + rng.uniform(-jit, jit),
        "myo": app.myo + rng.uniform(-jit, jit),
        "lv": app.lv + rng.uniform(-jit, jit),
        "rv": app.rv + rng.uniform(-jit, jit),
    }
    img = np.full((size, size), app.outside, dtype=np.float64)
    img[body] = levels["body"]
    yy, xx = np.mgrid[0:size, 0:size]
    for (oy, ox), r in zip(subj.organ_centers, subj.organ_radii):
        blob = (np.hypot(yy - oy, xx - ox) <= r) & body & (label == 0)
        img[blob] = rng.uniform(*app.organ)
    img[label == 1] = levels["myo"]
    img[label == 2] = levels["lv"]
    img[label == 3] = levels["rv"]

    img = img + app.shading * _smooth_field(rng, size, 8.0) * body
    img = ndimage.gaussian_filter(img, app.blur)
    if app.bias > 0:
        img = img * (1.0 + app.bias * _smooth_field(rng, size, 12.0))
    if app.speckle > 0:
        # gamma-distributed multiplicative speckle with unit mean
        k = 1.0 / app.speckle**2
        img = img * rng.gamma(k, 1.0 / k, size=img.shape)
    img = img + app.noise * rng.standard_normal(img.shape)
    return _minmax(img).astype(np.float32)


def generate_corpus(
    n_subjects: int,
    seed: int,
    domain_params: dict[str, Appearance] | None = None,
    geometry: GeometryParams | None = None,
    domains: Sequence[str] = DOMAINS,
) -> list[Sample]:
    """Generate ``n_subjects`` subjects rendered in every requested domain.

    Anatomy is shared between the domains of a subject (as for multi-sequence
    scans of one patient); only the appearance differs.  The output is fully
    determined by ``(n_subjects, seed, domain_params, geometry)``.
    """
    if n_subjects < 1:
        raise ValueError(f"n_subjects must be >= 1, got {n_subjects}")
    geometry = geometry or GeometryParams()
    geometry.validate()
    params = dict(DEFAULT_APPEARANCE)
    params.update(domain_params or {})
    unknown = set(domains) - set(params)
    if unknown:
        raise ValueError(f"unknown domains {sorted(unknown)}")

    samples: list[Sample] = []
    for sid in range(n_subjects):
        subj = _draw_subject(np.random.default_rng([seed, sid]), geometry)
        for d_idx, dom in enumerate(DOMAINS):
            if dom not in domains:
                continue
            rng = np.random.default_rng([seed, sid, d_idx + 1])
            for k in range(subj.n_slices):
                pos = k / max(subj.n_slices - 1, 1)
                label, body = _slice_label(subj, pos, geometry.size)
                img = _render(label, body, subj, params[dom], rng)
                samples.append(Sample(img[None], label, dom, sid, k))
    return samples


def subject_folds(n_subjects: int, n_folds: int = 5, seed: int = 0) -> list[np.ndarray]:
    """Subject-level cross-validation folds (disjoint, covering all subjects)."""
    if not 1 <= n_folds <= n_subjects:
        raise ValueError(f"need 1 <= n_folds <= n_subjects, got {n_folds}, {n_subjects}")
    perm = np.random.default_rng([seed, 7919]).permutation(n_subjects)
    return [np.sort(f) for f in np.array_split(perm, n_folds)]


# ---------------------------------------------------------------------------
# augmentation


def _affine(
    image: np.ndarray, label: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    h, w = label.shape
    angle = np.deg2rad(rng.uniform(-15.0, 15.0))
    scale = rng.uniform(0.9, 1.1)
    shift = rng.uniform(-0.1, 0.1, size=2) * np.array([h, w])
    # inverse map: output coordinate -> input coordinate
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]) / scale
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = center - rot @ (center + shift)
    img = ndimage.affine_transform(image[0], rot, offset, order=1, mode="nearest")
    lab = ndimage.affine_transform(label, rot, offset, order=0, mode="nearest")
    return img[None].astype(np.float32), lab


def _elastic(
    image: np.ndarray, label: np.ndarray, rng: np.random.Generator, alpha: float = 6.0, sigma: float = 4.0
) -> tuple[np.ndarray, np.ndarray]:
    h, w = label.shape
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma) * alpha / 0.1
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma) * alpha / 0.1
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([yy + dy, xx + dx])
    img = ndimage.map_coordinates(image[0], coords, order=1, mode="nearest")
    lab = ndimage.map_coordinates(label, coords, order=0, mode="nearest")
    return img[None].astype(np.float32), lab


def augment_source(s: Sample, seed, p: float = 0.5) -> Sample:
    """Affine-only augmentation for labeled source images."""
    rng = np.random.default_rng(seed)
    if rng.uniform() >= p:
        return s
    img, lab = _affine(s.image, s.label, rng)
    return replace(s, image=np.clip(img, 0.0, 1.0), label=lab)


def augment_target_heavy(s: Sample, seed, p: float = 0.5) -> Sample:
    """Affine, elastic, Gaussian noise, pixel dropout and blur, each with probability ``p``."""
    rng = np.random.default_rng(seed)
    img, lab = s.image, s.label
    changed = False
    if rng.uniform() < p:
        img, lab = _affine(img, lab, rng)
        changed = True
    if rng.uniform() < p:
        img, lab = _elastic(img, lab, rng)
        changed = True
    if rng.uniform() < p:
        img = img + rng.normal(0.0, rng.uniform(0.02, 0.08), img.shape).astype(np.float32)
        changed = True
    if rng.uniform() < p:
        keep = rng.uniform(size=img.shape) >= rng.uniform(0.02, 0.1)
        img = img * keep
        changed = True
    if rng.uniform() < p:
        img = ndimage.gaussian_filter(img, (0, *[rng.uniform(0.5, 1.2)] * 2))
        changed = True
    if not changed:
        return s
    return replace(s, image=np.clip(img, 0.0, 1.0).astype(np.float32), label=lab)


# ---------------------------------------------------------------------------
# batch streams


@dataclass
class Batch:
    images: np.ndarray  # [B, 1, H, W]
    labels: np.ndarray  # [B, H, W]
    subject_ids: np.ndarray
    slice_ids: np.ndarray

    @classmethod
    def stack(cls, samples: Sequence[Sample]) -> "Batch":
        return cls(
            np.stack([s.image for s in samples]).astype(np.float32),
            np.stack([s.label for s in samples]),
            np.array([s.subject_id for s in samples]),
            np.array([s.slice_id for s in samples]),
        )


@dataclass
class Split:
    """Training / evaluation pools of one fold under one experiment mode."""

    source_train: list[Sample]
    target_train: list[Sample]
    source_test: list[Sample]
    target_test: list[Sample]
    aux_train: list[Sample] = field(default_factory=list)


def make_split(corpus: Sequence[Sample], mode: str, fold: int, n_folds: int = 5, seed: int = 0) -> Split:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
    subjects = sorted({s.subject_id for s in corpus})
    folds = subject_folds(len(subjects), n_folds, seed)
    test_subj = {subjects[i] for i in folds[fold % n_folds]}

    def pick(dom: str, test: bool) -> list[Sample]:
        return [s for s in corpus if s.domain_tag == dom and (s.subject_id in test_subj) == test]

    target = pick("target", False)
    if target:
        rng = np.random.default_rng([seed, fold, 104729])
        train_subj = sorted({s.subject_id for s in target})
        chosen = train_subj[int(rng.integers(len(train_subj)))]
        if mode == "fewshot":
            target = [s for s in target if s.subject_id == chosen]
        elif mode == "oneshot":
            stack = [s for s in target if s.subject_id == chosen]
            target = [stack[len(stack) // 2]]
    return Split(pick("source", False), target, pick("source", True), pick("target", True), pick("aux", False))


@dataclass
class BatchTriple:
    source: Batch
    target: Batch
    target_aug: Batch


def steps_per_epoch(n_source: int, source_bs: int) -> int:
    return max(1, n_source // source_bs)


def batch_at(
    split: Split, step: int, source_bs: int, target_bs: int, seed: int, augment: bool = True
) -> BatchTriple:
    """The batch triple served at global ``step``; a pure function of its arguments."""
    if not split.source_train:
        raise ValueError("empty source training pool")
    if not split.target_train:
        raise ValueError("empty target training pool")
    n = len(split.source_train)
    spe = steps_per_epoch(n, source_bs)
    epoch, k = divmod(step, spe)
    order = np.random.default_rng([seed, epoch, 1]).permutation(n)
    idx = order[(k * source_bs) % n:][:source_bs]
    if len(idx) < source_bs:
        idx = np.concatenate([idx, order[: source_bs - len(idx)]])
    rng = np.random.default_rng([seed, step, 2])
    src = [split.source_train[i] for i in idx]
    if augment:
        src = [augment_source(s, rng.integers(2**32)) for s in src]
    tgt = [split.target_train[int(rng.integers(len(split.target_train)))] for _ in range(target_bs)]
    tgt_aug = [augment_target_heavy(s, rng.integers(2**32)) for s in tgt]
    return BatchTriple(Batch.stack(src), Batch.stack(tgt), Batch.stack(tgt_aug))


def sample_batches(
    split: Split,
    source_bs: int,
    target_bs: int,
    seed: int,
    start_step: int = 0,
    n_steps: int | None = None,
) -> Iterator[BatchTriple]:
    """Stream of (source, target, heavy-augmented target) batch triples."""
    step = start_step
    while n_steps is None or step < start_step + n_steps:
        yield batch_at(split, step, source_bs, target_bs, seed)
        step += 1


# ---------------------------------------------------------------------------
# persistence: manifest.txt (key = value) + flat little-endian binaries


def corpus_fingerprint(n_subjects: int, seed: int, domains: Sequence[str]) -> str:
    payload = json.dumps(
        {"n": n_subjects, "seed": seed, "domains": list(domains), "app": {k: repr(v) for k, v in DEFAULT_APPEARANCE.items()}},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def save_corpus(
    corpus: Sequence[Sample], path: str | Path, seed: int, n_subjects: int, n_folds: int = 5
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    images = np.stack([s.image for s in corpus]).astype("<f4")
    labels = np.stack([s.label for s in corpus]).astype("u1")
    dom = np.array([DOMAINS.index(s.domain_tag) for s in corpus], dtype="<i4")
    subj = np.array([s.subject_id for s in corpus], dtype="<i4")
    sl = np.array([s.slice_id for s in corpus], dtype="<i4")
    folds = subject_folds(n_subjects, n_folds, seed)
    fold_of = np.empty(n_subjects, dtype="<i4")
    for i, f in enumerate(folds):
        fold_of[f] = i
    arrays = {"images": images, "labels": labels, "domain": dom, "subject": subj, "slice": sl, "fold": fold_of[subj]}
    for name, arr in arrays.items():
        arr.tofile(path / f"{name}.bin")
    lines = [
        "format = centroid-uda-corpus/1",
        f"seed = {seed}",
        f"n_subjects = {n_subjects}",
        f"n_samples = {len(corpus)}",
        f"n_folds = {n_folds}",
        f"domains = {','.join(DOMAINS)}",
        f"fingerprint = {corpus_fingerprint(n_subjects, seed, DOMAINS)}",
    ]
    for i, f in enumerate(folds):
        lines.append(f"fold.{i} = {','.join(map(str, f))}")
    for name, arr in arrays.items():
        lines.append(f"array.{name} = {arr.dtype.str} {'x'.join(map(str, arr.shape))}")
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def load_corpus(path: str | Path) -> list[Sample]:
    path = Path(path)
    man = read_manifest(path / "manifest.txt")
    arrays = {}
    for key, value in man.items():
        if key.startswith("array."):
            name = key[len("array."):]
            dtype, shape = value.split()
            arrays[name] = np.fromfile(path / f"{name}.bin", dtype=dtype).reshape(
                [int(x) for x in shape.split("x")]
            )
    return [
        Sample(
            arrays["images"][i].astype(np.float32),
            arrays["labels"][i].astype(np.int64),
            DOMAINS[arrays["domain"][i]],
            int(arrays["subject"][i]),
            int(arrays["slice"][i]),
        )
        for i in range(int(man["n_samples"]))
    ]
