"""Dataset ingestion, evaluation protocol, and the synthetic corpus.

The synthetic generator plants the label structure the relation modules are
meant to exploit: co-occurrence groups activate all-or-nothing with blob
intensity attenuated down the group order, one mutually exclusive pair
renders at a shared facial location at different intensities, and a faint
landmark scaffold ties blob positions to per-subject geometry.
"""

from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .au_region import AUCenterTable, FACE_TEMPLATE_49
from .errors import ConfigError, DataError
from .rng import SplitRng

SYNTHETIC_AUS = (1, 2, 4, 5, 6, 7, 9, 10, 12, 14, 15, 17)
SCAFFOLD_LANDMARKS = (0, 4, 5, 9, 10, 13, 19, 22, 25, 28, 31, 37, 34, 40)


@dataclass
class Sample:
    image: np.ndarray            # (C, H, W) float64 in [0, 1]
    au_labels: np.ndarray        # (n_au,) int 0/1, or raw 0..5 intensities
    landmarks: np.ndarray        # (L, 2) normalized
    subject_id: str


@dataclass
class Manifest:
    dataset: str
    au_ids: tuple[int, ...]
    landmark_count: int
    label_mode: str              # "binary" or "intensity"
    image_size: tuple[int, int]
    image_channels: int
    rows: list[tuple[str, str, list[int], np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        if self.label_mode not in ("binary", "intensity"):
            raise DataError(f"unknown label mode {self.label_mode!r}")


def binarize_intensity(raw: int) -> int:
    """Occurrence iff the labelled intensity reaches 2 on the 0..5 scale."""
    if not 0 <= int(raw) <= 5:
        raise DataError(f"intensity {raw} outside the 0..5 range")
    return 1 if raw >= 2 else 0


# ----------------------------------------------------------------------
# manifest file format: '#' metadata lines, then a CSV header and rows
# ----------------------------------------------------------------------


def write_manifest(manifest: Manifest, path):
    lines = [
        "# hicomex-manifest v1",
        f"# dataset={manifest.dataset}",
        f"# au_ids={';'.join(str(a) for a in manifest.au_ids)}",
        f"# landmark_count={manifest.landmark_count}",
        f"# label_mode={manifest.label_mode}",
        f"# image_size={manifest.image_size[0]}x{manifest.image_size[1]}",
        f"# image_channels={manifest.image_channels}",
        "path,subject_id,au_labels,landmarks",
    ]
    for img_path, subject, labels, landmarks in manifest.rows:
        labels_s = ";".join(str(int(v)) for v in labels)
        lms_s = ";".join(f"{float(x)!r}:{float(y)!r}" for x, y in landmarks)
        lines.append(f"{img_path},{subject},{labels_s},{lms_s}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> Manifest:
    meta = {}
    body = []
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    for line in text.splitlines():
        if line.startswith("#"):
            if "=" in line:
                key, value = line[1:].split("=", 1)
                meta[key.strip()] = value.strip()
        elif line.strip():
            body.append(line)
    required = ("dataset", "au_ids", "landmark_count", "label_mode",
                "image_size", "image_channels")
    for key in required:
        if key not in meta:
            raise DataError(f"manifest {path} is missing '# {key}=' metadata")
    header, *rows = csv.reader(body)
    if header != ["path", "subject_id", "au_labels", "landmarks"]:
        raise DataError(f"manifest {path} has unexpected header {header}")
    h, w = meta["image_size"].split("x")
    manifest = Manifest(
        dataset=meta["dataset"],
        au_ids=tuple(int(a) for a in meta["au_ids"].split(";")),
        landmark_count=int(meta["landmark_count"]),
        label_mode=meta["label_mode"],
        image_size=(int(h), int(w)),
        image_channels=int(meta["image_channels"]),
    )
    n_au = len(manifest.au_ids)
    for row in rows:
        if len(row) != 4:
            raise DataError(f"manifest row has {len(row)} fields, expected 4: {row}")
        img_path, subject, labels_s, lms_s = row
        if not subject:
            raise DataError(f"empty subject_id for {img_path}")
        labels = [int(v) for v in labels_s.split(";")]
        if len(labels) != n_au:
            raise DataError(
                f"{img_path}: {len(labels)} labels for {n_au} configured AUs")
        pairs = [p.split(":") for p in lms_s.split(";")]
        landmarks = np.array([[float(x), float(y)] for x, y in pairs])
        if landmarks.shape != (manifest.landmark_count, 2):
            raise DataError(
                f"{img_path}: {landmarks.shape[0]} landmarks, expected "
                f"{manifest.landmark_count}")
        manifest.rows.append((img_path, subject, labels, landmarks))
    return manifest


def load_samples(manifest: Manifest, root) -> list[Sample]:
    """Materialize samples; intensity labels are binarized on load."""
    root = Path(root)
    c, (h, w) = manifest.image_channels, manifest.image_size
    samples = []
    for img_path, subject, labels, landmarks in manifest.rows:
        full = root / img_path
        if not full.exists():
            raise DataError(f"image file missing: {full}")
        image = read_image(full, (c, h, w))
        if manifest.label_mode == "intensity":
            labels = [binarize_intensity(v) for v in labels]
        else:
            bad = [v for v in labels if v not in (0, 1)]
            if bad:
                raise DataError(f"{img_path}: binary labels must be 0/1, got {bad}")
        samples.append(Sample(image, np.array(labels, dtype=np.int64),
                              landmarks, subject))
    return samples


# ----------------------------------------------------------------------
# image files: raw float64 planes or 8-bit grayscale PNG
# ----------------------------------------------------------------------


def write_image(path, image: np.ndarray):
    path = Path(path)
    if path.suffix == ".f64":
        path.write_bytes(np.ascontiguousarray(image, dtype="<f8").tobytes())
    elif path.suffix == ".png":
        if image.shape[0] != 1:
            raise DataError("PNG output supports single-channel images only")
        write_gray_png(path, np.round(image[0] * 255.0).astype(np.uint8))
    else:
        raise DataError(f"unsupported image extension: {path.suffix}")


def read_image(path, shape) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".f64":
        flat = np.frombuffer(path.read_bytes(), dtype="<f8")
        if flat.size != int(np.prod(shape)):
            raise DataError(f"{path}: {flat.size} values, expected {np.prod(shape)}")
        return flat.reshape(shape).astype(np.float64)
    if path.suffix == ".png":
        gray = read_gray_png(path)
        if gray.shape != shape[1:]:
            raise DataError(f"{path}: PNG is {gray.shape}, expected {shape[1:]}")
        return (gray / 255.0)[None].astype(np.float64)
    raise DataError(f"unsupported image extension: {path.suffix}")


def write_gray_png(path, gray: np.ndarray):
    h, w = gray.shape
    raw = b"".join(b"\x00" + gray[i].tobytes() for i in range(h))

    def chunk(tag, payload):
        return (struct.pack(">I", len(payload)) + tag + payload
                + struct.pack(">I", zlib.crc32(tag + payload)))

    header = struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0)
    blob = (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", header)
            + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b""))
    Path(path).write_bytes(blob)


def read_gray_png(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != b"\x89PNG\r\n\x1a\n":
        raise DataError(f"{path}: not a PNG file")
    offset, w = 8, None
    idat = b""
    while offset < len(raw):
        (length,) = struct.unpack_from(">I", raw, offset)
        tag = raw[offset + 4:offset + 8]
        payload = raw[offset + 8:offset + 8 + length]
        if tag == b"IHDR":
            w, h, depth, color = struct.unpack_from(">IIBB", payload)
            if depth != 8 or color != 0:
                raise DataError(f"{path}: only 8-bit grayscale PNG is supported")
        elif tag == b"IDAT":
            idat += payload
        offset += length + 12
    if w is None:
        raise DataError(f"{path}: missing IHDR")
    flat = zlib.decompress(idat)
    rows = []
    for i in range(h):
        line = flat[i * (w + 1):(i + 1) * (w + 1)]
        if line[0] != 0:
            raise DataError(f"{path}: unsupported PNG filter {line[0]}")
        rows.append(np.frombuffer(line[1:], dtype=np.uint8))
    return np.stack(rows)


# ----------------------------------------------------------------------
# evaluation protocol
# ----------------------------------------------------------------------


def kfold_subject_exclusive(samples, k: int = 3, seed: int = 0):
    """Partition subjects (never samples) into k test folds, balanced ±1.

    Returns a list of (train_indices, test_indices) into ``samples``.
    """
    subjects = sorted({s.subject_id for s in samples})
    if len(subjects) < k:
        raise DataError(f"{len(subjects)} subjects cannot fill {k} folds")
    order = SplitRng(seed, ("kfold",)).permutation(len(subjects))
    shuffled = [subjects[i] for i in order]
    base, extra = divmod(len(subjects), k)
    folds, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append(set(shuffled[start:start + size]))
        start += size
    splits = []
    for fold in folds:
        test = [i for i, s in enumerate(samples) if s.subject_id in fold]
        train = [i for i, s in enumerate(samples) if s.subject_id not in fold]
        splits.append((train, test))
    return splits


def f1_per_au(preds: np.ndarray, labels: np.ndarray):
    """Per-AU F1 = 2TP/(2TP+FP+FN), defined as 0 on an empty denominator."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise DataError(f"prediction shape {preds.shape} != label shape {labels.shape}")
    tp = ((preds == 1) & (labels == 1)).sum(axis=0).astype(np.float64)
    fp = ((preds == 1) & (labels == 0)).sum(axis=0).astype(np.float64)
    fn = ((preds == 0) & (labels == 1)).sum(axis=0).astype(np.float64)
    denom = 2 * tp + fp + fn
    scores = np.divide(2 * tp, denom, out=np.zeros_like(denom), where=denom > 0)
    return scores, float(scores.mean())


# ----------------------------------------------------------------------
# synthetic corpus
# ----------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    au_ids: tuple[int, ...] = SYNTHETIC_AUS
    groups: tuple[tuple[int, ...], ...] = ((1, 2, 5), (4, 7, 9))
    exclusions: tuple[tuple[int, int], ...] = ((12, 15),)
    group_prob: float = 0.4
    exclusion_probs: tuple[float, float] = (0.3, 0.4)
    independent_prob: float = 0.35
    n_samples: int = 3000
    n_subjects: int = 12
    image_size: int = 96
    noise: float = 0.25
    blob_sigma: float = 3.2
    attenuation: float = 0.13          # intensity falloff down a group
    group_intensities: tuple[float, ...] = (0.55, 0.28)   # strongest member
    exclusion_intensities: tuple[float, float] = (0.55, 0.35)
    independent_intensity: float = 0.55
    scaffold_intensity: float = 0.30
    gain_jitter: float = 0.15          # per-sample illumination scale
    subject_jitter: float = 0.02
    landmark_jitter: float = 0.006

    def __post_init__(self):
        au_set = set(self.au_ids)
        seen = set()
        for group in self.groups:
            members = set(group)
            if not members <= au_set:
                raise ConfigError(f"group {group} has AUs outside the AU list")
            if members & seen:
                raise ConfigError(f"group {group} overlaps another group")
            seen |= members
        for a, b in self.exclusions:
            if a not in au_set or b not in au_set:
                raise ConfigError(f"exclusion pair ({a},{b}) outside the AU list")
            if a in seen or b in seen:
                raise ConfigError(
                    f"exclusion pair ({a},{b}) overlaps a co-occurrence group")
        if not 0 <= self.group_prob <= 1 or not 0 <= self.independent_prob <= 1:
            raise ConfigError("probabilities must be in [0,1]")
        if sum(self.exclusion_probs) > 1:
            raise ConfigError("exclusion member probabilities must sum to <= 1")
        if len(self.group_intensities) != len(self.groups):
            raise ConfigError(
                f"{len(self.groups)} groups need {len(self.groups)} "
                f"group_intensities, got {len(self.group_intensities)}")

    @property
    def independents(self) -> tuple[int, ...]:
        bound = set()
        for group in self.groups:
            bound |= set(group)
        for pair in self.exclusions:
            bound |= set(pair)
        return tuple(a for a in self.au_ids if a not in bound)


def sample_labels(spec: SyntheticSpec, rng: SplitRng):
    """Draw one label vector plus per-AU blob intensities."""
    labels = {au: 0 for au in spec.au_ids}
    intensity = {au: 0.0 for au in spec.au_ids}
    for gi, group in enumerate(spec.groups):
        if rng.random(()) < spec.group_prob:
            for order, au in enumerate(group):
                labels[au] = 1
                intensity[au] = spec.group_intensities[gi] * spec.attenuation ** order
    for a, b in spec.exclusions:
        u = float(rng.random(()))
        if u < spec.exclusion_probs[0]:
            labels[a], intensity[a] = 1, spec.exclusion_intensities[0]
        elif u < sum(spec.exclusion_probs):
            labels[b], intensity[b] = 1, spec.exclusion_intensities[1]
    for au in spec.independents:
        if rng.random(()) < spec.independent_prob:
            labels[au], intensity[au] = 1, spec.independent_intensity
    return (np.array([labels[a] for a in spec.au_ids], dtype=np.int64),
            np.array([intensity[a] for a in spec.au_ids]))


def render_image(spec: SyntheticSpec, landmarks: np.ndarray,
                 centers: np.ndarray, intensity: np.ndarray,
                 noise_rng: SplitRng | None, gain: float = 1.0) -> np.ndarray:
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    image = np.zeros((size, size))
    sig2 = 2.0 * spec.blob_sigma ** 2
    scaffold_sig2 = 2.0 * 1.2 ** 2
    for idx in SCAFFOLD_LANDMARKS:
        cx, cy = landmarks[idx] * (size - 1)
        image += spec.scaffold_intensity * np.exp(
            -((xx - cx) ** 2 + (yy - cy) ** 2) / scaffold_sig2)
    for amp, (cx, cy) in zip(intensity, centers * (size - 1)):
        if amp > 0:
            image += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / sig2)
    image *= gain
    if noise_rng is not None and spec.noise > 0:
        image += noise_rng.normal(0.0, spec.noise, image.shape)
    return np.clip(image, 0.0, 1.0)[None]


def generate_synthetic(spec: SyntheticSpec, seed: int,
                       table: AUCenterTable | None = None,
                       image_format: str = "f64") -> tuple[Manifest, list[Sample]]:
    """Build the synthetic corpus in memory; deterministic per seed."""
    table = table or AUCenterTable()
    table.validate(spec.au_ids, FACE_TEMPLATE_49.shape[0])
    root = SplitRng(seed, ("synthetic",))

    subject_landmarks = {}
    for s in range(spec.n_subjects):
        srng = root.child("subject", s)
        shift = srng.uniform(-spec.subject_jitter, spec.subject_jitter, (1, 2))
        wobble = srng.normal(0.0, spec.landmark_jitter, FACE_TEMPLATE_49.shape)
        subject_landmarks[s] = np.clip(FACE_TEMPLATE_49 + shift + wobble, 0.0, 1.0)

    manifest = Manifest(
        dataset="synthetic", au_ids=spec.au_ids,
        landmark_count=FACE_TEMPLATE_49.shape[0], label_mode="binary",
        image_size=(spec.image_size, spec.image_size), image_channels=1)
    samples = []
    digits = max(6, len(str(spec.n_samples)))
    for i in range(spec.n_samples):
        rng = root.child("sample", i)
        subject = int(rng.integers(0, spec.n_subjects))
        labels, intensity = sample_labels(spec, rng.child("labels"))
        landmarks = subject_landmarks[subject]
        centers = table.centers(landmarks, spec.au_ids)
        noise_rng = rng.child("noise") if spec.noise > 0 else None
        gain = 1.0
        if spec.gain_jitter > 0:
            gain = 1.0 + spec.gain_jitter * float(
                rng.child("gain").uniform(-1.0, 1.0, ()))
        image = render_image(spec, landmarks, centers, intensity, noise_rng,
                             gain)
        if image_format == "png":
            image = np.round(image * 255.0) / 255.0  # match on-disk precision
        path = f"images/{i:0{digits}d}.{image_format}"
        samples.append(Sample(image, labels, landmarks, f"s{subject:02d}"))
        manifest.rows.append((path, f"s{subject:02d}", labels.tolist(), landmarks))
    return manifest, samples


def write_synthetic(manifest: Manifest, samples: list[Sample], out_dir):
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for (path, _, _, _), sample in zip(manifest.rows, samples):
        write_image(out / path, sample.image)
    write_manifest(manifest, out / "manifest.csv")
    return out / "manifest.csv"
