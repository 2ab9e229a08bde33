"""Hyperspectral scenes: data model, ENVI/PGM I/O, synthesis, augmentation, splits."""

from __future__ import annotations

import csv
import math
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import FormatError, InsufficientDataError, IntegrityError, ParameterError, ShapeError

PSEUDO_COLOR_NM = {"R": 625.0, "G": 495.0, "B": 420.0}


MIN_SIDE = 8


@dataclass
class HyperspectralCube:
    data: np.ndarray  # [H, W, S]
    wavelengths_nm: np.ndarray  # [S]
    scene_id: str = ""
    patient_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.wavelengths_nm = np.asarray(self.wavelengths_nm, dtype=np.float64)
        if self.data.ndim != 3:
            raise ShapeError(f"cube data must be H x W x S, got shape {self.data.shape}")
        h, w, s = self.data.shape
        # the 8 x 8 floor is a model-input requirement, checked by check_model_input
        if h < 1 or w < 1 or s < 2:
            raise ShapeError(f"cube must be at least 1 x 1 x 2, got {self.data.shape}")
        if self.wavelengths_nm.shape != (s,):
            raise ShapeError(f"expected {s} wavelengths, got {self.wavelengths_nm.shape}")
        if np.any(np.diff(self.wavelengths_nm) <= 0):
            raise ParameterError("wavelengths must be strictly increasing")
        if not np.all(np.isfinite(self.data)):
            raise ParameterError("cube contains non-finite values")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    def check_model_input(self) -> None:
        h, w, _ = self.data.shape
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ShapeError(f"model input must be at least {MIN_SIDE} x {MIN_SIDE}, got {h} x {w}")

    def with_data(self, data: np.ndarray) -> "HyperspectralCube":
        return HyperspectralCube(data, self.wavelengths_nm.copy(), self.scene_id, self.patient_id)


@dataclass
class SegmentationMask:
    data: np.ndarray  # [H, W] in {0, 1}

    def __post_init__(self):
        self.data = np.asarray(self.data).astype(np.uint8)
        if self.data.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {self.data.shape}")
        if np.any(self.data > 1):
            raise ParameterError("mask values must be 0 or 1")


@dataclass
class SceneRecord:
    scene_id: str
    patient_id: str
    cube_path: str
    mask_path: str

    def load(self) -> Tuple[HyperspectralCube, SegmentationMask]:
        for p in (self.cube_path, self.mask_path):
            if not os.path.exists(p):
                raise FileNotFoundError(p)
        if not self.patient_id:
            raise ParameterError(f"scene {self.scene_id} has an empty patient_id")
        cube = read_envi(self.cube_path)
        cube.scene_id, cube.patient_id = self.scene_id, self.patient_id
        mask = read_pgm(self.mask_path)
        if mask.data.shape != cube.shape[:2]:
            raise ShapeError(f"mask {mask.data.shape} does not match cube {cube.shape[:2]}")
        return cube, mask


@dataclass
class DatasetSplit:
    train: List[SceneRecord]
    val: List[SceneRecord]
    test: List[SceneRecord]
    seed: int = 0

    def partitions(self) -> Dict[str, List[SceneRecord]]:
        return {"train": self.train, "val": self.val, "test": self.test}


@dataclass
class AugmentationSpec:
    rotation_degrees: Tuple[float, float] = (-30.0, 30.0)
    scale_factor: Tuple[float, float] = (0.9, 1.1)
    elastic_alpha: float = 4.0
    elastic_sigma: float = 4.0
    rotate: bool = True
    scale: bool = True
    elastic: bool = True

    def __post_init__(self):
        lo, hi = self.scale_factor
        if not (0.5 <= lo <= hi <= 2.0):
            raise ParameterError(f"scale_factor range {self.scale_factor} must lie within [0.5, 2.0]")
        if self.rotation_degrees[0] > self.rotation_degrees[1]:
            raise ParameterError("rotation range is reversed")
        if self.elastic_alpha < 0:
            raise ParameterError("elastic_alpha must be >= 0")
        if self.elastic and self.elastic_sigma <= 0:
            raise ParameterError("elastic_sigma must be > 0 when elastic deformation is enabled")

    @classmethod
    def disabled(cls) -> "AugmentationSpec":
        return cls(rotate=False, scale=False, elastic=False)

    @property
    def any_enabled(self) -> bool:
        return self.rotate or self.scale or self.elastic


# ---------------------------------------------------------------------------
# ENVI


def _data_path(header_path: Path) -> Path:
    stem = header_path.with_suffix("")
    for cand in (stem.with_suffix(".raw"), stem, stem.with_suffix(".img"), stem.with_suffix(".dat"), stem.with_suffix(".bsq")):
        if cand.exists() and cand != header_path:
            return cand
    raise FileNotFoundError(f"no raw data file next to {header_path}")


def parse_envi_header(text: str) -> Dict[str, str]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ENVI":
        raise FormatError("header does not start with 'ENVI'")
    fields: Dict[str, str] = {}
    body = "\n".join(lines[1:])
    # brace values may span lines
    for m in re.finditer(r"^\s*([^=\n]+?)\s*=\s*(\{[^}]*\}|[^\n]*)", body, flags=re.M):
        fields[m.group(1).strip().lower()] = m.group(2).strip()
    return fields


def _int_field(fields: Dict[str, str], name: str) -> int:
    if name not in fields:
        raise FormatError(f"header is missing '{name}'")
    try:
        return int(fields[name])
    except ValueError:
        raise FormatError(f"header field '{name}' is not an integer: {fields[name]!r}") from None


def read_envi(header_path) -> HyperspectralCube:
    """Read a BSQ float32 little-endian ENVI cube into an H x W x S array."""
    header_path = Path(header_path)
    fields = parse_envi_header(header_path.read_text())
    w = _int_field(fields, "samples")
    h = _int_field(fields, "lines")
    s = _int_field(fields, "bands")
    if _int_field(fields, "data type") != 4:
        raise FormatError(f"header field 'data type' must be 4 (float32), got {fields['data type']}")
    if fields.get("interleave", "").lower() != "bsq":
        raise FormatError(f"header field 'interleave' must be bsq, got {fields.get('interleave')!r}")
    if _int_field(fields, "byte order") != 0:
        raise FormatError("header field 'byte order' must be 0 (little-endian)")
    offset = int(fields.get("header offset", "0"))
    if "wavelength" not in fields:
        raise FormatError("header is missing 'wavelength'")
    try:
        wl = np.array([float(v) for v in fields["wavelength"].strip("{}").split(",") if v.strip()])
    except ValueError:
        raise FormatError("header field 'wavelength' is not a list of numbers") from None
    if wl.shape != (s,):
        raise FormatError(f"header field 'wavelength' has {wl.size} entries for {s} bands")

    raw = _data_path(header_path).read_bytes()[offset:]
    expected = h * w * s * 4
    if len(raw) != expected:
        raise IntegrityError(f"raw file holds {len(raw)} bytes, header implies {expected} ({h}x{w}x{s} float32)")
    bsq = np.frombuffer(raw, dtype="<f4").reshape(s, h, w)
    data = np.nan_to_num(bsq.transpose(1, 2, 0), nan=0.0, posinf=1.0, neginf=0.0).astype(np.float32)
    return HyperspectralCube(
        data,
        wl,
        scene_id=fields.get("scene id", ""),
        patient_id=fields.get("patient id", ""),
    )


def write_envi(cube: HyperspectralCube, header_path) -> None:
    """Write ``cube`` as ``<stem>.hdr`` + ``<stem>.raw`` (BSQ, float32, little-endian)."""
    if not np.all(np.isfinite(cube.data)):
        raise ParameterError("refusing to write a cube with non-finite values")
    header_path = Path(header_path)
    h, w, s = cube.shape
    wl = ", ".join(repr(float(v)) for v in cube.wavelengths_nm)
    lines = [
        "ENVI",
        f"samples = {w}",
        f"lines = {h}",
        f"bands = {s}",
        "header offset = 0",
        "file type = ENVI Standard",
        "data type = 4",
        "interleave = bsq",
        "byte order = 0",
        "wavelength units = Nanometers",
        f"wavelength = {{{wl}}}",
    ]
    if cube.scene_id:
        lines.append(f"scene id = {cube.scene_id}")
    if cube.patient_id:
        lines.append(f"patient id = {cube.patient_id}")
    header_path.write_text("\n".join(lines) + "\n")
    bsq = np.ascontiguousarray(np.asarray(cube.data, dtype="<f4").transpose(2, 0, 1))
    header_path.with_suffix(".raw").write_bytes(bsq.tobytes())


# ---------------------------------------------------------------------------
# PGM masks


def write_pgm(mask: SegmentationMask, path) -> None:
    h, w = mask.data.shape
    payload = (mask.data > 0).astype(np.uint8) * 255
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + payload.tobytes())


def read_pgm(path) -> SegmentationMask:
    blob = Path(path).read_bytes()
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*([^\s#]+)").match(blob, pos)
        if m is None:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise FormatError(f"{path}: 16-bit PGM not supported")
    pixels = blob[pos + 1 : pos + 1 + w * h]
    if len(pixels) != w * h:
        raise IntegrityError(f"{path}: expected {w * h} pixel bytes, found {len(pixels)}")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)
    return SegmentationMask((arr > 0).astype(np.uint8))


# ---------------------------------------------------------------------------
# manifests


MANIFEST_COLUMNS = ("scene_id", "patient_id", "cube_path", "mask_path")


def write_manifest(records: Sequence[SceneRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow([r.scene_id, r.patient_id, r.cube_path, r.mask_path])


def read_manifest(path) -> List[SceneRecord]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise FormatError(f"{path}: manifest missing columns {sorted(missing)}")
        out = []
        for row in reader:
            cube_path, mask_path = (
                p if os.path.isabs(p) else str(path.parent / p) for p in (row["cube_path"], row["mask_path"])
            )
            out.append(SceneRecord(row["scene_id"], row["patient_id"], cube_path, mask_path))
    return out


# ---------------------------------------------------------------------------
# preprocessing


def normalize_cube(cube: HyperspectralCube) -> HyperspectralCube:
    """Per-band min-max scaling to [0, 1]; constant bands become 0."""
    data = cube.data.astype(np.float64)
    lo = data.min(axis=(0, 1), keepdims=True)
    span = data.max(axis=(0, 1), keepdims=True) - lo
    out = np.where(span > 0, (data - lo) / np.where(span > 0, span, 1.0), 0.0)
    return cube.with_data(out.astype(cube.data.dtype))


def nearest_band(wavelengths_nm: np.ndarray, target_nm: float) -> int:
    # argmin returns the first minimum, i.e. the lower wavelength on ties
    return int(np.argmin(np.abs(np.asarray(wavelengths_nm) - target_nm)))


def pseudo_color(cube: HyperspectralCube) -> np.ndarray:
    """H x W x 3 RGB image built from the bands nearest 625/495/420 nm."""
    idx = [nearest_band(cube.wavelengths_nm, PSEUDO_COLOR_NM[c]) for c in "RGB"]
    return np.clip(cube.data[..., idx], 0.0, 1.0)


def pseudo_color_cube(cube: HyperspectralCube) -> HyperspectralCube:
    """Three-band cube (B, G, R order, ascending nominal wavelengths) for the RGB ablation."""
    rgb = pseudo_color(cube)
    return HyperspectralCube(
        rgb[..., ::-1].copy(),
        [PSEUDO_COLOR_NM["B"], PSEUDO_COLOR_NM["G"], PSEUDO_COLOR_NM["R"]],
        cube.scene_id,
        cube.patient_id,
    )


# ---------------------------------------------------------------------------
# splitting


def _allocate(n: int, ratios: Sequence[float]) -> List[int]:
    total = float(sum(ratios))
    ideal = [n * r / total for r in ratios]
    counts = [int(math.floor(x)) for x in ideal]
    order = sorted(range(len(ratios)), key=lambda i: (-(ideal[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    for i in range(len(counts)):
        if counts[i] == 0:
            donor = max(range(len(counts)), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    return counts


def patient_split(records: Sequence[SceneRecord], ratios: Sequence[float] = (3, 1, 1), seed: int = 0) -> DatasetSplit:
    """Shuffle patients (not scenes) with ``seed`` and partition them by ``ratios``."""
    patients = sorted({r.patient_id for r in records})
    if len(patients) < 5:
        raise InsufficientDataError(f"need at least 5 distinct patients, got {len(patients)}")
    order = np.random.default_rng(seed).permutation(len(patients))
    shuffled = [patients[i] for i in order]
    n_train, n_val, _ = _allocate(len(patients), ratios)
    groups = (
        set(shuffled[:n_train]),
        set(shuffled[n_train : n_train + n_val]),
        set(shuffled[n_train + n_val :]),
    )
    parts = [[r for r in records if r.patient_id in g] for g in groups]
    return DatasetSplit(parts[0], parts[1], parts[2], seed)


# ---------------------------------------------------------------------------
# augmentation


def _sample_coords(shape: Tuple[int, int], spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    """Source coordinates [2, H, W] for scale -> rotate -> elastic, composed into one map."""
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx

    factor = rng.uniform(*spec.scale_factor) if spec.scale else 1.0
    theta = math.radians(rng.uniform(*spec.rotation_degrees)) if spec.rotate else 0.0
    c, s = math.cos(theta), math.sin(theta)
    # +90 degrees matches np.rot90: out[i, j] = in[j, W-1-i]
    src_y = (c * dy + s * dx) / factor + cy
    src_x = (-s * dy + c * dx) / factor + cx
    if spec.elastic and spec.elastic_alpha > 0:
        for grid in (src_y, src_x):
            field_ = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, size=shape), spec.elastic_sigma, mode="constant")
            grid += spec.elastic_alpha * field_
    return np.stack([src_y, src_x])


def augment(
    cube: HyperspectralCube,
    mask: SegmentationMask,
    spec: AugmentationSpec,
    rng: np.random.Generator,
) -> Tuple[HyperspectralCube, SegmentationMask]:
    """Apply one random geometric warp to every band (bilinear) and to the mask (nearest)."""
    if mask.data.shape != cube.shape[:2]:
        raise ShapeError(f"mask {mask.data.shape} does not match cube {cube.shape[:2]}")
    if not spec.any_enabled:
        return cube.with_data(cube.data.copy()), SegmentationMask(mask.data.copy())
    coords = _sample_coords(mask.data.shape, spec, rng)
    bands = [
        ndimage.map_coordinates(cube.data[..., b].astype(np.float64), coords, order=1, mode="constant", cval=0.0)
        for b in range(cube.shape[2])
    ]
    data = np.stack(bands, axis=-1).astype(cube.data.dtype)
    warped_mask = ndimage.map_coordinates(mask.data, coords, order=0, mode="constant", cval=0)
    return cube.with_data(data), SegmentationMask(warped_mask)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SynthParams:
    H: int = 64
    W: int = 64
    S: int = 16
    n_blobs: int = 3
    noise_sigma: float = 0.05
    band_correlation: float = 0.9
    wavelength_range: Tuple[float, float] = (450.0, 750.0)
    positive_peak_nm: float = 550.0
    negative_peak_nm: float = 650.0
    peak_width_nm: float = 40.0
    baseline: float = 0.3
    amplitude: float = 0.4
    radius_range: Tuple[float, float] = (0.08, 0.2)  # fraction of min(H, W)

    def validate(self) -> None:
        if self.H < 8 or self.W < 8 or self.S < 2:
            raise ParameterError("synthetic scene must be at least 8 x 8 x 2")
        if self.n_blobs < 0:
            raise ParameterError("n_blobs must be >= 0")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be >= 0")
        if not (0.0 <= self.band_correlation < 1.0):
            raise ParameterError("band_correlation must lie in [0, 1)")


def class_spectra(params: SynthParams, wavelengths: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Mean (negative, positive) reflectance curves."""

    def bump(center):
        return params.baseline + params.amplitude * np.exp(-0.5 * ((wavelengths - center) / params.peak_width_nm) ** 2)

    return bump(params.negative_peak_nm), bump(params.positive_peak_nm)


def correlated_noise(n: int, s: int, sigma: float, rho: float, rng: np.random.Generator) -> np.ndarray:
    """AR(1) noise along the band axis: unit lag-one correlation ``rho``, marginal std ``sigma``."""
    eps = rng.standard_normal((n, s))
    out = np.empty_like(eps)
    out[:, 0] = eps[:, 0]
    innov = math.sqrt(1.0 - rho * rho)
    for t in range(1, s):
        out[:, t] = rho * out[:, t - 1] + innov * eps[:, t]
    return sigma * out


def synth_scene(params: SynthParams, rng: np.random.Generator) -> Tuple[HyperspectralCube, SegmentationMask]:
    params.validate()
    h, w, s = params.H, params.W, params.S
    wl = np.linspace(*params.wavelength_range, s)
    neg, pos = class_spectra(params, wl)
    gap = np.max(np.abs(pos - neg))
    if params.noise_sigma > 0 and gap < 3.0 * params.noise_sigma:
        raise ParameterError(f"class spectra differ by {gap:.3f} at peak, below 3 x noise_sigma")

    mask = np.zeros((h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    side = min(h, w)
    for _ in range(params.n_blobs):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(*params.radius_range, size=2) * side
        phi = rng.uniform(0, math.pi)
        u = (yy - cy) * math.cos(phi) + (xx - cx) * math.sin(phi)
        v = -(yy - cy) * math.sin(phi) + (xx - cx) * math.cos(phi)
        mask[(u / ry) ** 2 + (v / rx) ** 2 <= 1.0] = 1
    if mask.mean() > 0.9:
        raise ParameterError(f"blobs cover {mask.mean():.0%} of the image (limit 90%)")

    data = np.where(mask[..., None] == 1, pos, neg)
    if params.noise_sigma > 0:
        data = data + correlated_noise(h * w, s, params.noise_sigma, params.band_correlation, rng).reshape(h, w, s)
    data = np.clip(data, 0.0, 1.0).astype(np.float32)
    return HyperspectralCube(data, wl), SegmentationMask(mask)


def synth_dataset(
    out_dir,
    n: int,
    params: SynthParams,
    seed: int = 0,
    scenes_per_patient: int = 2,
) -> List[SceneRecord]:
    """Write ``n`` synthetic scenes plus ``manifest.csv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        cube, mask = synth_scene(params, rng)
        cube.scene_id = f"scene_{i:04d}"
        cube.patient_id = f"patient_{i // scenes_per_patient:03d}"
        write_envi(cube, out_dir / f"{cube.scene_id}.hdr")
        write_pgm(mask, out_dir / f"{cube.scene_id}.pgm")
        records.append(SceneRecord(cube.scene_id, cube.patient_id, f"{cube.scene_id}.hdr", f"{cube.scene_id}.pgm"))
    write_manifest(records, out_dir / "manifest.csv")
    return [
        SceneRecord(r.scene_id, r.patient_id, str(out_dir / r.cube_path), str(out_dir / r.mask_path)) for r in records
    ]
