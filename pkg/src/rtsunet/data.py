"""Volume IO, intensity/geometry pre- and post-processing, lobe phantoms."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .numerics import resize_trilinear

HU_MIN, HU_MAX = -1200.0, 400.0
IN_PLANE = 256
Z_MULTIPLE = 16

ELEMENT_TYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_UCHAR": np.dtype("u1"),
    "MET_DOUBLE": np.dtype("<f8"),
}
_REQUIRED_KEYS = ("NDims", "DimSize", "ElementSpacing", "ElementType", "ElementDataFile")


class FormatError(ValueError):
    pass


@dataclass
class Volume:
    """3D grid indexed (z, y, x) with spacing in mm in the same order."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3-D, got {self.data.ndim} dims")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


def validate_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 5):
        raise ValueError(f"labels must lie in 0..5, found range {labels.min()}..{labels.max()}")
    return labels


# MetaImage IO ---------------------------------------------------------------


def _element_type(dtype: np.dtype) -> str:
    dtype = np.dtype(dtype)
    if dtype == np.int16:
        return "MET_SHORT"
    if dtype == np.uint8:
        return "MET_UCHAR"
    if dtype.kind == "f":
        return "MET_DOUBLE"
    raise ValueError(f"no MetaImage element type for dtype {dtype}")


def save_volume(path, volume: Volume, element_type: str | None = None) -> None:
    """Write ``path`` (.mhd header) plus a sibling ``.raw`` body."""
    path = Path(path)
    element_type = element_type or _element_type(volume.data.dtype)
    if element_type not in ELEMENT_TYPES:
        raise ValueError(f"unsupported ElementType {element_type}")
    raw = path.with_suffix(".raw")
    d, h, w = volume.dims
    sz, sy, sx = volume.spacing
    header = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        f"DimSize = {w} {h} {d}",
        f"ElementSpacing = {sx!r} {sy!r} {sz!r}",
        f"ElementType = {element_type}",
        f"ElementDataFile = {raw.name}",
    ]
    path.write_text("\n".join(header) + "\n")
    body = np.ascontiguousarray(volume.data, dtype=ELEMENT_TYPES[element_type])
    raw.write_bytes(body.tobytes())


def read_header(path) -> dict[str, str]:
    path = Path(path)
    header = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: malformed header line {line!r}")
        key, value = line.split("=", 1)
        header[key.strip()] = value.strip()
    for key in _REQUIRED_KEYS:
        if key not in header:
            raise FormatError(f"{path}: header key {key} missing")
    return header


def load_volume(path) -> Volume:
    path = Path(path)
    h = read_header(path)
    if h["NDims"] != "3":
        raise FormatError(f"{path}: NDims must be 3, got {h['NDims']}")
    try:
        dims = [int(v) for v in h["DimSize"].split()]
    except ValueError:
        raise FormatError(f"{path}: DimSize is not a list of integers: {h['DimSize']!r}") from None
    if len(dims) != 3 or any(v < 1 for v in dims):
        raise FormatError(f"{path}: DimSize must hold three positive integers, got {h['DimSize']!r}")
    try:
        spacing = [float(v) for v in h["ElementSpacing"].split()]
    except ValueError:
        raise FormatError(f"{path}: ElementSpacing is not numeric: {h['ElementSpacing']!r}") from None
    if len(spacing) != 3 or any(not s > 0 for s in spacing):
        raise FormatError(f"{path}: ElementSpacing must hold three positive values")
    etype = h["ElementType"]
    if etype not in ELEMENT_TYPES:
        raise FormatError(f"{path}: ElementType {etype} not supported")
    if h.get("BinaryDataByteOrderMSB", h.get("ElementByteOrderMSB", "False")).lower() == "true":
        raise FormatError(f"{path}: BinaryDataByteOrderMSB = True is not supported")
    raw = path.parent / h["ElementDataFile"]
    body = raw.read_bytes()
    dtype = ELEMENT_TYPES[etype]
    w, hh, d = dims
    expected = w * hh * d * dtype.itemsize
    if len(body) != expected:
        raise FormatError(
            f"{path}: DimSize {dims} with ElementType {etype} needs {expected} bytes, {raw.name} has {len(body)}"
        )
    data = np.frombuffer(body, dtype=dtype).reshape(d, hh, w).copy()
    return Volume(data, (spacing[2], spacing[1], spacing[0]))


def load_labels(path) -> Volume:
    vol = load_volume(path)
    validate_labels(vol.data)
    return vol


# pre/post-processing --------------------------------------------------------


@dataclass
class PreprocessRecord:
    original_dims: tuple[int, int, int]
    original_spacing: tuple[float, float, float]
    resampled_dims: tuple[int, int, int]
    resampled_spacing: tuple[float, float, float]
    z_pad: int
    clamp: tuple[float, float] = (HU_MIN, HU_MAX)

    @property
    def padded_dims(self) -> tuple[int, int, int]:
        d, h, w = self.resampled_dims
        return (d + self.z_pad, h, w)


def normalize_intensity(data) -> np.ndarray:
    """Clamp to the HU window and map it affinely onto [0, 1]."""
    data = np.clip(np.asarray(data, dtype=np.float64), HU_MIN, HU_MAX)
    return (data - HU_MIN) / (HU_MAX - HU_MIN)


def preprocess(scan: Volume, in_plane: int = IN_PLANE, z_multiple: int = Z_MULTIPLE):
    """Normalize, resample to ``in_plane`` x ``in_plane`` with isotropic z, and
    zero-pad z to a multiple of ``z_multiple``.

    Returns a (1, 1, D, H, W) float64 tensor and the record needed to invert
    the geometry.
    """
    d, h, w = scan.dims
    sz, sy, sx = scan.spacing
    new_sy, new_sx = sy * h / in_plane, sx * w / in_plane
    iso = 0.5 * (new_sy + new_sx)
    new_d = max(1, int(round(d * sz / iso)))
    x = torch.from_numpy(normalize_intensity(scan.data))[None, None]
    x = resize_trilinear(x, size=(new_d, in_plane, in_plane))
    pad = (-new_d) % z_multiple
    if pad:
        x = torch.nn.functional.pad(x, (0, 0, 0, 0, 0, pad), value=0.0)
    record = PreprocessRecord(scan.dims, scan.spacing, (new_d, in_plane, in_plane), (iso, new_sy, new_sx), pad)
    return x, record


def resample_nearest(labels: np.ndarray, dims) -> np.ndarray:
    """Nearest-neighbor resampling; output ``i`` reads input
    ``floor((i + 0.5) * in / out)``."""
    labels = np.asarray(labels)
    idx = []
    for n_in, n_out in zip(labels.shape, dims):
        i = np.floor((np.arange(n_out) + 0.5) * n_in / n_out).astype(int)
        idx.append(np.clip(i, 0, n_in - 1))
    return labels[np.ix_(*idx)]


def postprocess(labels, record: PreprocessRecord) -> np.ndarray:
    labels = np.asarray(labels)
    if tuple(labels.shape) != record.padded_dims:
        raise ValueError(f"label grid {labels.shape} does not match the preprocessed grid {record.padded_dims}")
    labels = labels[: record.resampled_dims[0]]
    return resample_nearest(labels, record.original_dims)


# phantoms -------------------------------------------------------------------


@dataclass
class PhantomParams:
    dims: tuple[int, int, int] = (128, 128, 128)
    fissure_completeness: float = 0.8
    lesions: int = 0
    noise: float = 20.0
    vessels: int = 12
    field_of_view: float = 350.0
    bump: float = 0.06

    def __post_init__(self):
        self.dims = tuple(int(v) for v in self.dims)
        problems = []
        if len(self.dims) != 3 or any(v < 16 for v in self.dims):
            problems.append(f"dims must be three values >= 16, got {self.dims}")
        if not 0 <= self.fissure_completeness <= 1:
            problems.append(f"fissure_completeness must be in [0, 1], got {self.fissure_completeness}")
        if self.lesions < 0 or self.vessels < 0:
            problems.append("lesions and vessels must be non-negative")
        if self.noise < 0:
            problems.append(f"noise must be non-negative, got {self.noise}")
        if not self.field_of_view > 0:
            problems.append("field_of_view must be positive")
        if not 0 <= self.bump < 0.2:
            problems.append(f"bump must be in [0, 0.2), got {self.bump}")
        if problems:
            raise ValueError("; ".join(problems))

    @classmethod
    def from_text(cls, text: str) -> "PhantomParams":
        """Parse flat ``key = value`` lines; unknown keys are errors."""
        known = {f.name for f in fields(cls)}
        kwargs, bad = {}, []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                bad.append(f"malformed line {line!r}")
                continue
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                bad.append(f"unknown key {key!r}")
            elif key == "dims":
                kwargs[key] = tuple(int(v) for v in value.replace(",", " ").split())
            elif key in ("lesions", "vessels"):
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        if bad:
            raise ValueError("bad phantom config: " + "; ".join(bad))
        return cls(**kwargs)


def cap_fraction(h: float) -> float:
    """Fraction of the unit ball on the side ``n . u > h`` of a plane."""
    h = min(1.0, max(-1.0, h))
    return (1 - h) ** 2 * (2 + h) / 4


@dataclass
class PhantomGeometry:
    body_center: np.ndarray
    body_radii: np.ndarray
    lung_centers: dict  # "left"/"right" -> normalized (z, y, x)
    lung_radii: dict
    normals: dict  # fissure plane normals in unit-ball coordinates
    offsets: dict  # left: (h,), right: (h_low, h_high)
    bump_waves: list = field(default_factory=list)

    def lobe_fractions(self) -> dict[int, float]:
        """Analytic lobe volume fractions of each lung for the unperturbed planes."""
        (hl,) = self.offsets["left"]
        lo, hi = self.offsets["right"]
        return {
            1: cap_fraction(hl),
            2: 1 - cap_fraction(hl),
            3: cap_fraction(hi),
            4: 1 - cap_fraction(lo),
            5: cap_fraction(lo) - cap_fraction(hi),
        }


def phantom_geometry(seed: int) -> PhantomGeometry:
    rng = np.random.default_rng(seed)
    jit = lambda s, n=3: rng.uniform(-s, s, n)  # noqa: E731
    body_c = np.array([0.5, 0.5, 0.5]) + jit(0.01)
    body_r = np.array([0.45, 0.40, 0.47]) + jit(0.01)
    centers, radii, normals = {}, {}, {}
    for side, sign in (("left", 1.0), ("right", -1.0)):
        centers[side] = np.array([0.55, 0.5, 0.5 + sign * 0.21]) + jit(0.02)
        radii[side] = np.array([0.30, 0.30, 0.17]) + jit(0.02)
        tilt = rng.uniform(0.3, 0.7)
        n = np.array([1.0, tilt, rng.uniform(-0.1, 0.1)])
        normals[side] = n / np.linalg.norm(n)
    offsets = {
        "left": (rng.uniform(-0.15, 0.15),),
        "right": (rng.uniform(-0.42, -0.28), rng.uniform(0.1, 0.25)),
    }
    waves = []
    for _ in range(4):
        k = rng.uniform(-2.0, 2.0, 3)
        waves.append((k, rng.uniform(0, 2 * np.pi)))
    return PhantomGeometry(body_c, body_r, centers, radii, normals, offsets, waves)


def _smooth_field(grids, rng, waves=5, max_freq=3.0) -> np.ndarray:
    f = np.zeros(grids[0].shape)
    for _ in range(waves):
        k = rng.uniform(-max_freq, max_freq, 3)
        f += np.sin(2 * np.pi * (k[0] * grids[0] + k[1] * grids[1] + k[2] * grids[2]) + rng.uniform(0, 2 * np.pi))
    return f


def _keep_largest_components(labels: np.ndarray) -> np.ndarray:
    """Reassign every lobe fragment but the largest to the nearest other lobe."""
    labels = labels.copy()
    stray = np.zeros(labels.shape, dtype=bool)
    for lab in range(1, 6):
        comp, n = ndimage.label(labels == lab)
        if n > 1:
            sizes = ndimage.sum_labels(np.ones_like(comp), comp, index=np.arange(1, n + 1))
            keep = 1 + int(np.argmax(sizes))
            stray |= (comp > 0) & (comp != keep)
    if stray.any():
        valid = (labels > 0) & ~stray
        _, idx = ndimage.distance_transform_edt(~valid, return_indices=True)
        labels[stray] = labels[tuple(i[stray] for i in idx)]
    return labels


def phantom(seed: int, params: PhantomParams | None = None) -> tuple[Volume, Volume]:
    """Synthetic chest scan (int16 HU) and its lobe labels (uint8).

    Two ellipsoidal lungs sit in a soft-tissue body.  The left lung is split
    into upper/lower lobes (1, 2) and the right lung into upper/lower/middle
    (3, 4, 5) by tilted planes bent by a smooth random surface.  Fissures are
    drawn as thin brighter sheets on a ``fissure_completeness`` fraction of
    the interlobar border.
    """
    params = params or PhantomParams()
    geo = phantom_geometry(seed)
    rng = np.random.default_rng([seed, 1])
    dims = params.dims
    spacing = tuple(params.field_of_view / d for d in dims)
    grids = np.meshgrid(*[(np.arange(n) + 0.5) / n for n in dims], indexing="ij")
    pos = np.stack(grids, axis=-1)

    body = (((pos - geo.body_center) / geo.body_radii) ** 2).sum(-1) <= 1
    bump = np.zeros(dims)
    for k, phase in geo.bump_waves:
        bump += np.sin(2 * np.pi * (pos @ k) + phase)
    bump *= params.bump / max(1, len(geo.bump_waves)) * 2

    labels = np.zeros(dims, dtype=np.uint8)
    lungs = np.zeros(dims, dtype=bool)
    for side in ("left", "right"):
        u = (pos - geo.lung_centers[side]) / geo.lung_radii[side]
        inside = (u**2).sum(-1) <= 1
        lungs |= inside
        s = u @ geo.normals[side] + bump
        if side == "left":
            (h,) = geo.offsets["left"]
            labels[inside & (s > h)] = 1
            labels[inside & (s <= h)] = 2
        else:
            lo, hi = geo.offsets["right"]
            labels[inside & (s > hi)] = 3
            labels[inside & (s <= lo)] = 4
            labels[inside & (s > lo) & (s <= hi)] = 5
    labels = _keep_largest_components(labels)

    hu = np.full(dims, -1000.0)
    hu[body] = 40.0
    hu[lungs] = -850.0

    # vessels: tubes from each lung's medial hilum toward random peripheral points
    for side in ("left", "right"):
        c, r = geo.lung_centers[side], geo.lung_radii[side]
        hilum = c + np.array([0.0, 0.0, -np.sign(c[2] - 0.5) * 0.5 * r[2]])
        for _ in range(params.vessels // 2):
            d = rng.normal(size=3)
            end = c + 0.8 * r * d / np.linalg.norm(d)
            radius = rng.uniform(0.008, 0.016)
            seg = end - hilum
            t = np.clip(((pos - hilum) @ seg) / (seg @ seg), 0, 1)
            dist = np.linalg.norm(pos - (hilum + t[..., None] * seg), axis=-1)
            hu[(dist <= radius) & lungs] = 40.0

    border = np.zeros(dims, dtype=bool)
    for axis in range(3):
        a = np.swapaxes(labels, 0, axis)
        diff = (a[:-1] != a[1:]) & (a[:-1] > 0) & (a[1:] > 0)
        b = np.swapaxes(border, 0, axis)
        b[:-1] |= diff
    if border.any() and params.fissure_completeness > 0:
        field_ = _smooth_field(grids, rng)
        thresh = np.quantile(field_[border], params.fissure_completeness)
        hu[border & (field_ <= thresh)] = -700.0

    for _ in range(params.lesions):
        side = "left" if rng.random() < 0.5 else "right"
        c, r = geo.lung_centers[side], geo.lung_radii[side]
        d = rng.normal(size=3)
        center = c + rng.uniform(0, 0.7) * r * d / np.linalg.norm(d)
        rad = rng.uniform(0.03, 0.06)
        blob = (((pos - center) / rad) ** 2).sum(-1) <= 1
        hu[blob & lungs] = rng.normal(0.0, 30.0)

    hu += rng.normal(0.0, params.noise, dims) if params.noise > 0 else 0.0
    hu = np.clip(np.rint(hu), -1024, 3071).astype(np.int16)
    return Volume(hu, spacing), Volume(labels, spacing)


def params_dict(params: PhantomParams) -> dict:
    return asdict(params)


def preprocess_labels(labels, record: PreprocessRecord) -> np.ndarray:
    """Map a label volume onto the preprocessed grid (nearest neighbor, z
    padded with background)."""
    labels = validate_labels(labels)
    if tuple(labels.shape) != tuple(record.original_dims):
        raise ValueError(f"label dims {labels.shape} do not match scan dims {record.original_dims}")
    out = resample_nearest(labels, record.resampled_dims)
    if record.z_pad:
        out = np.pad(out, ((0, record.z_pad), (0, 0), (0, 0)))
    return out
