"""Scene persistence and dataset ingestion.

Checkpoint (.utrc): little-endian binary
    magic "UTRC" | version u32 | triangle count u64 | SH degree u8 |
    metadata length u32 | metadata JSON (utf-8) |
    per triangle: 9 vertex f32, 48 SH f32 (channel-major), opacity logit
    f32, sigma f32.

Interchange PLY: binary_little_endian, one `vertex` element with the three
corners of each triangle stored consecutively; per-corner properties
x, y, z, f_dc_0..2, f_rest_0..44 (channel-major higher bands), opacity
(pre-sigmoid logit) and sigma, with triangle-level values duplicated on
each corner.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .appearance import rgb_to_band0
from .camera import Camera
from .errors import Malformed, MissingProperty, TooFewPoints, UnsupportedVersion
from .geometry import TriangleSoup

CHECKPOINT_MAGIC = b"UTRC"
CHECKPOINT_VERSION = 1
_SH_DEGREE = 3
_FLOATS_PER_TRI = 9 + 48 + 1 + 1


def save_checkpoint(path: str | Path, soup: TriangleSoup,
                    metadata: dict | None = None) -> None:
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    n = len(soup)
    payload = np.empty((n, _FLOATS_PER_TRI), dtype="<f4")
    payload[:, 0:9] = soup.vertices.reshape(n, 9)
    payload[:, 9:57] = soup.sh.reshape(n, 48)
    payload[:, 57] = soup.opacity_logit
    payload[:, 58] = soup.sigma
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", n))
        f.write(struct.pack("<B", _SH_DEGREE))
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        f.write(payload.tobytes())


def load_checkpoint(path: str | Path):
    """Returns (soup, metadata dict). Strict: rejects bad magic, version,
    truncated payloads and non-finite fields."""
    raw = Path(path).read_bytes()
    if len(raw) < 21 or raw[:4] != CHECKPOINT_MAGIC:
        raise Malformed(f"{path}: not a UTRC checkpoint")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersion(f"{path}: checkpoint version {version}")
    n = struct.unpack_from("<Q", raw, 8)[0]
    degree = raw[16]
    if degree != _SH_DEGREE:
        raise Malformed(f"{path}: SH degree {degree}, expected {_SH_DEGREE}")
    meta_len = struct.unpack_from("<I", raw, 17)[0]
    off = 21 + meta_len
    if len(raw) < off:
        raise Malformed(f"{path}: truncated metadata block")
    try:
        metadata = json.loads(raw[21:off].decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise Malformed(f"{path}: bad metadata block: {e}") from e
    need = n * _FLOATS_PER_TRI * 4
    if len(raw) - off != need:
        raise Malformed(f"{path}: payload holds {len(raw) - off} bytes, "
                        f"expected {need} for {n} triangles")
    payload = np.frombuffer(raw, dtype="<f4", count=n * _FLOATS_PER_TRI,
                            offset=off).reshape(n, _FLOATS_PER_TRI)
    bad = ~np.isfinite(payload).all(axis=1)
    if bad.any():
        raise Malformed(f"{path}: non-finite values at triangle "
                        f"{int(np.nonzero(bad)[0][0])}")
    soup = TriangleSoup(
        payload[:, 0:9].astype(np.float64).reshape(n, 3, 3),
        payload[:, 9:57].astype(np.float64).reshape(n, 3, 16),
        payload[:, 57].astype(np.float64),
        payload[:, 58].astype(np.float64))
    return soup, metadata


# ---------------------------------------------------------------------------
# PLY

_PLY_DTYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

_SOUP_PROPS = (["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
               + [f"f_rest_{i}" for i in range(45)] + ["opacity", "sigma"])


def _parse_ply_header(raw: bytes, path):
    if not raw.startswith(b"ply"):
        raise Malformed(f"{path}: missing ply magic")
    end = raw.find(b"end_header\n")
    if end < 0:
        raise Malformed(f"{path}: no end_header")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body_off = end + len(b"end_header\n")
    fmt = None
    elements = []  # (name, count, [(prop, type or ('list', ct, it))])
    for line in header[1:]:
        parts = line.strip().split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise Malformed(f"{path}: property before any element")
            if parts[1] == "list":
                elements[-1][2].append((parts[4], ("list", parts[2], parts[3])))
            else:
                if parts[1] not in _PLY_DTYPES:
                    raise Malformed(f"{path}: unknown property type {parts[1]}")
                elements[-1][2].append((parts[2], parts[1]))
    if fmt not in ("binary_little_endian", "ascii"):
        raise Malformed(f"{path}: unsupported ply format {fmt}")
    return fmt, elements, body_off


def read_ply(path: str | Path) -> dict:
    """Strict generic reader: element name -> structured numpy array.

    Elements with list properties are skipped (parsed past in binary form).
    """
    path = Path(path)
    raw = path.read_bytes()
    fmt, elements, off = _parse_ply_header(raw, path)
    out = {}
    if fmt == "ascii":
        text = raw[off:].decode("ascii", errors="replace").split()
        pos = 0
        for name, count, props in elements:
            if any(isinstance(t, tuple) for _, t in props):
                for _ in range(count):  # skip list rows token-wise
                    nvals = int(text[pos])
                    pos += 1 + nvals
                continue
            dtype = np.dtype([(p, _PLY_DTYPES[t]) for p, t in props])
            arr = np.zeros(count, dtype=dtype)
            for i in range(count):
                for p, t in props:
                    arr[p][i] = float(text[pos])
                    pos += 1
            out[name] = arr
        return out
    for name, count, props in elements:
        if any(isinstance(t, tuple) for _, t in props):
            for _ in range(count):
                for p, t in props:
                    if isinstance(t, tuple):
                        _, ct, it = t
                        cnt = int(np.frombuffer(raw, dtype="<" + _PLY_DTYPES[ct],
                                                count=1, offset=off)[0])
                        off += np.dtype(_PLY_DTYPES[ct]).itemsize
                        off += cnt * np.dtype(_PLY_DTYPES[it]).itemsize
                    else:
                        off += np.dtype(_PLY_DTYPES[t]).itemsize
            continue
        dtype = np.dtype([(p, "<" + _PLY_DTYPES[t]) for p, t in props])
        need = count * dtype.itemsize
        if len(raw) - off < need:
            raise Malformed(f"{path}: element {name} truncated "
                            f"({len(raw) - off} bytes, need {need})")
        out[name] = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += need
    return out


def save_triangle_ply(path: str | Path, soup: TriangleSoup) -> None:
    """Write the interchange PLY (see module docstring for the layout)."""
    n = len(soup)
    dtype = np.dtype([(p, "<f4") for p in _SOUP_PROPS])
    rows = np.zeros(3 * n, dtype=dtype)
    verts = soup.vertices.reshape(3 * n, 3).astype(np.float32)
    rows["x"], rows["y"], rows["z"] = verts[:, 0], verts[:, 1], verts[:, 2]
    for c in range(3):
        rows[f"f_dc_{c}"] = np.repeat(soup.sh[:, c, 0], 3)
        for j in range(15):
            rows[f"f_rest_{c * 15 + j}"] = np.repeat(soup.sh[:, c, j + 1], 3)
    rows["opacity"] = np.repeat(soup.opacity_logit, 3)
    rows["sigma"] = np.repeat(soup.sigma, 3)
    header = ("ply\nformat binary_little_endian 1.0\n"
              "comment triangle soup: 3 consecutive vertices per triangle\n"
              f"element vertex {3 * n}\n"
              + "".join(f"property float {p}\n" for p in _SOUP_PROPS)
              + "end_header\n")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rows.tobytes())


def load_triangle_ply(path: str | Path, lenient: bool = False,
                      opacity_init: float = 0.28,
                      sigma_init: float = 1.0) -> TriangleSoup:
    """Read the interchange PLY back into a soup.

    lenient=True is the best-effort import for externally optimized soups:
    missing appearance properties fall back to defaults instead of raising.
    """
    data = read_ply(path)
    if "vertex" not in data:
        raise Malformed(f"{path}: no vertex element")
    arr = data["vertex"]
    names = arr.dtype.names
    for p in ("x", "y", "z"):
        if p not in names:
            raise MissingProperty(f"{path}: missing property {p!r}")
    if not lenient:
        for p in _SOUP_PROPS:
            if p not in names:
                raise MissingProperty(f"{path}: missing property {p!r}")
    total = arr.shape[0]
    if total % 3 != 0:
        raise Malformed(f"{path}: vertex count {total} is not a multiple of 3")
    n = total // 3
    verts = np.stack([arr["x"], arr["y"], arr["z"]], axis=-1).astype(np.float64)
    bad = ~np.isfinite(verts).all(axis=1)
    if bad.any():
        raise Malformed(f"{path}: non-finite vertex at corner "
                        f"{int(np.nonzero(bad)[0][0])}")
    vertices = verts.reshape(n, 3, 3)

    def tri_prop(prop, default):
        if prop in names:
            vals = np.asarray(arr[prop], dtype=np.float64)[0::3]
            if not np.isfinite(vals).all():
                raise Malformed(f"{path}: non-finite {prop} at triangle "
                                f"{int(np.nonzero(~np.isfinite(vals))[0][0])}")
            return vals
        return np.full(n, default)

    sh = np.zeros((n, 3, 16))
    for c in range(3):
        sh[:, c, 0] = tri_prop(f"f_dc_{c}", 0.0)
        for j in range(15):
            sh[:, c, j + 1] = tri_prop(f"f_rest_{c * 15 + j}", 0.0)
    logit_default = float(np.log(opacity_init / (1.0 - opacity_init)))
    logit = tri_prop("opacity", logit_default)
    sigma = tri_prop("sigma", sigma_init)
    return TriangleSoup(vertices, sh, logit, sigma)


def load_point_ply(path: str | Path):
    """Point cloud: (points (n, 3), colors (n, 3) in [0, 1])."""
    data = read_ply(path)
    if "vertex" not in data:
        raise Malformed(f"{path}: no vertex element")
    arr = data["vertex"]
    names = arr.dtype.names
    for p in ("x", "y", "z"):
        if p not in names:
            raise MissingProperty(f"{path}: missing property {p!r}")
    pts = np.stack([arr["x"], arr["y"], arr["z"]], axis=-1).astype(np.float64)
    if not np.isfinite(pts).all():
        raise Malformed(f"{path}: non-finite point coordinates")
    if all(c in names for c in ("red", "green", "blue")):
        cols = np.stack([arr["red"], arr["green"], arr["blue"]], axis=-1)
        cols = cols.astype(np.float64)
        if arr.dtype["red"].kind == "u":
            cols /= 255.0
    else:
        cols = np.full((pts.shape[0], 3), 0.5)
    return pts, np.clip(cols, 0.0, 1.0)


def save_point_ply(path: str | Path, points: np.ndarray,
                   colors: np.ndarray) -> None:
    n = points.shape[0]
    dtype = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                      ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    rows = np.zeros(n, dtype=dtype)
    rows["x"], rows["y"], rows["z"] = (points[:, i].astype(np.float32)
                                       for i in range(3))
    u8 = (np.clip(colors, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    rows["red"], rows["green"], rows["blue"] = u8[:, 0], u8[:, 1], u8[:, 2]
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {n}\n"
              "property float x\nproperty float y\nproperty float z\n"
              "property uchar red\nproperty uchar green\nproperty uchar blue\n"
              "end_header\n")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rows.tobytes())


# ---------------------------------------------------------------------------
# point-cloud seeding

def init_from_pointcloud(points: np.ndarray, colors: np.ndarray,
                         rng: np.random.Generator,
                         opacity_init: float = 0.28,
                         sigma_init: float = 1.0) -> TriangleSoup:
    """One triangle per seed point: vertices sampled uniformly inside a
    sphere whose radius is the mean distance to the 3 nearest neighbors;
    band-0 color from the point color."""
    points = np.asarray(points, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    n = points.shape[0]
    if n < 4:
        raise TooFewPoints(f"need at least 4 seed points, got {n}")
    tree = cKDTree(points)
    dist, _ = tree.query(points, k=4)  # self + 3 neighbors
    radius = dist[:, 1:].mean(axis=1)
    radius = np.maximum(radius, 1e-8)
    # uniform in the unit ball, scaled per point
    u = rng.normal(size=(n, 3, 3))
    u /= np.linalg.norm(u, axis=-1, keepdims=True)
    rr = rng.random((n, 3, 1)) ** (1.0 / 3.0)
    verts = points[:, None, :] + u * rr * radius[:, None, None]
    sh = np.zeros((n, 3, 16))
    sh[:, :, 0] = rgb_to_band0(colors)
    logit = np.full(n, float(np.log(opacity_init / (1.0 - opacity_init))))
    sigma = np.full(n, float(sigma_init))
    return TriangleSoup(verts, sh, logit, sigma)


# ---------------------------------------------------------------------------
# dataset manifest

@dataclass
class ManifestView:
    image_path: Path
    camera: Camera


@dataclass
class DatasetManifest:
    views: list
    pointcloud_path: Path | None
    train_split: list
    test_split: list
    root: Path = field(default_factory=Path)


def load_manifest(path: str | Path) -> DatasetManifest:
    """JSON manifest: images + cameras + seed point cloud + split indices.

    Referenced files must exist; poses must be rigid (R R^T = I to 1e-5,
    enforced by the Camera constructor).
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as e:
        raise Malformed(f"{path}: invalid JSON: {e}") from e
    root = path.parent
    views = []
    if "images" not in data or not isinstance(data["images"], list):
        raise Malformed(f"{path}: manifest needs an 'images' list")
    for i, entry in enumerate(data["images"]):
        for key in ("path", "pose", "fx", "fy", "cx", "cy", "width", "height"):
            if key not in entry:
                raise Malformed(f"{path}: images[{i}] missing key {key!r}")
        img_path = root / entry["path"]
        if not img_path.exists():
            raise Malformed(f"{path}: images[{i}] file not found: {img_path}")
        pose = np.asarray(entry["pose"], dtype=np.float64)
        if pose.shape != (3, 4):
            raise Malformed(f"{path}: images[{i}] pose must be 3x4")
        try:
            cam = Camera(rotation=pose[:, :3], translation=pose[:, 3],
                         fx=float(entry["fx"]), fy=float(entry["fy"]),
                         cx=float(entry["cx"]), cy=float(entry["cy"]),
                         width=int(entry["width"]), height=int(entry["height"]))
        except ValueError as e:
            raise Malformed(f"{path}: images[{i}]: {e}") from e
        views.append(ManifestView(image_path=img_path, camera=cam))
    pc = None
    if data.get("pointcloud"):
        pc = root / data["pointcloud"]
        if not pc.exists():
            raise Malformed(f"{path}: pointcloud file not found: {pc}")
    n = len(views)
    train = data.get("train_split", list(range(n)))
    test = data.get("test_split", [])
    for idx in list(train) + list(test):
        if not 0 <= int(idx) < n:
            raise Malformed(f"{path}: split index {idx} out of range")
    return DatasetManifest(views=views, pointcloud_path=pc,
                           train_split=[int(i) for i in train],
                           test_split=[int(i) for i in test], root=root)
