"""On-disk format for scene sequences (ground truth and predictions alike).

A bundle is a directory holding ``manifest.json`` and one binary file per
grid per view. Each grid file is a 12-byte header followed by the raw
little-endian payload in row-major, channel-interleaved (H x W x C) order:

    offset 0  4 bytes  magic b"4DKG"
    offset 4  uint32   byte-order marker 0x01020304, written little-endian
    offset 8  uint8    dtype code: ord('f') float32, ord('B') uint8 mask
    offset 9  uint8    channel count
    offset 10 2 bytes  reserved, zero

Float grids carry NaN at invalid pixels; the companion ``*_valid`` mask
(one byte per pixel, 0 or 1) is authoritative. The manifest is the only
source of shapes; file sizes are checked against it, never used to infer it.
See docs/FORMAT.md for an annotated hex dump.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BundleError,
    HeaderError,
    MissingFileError,
    PoseConventionError,
    SizeMismatchError,
    VersionMismatchError,
)
from .geometry import (
    Intrinsics,
    OpticalFlowField,
    Pointmap,
    Pose,
    RayDepthMap,
    RayMap,
    SceneFlowField,
    SceneSequence,
    ViewBundle,
)

FORMAT_NAME = "fourdkit-bundle"
FORMAT_VERSION = 1
CONVENTION = "xr-yd-zf, world=view0, ray-depth"
MANIFEST = "manifest.json"
MAGIC = b"4DKG"
BYTE_ORDER_MARK = 0x01020304
HEADER = struct.Struct("<4sIBB2x")
F32 = ord("f")
U8 = ord("B")

# grid name -> (dtype code, channels)
GRIDS = {
    "rays": (F32, 3),
    "ray_depth": (F32, 1),
    "depth_valid": (U8, 1),
    "scene_flow": (F32, 3),
    "scene_flow_valid": (U8, 1),
    "ego_flow": (F32, 3),
    "ego_flow_valid": (U8, 1),
    "points_after": (F32, 3),
    "points_after_valid": (U8, 1),
    "optical_flow": (F32, 2),
    "optical_flow_valid": (U8, 1),
    "doppler": (F32, 1),
    "doppler_valid": (U8, 1),
    "motion_mask": (U8, 1),
    "confidence": (F32, 1),
}
REQUIRED = ("rays", "ray_depth", "depth_valid")
OPTIONAL = ("scene_flow", "ego_flow", "points_after", "optical_flow", "doppler", "motion_mask", "confidence")
# optional field -> grids it occupies
OPTIONAL_GRIDS = {
    "scene_flow": ("scene_flow", "scene_flow_valid"),
    "ego_flow": ("ego_flow", "ego_flow_valid"),
    "points_after": ("points_after", "points_after_valid"),
    "optical_flow": ("optical_flow", "optical_flow_valid"),
    "doppler": ("doppler", "doppler_valid"),
    "motion_mask": ("motion_mask",),
    "confidence": ("confidence",),
}


@dataclass
class Manifest:
    version: int
    kind: str
    n_views: int
    height: int
    width: int
    scale: float
    views: list
    convention: str = CONVENTION
    meta: dict | None = None

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": self.version,
            "kind": self.kind,
            "convention": self.convention,
            "n_views": self.n_views,
            "height": self.height,
            "width": self.width,
            "scale": self.scale,
            "meta": self.meta or {},
            "views": self.views,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        if d.get("format") != FORMAT_NAME:
            raise VersionMismatchError(f"not a {FORMAT_NAME} manifest (format={d.get('format')!r})")
        if d.get("version") != FORMAT_VERSION:
            raise VersionMismatchError(f"unsupported bundle version {d.get('version')!r}, expected {FORMAT_VERSION}")
        return cls(
            version=d["version"],
            kind=d.get("kind", "gt"),
            n_views=int(d["n_views"]),
            height=int(d["height"]),
            width=int(d["width"]),
            scale=float(d["scale"]),
            views=d["views"],
            convention=d.get("convention", CONVENTION),
            meta=d.get("meta") or {},
        )


# ---------------------------------------------------------------------------
# grid files
# ---------------------------------------------------------------------------


def _grid_file(index: int, name: str) -> str:
    return f"v{index:03d}_{name}.bin"


def write_grid(path: Path, name: str, arr: np.ndarray) -> None:
    code, channels = GRIDS[name]
    if code == F32:
        payload = np.ascontiguousarray(arr, dtype="<f4")
    else:
        payload = np.ascontiguousarray(arr, dtype=bool).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, BYTE_ORDER_MARK, code, channels))
        fh.write(payload.tobytes(order="C"))


def read_grid(path: Path, name: str, height: int, width: int) -> np.ndarray:
    """Read one grid; float grids come back float64, masks as raw uint8."""
    code, channels = GRIDS[name]
    if not path.is_file():
        raise MissingFileError(f"missing grid file {path.name}")
    raw = path.read_bytes()
    itemsize = 4 if code == F32 else 1
    expected = HEADER.size + height * width * channels * itemsize
    if len(raw) != expected:
        raise SizeMismatchError(f"{path.name}: {len(raw)} bytes, manifest implies {expected}")
    magic, bom, got_code, got_channels = HEADER.unpack_from(raw)
    if magic != MAGIC or bom != BYTE_ORDER_MARK:
        raise HeaderError(f"{path.name}: bad magic or byte-order marker")
    if got_code != code or got_channels != channels:
        raise HeaderError(f"{path.name}: header says dtype {chr(got_code)!r} x{got_channels}, expected {chr(code)!r} x{channels}")
    shape = (height, width) if channels == 1 else (height, width, channels)
    if code == F32:
        return np.frombuffer(raw, dtype="<f4", offset=HEADER.size).reshape(shape).astype(np.float64)
    return np.frombuffer(raw, dtype=np.uint8, offset=HEADER.size).reshape(shape).copy()


def _as_mask(raw: np.ndarray, name: str) -> np.ndarray:
    if raw.max(initial=0) > 1:
        raise BundleError(f"{name}: mask bytes must be 0 or 1")
    return raw.astype(bool)


def _nan_fill(arr, valid) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out[~np.asarray(valid, dtype=bool)] = np.nan
    return out


# ---------------------------------------------------------------------------
# write / read
# ---------------------------------------------------------------------------


def _view_grids(v: ViewBundle) -> dict:
    grids = {
        "rays": v.rays.dirs,
        "ray_depth": _nan_fill(v.ray_depth.d, v.ray_depth.valid),
        "depth_valid": v.ray_depth.valid,
    }
    if v.scene_flow is not None:
        grids["scene_flow"] = _nan_fill(v.scene_flow.flow, v.scene_flow.valid)
        grids["scene_flow_valid"] = v.scene_flow.valid
    if v.ego_flow is not None:
        grids["ego_flow"] = _nan_fill(v.ego_flow.flow, v.ego_flow.valid)
        grids["ego_flow_valid"] = v.ego_flow.valid
    if v.points_after is not None:
        grids["points_after"] = _nan_fill(v.points_after.pts, v.points_after.valid)
        grids["points_after_valid"] = v.points_after.valid
    if v.optical_flow is not None:
        grids["optical_flow"] = _nan_fill(v.optical_flow.uv, v.optical_flow.valid)
        grids["optical_flow_valid"] = v.optical_flow.valid
    if v.doppler is not None:
        dv = v.doppler_valid if v.doppler_valid is not None else np.isfinite(v.doppler)
        grids["doppler"] = _nan_fill(v.doppler, dv)
        grids["doppler_valid"] = dv
    if v.motion_mask is not None:
        grids["motion_mask"] = v.motion_mask
    if v.confidence is not None:
        grids["confidence"] = v.confidence
    return grids


def write_bundle(seq: SceneSequence, out) -> Manifest:
    """Write ``seq`` to directory ``out`` (created if needed) and return the manifest."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if not seq.views[0].pose.is_identity():
        raise PoseConventionError("view 0 pose must be the identity")
    H, W = seq.shape
    entries = []
    for i, v in enumerate(seq.views):
        grids = _view_grids(v)
        files = {}
        for name, arr in grids.items():
            fname = _grid_file(i, name)
            write_grid(out / fname, name, arr)
            files[name] = fname
        entries.append(
            {
                "index": i,
                "pose": v.pose.to_list(),
                "intrinsics": v.intrinsics.to_dict(),
                "image": v.image_ref,
                "files": files,
                "present": {k: all(g in grids for g in OPTIONAL_GRIDS[k]) for k in OPTIONAL},
            }
        )
    manifest = Manifest(FORMAT_VERSION, seq.kind, len(seq), H, W, float(seq.scale), entries, meta=seq.meta)
    (out / MANIFEST).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(path) -> Manifest:
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.is_file():
        raise MissingFileError(f"no {MANIFEST} in {path}")
    return Manifest.from_dict(json.loads(mpath.read_text()))


def read_bundle(path) -> SceneSequence:
    path = Path(path)
    m = read_manifest(path)
    if len(m.views) != m.n_views:
        raise BundleError(f"manifest lists {len(m.views)} views but n_views={m.n_views}")
    H, W = m.height, m.width
    views = []
    for i, entry in enumerate(m.views):
        files = entry["files"]

        def grid(name):
            if name not in files:
                raise MissingFileError(f"view {i}: manifest has no {name} file")
            return read_grid(path / files[name], name, H, W)

        pose = Pose.from_list(entry["pose"])
        if i == 0 and not pose.is_identity():
            raise PoseConventionError("view 0 pose is not the identity")
        present = entry.get("present", {})
        dvalid = _as_mask(grid("depth_valid"), "depth_valid")
        kw = {}
        if present.get("scene_flow"):
            kw["scene_flow"] = SceneFlowField(grid("scene_flow"), _as_mask(grid("scene_flow_valid"), "scene_flow_valid"))
        if present.get("ego_flow"):
            kw["ego_flow"] = SceneFlowField(grid("ego_flow"), _as_mask(grid("ego_flow_valid"), "ego_flow_valid"))
        if present.get("points_after"):
            kw["points_after"] = Pointmap(grid("points_after"), _as_mask(grid("points_after_valid"), "points_after_valid"))
        if present.get("optical_flow"):
            kw["optical_flow"] = OpticalFlowField(
                grid("optical_flow"), _as_mask(grid("optical_flow_valid"), "optical_flow_valid")
            )
        if present.get("doppler"):
            kw["doppler"] = grid("doppler")
            kw["doppler_valid"] = _as_mask(grid("doppler_valid"), "doppler_valid")
        if present.get("motion_mask"):
            kw["motion_mask"] = _as_mask(grid("motion_mask"), "motion_mask")
        if present.get("confidence"):
            kw["confidence"] = grid("confidence")
        views.append(
            ViewBundle(
                intrinsics=Intrinsics.from_dict(entry["intrinsics"]),
                pose=pose,
                rays=RayMap(grid("rays")),
                ray_depth=RayDepthMap(grid("ray_depth"), dvalid),
                image_ref=entry.get("image"),
                **kw,
            )
        )
    return SceneSequence(views, m.scale, m.kind, m.meta or {})


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostic:
    code: str
    view: int | None
    grid: str | None
    count: int
    message: str

    def __str__(self):
        where = f"view {self.view}" if self.view is not None else "bundle"
        if self.grid:
            where += f" {self.grid}"
        return f"{where}: {self.code} ({self.count}) {self.message}"

    def to_dict(self) -> dict:
        return {"code": self.code, "view": self.view, "grid": self.grid, "count": self.count, "message": self.message}


RAY_NORM_TOL = 1e-5
POSE_TOL = 1e-9


def _pixel_checks(i: int, g: dict) -> list[Diagnostic]:
    out = []

    def add(code, grid, bad, msg):
        n = int(np.count_nonzero(bad))
        if n:
            out.append(Diagnostic(code, i, grid, n, msg))

    masks = {}
    for name, (code, _) in GRIDS.items():
        if code == U8 and name in g:
            add("mask_value", name, g[name] > 1, "mask bytes must be 0 or 1")
            masks[name] = g[name] == 1

    rays = g.get("rays")
    if rays is not None:
        finite = np.isfinite(rays).all(axis=-1)
        norm = np.linalg.norm(np.where(finite[..., None], rays, 0.0), axis=-1)
        add("ray_norm", "rays", finite & (np.abs(norm - 1.0) > RAY_NORM_TOL), f"ray norm off unity by > {RAY_NORM_TOL}")
        add("ray_forward", "rays", finite & (rays[..., 2] <= 0), "ray z-component must be positive")
        if "depth_valid" in masks:
            add("mask_nan", "rays", masks["depth_valid"] & ~finite, "valid pixel has a non-finite ray")

    pairs = [
        ("ray_depth", "depth_valid"),
        ("scene_flow", "scene_flow_valid"),
        ("ego_flow", "ego_flow_valid"),
        ("points_after", "points_after_valid"),
        ("optical_flow", "optical_flow_valid"),
        ("doppler", "doppler_valid"),
    ]
    for data, mask in pairs:
        if data in g and mask in masks:
            arr = g[data]
            finite = np.isfinite(arr) if arr.ndim == 2 else np.isfinite(arr).all(axis=-1)
            add("mask_nan", data, masks[mask] != finite, "validity mask disagrees with NaN sentinel")

    if "ray_depth" in g and "depth_valid" in masks:
        d = g["ray_depth"]
        add("depth_positive", "ray_depth", masks["depth_valid"] & np.isfinite(d) & (d <= 0), "valid depth must be positive")

    if i == 0 and "scene_flow" in g and "scene_flow_valid" in masks:
        f = g["scene_flow"]
        nonzero = masks["scene_flow_valid"] & np.isfinite(f).all(axis=-1) & np.any(f != 0, axis=-1)
        add("view0_flow", "scene_flow", nonzero, "view 0 scene flow must be zero")

    if "confidence" in g:
        c = g["confidence"]
        add("confidence_range", "confidence", ~((c >= 0) & (c <= 1)), "confidence must lie in [0, 1]")
    return out


def load_raw_grids(path, m: Manifest) -> tuple[list[dict], list[Diagnostic]]:
    """Read every grid file the manifest names, collecting structural problems."""
    path = Path(path)
    diags = []
    raw = []
    for i, entry in enumerate(m.views):
        g = {}
        files = entry.get("files", {})
        for name in REQUIRED:
            if name not in files:
                diags.append(Diagnostic("missing_file", i, name, 1, "required grid not listed in manifest"))
        for name, fname in files.items():
            if name not in GRIDS:
                diags.append(Diagnostic("unknown_grid", i, name, 1, f"unknown grid name {name!r}"))
                continue
            try:
                g[name] = read_grid(path / fname, name, m.height, m.width)
            except MissingFileError as e:
                diags.append(Diagnostic("missing_file", i, name, 1, str(e)))
            except SizeMismatchError as e:
                diags.append(Diagnostic("size_mismatch", i, name, 1, str(e)))
            except HeaderError as e:
                diags.append(Diagnostic("bad_header", i, name, 1, str(e)))
        raw.append(g)
    return raw, diags


def validate_bundle(path) -> list[Diagnostic]:
    """Check a bundle against every format and type invariant; empty list iff valid."""
    path = Path(path)
    try:
        m = read_manifest(path)
    except (BundleError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        code = "version" if isinstance(e, VersionMismatchError) else "manifest"
        return [Diagnostic(code, None, None, 1, str(e))]
    diags = []
    if len(m.views) != m.n_views:
        diags.append(Diagnostic("view_count", None, None, 1, f"{len(m.views)} views listed, n_views={m.n_views}"))
    if not m.scale > 0:
        diags.append(Diagnostic("scale", None, None, 1, f"metric scale {m.scale} must be positive"))
    for i, entry in enumerate(m.views):
        pose = np.asarray(entry.get("pose", []), dtype=np.float64)
        if pose.shape != (7,) or not np.isfinite(pose).all():
            diags.append(Diagnostic("pose", i, None, 1, "pose must be 7 finite numbers"))
            continue
        qn = float(np.linalg.norm(pose[:4]))
        if abs(qn - 1.0) > 1e-6:
            diags.append(Diagnostic("quat_norm", i, None, 1, f"quaternion norm {qn}"))
        if i == 0:
            ident = np.array([1, 0, 0, 0, 0, 0, 0], dtype=np.float64)
            if not (np.all(np.abs(pose - ident) <= POSE_TOL) or np.all(np.abs(pose + ident * [1, 1, 1, 1, 0, 0, 0]) <= POSE_TOL)):
                diags.append(Diagnostic("view0_pose", 0, None, 1, "view 0 pose must be the identity"))
        try:
            Intrinsics.from_dict(entry.get("intrinsics", {}))
        except (KeyError, TypeError, ValueError) as e:
            diags.append(Diagnostic("intrinsics", i, None, 1, str(e)))
    raw, structural = load_raw_grids(path, m)
    diags.extend(structural)
    for i, g in enumerate(raw):
        diags.extend(_pixel_checks(i, g))
    return diags
