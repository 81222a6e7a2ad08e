"""Scene data: cameras, point clouds, images, checkpoints, synthetic scenes.

File formats owned here:

* PLY point clouds (ASCII and binary little-endian, x/y/z + optional 8-bit
  red/green/blue, unknown scalar properties skipped),
* camera files in the transforms-JSON layout (global camera_angle_x,
  per-frame 4x4 camera-to-world matrix, camera looking down its -z axis),
* 8-bit RGB PNG images mapped to [0,1],
* "RMCK" checkpoint containers holding named float32 tensors.

Synthetic scenes pair a jittered surface point cloud with analytically
rendered ground-truth images, so the cloud's noise is the only geometry
error in the pipeline. Image convention everywhere: row-major, origin
top-left, pixel centers at integer + 0.5.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import (
    FormatError,
    PlyParseError,
    SchemaError,
    UnsupportedFormatError,
    ValidationError,
)

# ---------------------------------------------------------------------------
# cameras


@dataclass
class Camera:
    """Pinhole intrinsics plus a rigid camera-to-world pose.

    Camera space: x right, y down (along image rows), looking down -z.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_to_world: np.ndarray

    def __post_init__(self):
        self.cam_to_world = np.asarray(self.cam_to_world, dtype=np.float64)
        if self.cam_to_world.shape != (4, 4):
            raise ValidationError(
                f"cam_to_world must be 4x4, got {self.cam_to_world.shape}"
            )
        R = self.cam_to_world[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValidationError("camera rotation is not orthonormal")
        if not math.isclose(float(np.linalg.det(R)), 1.0, abs_tol=1e-6):
            raise ValidationError("camera rotation must have determinant +1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError(f"focal lengths must be positive: {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError(
                f"principal point ({self.cx}, {self.cy}) outside "
                f"{self.width}x{self.height}"
            )

    @property
    def rotation(self):
        return self.cam_to_world[:3, :3]

    @property
    def position(self):
        return self.cam_to_world[:3, 3]

    @property
    def view_axis(self):
        """World-space unit vector of the viewing direction (camera -z)."""
        return -self.cam_to_world[:3, 2]

    def world_to_cam(self, points):
        points = np.asarray(points, dtype=np.float64)
        return (points - self.position) @ self.rotation

    def cam_to_world_points(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.position

    def ray_grid(self):
        """(origin, dirs): per-pixel unit world rays through pixel centers."""
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        d_cam = np.empty((self.height, self.width, 3), dtype=np.float64)
        d_cam[..., 0] = xs[None, :]
        d_cam[..., 1] = ys[:, None]
        d_cam[..., 2] = -1.0
        d_world = d_cam @ self.rotation.T
        d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
        return self.position.copy(), d_world

    def scaled(self, factor):
        """New camera with intrinsics and image extents scaled by factor."""
        return Camera(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
            cam_to_world=self.cam_to_world.copy(),
        )


def look_at_camera(eye, target, width, height, fov_x, up=(0.0, 0.0, 1.0)):
    """Camera at ``eye`` looking at ``target`` with horizontal FOV ``fov_x``."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z_axis = eye - target
    nz = np.linalg.norm(z_axis)
    if nz < 1e-12:
        raise ValidationError("eye and target coincide")
    z_axis = z_axis / nz
    if abs(float(np.dot(z_axis, up)) / np.linalg.norm(up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    x_axis = np.cross(z_axis, up)
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    c2w = np.eye(4)
    c2w[:3, 0] = x_axis
    c2w[:3, 1] = y_axis
    c2w[:3, 2] = z_axis
    c2w[:3, 3] = eye
    fx = 0.5 * width / math.tan(0.5 * fov_x)
    return Camera(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height, cam_to_world=c2w)


# ---------------------------------------------------------------------------
# point clouds


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValidationError(f"positions must be Nx3, got {self.positions.shape}")
        if not np.isfinite(self.positions).all():
            raise ValidationError("positions contain non-finite values")
        if self.colors is not None:
            self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
            if self.colors.shape != self.positions.shape:
                raise ValidationError(
                    f"colors {self.colors.shape} do not match positions "
                    f"{self.positions.shape}"
                )
            if self.colors.min(initial=0.0) < 0.0 or self.colors.max(initial=0.0) > 1.0:
                raise ValidationError("colors must lie in [0, 1]")

    def __len__(self):
        return self.positions.shape[0]

    def downsampled(self, factor):
        """Uniform downsampling: keep every factor-th point."""
        if factor < 1:
            raise ValidationError(f"downsample factor must be >= 1, got {factor}")
        pos = self.positions[::factor]
        col = self.colors[::factor] if self.colors is not None else None
        return PointCloud(pos, col)


_PLY_SCALARS = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def load_ply(path):
    """Parse an ASCII or binary-little-endian PLY into a PointCloud.

    Reads x, y, z and, when all three are present as 8-bit values, red,
    green, blue rescaled to [0,1]. Other scalar properties are skipped.
    """
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"end_header")
    if end < 0:
        raise PlyParseError("no end_header found", line=1)
    header_end = raw.find(b"\n", end)
    if header_end < 0:
        raise PlyParseError("end_header not terminated", line=1)
    header_lines = raw[:header_end].decode("ascii", errors="replace").splitlines()
    body = raw[header_end + 1 :]

    if not header_lines or header_lines[0].strip() != "ply":
        raise PlyParseError("file does not start with 'ply'", line=1)

    fmt = None
    elements = []  # (name, count, [(prop_name, dtype_code)]), in file order
    for lineno, line in enumerate(header_lines[1:], start=2):
        parts = line.strip().split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if len(parts) < 2:
                raise PlyParseError("format line missing type", line=lineno)
            if parts[1] == "ascii":
                fmt = "ascii"
            elif parts[1] == "binary_little_endian":
                fmt = "binary_le"
            elif parts[1] == "binary_big_endian":
                raise UnsupportedFormatError("big-endian PLY payloads are not supported")
            else:
                raise PlyParseError(f"unknown format {parts[1]!r}", line=lineno)
        elif parts[0] == "element":
            if len(parts) != 3:
                raise PlyParseError("element line needs a name and a count", line=lineno)
            try:
                count = int(parts[2])
            except ValueError:
                raise PlyParseError(f"bad element count {parts[2]!r}", line=lineno)
            elements.append((parts[1], count, []))
        elif parts[0] == "property":
            if not elements:
                raise PlyParseError("property before any element", line=lineno)
            if len(parts) >= 2 and parts[1] == "list":
                elements[-1][2].append((parts[-1], "list"))
            elif len(parts) == 3:
                if parts[1] not in _PLY_SCALARS:
                    raise PlyParseError(f"unknown property type {parts[1]!r}", line=lineno)
                elements[-1][2].append((parts[2], _PLY_SCALARS[parts[1]]))
            else:
                raise PlyParseError("malformed property line", line=lineno)
        elif parts[0] == "end_header":
            break
        else:
            raise PlyParseError(f"unknown header keyword {parts[0]!r}", line=lineno)

    if fmt is None:
        raise PlyParseError("header has no format line", line=1)
    vertex = next((e for e in elements if e[0] == "vertex"), None)
    if vertex is None:
        raise PlyParseError("header has no vertex element", line=1)
    for name, dt in vertex[2]:
        if dt == "list":
            raise UnsupportedFormatError(f"list property {name!r} on vertex element")
    names = [p[0] for p in vertex[2]]
    for required in ("x", "y", "z"):
        if required not in names:
            raise PlyParseError(f"vertex element lacks property {required!r}", line=1)

    if fmt == "ascii":
        rows = _read_ply_ascii(body, elements, vertex)
    else:
        rows = _read_ply_binary(body, elements, vertex)

    positions = np.stack(
        [rows["x"], rows["y"], rows["z"]], axis=1
    ).astype(np.float64)
    colors = None
    if all(c in rows for c in ("red", "green", "blue")):
        colors = np.stack(
            [rows["red"], rows["green"], rows["blue"]], axis=1
        ).astype(np.float64) / 255.0
    return PointCloud(positions, colors)


def _read_ply_ascii(body, elements, vertex):
    lines = body.decode("ascii", errors="replace").splitlines()
    cursor = 0
    for name, count, props in elements:
        if name == "vertex":
            break
        cursor += count  # skip earlier elements line by line
    n = vertex[1]
    if cursor + n > len(lines):
        raise FormatError(f"ASCII body has {len(lines)} rows, need {cursor + n}")
    names = [p[0] for p in vertex[2]]
    data = np.empty((n, len(names)), dtype=np.float64)
    for i in range(n):
        parts = lines[cursor + i].split()
        if len(parts) < len(names):
            raise FormatError(f"vertex row {i} has {len(parts)} values, need {len(names)}")
        data[i] = [float(v) for v in parts[: len(names)]]
    return {name: data[:, j] for j, name in enumerate(names)}


def _read_ply_binary(body, elements, vertex):
    offset = 0
    for name, count, props in elements:
        if name == "vertex":
            break
        stride = 0
        for pname, dt in props:
            if dt == "list":
                raise UnsupportedFormatError(
                    f"cannot skip element {name!r} with list properties"
                )
            stride += np.dtype(dt).itemsize
        offset += stride * count
    dtype = np.dtype([(p, "<" + dt) for p, dt in vertex[2]])
    n = vertex[1]
    need = offset + dtype.itemsize * n
    if len(body) < need:
        raise FormatError(f"binary payload truncated: have {len(body)}, need {need}")
    records = np.frombuffer(body, dtype=dtype, count=n, offset=offset)
    return {p: records[p].astype(np.float64) for p, _ in vertex[2]}


def save_ply(path, cloud, binary=True):
    """Write x,y,z as float32 plus optional uchar red,green,blue."""
    n = len(cloud)
    props = ["property float x", "property float y", "property float z"]
    if cloud.colors is not None:
        props += ["property uchar red", "property uchar green", "property uchar blue"]
    fmt = "binary_little_endian" if binary else "ascii"
    header = "\n".join(
        ["ply", f"format {fmt} 1.0", f"element vertex {n}", *props, "end_header", ""]
    )
    pos = cloud.positions.astype(np.float32)
    col = None
    if cloud.colors is not None:
        col = np.floor(np.clip(cloud.colors, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
            if col is not None:
                fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
            rec = np.empty(n, dtype=np.dtype(fields))
            rec["x"], rec["y"], rec["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
            if col is not None:
                rec["red"], rec["green"], rec["blue"] = col[:, 0], col[:, 1], col[:, 2]
            f.write(rec.tobytes())
        else:
            for i in range(n):
                row = f"{pos[i, 0]:.9g} {pos[i, 1]:.9g} {pos[i, 2]:.9g}"
                if col is not None:
                    row += f" {col[i, 0]} {col[i, 1]} {col[i, 2]}"
                f.write((row + "\n").encode("ascii"))


# ---------------------------------------------------------------------------
# transforms JSON


def load_transforms_json(path, width=None, height=None):
    """Load cameras from the transforms-JSON layout.

    fx = fy = 0.5 * width / tan(0.5 * camera_angle_x); principal point at the
    image center. Image extents come from "width"/"height" keys in the file,
    falling back to the arguments.
    """
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if "camera_angle_x" not in doc:
        raise SchemaError("camera_angle_x")
    if "frames" not in doc:
        raise SchemaError("frames")
    width = doc.get("width", doc.get("w", width))
    height = doc.get("height", doc.get("h", height))
    if width is None:
        raise SchemaError("width", "width not in file and not supplied")
    if height is None:
        raise SchemaError("height", "height not in file and not supplied")
    angle = float(doc["camera_angle_x"])
    fx = 0.5 * float(width) / math.tan(0.5 * angle)
    cameras = []
    for i, frame in enumerate(doc["frames"]):
        if "transform_matrix" not in frame:
            raise SchemaError("transform_matrix", f"frame {i} lacks transform_matrix")
        c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
        cameras.append(
            Camera(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                   width=int(width), height=int(height), cam_to_world=c2w)
        )
    return cameras


def save_transforms_json(path, cameras, file_paths=None):
    """Write cameras in the transforms-JSON layout (shared intrinsics)."""
    if not cameras:
        raise ValidationError("cannot save an empty camera list")
    cam0 = cameras[0]
    angle = 2.0 * math.atan(0.5 * cam0.width / cam0.fx)
    frames = []
    for i, cam in enumerate(cameras):
        frame = {"transform_matrix": cam.cam_to_world.tolist()}
        if file_paths is not None:
            frame["file_path"] = file_paths[i]
        frames.append(frame)
    doc = {
        "camera_angle_x": angle,
        "width": cam0.width,
        "height": cam0.height,
        "frames": frames,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# PNG images


def load_png(path):
    """8-bit RGB PNG to float64 HxWx3 in [0,1]."""
    with open(path, "rb") as f:
        head = f.read(26)
    if len(head) < 26 or head[:8] != b"\x89PNG\r\n\x1a\n":
        raise UnsupportedFormatError(f"{path}: not a PNG file")
    bit_depth, color_type = head[24], head[25]
    if bit_depth != 8 or color_type != 2:
        raise UnsupportedFormatError(
            f"{path}: only 8-bit RGB supported "
            f"(bit depth {bit_depth}, color type {color_type})"
        )
    img = Image.open(path)
    if img.mode != "RGB":
        raise UnsupportedFormatError(f"{path}: unsupported mode {img.mode}")
    return np.asarray(img, dtype=np.float64) / 255.0


def save_png(image, path):
    """Float HxWx3 in [0,1] to 8-bit RGB; rounds half away from zero."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"image must be HxWx3, got {image.shape}")
    quantized = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(quantized, mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# RMCK checkpoint container

RMCK_MAGIC = b"RMCK"
RMCK_VERSION = 1


def save_rmck(path, tensors):
    """Write named float32 tensors; insertion order is the file order."""
    with open(path, "wb") as f:
        f.write(RMCK_MAGIC)
        f.write(struct.pack("<II", RMCK_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(arr.tobytes())


def load_rmck(path):
    """Read an RMCK container back into an ordered {name: float32 array}."""
    with open(path, "rb") as f:
        blob = f.read()

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated checkpoint: need {n} bytes for {what}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4, "magic") != RMCK_MAGIC:
        raise FormatError("bad magic bytes, not an RMCK file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != RMCK_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, "dims")) if ndim else ()
        n_elems = int(np.prod(dims)) if ndim else 1
        payload = take(4 * n_elems, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return tensors


@dataclass
class Checkpoint:
    """Decoded checkpoint: parameters, optimizer tensors, step, config echo."""

    params: dict
    opt: dict
    step: int
    config: dict


def save_checkpoint(path, params, opt=None, step=0, config=None):
    """Model + optimizer state in one RMCK file.

    Optimizer tensors go under "opt."-prefixed names, the step count under
    "meta.step" and the config echo as "meta.config" (UTF-8 bytes stored as
    float32 values, which round-trip exactly).
    """
    tensors = dict(params)
    for name, arr in (opt or {}).items():
        tensors["opt." + name] = arr
    tensors["meta.step"] = np.asarray([float(step)], dtype=np.float32)
    blob = json.dumps(config or {}, sort_keys=True).encode("utf-8")
    tensors["meta.config"] = np.frombuffer(blob, dtype=np.uint8).astype(np.float32)
    save_rmck(path, tensors)


def load_checkpoint(path):
    tensors = load_rmck(path)
    if "meta.step" not in tensors:
        raise FormatError("checkpoint lacks meta.step")
    step = int(tensors.pop("meta.step")[0])
    config = {}
    if "meta.config" in tensors:
        blob = tensors.pop("meta.config").astype(np.uint8).tobytes()
        config = json.loads(blob.decode("utf-8")) if blob else {}
    params, opt = {}, {}
    for name, arr in tensors.items():
        if name.startswith("opt."):
            opt[name[4:]] = arr
        elif name.startswith("meta."):
            continue
        else:
            params[name] = arr
    return Checkpoint(params=params, opt=opt, step=step, config=config)


# ---------------------------------------------------------------------------
# synthetic scenes

_PLANE_HALF = 1.2
_CUBE_HALF = 0.6
_SPHERE_RADIUS = 1.0

PRIMITIVES = ("sphere", "plane", "cube")


def constant_radiance(color):
    color = np.asarray(color, dtype=np.float64)

    def fn(points, dirs):
        return np.broadcast_to(color, (len(points), 3)).copy()

    return fn


def checker_radiance(cell=0.35, color_a=(0.85, 0.3, 0.2), color_b=(0.15, 0.35, 0.8)):
    """View-independent 3D lattice checker."""
    color_a = np.asarray(color_a, dtype=np.float64)
    color_b = np.asarray(color_b, dtype=np.float64)

    def fn(points, dirs):
        cells = np.floor(points / cell).sum(axis=1).astype(np.int64)
        out = np.where((cells % 2 == 0)[:, None], color_a, color_b)
        return out

    return fn


def shaded_checker_radiance(primitive, cell=0.35,
                            color_a=(0.85, 0.3, 0.2), color_b=(0.15, 0.35, 0.8)):
    """Checker modulated by view incidence, so radiance depends on direction."""
    base = checker_radiance(cell, color_a, color_b)

    def fn(points, dirs):
        normals = surface_normals(primitive, points)
        incidence = np.abs((normals * dirs).sum(axis=1))
        factor = 0.6 + 0.4 * incidence
        return np.clip(base(points, dirs) * factor[:, None], 0.0, 1.0)

    return fn


def make_radiance(name, primitive="sphere", **kwargs):
    if name == "constant":
        return constant_radiance(kwargs.get("color", (0.7, 0.7, 0.7)))
    if name == "checker":
        return checker_radiance(**kwargs)
    if name == "shaded-checker":
        return shaded_checker_radiance(primitive, **kwargs)
    raise ValidationError(f"unknown radiance {name!r}")


@dataclass
class SyntheticScene:
    """A primitive with an analytic radiance map and a jittered point cloud."""

    primitive: str = "sphere"
    radiance_fn: object = None
    point_count: int = 20000
    noise_sigma: float = 0.002
    seed: int = 0
    background: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.primitive not in PRIMITIVES:
            raise ValidationError(f"unknown primitive {self.primitive!r}")
        if self.point_count <= 0:
            raise ValidationError(f"point_count must be positive, got {self.point_count}")
        if self.noise_sigma < 0:
            raise ValidationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.radiance_fn is None:
            self.radiance_fn = checker_radiance()


@dataclass
class Dataset:
    """Per-view cameras and ground-truth images with a train/test split."""

    entries: list
    split: dict
    bbox: np.ndarray = None

    def __post_init__(self):
        for cam, img in self.entries:
            if img.shape != (cam.height, cam.width, 3):
                raise ValidationError(
                    f"image {img.shape} does not match camera "
                    f"{cam.height}x{cam.width}"
                )
        train = set(self.split.get("train", ()))
        test = set(self.split.get("test", ()))
        if train & test:
            raise ValidationError("train and test splits overlap")

    def views(self, which):
        return [self.entries[i] for i in self.split[which]]


def primitive_bbox(primitive):
    if primitive == "sphere":
        h = _SPHERE_RADIUS
        return np.array([[-h, -h, -h], [h, h, h]])
    if primitive == "plane":
        h = _PLANE_HALF
        return np.array([[-h, -h, 0.0], [h, h, 0.0]])
    h = _CUBE_HALF
    return np.array([[-h, -h, -h], [h, h, h]])


def sample_surface(primitive, n, rng):
    if primitive == "sphere":
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return v * _SPHERE_RADIUS
    if primitive == "plane":
        pts = np.zeros((n, 3))
        pts[:, :2] = rng.uniform(-_PLANE_HALF, _PLANE_HALF, size=(n, 2))
        return pts
    # cube: pick a face uniformly (all faces equal area), then a point on it
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-_CUBE_HALF, _CUBE_HALF, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        sel = axis == a
        others = [i for i in range(3) if i != a]
        pts[sel, a] = sign[sel] * _CUBE_HALF
        pts[np.ix_(sel, others)] = uv[sel]
    return pts


def surface_normals(primitive, points):
    points = np.asarray(points, dtype=np.float64)
    if primitive == "sphere":
        n = np.linalg.norm(points, axis=1, keepdims=True)
        return points / np.where(n > 0, n, 1.0)
    if primitive == "plane":
        out = np.zeros_like(points)
        out[:, 2] = 1.0
        return out
    axis = np.argmax(np.abs(points), axis=1)
    out = np.zeros_like(points)
    out[np.arange(len(points)), axis] = np.sign(
        points[np.arange(len(points)), axis]
    )
    return out


def intersect_rays(primitive, origin, dirs):
    """Exact first intersection of unit rays with the primitive.

    dirs: (..., 3). Returns (hit mask, t) with t valid where hit.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    flat = dirs.reshape(-1, 3)
    if primitive == "sphere":
        oc = origin[None, :]
        b = (flat * oc).sum(axis=1)
        c = float(origin @ origin) - _SPHERE_RADIUS**2
        disc = b * b - c
        hit = disc >= 0.0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > 1e-9, t0, t1)
        hit &= t > 1e-9
    elif primitive == "plane":
        dz = flat[:, 2]
        safe = np.abs(dz) > 1e-12
        t = np.where(safe, -origin[2] / np.where(safe, dz, 1.0), -1.0)
        x = origin[0] + t * flat[:, 0]
        y = origin[1] + t * flat[:, 1]
        hit = safe & (t > 1e-9) & (np.abs(x) <= _PLANE_HALF) & (np.abs(y) <= _PLANE_HALF)
    else:
        h = _CUBE_HALF
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / flat
            t_lo = (-h - origin[None, :]) * inv
            t_hi = (h - origin[None, :]) * inv
        near = np.minimum(t_lo, t_hi)
        far = np.maximum(t_lo, t_hi)
        parallel = np.abs(flat) < 1e-12
        inside = (np.abs(origin)[None, :] <= h) & parallel
        near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
        far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
        t_enter = near.max(axis=1)
        t_exit = far.min(axis=1)
        hit = (t_enter <= t_exit) & (t_enter > 1e-9)
        t = t_enter
    return hit.reshape(dirs.shape[:-1]), t.reshape(dirs.shape[:-1])


def render_ground_truth(scene, camera):
    """Analytic ray-primitive image; never touches the point cloud."""
    origin, dirs = camera.ray_grid()
    hit, t = intersect_rays(scene.primitive, origin, dirs)
    img = np.empty((camera.height, camera.width, 3), dtype=np.float64)
    img[:] = np.asarray(scene.background, dtype=np.float64)
    if hit.any():
        d = dirs[hit]
        pts = origin[None, :] + t[hit][:, None] * d
        img[hit] = np.clip(scene.radiance_fn(pts, d), 0.0, 1.0)
    return img


def ring_cameras(n_views, width, height, fov_x=0.9, radius=3.0,
                 elevations_deg=(18.0, 36.0, 52.0), target=(0.0, 0.0, 0.0)):
    """Deterministic cameras on a ring around the target, looking inward."""
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for i in range(n_views):
        az = 2.0 * math.pi * i / n_views
        el = math.radians(elevations_deg[i % len(elevations_deg)])
        eye = target + radius * np.array(
            [math.cos(az) * math.cos(el), math.sin(az) * math.cos(el), math.sin(el)]
        )
        cams.append(look_at_camera(eye, target, width, height, fov_x))
    return cams


def generate_scene(scene, n_views, n_test=0, width=64, height=64,
                   fov_x=0.9, cam_radius=3.0):
    """Sample a jittered surface cloud and render analytic ground truth.

    Ground truth comes from exact ray-primitive intersection, so images are
    independent of point_count and noise_sigma. Cameras sit on a ring around
    the scene; every camera satisfies the Camera invariants by construction.
    """
    if n_views <= 0:
        raise ValidationError(f"n_views must be positive, got {n_views}")
    if not 0 <= n_test < n_views:
        raise ValidationError(f"need 0 <= n_test < n_views, got {n_test}")
    rng = np.random.default_rng(scene.seed)
    pts = sample_surface(scene.primitive, scene.point_count, rng)
    normals = surface_normals(scene.primitive, pts)
    colors = np.clip(scene.radiance_fn(pts, -normals), 0.0, 1.0)
    if scene.noise_sigma > 0:
        pts = pts + rng.normal(scale=scene.noise_sigma, size=pts.shape)
    cloud = PointCloud(pts, colors)

    cameras = ring_cameras(n_views, width, height, fov_x, cam_radius)
    entries = [(cam, render_ground_truth(scene, cam)) for cam in cameras]

    if n_test:
        ids = {int((i + 0.5) * n_views / n_test) for i in range(n_test)}
        spare = (i for i in range(n_views) if i not in ids)
        while len(ids) < n_test:
            ids.add(next(spare))
        test_ids = sorted(ids)
    else:
        test_ids = []
    train_ids = [i for i in range(n_views) if i not in set(test_ids)]

    box = primitive_bbox(scene.primitive).copy()
    box[0] -= 3.0 * scene.noise_sigma
    box[1] += 3.0 * scene.noise_sigma
    dataset = Dataset(entries=entries, split={"train": train_ids, "test": test_ids},
                      bbox=box)
    return cloud, dataset
