"""File formats: Gaussian PLY, deformation checkpoints, OBJ/MTL export,
driving-video loading.

The PLY layout follows the de-facto splatting exporter convention
(x y z nx ny nz f_dc_0..2 opacity scale_0..2 rot_0..3) so fitted clouds
open in third-party viewers; values are written as doubles for bit-exact
round trips, and the loader accepts float or double files.

Deformation checkpoints are a little-endian uint32 header length, a JSON
header (shapes and domain box), then the listed tensors as raw C-order
float64 blobs.
"""

import json
import os
import re
import struct

import numpy as np

from .gaussians import Camera, GaussianCloud
from .hexplane import DeformDecoder, HexPlaneField
from .images import load_image, save_image

__all__ = [
    "PlyParseError",
    "save_cloud",
    "load_cloud",
    "save_deformation",
    "load_deformation",
    "save_mesh_frame",
    "load_video_frames",
    "load_video",
]


class PlyParseError(ValueError):
    pass


_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
}

_FIELD_ORDER = ("x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2",
                "opacity", "scale_0", "scale_1", "scale_2",
                "rot_0", "rot_1", "rot_2", "rot_3")

_REQUIRED = ("x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
             "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3")


def save_cloud(path, cloud: GaussianCloud):
    """Write a cloud as binary little-endian PLY (double precision)."""
    n = len(cloud)
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {n}"]
    header += [f"property double {name}" for name in _FIELD_ORDER]
    header.append("end_header")
    rec = np.zeros((n, len(_FIELD_ORDER)))
    rec[:, 0:3] = cloud.positions
    rec[:, 6:9] = cloud.colors
    rec[:, 9] = cloud.opacity_logits[:, 0]
    rec[:, 10:13] = cloud.log_scales
    rec[:, 13:17] = cloud.rotations
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(rec, dtype="<f8").tobytes())


def _parse_ply_header(blob):
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise PlyParseError("not a PLY file (missing magic or end_header)")
    body_offset = end + len(b"end_header\n")
    lines = blob[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    count = None
    props = []
    in_vertex = False
    for line in lines[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise PlyParseError("list properties are not supported for vertices")
            if parts[1] not in _PLY_TYPES:
                raise PlyParseError(f"unsupported property type {parts[1]!r}")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt != "binary_little_endian":
        raise PlyParseError(f"unsupported PLY format {fmt!r}")
    if count is None:
        raise PlyParseError("no vertex element in header")
    return count, props, body_offset


def load_cloud(path) -> GaussianCloud:
    """Read a Gaussian PLY; bit-exact inverse of :func:`save_cloud`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    count, props, offset = _parse_ply_header(blob)
    names = [p[0] for p in props]
    missing = [name for name in _REQUIRED if name not in names]
    if missing:
        raise PlyParseError(f"missing vertex properties: {', '.join(missing)}")
    dtype = np.dtype(props)
    need = count * dtype.itemsize
    have = len(blob) - offset
    if have < need:
        raise PlyParseError(
            f"truncated body: expected {need} bytes at offset {offset}, found {have}")
    rec = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)

    def col(name):
        return np.ascontiguousarray(rec[name], dtype=np.float64)

    arrays = {name: col(name) for name in _REQUIRED}
    for name, arr in arrays.items():
        bad = np.nonzero(~np.isfinite(arr))[0]
        if bad.size:
            row = int(bad[0])
            byte = offset + row * dtype.itemsize + dtype.fields[name][1]
            raise PlyParseError(
                f"non-finite value in property {name!r} at row {row} (byte offset {byte})")
    positions = np.stack([arrays["x"], arrays["y"], arrays["z"]], axis=1)
    colors = np.stack([arrays[f"f_dc_{i}"] for i in range(3)], axis=1)
    log_scales = np.stack([arrays[f"scale_{i}"] for i in range(3)], axis=1)
    rotations = np.stack([arrays[f"rot_{i}"] for i in range(4)], axis=1)
    opacity = arrays["opacity"][:, None]
    return GaussianCloud(positions, rotations, log_scales, opacity, colors)


_CKPT_MAGIC = 0x53344443  # "S4DC"


def save_deformation(path, field: HexPlaneField, decoder: DeformDecoder):
    """Checkpoint the deformation model: JSON header + float64 blobs."""
    tensors = []
    blobs = []
    for name in sorted(field.planes):
        arr = np.ascontiguousarray(field.planes[name], dtype="<f8")
        tensors.append({"name": f"plane_{name}", "shape": list(arr.shape)})
        blobs.append(arr)
    for name in sorted(decoder.params):
        arr = np.ascontiguousarray(decoder.params[name], dtype="<f8")
        tensors.append({"name": f"decoder.{name}", "shape": list(arr.shape)})
        blobs.append(arr)
    header = {
        "magic": _CKPT_MAGIC,
        "kind": "deformation",
        "spatial_resolution": field.spatial_resolution,
        "temporal_resolution": field.temporal_resolution,
        "feature_dim": field.feature_dim,
        "spatial_bounds": [list(field.spatial_bounds[0]), list(field.spatial_bounds[1])],
        "time_bounds": list(field.time_bounds),
        "hidden_dim": decoder.hidden_dim,
        "tensors": tensors,
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for b in blobs:
            fh.write(b.tobytes())


def load_deformation(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError("checkpoint too short")
    (hlen,) = struct.unpack("<I", raw[:4])
    header = json.loads(raw[4:4 + hlen].decode("utf-8"))
    if header.get("magic") != _CKPT_MAGIC or header.get("kind") != "deformation":
        raise ValueError("not a deformation checkpoint")
    offset = 4 + hlen
    arrays = {}
    for spec in header["tensors"]:
        n = int(np.prod(spec["shape"]))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(spec["shape"])
        arrays[spec["name"]] = np.ascontiguousarray(arr)
        offset += n * 8
    field = HexPlaneField(
        spatial_resolution=header["spatial_resolution"],
        temporal_resolution=header["temporal_resolution"],
        feature_dim=header["feature_dim"],
        spatial_bounds=(tuple(header["spatial_bounds"][0]),
                        tuple(header["spatial_bounds"][1])),
        time_bounds=tuple(header["time_bounds"]),
        planes={name[len("plane_"):]: arr for name, arr in arrays.items()
                if name.startswith("plane_")},
    )
    decoder = DeformDecoder(
        feature_dim=header["feature_dim"], hidden_dim=header["hidden_dim"],
        params={name[len("decoder."):]: arr for name, arr in arrays.items()
                if name.startswith("decoder.")},
    )
    return field, decoder


def _fmt(x):
    return format(float(x), ".17g")


def save_mesh_frame(directory, frame_index, mesh, uv, texture):
    """Write frame_<idx>.obj/.mtl/.png (per-corner UVs, v flipped for the
    bottom-left OBJ texture origin)."""
    stem = f"frame_{frame_index:03d}"
    obj_path = os.path.join(directory, stem + ".obj")
    mtl_path = os.path.join(directory, stem + ".mtl")
    png_path = os.path.join(directory, stem + ".png")
    lines = [f"mtllib {stem}.mtl", "usemtl material_0"]
    for v in mesh.vertices:
        lines.append(f"v {_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}")
    for face_uv in uv:
        for corner in face_uv:
            lines.append(f"vt {_fmt(corner[0])} {_fmt(1.0 - corner[1])}")
    for i, face in enumerate(mesh.faces):
        a, b, c = (int(x) + 1 for x in face)
        ta, tb, tc = 3 * i + 1, 3 * i + 2, 3 * i + 3
        lines.append(f"f {a}/{ta} {b}/{tb} {c}/{tc}")
    with open(obj_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(mtl_path, "w") as fh:
        fh.write("newmtl material_0\n"
                 "Ka 1 1 1\nKd 1 1 1\nKs 0 0 0\nd 1\nillum 1\n"
                 f"map_Kd {stem}.png\n")
    save_image(png_path, texture)
    return obj_path


def load_video_frames(source):
    """Load RGBA PNG frames from a directory or glob pattern, composited
    over white per the fixed-white-background convention."""
    import glob as _glob

    if os.path.isdir(source):
        paths = sorted(
            os.path.join(source, p) for p in os.listdir(source)
            if re.search(r"\.png$", p, re.IGNORECASE))
    else:
        paths = sorted(_glob.glob(source))
    if len(paths) < 2:
        raise ValueError(f"need at least 2 frames, found {len(paths)} in {source!r}")
    frames = []
    shapes = {}
    for p in paths:
        img = load_image(p)
        if img.shape[2] == 4:
            alpha = img[:, :, 3:4]
            img = img[:, :, :3] * alpha + (1.0 - alpha)
        frames.append(img)
        shapes.setdefault(img.shape[:2], []).append(os.path.basename(p))
    if len(shapes) > 1:
        detail = "; ".join(f"{hw[1]}x{hw[0]}: {', '.join(names)}"
                           for hw, names in sorted(shapes.items()))
        raise ValueError(f"inconsistent frame resolutions ({detail})")
    return np.stack(frames)


def load_video(source, reference_camera: Camera | None = None):
    """Driving video from PNG frames; the reference camera defaults to the
    frame resolution at azimuth 0, elevation 0, radius 1.5."""
    from .trainer import DrivingVideo

    frames = load_video_frames(source)
    if reference_camera is None:
        reference_camera = Camera(0.0, 0.0, 1.5, width=frames.shape[2],
                                  height=frames.shape[1])
    return DrivingVideo(frames, reference_camera)
