"""Posed-image datasets, images and training checkpoints.

Scene layout on disk: a directory containing ``scene.json`` plus the
referenced images.  Manifest fields: ``width``, ``height``, ``focal``,
``cx``, ``cy``, ``bounds_min``/``bounds_max`` (3 numbers each) and
``frames``, a list of ``{"file": ..., "transform": [12 numbers]}`` with
the transform a row-major 3x4 camera-to-world matrix.  An optional
``stylized_dir`` names a sibling directory holding images with the same
filenames, index-aligned with the frames.

Camera convention: the camera looks along +z of its own frame, x right,
y down.  Pixel (u, v) is sampled at its center (u + 0.5, v + 0.5).

Checkpoints are little-endian binary: magic ``LRF1``, a u32 version, a
length-prefixed JSON header, then the raw array payload.  Round-trips
are bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .field import VoxelField
from .lipnet import LipLayer, LipschitzNet

CHECKPOINT_MAGIC = b"LRF1"
CHECKPOINT_VERSION = 1


@dataclass
class Camera:
    """Pinhole camera with a 3x4 camera-to-world rigid pose."""

    width: int
    height: int
    focal: float
    cx: float
    cy: float
    pose: np.ndarray  # (3, 4), [R | t]

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        if self.pose.shape != (3, 4):
            raise ValueError("pose must be a 3x4 matrix")
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be at least 1")

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:, :3]

    @property
    def position(self) -> np.ndarray:
        return self.pose[:, 3]

    @property
    def viewing_axis(self) -> np.ndarray:
        return self.pose[:, 2]

    def check_rotation(self, tol: float = 1e-4):
        r = self.rotation
        err = np.abs(r @ r.T - np.eye(3)).max()
        if err > tol:
            raise ValueError(f"non-orthonormal rotation (error {err:.2e})")


@dataclass
class SceneDataset:
    """Posed views with optional index-aligned stylized counterparts."""

    cameras: list
    images: list
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    stylized: list | None = None

    @property
    def n_views(self) -> int:
        return len(self.cameras)


def read_image(path) -> np.ndarray:
    """Load an 8-bit PNG or binary PPM as (H, W, 3) floats in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing image: {path}")
    suffix = path.suffix.lower()
    if suffix == ".png":
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
        return arr / 255.0
    if suffix in (".ppm", ".pnm"):
        return _read_ppm(path)
    raise ValueError(f"unsupported image format: {path.suffix}")


def write_image(image: np.ndarray, path) -> None:
    """Quantize to 8 bits (round half up) and write PNG or binary PPM."""
    path = Path(path)
    data = quantize_u8(image)
    suffix = path.suffix.lower()
    if suffix == ".png":
        Image.fromarray(data, mode="RGB").save(path)
    elif suffix in (".ppm", ".pnm"):
        _write_ppm(data, path)
    else:
        raise ValueError(f"unsupported image format: {path.suffix}")


def quantize_u8(image: np.ndarray) -> np.ndarray:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8)


def _read_ppm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise ValueError("unsupported image format: not a binary PPM")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("only 8-bit PPM is supported")
    pos += 1  # single whitespace after maxval
    pixels = np.frombuffer(raw, dtype=np.uint8, count=width * height * 3, offset=pos)
    return pixels.reshape(height, width, 3).astype(np.float64) / 255.0


def _write_ppm(data: np.ndarray, path: Path) -> None:
    header = f"P6\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + data.tobytes())


def load_scene(path) -> SceneDataset:
    """Load a scene directory into memory, pixels normalized to [0, 1]."""
    root = Path(path)
    manifest_path = root / "scene.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"corrupt manifest: {exc}") from exc
    try:
        width = int(manifest["width"])
        height = int(manifest["height"])
        focal = float(manifest["focal"])
        cx = float(manifest["cx"])
        cy = float(manifest["cy"])
        bounds_min = np.asarray(manifest["bounds_min"], dtype=np.float64)
        bounds_max = np.asarray(manifest["bounds_max"], dtype=np.float64)
        frames = manifest["frames"]
    except KeyError as exc:
        raise ValueError(f"corrupt manifest: missing field {exc}") from exc

    cameras, images = [], []
    for frame in frames:
        pose = np.asarray(frame["transform"], dtype=np.float64).reshape(3, 4)
        cam = Camera(width=width, height=height, focal=focal, cx=cx, cy=cy, pose=pose)
        cam.check_rotation(tol=1e-4)
        img = read_image(root / frame["file"])
        if img.shape != (height, width, 3):
            raise ValueError(
                f"image size mismatch: {frame['file']} is {img.shape[1]}x{img.shape[0]}, "
                f"manifest says {width}x{height}"
            )
        cameras.append(cam)
        images.append(img)

    stylized = None
    if manifest.get("stylized_dir"):
        sty_root = root / manifest["stylized_dir"]
        stylized = []
        for frame in frames:
            img = read_image(sty_root / frame["file"])
            if img.shape != (height, width, 3):
                raise ValueError(f"image size mismatch in stylized view {frame['file']}")
            stylized.append(img)

    return SceneDataset(
        cameras=cameras,
        images=images,
        bounds_min=bounds_min,
        bounds_max=bounds_max,
        stylized=stylized,
    )


def save_scene_manifest(path, width, height, focal, cx, cy, bounds_min, bounds_max,
                        files, transforms, stylized_dir=None) -> None:
    frames = [
        {"file": f, "transform": [float(x) for x in np.asarray(t).reshape(12)]}
        for f, t in zip(files, transforms)
    ]
    manifest = {
        "width": int(width),
        "height": int(height),
        "focal": float(focal),
        "cx": float(cx),
        "cy": float(cy),
        "bounds_min": [float(x) for x in bounds_min],
        "bounds_max": [float(x) for x in bounds_max],
        "frames": frames,
    }
    if stylized_dir is not None:
        manifest["stylized_dir"] = stylized_dir
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


@dataclass
class Checkpoint:
    """Serializable training state for either pipeline stage."""

    stage: str  # "recon" | "liprf"
    field: VoxelField
    net: LipschitzNet | None
    config: dict
    seed: int


def _dtype_tag(arr: np.ndarray) -> str:
    return np.dtype(arr.dtype).newbyteorder("<").str


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write a checkpoint; save -> load -> save is byte-identical."""
    arrays: list[tuple[str, np.ndarray]] = []

    def put(name, arr):
        arrays.append((name, np.ascontiguousarray(arr)))

    fld = ckpt.field
    put("field.density", fld.density)
    put("field.sh", fld.sh)
    put("field.bounds_min", fld.bounds_min)
    put("field.bounds_max", fld.bounds_max)
    put("field.v", fld.v)

    net_meta = None
    if ckpt.net is not None:
        net = ckpt.net
        net_meta = {
            "activation": net.activation,
            "b_sq": net.b_sq,
            "n_layers": len(net.layers),
            "k": [float(layer.K) for layer in net.layers],
            "has_bias": [layer.bias is not None for layer in net.layers],
        }
        for i, layer in enumerate(net.layers):
            put(f"net.w{i}", layer.W)
            put(f"net.u{i}", layer.u)
            put(f"net.v{i}", layer.v)
            if layer.bias is not None:
                put(f"net.b{i}", layer.bias)

    header = {
        "stage": ckpt.stage,
        "seed": int(ckpt.seed),
        "config": ckpt.config,
        "field": {"resolution": list(fld.resolution)},
        "net": net_meta,
        "arrays": [[name, _dtype_tag(a), list(a.shape)] for name, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version mismatch: {version}")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    arrays = {}
    for name, dtype, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = np.dtype(dtype).itemsize * count
        if offset + nbytes > len(raw):
            raise ValueError("truncated checkpoint")
        arrays[name] = np.frombuffer(raw, dtype=np.dtype(dtype), count=count,
                                     offset=offset).reshape(shape).copy()
        offset += nbytes

    fld = VoxelField(
        resolution=tuple(header["field"]["resolution"]),
        bounds_min=arrays["field.bounds_min"],
        bounds_max=arrays["field.bounds_max"],
        density=arrays["field.density"],
        sh=arrays["field.sh"],
        v=arrays["field.v"],
    )
    net = None
    meta = header["net"]
    if meta is not None:
        layers = []
        for i in range(meta["n_layers"]):
            layers.append(
                LipLayer(
                    W=arrays[f"net.w{i}"],
                    K=meta["k"][i],
                    u=arrays[f"net.u{i}"],
                    v=arrays[f"net.v{i}"],
                    bias=arrays.get(f"net.b{i}") if meta["has_bias"][i] else None,
                )
            )
        net = LipschitzNet(layers=layers, activation=meta["activation"], b_sq=meta["b_sq"])
    return Checkpoint(stage=header["stage"], field=fld, net=net,
                      config=header["config"], seed=header["seed"])
