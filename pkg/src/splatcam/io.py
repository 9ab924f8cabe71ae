"""Scene, camera, image and dataset persistence."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np
from PIL import Image

from .cameras import Camera, CameraModel
from .model import SH_COEFFS, ImageBuffer, Scene

log = logging.getLogger(__name__)

N_REST = 45
PLY_PROPERTIES = (
    ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    + [f"f_rest_{i}" for i in range(N_REST)]
    + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
)
_DC_ONLY = [p for p in PLY_PROPERTIES if not p.startswith("f_rest_")]


class PlyFormatError(ValueError):
    pass


# -- PLY ------------------------------------------------------------------------------

def _read_header(fh) -> tuple[str, int, list[tuple[str, str]], int]:
    first = fh.readline()
    if first.strip() != b"ply":
        raise PlyFormatError("not a PLY file (missing 'ply' magic)")
    fmt, count, props, element = None, 0, [], None
    while True:
        line = fh.readline()
        if not line:
            raise PlyFormatError("unexpected end of file inside the PLY header")
        words = line.decode("ascii", errors="replace").split()
        if not words or words[0] in ("comment", "obj_info"):
            continue
        if words[0] == "format":
            fmt = words[1]
        elif words[0] == "element":
            element = words[1]
            if element == "vertex":
                count = int(words[2])
            elif int(words[2]) > 0:
                raise PlyFormatError(f"unsupported PLY element {element!r}")
        elif words[0] == "property" and element == "vertex":
            if words[1] == "list":
                raise PlyFormatError("list properties are not supported")
            props.append((words[2], words[1]))
        elif words[0] == "end_header":
            return fmt, count, props, fh.tell()


_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8"}


def load_ply(path) -> Scene:
    """Read a binary little-endian 3DGS PLY into a :class:`Scene`."""
    path = Path(path)
    with open(path, "rb") as fh:
        fmt, count, props, offset = _read_header(fh)
        if fmt != "binary_little_endian":
            raise PlyFormatError(f"binary_little_endian required, file is {fmt!r}")
        names = [p[0] for p in props]
        if names == PLY_PROPERTIES:
            has_rest = True
        elif names == _DC_ONLY:
            has_rest = False
            log.warning("%s has no f_rest_* properties; higher SH bands set to zero", path)
        else:
            raise PlyFormatError(
                "unexpected vertex properties\n  expected: " + " ".join(PLY_PROPERTIES)
                + "\n  found:    " + " ".join(names))
        try:
            dtype = np.dtype([(n, _PLY_TYPES[t]) for n, t in props])
        except KeyError as exc:
            raise PlyFormatError(f"unsupported property type {exc.args[0]!r}") from None
        payload = fh.read()
    need = dtype.itemsize * count
    if len(payload) < need:
        raise PlyFormatError(
            f"truncated payload: vertex data ends at byte offset {offset + len(payload)}, "
            f"expected {offset + need} ({count} vertices of {dtype.itemsize} bytes)")
    v = np.frombuffer(payload, dtype=dtype, count=count)

    def cols(prefix, n):
        return np.stack([v[f"{prefix}{i}"].astype(np.float64) for i in range(n)], axis=1)

    sh = np.zeros((count, SH_COEFFS, 3))
    sh[:, 0, :] = cols("f_dc_", 3)
    if has_rest:
        # f_rest is channel-major: 15 coefficients of R, then G, then B
        rest = cols("f_rest_", N_REST).reshape(count, 3, SH_COEFFS - 1)
        sh[:, 1:, :] = np.transpose(rest, (0, 2, 1))
    return Scene(
        means=np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64),
        rotations=cols("rot_", 4),
        log_scales=cols("scale_", 3),
        opacity_logits=v["opacity"].astype(np.float64),
        sh_coeffs=sh,
    )


def save_ply(scene: Scene, path) -> None:
    """Write ``scene`` as binary little-endian float32 PLY in the 3DGS layout.

    Values are stored as float32; a scene loaded from PLY round-trips exactly.
    """
    n = len(scene)
    dtype = np.dtype([(name, "<f4") for name in PLY_PROPERTIES])
    v = np.zeros(n, dtype=dtype)
    for i, axis in enumerate("xyz"):
        v[axis] = scene.means[:, i]
    for i in range(3):
        v[f"f_dc_{i}"] = scene.sh_coeffs[:, 0, i]
        v[f"scale_{i}"] = scene.log_scales[:, i]
    rest = np.transpose(scene.sh_coeffs[:, 1:, :], (0, 2, 1)).reshape(n, N_REST)
    for i in range(N_REST):
        v[f"f_rest_{i}"] = rest[:, i]
    v["opacity"] = scene.opacity_logits
    for i in range(4):
        v[f"rot_{i}"] = scene.rotations[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in PLY_PROPERTIES]
    header.append("end_header")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(v.tobytes())


# -- cameras ------------------------------------------------------------------------------

def _orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    if np.linalg.det(out) < 0:
        raise ValueError("rotation is a reflection (negative determinant)")
    return out


def camera_from_dict(d: dict) -> Camera:
    try:
        model = CameraModel.parse(d["model"])
        R = np.asarray(d.get("rotation", np.eye(3).ravel()), dtype=np.float64)
        t = np.asarray(d.get("translation", np.zeros(3)), dtype=np.float64)
        width, height = int(d["width"]), int(d["height"])
    except KeyError as exc:
        raise ValueError(f"camera entry is missing field {exc.args[0]!r}") from None
    if R.size != 9 or t.size != 3:
        raise ValueError("rotation needs 9 numbers (row-major) and translation 3")
    R = R.reshape(3, 3)
    dev = float(np.abs(R.T @ R - np.eye(3)).max())
    if dev > 1e-4:
        log.warning("camera rotation is %.2e from orthonormal; re-orthonormalizing", dev)
    if dev > 1e-6:
        R = _orthonormalize(R)
    fov_deg = d.get("fov_max_deg")
    return Camera(
        model=model, width=width, height=height,
        fx=float(d.get("fx", 1.0)), fy=float(d.get("fy", d.get("fx", 1.0))),
        cx=d.get("cx"), cy=d.get("cy"),
        rotation_wc=R, translation_wc=t,
        fov_max=math.radians(90.0 if fov_deg is None else float(fov_deg)),
    )


def camera_to_dict(cam: Camera) -> dict:
    return {
        "model": cam.model.value,
        "width": cam.width,
        "height": cam.height,
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "fov_max_deg": math.degrees(cam.fov_max),
        "rotation": [float(x) for x in cam.rotation_wc.ravel()],
        "translation": [float(x) for x in cam.translation_wc],
    }


def load_cameras(path) -> list[Camera]:
    """Cameras from a JSON document: one camera object, a list of them, or
    ``{"cameras": [...]}``."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict) and "cameras" in data:
        data = data["cameras"]
    if isinstance(data, dict):
        data = [data]
    return [camera_from_dict(d) for d in data]


def save_cameras(cameras, path, extra: list[dict] | None = None) -> None:
    entries = []
    for i, cam in enumerate(cameras):
        d = camera_to_dict(cam)
        if extra is not None:
            d.update(extra[i])
        entries.append(d)
    Path(path).write_text(json.dumps({"cameras": entries}, indent=2))


# -- images -------------------------------------------------------------------------------

def to_bytes(values: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8: clamp, scale by 255, round half to even."""
    return np.rint(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(buffer: ImageBuffer, path, with_alpha: bool = False) -> None:
    path = Path(path)
    ext = path.suffix.lower()
    if ext not in (".png", ".ppm"):
        raise ValueError(f"unknown image extension {ext!r} (use .png or .ppm)")
    rgb = to_bytes(buffer.pixels)
    if not path.parent.exists():
        raise OSError(f"cannot write {path}: directory does not exist")
    if ext == ".ppm":
        h, w = rgb.shape[:2]
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(rgb.tobytes())
        return
    if with_alpha and buffer.alpha is not None:
        rgba = np.concatenate([rgb, to_bytes(buffer.alpha)[..., None]], axis=2)
        Image.fromarray(rgba, "RGBA").save(path)
    else:
        Image.fromarray(rgb, "RGB").save(path)


def read_image(path) -> ImageBuffer:
    img = Image.open(path)
    arr = np.asarray(img.convert("RGBA" if img.mode in ("RGBA", "LA") else "RGB"), dtype=np.float64) / 255.0
    if arr.shape[2] == 4:
        return ImageBuffer(arr[..., :3], alpha=arr[..., 3])
    return ImageBuffer(arr)


# -- datasets -------------------------------------------------------------------------------

def save_dataset(dataset, directory, ground_truth: Scene | None = None, init: Scene | None = None,
                 spec: dict | None = None) -> None:
    """Write ``cameras.json`` + ``images/view_XXX.png`` (RGBA) and optional scenes."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    cams, extra = [], []
    for i, (cam, img) in enumerate(dataset.views):
        name = f"images/view_{i:03d}.png"
        write_image(img, directory / name, with_alpha=True)
        cams.append(cam)
        extra.append({"image": name})
    save_cameras(cams, directory / "cameras.json", extra)
    meta = {"background": [float(x) for x in dataset.background], "holdout_every": dataset.holdout_every}
    if spec is not None:
        meta["spec"] = spec
    (directory / "dataset.json").write_text(json.dumps(meta, indent=2))
    if ground_truth is not None:
        save_ply(ground_truth, directory / "ground_truth.ply")
    if init is not None:
        save_ply(init, directory / "init.ply")


def load_dataset(directory):
    from .optimize import Dataset

    directory = Path(directory)
    data = json.loads((directory / "cameras.json").read_text())
    entries = data["cameras"] if isinstance(data, dict) else data
    meta_path = directory / "dataset.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    views = []
    for d in entries:
        if "image" not in d:
            raise ValueError("dataset camera entries need an 'image' field")
        views.append((camera_from_dict(d), read_image(directory / d["image"])))
    return Dataset(views, background=meta.get("background", (0.0, 0.0, 0.0)),
                   holdout_every=meta.get("holdout_every", 8))
