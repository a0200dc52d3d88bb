"""File formats: PFM and PPM/PGM grids, key=value text, CSV emitters.

PFM files are written little-endian (scale -1.0) with bottom-up scanline
order, "Pf" for one channel and "PF" for three.  PPM/PGM are binary 8-bit
with maxval 255; float images in [0, 1] are rounded on write.  Calibration
and poses serialize as plain ``key = value`` lines with row-major
matrices.
"""

from __future__ import annotations

import os

import numpy as np

from .camera import Intrinsics, RigidTransform
from .errors import InvalidConfig
from .grids import ImageGrid, InverseDepthMap, NormalMap
from .synth import OracleInstance, baseline_transform

IMAGE_FILES = {
    "left_t": "left_t.ppm",
    "right_t": "right_t.ppm",
    "left_prev": "left_prev.ppm",
    "right_prev": "right_prev.ppm",
}
DINV_FILE = "dinv.pfm"
NORMAL_FILE = "normal.pfm"
POSE_FILE = "pose.txt"
CALIB_FILE = "calib.txt"
TRACE_FILE = "loss_trace.csv"
METRICS_FILE = "metrics.csv"


# ---------------------------------------------------------------- PFM ----

def write_pfm(path, array):
    """Write a (H, W) or (H, W, 3) float array as PFM."""
    array = np.asarray(array)
    if array.ndim == 3 and array.shape[2] == 1:
        array = array[:, :, 0]
    if array.ndim == 2:
        header = b"Pf"
    elif array.ndim == 3 and array.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError("PFM supports 1- or 3-channel grids")
    data = np.flipud(array).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{array.shape[1]} {array.shape[0]}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(data.tobytes())


def read_pfm(path):
    """Read a PFM file into a float64 (H, W) or (H, W, 3) array."""
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise InvalidConfig(f"{path}: not a PFM file")
        dims = fh.readline().split()
        width, height = int(dims[0]), int(dims[1])
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        count = width * height * channels
        data = np.frombuffer(fh.read(count * 4), dtype=dtype, count=count)
    data = data.reshape(height, width, channels)
    data = np.flipud(data).astype(float)
    return data[:, :, 0] if channels == 1 else data


# ---------------------------------------------------------- PPM / PGM ----

def write_ppm(path, image):
    """Write a float (H, W, 3) image in [0, 1] as binary 8-bit PPM."""
    image = np.asarray(image)
    if isinstance(image, np.ndarray) and image.ndim != 3:
        raise ValueError("PPM requires a 3-channel image")
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(quantized.tobytes())


def write_pgm(path, image):
    """Write a float (H, W) image in [0, 1] as binary 8-bit PGM."""
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[:, :, 0]
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(quantized.tobytes())


def _read_pnm_header(fh):
    fields = []
    while len(fields) < 3:
        line = fh.readline()
        if not line:
            raise InvalidConfig("truncated PNM header")
        text = line.split(b"#", 1)[0]
        fields.extend(text.split())
    return int(fields[0]), int(fields[1]), int(fields[2])


def read_pnm(path):
    """Read a binary PPM (P6) or PGM (P5) into floats in [0, 1]."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic == b"P6":
            channels = 3
        elif magic == b"P5":
            channels = 1
        else:
            raise InvalidConfig(f"{path}: unsupported PNM magic {magic!r}")
        width, height, maxval = _read_pnm_header(fh)
        raw = np.frombuffer(
            fh.read(width * height * channels), dtype=np.uint8
        )
    data = raw.reshape(height, width, channels).astype(float) / float(maxval)
    return data[:, :, 0] if channels == 1 else data


# ------------------------------------------------------ key=value text ----

def write_keyvalues(path, pairs):
    with open(path, "w") as fh:
        for key, value in pairs.items():
            if isinstance(value, (list, tuple, np.ndarray)):
                value = " ".join(repr(float(v)) for v in np.ravel(value))
            fh.write(f"{key} = {value}\n")


def read_keyvalues(path):
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise InvalidConfig(f"{path}:{lineno}: expected key = value")
            key, value = text.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_calib(path, intrinsics: Intrinsics, width, height, baseline_m):
    write_keyvalues(
        path,
        {
            "fx": repr(intrinsics.fx),
            "fy": repr(intrinsics.fy),
            "cx": repr(intrinsics.cx),
            "cy": repr(intrinsics.cy),
            "width": width,
            "height": height,
            "baseline": repr(float(baseline_m)),
        },
    )


def read_calib(path):
    kv = read_keyvalues(path)
    try:
        intr = Intrinsics(
            fx=float(kv["fx"]),
            fy=float(kv["fy"]),
            cx=float(kv["cx"]),
            cy=float(kv["cy"]),
        )
        return intr, int(kv["width"]), int(kv["height"]), float(kv["baseline"])
    except KeyError as exc:
        raise InvalidConfig(f"{path}: missing calibration key {exc}") from exc


def write_pose(path, transform: RigidTransform):
    rt = np.hstack([transform.rotation, transform.translation[:, None]])
    write_keyvalues(path, {"xi": transform.xi, "matrix": rt.ravel()})


def read_pose(path) -> RigidTransform:
    kv = read_keyvalues(path)
    if "xi" in kv:
        xi = np.array(kv["xi"].split(), dtype=float)
        if xi.size != 6:
            raise InvalidConfig(f"{path}: pose twist must have 6 entries")
        return RigidTransform.from_xi(xi)
    if "matrix" in kv:
        m = np.array(kv["matrix"].split(), dtype=float)
        if m.size != 12:
            raise InvalidConfig(f"{path}: pose matrix must be 3x4 row-major")
        m = m.reshape(3, 4)
        return RigidTransform.from_rt(m[:, :3], m[:, 3])
    raise InvalidConfig(f"{path}: pose file needs an 'xi' or 'matrix' key")


# -------------------------------------------------- instance directories ----

def write_instance(directory, instance: OracleInstance):
    """Write the four images, ground-truth maps, pose and calibration."""
    os.makedirs(directory, exist_ok=True)
    for attr, name in IMAGE_FILES.items():
        write_ppm(os.path.join(directory, name), getattr(instance, attr).data)
    if instance.gt_dinv is not None:
        write_pfm(os.path.join(directory, DINV_FILE), instance.gt_dinv.values)
    if instance.gt_normal is not None:
        write_pfm(
            os.path.join(directory, NORMAL_FILE), instance.gt_normal.vectors
        )
    if instance.pose is not None:
        write_pose(os.path.join(directory, POSE_FILE), instance.pose)
    write_calib(
        os.path.join(directory, CALIB_FILE),
        instance.intrinsics,
        instance.width,
        instance.height,
        -instance.baseline.translation[0],
    )


def read_instance(directory) -> OracleInstance:
    """Load an instance directory written by :func:`write_instance`."""
    intr, width, height, baseline_m = read_calib(
        os.path.join(directory, CALIB_FILE)
    )
    images = {}
    for attr, name in IMAGE_FILES.items():
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            raise InvalidConfig(f"instance is missing {name}")
        data = read_pnm(path)
        if data.ndim == 2:
            data = np.repeat(data[:, :, None], 3, axis=2)
        if data.shape[:2] != (height, width):
            raise InvalidConfig(f"{name} does not match the calibration size")
        images[attr] = ImageGrid(data)

    def optional(name, loader):
        path = os.path.join(directory, name)
        return loader(path) if os.path.exists(path) else None

    gt_dinv = optional(DINV_FILE, lambda p: InverseDepthMap(read_pfm(p)))
    gt_normal = optional(
        NORMAL_FILE,
        lambda p: NormalMap(_renormalize_normals(read_pfm(p))),
    )
    pose = optional(POSE_FILE, read_pose)
    return OracleInstance(
        intrinsics=intr,
        baseline=baseline_transform(baseline_m),
        gt_dinv=gt_dinv,
        gt_normal=gt_normal,
        pose=pose,
        **images,
    )


def _renormalize_normals(vectors):
    # repair float32 quantization from the PFM round trip
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    return vectors / np.where(norms > 0, norms, 1.0)


# ------------------------------------------------------------------ CSV ----

def write_loss_trace_csv(path, trace):
    with open(path, "w") as fh:
        fh.write("iter,L_P,L_DN,L_N,L_NS,L_DC,L_NC,total,lr\n")
        for row in trace:
            values = ",".join(repr(v) for v in row.values)
            fh.write(
                f"{row.iteration},{values},{row.total!r},{row.learning_rate!r}\n"
            )


def write_metrics_csv(path, depth=None, normal=None):
    names, values = [], []
    if depth is not None:
        names.extend(depth.FIELDS)
        values.extend(depth.as_tuple())
    if normal is not None:
        names.extend(normal.FIELDS)
        values.extend(normal.as_tuple())
    with open(path, "w") as fh:
        fh.write(",".join(names) + "\n")
        fh.write(",".join(repr(v) for v in values) + "\n")
