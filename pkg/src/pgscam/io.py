"""File formats: PLY 1.0, SemanticKITTI scans, CSV tables and key = value configs."""

from __future__ import annotations

import csv
import logging
import os

import numpy as np

from .geometry import PointCloud

log = logging.getLogger(__name__)

PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
LABEL_NAMES = ("label", "class", "scalar_label")
COLOR_NAMES = ("red", "green", "blue", "alpha")

# class palette for label-only exports
PALETTE = np.array([
    [128, 64, 128],  # ground
    [245, 150, 100],  # car
    [255, 240, 150],  # pole
    [0, 175, 0],  # vegetation
    [0, 200, 255],  # building
])


class PlyError(ValueError):
    pass


class FormatError(ValueError):
    pass


def colormap(values) -> np.ndarray:
    """Blue -> green -> red ramp over [0, 1]; (N, 3) uint8."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    lo = np.clip(1.0 - 2.0 * v, 0.0, 1.0)  # blue weight below 0.5
    hi = np.clip(2.0 * v - 1.0, 0.0, 1.0)  # red weight above 0.5
    mid = 1.0 - lo - hi
    rgb = np.stack([hi, mid, lo], axis=1) * 255.0
    return np.floor(rgb + 0.5).astype(np.uint8)


# ----------------------------------------------------------------------------
# PLY


def _parse_header(fh):
    """Returns (format, elements, header_line_count). Each element is
    (name, count, [(prop_name, dtype or ('list', count_dtype, item_dtype))])."""
    first = fh.readline()
    if first.rstrip(b"\r\n") != b"ply":
        raise PlyError("line 1: missing 'ply' magic")
    fmt = None
    elements = []
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise PlyError(f"line {lineno}: unexpected end of file before end_header")
        words = raw.decode("ascii", errors="replace").split()
        if not words or words[0] in ("comment", "obj_info"):
            continue
        key = words[0]
        if key == "format":
            if len(words) != 3 or words[2] != "1.0":
                raise PlyError(f"line {lineno}: bad format line")
            if words[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise PlyError(f"line {lineno}: unknown format {words[1]!r}")
            fmt = words[1]
        elif key == "element":
            if len(words) != 3 or not words[2].isdigit():
                raise PlyError(f"line {lineno}: bad element line")
            elements.append((words[1], int(words[2]), []))
        elif key == "property":
            if not elements:
                raise PlyError(f"line {lineno}: property before any element")
            if len(words) == 5 and words[1] == "list":
                if words[2] not in PLY_TYPES or words[3] not in PLY_TYPES:
                    raise PlyError(f"line {lineno}: unknown list types")
                elements[-1][2].append((words[4], ("list", PLY_TYPES[words[2]], PLY_TYPES[words[3]])))
            elif len(words) == 3:
                if words[1] not in PLY_TYPES:
                    raise PlyError(f"line {lineno}: unknown property type {words[1]!r}")
                elements[-1][2].append((words[2], PLY_TYPES[words[1]]))
            else:
                raise PlyError(f"line {lineno}: bad property line")
        elif key == "end_header":
            break
        else:
            raise PlyError(f"line {lineno}: unexpected keyword {key!r}")
    if fmt is None:
        raise PlyError("header has no format line")
    return fmt, elements, lineno


def _read_binary_element(fh, count, props, endian):
    if all(not isinstance(t, tuple) for _, t in props):
        dtype = np.dtype([(name, endian + t) for name, t in props])
        buf = fh.read(dtype.itemsize * count)
        if len(buf) != dtype.itemsize * count:
            raise PlyError("binary body shorter than declared element count")
        arr = np.frombuffer(buf, dtype=dtype, count=count)
        return {name: arr[name].astype(np.float64) for name, _ in props}
    cols = {name: np.empty(count) for name, t in props if not isinstance(t, tuple)}
    for i in range(count):
        for name, t in props:
            if isinstance(t, tuple):
                cdt = np.dtype(endian + t[1])
                n = int(np.frombuffer(fh.read(cdt.itemsize), dtype=cdt)[0])
                fh.read(np.dtype(t[2]).itemsize * n)
            else:
                dt = np.dtype(endian + t)
                b = fh.read(dt.itemsize)
                if len(b) != dt.itemsize:
                    raise PlyError("binary body shorter than declared element count")
                cols[name][i] = np.frombuffer(b, dtype=dt)[0]
    return cols


def _read_ascii_element(fh, count, props, lineno):
    cols = {name: np.empty(count) for name, t in props if not isinstance(t, tuple)}
    for i in range(count):
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise PlyError(f"line {lineno}: expected {count} rows, file ended after {i}")
        tokens = raw.split()
        pos = 0
        try:
            for name, t in props:
                if isinstance(t, tuple):
                    pos += 1 + int(tokens[pos])
                else:
                    cols[name][i] = float(tokens[pos])
                    pos += 1
        except (IndexError, ValueError) as exc:
            raise PlyError(f"line {lineno}: malformed row ({exc})") from None
    return cols, lineno


def read_ply_columns(path) -> dict[str, np.ndarray]:
    """All scalar vertex properties as float64 columns."""
    with open(path, "rb") as fh:
        fmt, elements, lineno = _parse_header(fh)
        endian = "<" if fmt == "binary_little_endian" else ">"
        for name, count, props in elements:
            for pname, t in props:
                if isinstance(t, tuple) and name == "vertex":
                    log.warning("skipping list property %r of vertex element", pname)
            if fmt == "ascii":
                cols, lineno = _read_ascii_element(fh, count, props, lineno)
            else:
                cols = _read_binary_element(fh, count, props, endian)
            if name == "vertex":
                return cols
    raise PlyError("file has no vertex element")


def load_ply(path, num_classes: int | None = None) -> PointCloud:
    cols = read_ply_columns(path)
    missing = [c for c in "xyz" if c not in cols]
    if missing:
        raise PlyError(f"vertex element lacks required properties {missing}")
    coords = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    labels = None
    for name in LABEL_NAMES:
        if name in cols:
            labels = cols[name].astype(np.int64)
            break
    extra = [n for n in cols if n not in ("x", "y", "z") + LABEL_NAMES + COLOR_NAMES]
    features = np.stack([cols[n] for n in extra], axis=1) if extra else None
    return PointCloud(coords, features, labels, num_classes)


def write_ply(path, cloud: PointCloud, saliency=None, binary: bool = False, comment: str | None = None) -> None:
    """Write x, y, z, red, green, blue and, when available, label and saliency.

    Colors come from the saliency colormap if saliency is given, otherwise
    from the class palette, otherwise mid gray. ASCII output prints doubles
    with 17 significant digits so coordinates round-trip exactly.
    """
    n = len(cloud)
    if saliency is not None:
        saliency = np.asarray(saliency, dtype=np.float64).reshape(-1)
        if saliency.shape[0] != n:
            raise ValueError(f"saliency has {saliency.shape[0]} values for {n} points")
        rgb = colormap(saliency)
    elif cloud.labels is not None:
        rgb = PALETTE[cloud.labels % len(PALETTE)].astype(np.uint8)
    else:
        rgb = np.full((n, 3), 128, dtype=np.uint8)
    props = [("x", "double", "f8"), ("y", "double", "f8"), ("z", "double", "f8"),
             ("red", "uchar", "u1"), ("green", "uchar", "u1"), ("blue", "uchar", "u1")]
    if cloud.labels is not None:
        props.append(("label", "int", "i4"))
    if saliency is not None:
        props.append(("saliency", "double", "f8"))
    lines = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    if comment:
        lines.append(f"comment {comment}")
    lines.append(f"element vertex {n}")
    lines += [f"property {ptype} {name}" for name, ptype, _ in props]
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")
    columns = [cloud.coords[:, 0], cloud.coords[:, 1], cloud.coords[:, 2], rgb[:, 0], rgb[:, 1], rgb[:, 2]]
    if cloud.labels is not None:
        columns.append(cloud.labels)
    if saliency is not None:
        columns.append(saliency)
    with open(path, "wb") as fh:
        fh.write(header)
        if binary:
            rec = np.empty(n, dtype=[(name, "<" + code) for name, _, code in props])
            for (name, _, _), col in zip(props, columns):
                rec[name] = col
            fh.write(rec.tobytes())
            return
        fmts = ["{:.17g}" if code == "f8" else "{:d}" for _, _, code in props]
        out = []
        for row in zip(*(c.tolist() for c in columns)):
            out.append(" ".join(f.format(v) for f, v in zip(fmts, row)))
        fh.write(("\n".join(out) + "\n").encode("ascii"))


# ----------------------------------------------------------------------------
# SemanticKITTI


def load_kitti(bin_path, label_path=None) -> PointCloud:
    """Velodyne scan (float32 x, y, z, intensity) with optional ``.label``
    file whose low 16 bits hold the semantic class."""
    raw = open(bin_path, "rb").read()
    if len(raw) % 16:
        raise FormatError(f"{bin_path}: size {len(raw)} bytes is not a multiple of 16")
    scan = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    labels = None
    if label_path is not None:
        lab = open(label_path, "rb").read()
        expected = 4 * scan.shape[0]
        if len(lab) != expected:
            raise FormatError(f"{label_path}: expected {expected} bytes, got {len(lab)}")
        labels = (np.frombuffer(lab, dtype="<u4") & 0xFFFF).astype(np.int64)
    return PointCloud(scan[:, :3], scan[:, 3:4], labels)


# ----------------------------------------------------------------------------
# tables and configs


def fmt_float(x) -> str:
    x = float(x)
    return "nan" if x != x else repr(x)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def read_config(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def write_config(path, values: dict) -> None:
    with open(path, "w") as fh:
        for key in sorted(values):
            fh.write(f"{key} = {values[key]}\n")


def scene_files(data_dir) -> list[str]:
    names = sorted(f for f in os.listdir(data_dir) if f.startswith("scene_") and f.endswith(".ply"))
    return [os.path.join(data_dir, f) for f in names]
