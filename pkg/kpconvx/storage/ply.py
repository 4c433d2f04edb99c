"""ASCII PLY point cloud files."""

import logging
from pathlib import Path

import numpy as np
import pandas as pd

from kpconvx.errors import SchemaError, UnsupportedFormatError
from kpconvx.services.sampling import StackedCloud

logger = logging.getLogger(__name__)

COLOR_PROPERTIES = ("red", "green", "blue")
LABEL_PROPERTIES = ("label", "class")
_KNOWN = {"x", "y", "z", *COLOR_PROPERTIES, *LABEL_PROPERTIES}


def _read_header(path: Path) -> tuple[int, int, list[str]]:
    """Return (header line count, vertex count, vertex property names)."""
    vertex_count, properties = None, []
    current = None
    with path.open("r", encoding="ascii", errors="replace") as handle:
        first = handle.readline().strip()
        if first != "ply":
            raise SchemaError(f"{path} is not a PLY file (first line '{first}')")
        lines = 1
        for raw in handle:
            lines += 1
            tokens = raw.split()
            if not tokens or tokens[0] in ("comment", "obj_info"):
                continue
            if tokens[0] == "format":
                if len(tokens) < 2 or tokens[1] != "ascii":
                    kind = tokens[1] if len(tokens) > 1 else "unknown"
                    raise UnsupportedFormatError(f"{path} uses the {kind} PLY format, only ascii is supported")
            elif tokens[0] == "element":
                current = tokens[1] if len(tokens) > 1 else None
                if current == "vertex":
                    vertex_count = int(tokens[2])
                elif vertex_count is None:
                    raise SchemaError(f"{path}: element '{current}' precedes the vertex element")
            elif tokens[0] == "property" and current == "vertex":
                if tokens[1] == "list":
                    raise SchemaError(f"{path}: list properties are not allowed on vertices")
                properties.append(tokens[-1])
            elif tokens[0] == "end_header":
                break
        else:
            raise SchemaError(f"{path}: missing end_header")
    if vertex_count is None:
        raise SchemaError(f"{path}: no vertex element")
    return lines, vertex_count, properties


def read_ply(path: str | Path) -> StackedCloud:
    """
    Read an ASCII PLY file as a single-element cloud.

    Colors (``red green blue``) become the features, ``label`` or ``class`` the labels. Other
    vertex properties are skipped with a warning.

    Raises:
        UnsupportedFormatError: for binary PLY files
        SchemaError: for missing coordinates or a truncated vertex list
    """
    path = Path(path)
    header_lines, count, properties = _read_header(path)
    missing = [axis for axis in "xyz" if axis not in properties]
    if missing:
        raise SchemaError(f"{path}: vertex element lacks the {', '.join(missing)} properties")
    skipped = [name for name in properties if name not in _KNOWN]
    if skipped:
        logger.warning("%s: skipping vertex properties %s", path, ", ".join(skipped))

    if count:
        body = pd.read_csv(
            path, sep=r"\s+", header=None, names=properties, skiprows=header_lines, nrows=count, engine="python"
        )
    else:
        body = pd.DataFrame(columns=properties)
    if len(body) < count or body.isna().to_numpy().any():
        complete = len(body.dropna())
        raise SchemaError(f"{path}: expected {count} complete vertex rows, found {complete}")

    try:
        points = body[["x", "y", "z"]].to_numpy(dtype=np.float64)
        colors = [name for name in COLOR_PROPERTIES if name in properties]
        features = body[colors].to_numpy(dtype=np.float64) if len(colors) == 3 else np.zeros((count, 0))
        label_column = next((name for name in LABEL_PROPERTIES if name in properties), None)
        labels = body[label_column].to_numpy(dtype=np.int64) if label_column else None
    except ValueError as exc:
        raise SchemaError(f"{path}: non-numeric vertex values ({exc})") from exc
    return StackedCloud.single(points, features=features, labels=labels)


def write_ply(cloud: StackedCloud, path: str | Path, colors: np.ndarray | None = None) -> None:
    """Write every point of ``cloud`` (all elements) as ASCII PLY, coordinates to 9 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = pd.DataFrame(cloud.points, columns=["x", "y", "z"])
    header = ["ply", "format ascii 1.0", f"element vertex {cloud.num_points}"]
    header += [f"property float {axis}" for axis in "xyz"]
    if colors is not None:
        colors = np.asarray(colors).reshape(cloud.num_points, 3)
        for i, name in enumerate(COLOR_PROPERTIES):
            table[name] = np.clip(np.rint(colors[:, i]), 0, 255).astype(np.int64)
            header.append(f"property uchar {name}")
    if cloud.labels is not None:
        table["label"] = cloud.labels
        header.append("property int label")
    header.append("end_header")
    with path.open("w", encoding="ascii", newline="\n") as handle:
        handle.write("\n".join(header) + "\n")
        table.to_csv(handle, sep=" ", header=False, index=False, float_format="%.9g", lineterminator="\n")
