"""Plain-text kernel disposition files."""

from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from kpconvx.errors import ContractError, SchemaError
from kpconvx.services.kernelgeo import KernelDisposition, build_disposition


def save_disposition(d: KernelDisposition, path: str | Path) -> None:
    """
    Write ``K s r sigma``, the shell counts, then one ``x y z shell_index`` line per point.

    Values use 9 significant digits.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = pd.DataFrame(d.positions, columns=["x", "y", "z"])
    rows["shell"] = d.shell_index
    with path.open("w", encoding="utf-8", newline="\n") as handle:
        handle.write(f"{d.K} {d.num_shells} {d.radius:.9g} {d.sigma:.9g}\n")
        handle.write(" ".join(str(c) for c in d.shell_counts) + "\n")
        rows.to_csv(handle, sep=" ", header=False, index=False, float_format="%.9g", lineterminator="\n")


def load_disposition(path: str | Path) -> KernelDisposition:
    """
    Read a disposition file written by :func:`save_disposition`.

    Raises:
        SchemaError: when the header, the counts or the point lines are inconsistent
    """
    path = Path(path)
    with path.open("r", encoding="utf-8") as handle:
        head = handle.readline().split()
        counts_line = handle.readline().split()
    try:
        K, s = int(head[0]), int(head[1])
        r, sigma = float(head[2]), float(head[3])
        shell_counts = [int(c) for c in counts_line]
    except (IndexError, ValueError) as exc:
        raise SchemaError(f"{path}: malformed disposition header") from exc
    if len(shell_counts) != s + 1 or sum(shell_counts) != K:
        raise SchemaError(f"{path}: shell counts {shell_counts} do not match K={K} with {s} shells")

    rows = pd.read_csv(path, sep=r"\s+", header=None, names=["x", "y", "z", "shell"], skiprows=2, engine="python")
    if len(rows) != K or rows.isna().to_numpy().any():
        raise SchemaError(f"{path}: expected {K} kernel points, found {len(rows.dropna())}")
    expected_shells = np.repeat(np.arange(s + 1), shell_counts)
    if not np.array_equal(rows["shell"].to_numpy(dtype=np.int64), expected_shells):
        raise SchemaError(f"{path}: shell indices do not follow the shell counts")
    try:
        d = build_disposition(rows[["x", "y", "z"]].to_numpy(dtype=np.float64), shell_counts, r)
    except ContractError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    return replace(d, sigma=sigma)
