"""CSV artifacts: the append-only training log and report tables."""

from pathlib import Path

import pandas as pd

METRIC_COLUMNS = ["epoch", "step", "lr", "loss", "acc"]


class MetricsLog:
    """Append-only ``epoch,step,lr,loss,acc`` log; the header is written once on creation."""

    def __init__(self, path: str | Path, overwrite: bool = True):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if overwrite or not self.path.exists():
            pd.DataFrame(columns=METRIC_COLUMNS).to_csv(self.path, index=False)

    def append(self, row: dict) -> None:
        frame = pd.DataFrame([row], columns=METRIC_COLUMNS)
        frame.to_csv(self.path, mode="a", header=False, index=False, float_format="%.9g")

    def read(self) -> pd.DataFrame:
        return pd.read_csv(self.path)


def write_table(frame: pd.DataFrame, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.9g")
