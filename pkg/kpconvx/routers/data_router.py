import argparse
import logging
from pathlib import Path

from kpconvx.models.config import settings
from kpconvx.models.schemas import SyntheticSpec
from kpconvx.services.sampling import grid_subsample
from kpconvx.services.synth import synth_generate
from kpconvx.storage.ply import read_ply, write_ply

logger = logging.getLogger(__name__)


def register(subparsers, common: argparse.ArgumentParser) -> None:
    """Add the ``subsample`` and ``synth`` commands."""
    subsample = subparsers.add_parser("subsample", parents=[common], help="Grid-subsample a PLY cloud")
    subsample.add_argument("--in", dest="input", required=True, help="Input ASCII PLY file")
    subsample.add_argument("--cell", type=float, required=True, help="Cell size, same units as the coordinates")
    subsample.add_argument("--out", required=True, help="Output PLY file")
    subsample.set_defaults(handler=subsample_cloud)

    synth = subparsers.add_parser("synth", parents=[common], help="Write a synthetic dataset as PLY files")
    synth.add_argument("--task", choices=["segmentation", "classification"], default="segmentation")
    synth.add_argument("--classes", type=int, default=4)
    synth.add_argument("--train", type=int, default=16, help="Training clouds")
    synth.add_argument("--val", type=int, default=4, help="Validation clouds")
    synth.add_argument("--points", type=int, default=2048, help="Points per cloud")
    synth.add_argument("--noise", type=float, default=0.0)
    synth.add_argument(
        "--out", default=str(Path(settings.data_dir) / "synth"), help="Output directory (default: KPX_DATA_DIR/synth)"
    )
    synth.set_defaults(handler=write_synthetic)


def subsample_cloud(args: argparse.Namespace) -> int:
    """
    Subsample ``--in`` on a grid of ``--cell`` and write the barycenters to ``--out``.

    Colors are max-pooled per cell and labels take the majority vote.
    """
    cloud = read_ply(args.input)
    sub, _ = grid_subsample(cloud, args.cell)
    colors = sub.features if sub.features.shape[1] == 3 else None
    write_ply(sub, args.out, colors=colors)
    print(f"{cloud.num_points} points -> {sub.num_points} points (cell {args.cell}) written to {args.out}")
    return 0


def write_synthetic(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(
        task=args.task,
        num_classes=args.classes,
        train_clouds=args.train,
        val_clouds=args.val,
        points_per_cloud=args.points,
        noise=args.noise,
        seed=args.seed or 0,
    )
    dataset = synth_generate(spec)
    out = Path(args.out)
    for split, clouds in (("train", dataset.train), ("val", dataset.val)):
        for i, cloud in enumerate(clouds):
            write_ply(cloud, out / split / f"cloud_{i:04d}.ply")
    (out / "classes.txt").write_text("\n".join(dataset.class_names) + "\n", encoding="utf-8")
    print(f"Wrote {len(dataset.train)} train and {len(dataset.val)} val clouds to {out}")
    return 0
