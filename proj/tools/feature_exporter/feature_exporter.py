"""Backbone feature export interface.

Produces the manifest and tensors consumed by `mcbm`. Only the interface and
split rule live here; backbone inference is not implemented.
"""

from __future__ import annotations

import argparse
import dataclasses
import pathlib
import sys


@dataclasses.dataclass(frozen=True)
class ExportSpec:
    backbone: str
    dataset_dir: pathlib.Path
    out_dir: pathlib.Path
    pooled_layer: str
    spatial_layer: str | None = None
    val_fraction: float = 0.10
    test_fraction: float = 0.0
    batch_size: int = 64
    device: str = "cpu"

    def __post_init__(self) -> None:
        if not 0.0 <= self.val_fraction <= 1.0 or not 0.0 <= self.test_fraction <= 1.0:
            raise ValueError("split fractions must lie in [0, 1]")
        if self.val_fraction + self.test_fraction > 1.0:
            raise ValueError("split fractions must sum to at most 1")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")


def val_count(train_pool: int, fraction: float = 0.10) -> int:
    """Number of validation samples carved from a training pool of `train_pool`."""
    return int(round(fraction * train_pool))


def export(spec: ExportSpec) -> pathlib.Path:
    """Writes manifest.json, features.npy, optional spatial.npy, labels.npy,
    head_weights.npy and head_bias.npy under `spec.out_dir`; returns the
    manifest path."""
    raise NotImplementedError("backbone feature export is not implemented")


def main(argv: list[str] | None = None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--backbone", required=True)
    p.add_argument("--dataset-dir", required=True, type=pathlib.Path)
    p.add_argument("--out", required=True, type=pathlib.Path)
    p.add_argument("--pooled-layer", required=True)
    p.add_argument("--spatial-layer")
    p.add_argument("--val-fraction", type=float, default=0.10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--device", default="cpu")
    a = p.parse_args(argv)
    spec = ExportSpec(a.backbone, a.dataset_dir, a.out, a.pooled_layer, a.spatial_layer,
                      a.val_fraction, 0.0, a.batch_size, a.device)
    try:
        print(export(spec))
    except NotImplementedError as e:
        print(f"feature_exporter: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
