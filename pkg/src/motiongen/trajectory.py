"""Trajectory container and the mgds/1 JSON-lines dataset format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["Trajectory", "DatasetMeta", "write_dataset", "read_dataset", "DatasetFormatError"]

DATASET_FORMAT = "mgds/1"


class DatasetFormatError(ValueError):
    pass


@dataclass
class Trajectory:
    """Fixed-length sequence of setpoints plus timestep metadata.

    points has shape (T, d); stored datasets use T=64, the model itself
    accepts any T >= 4. Joint-space arms with fewer than 7 joints keep the
    padded columns exactly 0.0.
    """

    points: np.ndarray
    dt: float
    space: str = "cartesian"
    robot: str = "pointmass"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 4:
            raise ValueError(f"points must be (T>=4, d), got {self.points.shape}")
        if self.space not in ("cartesian", "joint"):
            raise ValueError(f"unknown space tag {self.space!r}")

    @property
    def T(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def start(self) -> np.ndarray:
        return self.points[0]

    @property
    def goal(self) -> np.ndarray:
        return self.points[-1]


@dataclass
class DatasetMeta:
    space: str
    d: int
    T: int
    dt: float
    robots: list = field(default_factory=list)


def write_dataset(path, trajectories: list[Trajectory], meta: DatasetMeta) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        header = {
            "format": DATASET_FORMAT,
            "space": meta.space,
            "d": meta.d,
            "T": meta.T,
            "dt": meta.dt,
            "robots": list(meta.robots),
        }
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for tr in trajectories:
            if tr.d != meta.d or tr.T != meta.T:
                raise DatasetFormatError(
                    f"trajectory ({tr.T}, {tr.d}) does not match header ({meta.T}, {meta.d})"
                )
            rec = {"robot": tr.robot, "points": tr.points.tolist()}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_dataset(path) -> tuple[list[Trajectory], DatasetMeta]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line:
            raise DatasetFormatError(f"{path}: empty dataset file")
        header = json.loads(header_line)
        if header.get("format") != DATASET_FORMAT:
            raise DatasetFormatError(f"{path}: unsupported format {header.get('format')!r}")
        meta = DatasetMeta(
            space=header["space"],
            d=int(header["d"]),
            T=int(header["T"]),
            dt=float(header["dt"]),
            robots=list(header.get("robots", [])),
        )
        out = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            rec = json.loads(line)
            pts = np.asarray(rec["points"], dtype=np.float64)
            if pts.shape != (meta.T, meta.d):
                raise DatasetFormatError(
                    f"{path}:{lineno}: record shape {pts.shape} does not match "
                    f"header ({meta.T}, {meta.d})"
                )
            out.append(Trajectory(pts, dt=meta.dt, space=meta.space, robot=rec.get("robot", "")))
    return out, meta
