"""
Snapshot Sinks

Destinations for the snapshots a simulation emits:
- MemorySink: keeps snapshots in a list (tests, identification)
- CsvFrameSink: writes ``frame_%05d.csv`` files
- LoggingSink: logs a one-line summary per frame
- CompositeSink: fans out to several sinks

Usage:
    from mpmflow.sinks import create_sink

    sink = create_sink({"type": "csv", "out_dir": "out/frames"})
    Simulator(config, materials).run(state, sink=sink)
"""

import logging
import os
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from .core import Dual
from .engine import Snapshot

FRAME_PATTERN = "frame_%05d.csv"
FRAME_HEADER = "id,x,y,z,vx,vy,vz,mass"


class FrameFormatError(ValueError):
    """Raised when a frame CSV cannot be parsed."""
    pass


class SnapshotSink(ABC):
    """Protocol for snapshot consumers."""

    @abstractmethod
    def emit(self, snapshot: Snapshot):
        """Consume one snapshot."""
        pass

    def close(self):
        """Flush and release resources. Called once at the end of a run."""
        pass


class MemorySink(SnapshotSink):
    """Collects snapshots in memory."""

    def __init__(self):
        self.snapshots: List[Snapshot] = []

    def emit(self, snapshot: Snapshot):
        self.snapshots.append(snapshot)

    def __len__(self) -> int:
        return len(self.snapshots)


class CsvFrameSink(SnapshotSink):
    """
    Writes one CSV per snapshot with 17 significant digits, enough to
    round-trip float64 exactly.
    """

    def __init__(self, out_dir: Union[str, Path]):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.written: List[Path] = []
        self.logger = logging.getLogger("mpmflow.sinks")

    def emit(self, snapshot: Snapshot):
        path = self.out_dir / (FRAME_PATTERN % snapshot.frame)
        table = np.column_stack([
            snapshot.ids.astype(np.float64),
            snapshot.positions,
            snapshot.velocities,
            snapshot.mass,
        ])
        with open(path, "w") as f:
            f.write(FRAME_HEADER + "\n")
            for row_id, row in zip(snapshot.ids, table):
                f.write(str(int(row_id)) + "," + ",".join("%.17g" % value for value in row[1:]))
                f.write("\n")
        self.written.append(path)

    def close(self):
        self.logger.info(f"Wrote {len(self.written)} frames to {self.out_dir}")


class LoggingSink(SnapshotSink):
    """Logs centroid and speed statistics for every snapshot."""

    def __init__(self, level: int = logging.DEBUG):
        self.level = level
        self.logger = logging.getLogger("mpmflow.sinks")
        self.count = 0

    def emit(self, snapshot: Snapshot):
        self.count += 1
        if len(snapshot.mass) == 0:
            return
        centroid = np.average(snapshot.positions, axis=0, weights=snapshot.mass)
        speed = float(np.max(np.linalg.norm(snapshot.velocities, axis=-1)))
        self.logger.log(
            self.level,
            f"frame {snapshot.frame} step {snapshot.step} t={snapshot.time:.5f}s "
            f"centroid={np.round(centroid, 5).tolist()} max_speed={speed:.4g}",
        )


class CompositeSink(SnapshotSink):
    """
    Forwards every snapshot to each child sink in order.

    Usage:
        sink = CompositeSink([MemorySink(), CsvFrameSink("out")])
    """

    def __init__(self, sinks: List[SnapshotSink]):
        self.sinks = sinks

    def emit(self, snapshot: Snapshot):
        for sink in self.sinks:
            sink.emit(snapshot)

    def close(self):
        for sink in self.sinks:
            sink.close()


def create_sink(config: Dict[str, Any]) -> SnapshotSink:
    """
    Factory function to create a sink from config.

    Config examples:
        {"type": "memory"}
        {"type": "csv", "out_dir": "out/frames"}
        {"type": "logging"}
        {"type": "composite", "sinks": [{"type": "memory"}, {"type": "logging"}]}
    """
    sink_type = config.get("type", "memory")

    if sink_type == "memory":
        return MemorySink()
    elif sink_type == "csv":
        if "out_dir" not in config:
            raise ValueError("csv sink requires 'out_dir'")
        return CsvFrameSink(config["out_dir"])
    elif sink_type == "logging":
        return LoggingSink()
    elif sink_type == "composite":
        return CompositeSink([create_sink(child) for child in config.get("sinks", [])])
    else:
        raise ValueError(f"Unknown sink type: {sink_type}")


def read_frame_csv(path: Union[str, Path], frame: Optional[int] = None) -> Snapshot:
    """Load a frame written by ``CsvFrameSink``."""
    path = Path(path)
    with open(path) as f:
        header = f.readline().strip()
    if header != FRAME_HEADER:
        raise FrameFormatError(f"{path}: expected header '{FRAME_HEADER}', got '{header}'")
    try:
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    except ValueError as e:
        raise FrameFormatError(f"{path}: {e}") from e
    if table.shape[1] != 8:
        raise FrameFormatError(f"{path}: expected 8 columns, got {table.shape[1]}")
    if frame is None:
        stem = path.stem.rsplit("_", 1)[-1]
        frame = int(stem) if stem.isdigit() else 0
    return Snapshot(
        frame=frame,
        step=-1,
        time=float("nan"),
        ids=table[:, 0].astype(np.int64),
        x=Dual(table[:, 1:4]),
        v=Dual(table[:, 4:7]),
        mass=table[:, 7].copy(),
    )


def read_frames(frames_dir: Union[str, Path]) -> List[Snapshot]:
    """Load every ``frame_*.csv`` in a directory, ordered by frame number."""
    frames_dir = Path(frames_dir)
    if not frames_dir.is_dir():
        raise FileNotFoundError(f"Frames directory not found: {frames_dir}")
    paths = sorted(p for p in frames_dir.glob("frame_*.csv") if os.path.isfile(p))
    return [read_frame_csv(path) for path in paths]


__all__: List[str] = [
    "FRAME_PATTERN",
    "FRAME_HEADER",
    "FrameFormatError",
    "SnapshotSink",
    "MemorySink",
    "CsvFrameSink",
    "LoggingSink",
    "CompositeSink",
    "create_sink",
    "read_frame_csv",
    "read_frames",
]
