"""
CSV import/export for trajectories, sensor streams and run tables
"""
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from edgebot.models.geometry import Pose2

# Fixed precision keeps repeated runs byte-identical
FLOAT_FORMAT = "%.9f"

PathLike = Union[str, Path]


def write_frame(df: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def trajectory_frame(t_us: Sequence[int], poses: np.ndarray) -> pd.DataFrame:
    poses = np.asarray(poses, dtype=float).reshape(-1, 3)
    return pd.DataFrame(
        {
            "t_us": np.asarray(t_us, dtype=np.int64),
            "x": poses[:, 0],
            "y": poses[:, 1],
            "theta": poses[:, 2],
        }
    )


def split_trajectory(trajectory: Sequence[Tuple[int, Pose2]]) -> Tuple[np.ndarray, np.ndarray]:
    """(t, Pose2) pairs to timestamp and (N, 3) pose arrays"""
    if not trajectory:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3))
    t = np.array([t for t, _ in trajectory], dtype=np.int64)
    poses = np.array([p.as_array() for _, p in trajectory])
    return t, poses


def write_trajectory_csv(path: PathLike, t_us: Sequence[int], poses: np.ndarray) -> Path:
    """Write `t_us,x,y,theta`"""
    return write_frame(trajectory_frame(t_us, poses), path)


def read_trajectory_csv(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    df = pd.read_csv(path)
    missing = {"t_us", "x", "y", "theta"} - set(df.columns)
    if missing:
        raise ValueError(f"{path}: missing trajectory columns {sorted(missing)}")
    return df["t_us"].to_numpy(dtype=np.int64), df[["x", "y", "theta"]].to_numpy(dtype=float)


def write_odometry_csv(path: PathLike, samples: Iterable) -> Path:
    rows = [(s.t, s.dd, s.dtheta) for s in samples]
    return write_frame(pd.DataFrame(rows, columns=["t_us", "dd", "dtheta"]), path)


def write_rtt_csv(path: PathLike, samples: Iterable) -> Path:
    rows = [(s.t, s.ap_id, s.range) for s in samples]
    return write_frame(pd.DataFrame(rows, columns=["t_us", "ap_id", "range"]), path)


def write_records_csv(path: PathLike, records: List[dict], columns: Sequence[str]) -> Path:
    return write_frame(pd.DataFrame.from_records(records, columns=list(columns)), path)
