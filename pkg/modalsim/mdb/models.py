from __future__ import annotations

import logging
from typing import Dict, Iterator, Tuple

import peewee as pw

from modalsim.mdb import BaseModel, FloatListField, db

BATCH_SIZE = 500


class CheckpointRecord(BaseModel):
    checkpoint = pw.IntegerField(primary_key=True)
    time = pw.FloatField()
    step_count = pw.IntegerField()
    probabilities = FloatListField()
    heuristic = pw.BooleanField(default=False)

    def __str__(self):
        return f"<Checkpoint{self.checkpoint} t={self.time}>"

    @property
    def n_paths(self) -> int:
        return len(self.probabilities)


class TrajectoryRecord(BaseModel):
    """One row per (trajectory, checkpoint); path_index is 1-based"""

    trajectory_id = pw.IntegerField(index=True)
    checkpoint = pw.IntegerField(index=True)
    time = pw.FloatField()
    path_index = pw.IntegerField()

    def __str__(self):
        return f"<Trajectory{self.trajectory_id}@{self.checkpoint}>"

    @classmethod
    @db.atomic("EXCLUSIVE")
    def record_ensemble(cls, ensemble):
        cls.clear()
        CheckpointRecord.clear()
        checkpoints = ensemble.timeline.checkpoints
        heuristic = bool(ensemble.timeline.metadata.get("heuristic", False))
        CheckpointRecord.insert_many(
            [
                {
                    "checkpoint": i,
                    "time": cp.time,
                    "step_count": cp.step_count,
                    "probabilities": cp.probabilities.weights.tolist(),
                    "heuristic": heuristic,
                }
                for i, cp in enumerate(checkpoints)
            ]
        ).execute()
        indices = ensemble.path_indices
        rows = (
            {
                "trajectory_id": traj,
                "checkpoint": i,
                "time": cp.time,
                "path_index": int(indices[traj, i]) + 1,
            }
            for traj in range(indices.shape[0])
            for i, cp in enumerate(checkpoints)
        )
        for batch in pw.chunked(rows, BATCH_SIZE):
            cls.insert_many(batch).execute()
        logging.debug(
            f"recorded {indices.shape[0]} trajectories at {len(checkpoints)} checkpoints"
        )

    @classmethod
    def occupation_counts(cls, checkpoint) -> Dict[int, int]:
        query = (
            cls.select(cls.path_index, pw.fn.COUNT(cls.id).alias("n"))
            .where(cls.checkpoint == checkpoint)
            .group_by(cls.path_index)
            .order_by(cls.path_index)
        )
        return {row["path_index"]: row["n"] for row in query.dicts()}

    @classmethod
    def joint_counts(cls, first, second) -> Dict[Tuple[int, int], int]:
        later = cls.alias()
        query = (
            cls.select(
                cls.path_index,
                later.path_index.alias("later_index"),
                pw.fn.COUNT(cls.id).alias("n"),
            )
            .join(later, on=(cls.trajectory_id == later.trajectory_id))
            .where((cls.checkpoint == first) & (later.checkpoint == second))
            .group_by(cls.path_index, later.path_index)
            .order_by(cls.path_index, later.path_index)
        )
        return {(row["path_index"], row["later_index"]): row["n"] for row in query.dicts()}

    @classmethod
    def iter_rows(cls) -> Iterator[Tuple[TrajectoryRecord, CheckpointRecord]]:
        checkpoints = {c.checkpoint: c for c in CheckpointRecord.select()}
        query = cls.select().order_by(cls.trajectory_id, cls.checkpoint)
        for record in query.iterator():
            yield record, checkpoints[record.checkpoint]
