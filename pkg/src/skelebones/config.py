"""Pipeline configuration: defaults, validation, (de)serialization and hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .errors import UsageError


@dataclass
class PipelineConfig:
    # motion clustering
    max_bones: int = 50
    distortion_tol: float = 0.005
    min_cluster_size: int = 10
    # skinning decomposition
    ssdr_iters: int = 20
    weights_per_vertex: int = 4
    ssdr_tol: float = 1e-7
    # skeleton
    tau: float = 0.3
    skeleton_samples: int = 100
    # pose recovery
    ik_lambda: float = 1.0
    ik_iters: int = 200
    # motion matching
    patch_size: int = 7
    knn: int = 7
    levels: int = 5
    blend: float = 0.7
    parts: int = 5
    full_body: bool = False
    # data
    seed: int = 0
    unit: str = "unspecified"

    def validate(self):
        checks = [
            ("max_bones", self.max_bones >= 1),
            ("distortion_tol", self.distortion_tol > 0),
            ("min_cluster_size", self.min_cluster_size >= 3),
            ("ssdr_iters", self.ssdr_iters >= 0),
            ("weights_per_vertex", self.weights_per_vertex >= 1),
            ("ssdr_tol", self.ssdr_tol >= 0),
            ("tau", 0 < self.tau <= 1),
            ("skeleton_samples", self.skeleton_samples >= 2),
            ("ik_lambda", self.ik_lambda >= 0),
            ("ik_iters", self.ik_iters >= 0),
            ("patch_size", self.patch_size >= 1),
            ("knn", self.knn >= 1),
            ("levels", self.levels >= 0),
            ("blend", 0 <= self.blend <= 1),
            ("parts", self.parts >= 1),
            ("seed", self.seed >= 0),
        ]
        bad = [name for name, ok in checks if not ok]
        if bad:
            raise UsageError("invalid configuration values: " + ", ".join(
                f"{name}={getattr(self, name)!r}" for name in bad))
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise UsageError("unknown configuration keys: " + ", ".join(unknown))
        values = {}
        for name, value in data.items():
            kind = type(getattr(cls(), name))
            try:
                if kind is bool:
                    if not isinstance(value, bool):
                        raise TypeError("expected true or false")
                    values[name] = value
                else:
                    values[name] = kind(value)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"configuration key {name}: {exc}") from exc
        return cls(**values).validate()

    def digest(self):
        """SHA-256 of the canonical JSON form."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load_config(path) -> PipelineConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    return PipelineConfig.from_dict(data)
