import json
import logging
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Sequence

import numpy as np
from pydantic import ValidationError

from app.core.lstn import read_tensor
from app.errors import DataError
from app.models.models import ManifestEntry, Triplet

logger = logging.getLogger(__name__)


def sample_rng(seed: int, sample_id: str, stream: int = 0) -> np.random.Generator:
    """Per-sample random stream; independent of batch order and worker count."""
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode("utf-8")), stream])


@dataclass
class TripletDataset:
    """Stacked 2AFC triplets: images are [N, 3, s, s] float32, labels int64."""

    ids: List[str]
    x: np.ndarray
    x0: np.ndarray
    x1: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, index: int) -> Triplet:
        return Triplet(x=self.x[index], x0=self.x0[index], x1=self.x1[index], y=int(self.y[index]),
                       id=self.ids[index])

    @property
    def image_shape(self):
        return tuple(self.x.shape[1:])

    def subset(self, indices: Sequence[int]) -> "TripletDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return TripletDataset(
            ids=[self.ids[i] for i in indices],
            x=self.x[indices],
            x0=self.x0[indices],
            x1=self.x1[indices],
            y=self.y[indices],
        )

    def batches(self, batch_size: int, order: Sequence[int] | None = None) -> Iterator["TripletDataset"]:
        order = np.arange(len(self)) if order is None else np.asarray(order)
        for start in range(0, len(order), batch_size):
            yield self.subset(order[start:start + batch_size])

    @classmethod
    def from_triplets(cls, triplets: Sequence[Triplet]) -> "TripletDataset":
        return cls(
            ids=[t.id for t in triplets],
            x=np.stack([t.x for t in triplets]),
            x0=np.stack([t.x0 for t in triplets]),
            x1=np.stack([t.x1 for t in triplets]),
            y=np.asarray([t.y for t in triplets], dtype=np.int64),
        )


def read_manifest(path) -> List[ManifestEntry]:
    """Parse a JSON-lines manifest; rejects duplicate ids and bad labels."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Manifest not found: {path}")
    entries: List[ManifestEntry] = []
    seen = set()
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entry = ManifestEntry.model_validate(json.loads(line))
        except (json.JSONDecodeError, ValidationError) as e:
            raise DataError(f"{path}:{line_no}: invalid manifest entry: {e}") from e
        if entry.id in seen:
            raise DataError(f"{path}:{line_no}: duplicate id {entry.id!r}")
        seen.add(entry.id)
        entries.append(entry)
    return entries


def write_manifest(entries: Sequence[ManifestEntry], path) -> None:
    lines = [entry.model_dump_json(exclude_none=True) for entry in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _resolve(root: Path, relative: str, entry_id: str) -> Path:
    resolved = (root / relative) if not Path(relative).is_absolute() else Path(relative)
    if not resolved.exists():
        raise DataError(f"Entry {entry_id!r}: file not found: {resolved}")
    return resolved


def load_dataset(manifest_path) -> TripletDataset:
    manifest_path = Path(manifest_path)
    entries = read_manifest(manifest_path)
    if not entries:
        raise DataError(f"Manifest {manifest_path} has no entries")
    root = manifest_path.parent
    refs, x0s, x1s = [], [], []
    for entry in entries:
        ref = read_tensor(_resolve(root, entry.ref_path, entry.id))
        x0 = read_tensor(_resolve(root, entry.x0_path, entry.id))
        x1 = read_tensor(_resolve(root, entry.x1_path, entry.id))
        if not (ref.shape == x0.shape == x1.shape):
            raise DataError(f"Entry {entry.id!r}: image shapes differ {ref.shape}, {x0.shape}, {x1.shape}")
        if refs and ref.shape != refs[0].shape:
            raise DataError(f"Entry {entry.id!r}: shape {ref.shape} differs from dataset shape {refs[0].shape}")
        refs.append(ref)
        x0s.append(x0)
        x1s.append(x1)
    logger.info("✅ Loaded %d triplets from %s", len(entries), manifest_path)
    return TripletDataset(
        ids=[e.id for e in entries],
        x=np.stack(refs).astype(np.float32),
        x0=np.stack(x0s).astype(np.float32),
        x1=np.stack(x1s).astype(np.float32),
        y=np.asarray([e.y for e in entries], dtype=np.int64),
    )
