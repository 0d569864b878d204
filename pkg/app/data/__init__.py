from .embeddings import EmbeddingStore, SyntheticTeacher, TeacherMetric, build_teacher_store
from .images import decode_image_bytes, load_image
from .manifest import TripletDataset, load_dataset, read_manifest, write_manifest
from .retrieval import RetrievalIndex, build_index, rank, retrieve
from .synthetic import generate_synthetic

__all__ = [
    "EmbeddingStore",
    "SyntheticTeacher",
    "TeacherMetric",
    "build_teacher_store",
    "decode_image_bytes",
    "load_image",
    "TripletDataset",
    "load_dataset",
    "read_manifest",
    "write_manifest",
    "RetrievalIndex",
    "build_index",
    "rank",
    "retrieve",
    "generate_synthetic",
]
