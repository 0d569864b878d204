"""Natural, certified and empirical 2AFC scores and the evaluation report."""
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
from joblib import Parallel, delayed
from tqdm import tqdm

from app.config import CERTSIM_PROGRESS, CERTSIM_THREADS
from app.data.embeddings import TeacherMetric
from app.data.manifest import TripletDataset
from app.data.retrieval import RetrievalIndex, rank
from app.errors import ConfigurationError, SoundnessViolation
from app.models.models import (
    AttackConfig,
    Certificate,
    EvaluationReport,
    Histogram,
    Radius,
    RetrievalHit,
    RetrievalResponse,
    TeacherReport,
)
from app.network.extractor import FeatureExtractor
from app.services.attacks import attack_embedding, attack_embeddings, attack_triplets
from app.services.metric import (
    certify_batch,
    decisions_from_logits,
    embed_triplets,
    pixel_decisions,
    triplet_logits,
)

logger = logging.getLogger(__name__)

DEFAULT_RADII = ("36/255", "72/255", "108/255")
LINF_GRID = (0.01, 0.02, 0.03)
BATCH_SIZE = 64
SOUNDNESS_TOLERANCE = 1e-12
DISPLACEMENT_TOLERANCE = 1e-9

T = TypeVar("T")


def parallel_map(fn: Callable[[TripletDataset], List[T]], dataset: TripletDataset, threads: Optional[int] = None,
                 desc: str = "") -> List[T]:
    """Apply ``fn`` to consecutive chunks of ``dataset``; results stay in dataset order."""
    threads = threads or CERTSIM_THREADS
    chunks = list(dataset.batches(BATCH_SIZE))
    progress = tqdm(chunks, desc=desc, unit="batch", disable=not CERTSIM_PROGRESS or len(chunks) < 2)
    if threads == 1:
        parts = [fn(chunk) for chunk in progress]
    else:
        parts = Parallel(n_jobs=threads, backend="threading")(delayed(fn)(chunk) for chunk in progress)
    return [item for part in parts for item in part]


def _require_nonempty(dataset: TripletDataset) -> None:
    if len(dataset) == 0:
        raise ConfigurationError("Cannot score an empty dataset")


def correctness(f: FeatureExtractor, dataset: TripletDataset, threads: Optional[int] = None) -> np.ndarray:
    def chunk_correct(chunk: TripletDataset) -> List[bool]:
        (e, _), (e0, _), (e1, _) = embed_triplets(f, chunk.x, chunk.x0, chunk.x1)
        return list(decisions_from_logits(triplet_logits(e, e0, e1).numpy()) == chunk.y)

    return np.asarray(parallel_map(chunk_correct, dataset, threads, "natural"), dtype=bool)


def natural_score(f: FeatureExtractor, dataset: TripletDataset, threads: Optional[int] = None) -> float:
    """Fraction of triplets whose decision agrees with the label."""
    _require_nonempty(dataset)
    return float(np.mean(correctness(f, dataset, threads)))


def pixel_baseline_score(dataset: TripletDataset) -> float:
    _require_nonempty(dataset)
    return float(np.mean(pixel_decisions(dataset.x, dataset.x0, dataset.x1) == dataset.y))


def certify_dataset(f: FeatureExtractor, dataset: TripletDataset, threads: Optional[int] = None) -> List[Certificate]:
    return parallel_map(
        lambda chunk: certify_batch(f, chunk.x, chunk.x0, chunk.x1, chunk.y, chunk.ids), dataset, threads, "certify"
    )


def certified_fraction(certificates: Sequence[Certificate], rho: float) -> float:
    """Fraction of triplets that are correct with a valid certificate of radius >= rho."""
    if rho < 0:
        raise ConfigurationError(f"Radius must be non-negative, got {rho}")
    if not certificates:
        return 0.0
    hits = sum(1 for c in certificates if c.correct and c.valid and c.radius >= rho)
    return hits / len(certificates)


def certified_score(f: FeatureExtractor, dataset: TripletDataset, rho: float, threads: Optional[int] = None) -> float:
    return certified_fraction(certify_dataset(f, dataset, threads), rho)


def certified_scores(certificates: Sequence[Certificate], radii: Sequence[Radius]) -> Dict[str, float]:
    return {radius.label: certified_fraction(certificates, radius.value) for radius in radii}


def excluded_invalid_fraction(certificates: Sequence[Certificate]) -> float:
    """Share of correctly classified triplets left uncertified by the norm precondition."""
    if not certificates:
        return 0.0
    return sum(1 for c in certificates if c.correct and not c.valid) / len(certificates)


def empirical_score(f: FeatureExtractor, dataset: TripletDataset, attack_cfg: AttackConfig,
                    threads: Optional[int] = None) -> float:
    """Fraction of triplets still correct after a PGD attack on the reference."""
    _require_nonempty(dataset)

    def chunk_survivors(chunk: TripletDataset) -> List[bool]:
        outcome = attack_triplets(f, chunk.x, chunk.x0, chunk.x1, chunk.y, attack_cfg, chunk.ids)
        return list(outcome.correct_after)

    survivors = parallel_map(chunk_survivors, dataset, threads, f"attack {attack_cfg.norm} eps={attack_cfg.epsilon:g}")
    return float(np.mean(survivors))


def embedding_shifts(f: FeatureExtractor, images: np.ndarray, attack_cfg: AttackConfig, ids: Sequence[str],
                     threads: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per image: d(x, x + delta), ||delta||_2 and whether both pre-projection norms are >= 1."""
    holder = TripletDataset(ids=list(ids), x=images, x0=images, x1=images, y=np.zeros(len(images), dtype=np.int64))

    def chunk_shifts(chunk: TripletDataset):
        outcome = attack_embeddings(f, chunk.x, attack_cfg, chunk.ids)
        _, clean_norms = f.embed(chunk.x.astype(np.float64))
        _, shifted_norms = f.embed(chunk.x.astype(np.float64) + outcome.delta)
        verifiable = (clean_norms.numpy() >= 1.0) & (shifted_norms.numpy() >= 1.0) & f.project
        lengths = np.sqrt(np.sum(outcome.delta.reshape(len(chunk), -1) ** 2, axis=1))
        return list(zip(outcome.distance, lengths, verifiable))

    rows = parallel_map(chunk_shifts, holder, threads, "embedding attack")
    distances, lengths, verifiable = (np.asarray(column) for column in zip(*rows)) if rows else (np.zeros(0),) * 3
    return distances, lengths, verifiable.astype(bool)


def distance_histogram(f: FeatureExtractor, images: np.ndarray, attack_cfg: AttackConfig, bins: int = 20,
                       ids: Optional[Sequence[str]] = None, threads: Optional[int] = None) -> Histogram:
    """Histogram of d(x, x + delta) over [0, 2] under the embedding attack."""
    if bins < 2:
        raise ConfigurationError(f"Histogram needs at least 2 bins, got {bins}")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(images))]
    distances, _, _ = embedding_shifts(f, images, attack_cfg, ids, threads)
    return histogram_of(distances, bins)


def histogram_of(distances: np.ndarray, bins: int) -> Histogram:
    counts, edges = np.histogram(np.clip(distances, 0.0, 2.0), bins=bins, range=(0.0, 2.0))
    return Histogram(edges=edges.tolist(), counts=counts.tolist())


def displacement_violations(distances: np.ndarray, lengths: np.ndarray, verifiable: np.ndarray) -> int:
    """Verifiable samples where the embedding moved further than the input: d > ||delta|| + tol."""
    return int(np.sum(verifiable & (distances > lengths + DISPLACEMENT_TOLERANCE)))


def falsify_certificates(f: FeatureExtractor, dataset: TripletDataset, certificates: Sequence[Certificate],
                         steps: int = 50, restarts: int = 3, seed: int = 0, fraction: float = 0.99,
                         threads: Optional[int] = None) -> List[str]:
    """Attack every certified triplet at ``fraction`` of its radius; return the ids whose decision flipped."""
    targets = [i for i, c in enumerate(certificates) if c.valid and c.radius > 0]
    if not targets:
        return []

    def attack_one(index: int) -> Optional[str]:
        t = dataset[index]
        cfg = AttackConfig(norm="l2", epsilon=fraction * certificates[index].radius, steps=steps,
                           objective="triplet_ce", restarts=restarts, seed=seed)
        outcome = attack_triplets(f, t.x[None], t.x0[None], t.x1[None], [t.y], cfg, [t.id])
        return t.id if bool(outcome.flipped[0]) else None

    threads = threads or CERTSIM_THREADS
    progress = tqdm(targets, desc="falsify", unit="triplet", disable=not CERTSIM_PROGRESS)
    if threads == 1:
        results = [attack_one(i) for i in progress]
    else:
        results = Parallel(n_jobs=threads, backend="threading")(delayed(attack_one)(i) for i in progress)
    violations = [key for key in results if key is not None]
    if violations:
        logger.error("❌ Certified decisions flipped inside their radius: %s", ", ".join(violations))
    else:
        logger.info("✅ No certified decision flipped (%d triplets attacked)", len(targets))
    return violations


def check_sandwich(natural: float, certified: Dict[str, float], empirical: Dict[str, float]) -> None:
    """certified(rho) <= empirical(eps = rho) <= natural for every radius."""
    for label, certified_value in certified.items():
        empirical_value = empirical[label]
        if certified_value > empirical_value + SOUNDNESS_TOLERANCE or empirical_value > natural + SOUNDNESS_TOLERANCE:
            raise SoundnessViolation(
                f"Score ordering broken at radius {label}: certified={certified_value:.6f}, "
                f"empirical={empirical_value:.6f}, natural={natural:.6f}"
            )


def _l2_attack(attack: AttackConfig, epsilon: float) -> AttackConfig:
    return attack.model_copy(update={"norm": "l2", "epsilon": epsilon, "objective": "triplet_ce"})


def teacher_report(teacher: TeacherMetric, dataset: TripletDataset, radii: Sequence[Radius], attack: AttackConfig,
                   shift_cfg: AttackConfig, bins: int = 20, threads: Optional[int] = None) -> TeacherReport:
    """Natural and empirical scores of the teacher and its d(x, x + delta) under the student's attacks."""
    empirical = {radius.label: empirical_score(teacher, dataset, _l2_attack(attack, radius.value), threads)
                 for radius in radii}
    distances, _, _ = embedding_shifts(teacher, dataset.x, shift_cfg, dataset.ids, threads)
    return TeacherReport(
        natural=natural_score(teacher, dataset, threads),
        empirical=empirical,
        histogram=histogram_of(distances, bins),
        max_shift=float(np.max(distances, initial=0.0)),
    )


def evaluate(f: FeatureExtractor, dataset: TripletDataset, radii: Optional[Sequence[Radius]] = None,
             attack: Optional[AttackConfig] = None, histogram_epsilon: float = 1.0, bins: int = 20,
             falsify: bool = True, threads: Optional[int] = None, linf_grid: Sequence[float] = LINF_GRID,
             teacher: Optional[TeacherMetric] = None) -> EvaluationReport:
    """Full report: natural, certified and empirical scores, histogram and soundness checks.

    ``linf_grid`` adds cross-entropy PGD scores in l-infinity. With ``teacher``
    the natural score, the l2 attacks and the embedding attack are repeated
    on the teacher for comparison.
    """
    _require_nonempty(dataset)
    radii = sorted(radii or [Radius.parse(text) for text in DEFAULT_RADII], key=lambda r: r.value)
    attack = attack or AttackConfig()
    logger.info("🔎 Evaluating %d triplets at radii %s", len(dataset), ", ".join(r.label for r in radii))

    natural = natural_score(f, dataset, threads)
    certificates = certify_dataset(f, dataset, threads)
    certified = certified_scores(certificates, radii)
    empirical = {radius.label: empirical_score(f, dataset, _l2_attack(attack, radius.value), threads)
                 for radius in radii}
    linf = attack.model_copy(update={"norm": "linf", "objective": "triplet_ce"})
    empirical_linf = {
        f"{epsilon:g}": empirical_score(f, dataset, linf.model_copy(update={"epsilon": epsilon}), threads)
        for epsilon in sorted(linf_grid)
    }
    check_sandwich(natural, certified, empirical)

    shift_cfg = attack.model_copy(update={"norm": "l2", "epsilon": histogram_epsilon, "objective": "embed_mse"})
    distances, lengths, verifiable = embedding_shifts(f, dataset.x, shift_cfg, dataset.ids, threads)

    teacher_row = None
    if teacher is not None:
        teacher_row = teacher_report(teacher, dataset, radii, attack, shift_cfg, bins, threads)
    violations = falsify_certificates(f, dataset, certificates, seed=attack.seed, threads=threads) if falsify else []
    report = EvaluationReport(
        natural=natural,
        certified=certified,
        empirical=empirical,
        empirical_linf=empirical_linf,
        excluded_invalid_fraction=excluded_invalid_fraction(certificates),
        histogram=histogram_of(distances, bins),
        max_shift=float(np.max(distances, initial=0.0)),
        radii=radii,
        pixel_baseline_natural=pixel_baseline_score(dataset),
        displacement_violations=displacement_violations(distances, lengths, verifiable),
        falsification_violations=violations,
        teacher=teacher_row,
    )
    logger.info("✅ natural=%.4f certified=%s", natural, {k: round(v, 4) for k, v in certified.items()})
    return report


def retrieval_attack(f: FeatureExtractor, index: RetrievalIndex, query: np.ndarray, epsilon: float,
                     topk: int = 5, steps: int = 50, seed: int = 0) -> Tuple[RetrievalResponse, RetrievalResponse]:
    """Rank a query before and after an l2 embedding attack; flags a changed nearest neighbour."""
    clean_embedding, _ = f.extract(query)
    clean = rank(index, clean_embedding, topk)
    cfg = AttackConfig(norm="l2", epsilon=epsilon, steps=steps, objective="embed_mse", seed=seed)
    outcome = attack_embedding(f, query, cfg)
    attacked_embedding, _ = f.extract(np.asarray(query, dtype=np.float64) + outcome.delta)
    attacked = rank(index, attacked_embedding, topk)
    changed = clean[0][0] != attacked[0][0]
    return (
        RetrievalResponse(hits=[RetrievalHit(id=k, distance=d) for k, d in clean]),
        RetrievalResponse(hits=[RetrievalHit(id=k, distance=d) for k, d in attacked], rank1_changed=changed),
    )
