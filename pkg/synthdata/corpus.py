"""
Toy corpus: P normal images plus H_n abnormal images per defect type
"""
import logging
from dataclasses import dataclass, field, replace
from multiprocessing import Pool
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import yaml

from recovery.errors import DataError, ValidationError
from synthdata.pairs_io import (image_name, prepare_output_dir, read_image, read_manifest, read_mask,
                                write_image, write_manifest, write_mask)
from synthdata.products import AnomalySample, ProductSpec, base_structure_correlation, generate_sample

logger = logging.getLogger(__name__)

CORPUS_META = 'corpus.yaml'


@dataclass
class Corpus:
    spec: ProductSpec
    normal: List[AnomalySample]
    abnormal: List[AnomalySample]
    seed: Optional[int] = None
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        for sample in self.abnormal:
            if sample.is_normal or not sample.mask.any():
                raise ValidationError("abnormal partition holds a sample without a defect mask")
            if not 1 <= sample.anomaly_type <= self.spec.num_types:
                raise ValidationError(f"anomaly type {sample.anomaly_type} outside [1, {self.spec.num_types}]")
        if any(not s.is_normal for s in self.normal):
            raise ValidationError("normal partition holds an abnormal sample")

    @property
    def num_types(self) -> int:
        return self.spec.num_types

    def by_type(self, anomaly_type: int) -> List[AnomalySample]:
        return [s for s in self.abnormal if s.anomaly_type == anomaly_type]

    def type_histogram(self) -> Dict[int, int]:
        histogram = {0: len(self.normal)}
        for n in range(1, self.num_types + 1):
            histogram[n] = len(self.by_type(n))
        return histogram

    def samples(self) -> List[AnomalySample]:
        return self.normal + self.abnormal

    def single_type(self, anomaly_type: int) -> 'Corpus':
        """Normal images plus one type's abnormal images, relabelled as type 1 of a one-family product"""
        if not 1 <= anomaly_type <= self.num_types:
            raise ValidationError(f"anomaly type {anomaly_type} outside [1, {self.num_types}]")
        spec = replace(self.spec, defect_families=[self.spec.defect_families[anomaly_type - 1]])
        abnormal = [AnomalySample(s.image, s.mask, 1) for s in self.by_type(anomaly_type)]
        return Corpus(spec, self.normal, abnormal, self.seed, dict(self.metadata))


def _generate(job: Tuple[ProductSpec, int, np.random.SeedSequence]) -> AnomalySample:
    spec, anomaly_type, seed_sequence = job
    return generate_sample(spec, anomaly_type, seed_sequence)


def make_corpus(spec: ProductSpec, normal_count: int, abnormal_per_type: int, seed: int,
                workers: int = 1) -> Corpus:
    """Deterministic corpus; every image has its own seed spawned from the corpus seed"""
    if normal_count < 1 or abnormal_per_type < 1:
        raise ValidationError("corpus needs at least one normal and one abnormal image per type")
    types = [0] * normal_count
    for n in range(1, spec.num_types + 1):
        types += [n] * abnormal_per_type
    children = np.random.SeedSequence(seed).spawn(len(types))
    jobs = [(spec, t, child) for t, child in zip(types, children)]
    if workers > 1:
        with Pool(workers) as pool:
            samples = pool.map(_generate, jobs)
    else:
        samples = [_generate(job) for job in jobs]
    corpus = Corpus(spec, [s for s in samples if s.is_normal], [s for s in samples if not s.is_normal], seed)
    corpus.metadata['consistency'] = consistency_check(corpus)
    logger.info(f"Generated corpus: {corpus.type_histogram()} (seed {seed})")
    return corpus


def consistency_check(corpus: Corpus) -> Dict[str, float]:
    """
    Global-consistency self-check: normal images should share their base structure
    more than defect pixels share it with the normal images.
    """
    normal_images = [s.image for s in corpus.normal]
    normal_corr = base_structure_correlation(normal_images)
    reference = np.mean(normal_images, axis=0)
    region_corrs = []
    for sample in corpus.abnormal:
        region = sample.mask.astype(bool)
        if region.sum() < 2:
            continue
        region_corrs.append(base_structure_correlation([sample.image, reference], region))
    anomaly_corr = float(np.mean(region_corrs)) if region_corrs else 0.0
    passed = normal_corr > anomaly_corr
    if not passed:
        logger.warning(f"Consistency self-check failed: normal structure correlation {normal_corr:.3f} "
                       f"<= anomaly-region correlation {anomaly_corr:.3f}")
    return {'normal_structure_correlation': normal_corr,
            'anomaly_region_correlation': anomaly_corr,
            'passed': bool(passed)}


def write_corpus(corpus: Corpus, directory: Path, force: bool = False) -> Path:
    """Write images, masks, manifest.jsonl and corpus.yaml"""
    directory = prepare_output_dir(directory, force)
    records = []
    for index, sample in enumerate(corpus.samples()):
        name = image_name(index)
        write_image(sample.image, directory / 'images' / name)
        mask_path = None
        if not sample.is_normal:
            write_mask(sample.mask, directory / 'masks' / name)
            mask_path = f'masks/{name}'
        family = None if sample.is_normal else corpus.spec.defect_families[sample.anomaly_type - 1].value
        records.append({'index': index, 'image': f'images/{name}', 'mask': mask_path,
                        'anomaly_type': sample.anomaly_type, 'family': family})
    write_manifest(directory, records)
    meta = {
        'spec': corpus.spec.to_dict(),
        'seed': corpus.seed,
        'counts': {str(k): v for k, v in corpus.type_histogram().items()},
        'consistency': corpus.metadata.get('consistency'),
    }
    (directory / CORPUS_META).write_text(yaml.safe_dump(meta, sort_keys=True))
    logger.info(f"Wrote corpus to {directory}")
    return directory


def read_corpus(directory: Path) -> Corpus:
    """Load a corpus written by write_corpus"""
    directory = Path(directory)
    meta_path = directory / CORPUS_META
    if not meta_path.exists():
        raise DataError(f"missing corpus metadata: {meta_path}")
    meta = yaml.safe_load(meta_path.read_text())
    spec = ProductSpec(**{**meta['spec'], 'palette': tuple(tuple(c) for c in meta['spec']['palette'])})
    normal, abnormal = [], []
    for record in read_manifest(directory):
        image = read_image(directory / record['image'])
        anomaly_type = int(record['anomaly_type'])
        if anomaly_type == 0:
            normal.append(AnomalySample(image, np.zeros(image.shape[:2], dtype=np.uint8), 0))
            continue
        if not record.get('mask'):
            raise DataError(f"abnormal record {record['image']} has no mask")
        abnormal.append(AnomalySample(image, read_mask(directory / record['mask']), anomaly_type))
    corpus = Corpus(spec, normal, abnormal, meta.get('seed'))
    expected = {int(k): v for k, v in meta.get('counts', {}).items()}
    if expected and expected != corpus.type_histogram():
        raise DataError(f"corpus counts {corpus.type_histogram()} differ from metadata {expected}")
    corpus.metadata['consistency'] = meta.get('consistency')
    return corpus
