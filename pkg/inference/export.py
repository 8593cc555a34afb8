"""
Write generated pairs to disk with full provenance, and read them back for evaluation
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from inference.generator import GeneratedSample, GenerationRequest
from recovery.errors import DataError
from synthdata.pairs_io import (image_name, prepare_output_dir, read_image, read_manifest, read_mask,
                                write_image, write_manifest, write_mask)

logger = logging.getLogger(__name__)


def export_pairs(samples: Sequence[GeneratedSample], directory: Path, request: GenerationRequest,
                 fingerprints: Dict[str, str], config_hash: str, force: bool = False) -> List[Dict]:
    """Images, {0,255} masks and one manifest record per sample"""
    directory = prepare_output_dir(Path(directory), force)
    records = []
    for sample in samples:
        name = image_name(sample.index)
        write_image(sample.image, directory / 'images' / name)
        mask_path = None
        if sample.mask is not None:
            write_mask(sample.mask, directory / 'masks' / name)
            mask_path = f'masks/{name}'
        records.append({
            'image': f'images/{name}',
            'mask': mask_path,
            'anomaly_type': sample.anomaly_type,
            'mode': request.mode,
            'index': sample.index,
            'seed': sample.seed,
            'normal_index': sample.normal_index,
            'mask_threshold': request.mask_threshold if sample.mask is not None else None,
            'noise_strength': request.noise_strength,
            'sampler_steps': request.sampler_steps,
            'mask_average_steps': request.mask_average_steps,
            'fingerprints': dict(fingerprints),
            'config_hash': config_hash,
        })
    write_manifest(directory, records)
    logger.info(f"Exported {len(records)} pairs to {directory}")
    return records


def read_pairs(directory: Path, anomaly_type: Optional[int] = None):
    """Images (float H x W x 3), masks (uint8 or None) and manifest records of an export directory"""
    directory = Path(directory)
    records = read_manifest(directory)
    if anomaly_type is not None:
        records = [r for r in records if r['anomaly_type'] == anomaly_type]
    images, masks = [], []
    for record in records:
        images.append(read_image(directory / record['image']))
        masks.append(read_mask(directory / record['mask']) if record.get('mask') else None)
    if not images:
        raise DataError(f"no generated images in {directory}")
    return np.stack(images), masks, records
