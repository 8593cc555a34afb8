"""
Per-category CSV reports: generation quality columns and mask-detection columns
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from metrics.features import FeatureExtractor
from metrics.generation import cluster_by_nearest, ic_lpips, inception_score, kid
from recovery.errors import UndefinedMetricError

logger = logging.getLogger(__name__)

GENERATION_COLUMNS = ('IS', 'IC-LPIPS', 'KID', 'IC-LPIPS(a)')
# KID against the normal corpus for every export, and the share of non-empty generated masks
COMPARISON_COLUMNS = ('KID(normal)', 'mask_nonempty')
DETECTION_COLUMNS = ('pixel_auroc', 'pixel_ap', 'pixel_f1max', 'iou')


def _kid_or_nan(extractor: FeatureExtractor, generated, references, degree: int) -> float:
    if len(generated) < 2 or len(references) < 2:
        return float('nan')
    return kid(extractor.features(generated), extractor.features(references), degree)


def generation_metrics(generated: np.ndarray, masks: Sequence[Optional[np.ndarray]],
                       references: Sequence[np.ndarray], reference_masks: Sequence[Optional[np.ndarray]],
                       extractor: FeatureExtractor, degree: int = 3,
                       normal_references: Optional[Sequence[np.ndarray]] = None) -> Dict[str, float]:
    """
    IS of the generated set, IC-LPIPS over clusters formed around the nearest reference,
    KID against the references, and IC-LPIPS(a) when generated masks are present.
    With normal_references the row also carries KID against the normal corpus, so
    normal-mode and abnormal-mode exports can be compared on one reference set.
    """
    clusters = cluster_by_nearest(generated, references, extractor.distance)
    images_by_cluster = [[generated[i] for i in members] for members in clusters]
    row = {
        'IS': inception_score(extractor.class_probs(generated)),
        'IC-LPIPS': ic_lpips(images_by_cluster, extractor.distance),
        'KID': _kid_or_nan(extractor, generated, references, degree),
        'IC-LPIPS(a)': float('nan'),
    }
    has_masks = len(masks) > 0 and all(m is not None for m in masks)
    if has_masks:
        masks_by_cluster = [[masks[i] for i in members] for members in clusters]
        try:
            row['IC-LPIPS(a)'] = ic_lpips(images_by_cluster, extractor.distance, masks_by_cluster)
        except UndefinedMetricError as e:
            logger.warning(f"{e}; IC-LPIPS(a) left empty")
    if normal_references is not None:
        row['KID(normal)'] = _kid_or_nan(extractor, generated, normal_references, degree)
        row['mask_nonempty'] = float(np.mean([m.any() for m in masks])) if has_masks else float('nan')
    return row


def build_report(rows: List[Dict], extractor_fingerprint: str, config_hash: str) -> pd.DataFrame:
    frame = pd.DataFrame(rows)
    leading = ['category', 'anomaly_type', 'mode', *GENERATION_COLUMNS, *DETECTION_COLUMNS, *COMPARISON_COLUMNS]
    for column in leading:
        if column not in frame.columns:
            frame[column] = np.nan
    frame['feature_fingerprint'] = extractor_fingerprint
    frame['config_hash'] = config_hash
    return frame[leading + [c for c in frame.columns if c not in leading]]


def write_report(frame: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format='%.6f')
    logger.info(f"Wrote report with {len(frame)} row(s) to {path}")
    return path
