"""
Generative-quality metrics: IS, IC-LPIPS (whole image and anomaly regions), KID
"""
import logging
from itertools import combinations
from typing import Callable, List, Optional, Sequence

import numpy as np

from recovery.errors import UndefinedMetricError, ValidationError

logger = logging.getLogger(__name__)

Distance = Callable[[np.ndarray, np.ndarray], float]


def inception_score(probs, eps: float = 1e-16) -> float:
    """exp of the mean KL(p(y|x) || p(y)) over rows of an N x K probability matrix"""
    p_yx = np.asarray(probs, dtype=np.float64)
    if p_yx.ndim != 2 or p_yx.shape[0] == 0:
        raise ValidationError(f"expected an N x K probability matrix, got shape {p_yx.shape}")
    if np.any(p_yx < 0) or not np.allclose(p_yx.sum(axis=1), 1.0, atol=1e-6):
        raise ValidationError("every row must be a probability distribution")
    p_y = p_yx.mean(axis=0, keepdims=True)
    kl_d = p_yx * (np.log(p_yx + eps) - np.log(p_y + eps))
    return float(np.exp(kl_d.sum(axis=1).mean()))


def mask_union_crop(image_a: np.ndarray, image_b: np.ndarray, mask_a, mask_b):
    """Both images cropped to the bounding box of the union of their masks, or None if it is empty"""
    union = (np.asarray(mask_a) > 0) | (np.asarray(mask_b) > 0)
    if not union.any():
        return None
    rows = np.flatnonzero(union.any(axis=1))
    cols = np.flatnonzero(union.any(axis=0))
    box = (slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1))
    return image_a[box], image_b[box]


def ic_lpips(clusters: Sequence[Sequence[np.ndarray]], distance: Distance,
             masks: Optional[Sequence[Sequence[np.ndarray]]] = None) -> float:
    """
    Mean over clusters of the mean pairwise distance inside each cluster.
    With masks, each pair is compared on the bounding box of its mask union;
    a pair whose union is empty is skipped, and so is a cluster left without pairs.
    Raises UndefinedMetricError when masks leave no pair at all.
    """
    cluster_scores = []
    skipped_pairs = 0
    for c, images in enumerate(clusters):
        if len(images) < 2:
            logger.warning(f"IC-LPIPS: skipping cluster {c} with {len(images)} image(s)")
            continue
        distances = []
        for i, j in combinations(range(len(images)), 2):
            a, b = images[i], images[j]
            if masks is not None:
                cropped = mask_union_crop(a, b, masks[c][i], masks[c][j])
                if cropped is None:
                    logger.warning(f"IC-LPIPS(a): skipping pair ({i}, {j}) of cluster {c}, empty anomaly region")
                    skipped_pairs += 1
                    continue
                a, b = cropped
            distances.append(float(distance(a, b)))
        if distances:
            cluster_scores.append(np.mean(distances))
    if not cluster_scores and skipped_pairs:
        raise UndefinedMetricError(f"IC-LPIPS(a): all {skipped_pairs} pair(s) have an empty anomaly region")
    if not cluster_scores:
        logger.warning("IC-LPIPS: no cluster has two or more images")
        return 0.0
    return float(np.mean(cluster_scores))


def cluster_by_nearest(generated: Sequence[np.ndarray], references: Sequence[np.ndarray],
                       distance: Distance) -> List[List[int]]:
    """Indices of generated images grouped by their nearest reference image"""
    if not len(references):
        raise ValidationError("clustering needs at least one reference image")
    clusters: List[List[int]] = [[] for _ in references]
    for g, image in enumerate(generated):
        nearest = int(np.argmin([distance(image, ref) for ref in references]))
        clusters[nearest].append(g)
    return clusters


def polynomial_kernel(x: np.ndarray, y: np.ndarray, degree: int = 3) -> np.ndarray:
    return (x @ y.T / x.shape[1] + 1.0) ** degree


def kid(features_x, features_y, degree: int = 3) -> float:
    """
    Unbiased MMD^2 with the polynomial kernel. Equal-size sets also drop the
    cross-kernel diagonal, so identical sets score exactly 0.
    """
    x = np.asarray(features_x, dtype=np.float64)
    y = np.asarray(features_y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValidationError(f"feature matrices must be 2-D with equal width, got {x.shape} and {y.shape}")
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ValidationError(f"KID needs at least 2 samples per set, got {m} and {n}")
    k_xx = polynomial_kernel(x, x, degree)
    k_yy = polynomial_kernel(y, y, degree)
    k_xy = polynomial_kernel(x, y, degree)
    term_xx = (k_xx.sum() - np.trace(k_xx)) / (m * (m - 1))
    term_yy = (k_yy.sum() - np.trace(k_yy)) / (n * (n - 1))
    if m == n:
        term_xy = (k_xy.sum() - np.trace(k_xy)) / (m * (m - 1))
    else:
        term_xy = k_xy.mean()
    return float(term_xx + term_yy - 2.0 * term_xy)
