"""
Ablation arms as config overrides, the process fan-out that runs them, and the sweep summary
"""
import logging
import multiprocessing
from pathlib import Path
from typing import Callable, Dict, List, Sequence

import pandas as pd
import psutil

from recovery.errors import ConfigurationError

logger = logging.getLogger(__name__)

SUMMARY_NAME = 'summary.csv'

ARMS: Dict[str, List[str]] = {
    'baseline': [],
    # prompt and loss arms
    'with_tp': ['prompt.with_tp=true'],
    'no_mixed': ['train.no_mixed=true'],
    'no_na': ['train.no_na=true'],
    'no_st': ['train.no_st=true'],
    'at_variant': ['train.at_variant=true', 'train.no_st=true'],
    'n_tokens_1': ['prompt.n_anomaly_tokens=1'],
    'n_tokens_4': ['prompt.n_anomaly_tokens=4'],
    'n_tokens_8': ['prompt.n_anomaly_tokens=8'],
    'n_normal_1': ['prompt.n_normal_tokens=1'],
    'n_normal_4': ['prompt.n_normal_tokens=4'],
    'layers_123': ['train.alignment_layers=[1, 2, 3]'],
    'layers_234': ['train.alignment_layers=[2, 3, 4]'],
    'layers_23': ['train.alignment_layers=[2, 3]'],
    'strategy_abnormal_and_normal': ['train.mixed_strategy=abnormal_and_normal'],
    'strategy_abnormal_normal': ['train.mixed_strategy=abnormal_normal'],
    'strategy_normal_abnormal': ['train.mixed_strategy=normal_abnormal'],
    # mask branch arms
    'features_123': ['rmp.unet_features=[up-1, up-2, up-3]', 'rmp.coarse_channels=[32, 16, 8]'],
    'features_234': ['rmp.unet_features=[up-2, up-3, up-4]', 'rmp.coarse_channels=[32, 16, 8]'],
    'features_23': ['rmp.unet_features=[up-2, up-3]', 'rmp.coarse_channels=[32, 16]'],
    'vae_encoder': ['rmp.vae_feature_source=encoder'],
    'vae_decoder': ['rmp.vae_feature_source=decoder'],
    'mrm_a': ['rmp.mrm_variant=a'],
    'mrm_b': ['rmp.mrm_variant=b'],
    'mrm_c': ['rmp.mrm_variant=c'],
    'coarse_only': ['rmp.refinement=coarse_only'],
    'single_mrm': ['rmp.refinement=single'],
    'no_cms': ['rmp.coarse_supervision=false'],
    'no_nia': ['rmp.normal_supervision=false'],
}
for _tau in ('0.1', '0.2', '0.3', '0.4', '0.5'):
    ARMS[f'tau_{_tau}'] = [f'inference.mask_threshold={_tau}']


def arm_overrides(arm: str) -> List[str]:
    if arm not in ARMS:
        raise ConfigurationError(f"unknown ablation arm {arm!r}; known arms: {', '.join(sorted(ARMS))}")
    return list(ARMS[arm])


def resolve_arms(names: Sequence[str]) -> List[str]:
    """Expand 'all' and check every name"""
    arms: List[str] = []
    for name in names:
        for arm in (sorted(ARMS) if name == 'all' else [name]):
            arm_overrides(arm)
            if arm not in arms:
                arms.append(arm)
    return arms


def worker_count(num_jobs: int, requested: int = 0) -> int:
    physical = psutil.cpu_count(logical=False) or 1
    workers = requested if requested > 0 else physical
    return max(1, min(workers, num_jobs))


def fan_out(runner: Callable[[Dict], Dict], jobs: List[Dict], workers: int = 0) -> List[Dict]:
    """Run jobs sequentially or in spawned worker processes; results keep job order"""
    workers = worker_count(len(jobs), workers)
    logger.info(f"Running {len(jobs)} ablation arm(s) on {workers} worker(s)")
    if workers == 1:
        return [runner(job) for job in jobs]
    with multiprocessing.get_context('spawn').Pool(workers) as pool:
        return pool.map(runner, jobs)


def write_summary(results: Sequence[Dict], path: Path) -> Path:
    """One row per report row of every completed arm, one status row per arm that did not complete"""
    frames = []
    for result in results:
        report = Path(result.get('report', ''))
        if result['status'] == 'completed' and report.is_file():
            frame = pd.read_csv(report)
        else:
            frame = pd.DataFrame([{'error': result.get('error')}])
        frame.insert(0, 'attempts', result.get('attempts'))
        frame.insert(0, 'status', result['status'])
        frame.insert(0, 'arm', result['arm'])
        frames.append(frame)
    summary = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=['arm', 'status'])
    path.parent.mkdir(parents=True, exist_ok=True)
    summary.to_csv(path, index=False, float_format='%.6f')
    logger.info(f"Wrote ablation summary for {len(results)} arm(s) to {path}")
    return path
