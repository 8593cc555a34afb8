"""
Component checkpoints - one archive per component (vae, unet, tokens, rmp)
Each archive embeds a version string, the config echo and a fingerprint of its weights
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional

import torch
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_fixed

from recovery.errors import CompatibilityError, ConfigurationError, ExportError

CHECKPOINT_VERSION = 'seas-toy-1'
COMPONENT_FILES = {
    'vae': 'vae.pt',
    'unet': 'unet.pt',
    'tokens': 'tokens.pt',
    'rmp': 'rmp.pt',
}

logger = logging.getLogger(__name__)


def fingerprint_state(state_dict: Dict[str, torch.Tensor]) -> str:
    """sha256 over parameter names, shapes, dtypes and bytes"""
    hasher = hashlib.sha256()
    for name in sorted(state_dict):
        tensor = state_dict[name].detach().cpu().contiguous()
        hasher.update(name.encode())
        hasher.update(str(tuple(tensor.shape)).encode())
        hasher.update(str(tensor.dtype).encode())
        hasher.update(tensor.numpy().tobytes())
    return hasher.hexdigest()[:24]


def generator_fingerprint(vae_fp: str, unet_fp: str, tokens_fp: str) -> str:
    return hashlib.sha256(f'{vae_fp}:{unet_fp}:{tokens_fp}'.encode()).hexdigest()[:24]


@retry(stop=stop_after_attempt(3), wait=wait_fixed(0.2), retry=retry_if_exception_type(OSError), reraise=True)
def _write_archive(archive: Dict[str, Any], path: Path):
    tmp = path.with_suffix(path.suffix + '.tmp')
    torch.save(archive, tmp)
    tmp.replace(path)


def save_component(directory: Path, component: str, state_dict: Dict[str, torch.Tensor],
                   config: Dict[str, Any], extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Write <directory>/<component>.pt and return the archive"""
    if component not in COMPONENT_FILES:
        raise ConfigurationError(f"unknown checkpoint component: {component}")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state_dict = {k: v.detach().cpu().clone() for k, v in state_dict.items()}
    archive = {
        'version': CHECKPOINT_VERSION,
        'component': component,
        'config': json.loads(json.dumps(config, default=list)),
        'state_dict': state_dict,
        'fingerprint': fingerprint_state(state_dict),
    }
    archive.update(extra or {})
    path = directory / COMPONENT_FILES[component]
    try:
        _write_archive(archive, path)
    except OSError as e:
        raise ExportError(path, f"checkpoint write failed: {e}")
    logger.info(f"Saved {component} checkpoint {path} ({archive['fingerprint']})")
    return archive


def load_component(directory: Path, component: str) -> Dict[str, Any]:
    """Load and verify a component archive"""
    path = Path(directory) / COMPONENT_FILES[component]
    if not path.exists():
        raise ConfigurationError(f"missing upstream checkpoint: {path}")
    archive = torch.load(path, map_location='cpu', weights_only=False)
    if archive.get('version') != CHECKPOINT_VERSION:
        raise CompatibilityError(f"{path}: version {archive.get('version')!r} != {CHECKPOINT_VERSION!r}")
    if archive.get('component') != component:
        raise CompatibilityError(f"{path}: holds component {archive.get('component')!r}, expected {component!r}")
    if fingerprint_state(archive['state_dict']) != archive['fingerprint']:
        raise CompatibilityError(f"{path}: weights do not match the stored fingerprint")
    return archive
