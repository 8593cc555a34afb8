"""
Directory layout shared by corpora and generation exports:
    <dir>/images/NNNNN.png   8-bit RGB
    <dir>/masks/NNNNN.png    8-bit single channel, values {0, 255}
    <dir>/manifest.jsonl     one record per image; mask is null for normal images
"""
import json
import shutil
from pathlib import Path
from typing import Dict, Iterable, List

import numpy as np
from PIL import Image
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_fixed

from recovery.errors import DataError, ExportError, ManifestParseError

MANIFEST_NAME = 'manifest.jsonl'

_retry_io = retry(stop=stop_after_attempt(3), wait=wait_fixed(0.2),
                  retry=retry_if_exception_type(OSError), reraise=True)


def image_name(index: int) -> str:
    return f'{index:05d}.png'


def prepare_output_dir(directory: Path, force: bool = False) -> Path:
    """Create an empty output directory; refuse to overwrite a non-empty one unless forced"""
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()):
        if not force:
            raise ExportError(directory, "directory is not empty (use --force to overwrite)")
        for name in ('images', 'masks'):
            shutil.rmtree(directory / name, ignore_errors=True)
        (directory / MANIFEST_NAME).unlink(missing_ok=True)
    try:
        (directory / 'images').mkdir(parents=True, exist_ok=True)
        (directory / 'masks').mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ExportError(directory, f"cannot create output directory: {e}")
    return directory


@_retry_io
def _save_png(array: np.ndarray, path: Path):
    Image.fromarray(array).save(path)


def write_image(image: np.ndarray, path: Path):
    """H x W x 3 float image in [0, 1] to 8-bit PNG"""
    array = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    try:
        _save_png(array, Path(path))
    except OSError as e:
        raise ExportError(path, f"image write failed: {e}")


def write_mask(mask: np.ndarray, path: Path):
    """Binary mask to single-channel PNG with values {0, 255}"""
    array = (np.asarray(mask) > 0).astype(np.uint8) * 255
    try:
        _save_png(array, Path(path))
    except OSError as e:
        raise ExportError(path, f"mask write failed: {e}")


def read_image(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing image file: {path}")
    return np.asarray(Image.open(path).convert('RGB'), dtype=np.uint8).astype(np.float32) / 255.0


def read_mask(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing mask file: {path}")
    return (np.asarray(Image.open(path).convert('L')) > 127).astype(np.uint8)


@_retry_io
def _write_lines(path: Path, lines: List[str]):
    with open(path, 'w') as f:
        f.writelines(lines)


def write_manifest(directory: Path, records: Iterable[Dict]) -> Path:
    path = Path(directory) / MANIFEST_NAME
    lines = [json.dumps(record, sort_keys=True) + '\n' for record in records]
    try:
        _write_lines(path, lines)
    except OSError as e:
        raise ExportError(path, f"manifest write failed: {e}")
    return path


def read_manifest(directory: Path) -> List[Dict]:
    """Parse manifest.jsonl; a corrupt line raises ManifestParseError with its line number"""
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"missing manifest: {path}")
    records = []
    with open(path, 'r') as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestParseError(path, line_number, str(e))
            if not isinstance(record, dict) or 'image' not in record or 'anomaly_type' not in record:
                raise ManifestParseError(path, line_number, "record needs 'image' and 'anomaly_type'")
            records.append(record)
    return records
