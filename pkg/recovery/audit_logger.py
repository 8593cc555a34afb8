"""
Run manifests - one append-only record per pipeline command
Tracks what ran, with which config and seed, and what it produced
"""
import hashlib
import json
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

import psutil

from recovery.errors import ManifestParseError
from recovery.log_setup import setup_logger

# Fields excluded from the content hash: they differ between identical runs
VOLATILE_FIELDS = ('record_id', 'started_at', 'ended_at', 'duration_ms', 'host', 'content_hash')


def host_snapshot() -> Dict:
    """Resources of the machine executing the command"""
    memory = psutil.virtual_memory()
    return {
        'cpu_count': psutil.cpu_count(logical=True),
        'cpu_physical': psutil.cpu_count(logical=False),
        'memory_total_mb': int(memory.total / (1024 * 1024)),
        'memory_percent': memory.percent,
    }


def file_digest(path: Path) -> str:
    hasher = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            hasher.update(chunk)
    return hasher.hexdigest()


def tree_digest(path: Path) -> str:
    """Digest of a file or of every file under a directory, excluding run manifests"""
    path = Path(path)
    if path.is_file():
        return file_digest(path)
    hasher = hashlib.sha256()
    for child in sorted(p for p in path.rglob('*') if p.is_file()):
        if child.name == 'run_manifests.jsonl' or 'audit' in child.relative_to(path).parts:
            continue
        if child.suffix in ('.log',) or child.name == 'train_log.txt':
            continue
        hasher.update(str(child.relative_to(path)).encode())
        hasher.update(file_digest(child).encode())
    return hasher.hexdigest()


class RunManifest:
    """A single command's manifest"""

    def __init__(self, command: str, config_hash: str, seed: int, config: Dict = None):
        now = datetime.now()
        self.record_id = f"RUN-{now.strftime('%Y%m%d%H%M%S')}-{now.microsecond // 1000:03d}"
        self.command = command
        self.config_hash = config_hash
        self.seed = seed
        self.config = config or {}
        self.fingerprints: Dict[str, str] = {}
        self.outputs: Dict[str, str] = {}
        self.output_digests: Dict[str, str] = {}
        self.metadata: Dict = {}
        self.status = 'started'
        self.error_message: Optional[str] = None
        self.started_at = now
        self.ended_at: Optional[datetime] = None
        self.duration_ms: Optional[int] = None
        self.host = host_snapshot()

    def add_output(self, name: str, path: Path):
        path = Path(path)
        self.outputs[name] = str(path)
        if path.exists():
            self.output_digests[name] = tree_digest(path)

    def complete(self, status: str = 'completed', error: str = None):
        self.status = status
        self.error_message = error
        self.ended_at = datetime.now()
        self.duration_ms = int((self.ended_at - self.started_at).total_seconds() * 1000)

    def content_hash(self) -> str:
        data = {k: v for k, v in self._raw_dict().items() if k not in VOLATILE_FIELDS}
        # output locations may differ between runs; their digests may not
        data.pop('outputs', None)
        data['config'] = {k: v for k, v in data['config'].items() if k != 'paths'}
        return hashlib.sha256(json.dumps(data, sort_keys=True, default=str).encode()).hexdigest()

    def _raw_dict(self) -> Dict:
        return {
            'record_id': self.record_id,
            'command': self.command,
            'config_hash': self.config_hash,
            'seed': self.seed,
            'config': self.config,
            'fingerprints': self.fingerprints,
            'outputs': self.outputs,
            'output_digests': self.output_digests,
            'metadata': self.metadata,
            'status': self.status,
            'error_message': self.error_message,
            'started_at': self.started_at.isoformat(),
            'ended_at': self.ended_at.isoformat() if self.ended_at else None,
            'duration_ms': self.duration_ms,
            'host': self.host,
        }

    def to_dict(self) -> Dict:
        data = self._raw_dict()
        data['content_hash'] = self.content_hash()
        return data


class AuditLogger:
    """
    Append-only manifest log.
    Each command writes exactly one record, also when it fails.
    """

    def __init__(self, manifest_dir: Path):
        self.manifest_dir = Path(manifest_dir)
        self.manifest_dir.mkdir(parents=True, exist_ok=True)
        self.manifest_log = self.manifest_dir / 'run_manifests.jsonl'
        self.logger = setup_logger('AuditLogger', self.manifest_dir / 'audit' / 'audit_system.log', console=False)

    @contextmanager
    def audit_action(self, command: str, config_hash: str, seed: int, config: Dict = None):
        """Context manager that writes the manifest when the command finishes"""
        manifest = RunManifest(command, config_hash, seed, config)
        try:
            yield manifest
            manifest.complete(status='completed')
        except BaseException as e:
            manifest.complete(status='failed', error=f"{type(e).__name__}: {e}")
            raise
        finally:
            self._write_record(manifest)

    def _write_record(self, manifest: RunManifest):
        with open(self.manifest_log, 'a') as f:
            f.write(json.dumps(manifest.to_dict(), default=str) + '\n')
        self.logger.info(f"[{manifest.record_id}] {manifest.command}: {manifest.status}")

    def read_manifests(self, command: str = None) -> List[Dict]:
        """Read manifests back, optionally filtered by command"""
        results = []
        if not self.manifest_log.exists():
            return results
        with open(self.manifest_log, 'r') as f:
            for line_number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ManifestParseError(self.manifest_log, line_number, str(e))
                if command and record.get('command') != command:
                    continue
                results.append(record)
        return results
