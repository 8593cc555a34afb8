"""
Error Recovery System - records pipeline failures and decides how to react
Every error that escapes a command or a training loop lands in error_log.jsonl
"""
import json
import traceback as tb
import uuid
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from recovery.errors import ErrorCategory, SeasError
from recovery.log_setup import setup_logger


class ErrorSeverity(Enum):
    WARNING = "warning"
    ERROR = "error"
    CRITICAL = "critical"


class RecoveryAction(Enum):
    RETRY = "retry"
    SKIP = "skip"
    ABORT = "abort"


@dataclass
class ErrorRecord:
    """One recorded failure; serialised as one error_log.jsonl line"""
    error_id: str
    category: ErrorCategory
    severity: ErrorSeverity
    error_class: str
    message: str
    component: str
    traceback: Optional[str] = None
    recovery_attempts: int = 0
    recovery_action: Optional[RecoveryAction] = None
    timestamp: datetime = field(default_factory=datetime.now)

    @classmethod
    def from_exception(cls, error: BaseException, component: str, severity: ErrorSeverity,
                       attempt: int) -> 'ErrorRecord':
        return cls(
            error_id=f"ERR-{uuid.uuid4().hex[:8].upper()}",
            category=error.category if isinstance(error, SeasError) else ErrorCategory.UNKNOWN,
            severity=severity,
            error_class=type(error).__name__,
            message=str(error),
            component=component,
            traceback=''.join(tb.format_exception(type(error), error, error.__traceback__)),
            recovery_attempts=attempt,
        )

    def to_dict(self) -> dict:
        return {
            'error_id': self.error_id,
            'category': self.category.value,
            'severity': self.severity.value,
            'error_class': self.error_class,
            'message': self.message,
            'component': self.component,
            'traceback': self.traceback,
            'timestamp': self.timestamp.isoformat(),
            'recovery_attempts': self.recovery_attempts,
            'recovery_action': self.recovery_action.value if self.recovery_action else None,
        }


@dataclass
class RecoveryStrategy:
    """How often a category may be retried, and whether the failing item may be skipped"""
    category: ErrorCategory
    max_retries: int = 0
    severity: ErrorSeverity = ErrorSeverity.ERROR
    skippable: bool = False

    def action_for(self, attempt: int) -> RecoveryAction:
        if attempt <= self.max_retries:
            return RecoveryAction.RETRY
        if self.skippable:
            return RecoveryAction.SKIP
        return RecoveryAction.ABORT


@dataclass
class RecoveryOutcome:
    """Result of a call run under the recovery strategies"""
    status: str
    attempts: int
    value: Any = None
    error: Optional[SeasError] = None
    record: Optional[ErrorRecord] = None

    @property
    def completed(self) -> bool:
        return self.status == 'completed'


DEFAULT_STRATEGIES = (
    RecoveryStrategy(ErrorCategory.FILE_SYSTEM, max_retries=2),
    RecoveryStrategy(ErrorCategory.DIVERGENCE, severity=ErrorSeverity.CRITICAL),
    RecoveryStrategy(ErrorCategory.VALIDATION, severity=ErrorSeverity.WARNING, skippable=True),
    RecoveryStrategy(ErrorCategory.UNKNOWN, severity=ErrorSeverity.CRITICAL),
)


class ErrorRecoverySystem:
    """
    Centralized error recording for pipeline commands.
    Recovery actions come from the per-category strategies in DEFAULT_STRATEGIES.
    """

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        self.audit_folder = self.run_dir / 'audit'
        self.error_log = self.audit_folder / 'error_log.jsonl'
        self.audit_folder.mkdir(parents=True, exist_ok=True)

        self.logger = self._setup_logger()
        self.error_records: Dict[str, ErrorRecord] = {}
        self.recovery_strategies = {s.category: s for s in DEFAULT_STRATEGIES}

    def _setup_logger(self):
        return setup_logger('ErrorRecoverySystem', self.audit_folder / 'error_recovery.log', console=False)

    def strategy_for(self, category: ErrorCategory) -> RecoveryStrategy:
        return self.recovery_strategies.get(category, RecoveryStrategy(category))

    def report_error(self, error: BaseException, component: str, attempt: int = 1) -> ErrorRecord:
        """Record an error and decide the recovery action"""
        category = error.category if isinstance(error, SeasError) else ErrorCategory.UNKNOWN
        strategy = self.strategy_for(category)
        record = ErrorRecord.from_exception(error, component, strategy.severity, attempt)
        record.recovery_action = strategy.action_for(attempt)
        self.error_records[record.error_id] = record

        with open(self.error_log, 'a') as f:
            f.write(json.dumps(record.to_dict()) + '\n')

        self.logger.error(f"[{record.error_id}] {component}: {record.error_class}: {record.message} "
                          f"-> {record.recovery_action.value}")
        return record

    def run_with_recovery(self, func: Callable[[], Any], component: str) -> RecoveryOutcome:
        """
        Call func and act on the recovery action of every pipeline error it raises:
        retry, report the item as skipped, or report it as failed.
        Errors outside the SeasError hierarchy propagate unchanged.
        """
        attempt = 1
        while True:
            try:
                return RecoveryOutcome('completed', attempt, value=func())
            except SeasError as e:
                record = self.report_error(e, component, attempt)
                if record.recovery_action is RecoveryAction.RETRY:
                    self.logger.warning(f"{component}: retrying after {record.error_class} (attempt {attempt})")
                    attempt += 1
                    continue
                status = 'skipped' if record.recovery_action is RecoveryAction.SKIP else 'failed'
                return RecoveryOutcome(status, attempt, error=e, record=record)

    def load_records(self) -> List[dict]:
        """Read every recorded error back from the log"""
        if not self.error_log.exists():
            return []
        lines = self.error_log.read_text().splitlines()
        return [json.loads(line) for line in lines if line.strip()]

    def get_error_summary(self) -> dict:
        records = self.load_records()
        return {
            'total_errors': len(records),
            'by_category': dict(Counter(r['category'] for r in records)),
            'by_component': dict(Counter(r['component'] for r in records)),
        }

    def generate_error_report(self) -> Path:
        """Write a Markdown report of every recorded error"""
        summary = self.get_error_summary()
        report_path = self.audit_folder / f'Error_Report_{datetime.now().strftime("%Y%m%d_%H%M%S")}.md'

        report_content = f'''# Pipeline Error Report

**Generated:** {datetime.now().isoformat()}
**Total errors:** {summary['total_errors']}

## Errors by Category

'''
        for category, count in summary['by_category'].items():
            report_content += f'- **{category}**: {count}\n'

        report_content += '\n## Errors by Component\n\n'
        for component, count in summary['by_component'].items():
            report_content += f'- **{component}**: {count}\n'

        report_content += '\n## Recent Errors\n'
        for record in self.load_records()[-10:]:
            report_content += f'''
### {record['error_id']} - {record['error_class']}

- **Component:** {record['component']}
- **Message:** {record['message']}
- **Action:** {record['recovery_action']}
- **Time:** {record['timestamp']}
'''
        report_path.write_text(report_content)
        return report_path

