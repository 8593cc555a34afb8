"""
Base Trainer - template for the generator, RMP and VAE training loops
"""
from abc import ABC, abstractmethod
from datetime import datetime
from pathlib import Path
from typing import Dict, Optional

import torch
from tqdm import tqdm

from recovery.error_recovery import ErrorRecoverySystem
from recovery.errors import DivergenceError
from recovery.log_setup import setup_logger

TRAIN_LOG = 'train_log.txt'


class BaseTrainer(ABC):
    """Base class for all training loops"""

    def __init__(self, run_dir: Path, total_steps: int, seed: int = 0,
                 error_system: Optional[ErrorRecoverySystem] = None):
        self.run_dir = Path(run_dir)
        self.logs = self.run_dir / 'logs'
        self.train_log = self.run_dir / TRAIN_LOG
        self.total_steps = total_steps
        self.seed = seed
        self.generator = torch.Generator().manual_seed(seed)
        self.error_system = error_system
        self.history = []

        # Ensure directories exist
        self.logs.mkdir(parents=True, exist_ok=True)
        self.logger = self._setup_logger()

    def _setup_logger(self):
        """Configure logging for the trainer"""
        return setup_logger(self.__class__.__name__, self.logs / f'{self.__class__.__name__}.log')

    @abstractmethod
    def train_step(self, step: int) -> Dict[str, float]:
        """Run one optimisation step and return its loss values"""
        pass

    def on_start(self):
        pass

    def on_finish(self):
        pass

    def log_step(self, line: str):
        """Append one loss line to the training log"""
        with open(self.train_log, 'a', encoding='utf-8') as f:
            f.write(line + '\n')

    def log_activity(self, message: str):
        """Write an activity line (start, finish, alignment checks) to the training log"""
        timestamp = datetime.now().isoformat()
        with open(self.train_log, 'a', encoding='utf-8') as f:
            f.write(f'# {timestamp} {self.__class__.__name__}: {message}\n')

    def run(self) -> list:
        """Main training loop"""
        self.logger.info(f'Starting {self.__class__.__name__} for {self.total_steps} steps')
        self.log_activity(f'started ({self.total_steps} steps, seed {self.seed})')
        self.on_start()

        progress = tqdm(range(self.total_steps), desc=self.__class__.__name__, leave=False)
        for step in progress:
            try:
                values = self.train_step(step)
            except DivergenceError as e:
                self.logger.error(f'Divergence: {e}')
                self.log_activity(f'aborted: {e}')
                if self.error_system is not None:
                    self.error_system.report_error(e, self.__class__.__name__)
                raise
            self.history.append(values)
            progress.set_postfix(loss=f"{values.get('total', 0.0):.4f}")

        self.on_finish()
        self.log_activity('finished')
        self.logger.info(f'{self.__class__.__name__} finished')
        return self.history
