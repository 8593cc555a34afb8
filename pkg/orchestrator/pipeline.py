#!/usr/bin/env python3
"""
Pipeline - single command-line entry point

Commands:
- gen-data       write the synthetic product/defect corpus
- pretrain-vae   train the VAE on the corpus
- train-gen      fine-tune U-Net and anomaly tokens
- train-rmp      train the mask branch on the frozen generator
- generate       image-mask pairs (abnormal) or images (normal)
- evaluate       CSV report of generation and mask metrics
- ablate         run ablation arms end to end

Every command writes one run manifest; failures print a single machine-parsable
line on stderr and exit with the error class's code.
"""
import argparse
import shutil
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import torch

from backbone.checkpoint import fingerprint_state
from backbone.generator import load_vae
from inference.export import export_pairs, read_pairs
from inference.generator import GenerationRequest, generate, load_checkpoints
from metrics.features import FeatureExtractor
from metrics.report import build_report, generation_metrics, write_report
from orchestrator.ablation import SUMMARY_NAME, arm_overrides, fan_out, resolve_arms, write_summary
from recovery.audit_logger import AuditLogger
from recovery.error_recovery import ErrorRecoverySystem
from recovery.errors import ConfigurationError, DataError, RangeError, SeasError
from recovery.log_setup import setup_logger
from rmp.trainer import evaluate_rmp_on_corpus, train_rmp
from synthdata.corpus import Corpus, make_corpus, read_corpus, write_corpus
from synthdata.pairs_io import MANIFEST_NAME
from synthdata.products import ProductSpec
from training.config import RunConfig, load_config
from training.generator_trainer import train_generator
from training.vae_trainer import pretrain_vae

COMMANDS = ('gen-data', 'pretrain-vae', 'train-gen', 'train-rmp', 'generate', 'evaluate', 'ablate')
SEEDED_SECTIONS = ('data', 'vae', 'unet', 'prompt', 'train', 'rmp', 'inference')
FULL_CHAIN = ('gen-data', 'pretrain-vae', 'train-gen', 'train-rmp', 'generate', 'evaluate')
REPORT_NAME = 'report.csv'


class Pipeline:
    """
    Runs pipeline commands against one configuration.
    Checkpoints live in <cache>/checkpoints, manifests in paths.out_dir.
    """

    def __init__(self, config: RunConfig, out: Optional[Path] = None, force: bool = False):
        self.config = config
        self.cache_dir = config.paths.resolved_cache_dir()
        self.checkpoint_dir = self.cache_dir / 'checkpoints'
        self.data_dir = Path(config.paths.data_dir)
        self.out_root = Path(config.paths.out_dir)
        self.out = Path(out) if out else None
        self.force = force

        self.out_root.mkdir(parents=True, exist_ok=True)
        self.audit = AuditLogger(self.out_root)
        self.error_system = ErrorRecoverySystem(self.out_root)
        self.logger = setup_logger('Pipeline', self.out_root / 'logs' / 'pipeline.log')
        self.logger.info(f"Pipeline initialized: config {config.config_hash()}, cache {self.cache_dir}")

    @property
    def generated_dir(self) -> Path:
        return self.out or self.out_root / 'generated'

    def _seed_of(self, command: str) -> int:
        seeds = {
            'gen-data': self.config.data.seed,
            'pretrain-vae': self.config.vae.seed,
            'train-gen': self.config.train.seed,
            'train-rmp': self.config.rmp.seed,
            'generate': self.config.inference.seed,
        }
        return seeds.get(command, self.config.inference.seed)

    def _audit(self, command: str):
        return self.audit.audit_action(command, self.config.config_hash(), self._seed_of(command),
                                       self.config.to_dict())

    def _corpus(self):
        return read_corpus(self.data_dir)

    def _slots(self) -> List[Tuple[Optional[int], Path]]:
        """(anomaly type, checkpoint dir) of every generator; type None is the shared multi-type generator"""
        if not self.config.train.no_mixed:
            return [(None, self.checkpoint_dir)]
        num_types = len(self.config.data.defect_families)
        return [(n, self.checkpoint_dir / f'type_{n}') for n in range(1, num_types + 1)]

    def _slot_inputs(self, corpus: Corpus, anomaly_type: Optional[int]) -> Tuple[Corpus, RunConfig]:
        if anomaly_type is None:
            return corpus, self.config
        return corpus.single_type(anomaly_type), self.config.single_type(anomaly_type)

    def _routes(self, mode: str, anomaly_type: Optional[int]) -> List[Tuple[int, Optional[int], Path]]:
        """(exported type, type inside the generator, checkpoint dir) of every export"""
        slots = self._slots()
        if mode == 'normal':
            return [(0, None, slots[0][1])]
        num_types = len(self.config.data.defect_families)
        types = [anomaly_type] if anomaly_type is not None else list(range(1, num_types + 1))
        if slots[0][0] is None:
            return [(n, n, self.checkpoint_dir) for n in types]
        if anomaly_type is not None and not 1 <= anomaly_type <= num_types:
            raise RangeError(f"anomaly type {anomaly_type} outside [1, {num_types}]")
        return [(n, 1, self.checkpoint_dir / f'type_{n}') for n in types]

    def gen_data(self) -> Path:
        with self._audit('gen-data') as manifest:
            target = self.out or self.data_dir
            data = self.config.data
            corpus = make_corpus(ProductSpec.from_config(data), data.normal_count, data.abnormal_per_type,
                                 data.seed, data.workers)
            write_corpus(corpus, target, self.force)
            manifest.metadata['counts'] = {str(k): v for k, v in corpus.type_histogram().items()}
            manifest.metadata['consistency'] = corpus.metadata.get('consistency')
            manifest.add_output('corpus', target)
            return target

    def pretrain_vae(self) -> Dict:
        with self._audit('pretrain-vae') as manifest:
            result = pretrain_vae(self._corpus(), self.config, self.checkpoint_dir, self.error_system)
            manifest.fingerprints['vae'] = result['fingerprint']
            manifest.metadata['reconstruction_mae'] = result['reconstruction_mae']
            manifest.metadata['heldout_mae'] = result['heldout_mae']
            manifest.add_output('vae', self.checkpoint_dir / 'vae.pt')
            return result

    def train_gen(self) -> Dict:
        with self._audit('train-gen') as manifest:
            vae = load_vae(self.checkpoint_dir)
            corpus = self._corpus()
            results = {}
            for n, directory in self._slots():
                slot_corpus, slot_config = self._slot_inputs(corpus, n)
                if n is not None:
                    directory.mkdir(parents=True, exist_ok=True)
                    shutil.copy2(self.checkpoint_dir / 'vae.pt', directory / 'vae.pt')
                result = train_generator(slot_corpus, slot_config, vae, directory, self.error_system)
                prefix = _slot_prefix(n)
                manifest.fingerprints.update({prefix + k: v for k, v in result['fingerprints'].items()})
                for name in ('unet', 'tokens'):
                    manifest.add_output(prefix + name, directory / f'{name}.pt')
                results[n] = result
            manifest.metadata['alignment_iou'] = by_slot({n: r['alignment'] for n, r in results.items()})
            manifest.metadata['total_steps'] = sum(r['total_steps'] for r in results.values())
            return results

    def train_rmp(self) -> Dict:
        with self._audit('train-rmp') as manifest:
            corpus = self._corpus()
            results, quality = {}, {}
            for n, directory in self._slots():
                slot_corpus, slot_config = self._slot_inputs(corpus, n)
                result = train_rmp(slot_corpus, directory, slot_config, directory, self.error_system)
                prefix = _slot_prefix(n)
                manifest.fingerprints[prefix + 'generator'] = result['generator_fingerprint']
                manifest.fingerprints[prefix + 'rmp'] = result['fingerprint']
                quality[n] = evaluate_rmp_on_corpus(result['model'], result['rmp'], slot_corpus, slot_config,
                                                    self.config.rmp.seed)
                manifest.add_output(prefix + 'rmp', directory / 'rmp.pt')
                results[n] = result
            manifest.metadata['mask_quality'] = by_slot(quality)
            return results

    def generate(self, mode: str = 'abnormal', anomaly_type: Optional[int] = None) -> List[Path]:
        with self._audit('generate') as manifest:
            pool = [s.image for s in self._corpus().normal]
            loaded = {}
            targets = []
            for exported, inner, directory in self._routes(mode, anomaly_type):
                if directory not in loaded:
                    loaded[directory] = load_checkpoints(directory, with_rmp=mode == 'abnormal')
                model, rmp = loaded[directory]
                fingerprints = model.fingerprints()
                if rmp is not None:
                    fingerprints['rmp'] = fingerprint_state(rmp.state_dict())
                request = GenerationRequest.from_config(self.config.inference, mode, inner).validate(model.num_types)
                samples = generate(request, model, pool, rmp)
                for sample in samples:
                    sample.anomaly_type = exported
                target = self.generated_dir / (f'type_{exported}' if mode == 'abnormal' else 'normal')
                export_pairs(samples, target, request, fingerprints, self.config.config_hash(), self.force)
                manifest.add_output(target.name, target)
                prefix = '' if directory == self.checkpoint_dir else f'{directory.name}/'
                manifest.fingerprints.update({prefix + k: v for k, v in fingerprints.items()})
                targets.append(target)
            manifest.metadata['mode'] = mode
            return targets

    def evaluate(self) -> Path:
        with self._audit('evaluate') as manifest:
            corpus = self._corpus()
            metrics = self.config.metrics
            extractor = FeatureExtractor(metrics.feature_seed, metrics.num_classes)
            exports = sorted(p.parent for p in self.generated_dir.glob(f'*/{MANIFEST_NAME}'))
            if not exports:
                raise DataError(f"no generated exports under {self.generated_dir}")
            category = self.config.data.texture
            normal_images = [s.image for s in corpus.normal]
            rows = []
            for export in exports:
                images, masks, records = read_pairs(export)
                anomaly_type = int(records[0]['anomaly_type'])
                if anomaly_type == 0:
                    references = corpus.normal
                    reference_masks = [None] * len(references)
                else:
                    references = corpus.by_type(anomaly_type)
                    reference_masks = [s.mask for s in references]
                row = generation_metrics(images, masks, [s.image for s in references], reference_masks,
                                         extractor, metrics.kid_degree, normal_references=normal_images)
                rows.append({'category': category, 'anomaly_type': anomaly_type,
                             'mode': records[0].get('mode'), **row})
            for n, directory in self._slots():
                if not (directory / 'rmp.pt').exists():
                    continue
                slot_corpus, slot_config = self._slot_inputs(corpus, n)
                model, rmp = load_checkpoints(directory)
                detection = evaluate_rmp_on_corpus(model, rmp, slot_corpus, slot_config, self.config.rmp.seed)
                rows.append({'category': category, 'anomaly_type': n, 'mode': 'rmp', **detection})
            report = build_report(rows, extractor.fingerprint, self.config.config_hash())
            path = write_report(report, (self.out or self.generated_dir) / REPORT_NAME)
            manifest.fingerprints['features'] = extractor.fingerprint
            manifest.add_output('report', path)
            return path

    def run_chain(self, commands: Sequence[str] = FULL_CHAIN):
        for command in commands:
            self.logger.info(f"Running {command}")
            if command == 'gen-data':
                if (self.data_dir / MANIFEST_NAME).exists():
                    self.logger.info(f"Reusing corpus in {self.data_dir}")
                    continue
                self.gen_data()
            elif command == 'generate':
                self.generate('abnormal')
                self.generate('normal')
            else:
                getattr(self, command.replace('-', '_'))()


def _slot_prefix(anomaly_type: Optional[int]) -> str:
    return '' if anomaly_type is None else f'type_{anomaly_type}/'


def by_slot(values: Dict[Optional[int], object]):
    """Manifest metadata: the shared generator's value, or one entry per anomaly-type generator"""
    if None in values:
        return values[None]
    return {f'type_{n}': value for n, value in values.items()}


def run_arm(job: Dict) -> Dict:
    """Full chain for one ablation arm in its own cache and output directory"""
    root = Path(job['root']) / job['arm']
    overrides = list(job['overrides']) + arm_overrides(job['arm']) + [
        f'paths.cache_dir={root / "cache"}',
        f'paths.out_dir={root}',
        f'paths.data_dir={job["data_dir"]}',
    ]
    config = load_config(job['config_path'], overrides)
    pipeline = Pipeline(config, force=True)
    outcome = pipeline.error_system.run_with_recovery(pipeline.run_chain, f"ablate:{job['arm']}")
    result = {'arm': job['arm'], 'status': outcome.status, 'attempts': outcome.attempts,
              'report': str(pipeline.generated_dir / REPORT_NAME)}
    if not outcome.completed:
        result['error'] = outcome.error.machine_line()
        result['error_report'] = str(pipeline.error_system.generate_error_report())
    return result


def ablate(config_path: Optional[Path], overrides: List[str], arms: Sequence[str], root: Path,
           data_dir: Path, workers: int = 0) -> List[Dict]:
    """Run every arm, then write one summary row per arm and report row to <root>/summary.csv"""
    names = resolve_arms(arms)
    jobs = [{'arm': arm, 'config_path': config_path, 'overrides': overrides, 'root': str(root),
             'data_dir': str(data_dir)} for arm in names]
    results = fan_out(run_arm, jobs, workers)
    write_summary(results, Path(root) / SUMMARY_NAME)
    return results


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='seas', description='Anomaly image-mask pair generation pipeline')
    parser.add_argument('command', choices=COMMANDS)
    parser.add_argument('--config', type=Path, default=None, help='YAML run configuration')
    parser.add_argument('--seed', type=int, default=None, help='seed for every seeded section')
    parser.add_argument('--out', type=Path, default=None, help='output directory of the command')
    parser.add_argument('--arm', action='append', default=[], help='ablation arm (repeatable, or "all")')
    parser.add_argument('--force', action='store_true', help='overwrite non-empty output directories')
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='SECTION.KEY=VALUE',
                        help='override one config value (repeatable)')
    parser.add_argument('--mode', choices=('abnormal', 'normal'), default='abnormal')
    parser.add_argument('--type', dest='anomaly_type', type=int, default=None, help='anomaly type (1-based)')
    parser.add_argument('--workers', type=int, default=0, help='ablation worker processes (0 = physical cores)')
    return parser


def overrides_from_args(args: argparse.Namespace) -> List[str]:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f'{section}.seed={args.seed}' for section in SEEDED_SECTIONS]
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the process exit code"""
    args = build_parser().parse_args(argv)
    pipeline = None
    try:
        overrides = overrides_from_args(args)
        config = load_config(args.config, overrides)
        torch.manual_seed(config.inference.seed)
        if args.command == 'ablate':
            if not args.arm:
                raise ConfigurationError("ablate needs at least one --arm")
            root = args.out or Path(config.paths.out_dir) / 'ablations'
            results = ablate(args.config, overrides, args.arm, root, Path(config.paths.data_dir), args.workers)
            failed = [r for r in results if r['status'] == 'failed']
            for result in results:
                print(f"arm={result['arm']} status={result['status']} attempts={result['attempts']}")
            print(f"summary={root / SUMMARY_NAME}")
            if failed:
                print(failed[0]['error'], file=sys.stderr)
                return 1
            return 0

        pipeline = Pipeline(config, args.out, args.force)
        if args.command == 'generate':
            pipeline.generate(args.mode, args.anomaly_type)
        else:
            getattr(pipeline, args.command.replace('-', '_'))()
        return 0
    except SeasError as e:
        if pipeline is not None:
            pipeline.error_system.report_error(e, args.command)
        print(e.machine_line(), file=sys.stderr)
        return e.exit_code
    except Exception as e:
        message = str(e).replace('"', "'").replace('\n', ' ')
        print(f'error={type(e).__name__} category=unknown message="{message}"', file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
