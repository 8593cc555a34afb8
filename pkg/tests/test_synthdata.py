"""Synthetic product corpora and the shared image/mask/manifest layout"""
import json

import numpy as np
import pytest

from recovery.errors import DataError, ExportError, ManifestParseError, ValidationError
from synthdata.corpus import Corpus, make_corpus, read_corpus, write_corpus
from synthdata.pairs_io import (MANIFEST_NAME, prepare_output_dir, read_manifest, read_mask, write_manifest,
                                write_mask)
from synthdata.products import (AnomalySample, DefectFamily, ProductSpec, generate_sample, render_normal,
                                stamp_defect, texture_structure)
from training.config import DataConfig


@pytest.fixture
def spec():
    return ProductSpec.from_config(DataConfig(image_size=32))


class TestProducts:
    def test_base_structure_is_shared(self, spec):
        assert np.array_equal(texture_structure(spec), texture_structure(spec))
        a = render_normal(spec, np.random.default_rng(0))
        b = render_normal(spec, np.random.default_rng(1))
        assert not np.array_equal(a, b)

    @pytest.mark.parametrize('family', list(DefectFamily))
    def test_stamp_changes_exactly_the_mask(self, spec, family):
        image = render_normal(spec, np.random.default_rng(3))
        stamped, mask = stamp_defect(image, family, np.random.default_rng(4))
        assert mask.any()
        assert np.array_equal(stamped[mask == 0], image[mask == 0])

    def test_generated_mask_matches_changed_pixels(self, spec):
        seed = np.random.SeedSequence(11)
        sample = generate_sample(spec, 1, seed)
        normal = generate_sample(spec, 0, seed)
        changed = np.any(sample.image != normal.image, axis=-1)
        assert np.array_equal(changed, sample.mask.astype(bool))

    def test_sample_invariants(self):
        with pytest.raises(ValidationError):
            AnomalySample(np.zeros((4, 4, 3)), np.ones((4, 4), dtype=np.uint8), 0)
        with pytest.raises(ValidationError):
            AnomalySample(np.zeros((4, 4, 3)), np.zeros((4, 4), dtype=np.uint8), 2)
        with pytest.raises(ValidationError):
            AnomalySample(np.zeros((4, 4)), np.zeros((4, 4), dtype=np.uint8), 0)


class TestCorpus:
    def test_deterministic_per_seed(self, spec):
        a = make_corpus(spec, 2, 1, seed=5)
        b = make_corpus(spec, 2, 1, seed=5)
        c = make_corpus(spec, 2, 1, seed=6)
        assert all(np.array_equal(x.image, y.image) for x, y in zip(a.samples(), b.samples()))
        assert not np.array_equal(a.normal[0].image, c.normal[0].image)

    def test_histogram(self, tiny_corpus):
        assert tiny_corpus.type_histogram() == {0: 4, 1: 2, 2: 2}
        assert all(s.anomaly_type == 2 for s in tiny_corpus.by_type(2))

    def test_consistency_self_check_recorded(self, tiny_corpus):
        consistency = tiny_corpus.metadata['consistency']
        assert set(consistency) == {'normal_structure_correlation', 'anomaly_region_correlation', 'passed'}

    def test_partitions_are_checked(self, spec, tiny_corpus):
        with pytest.raises(ValidationError):
            Corpus(spec, tiny_corpus.abnormal[:1], [])
        with pytest.raises(ValidationError):
            make_corpus(spec, 0, 1, seed=0)

    def test_write_read_round_trip(self, tiny_corpus, tmp_path):
        write_corpus(tiny_corpus, tmp_path / 'corpus')
        loaded = read_corpus(tmp_path / 'corpus')
        assert loaded.type_histogram() == tiny_corpus.type_histogram()
        assert loaded.spec == tiny_corpus.spec
        for original, restored in zip(tiny_corpus.samples(), loaded.samples()):
            assert np.array_equal(original.image, restored.image)
            assert np.array_equal(original.mask, restored.mask)

    def test_missing_mask_file(self, tiny_corpus, tmp_path):
        directory = write_corpus(tiny_corpus, tmp_path / 'corpus')
        record = next(r for r in read_manifest(directory) if r['mask'])
        (directory / record['mask']).unlink()
        with pytest.raises(DataError):
            read_corpus(directory)

    def test_abnormal_record_without_mask(self, tiny_corpus, tmp_path):
        directory = write_corpus(tiny_corpus, tmp_path / 'corpus')
        records = read_manifest(directory)
        for record in records:
            record['mask'] = None
        write_manifest(directory, records)
        with pytest.raises(DataError):
            read_corpus(directory)

    def test_refuses_non_empty_directory(self, tiny_corpus, tmp_path):
        directory = write_corpus(tiny_corpus, tmp_path / 'corpus')
        with pytest.raises(ExportError):
            write_corpus(tiny_corpus, directory)
        write_corpus(tiny_corpus, directory, force=True)


class TestPairsIO:
    def test_corrupt_manifest_line(self, tmp_path):
        lines = [json.dumps({'image': 'images/00000.png', 'anomaly_type': 0}), '{not json']
        (tmp_path / MANIFEST_NAME).write_text('\n'.join(lines) + '\n')
        with pytest.raises(ManifestParseError) as info:
            read_manifest(tmp_path)
        assert info.value.line_number == 2

    def test_record_without_required_keys(self, tmp_path):
        (tmp_path / MANIFEST_NAME).write_text(json.dumps({'image': 'x.png'}) + '\n')
        with pytest.raises(ManifestParseError):
            read_manifest(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            read_manifest(tmp_path)

    def test_mask_png_holds_0_and_255(self, tmp_path):
        from PIL import Image

        mask = np.zeros((8, 8), dtype=np.uint8)
        mask[2:4, 3:6] = 1
        path = tmp_path / 'm.png'
        write_mask(mask, path)
        assert set(np.unique(np.asarray(Image.open(path)))) == {0, 255}
        assert np.array_equal(read_mask(path), mask)

    def test_prepare_output_dir(self, tmp_path):
        directory = prepare_output_dir(tmp_path / 'out')
        assert (directory / 'images').is_dir() and (directory / 'masks').is_dir()
        (directory / 'images' / 'stale.png').write_bytes(b'')
        with pytest.raises(ExportError):
            prepare_output_dir(directory)
        prepare_output_dir(directory, force=True)
        assert not (directory / 'images' / 'stale.png').exists()
