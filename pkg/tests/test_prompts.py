"""Unbalanced abnormal prompts and the token table"""
import pytest
import torch

from prompts.ua_prompt import (BASE_VOCAB, PAD, TokenTable, anomaly_token_numbers, build_normal_prompt,
                               build_prompt, embed)
from recovery.errors import ConfigurationError, LookupFailure, RangeError, ValidationError
from training.config import PromptConfig


@pytest.fixture
def prompt_config():
    return PromptConfig(embedding_dim=8)


@pytest.fixture
def table(prompt_config):
    return TokenTable.create(prompt_config, num_types=3)


class TestAnomalyTokenNumbers:
    @pytest.mark.parametrize('anomaly_type, count, expected', [
        (1, 4, [1, 2, 3, 4]),
        (3, 4, [9, 10, 11, 12]),
        (1, 1, [1]),
        (2, 8, list(range(9, 17))),
    ])
    def test_index_formula(self, anomaly_type, count, expected):
        assert anomaly_token_numbers(anomaly_type, count) == expected


class TestTokenTable:
    def test_growth(self):
        table = TokenTable(8)
        base = table.base_embeddings.clone()
        for i in range(5):
            table.add_placeholder(f'df{i + 1}', 'defect', 0.1)
        assert table.num_rows == len(BASE_VOCAB) + 5
        assert torch.equal(table.base_embeddings, base)
        assert table.trainable_mask.sum() == 5

    def test_create_sizes_rows_for_all_types(self, table, prompt_config):
        assert table.num_rows == len(BASE_VOCAB) + prompt_config.n_normal_tokens + 4 * 3

    def test_placeholders_start_distinct_near_initializer(self, table):
        rows = table.rows
        df1, df2 = rows[table.index('df1')], rows[table.index('df2')]
        assert not torch.equal(df1, df2)
        assert torch.norm(df1 - rows[table.index('defect')]) < torch.norm(rows[table.index('defect')])

    def test_set_row_and_embed(self, table, prompt_config):
        row = table.index('df5')
        value = torch.arange(8, dtype=torch.float32)
        table.set_row(row, value)
        prompt = build_prompt(table, 2, prompt_config, 3)
        conditioning = embed(table, prompt)
        assert torch.equal(conditioning[prompt.df_columns[0]], value)

    def test_base_rows_are_read_only(self, table):
        with pytest.raises(ValidationError):
            table.set_row(table.index('defect'), torch.zeros(8))

    def test_unknown_token(self, table):
        with pytest.raises(LookupFailure):
            table.index('df99')

    def test_duplicate_placeholder(self, table):
        with pytest.raises(ConfigurationError):
            table.add_placeholder('ob1')

    def test_archive_round_trip(self, table):
        extra = table.archive_extra()
        rebuilt = TokenTable.from_archive({**extra, 'state_dict': table.state_dict()})
        assert torch.equal(rebuilt.rows, table.rows)
        assert rebuilt.added_ids == table.added_ids


class TestPrompts:
    def test_abnormal_layout(self, table, prompt_config):
        prompt = build_prompt(table, 3, prompt_config, 3)
        assert prompt.anomaly_tokens == ['df9', 'df10', 'df11', 'df12']
        assert prompt.padded_length == 16
        assert prompt.ob_columns == [1]
        words = [list(table.vocab)[i] if i < len(BASE_VOCAB) else None for i in prompt.token_ids]
        assert words[0] == 'a' and words[2] == 'with'
        assert words[-1] == PAD
        for column, number in zip(prompt.df_columns, prompt.anomaly_token_numbers):
            assert prompt.token_ids[column] == table.index(f'df{number}')

    def test_commas_between_anomaly_tokens(self, table, prompt_config):
        prompt = build_prompt(table, 1, prompt_config, 3)
        comma = table.index(',')
        assert [prompt.token_ids[c + 1] for c in prompt.df_columns[:-1]] == [comma] * 3

    def test_normal_prompt_has_no_anomaly_columns(self, table, prompt_config):
        prompt = build_normal_prompt(table, prompt_config)
        anomaly_rows = {table.index(f'df{k}') for k in range(1, 13)}
        assert prompt.is_normal
        assert prompt.df_columns == []
        assert not anomaly_rows & set(prompt.token_ids)
        assert embed(table, prompt).shape == (16, 8)
        assert torch.equal(embed(table, prompt), embed(table, build_normal_prompt(table, prompt_config)))

    def test_type_out_of_range(self, table, prompt_config):
        with pytest.raises(RangeError):
            build_prompt(table, 4, prompt_config, 3)
        with pytest.raises(RangeError):
            build_prompt(table, 0, prompt_config, 3)

    def test_prompt_too_long(self):
        config = PromptConfig(embedding_dim=8, n_anomaly_tokens=16)
        table = TokenTable.create(config, num_types=1)
        with pytest.raises(ConfigurationError):
            build_prompt(table, 1, config, 1)

    def test_typical_prompt_uses_frozen_words(self):
        config = PromptConfig(embedding_dim=8, with_tp=True)
        table = TokenTable.create(config, num_types=2)
        assert table.num_rows == len(BASE_VOCAB)
        assert not table.added.requires_grad
        prompt = build_prompt(table, 2, config, 2, families=['scratch', 'blob'])
        assert prompt.token_ids[prompt.df_columns[0]] == table.index('blob')
        assert prompt.token_ids[prompt.ob_columns[0]] == table.index('object')
