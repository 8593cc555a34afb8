"""
Unbalanced abnormal prompts and the learnable token table

Prompt layout for anomaly type n:  "a <ob1..obN'> with <df_k>, <df_k+1>, ..." padded to Z
Placeholders: ob1..ob{N'} are shared by all types; type n owns df{N(n-1)+1}..df{Nn}.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn as nn

from recovery.errors import ConfigurationError, LookupFailure, RangeError, ValidationError
from training.config import PromptConfig

PAD = '<pad>'
BASE_VOCAB = (PAD, 'a', 'with', ',', 'object', 'defect', 'damage', 'flaw', 'scratch', 'blob', 'hole')
GENERIC_DEFECT_WORDS = ('defect', 'damage', 'flaw')


def normal_token_names(config: PromptConfig) -> List[str]:
    return [f'ob{i}' for i in range(1, config.n_normal_tokens + 1)]


def anomaly_token_numbers(anomaly_type: int, n_anomaly_tokens: int) -> List[int]:
    """Global placeholder numbers of type n: N(n-1)+1 .. Nn"""
    return list(range(n_anomaly_tokens * (anomaly_type - 1) + 1, n_anomaly_tokens * anomaly_type + 1))


class TokenTable(nn.Module):
    """
    Frozen base rows followed by trainable placeholder rows.
    Adding a placeholder appends one row; existing rows are never rewritten.
    """

    def __init__(self, embedding_dim: int, seed: int = 0):
        super().__init__()
        self.embedding_dim = embedding_dim
        generator = torch.Generator().manual_seed(seed)
        self.register_buffer('base_embeddings', torch.randn(len(BASE_VOCAB), embedding_dim, generator=generator))
        self.added = nn.Parameter(torch.zeros(0, embedding_dim))
        self.vocab: Dict[str, int] = {word: i for i, word in enumerate(BASE_VOCAB)}
        self.added_ids: Dict[str, int] = {}

    @property
    def base_vocab_size(self) -> int:
        return len(BASE_VOCAB)

    @property
    def num_rows(self) -> int:
        return self.base_vocab_size + self.added.shape[0]

    @property
    def rows(self) -> torch.Tensor:
        return torch.cat([self.base_embeddings, self.added], dim=0)

    @property
    def trainable_mask(self) -> torch.Tensor:
        mask = torch.zeros(self.num_rows, dtype=torch.bool)
        mask[self.base_vocab_size:] = True
        return mask

    def index(self, token: str) -> int:
        if token in self.vocab:
            return self.vocab[token]
        if token in self.added_ids:
            return self.added_ids[token]
        raise LookupFailure(f"unknown token: {token}")

    def add_placeholder(self, name: str, initializer: Optional[str] = None, jitter: float = 0.0,
                        generator: Optional[torch.Generator] = None) -> int:
        """Append one trainable row, initialised from an existing word plus Gaussian jitter"""
        if name in self.vocab or name in self.added_ids:
            raise ConfigurationError(f"token already exists: {name}")
        with torch.no_grad():
            if initializer is not None:
                row = self.rows[self.index(initializer)].clone()
            else:
                row = torch.zeros(self.embedding_dim, dtype=self.added.dtype)
            if jitter:
                row = row + jitter * torch.randn(self.embedding_dim, generator=generator, dtype=row.dtype)
            grown = torch.cat([self.added.detach(), row.to(self.added.dtype)[None]], dim=0)
        self.added = nn.Parameter(grown, requires_grad=self.added.requires_grad)
        row_index = self.num_rows - 1
        self.added_ids[name] = row_index
        return row_index

    def set_row(self, row_index: int, value: torch.Tensor):
        if row_index < self.base_vocab_size:
            raise ValidationError(f"row {row_index} belongs to the frozen base vocabulary")
        if row_index >= self.num_rows:
            raise LookupFailure(f"row {row_index} does not exist")
        with torch.no_grad():
            self.added[row_index - self.base_vocab_size] = value

    def embed_ids(self, token_ids: Sequence[int]) -> torch.Tensor:
        ids = torch.as_tensor(list(token_ids), dtype=torch.long)
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.num_rows):
            raise LookupFailure(f"token ids outside table of {self.num_rows} rows")
        return self.rows[ids]

    def archive_extra(self) -> Dict:
        return {'added_ids': dict(self.added_ids), 'base_vocab': list(BASE_VOCAB)}

    @classmethod
    def from_archive(cls, archive: Dict) -> 'TokenTable':
        """Rebuild a table from a tokens checkpoint"""
        if tuple(archive['base_vocab']) != BASE_VOCAB:
            raise LookupFailure("checkpoint base vocabulary differs from this build")
        state = archive['state_dict']
        table = cls(state['base_embeddings'].shape[1])
        table.added = nn.Parameter(torch.zeros_like(state['added']))
        table.added_ids = {k: int(v) for k, v in archive['added_ids'].items()}
        table.load_state_dict(state)
        return table

    @classmethod
    def create(cls, config: PromptConfig, num_types: int) -> 'TokenTable':
        """Base table plus every placeholder a run with num_types anomaly types needs"""
        table = cls(config.embedding_dim, seed=config.seed)
        if config.with_tp:
            table.added.requires_grad_(False)
            return table
        generator = torch.Generator().manual_seed(config.seed + 1)
        for name in normal_token_names(config):
            table.add_placeholder(name, 'object', config.init_jitter, generator)
        for number in range(1, config.n_anomaly_tokens * num_types + 1):
            table.add_placeholder(f'df{number}', 'defect', config.init_jitter, generator)
        return table


@dataclass
class UAPrompt:
    anomaly_type: int
    normal_tokens: List[str]
    anomaly_tokens: List[str]
    token_ids: List[int]
    ob_columns: List[int]
    df_columns: List[int] = field(default_factory=list)
    anomaly_token_numbers: List[int] = field(default_factory=list)

    def __post_init__(self):
        columns = self.ob_columns + self.df_columns
        if len(set(columns)) != len(columns):
            raise ValidationError("prompt token columns must be unique")

    @property
    def padded_length(self) -> int:
        return len(self.token_ids)

    @property
    def is_normal(self) -> bool:
        return self.anomaly_type == 0


def _assemble(table: TokenTable, normal_tokens: List[str], anomaly_tokens: List[str],
              padded_length: int, anomaly_type: int, numbers: List[int]) -> UAPrompt:
    words = ['a'] + list(normal_tokens)
    use_commas = False
    if anomaly_tokens:
        with_commas = 2 * len(anomaly_tokens) - 1
        use_commas = len(words) + 1 + with_commas <= padded_length
        words.append('with')
    ob_columns = list(range(1, 1 + len(normal_tokens)))
    df_columns = []
    for i, token in enumerate(anomaly_tokens):
        if i and use_commas:
            words.append(',')
        df_columns.append(len(words))
        words.append(token)
    if len(words) > padded_length:
        raise ConfigurationError(f"prompt needs {len(words)} tokens but padded length is {padded_length}")
    words += [PAD] * (padded_length - len(words))
    token_ids = [table.index(w) for w in words]
    return UAPrompt(anomaly_type, list(normal_tokens), list(anomaly_tokens), token_ids,
                    ob_columns, df_columns, numbers)


def build_prompt(table: TokenTable, anomaly_type: int, config: PromptConfig, num_types: int,
                 families: Optional[Sequence[str]] = None) -> UAPrompt:
    """Prompt for anomaly type n (1-based)"""
    if not 1 <= anomaly_type <= num_types:
        raise RangeError(f"anomaly type must lie in [1, {num_types}], got {anomaly_type}")
    if config.with_tp:
        return build_tp_prompt(table, anomaly_type, config, families or ())
    numbers = anomaly_token_numbers(anomaly_type, config.n_anomaly_tokens)
    return _assemble(table, normal_token_names(config), [f'df{k}' for k in numbers],
                     config.padded_length, anomaly_type, numbers)


def build_normal_prompt(table: TokenTable, config: PromptConfig) -> UAPrompt:
    """'a <ob>' padded to Z"""
    normal = ['object'] * config.n_normal_tokens if config.with_tp else normal_token_names(config)
    return _assemble(table, normal, [], config.padded_length, 0, [])


def build_tp_prompt(table: TokenTable, anomaly_type: int, config: PromptConfig,
                    families: Sequence[str]) -> UAPrompt:
    """Typical prompt: frozen words in the same slots, e.g. 'a object with scratch, defect, damage, flaw'"""
    family = families[anomaly_type - 1] if anomaly_type - 1 < len(families) else 'defect'
    if family not in table.vocab:
        family = 'defect'
    words = [family] + [GENERIC_DEFECT_WORDS[i % len(GENERIC_DEFECT_WORDS)]
                        for i in range(config.n_anomaly_tokens - 1)]
    numbers = anomaly_token_numbers(anomaly_type, config.n_anomaly_tokens)
    return _assemble(table, ['object'] * config.n_normal_tokens, words, config.padded_length,
                     anomaly_type, numbers)


def embed(table: TokenTable, prompt: UAPrompt) -> torch.Tensor:
    """Z x C conditioning: row i is the table row for slot i"""
    return table.embed_ids(prompt.token_ids)
