"""Corpus ingestion, vocabulary construction, and token-sequence encoding.

Dataset files are JSONL with one record per line:

    {"id": str, "abstract": str, "ref_abstracts": [str, ...], "related_work": str}

Encoder inputs follow the layout ``[CLS] abstract [DOC] ref_1 [DOC] ref_2 ...``
with the [CLS] and every [DOC] position flagged for global attention.
Decoder targets are ``[BOS] tokens [EOS]``.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError, IngestionError, SchemaError

RESERVED_TOKENS = ("[PAD]", "[BOS]", "[EOS]", "[UNK]", "[CLS]", "[DOC]")
PAD_ID, BOS_ID, EOS_ID, UNK_ID, CLS_ID, DOC_ID = range(len(RESERVED_TOKENS))

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^a-z0-9\s]")


def tokenize(text: str) -> list[str]:
    """Lowercased whitespace-and-punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class ExampleRecord:
    id: str
    source_abstract: str
    ref_abstracts: list[str]
    target: str


@dataclass
class TokenSequence:
    """Token ids plus per-position global-attention flags."""

    ids: np.ndarray
    global_mask: np.ndarray
    truncated: bool = False

    def __len__(self) -> int:
        return int(self.ids.shape[0])


class Vocabulary:
    """Dense token ids; positions 0..5 are the reserved tokens."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise IngestionError("vocabulary must start with the reserved tokens")
        self._id_to_token = list(tokens)
        self._token_to_id = {t: i for i, t in enumerate(tokens)}
        if len(self._token_to_id) != len(tokens):
            raise IngestionError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self._id_to_token)

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        return self._id_to_token[token_id]

    def encode_tokens(self, tokens: Iterable[str]) -> list[int]:
        get = self._token_to_id.get
        return [get(t, UNK_ID) for t in tokens]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for token in self._id_to_token:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls(tokens)


def build_vocab(records: Iterable[ExampleRecord], max_size: int,
                min_freq: int = 1) -> Vocabulary:
    """Keep the most frequent tokens; ties broken lexicographically."""
    if max_size <= len(RESERVED_TOKENS):
        raise ConfigError(f"max_size must exceed {len(RESERVED_TOKENS)} reserved tokens")
    counts: Counter[str] = Counter()
    n_records = 0
    for rec in records:
        n_records += 1
        counts.update(tokenize(rec.source_abstract))
        for ref in rec.ref_abstracts:
            counts.update(tokenize(ref))
        counts.update(tokenize(rec.target))
    if n_records == 0:
        raise IngestionError("cannot build a vocabulary from an empty corpus")
    budget = max_size - len(RESERVED_TOKENS)
    kept = sorted((t for t, c in counts.items() if c >= min_freq),
                  key=lambda t: (-counts[t], t))[:budget]
    return Vocabulary(list(RESERVED_TOKENS) + kept)


def encode_query(rec: ExampleRecord, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """``[CLS] abstract [DOC] ref_1 [DOC] ref_2 ...`` truncated to ``max_len``.

    Truncation removes tokens from the longest remaining reference first,
    preserving the abstract; a reference trimmed to nothing loses its [DOC]
    separator as well.
    """
    abstract = vocab.encode_tokens(tokenize(rec.source_abstract))
    refs = [vocab.encode_tokens(tokenize(r)) for r in rec.ref_abstracts]

    def total() -> int:
        return 1 + len(abstract) + sum(1 + len(r) for r in refs)

    truncated = total() > max_len
    while total() > max_len and refs:
        longest = max(range(len(refs)), key=lambda i: len(refs[i]))
        if refs[longest]:
            refs[longest].pop()
        else:
            refs.pop(longest)
    if total() > max_len:
        abstract = abstract[: max_len - 1]

    ids = [CLS_ID] + abstract
    global_pos = [0]
    for ref in refs:
        global_pos.append(len(ids))
        ids.append(DOC_ID)
        ids.extend(ref)
    mask = np.zeros(len(ids), dtype=bool)
    mask[global_pos] = True
    return TokenSequence(np.asarray(ids, dtype=np.int64), mask, truncated)


def encode_target(rec: ExampleRecord, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """``[BOS] tokens(target) [EOS]``; [EOS] survives truncation."""
    ids = [BOS_ID] + vocab.encode_tokens(tokenize(rec.target))
    truncated = len(ids) + 1 > max_len
    if truncated:
        ids = ids[: max_len - 1]
    ids.append(EOS_ID)
    return TokenSequence(np.asarray(ids, dtype=np.int64),
                         np.zeros(len(ids), dtype=bool), truncated)


def encode_document(text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """``[CLS] tokens(text)`` for knowledge-base and candidate documents."""
    ids = [CLS_ID] + vocab.encode_tokens(tokenize(text))
    truncated = len(ids) > max_len
    ids = ids[:max_len]
    mask = np.zeros(len(ids), dtype=bool)
    mask[0] = True
    return TokenSequence(np.asarray(ids, dtype=np.int64), mask, truncated)


def sequence_from_ids(ids: Iterable[int]) -> TokenSequence:
    """Wrap raw ids (e.g. a decode prefix); flags globals for [CLS]/[DOC]."""
    arr = np.asarray(list(ids), dtype=np.int64)
    return TokenSequence(arr, (arr == CLS_ID) | (arr == DOC_ID))


def detokenize(ids: Iterable[int], vocab: Vocabulary, skip_special: bool = True) -> str:
    special = set(range(len(RESERVED_TOKENS)))
    toks = [vocab.token_of(int(i)) for i in ids
            if not (skip_special and int(i) in special)]
    return " ".join(toks)


_REQUIRED_FIELDS = ("id", "abstract", "ref_abstracts", "related_work")


def load_dataset(path) -> Iterator[ExampleRecord]:
    """Yield records in file order; malformed lines raise with line numbers."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            for key in _REQUIRED_FIELDS:
                if key not in obj:
                    raise SchemaError(f"{path}:{lineno}: missing required field '{key}'")
            abstract = obj["abstract"]
            if not isinstance(abstract, str) or not abstract.strip():
                raise SchemaError(f"{path}:{lineno}: field 'abstract' must be a non-empty string")
            refs = obj["ref_abstracts"]
            if not isinstance(refs, list) or any(not isinstance(r, str) for r in refs):
                raise SchemaError(f"{path}:{lineno}: field 'ref_abstracts' must be a list of strings")
            yield ExampleRecord(id=str(obj["id"]), source_abstract=abstract,
                                ref_abstracts=list(refs), target=str(obj["related_work"]))


def save_dataset(records: Iterable[ExampleRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({"id": rec.id, "abstract": rec.source_abstract,
                                 "ref_abstracts": rec.ref_abstracts,
                                 "related_work": rec.target}) + "\n")
