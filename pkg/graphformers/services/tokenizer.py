"""
Word-level tokenizer for small real corpora.
"""
import json
import logging
import re
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

from graphformers.errors import ConfigError

logger = logging.getLogger(__name__)

PAD, CLS, MASK, UNK = "[PAD]", "[CLS]", "[MASK]", "[UNK]"
RESERVED = (PAD, CLS, MASK, UNK)
PAD_ID, CLS_ID, MASK_ID, UNK_ID = 0, 1, 2, 3
FIRST_WORD_ID = len(RESERVED)

_WORD = re.compile(r"\w+", re.UNICODE)


def split_words(text: str) -> List[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _WORD.findall(text.lower())


class Vocab:
    """
    Token <-> id table. Ids 0..3 are PAD, CLS, MASK, UNK; words follow by
    descending corpus frequency, ties broken lexically.
    """

    def __init__(self, words: Iterable[str] = (), reserved: Iterable[str] = RESERVED):
        self.itos: List[str] = list(reserved)
        self.stoi: Dict[str, int] = {tok: i for i, tok in enumerate(self.itos)}
        for word in words:
            if word not in self.stoi:
                self.stoi[word] = len(self.itos)
                self.itos.append(word)

    @classmethod
    def build(cls, texts: Iterable[str], max_size: Optional[int] = None) -> "Vocab":
        counts = Counter(word for text in texts for word in split_words(text))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if max_size is not None:
            ranked = ranked[: max(0, max_size - FIRST_WORD_ID)]
        vocab = cls(word for word, _ in ranked)
        logger.info(f"Built vocabulary of {len(vocab)} ids from {sum(counts.values())} words")
        return vocab

    @classmethod
    def synthetic(cls, size: int) -> "Vocab":
        """Reserved ids plus opaque word tokens ``w4 .. w{size-1}``."""
        return cls(f"w{i}" for i in range(FIRST_WORD_ID, size))

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def id_of(self, word: str) -> int:
        return self.stoi.get(word, self.stoi.get(UNK, UNK_ID))

    @property
    def mask_id(self) -> int:
        if MASK not in self.stoi:
            raise ConfigError("vocabulary has no [MASK] token")
        return self.stoi[MASK]

    @property
    def cls_id(self) -> int:
        return self.stoi[CLS]

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.itos, ensure_ascii=False))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocab":
        itos = json.loads(Path(path).read_text())
        return cls(itos[FIRST_WORD_ID:], reserved=itos[:FIRST_WORD_ID])


def tokenize_text(text: str, vocab: Vocab, max_tokens: int = 32) -> List[int]:
    """
    ``[CLS]`` followed by at most ``max_tokens - 1`` word ids (UNK for
    out-of-vocabulary words). Empty text gives ``[CLS]`` alone.
    """
    if max_tokens < 1:
        raise ConfigError(f"max_tokens must be >= 1, got {max_tokens}")
    ids = [vocab.id_of(word) for word in split_words(text)[: max_tokens - 1]]
    return [vocab.cls_id] + ids
