################################################################################
"""
ICFT - Incremental curriculum fine-tuning for small medical language models.

Line-delimited JSON dialogue corpora and the word-level vocabulary.

(c) 2025 Stanley Solutions
"""
################################################################################

import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

from loguru import logger
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from icft.errors import CorpusError, TokenizationError, VocabularyMismatchError
from icft.metrics import tokenize

BUNDLED_CORPUS = Path(__file__).parent / "data" / "toy_corpus.jsonl"
GENERAL_CORPUS = Path(__file__).parent / "data" / "general_corpus.jsonl"

PAD, BOS, SEP, EOS, UNK = "<pad>", "<bos>", "<sep>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, SEP, EOS, UNK)


class CorpusRecord(BaseModel):
    """One prompt/response dialogue round."""

    model_config = ConfigDict(extra="forbid")

    id: str
    prompt: str
    response: str
    difficulty: Optional[float] = None
    label: Optional[str] = None

    @field_validator("id", "prompt", "response")
    @classmethod
    def _not_blank(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("must not be empty")
        return value

    @property
    def dialogue(self) -> str:
        """The full round as one string, as stored in memory."""
        return f"{self.prompt} {self.response}"


def token_length(record: CorpusRecord) -> int:
    """Number of prompt and response tokens."""
    return len(tokenize(record.prompt).tokens) + len(
        tokenize(record.response).tokens
    )


def difficulty_of(record: CorpusRecord) -> float:
    """Metadata difficulty when present, else the token count."""
    if record.difficulty is not None:
        return record.difficulty
    return float(token_length(record))


def load_corpus(path: Path) -> list[CorpusRecord]:
    """Parse a JSONL corpus, filling missing difficulty with token counts."""
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus file {path} does not exist")
    records: list[CorpusRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as corpus_file:
        for line_number, line in enumerate(corpus_file, start=1):
            if not line.strip():
                continue
            try:
                record = CorpusRecord.model_validate(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CorpusError(
                    f"malformed JSON ({exc.msg})", line_number
                ) from exc
            except ValidationError as exc:
                fields = ", ".join(
                    ".".join(str(p) for p in err["loc"]) or "record"
                    for err in exc.errors()
                )
                raise CorpusError(
                    f"invalid record ({fields})", line_number
                ) from exc
            if record.id in seen:
                raise CorpusError(f"duplicate id {record.id!r}", line_number)
            seen.add(record.id)
            if record.difficulty is None:
                record.difficulty = float(token_length(record))
            records.append(record)
    logger.info(f"Loaded {len(records)} records from {path}")
    return records


def write_corpus(path: Path, records: Iterable[CorpusRecord]) -> None:
    """Write records as one JSON object per line."""
    with open(path, "w", encoding="utf-8") as corpus_file:
        for record in records:
            corpus_file.write(
                json.dumps(record.model_dump(exclude_none=True)) + "\n"
            )


class Vocabulary:
    """Word-level vocabulary with reserved special tokens."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:len(SPECIALS)]) != SPECIALS:
            raise VocabularyMismatchError(
                "vocabulary must start with the special tokens"
            )
        self.tokens: list[str] = list(tokens)
        self.index: dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise VocabularyMismatchError("vocabulary has duplicate tokens")

    @classmethod
    def build(cls, records: Iterable[CorpusRecord]) -> "Vocabulary":
        """Collect every prompt, response and label word in sorted order."""
        words: set[str] = set()
        for record in records:
            words.update(tokenize(record.prompt).tokens)
            words.update(tokenize(record.response).tokens)
            if record.label:
                words.update(tokenize(record.label).tokens)
        return cls(list(SPECIALS) + sorted(words - set(SPECIALS)))

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def pad_id(self) -> int:
        """Index of the padding token."""
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        """Index of the sequence-start token."""
        return self.index[BOS]

    @property
    def sep_id(self) -> int:
        """Index of the prompt/response separator."""
        return self.index[SEP]

    @property
    def eos_id(self) -> int:
        """Index of the sequence-end token."""
        return self.index[EOS]

    def encode(self, text: str, strict: bool = False) -> list[int]:
        """Map words to ids; unknown words become <unk> unless strict."""
        ids = []
        for word in tokenize(text).tokens:
            if word in self.index:
                ids.append(self.index[word])
            elif strict:
                raise VocabularyMismatchError(
                    f"token {word!r} is not in the vocabulary"
                )
            else:
                ids.append(self.index[UNK])
        if not ids:
            raise TokenizationError(f"text {text!r} has no tokens")
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Join the words of non-special ids."""
        return " ".join(
            self.tokens[i] for i in ids if self.tokens[i] not in SPECIALS
        )

    def prompt_ids(self, prompt: str, strict: bool = False) -> list[int]:
        """<bos> prompt <sep>: the prefix a response is generated from."""
        return [self.bos_id, *self.encode(prompt, strict), self.sep_id]

    def record_ids(self, record: CorpusRecord, strict: bool = False):
        """<bos> prompt <sep> response <eos>."""
        return [
            *self.prompt_ids(record.prompt, strict),
            *self.encode(record.response, strict),
            self.eos_id,
        ]
