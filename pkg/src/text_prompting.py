"""Word-level tokenizer, prompt template and per-identity learnable token bank."""

import logging
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from src.errors import ConfigError, ContractError, DatasetIOError

logger = logging.getLogger(__name__)

PAD_TOKEN = "<pad>"
SOS_TOKEN = "<sos>"
EOS_TOKEN = "<eos>"
SLOT_TOKEN = "<x>"  # placeholder for one learnable prompt slot
SPECIAL_TOKENS = (PAD_TOKEN, SOS_TOKEN, EOS_TOKEN, SLOT_TOKEN)

DEFAULT_CONTEXT_LENGTH = 77
MAX_VOCAB_SIZE = 4096
SUFFIX_BY_KIND = {"person": "person.", "vehicle": "vehicle."}


class UnknownTokenError(ContractError):
    """Raised when text contains a word outside the vocabulary."""
    pass


class ContextOverflowError(ContractError):
    """Raised when a text does not fit into the context length."""
    pass


class IdentityRangeError(ContractError):
    """Raised when an identity index is outside the token bank."""
    pass


def split_words(text: str) -> list[str]:
    """Lower-case and split on whitespace; a period is its own word."""
    return text.lower().replace(".", " . ").split()


@dataclass
class Vocabulary:
    tokens: list[str]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("Vocabulary tokens must be unique")
        if len(self.tokens) > MAX_VOCAB_SIZE:
            raise ConfigError(f"Vocabulary size {len(self.tokens)} exceeds {MAX_VOCAB_SIZE}")
        for special in (PAD_TOKEN, SOS_TOKEN, EOS_TOKEN):
            if special not in self.tokens:
                raise ConfigError(f"Vocabulary is missing special token {special}")
        self._ids = {token: i for i, token in enumerate(self.tokens)}

    @classmethod
    def from_words(cls, words) -> "Vocabulary":
        """Specials first, then the distinct words in sorted order."""
        distinct = sorted({w for w in words if w not in SPECIAL_TOKENS})
        return cls(tokens=[*SPECIAL_TOKENS, *distinct])

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self._ids[PAD_TOKEN]

    @property
    def sos_id(self) -> int:
        return self._ids[SOS_TOKEN]

    @property
    def eos_id(self) -> int:
        return self._ids[EOS_TOKEN]

    def id_of(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise UnknownTokenError(f"Unknown token: {word!r}") from None

    def save(self, path: Path) -> None:
        """One token per line; the line number is the id."""
        try:
            path.write_text("\n".join(self.tokens) + "\n")
        except OSError as e:
            raise DatasetIOError(f"Cannot write vocabulary {path}: {e}") from e

    @classmethod
    def load(cls, path: Path) -> "Vocabulary":
        try:
            lines = path.read_text().splitlines()
        except OSError as e:
            raise DatasetIOError(f"Cannot read vocabulary {path}: {e}") from e
        return cls(tokens=[line for line in lines if line])


def tokenize(
    text: str,
    vocab: Vocabulary,
    context_length: int = DEFAULT_CONTEXT_LENGTH,
) -> tuple[torch.Tensor, int]:
    """
    Convert text to a fixed-length id sequence.

    Examples:
        "" → [SOS, EOS, PAD, ...], eos position 1
        "a red circle" → [SOS, a, red, circle, EOS, PAD, ...], eos position 4

    Returns:
        (ids of length context_length, position of EOS)
    """
    words = split_words(text)
    if len(words) > context_length - 2:
        raise ContextOverflowError(
            f"Text has {len(words)} words; at most {context_length - 2} fit in context {context_length}"
        )
    ids = [vocab.sos_id, *(vocab.id_of(w) for w in words), vocab.eos_id]
    eos_position = len(ids) - 1
    ids += [vocab.pad_id] * (context_length - len(ids))
    return torch.tensor(ids, dtype=torch.long), eos_position


@dataclass(frozen=True)
class PromptTemplate:
    prefix_text: str = "a photo of a"
    suffix_text: str = "person."
    num_slots: int = 4
    context_length: int = DEFAULT_CONTEXT_LENGTH

    def __post_init__(self):
        if self.num_slots < 0:
            raise ConfigError(f"num_slots must be non-negative, got {self.num_slots}")
        used = len(self.prefix_words) + self.num_slots + len(self.suffix_words) + 2
        if used > self.context_length:
            raise ConfigError(
                f"Prompt needs {used} positions but context length is {self.context_length}"
            )

    @classmethod
    def for_kind(cls, kind: str, num_slots: int = 4, context_length: int = DEFAULT_CONTEXT_LENGTH,
                 prefix_text: str = "a photo of a") -> "PromptTemplate":
        if kind not in SUFFIX_BY_KIND:
            raise ConfigError(f"Unknown dataset kind {kind!r}")
        return cls(prefix_text=prefix_text, suffix_text=SUFFIX_BY_KIND[kind],
                   num_slots=num_slots, context_length=context_length)

    @property
    def prefix_words(self) -> list[str]:
        return split_words(self.prefix_text)

    @property
    def suffix_words(self) -> list[str]:
        return split_words(self.suffix_text)

    @property
    def slot_start(self) -> int:
        """Position of the first learnable slot (after SOS and the prefix)."""
        return 1 + len(self.prefix_words)

    def placeholder_text(self) -> str:
        return " ".join([self.prefix_text, *([SLOT_TOKEN] * self.num_slots), self.suffix_text])


class TokenBank(nn.Module):
    """N identities × M slots × D word-embedding learnable tokens."""

    def __init__(self, embeddings: torch.Tensor, trainable: bool = True):
        super().__init__()
        if embeddings.dim() != 3:
            raise ConfigError(f"Token bank must be 3-D (N, M, D), got shape {tuple(embeddings.shape)}")
        self.embeddings = nn.Parameter(embeddings, requires_grad=trainable)

    @property
    def num_ids(self) -> int:
        return self.embeddings.shape[0]

    @property
    def num_slots(self) -> int:
        return self.embeddings.shape[1]

    @property
    def width(self) -> int:
        return self.embeddings.shape[2]


def init_token_bank(num_ids: int, num_slots: int, width: int, seed: int,
                    std: float = 0.02) -> TokenBank:
    """Gaussian initialization, reproducible for a fixed seed."""
    if num_ids <= 0 or num_slots <= 0 or width <= 0:
        raise ConfigError(f"Token bank dims must be positive, got ({num_ids}, {num_slots}, {width})")
    generator = torch.Generator().manual_seed(seed)
    embeddings = torch.randn(num_ids, num_slots, width, generator=generator) * std
    logger.debug(f"Initialized token bank {num_ids}x{num_slots}x{width} (std={std})")
    return TokenBank(embeddings)


class PromptAssembler:
    """Builds prompt embedding sequences for identities from a template."""

    def __init__(self, template: PromptTemplate, vocab: Vocabulary):
        self.template = template
        self.token_ids, self.eos_position = tokenize(
            template.placeholder_text(), vocab, template.context_length
        )

    def assemble(self, identities: torch.Tensor, bank: TokenBank | None,
                 word_table: nn.Embedding) -> tuple[torch.Tensor, torch.Tensor]:
        """
        Returns:
            (prompt embeddings (B, L, D), eos positions (B,))
        """
        identities = torch.as_tensor(identities, dtype=torch.long).reshape(-1)
        m = self.template.num_slots
        fixed = word_table(self.token_ids.to(word_table.weight.device))
        batch = identities.shape[0]
        fixed = fixed.unsqueeze(0).expand(batch, -1, -1)
        eos = torch.full((batch,), self.eos_position, dtype=torch.long)
        if m == 0:
            return fixed, eos

        if bank is None:
            raise ContractError("A token bank is required when the template has slots")
        if bank.num_slots != m:
            raise ContractError(f"Bank has {bank.num_slots} slots, template expects {m}")
        if identities.numel() and (identities.min() < 0 or identities.max() >= bank.num_ids):
            bad = identities[(identities < 0) | (identities >= bank.num_ids)][0].item()
            raise IdentityRangeError(f"Identity {bad} outside [0, {bank.num_ids})")

        start = self.template.slot_start
        slots = bank.embeddings[identities]
        prompts = torch.cat([fixed[:, :start], slots, fixed[:, start + m:]], dim=1)
        return prompts, eos


def assemble_prompt(identity: int, bank: TokenBank | None, template: PromptTemplate,
                    word_table: nn.Embedding, vocab: Vocabulary) -> tuple[torch.Tensor, int]:
    """Single-identity form of PromptAssembler.assemble: (L × D embeddings, eos position)."""
    prompts, eos = PromptAssembler(template, vocab).assemble(
        torch.tensor([identity]), bank, word_table
    )
    return prompts[0], int(eos[0])
