"""Corpus parsing, category maps, leave-last-out splitting and windowing."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .signal import PAD_ID, PaddingMode, pad_history

logger = logging.getLogger(__name__)

MIN_HISTORY = 3


class DataError(ValueError):
    """Malformed or unusable corpus input."""


@dataclass(frozen=True)
class UserHistory:
    user_id: str
    items: tuple
    categories: tuple | None = None

    def __post_init__(self):
        if self.categories is not None and len(self.categories) != len(self.items):
            raise DataError(
                f"user {self.user_id}: {len(self.categories)} categories for {len(self.items)} items"
            )


@dataclass(frozen=True)
class InteractionCorpus:
    users: tuple
    item_vocabulary: dict
    dropped_users: int = 0

    @property
    def num_items(self) -> int:
        return len(self.item_vocabulary)

    @property
    def has_categories(self) -> bool:
        return bool(self.users) and all(u.categories is not None for u in self.users)

    def item_tokens(self) -> list[str]:
        """Tokens indexed by item id (index 0 is the pad slot)."""
        tokens = [""] * (self.num_items + 1)
        for token, idx in self.item_vocabulary.items():
            tokens[idx] = token
        return tokens


@dataclass(frozen=True)
class DatasetStats:
    user_count: int
    item_count: int
    interaction_count: int
    average_length: float
    sparsity: float


def corpus_from_sequences(sequences: dict, min_length: int = MIN_HISTORY) -> InteractionCorpus:
    """Build a corpus from ``{user_token: [item_token, ...]}`` in insertion order."""
    vocab: dict = {}
    users = []
    dropped = 0
    for user, tokens in sequences.items():
        if len(tokens) < min_length:
            dropped += 1
            continue
        ids = tuple(vocab.setdefault(str(t), len(vocab) + 1) for t in tokens)
        users.append(UserHistory(str(user), ids))
    return InteractionCorpus(tuple(users), vocab, dropped)


def parse_corpus(path, min_length: int = MIN_HISTORY) -> InteractionCorpus:
    """Read one user per line: ``user item item ...`` in chronological order."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc
    sequences: dict = {}
    for lineno, line in enumerate(lines, start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) < 2:
            raise DataError(f"{path}:{lineno}: user {tokens[0]!r} has no items")
        if tokens[0] in sequences:
            raise DataError(f"{path}:{lineno}: duplicate user {tokens[0]!r}")
        sequences[tokens[0]] = tokens[1:]
    if not sequences:
        raise DataError(f"{path}: corpus is empty")
    corpus = corpus_from_sequences(sequences, min_length)
    if corpus.dropped_users:
        logger.info("dropped %d users with fewer than %d items", corpus.dropped_users, min_length)
    if not corpus.users:
        raise DataError(f"{path}: no user has at least {min_length} items")
    return corpus


def load_category_map(path, corpus: InteractionCorpus) -> InteractionCorpus:
    """Attach aligned category labels; unmapped items become their own category."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read category map {path}: {exc}") from exc
    mapping: dict = {}
    for lineno, line in enumerate(lines, start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 2:
            raise DataError(f"{path}:{lineno}: expected 'item category', got {line!r}")
        item, label = tokens
        if item in mapping:
            if mapping[item] != label:
                warnings.warn(
                    f"{path}:{lineno}: item {item!r} already mapped to {mapping[item]!r}; keeping first",
                    stacklevel=2,
                )
            continue
        mapping[item] = label
    return with_categories(corpus, mapping)


def with_categories(corpus: InteractionCorpus, mapping: dict) -> InteractionCorpus:
    tokens = corpus.item_tokens()
    users = []
    for user in corpus.users:
        cats = tuple(mapping.get(tokens[i], tokens[i]) for i in user.items)
        users.append(replace(user, categories=cats))
    return replace(corpus, users=tuple(users))


def compute_stats(corpus: InteractionCorpus) -> DatasetStats:
    n_users = len(corpus.users)
    n_items = corpus.num_items
    n_inter = sum(len(u.items) for u in corpus.users)
    return DatasetStats(
        user_count=n_users,
        item_count=n_items,
        interaction_count=n_inter,
        average_length=n_inter / n_users if n_users else 0.0,
        sparsity=1.0 - n_inter / (n_users * n_items) if n_users and n_items else 1.0,
    )


# ---------------------------------------------------------------------------
# Splitting


@dataclass(frozen=True)
class SplitExample:
    """One padded window. ``targets`` holds the next-item label per position (0 = unsupervised)."""

    user_index: int
    input_window: tuple
    targets: tuple
    position_mask: tuple

    @property
    def target(self) -> int:
        return self.targets[-1]


@dataclass
class SplitSet:
    """Stacked windows for one split, ready for batching."""

    user_index: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    max_len: int
    padding: PaddingMode

    def __len__(self) -> int:
        return len(self.user_index)

    def __getitem__(self, i: int) -> SplitExample:
        return SplitExample(
            int(self.user_index[i]),
            tuple(self.inputs[i].tolist()),
            tuple(self.targets[i].tolist()),
            tuple(self.mask[i].tolist()),
        )

    @property
    def last_targets(self) -> np.ndarray:
        return self.targets[:, -1]


@dataclass
class Splits:
    train: SplitSet
    valid: SplitSet
    test: SplitSet
    max_len: int
    padding: PaddingMode
    num_items: int
    meta: dict = field(default_factory=dict)


def make_window(inputs, targets, max_len: int, padding) -> tuple[list, list, list]:
    """Truncate to the ``max_len`` most recent positions, then left-pad."""
    inputs = list(inputs)[-max_len:]
    targets = list(targets)[-max_len:]
    n_pad = max_len - len(inputs)
    window = pad_history(inputs, max_len, padding)
    return window, [PAD_ID] * n_pad + targets, [False] * n_pad + [True] * len(inputs)


def _stack(rows, max_len, padding) -> SplitSet:
    if rows:
        users, inputs, targets, mask = zip(*rows)
    else:
        users, inputs, targets, mask = (), np.zeros((0, max_len)), np.zeros((0, max_len)), np.zeros((0, max_len))
    return SplitSet(
        user_index=np.asarray(users, dtype=np.int64),
        inputs=np.asarray(inputs, dtype=np.int64).reshape(-1, max_len),
        targets=np.asarray(targets, dtype=np.int64).reshape(-1, max_len),
        mask=np.asarray(mask, dtype=bool).reshape(-1, max_len),
        max_len=max_len,
        padding=padding,
    )


def leave_last_out_split(corpus: InteractionCorpus, max_len: int, padding=PaddingMode.ZERO) -> Splits:
    """Last item is the test label, second to last the validation label.

    Training uses ``h_1..h_{n-3}`` as input with shifted targets ``h_2..h_{n-2}``
    at every position, so users with exactly three items contribute no
    training window.
    """
    padding = PaddingMode.parse(padding)
    train, valid, test = [], [], []
    for ui, user in enumerate(corpus.users):
        h = list(user.items)
        n = len(h)
        if n < MIN_HISTORY:
            raise DataError(f"user {user.user_id} has {n} items; need at least {MIN_HISTORY}")
        if n > MIN_HISTORY:
            train.append((ui, *make_window(h[: n - 3], h[1 : n - 2], max_len, padding)))
        valid_in = h[: n - 2]
        valid.append((ui, *make_window(valid_in, [PAD_ID] * (len(valid_in) - 1) + [h[n - 2]], max_len, padding)))
        test_in = h[: n - 1]
        test.append((ui, *make_window(test_in, [PAD_ID] * (len(test_in) - 1) + [h[n - 1]], max_len, padding)))
    return Splits(
        train=_stack(train, max_len, padding),
        valid=_stack(valid, max_len, padding),
        test=_stack(test, max_len, padding),
        max_len=max_len,
        padding=padding,
        num_items=corpus.num_items,
    )


def history_before(corpus: InteractionCorpus, user_index: int, split: str) -> tuple[list, list | None, int]:
    """Items and categories preceding the split's target, plus the target id."""
    user = corpus.users[user_index]
    offset = {"test": 1, "valid": 2}[split]
    n = len(user.items)
    items = list(user.items[: n - offset])
    cats = list(user.categories[: n - offset]) if user.categories is not None else None
    return items, cats, user.items[n - offset]
