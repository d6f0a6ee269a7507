"""Byte-level corpus handling: a deterministic synthetic corpus and batch sampling."""

from __future__ import annotations

import numpy as np

VOCAB_SIZE = 256


class CorpusTooSmall(ValueError):
    pass


_NAMES = ["Ada", "Bram", "Cleo", "Dov", "Edda", "Finn", "Gail", "Hugo", "Ines", "Jara",
          "Kofi", "Lena", "Milo", "Nora", "Otto", "Pia", "Quin", "Rosa", "Sami", "Tova"]
_NOUNS = [("cat", "cats"), ("dog", "dogs"), ("bird", "birds"), ("farmer", "farmers"),
          ("teacher", "teachers"), ("child", "children"), ("river", "rivers"), ("boat", "boats"),
          ("lamp", "lamps"), ("book", "books"), ("garden", "gardens"), ("horse", "horses"),
          ("box", "boxes"), ("song", "songs"), ("stone", "stones"), ("tree", "trees"),
          ("baker", "bakers"), ("letter", "letters"), ("mouse", "mice"), ("window", "windows"),
          ("apple", "apples"), ("clock", "clocks"), ("road", "roads"), ("friend", "friends")]
_VERBS = [("sees", "see"), ("finds", "find"), ("carries", "carry"), ("likes", "like"),
          ("paints", "paint"), ("follows", "follow"), ("watches", "watch"), ("builds", "build"),
          ("opens", "open"), ("hides", "hide"), ("counts", "count"), ("reads", "read"),
          ("moves", "move"), ("cleans", "clean"), ("sells", "sell"), ("helps", "help")]
_ADJS = ["small", "old", "red", "quiet", "bright", "heavy", "green", "happy", "cold", "tall",
         "wooden", "strange", "quick", "gentle", "round", "dark", "new", "brave"]
_PLACES = ["market", "harbour", "school", "forest", "station", "library", "bakery", "hill",
           "village", "bridge", "field", "museum"]
_ADVS = ["slowly", "again", "today", "at night", "every morning", "with care", "in silence", "twice"]
_NUMWORDS = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"]


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _noun_phrase(rng):
    sing, plur = _pick(rng, _NOUNS)
    plural = rng.random() < 0.4
    det = _pick(rng, ["some", "many", "the", "two"]) if plural else _pick(rng, ["the", "a", "one", "every"])
    if det == "a" and rng.random() < 0.5:
        det = "the"
    words = [det]
    if rng.random() < 0.6:
        adj = _pick(rng, _ADJS)
        if det == "a" and adj[0] in "aeiou":
            det = words[0] = "an"
        words.append(adj)
    words.append(plur if plural else sing)
    return " ".join(words), plural


def _simple_sentence(rng):
    subj, plural = _noun_phrase(rng)
    v3, vb = _pick(rng, _VERBS)
    obj, _ = _noun_phrase(rng)
    tail = f" {_pick(rng, _ADVS)}" if rng.random() < 0.3 else ""
    return f"{subj[0].upper()}{subj[1:]} {vb if plural else v3} {obj}{tail}."


def _story(rng):
    a, b = _pick(rng, _NAMES), _pick(rng, _NAMES)
    while b == a:
        b = _pick(rng, _NAMES)
    place = _pick(rng, _PLACES)
    n = int(rng.integers(2, 10))
    sing, plur = _pick(rng, _NOUNS)
    k = int(rng.integers(1, n))
    return (f"{a} went to the {place} with {b}. {a} bought {_NUMWORDS[n]} {plur} there. "
            f"{b} took {_NUMWORDS[k]} of them, so {a} kept {_NUMWORDS[n - k]}.")


def _arithmetic(rng):
    x, y = int(rng.integers(0, 50)), int(rng.integers(0, 50))
    if rng.random() < 0.5:
        return f"{x} plus {y} is {x + y}."
    x, y = max(x, y), min(x, y)
    return f"{x} minus {y} is {x - y}."


def _dialogue(rng):
    a, b = _pick(rng, _NAMES), _pick(rng, _NAMES)
    greet = _pick(rng, ["Hello", "Good morning", "Welcome back", "Look here"])
    sing, plur = _pick(rng, _NOUNS)
    return f'"{greet}, {b}," said {a}. "Have you seen my {sing}?" "No," said {b}, "but I saw two {plur}."'


def _listing(rng):
    a = _pick(rng, _NAMES)
    items = [_pick(rng, _NOUNS)[1] for _ in range(3)]
    return f"{a} likes {items[0]}, {items[1]} and {items[2]}."


_GENERATORS = [(_simple_sentence, 0.4), (_story, 0.2), (_arithmetic, 0.15), (_dialogue, 0.15), (_listing, 0.1)]


def synthetic_corpus(n_bytes: int = 1_000_000, seed: int = 0) -> bytes:
    """Deterministic English-like ASCII text of exactly ``n_bytes`` bytes.

    Mixes agreement-bearing simple sentences, short stories with name
    coreference and counting, two-digit arithmetic, dialogue and lists.
    """
    rng = np.random.default_rng(seed)
    gens = [g for g, _ in _GENERATORS]
    weights = np.array([w for _, w in _GENERATORS])
    parts, size = [], 0
    while size < n_bytes:
        k = int(rng.integers(3, 8))
        para = " ".join(gens[int(rng.choice(len(gens), p=weights))](rng) for _ in range(k)) + "\n"
        parts.append(para)
        size += len(para)
    return "".join(parts).encode("ascii")[:n_bytes]


def load_corpus(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def split_corpus(data: bytes, val_fraction: float = 0.05) -> tuple[bytes, bytes]:
    """Contiguous split: the last ``val_fraction`` of the bytes is validation."""
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    cut = int(len(data) * (1 - val_fraction))
    return data[:cut], data[cut:]


def as_ids(data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        return data.astype(np.int64, copy=False)
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


def make_batches(corpus, seq_len: int, batch_size: int, seed: int):
    """Endless stream of ``(inputs, targets)`` pairs of shape ``[batch_size, seq_len]``.

    Window starts are drawn uniformly from a generator seeded with ``seed``;
    targets are the inputs shifted by one byte.
    """
    ids = as_ids(corpus)
    if len(ids) <= seq_len + 1:
        raise CorpusTooSmall(f"corpus of {len(ids)} bytes is too small for windows of {seq_len + 1}")
    rng = np.random.default_rng(seed)
    span = np.arange(seq_len + 1)
    while True:
        starts = rng.integers(0, len(ids) - seq_len, size=batch_size)
        win = ids[starts[:, None] + span[None, :]]
        yield win[:, :-1], win[:, 1:]


def eval_windows(corpus, seq_len: int, max_windows: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping consecutive windows for teacher-forced evaluation."""
    ids = as_ids(corpus)
    n = (len(ids) - 1) // seq_len
    if n < 1:
        raise CorpusTooSmall(f"corpus of {len(ids)} bytes holds no window of {seq_len + 1}")
    if max_windows is not None:
        n = min(n, max_windows)
    idx = np.arange(n)[:, None] * seq_len + np.arange(seq_len + 1)[None, :]
    win = ids[idx]
    return win[:, :-1], win[:, 1:]
