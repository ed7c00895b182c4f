"""Word-level tokenizer over the closed template lexicon.

Tokens are decimals, words, or single punctuation marks. Reserved ids
occupy 0..3; everything else is sorted lexicographically, so a vocabulary
is a pure function of its training texts.
"""

from __future__ import annotations

import re

from .errors import DataError

PAD, BOS, EOS, SEP = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<sep>")
UNK_TOKEN = "<unk>"

_TOKEN_RE = re.compile(r"\d+\.\d+|\w+|[^\w\s]")


def tokenize_text(text: str):
    return _TOKEN_RE.findall(text)


class Vocabulary:
    def __init__(self, tokens):
        """``tokens`` is the full id -> string table including reserved ids."""
        if tuple(tokens[:4]) != RESERVED:
            raise DataError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate token strings in vocabulary")
        self._tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(tokens)}
        if UNK_TOKEN not in self._ids:
            raise DataError("vocabulary is missing the unknown token")
        self.unk_id = self._ids[UNK_TOKEN]

    def __len__(self):
        return len(self._tokens)

    @property
    def tokens(self):
        return tuple(self._tokens)

    def encode(self, text: str):
        return [self._ids.get(t, self.unk_id) for t in tokenize_text(text)]

    def decode(self, ids):
        words = []
        for i in ids:
            if i in (PAD, BOS, EOS, SEP):
                continue
            if i < 0:
                raise DataError(f"token id {i} out of range")
            # ids past the lexicon (a model head can be wider) read as unk:
            # a wrong answer should score wrong, not crash the run
            words.append(self._tokens[i] if i < len(self._tokens)
                         else UNK_TOKEN)
        return detokenize(words)


def detokenize(words):
    """Joins with spaces then repairs punctuation spacing; good enough to
    invert tokenization on the template lexicon."""
    out = []
    glue = False  # open paren glues the next word on
    for w in words:
        if out and (glue or w in ",.!?;:)"
                    or (out[-1].endswith("-") and w[:1].isdigit())):
            out[-1] += w
        else:
            out.append(w)
        glue = w == "("
    return " ".join(out)


def build_vocab(texts) -> Vocabulary:
    """Vocabulary over every token in ``texts``: reserved ids, then the
    unknown token, then the sorted lexicon."""
    lexicon = set()
    for text in texts:
        lexicon.update(tokenize_text(text))
    table = list(RESERVED) + [UNK_TOKEN] + sorted(lexicon)
    return Vocabulary(table)
