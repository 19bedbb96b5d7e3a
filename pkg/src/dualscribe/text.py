"""Report tokenization: lowercase, whitespace/punctuation split.

Punctuation characters survive as their own tokens so negation windows and
n-gram metrics see sentence boundaries.  ``detokenize`` is a best-effort
inverse: it rejoins with spaces and tightens the usual trailing punctuation,
and round-trips exactly at the token level.
"""

from __future__ import annotations

import re

_TOKEN_RE = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")
_TIGHT_PUNCT = frozenset(".,;:!?)")


def tokenize(text: str) -> list[str]:
    """Lowercase and split into word/punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: list[str]) -> str:
    """Rejoin tokens with spaces, attaching closing punctuation to the left."""
    parts: list[str] = []
    for tok in tokens:
        if parts and tok in _TIGHT_PUNCT:
            parts[-1] += tok
        else:
            parts.append(tok)
    return " ".join(parts)
