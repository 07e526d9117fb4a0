"""Small shared helpers: hashing, slugs, tokens, timestamps, canonical JSON."""

from __future__ import annotations

import hashlib
import json
import re
from datetime import datetime, timezone

# Grammatical filler stripped when matching rule titles against step text.
# Imperative boilerplate (ensure/avoid/always/...) is included because it
# appears in almost every rule title and would create spurious overlap.
STOPWORDS = frozenset(
    """
    a an the and or but to of in on at for with from by as is are be been was
    were it its this that these those all any each every should must may can
    will would shall do does did not no yes always never ensure avoid use
    using before after when where how what why which who whom if then else
    than so such there here over under about into onto your our their
    """.split()
)


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


def canonical_json(obj) -> str:
    """Stable serialization used for content hashing."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def content_hash(data) -> str:
    """Short sha256 hex digest of a string or JSON-serializable object."""
    if not isinstance(data, str):
        data = canonical_json(data)
    return hashlib.sha256(data.encode("utf-8")).hexdigest()[:16]


def slugify(text: str) -> str:
    slug = re.sub(r"[^a-z0-9]+", "_", text.lower()).strip("_")
    return slug or "uncategorized"


def tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", text.lower())


def token_set(text: str) -> set[str]:
    return set(tokenize(text))


def content_tokens(text: str) -> set[str]:
    """Token set minus grammatical filler; used for title-overlap matching."""
    return token_set(text) - STOPWORDS


def jaccard(a: set[str], b: set[str]) -> float:
    """Token Jaccard similarity; two empty sets count as identical."""
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def first_sentence(text: str, limit: int = 80) -> str:
    """Derive a short title from free text: first sentence of the first
    non-fence line, clipped to `limit` characters."""
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped or stripped.startswith("```"):
            continue
        sentence = re.split(r"(?<=[.!?])\s", stripped, maxsplit=1)[0]
        sentence = sentence.rstrip(".!?").strip()
        if sentence:
            return sentence[:limit]
    return text.strip()[:limit] or text[:limit]
