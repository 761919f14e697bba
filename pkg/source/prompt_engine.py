# prompt_engine.py
# HOI triplets in, (full prompt, intransitive prompt) pairs out, with the
# token alignment the attention merge needs.
import os
import random
import re
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from source import settings
from source.errors import PreconditionViolation, PromptFileMissing, TokenizationMismatch, UnparsablePrompt
from source.str_utils import normalize_prompt_text, whitespace_tokenize

logger = logging.getLogger(__name__)

Tokenizer = Callable[[str], List[str]]

_VOWELS = set("aeiou")
_PARTICLES = (
    "at", "on", "with", "in", "into", "onto", "to", "from", "over", "under",
    "off", "up", "down", "out", "through", "by", "for", "of", "around",
    "across", "behind", "near", "inside", "beside", "toward", "towards",
)
_FREE_FORM_RE = re.compile(
    r"^(?:(?:a|an|the)\s+)?(?P<subject>.+?)\s+(?:is|are)\s+"
    r"(?P<verb>[a-z]+ing(?:\s+(?:" + "|".join(_PARTICLES) + r"))*)"
    r"(?:\s+(?:(?:a|an|the|some)\s+)?(?P<object>.+))?$"
)


# -----------------------------
# Morphology
# -----------------------------
def indefinite_article(word: str) -> str:
    return "an" if word[:1] in _VOWELS else "a"


def _vowel_groups(word: str) -> int:
    return len(re.findall(r"[aeiou]+", word))


def _doubles_final_consonant(word: str) -> bool:
    """One-syllable consonant-vowel-consonant endings double: run -> running."""
    if len(word) < 3:
        return False
    a, b, c = word[-3], word[-2], word[-1]
    return (
        c not in _VOWELS and c not in "wxy"
        and b in _VOWELS
        and a not in _VOWELS
        and _vowel_groups(word) == 1
    )


def _gerund_table(overrides: Optional[Dict[str, str]]) -> Dict[str, str]:
    table = dict(settings.GERUND_OVERRIDES)
    table.update(overrides or {})
    return table


def _is_gerund(word: str) -> bool:
    return len(word) > 4 and word.endswith("ing") and word not in settings.BASE_VERBS_ENDING_ING


def to_gerund(verb: str, overrides: Optional[Dict[str, str]] = None) -> str:
    """Gerund of the head word of a verb phrase; particles are kept ("point at" -> "pointing at")."""
    words = normalize_prompt_text(verb).split()
    if not words:
        raise PreconditionViolation("verb is empty")
    head, rest = words[0], words[1:]
    table = _gerund_table(overrides)
    if head in table:
        g = table[head]
    elif _is_gerund(head):
        g = head
    elif head.endswith("ie"):
        g = head[:-2] + "ying"
    elif head.endswith(("ee", "ye", "oe")):
        g = head + "ing"
    elif head.endswith("e") and len(head) > 2:
        g = head[:-1] + "ing"
    elif _doubles_final_consonant(head):
        g = head + head[-1] + "ing"
    else:
        g = head + "ing"
    return " ".join([g] + rest)


def to_base_verb(verb: str, overrides: Optional[Dict[str, str]] = None) -> str:
    """Inverse of to_gerund; base forms pass through unchanged."""
    words = normalize_prompt_text(verb).split()
    if not words:
        raise PreconditionViolation("verb is empty")
    head, rest = words[0], words[1:]
    if not _is_gerund(head):
        return " ".join(words)
    table = _gerund_table(overrides)
    inverse = {g: b for b, g in table.items()}
    if head in inverse:
        base = inverse[head]
    else:
        stem = head[:-3]
        candidates: List[str] = []
        if len(stem) >= 2 and stem[-1] == stem[-2] and stem[-1] not in _VOWELS and stem[-1] not in "slzf":
            candidates.append(stem[:-1])
        candidates += [stem, stem + "e"]
        if stem.endswith("y"):
            candidates.append(stem[:-1] + "ie")
        base = next((c for c in candidates if to_gerund(c, overrides) == head), stem)
    return " ".join([base] + rest)


# -----------------------------
# Types
# -----------------------------
@dataclass
class HOITriplet:
    subject: str
    verb: str  # base form after construction
    object: str = ""  # empty for intransitive actions
    subject_article: Optional[str] = None  # None: a/an chosen from the next word
    object_article: Optional[str] = None

    def __post_init__(self):
        self.subject = normalize_prompt_text(self.subject)
        self.object = normalize_prompt_text(self.object)
        self.verb = to_base_verb(self.verb) if self.verb and self.verb.strip() else ""
        if not self.subject:
            raise PreconditionViolation("triplet subject is empty")
        if not self.verb:
            raise PreconditionViolation("triplet verb is empty")
        for art in (self.subject_article, self.object_article):
            if art is not None and art not in settings.ARTICLES:
                raise PreconditionViolation(f"unknown article: {art!r}")
        shared = set(self.verb.split()) & set(self.object.split())
        if shared:
            raise PreconditionViolation(f"verb shares words with the object: {sorted(shared)}")

    def as_record(self) -> str:
        """Structured prompt-file form: subject|verb|object."""
        return f"{self.subject}|{self.verb}|{self.object}"


@dataclass(frozen=True)
class PromptPair:
    full_prompt: str
    intransitive_prompt: str
    full_tokens: Tuple[str, ...]
    intrans_tokens: Tuple[str, ...]
    alignment: Dict[int, int]  # full-token index -> intransitive-token index
    verb_index: int
    object_index: Optional[int]  # None when the triplet has no object
    triplet: HOITriplet

    def __post_init__(self):
        targets = list(self.alignment.values())
        if len(set(targets)) != len(targets):
            raise TokenizationMismatch("alignment is not injective")
        if sorted(targets) != list(range(len(self.intrans_tokens))):
            raise TokenizationMismatch("alignment does not cover the intransitive tokens")
        ordered = [self.alignment[i] for i in sorted(self.alignment)]
        if any(b <= a for a, b in zip(ordered, ordered[1:])):
            raise TokenizationMismatch("alignment is not monotone")
        if self.verb_index not in self.alignment:
            raise TokenizationMismatch("verb token is missing from the intransitive prompt")
        if self.object_index is not None and self.object_index in self.alignment:
            raise TokenizationMismatch("object token survives in the intransitive prompt")

    @property
    def object_span(self) -> List[int]:
        """Full-prompt token indices removed from the intransitive prompt."""
        return [i for i in range(len(self.full_tokens)) if i not in self.alignment]


# -----------------------------
# Operations
# -----------------------------
def parse_triplet(text: str, gerund_overrides: Optional[Dict[str, str]] = None) -> HOITriplet:
    """
    Structured form "subject|verb|object" (object may be empty) or the
    free-form sentence "a(n) X is V-ing a(n) Y".
    """
    if text is None or not text.strip():
        raise UnparsablePrompt("prompt is empty")
    if "|" in text:
        parts = [p.strip() for p in text.split("|")]
        if len(parts) != 3 or not parts[0] or not parts[1]:
            raise UnparsablePrompt(f"expected subject|verb|object, got {text!r}")
        try:
            return HOITriplet(subject=parts[0], verb=to_base_verb(parts[1], gerund_overrides), object=parts[2])
        except PreconditionViolation as e:
            raise UnparsablePrompt(str(e)) from e

    m = _FREE_FORM_RE.match(normalize_prompt_text(text))
    if not m:
        raise UnparsablePrompt(f"not an HOI sentence: {text!r}")
    try:
        return HOITriplet(
            subject=m.group("subject"),
            verb=to_base_verb(m.group("verb"), gerund_overrides),
            object=m.group("object") or "",
        )
    except PreconditionViolation as e:
        raise UnparsablePrompt(str(e)) from e


def align_tokens(full_tokens: Sequence[str], intrans_tokens: Sequence[str]) -> Dict[int, int]:
    """Greedy in-order match of the intransitive tokens inside the full tokens."""
    alignment: Dict[int, int] = {}
    j = 0
    for i, tok in enumerate(full_tokens):
        if j < len(intrans_tokens) and tok == intrans_tokens[j]:
            alignment[i] = j
            j += 1
    if j != len(intrans_tokens):
        raise TokenizationMismatch(
            f"intransitive tokens {list(intrans_tokens)} are not a subsequence of {list(full_tokens)}"
        )
    return alignment


def render_prompts(
    triplet: HOITriplet,
    tokenizer: Tokenizer = whitespace_tokenize,
    gerund_overrides: Optional[Dict[str, str]] = None,
) -> PromptPair:
    """Full prompt y, intransitive prompt (object phrase removed) and their alignment."""
    subject_article = triplet.subject_article or indefinite_article(triplet.subject)
    head = f"{subject_article} {triplet.subject} is"
    intrans = normalize_prompt_text(f"{head} {to_gerund(triplet.verb, gerund_overrides)}")
    if triplet.object:
        object_article = triplet.object_article or indefinite_article(triplet.object)
        full = normalize_prompt_text(f"{intrans} {object_article} {triplet.object}")
    else:
        full = intrans

    full_tokens = tuple(tokenizer(full))
    intrans_tokens = tuple(tokenizer(intrans))
    alignment = align_tokens(full_tokens, intrans_tokens)
    verb_index = len(tokenizer(normalize_prompt_text(head)))
    object_index = len(full_tokens) - 1 if triplet.object else None
    return PromptPair(
        full_prompt=full,
        intransitive_prompt=intrans,
        full_tokens=full_tokens,
        intrans_tokens=intrans_tokens,
        alignment=alignment,
        verb_index=verb_index,
        object_index=object_index,
        triplet=triplet,
    )


def augment_subjects(
    triplets: Iterable[HOITriplet],
    subject_pool: Optional[Sequence[str]] = None,
    per_triplet: int = 1,
    seed: int = 0,
) -> List[HOITriplet]:
    """Re-draw the subject of every verb/object pair from a pool (seeded)."""
    pool = list(subject_pool or settings.SUBJECT_POOL)
    if not pool:
        raise PreconditionViolation("subject pool is empty")
    rng = random.Random(seed)
    out: List[HOITriplet] = []
    for t in triplets:
        for _ in range(max(1, int(per_triplet))):
            out.append(replace(t, subject=rng.choice(pool), subject_article=None))
    return out


def load_prompt_file(path: str) -> List[Tuple[int, str]]:
    """
    Read a prompt list: one record per line, UTF-8, '#' starts a comment.
    Returns (line number, text) for every non-empty record.
    """
    if not path or not os.path.isfile(path):
        raise PromptFileMissing(f"prompt file not found: {path}")
    records: List[Tuple[int, str]] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                records.append((lineno, line))
    if not records:
        raise PromptFileMissing(f"prompt file has no records: {path}")
    logger.info("Loaded %d prompts from %s", len(records), path)
    return records
