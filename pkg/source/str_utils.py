import re
from typing import List


def normalize_prompt_text(s: str) -> str:
    """
    Prompt normalization applied before tokenization:
    - replace non-breaking space
    - lowercase
    - collapse repeated whitespace
    - drop a trailing full stop
    """
    if not s:
        return ""
    s = s.replace("\xa0", " ").lower()
    s = re.sub(r"\s+", " ", s).strip()
    return s.rstrip(".").strip()


def whitespace_tokenize(text: str) -> List[str]:
    """Default tokenizer: normalized prompt split on spaces."""
    return normalize_prompt_text(text).split()
