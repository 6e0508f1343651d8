"""Deterministic subword tokenizer with a frozen bundled vocabulary.

Greedy longest-match wordpiece over lowercased words. Every lowercase
letter and digit is in the vocabulary (as both a word-initial piece and a
"##" continuation piece), so any alphanumeric word tokenizes without
falling back to <unk>.
"""

import re

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_WHOLE_WORDS = [
    # articles / function words
    "a", "an", "the", "and", "or", "of", "on", "in", "at", "with", "to",
    "is", "are", "was", "were", "it", "its", "this", "that", "by", "for",
    # colors
    "red", "green", "blue", "yellow", "purple", "orange", "cyan",
    "magenta", "white", "black", "gray", "grey", "pink", "brown",
    # shapes
    "circle", "square", "triangle", "rectangle", "ellipse", "diamond",
    "star", "cross", "ring", "hexagon",
    # common caption nouns
    "photo", "picture", "image", "car", "cars", "dog", "cat", "pub",
    "night", "day", "man", "woman", "person", "people", "tree", "house",
    "street", "sky", "water", "table", "chair", "boat", "train", "bird",
    "horse", "balloon", "grass", "road", "building", "light", "room",
    "city", "park", "beach", "food", "plate", "glass", "shape", "object",
    "background", "wall", "door", "window", "field", "mountain", "river",
    # adjectives / verbs / adverbs
    "small", "large", "big", "little", "bright", "dark", "old", "new",
    "running", "walking", "sitting", "standing", "flying", "quickly",
    "slowly", "two", "three", "four", "one", "next", "near", "above",
    "below", "beside",
]

_SUFFIX_PIECES = [
    "##s", "##es", "##ed", "##ing", "##er", "##est", "##ly", "##tion",
    "##ment", "##ness", "##ity",
]

_CHARS = "abcdefghijklmnopqrstuvwxyz0123456789"


def _build_vocab():
    vocab = [PAD_TOKEN, UNK_TOKEN]
    vocab.extend(_WHOLE_WORDS)
    vocab.extend(_SUFFIX_PIECES)
    for ch in _CHARS:
        vocab.append(ch)
        vocab.append("##" + ch)
    # frozen: dedupe preserving order
    seen = set()
    out = []
    for tok in vocab:
        if tok not in seen:
            seen.add(tok)
            out.append(tok)
    return out


VOCAB = _build_vocab()
TOKEN_TO_ID = {tok: i for i, tok in enumerate(VOCAB)}
PAD_ID = TOKEN_TO_ID[PAD_TOKEN]
UNK_ID = TOKEN_TO_ID[UNK_TOKEN]

_WORD_RE = re.compile(r"[a-z0-9]+")


def vocab_size():
    return len(VOCAB)


def split_words(text):
    """Lowercase and split into alphanumeric surface words."""
    return _WORD_RE.findall(text.lower())


def tokenize_word(word):
    """Greedy longest-match wordpiece ids for one surface word."""
    ids = []
    pos = 0
    while pos < len(word):
        best = None
        end = len(word)
        while end > pos:
            piece = word[pos:end] if pos == 0 else "##" + word[pos:end]
            if piece in TOKEN_TO_ID:
                best = TOKEN_TO_ID[piece]
                break
            end -= 1
        if best is None:
            ids.append(UNK_ID)
            pos += 1
        else:
            ids.append(best)
            pos = end
    return ids


def encode(text, max_len):
    """Encode text into padded token ids plus per-word token spans.

    Returns (tokens, word_spans) where tokens is a list of length max_len
    (pad suffix only) and word_spans[k] = (start, end) token indices of the
    k-th surface word. Words that would overflow max_len are dropped.
    """
    tokens = []
    word_spans = []
    for word in split_words(text):
        ids = tokenize_word(word)
        if len(tokens) + len(ids) > max_len:
            break
        word_spans.append((len(tokens), len(tokens) + len(ids)))
        tokens.extend(ids)
    if not tokens:
        raise ValueError("text produced no tokens: %r" % text)
    tokens = tokens + [PAD_ID] * (max_len - len(tokens))
    return tokens, word_spans


def decode_span(tokens, start, end):
    """Reassemble the surface string of a token span."""
    parts = []
    for tid in tokens[start:end]:
        tok = VOCAB[tid]
        if tok.startswith("##"):
            parts.append(tok[2:])
        else:
            if parts:
                parts.append(" ")
            parts.append(tok)
    return "".join(parts)
