"""Region and word highlighting with learnable universal prompts.

A soft mask selects the segment of interest; everything outside is filled
from a learnable prompt rather than zeros, so downstream encoders never
see blank areas.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

PROMPT_INIT_STD = 0.02


class RegionPrompt(nn.Module):
    """Learnable image-shaped fill-in for masked-out pixels."""

    def __init__(self, height, width, init_std=PROMPT_INIT_STD, generator=None):
        super().__init__()
        init = torch.empty(height, width, 3)
        init.normal_(0.0, init_std, generator=generator)
        self.values = nn.Parameter(init)

    def rendered(self):
        """Prompt clamped to [0, 1] for export; compute graph stays unclamped."""
        return self.values.detach().clamp(0.0, 1.0)

    def resized(self, height, width):
        if self.values.shape[:2] == (height, width):
            return self.values
        v = self.values.permute(2, 0, 1).unsqueeze(0)
        v = F.interpolate(v, size=(height, width), mode="bilinear", align_corners=False)
        return v.squeeze(0).permute(1, 2, 0)


class WordPrompt(nn.Module):
    """Learnable token-embedding fill-in, one row per position.

    per_position=False uses a single repeated row instead.
    """

    def __init__(self, max_len, dim, per_position=True, init_std=PROMPT_INIT_STD,
                 generator=None):
        super().__init__()
        rows = max_len if per_position else 1
        init = torch.empty(rows, dim)
        init.normal_(0.0, init_std, generator=generator)
        self.values = nn.Parameter(init)
        self.max_len = max_len
        self.per_position = per_position

    def rows(self, length):
        if length > self.max_len:
            raise ValueError("length %d exceeds prompt capacity %d" % (length, self.max_len))
        if self.per_position:
            return self.values[:length]
        return self.values.expand(length, -1)


def highlight_region(image, mask, prompt):
    """Convex blend H = X * M + P * (1 - M), mask broadcast over channels.

    image: H x W x 3, mask: H x W, prompt: H x W x 3 tensor (already sized).
    """
    if mask.shape != image.shape[:2]:
        raise ValueError("mask shape %r does not match image %r"
                         % (tuple(mask.shape), tuple(image.shape)))
    if prompt.shape != image.shape:
        raise ValueError("prompt shape %r does not match image %r"
                         % (tuple(prompt.shape), tuple(image.shape)))
    m = mask.unsqueeze(-1)
    return image * m + prompt * (1.0 - m)


def highlight_text(word_embeddings, mask, prompt_rows):
    """Convex blend per token row, mask broadcast over the channel dim.

    word_embeddings: L x C, mask: L, prompt_rows: L x C.
    """
    if mask.shape[0] != word_embeddings.shape[0]:
        raise ValueError("mask length %d does not match embeddings %d"
                         % (mask.shape[0], word_embeddings.shape[0]))
    if prompt_rows.shape != word_embeddings.shape:
        raise ValueError("prompt rows shape mismatch")
    m = mask.unsqueeze(-1)
    return word_embeddings * m + prompt_rows * (1.0 - m)
