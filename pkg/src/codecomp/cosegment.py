"""Co-segmentation of images and captions conditioned on nouns.

Noun embeddings come from learnable context tokens anchored to a
hand-crafted template embedding; region masks are sigmoid dot products
against the dense image features; word masks are a softmax over all noun
segments plus an implicit none-of-the-above class. The image-side
segmentation loss is a self-contained surrogate (area window, total
variation, batch contrastive) with individually toggleable terms.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tokenizer

KNOWLEDGE_TEMPLATE = "a photo of a {noun}"
DEFAULT_CONTEXT_TOKENS = 4


@dataclass
class NounEmbedding:
    n: torch.Tensor  # C, from learnable context + noun
    n_prime: torch.Tensor  # C, from the hand-crafted template, detached
    noun_text: str = ""


class NounContext(nn.Module):
    """Learnable context token embeddings prepended to the noun tokens."""

    def __init__(self, n_tokens, dim, init_std=0.02):
        super().__init__()
        init = torch.empty(n_tokens, dim).normal_(0.0, init_std)
        self.tokens = nn.Parameter(init)


class MaskHead(nn.Module):
    """Scale/bias for region masks (gamma, beta) and word logits (w, b)."""

    def __init__(self, gamma_init=10.0, beta_init=0.0, w_init=5.0, b_init=0.0):
        super().__init__()
        self.gamma = nn.Parameter(torch.tensor(float(gamma_init)))
        self.beta = nn.Parameter(torch.tensor(float(beta_init)))
        self.w = nn.Parameter(torch.tensor(float(w_init)))
        self.b = nn.Parameter(torch.tensor(float(b_init)))


def _encode_token_sequence(bundle, embeddings_rows):
    """Run a single unpadded embedding sequence through the text backbone."""
    emb = embeddings_rows.unsqueeze(0)
    pad_mask = torch.zeros(1, emb.shape[1], dtype=torch.bool, device=emb.device)
    feats = bundle.text_backbone.forward_embeddings(emb, pad_mask)
    return bundle.text_backbone.pool(feats, pad_mask)[0]


def embed_noun(bundle, noun_text, context):
    """Noun embedding pair (learnable-context n, frozen template n')."""
    if not noun_text or not noun_text.strip():
        raise ValueError("empty noun")
    device = context.tokens.device
    dtype = context.tokens.dtype
    noun_ids = []
    for word in tokenizer.split_words(noun_text):
        noun_ids.extend(tokenizer.tokenize_word(word))
    ids = torch.tensor(noun_ids, dtype=torch.long, device=device)
    noun_emb = bundle.text_backbone.token_embed(ids).to(dtype)
    seq = torch.cat([context.tokens, noun_emb], dim=0)
    n = _encode_token_sequence(bundle, seq)

    template = KNOWLEDGE_TEMPLATE.format(noun=noun_text)
    tmpl_ids = []
    for word in tokenizer.split_words(template):
        tmpl_ids.extend(tokenizer.tokenize_word(word))
    tmpl = torch.tensor(tmpl_ids, dtype=torch.long, device=device)
    with torch.no_grad():
        tmpl_emb = bundle.text_backbone.token_embed(tmpl)
        n_prime = _encode_token_sequence(bundle, tmpl_emb)
    return NounEmbedding(n=n, n_prime=n_prime.detach(), noun_text=noun_text)


def kg_loss(embedding):
    """Squared L2 distance between the learnable and template embeddings."""
    if embedding.n.shape != embedding.n_prime.shape:
        raise ValueError("noun embedding shapes differ")
    return ((embedding.n - embedding.n_prime.detach()) ** 2).sum()


def region_mask(pixel_map, noun_vec, gamma, beta, out_size=None, center=False):
    """Sigmoid of scaled noun-pixel dot products, upsampled to out_size.

    pixel_map: H' x W' x C, noun_vec: C. Returns H x W in (0, 1); when
    out_size is None the feature resolution is kept. With center=True the
    dot products are mean-centered over the spatial grid first, so the mask
    responds to relative saliency rather than a global similarity offset.
    """
    if pixel_map.shape[-1] != noun_vec.shape[0]:
        raise ValueError("channel mismatch: %d vs %d"
                         % (pixel_map.shape[-1], noun_vec.shape[0]))
    dots = pixel_map @ noun_vec
    if center:
        dots = dots - dots.mean()
    logits = gamma * dots + beta
    mask = torch.sigmoid(logits)
    if out_size is not None and tuple(mask.shape) != tuple(out_size):
        mask = F.interpolate(mask.unsqueeze(0).unsqueeze(0), size=tuple(out_size),
                             mode="bilinear", align_corners=False)[0, 0]
    return mask


def word_logits(word_map, noun_vec, w, b):
    """Per-token logits for one noun: w * <x_i, n> + b."""
    if word_map.shape[-1] != noun_vec.shape[0]:
        raise ValueError("channel mismatch")
    return w * (word_map @ noun_vec) + b


def word_masks(all_logits):
    """Soft segment assignment per token over J segments + a none class.

    all_logits: J x L. Returns J x L with
    m[j, i] = exp(l[j, i]) / (1 + sum_j' exp(l[j', i])), computed via a
    max-shifted softmax that includes the implicit zero logit.
    """
    if all_logits.ndim != 2 or all_logits.shape[0] < 1:
        raise ValueError("expected J x L logits with J >= 1")
    padded = torch.cat([torch.zeros_like(all_logits[:1]), all_logits], dim=0)
    probs = torch.softmax(padded, dim=0)
    return probs[1:]


def word_residual(all_logits):
    """Probability of the none class per token: 1 / (1 + sum_j exp(l_j))."""
    padded = torch.cat([torch.zeros_like(all_logits[:1]), all_logits], dim=0)
    return torch.softmax(padded, dim=0)[0]


def pseudo_labels(all_logits):
    """One-hot argmax over J segments plus the zero-logit none class.

    Ties break toward the lowest class index with the none class first, so
    a segment must strictly beat both the none class and all earlier
    segments. Returns a detached J x L {0,1} tensor (row j all-zero at
    token i when the none class wins).
    """
    with torch.no_grad():
        padded = torch.cat([torch.zeros_like(all_logits[:1]), all_logits], dim=0)
        # torch.argmax returns the first maximal index: lowest class wins ties
        winners = torch.argmax(padded, dim=0)
        labels = torch.zeros_like(all_logits)
        seg = winners > 0
        labels[winners[seg] - 1, seg.nonzero(as_tuple=True)[0]] = 1.0
    return labels


def text_seg_loss(all_logits, labels, pad_mask):
    """(J+1)-way cross-entropy against pseudo labels, averaged over tokens.

    all_logits: J x L, labels: J x L one-hot (all-zero column = none class),
    pad_mask: L bool (True at pads, excluded).
    """
    if all_logits.shape != labels.shape:
        raise ValueError("logit/label shape mismatch")
    keep = ~pad_mask
    if not keep.any():
        raise ValueError("all-pad text")
    padded = torch.cat([torch.zeros_like(all_logits[:1]), all_logits], dim=0)
    log_probs = F.log_softmax(padded, dim=0)  # (J+1) x L
    none_label = 1.0 - labels.sum(dim=0, keepdim=True)
    full_labels = torch.cat([none_label, labels], dim=0)
    ce = -(full_labels * log_probs).sum(dim=0)
    return ce[keep].mean()


@dataclass
class SurrogateConfig:
    area_lo: float = 0.05
    area_hi: float = 0.6
    area_weight: float = 1.0
    tv_weight: float = 0.1
    contrastive_weight: float = 1.0
    contrastive_tau: float = 0.1


def _area_term(mask, lo, hi):
    mean = mask.mean()
    return F.relu(lo - mean) ** 2 + F.relu(mean - hi) ** 2


def _tv_term(mask):
    dh = (mask[1:, :] - mask[:-1, :]).abs().mean() if mask.shape[0] > 1 else mask.sum() * 0
    dw = (mask[:, 1:] - mask[:, :-1]).abs().mean() if mask.shape[1] > 1 else mask.sum() * 0
    return dh + dw


def image_seg_loss(masks, pixel_maps, noun_vecs, cfg=None):
    """Surrogate image-segmentation objective over a batch of region masks.

    masks: list of H' x W' soft masks at feature resolution; pixel_maps:
    matching list of H' x W' x C maps; noun_vecs: B x C noun embeddings.
    Terms: area window hinge, total-variation smoothness, and an InfoNCE
    between mask-pooled features and noun embeddings across the batch.
    """
    cfg = cfg or SurrogateConfig()
    B = len(masks)
    if B < 1:
        raise ValueError("empty batch")
    zero = masks[0].sum() * 0
    area = zero.clone()
    tv = zero.clone()
    for m in masks:
        area = area + _area_term(m, cfg.area_lo, cfg.area_hi)
        tv = tv + _tv_term(m)
    area = area / B
    tv = tv / B

    loss = cfg.area_weight * area + cfg.tv_weight * tv
    if cfg.contrastive_weight > 0 and B >= 2:
        pooled = []
        for m, pm in zip(masks, pixel_maps):
            w = m.unsqueeze(-1)
            pooled.append((pm * w).sum(dim=(0, 1)) / w.sum().clamp(min=1e-8))
        f = F.normalize(torch.stack(pooled), dim=-1)
        n = F.normalize(noun_vecs, dim=-1)
        logits = (f @ n.t()) / cfg.contrastive_tau
        targets = torch.arange(B, device=logits.device)
        contrast = 0.5 * (F.cross_entropy(logits, targets)
                          + F.cross_entropy(logits.t(), targets))
        loss = loss + cfg.contrastive_weight * contrast
    return loss
