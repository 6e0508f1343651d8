"""Training orchestration: batch assembly, the per-step pipeline
(select nouns -> co-segment -> highlight -> align), the warmup+cosine
schedule, seeding, metrics, and checkpointing.
"""

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import align, checkpoint, corpus, cosegment, encoders, highlight, tokenizer


@dataclass
class TrainConfig:
    batch_size: int = 8
    steps: int = 2000
    warmup_steps: int = 200
    lr: float = 3e-4
    weight_decay: float = 0.05
    nouns_per_pair: int = 2
    image_size: int = 32
    embed_dim: int = 32
    patch_size: int = 4
    depth: int = 4
    heads: int = 4
    max_text_len: int = 32
    context_tokens: int = cosegment.DEFAULT_CONTEXT_TOKENS
    per_position_word_prompt: bool = True
    loss_weights: align.LossWeights = field(default_factory=align.LossWeights)
    surrogate: cosegment.SurrogateConfig = field(
        default_factory=cosegment.SurrogateConfig)
    # Table-2 style ablation toggles
    co_decomposition: bool = True
    word_prompt: bool = True
    region_prompt: bool = True
    freeze_image_backbone: bool = False
    freeze_text_backbone: bool = False
    seed: int = 0
    checkpoint_every: int = 500
    grad_accum: int = 1
    precision: str = "float32"  # or "float64"
    keep_duplicate_nouns: bool = True

    def __post_init__(self):
        if self.warmup_steps > self.steps:
            raise ValueError("warmup_steps must not exceed steps")
        if self.batch_size < 1 or self.nouns_per_pair < 1:
            raise ValueError("batch_size and nouns_per_pair must be >= 1")

    @property
    def dtype(self):
        return torch.float64 if self.precision == "float64" else torch.float32

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "loss_weights" in d and isinstance(d["loss_weights"], dict):
            d["loss_weights"] = align.LossWeights(**d["loss_weights"])
        if "surrogate" in d and isinstance(d["surrogate"], dict):
            d["surrogate"] = cosegment.SurrogateConfig(**d["surrogate"])
        return cls(**d)


# paper-scale profile preserved for reference; desk profile is the default
PROFILES = {
    "desk": {},
    "paper": {
        "batch_size": 64,
        "steps": 50000,
        "warmup_steps": 15000,
        "lr": 5e-6,
        "image_size": 224,
        "patch_size": 16,
        "embed_dim": 128,
    },
}


def config_for_profile(name, **overrides):
    if name not in PROFILES:
        raise ValueError("unknown profile %r" % name)
    kwargs = dict(PROFILES[name])
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


def derive_seeds(master_seed):
    """One master seed -> named per-component streams via SeedSequence.spawn."""
    ss = np.random.SeedSequence(master_seed)
    children = ss.spawn(3)
    names = ("init", "data", "dropout")
    return {name: int(child.generate_state(1)[0])
            for name, child in zip(names, children)}


def lr_at(step, config):
    """Linear warmup from 0 then cosine decay to 0 at config.steps."""
    if step < 0 or step > config.steps:
        raise ValueError("step %d outside [0, %d]" % (step, config.steps))
    if config.warmup_steps > 0 and step < config.warmup_steps:
        return config.lr * step / config.warmup_steps
    span = max(config.steps - config.warmup_steps, 1)
    progress = (step - config.warmup_steps) / span
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class CoDeModel(nn.Module):
    """Full trainable assembly: encoders, noun context, mask heads, prompts,
    contrastive temperature."""

    def __init__(self, config):
        super().__init__()
        enc_cfg = encoders.EncoderConfig(
            embed_dim=config.embed_dim,
            patch_size=config.patch_size,
            image_size=config.image_size,
            depth=config.depth,
            heads=config.heads,
            max_text_len=config.max_text_len,
        )
        self.enc_cfg = enc_cfg
        self.bundle = encoders.EncoderBundle(enc_cfg)
        self.context = cosegment.NounContext(config.context_tokens, config.embed_dim)
        self.mask_head = cosegment.MaskHead()
        self.region_prompt = highlight.RegionPrompt(config.image_size, config.image_size)
        self.word_prompt = highlight.WordPrompt(
            config.max_text_len, config.embed_dim,
            per_position=config.per_position_word_prompt)
        self.temperature = align.Temperature()

    def noun_embedding(self, noun_text):
        return cosegment.embed_noun(self.bundle, noun_text, self.context)


def build_model(config):
    seeds = derive_seeds(config.seed)
    torch.manual_seed(seeds["init"])
    model = CoDeModel(config).to(config.dtype)
    model.bundle.set_frozen(image_backbone=config.freeze_image_backbone,
                            text_backbone=config.freeze_text_backbone)
    return model


class MetricsWriter:
    """Newline-delimited JSON metrics stream: {"step", "name", "value"}."""

    def __init__(self, path=None):
        self.path = path
        self.records = []
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def emit(self, step, name, value):
        rec = {"step": step, "name": name, "value": float(value)}
        self.records.append(rec)
        if self._fh:
            self._fh.write(json.dumps(rec) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


# ---------------------------------------------------------------------------
# dataset and batches


class PairDataset:
    """In-memory list of (ImageSample, TextSample) with cached noun queries."""

    def __init__(self, pairs, keep_duplicate_nouns=True):
        self.pairs = list(pairs)
        if not self.pairs:
            raise ValueError("empty dataset")
        self._nouns = [
            corpus.extract_nouns(text, keep_duplicates=keep_duplicate_nouns)
            for _, text in self.pairs
        ]

    @classmethod
    def from_synthetic(cls, samples, **kw):
        return cls([(s.image, s.text) for s in samples], **kw)

    @classmethod
    def from_manifest(cls, manifest, root=".", max_text_len=corpus.DEFAULT_MAX_TEXT_LEN,
                      **kw):
        pairs = []
        for image_uri, caption in manifest.entries:
            image = corpus.load_image(os.path.join(root, image_uri))
            pairs.append((image, corpus.TextSample.from_text(caption, max_text_len)))
        return cls(pairs, **kw)

    def __len__(self):
        return len(self.pairs)

    def nouns(self, idx):
        return self._nouns[idx]


@dataclass
class Triplet:
    pair_index: int
    image: corpus.ImageSample
    text: corpus.TextSample
    noun: corpus.NounQuery


def build_batch(dataset, config, rng):
    """Assemble batch_size triplets; noun-free pairs are skipped."""
    triplets = []
    attempts = 0
    limit = 50 * config.batch_size + 10 * len(dataset)
    while len(triplets) < config.batch_size:
        attempts += 1
        if attempts > limit:
            raise RuntimeError("corpus exhausted of noun-bearing captions")
        idx = int(rng.integers(len(dataset)))
        queries = dataset.nouns(idx)
        if not queries:
            continue
        chosen = corpus.sample_nouns(queries, config.nouns_per_pair, rng)
        image, text = dataset.pairs[idx]
        for q in chosen:
            if len(triplets) < config.batch_size:
                triplets.append(Triplet(idx, image, text, q))
    return triplets


# ---------------------------------------------------------------------------
# forward pass


def _batched_noun_embeddings(model, noun_texts, dtype):
    """Embed many nouns in one backbone call (learnable-context and
    template variants); returns dicts keyed by noun text."""
    unique = sorted(set(noun_texts))
    backbone = model.bundle.text_backbone
    device = model.context.tokens.device
    n_ctx = model.context.tokens.shape[0]

    ctx_seqs = []
    tmpl_seqs = []
    for noun in unique:
        ids = []
        for word in tokenizer.split_words(noun):
            ids.extend(tokenizer.tokenize_word(word))
        ctx_seqs.append(ids)
        tmpl_ids = []
        template = cosegment.KNOWLEDGE_TEMPLATE.format(noun=noun)
        for word in tokenizer.split_words(template):
            tmpl_ids.extend(tokenizer.tokenize_word(word))
        tmpl_seqs.append(tmpl_ids)

    def run(seqs, prefix_ctx):
        max_len = max(len(s) for s in seqs) + (n_ctx if prefix_ctx else 0)
        B = len(seqs)
        emb = torch.zeros(B, max_len, backbone.embed_dim, dtype=dtype, device=device)
        pad = torch.ones(B, max_len, dtype=torch.bool, device=device)
        for i, ids in enumerate(seqs):
            t = torch.tensor(ids, dtype=torch.long, device=device)
            rows = backbone.token_embed(t).to(dtype)
            if prefix_ctx:
                rows = torch.cat([model.context.tokens, rows], dim=0)
            emb[i, : rows.shape[0]] = rows
            pad[i, : rows.shape[0]] = False
        feats = backbone.forward_embeddings(emb, pad)
        return backbone.pool(feats, pad)

    n_all = run(ctx_seqs, prefix_ctx=True)
    with torch.no_grad():
        np_all = run(tmpl_seqs, prefix_ctx=False)
    return {noun: cosegment.NounEmbedding(n=n_all[i], n_prime=np_all[i].detach(),
                                          noun_text=noun)
            for i, noun in enumerate(unique)}


def forward_batch(model, triplets, dataset, config):
    """Run the full pipeline on a batch; returns dict of loss terms.

    All encoder calls are batched across the triplets. Region/word features
    and noun embeddings are L2-normalized before the dot-product heads so
    the sigmoid/softmax scales are bounded.
    """
    dtype = next(model.parameters()).dtype
    device = model.context.tokens.device
    pair_indices = sorted({t.pair_index for t in triplets})
    H = W = config.image_size

    imgs = torch.stack([
        torch.as_tensor(dataset.pairs[idx][0].pixels, dtype=dtype, device=device)
        for idx in pair_indices])
    ids = torch.stack([
        torch.tensor(dataset.pairs[idx][1].tokens, dtype=torch.long, device=device)
        for idx in pair_indices])
    pad_masks = ids == 0  # PAD_ID is 0

    pixel_maps = F.normalize(model.bundle.image_backbone(imgs), dim=-1)
    word_feats = model.bundle.text_backbone(ids, pad_masks)
    word_feats = model.bundle.text_segmenter_head(word_feats, pad_masks)
    word_maps = F.normalize(word_feats, dim=-1)

    noun_texts = [q.noun_text for idx in pair_indices for q in dataset.nouns(idx)]
    noun_embs = _batched_noun_embeddings(model, noun_texts, dtype)

    parts = {}
    kg_terms = []
    text_losses = []
    text_weights = []
    pair_row = {idx: row for row, idx in enumerate(pair_indices)}
    pair_masks = {}
    pair_nhat = {}
    for row, idx in enumerate(pair_indices):
        queries = dataset.nouns(idx)
        nhat = torch.stack([F.normalize(noun_embs[q.noun_text].n, dim=-1)
                            for q in queries])
        pair_nhat[idx] = nhat
        for q in queries:
            kg_terms.append(cosegment.kg_loss(noun_embs[q.noun_text]))
        all_logits = cosegment.word_logits(
            word_maps[row], nhat.t(), model.mask_head.w, model.mask_head.b).t()
        if config.co_decomposition:
            labels = cosegment.pseudo_labels(all_logits)
            text_losses.append(
                cosegment.text_seg_loss(all_logits, labels, pad_masks[row]))
            text_weights.append(int((~pad_masks[row]).sum()))
        pair_masks[idx] = cosegment.word_masks(all_logits)

    # region masks for every triplet, batched over the stacked noun matrix
    rows = torch.tensor([pair_row[t.pair_index] for t in triplets], device=device)
    trip_maps = pixel_maps[rows]  # T x H' x W' x C
    trip_nhat = torch.stack([
        pair_nhat[t.pair_index][t.noun.index_j - 1] for t in triplets])
    trip_n = torch.stack([
        noun_embs[t.noun.noun_text].n for t in triplets])
    dots = torch.einsum("thwc,tc->thw", trip_maps, trip_nhat)
    dots = dots - dots.mean(dim=(1, 2), keepdim=True)
    masks_feat = torch.sigmoid(
        model.mask_head.gamma * dots + model.mask_head.beta)  # T x H' x W'

    parts["kg"] = torch.stack(kg_terms).mean()
    parts["seg_v"] = cosegment.image_seg_loss(
        list(masks_feat), list(trip_maps), trip_n, config.surrogate)

    if config.co_decomposition:
        weights = torch.tensor(text_weights, dtype=dtype, device=device)
        parts["seg_t"] = (torch.stack(text_losses) * weights).sum() / weights.sum()

        masks_full = F.interpolate(masks_feat.unsqueeze(1), size=(H, W),
                                   mode="bilinear", align_corners=False)[:, 0]
        trip_imgs = imgs[rows]
        if config.region_prompt:
            prompt = model.region_prompt.resized(H, W)
        else:
            prompt = torch.zeros(H, W, 3, dtype=dtype, device=device)
        m = masks_full.unsqueeze(-1)
        hv = trip_imgs * m + prompt.unsqueeze(0) * (1.0 - m)
        evs = model.bundle.segment_image_encoder(hv)

        trip_ids = ids[rows]
        trip_pad = pad_masks[rows]
        tok_emb = model.bundle.text_backbone.token_embed(trip_ids).to(dtype)
        if config.word_prompt:
            prompt_rows = model.word_prompt.rows(tok_emb.shape[1])
        else:
            prompt_rows = torch.zeros(tok_emb.shape[1:], dtype=dtype, device=device)
        word_mask_rows = torch.stack([
            pair_masks[t.pair_index][t.noun.index_j - 1] for t in triplets])
        mt = word_mask_rows.unsqueeze(-1)
        ht = tok_emb * mt + prompt_rows.unsqueeze(0) * (1.0 - mt)
        ets = model.bundle.segment_text_encoder(ht, trip_pad)

        S = align.similarity_matrix(evs, ets)
        parts["hcl"] = align.hcl_loss(S, model.temperature.tau)
    return parts


# ---------------------------------------------------------------------------
# training loop


class TrainState:
    def __init__(self, config, model=None, dataset=None):
        self.config = config
        self.model = model or build_model(config)
        self.optimizer = torch.optim.AdamW(
            [p for p in self.model.parameters() if p.requires_grad],
            lr=config.lr, weight_decay=config.weight_decay)
        seeds = derive_seeds(config.seed)
        self.data_rng = np.random.default_rng(seeds["data"])
        self.step = 0
        self.dataset = dataset

    def save(self, path):
        rng_blobs = checkpoint.rng_state_blobs(torch.get_rng_state(), self.data_rng)
        checkpoint.save_checkpoint(
            path, self.model, self.optimizer, step=self.step,
            extra={"config": self.config.to_dict()}, rng_states=rng_blobs)

    @classmethod
    def load(cls, path, dataset=None):
        header, blobs = checkpoint.load_checkpoint(path)
        config = TrainConfig.from_dict(header["extra"]["config"])
        state = cls(config, dataset=dataset)
        checkpoint.restore_model(state.model, blobs)
        checkpoint.restore_optimizer(state.optimizer, header, blobs)
        torch_state, data_state = checkpoint.restore_rng_states(blobs)
        if torch_state is not None:
            torch.set_rng_state(torch_state)
        if data_state is not None:
            state.data_rng.bit_generator.state = data_state
        state.step = header["step"]
        return state


class NaNLossError(RuntimeError):
    def __init__(self, term, step):
        super().__init__("non-finite loss term %r at step %d" % (term, step))
        self.term = term
        self.step = step


def train_step(state, batch, metrics=None):
    """One forward/backward/update; returns the per-term loss dict.

    With grad_accum > 1 the batch is split into that many micro-batches
    whose gradients accumulate before the single optimizer step.
    """
    config = state.config
    model = state.model
    model.train()

    n_micro = max(1, min(config.grad_accum, len(batch)))
    chunk = (len(batch) + n_micro - 1) // n_micro
    micro_batches = [batch[i:i + chunk] for i in range(0, len(batch), chunk)]

    lr = lr_at(state.step, config)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)

    sums = {}
    total_value = 0.0
    for micro in micro_batches:
        try:
            parts = forward_batch(model, micro, state.dataset, config)
            loss = align.total_loss(parts, config.loss_weights)
        except align.LossTermError as exc:
            raise NaNLossError(exc.term, state.step)
        if not torch.isfinite(loss):
            raise NaNLossError("total", state.step)
        (loss / len(micro_batches)).backward()
        for name, v in parts.items():
            sums[name] = sums.get(name, 0.0) + float(v.detach())
        total_value += float(loss.detach())
    state.optimizer.step()
    state.step += 1

    values = {name: v / len(micro_batches) for name, v in sums.items()}
    values["total"] = total_value / len(micro_batches)
    values["lr"] = lr
    if metrics is not None:
        for name, value in values.items():
            metrics.emit(state.step, name, value)
    return values


def train(dataset, config, metrics=None, checkpoint_dir=None, log_every=100,
          progress=None):
    """Full training run; returns the final TrainState."""
    state = TrainState(config, dataset=dataset)
    return train_loop(state, metrics=metrics, checkpoint_dir=checkpoint_dir,
                      log_every=log_every, progress=progress)


def train_loop(state, metrics=None, checkpoint_dir=None, log_every=100,
               progress=None):
    config = state.config
    while state.step < config.steps:
        batch = build_batch(state.dataset, config, state.data_rng)
        values = train_step(state, batch, metrics=metrics)
        if progress and state.step % log_every == 0:
            progress(state.step, values)
        if checkpoint_dir and config.checkpoint_every > 0 \
                and state.step % config.checkpoint_every == 0:
            os.makedirs(checkpoint_dir, exist_ok=True)
            state.save(os.path.join(checkpoint_dir, "step-%06d.ckpt" % state.step))
    return state
