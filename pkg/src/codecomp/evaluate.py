"""Zero-shot segmentation from class names, mIoU evaluation, and the
Table-2/Table-3 style ablation suite on the synthetic corpus.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import corpus, cosegment, trainer

IGNORE_INDEX = 255


@dataclass
class ClassVocabulary:
    names: list
    has_background: bool = False
    background_threshold: float = 0.5

    def __post_init__(self):
        if not self.names:
            raise ValueError("empty vocabulary")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        if any(not n for n in self.names):
            raise ValueError("class names must be non-empty")
        if not 0.0 <= self.background_threshold <= 1.0:
            raise ValueError("background_threshold must be in [0, 1]")

    def label_of(self, name):
        """Label-map integer for a class name (background shifts by one)."""
        offset = 1 if self.has_background else 0
        return self.names.index(name) + offset

    @property
    def n_labels(self):
        return len(self.names) + (1 if self.has_background else 0)


@dataclass
class IoUReport:
    per_class: dict  # label -> IoU (classes with nonzero union only)
    miou: float
    intersections: dict = field(default_factory=dict)
    unions: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "per_class": {str(k): round(v, 6) for k, v in self.per_class.items()},
            "miou": round(self.miou, 6),
        }


@torch.no_grad()
def segment_image(model, image, vocab):
    """Zero-shot label map from class names via the image segmenter.

    Returns (label_map H x W int, scores n_classes x H x W sigmoid maps).
    With a background class, pixels whose best sigmoid score falls below
    vocab.background_threshold map to background (label 0).
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    device = next(model.parameters()).device
    img = torch.as_tensor(image.pixels, dtype=dtype, device=device)
    pixel_map = model.bundle.image_backbone(img.unsqueeze(0))[0]
    pixel_map = F.normalize(pixel_map, dim=-1)
    H, W = img.shape[0], img.shape[1]

    logit_maps = []
    for name in vocab.names:
        emb = model.noun_embedding(name)
        n_hat = F.normalize(emb.n, dim=-1)
        dots = pixel_map @ n_hat
        logits = model.mask_head.gamma * (dots - dots.mean()) + model.mask_head.beta
        logits = F.interpolate(logits.unsqueeze(0).unsqueeze(0), size=(H, W),
                               mode="bilinear", align_corners=False)[0, 0]
        logit_maps.append(logits)
    logit_maps = torch.stack(logit_maps)  # n_classes x H x W
    scores = torch.sigmoid(logit_maps)

    best = torch.argmax(logit_maps, dim=0)
    if vocab.has_background:
        label_map = best + 1
        max_score = scores.max(dim=0).values
        label_map[max_score < vocab.background_threshold] = 0
    else:
        label_map = best
    return label_map.cpu().numpy().astype(np.int64), scores.cpu().numpy()


def miou(preds, gts, vocab):
    """Global-accumulation mIoU over shape-matched label-map pairs.

    Ignore pixels (255) in the ground truth are excluded. IoU is reported
    for every label with nonzero union; mIoU averages those.
    """
    if len(preds) != len(gts):
        raise ValueError("pred/gt count mismatch")
    inter = {}
    union = {}
    valid_pixels = 0
    for pred, gt in zip(preds, gts):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError("pred/gt shape mismatch")
        keep = gt != IGNORE_INDEX
        valid_pixels += int(keep.sum())
        p = pred[keep]
        g = gt[keep]
        for label in range(vocab.n_labels):
            pi = p == label
            gi = g == label
            inter[label] = inter.get(label, 0) + int((pi & gi).sum())
            union[label] = union.get(label, 0) + int((pi | gi).sum())
    if valid_pixels == 0:
        raise ValueError("no valid pixels")
    per_class = {lab: inter[lab] / union[lab]
                 for lab in inter if union[lab] > 0}
    if not per_class:
        raise ValueError("no class has nonzero union")
    return IoUReport(per_class=per_class,
                     miou=float(np.mean(list(per_class.values()))),
                     intersections=inter, unions=union)


def synthetic_label_map(sample, vocab):
    """Ground-truth label map for a synthetic sample."""
    size = sample.image.pixels.shape[0]
    gt = np.zeros((size, size), dtype=np.int64)
    for noun, mask in zip(sample.nouns, sample.gt_region_masks):
        gt[mask.astype(bool)] = vocab.label_of(noun)
    return gt


@torch.no_grad()
def evaluate_synthetic(model, samples, background_threshold=0.5):
    """Zero-shot metrics on synthetic samples with known ground truth.

    Returns a dict with miou, mean per-instance region IoU, and word-mask
    token accuracy (fraction of ground-truth segment tokens whose argmax
    class is the owning noun).
    """
    classes = sorted({n for s in samples for n in s.nouns})
    vocab = ClassVocabulary(names=classes, has_background=True,
                            background_threshold=background_threshold)
    preds = []
    gts = []
    region_ious = []
    word_hits = 0
    word_total = 0
    dtype = next(model.parameters()).dtype
    model.eval()

    noun_cache = {}
    for name in classes:
        emb = model.noun_embedding(name)
        noun_cache[name] = F.normalize(emb.n, dim=-1)

    for sample in samples:
        label_map, _ = segment_image(model, sample.image, vocab)
        preds.append(label_map)
        gts.append(synthetic_label_map(sample, vocab))
        for noun, mask in zip(sample.nouns, sample.gt_region_masks):
            p = label_map == vocab.label_of(noun)
            g = mask.astype(bool)
            u = (p | g).sum()
            region_ious.append(float((p & g).sum() / u) if u else 0.0)

        # word masks from the text segmenter over the caption's nouns
        queries = corpus.extract_nouns(sample.text)
        if len(queries) != len(sample.nouns):
            continue
        ids = torch.tensor(sample.text.tokens, dtype=torch.long)
        pad_mask = ids == 0
        from . import encoders  # local import to avoid cycle at module load
        word_map = F.normalize(encoders.embed_words(model.bundle, ids, pad_mask), dim=-1)
        rows = []
        for q in queries:
            n_hat = noun_cache.get(q.noun_text)
            if n_hat is None:
                n_hat = F.normalize(model.noun_embedding(q.noun_text).n, dim=-1)
            rows.append(cosegment.word_logits(word_map, n_hat,
                                              model.mask_head.w, model.mask_head.b))
        all_logits = torch.stack(rows)
        padded = torch.cat([torch.zeros_like(all_logits[:1]), all_logits], dim=0)
        assign = torch.argmax(padded, dim=0).numpy()  # 0 = none, j = segment j
        for j, wmask in enumerate(sample.gt_word_masks, start=1):
            token_idx = np.flatnonzero(wmask)
            word_total += len(token_idx)
            word_hits += int((assign[token_idx] == j).sum())

    report = miou(preds, gts, vocab)
    return {
        "miou": report.miou,
        "per_class": report.per_class,
        "mean_region_iou": float(np.mean(region_ious)) if region_ious else 0.0,
        "word_accuracy": word_hits / word_total if word_total else 0.0,
        "vocab": classes,
    }


# ---------------------------------------------------------------------------
# ablation suite

ABLATION_ROWS = (
    {"co_decomposition": False, "word_prompt": False, "region_prompt": False},
    {"co_decomposition": True, "word_prompt": False, "region_prompt": False},
    {"co_decomposition": True, "word_prompt": True, "region_prompt": False},
    {"co_decomposition": True, "word_prompt": True, "region_prompt": True},
)

HCL_SWEEP = (0.05, 0.1, 0.25, 0.5, 0.75, 1.0)


def run_ablation_suite(train_samples, eval_samples, base_config, sweep=False,
                       progress=None):
    """Train/evaluate each component toggle (or lambda_hcl sweep) row.

    Returns a list of row dicts with the flags and synthetic metrics.
    """
    dataset = trainer.PairDataset.from_synthetic(train_samples)
    rows = []
    if sweep:
        variants = []
        for lam in HCL_SWEEP:
            cfg = trainer.TrainConfig.from_dict(base_config.to_dict())
            cfg.loss_weights.lambda_hcl = lam
            variants.append(({"lambda_hcl": lam}, cfg))
    else:
        variants = []
        for flags in ABLATION_ROWS:
            cfg_dict = base_config.to_dict()
            cfg_dict.update(flags)
            variants.append((dict(flags), trainer.TrainConfig.from_dict(cfg_dict)))

    for tag, cfg in variants:
        state = trainer.train(dataset, cfg, progress=progress)
        metrics = evaluate_synthetic(state.model, eval_samples)
        row = dict(tag)
        row["miou"] = metrics["miou"]
        row["mean_region_iou"] = metrics["mean_region_iou"]
        row["word_accuracy"] = metrics["word_accuracy"]
        rows.append(row)
    return rows


def format_ablation_table(rows):
    """Render ablation rows as an aligned text table."""
    if not rows:
        return ""
    flag_cols = [k for k in ("co_decomposition", "word_prompt", "region_prompt",
                             "lambda_hcl") if k in rows[0]]
    metric_cols = ["miou", "mean_region_iou", "word_accuracy"]
    header = flag_cols + metric_cols
    lines = ["  ".join("%-18s" % h for h in header)]
    for row in rows:
        cells = []
        for col in flag_cols:
            v = row[col]
            cells.append("%-18s" % (("yes" if v else "no") if isinstance(v, bool) else v))
        for col in metric_cols:
            cells.append("%-18.6f" % row[col])
        lines.append("  ".join(cells))
    return "\n".join(lines)
