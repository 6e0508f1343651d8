import math

import mpmath
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from codecomp import cosegment, encoders


@pytest.fixture(scope="module")
def bundle():
    cfg = encoders.EncoderConfig(embed_dim=16, patch_size=8, image_size=32,
                                 depth=2, heads=2, max_text_len=16)
    return encoders.build_bundle(cfg, seed=0, dtype=torch.float64)


@pytest.fixture(scope="module")
def context():
    torch.manual_seed(1)
    return cosegment.NounContext(4, 16).to(torch.float64)


# ---------------------------------------------------------------------------
# noun embedding / kg loss

def test_embed_noun_shapes(bundle, context):
    emb = cosegment.embed_noun(bundle, "circle", context)
    assert emb.n.shape == (16,)
    assert emb.n_prime.shape == (16,)
    assert not emb.n_prime.requires_grad


def test_embed_noun_template_constant(bundle, context):
    a = cosegment.embed_noun(bundle, "dog", context)
    b = cosegment.embed_noun(bundle, "dog", context)
    assert torch.equal(a.n_prime, b.n_prime)


def test_embed_noun_distinct_templates(bundle, context):
    a = cosegment.embed_noun(bundle, "dog", context)
    b = cosegment.embed_noun(bundle, "cat", context)
    assert (a.n_prime - b.n_prime).abs().max() > 0


def test_embed_noun_empty_raises(bundle, context):
    with pytest.raises(ValueError):
        cosegment.embed_noun(bundle, "  ", context)


def test_kg_loss_zero_case():
    e = cosegment.NounEmbedding(n=torch.ones(4), n_prime=torch.ones(4))
    assert float(cosegment.kg_loss(e)) == 0.0


def test_kg_loss_orthogonal_unit():
    e = cosegment.NounEmbedding(n=torch.tensor([1.0, 0.0]),
                                n_prime=torch.tensor([0.0, 1.0]))
    assert float(cosegment.kg_loss(e)) == pytest.approx(2.0)


def test_kg_loss_arbitrary_precision_oracle():
    # || (0.5, 0.5) - (0, 0) ||^2 via mpmath
    expected = float(mpmath.mpf("0.5") ** 2 + mpmath.mpf("0.5") ** 2)
    e = cosegment.NounEmbedding(n=torch.tensor([0.5, 0.5], dtype=torch.float64),
                                n_prime=torch.zeros(2, dtype=torch.float64))
    assert float(cosegment.kg_loss(e)) == pytest.approx(expected, abs=1e-12)


def test_kg_loss_gradient_flows_to_n_only():
    n = torch.tensor([0.3, -0.2], dtype=torch.float64, requires_grad=True)
    n_prime = torch.tensor([0.1, 0.4], dtype=torch.float64, requires_grad=True)
    loss = cosegment.kg_loss(cosegment.NounEmbedding(n=n, n_prime=n_prime))
    loss.backward()
    assert n.grad is not None and n.grad.abs().max() > 0
    assert n_prime.grad is None or n_prime.grad.abs().max() == 0


def test_kg_loss_gradient_finite_differences():
    g = torch.Generator().manual_seed(0)
    for _ in range(20):
        n = torch.randn(6, generator=g, dtype=torch.float64, requires_grad=True)
        n_prime = torch.randn(6, generator=g, dtype=torch.float64)
        loss = cosegment.kg_loss(cosegment.NounEmbedding(n=n, n_prime=n_prime))
        loss.backward()
        eps = 1e-6
        for i in range(6):
            np_ = n.detach().clone(); np_[i] += eps
            nm = n.detach().clone(); nm[i] -= eps
            fd = (float(cosegment.kg_loss(cosegment.NounEmbedding(n=np_, n_prime=n_prime)))
                  - float(cosegment.kg_loss(cosegment.NounEmbedding(n=nm, n_prime=n_prime)))) / (2 * eps)
            rel = abs(float(n.grad[i]) - fd) / max(abs(fd), 1e-8)
            assert rel < 1e-4


# ---------------------------------------------------------------------------
# region mask

def test_region_mask_orthogonal_gives_half():
    pixel_map = torch.zeros(3, 3, 4, dtype=torch.float64)
    pixel_map[..., 0] = 1.0
    noun = torch.tensor([0.0, 1.0, 0.0, 0.0], dtype=torch.float64)
    mask = cosegment.region_mask(pixel_map, noun, torch.tensor(3.0), torch.tensor(0.0))
    assert torch.allclose(mask, torch.full((3, 3), 0.5, dtype=torch.float64))


def test_region_mask_saturation():
    pixel_map = torch.ones(2, 2, 4, dtype=torch.float64)
    noun = torch.ones(4, dtype=torch.float64)
    mask = cosegment.region_mask(pixel_map, noun, torch.tensor(1e4), torch.tensor(0.0))
    assert mask.min() > 1.0 - 1e-9


def test_region_mask_bruteforce_oracle():
    g = torch.Generator().manual_seed(3)
    pixel_map = torch.randn(2, 2, 4, generator=g, dtype=torch.float64)
    noun = torch.randn(4, generator=g, dtype=torch.float64)
    mask = cosegment.region_mask(pixel_map, noun, torch.tensor(1.0, dtype=torch.float64),
                                 torch.tensor(0.0, dtype=torch.float64))
    mpmath.mp.dps = 50
    for h in range(2):
        for w in range(2):
            dot = mpmath.mpf(0)
            for c in range(4):
                dot += mpmath.mpf(float(pixel_map[h, w, c])) * mpmath.mpf(float(noun[c]))
            expected = 1 / (1 + mpmath.e ** (-dot))
            assert float(mask[h, w]) == pytest.approx(float(expected), abs=1e-12)


def test_region_mask_upsample_and_range():
    g = torch.Generator().manual_seed(4)
    pixel_map = torch.randn(4, 4, 8, generator=g, dtype=torch.float64)
    noun = torch.randn(8, generator=g, dtype=torch.float64)
    mask = cosegment.region_mask(pixel_map, noun, torch.tensor(2.0), torch.tensor(0.1),
                                 out_size=(32, 32))
    assert mask.shape == (32, 32)
    assert mask.min() >= 0.0 and mask.max() <= 1.0


def test_region_mask_dim_mismatch():
    with pytest.raises(ValueError):
        cosegment.region_mask(torch.zeros(2, 2, 4), torch.zeros(5),
                              torch.tensor(1.0), torch.tensor(0.0))


# ---------------------------------------------------------------------------
# word logits

def test_word_logits_zero_scale():
    wm = torch.randn(5, 4, dtype=torch.float64)
    noun = torch.randn(4, dtype=torch.float64)
    out = cosegment.word_logits(wm, noun, torch.tensor(0.0), torch.tensor(-1.5))
    assert torch.allclose(out, torch.full((5,), -1.5, dtype=torch.float64))


def test_word_logits_orthogonal():
    wm = torch.zeros(3, 4, dtype=torch.float64)
    wm[:, 0] = 1.0
    noun = torch.tensor([0.0, 1.0, 0.0, 0.0], dtype=torch.float64)
    out = cosegment.word_logits(wm, noun, torch.tensor(2.0), torch.tensor(0.3))
    assert torch.allclose(out, torch.full((3,), 0.3, dtype=torch.float64))


def test_word_logits_direct_arithmetic():
    # w=2, b=-1, dot=0.75 -> 0.5
    wm = torch.tensor([[0.75, 0.0]], dtype=torch.float64)
    noun = torch.tensor([1.0, 0.0], dtype=torch.float64)
    out = cosegment.word_logits(wm, noun, torch.tensor(2.0, dtype=torch.float64),
                                torch.tensor(-1.0, dtype=torch.float64))
    assert float(out[0]) == pytest.approx(0.5, abs=1e-12)


# ---------------------------------------------------------------------------
# word masks / residual

def test_word_masks_single_zero_logit():
    logits = torch.zeros(1, 3, dtype=torch.float64)
    masks = cosegment.word_masks(logits)
    assert torch.allclose(masks, torch.full((1, 3), 0.5, dtype=torch.float64))


def test_word_masks_symmetric_thirds():
    logits = torch.zeros(2, 4, dtype=torch.float64)
    masks = cosegment.word_masks(logits)
    assert torch.allclose(masks, torch.full((2, 4), 1 / 3, dtype=torch.float64))
    res = cosegment.word_residual(logits)
    assert torch.allclose(res, torch.full((4,), 1 / 3, dtype=torch.float64))


def test_word_masks_arbitrary_precision_value():
    mpmath.mp.dps = 50
    logits = torch.tensor([[1.0], [0.0]], dtype=torch.float64)
    masks = cosegment.word_masks(logits)
    expected = mpmath.e / (2 + mpmath.e)
    assert float(masks[0, 0]) == pytest.approx(float(expected), abs=1e-12)
    assert float(expected) == pytest.approx(0.57611, abs=1e-5)


@given(st.integers(min_value=1, max_value=8), st.integers(min_value=1, max_value=64),
       st.integers(min_value=0, max_value=10_000))
@settings(max_examples=100, deadline=None)
def test_word_masks_simplex_property(J, L, seed):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(J, L, generator=g, dtype=torch.float64) * 5
    masks = cosegment.word_masks(logits)
    res = cosegment.word_residual(logits)
    total = masks.sum(dim=0) + res
    assert (total - 1.0).abs().max() < 1e-6
    # residual closed form
    expected_res = 1.0 / (1.0 + torch.exp(logits).sum(dim=0))
    assert (res - expected_res).abs().max() < 1e-9


def test_word_masks_monotonicity():
    g = torch.Generator().manual_seed(11)
    logits = torch.randn(3, 5, generator=g, dtype=torch.float64)
    masks = cosegment.word_masks(logits)
    bumped = logits.clone()
    bumped[1, 2] += 0.3
    masks2 = cosegment.word_masks(bumped)
    assert masks2[1, 2] > masks[1, 2]
    assert masks2[0, 2] < masks[0, 2]
    assert masks2[2, 2] < masks[2, 2]


def test_word_masks_overflow_safe():
    logits = torch.full((2, 3), 1000.0, dtype=torch.float64)
    masks = cosegment.word_masks(logits)
    assert torch.isfinite(masks).all()
    assert torch.allclose(masks.sum(dim=0), torch.ones(3, dtype=torch.float64))


# ---------------------------------------------------------------------------
# pseudo labels

def test_pseudo_labels_clear_argmax():
    logits = torch.tensor([[3.0], [-1.0]], dtype=torch.float64)
    labels = cosegment.pseudo_labels(logits)
    assert labels[0, 0] == 1.0 and labels[1, 0] == 0.0


def test_pseudo_labels_none_class_wins():
    logits = torch.tensor([[-1.0], [-2.0]], dtype=torch.float64)
    labels = cosegment.pseudo_labels(logits)
    assert labels.sum() == 0.0


def test_pseudo_labels_tie_none_class_first():
    logits = torch.tensor([[0.0], [0.0]], dtype=torch.float64)
    labels = cosegment.pseudo_labels(logits)
    assert labels.sum() == 0.0  # none class wins ties at 0


def test_pseudo_labels_tie_lowest_segment():
    logits = torch.tensor([[2.0], [2.0]], dtype=torch.float64)
    labels = cosegment.pseudo_labels(logits)
    assert labels[0, 0] == 1.0 and labels[1, 0] == 0.0


def test_pseudo_labels_bruteforce_oracle():
    g = torch.Generator().manual_seed(13)
    logits = torch.randn(3, 5, generator=g, dtype=torch.float64)
    labels = cosegment.pseudo_labels(logits)
    for i in range(5):
        candidates = [0.0] + [float(logits[j, i]) for j in range(3)]
        winner = candidates.index(max(candidates))
        for j in range(3):
            assert float(labels[j, i]) == (1.0 if winner == j + 1 else 0.0)


def test_pseudo_labels_detached():
    logits = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
    labels = cosegment.pseudo_labels(logits)
    assert not labels.requires_grad


def test_pseudo_labels_scaling_preserves_winner():
    g = torch.Generator().manual_seed(17)
    logits = torch.randn(4, 6, generator=g, dtype=torch.float64)
    labels = cosegment.pseudo_labels(logits)
    has_winner = labels.sum(dim=0) > 0
    scaled = cosegment.pseudo_labels(logits * 3.0)
    assert torch.equal(labels[:, has_winner], scaled[:, has_winner])


# ---------------------------------------------------------------------------
# text segmentation loss

def test_text_seg_loss_one_hot_zero():
    logits = torch.tensor([[50.0, -50.0], [-50.0, -50.0]], dtype=torch.float64)
    labels = cosegment.pseudo_labels(logits)
    pad = torch.zeros(2, dtype=torch.bool)
    assert float(cosegment.text_seg_loss(logits, labels, pad)) < 1e-12


def test_text_seg_loss_half_probability():
    # J=1, logit 0 -> m = 0.5; label assigns segment 1 -> -log 0.5
    logits = torch.zeros(1, 1, dtype=torch.float64)
    labels = torch.ones(1, 1, dtype=torch.float64)
    pad = torch.zeros(1, dtype=torch.bool)
    loss = float(cosegment.text_seg_loss(logits, labels, pad))
    assert loss == pytest.approx(math.log(2.0), abs=1e-9)


def test_text_seg_loss_matches_independent_ce_oracle():
    g = torch.Generator().manual_seed(19)
    logits = torch.randn(3, 7, generator=g, dtype=torch.float64)
    labels = cosegment.pseudo_labels(logits)
    pad = torch.tensor([False] * 5 + [True] * 2)
    loss = float(cosegment.text_seg_loss(logits, labels, pad))
    # independent per-token probability computation
    total = 0.0
    for i in range(5):
        exps = [1.0] + [math.exp(float(logits[j, i])) for j in range(3)]
        Z = sum(exps)
        probs = [e / Z for e in exps]
        col = [float(labels[j, i]) for j in range(3)]
        winner = 0 if sum(col) == 0 else col.index(1.0) + 1
        total += -math.log(probs[winner])
    assert loss == pytest.approx(total / 5, abs=1e-6)


def test_text_seg_loss_all_pad_raises():
    with pytest.raises(ValueError):
        cosegment.text_seg_loss(torch.zeros(1, 2), torch.zeros(1, 2),
                                torch.ones(2, dtype=torch.bool))


def test_text_seg_loss_gradient_finite_differences():
    g = torch.Generator().manual_seed(23)
    for _ in range(20):
        J = int(torch.randint(1, 4, (1,), generator=g))
        L = int(torch.randint(2, 6, (1,), generator=g))
        logits = torch.randn(J, L, generator=g, dtype=torch.float64, requires_grad=True)
        labels = cosegment.pseudo_labels(logits)
        pad = torch.zeros(L, dtype=torch.bool)
        loss = cosegment.text_seg_loss(logits, labels, pad)
        loss.backward()
        eps = 1e-6
        for j in range(J):
            for i in range(L):
                lp = logits.detach().clone(); lp[j, i] += eps
                lm = logits.detach().clone(); lm[j, i] -= eps
                fd = (float(cosegment.text_seg_loss(lp, labels, pad))
                      - float(cosegment.text_seg_loss(lm, labels, pad))) / (2 * eps)
                if abs(fd) > 1e-10:
                    rel = abs(float(logits.grad[j, i]) - fd) / max(abs(fd), 1e-8)
                    assert rel < 1e-4


# ---------------------------------------------------------------------------
# image segmentation surrogate

def _surrogate_instance(seed, B=2, H=3, W=3, C=4):
    g = torch.Generator().manual_seed(seed)
    masks = [torch.rand(H, W, generator=g, dtype=torch.float64) for _ in range(B)]
    maps = [torch.randn(H, W, C, generator=g, dtype=torch.float64) for _ in range(B)]
    nouns = torch.randn(B, C, generator=g, dtype=torch.float64)
    return masks, maps, nouns


def test_image_seg_loss_area_term_inactive_inside_window():
    cfg = cosegment.SurrogateConfig(tv_weight=0.0, contrastive_weight=0.0)
    mask = torch.full((4, 4), 0.3, dtype=torch.float64)
    loss = cosegment.image_seg_loss([mask], [torch.zeros(4, 4, 2, dtype=torch.float64)],
                                    torch.zeros(1, 2, dtype=torch.float64), cfg)
    assert float(loss) == pytest.approx(0.0, abs=1e-12)


def test_image_seg_loss_tv_zero_for_constant_mask():
    cfg = cosegment.SurrogateConfig(area_weight=0.0, contrastive_weight=0.0)
    mask = torch.full((5, 5), 0.8, dtype=torch.float64)
    loss = cosegment.image_seg_loss([mask], [torch.zeros(5, 5, 2, dtype=torch.float64)],
                                    torch.zeros(1, 2, dtype=torch.float64), cfg)
    assert float(loss) == pytest.approx(0.0, abs=1e-12)


def test_image_seg_loss_contrastive_matches_2x2_oracle():
    cfg = cosegment.SurrogateConfig(area_weight=0.0, tv_weight=0.0,
                                    contrastive_weight=1.0, contrastive_tau=0.1)
    masks, maps, nouns = _surrogate_instance(29)
    loss = float(cosegment.image_seg_loss(masks, maps, nouns, cfg))
    # brute-force 2x2 InfoNCE
    pooled = []
    for m, pm in zip(masks, maps):
        w = m.unsqueeze(-1)
        pooled.append(((pm * w).sum(dim=(0, 1)) / w.sum()))
    f = torch.stack([p / p.norm() for p in pooled])
    n = torch.stack([v / v.norm() for v in nouns])
    S = (f @ n.t()) / 0.1
    expected = 0.0
    for i in range(2):
        row = torch.logsumexp(S[i], dim=0) - S[i, i]
        col = torch.logsumexp(S[:, i], dim=0) - S[i, i]
        expected += 0.5 * (float(row) + float(col))
    expected /= 2
    assert loss == pytest.approx(expected, abs=1e-9)


def test_image_seg_loss_terms_toggleable():
    masks, maps, nouns = _surrogate_instance(31)
    off = cosegment.SurrogateConfig(area_weight=0.0, tv_weight=0.0,
                                    contrastive_weight=0.0)
    assert float(cosegment.image_seg_loss(masks, maps, nouns, off)) == 0.0


def test_image_seg_loss_gradient_finite_differences():
    cfg = cosegment.SurrogateConfig()
    g = torch.Generator().manual_seed(37)
    for trial in range(20):
        masks, maps, nouns = _surrogate_instance(100 + trial)
        leaves = [m.requires_grad_(True) for m in masks]
        loss = cosegment.image_seg_loss(leaves, maps, nouns, cfg)
        loss.backward()
        eps = 1e-6
         # probe one random element per mask
        for b, m in enumerate(masks):
            i = int(torch.randint(m.shape[0], (1,), generator=g))
            j = int(torch.randint(m.shape[1], (1,), generator=g))
            mp = [x.detach().clone() for x in masks]
            mm = [x.detach().clone() for x in masks]
            mp[b][i, j] += eps
            mm[b][i, j] -= eps
            fd = (float(cosegment.image_seg_loss(mp, maps, nouns, cfg))
                  - float(cosegment.image_seg_loss(mm, maps, nouns, cfg))) / (2 * eps)
            if abs(fd) > 1e-9:
                rel = abs(float(leaves[b].grad[i, j]) - fd) / max(abs(fd), 1e-8)
                assert rel < 1e-4
