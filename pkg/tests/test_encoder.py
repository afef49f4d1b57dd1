import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mist.core import HyperParams
from mist.dataio import read_clips, select
from mist.encoder import (
    BackboneOutputs,
    SelfGuidedAttention,
    ToyBackbone,
    accumulate_gradients,
    attention_maps,
    backbone_forward,
    build_encoder,
    class_pool,
    encoder_loss,
    encoder_score_video,
    finetune,
    load_encoder,
    read_attention_file,
    save_encoder,
    sga_forward,
    weighted_ce,
    write_attention_file,
)
from mist.errors import ShapeError

from gradcheck import numeric_grad, relative_error, tiny_encoder_gradcheck

TINY_WIDTHS = (2, 3, 3, 4, 4)


def _half(n):
    return (n + 1) // 2


def test_backbone_zero_input_zero_bias():
    bb = ToyBackbone(1, TINY_WIDTHS)
    with torch.no_grad():
        for block in bb.blocks:
            block[0].bias.zero_()
    outs = bb(torch.zeros(2, 1, 16, 16, 16))
    assert torch.all(outs.m_b4 == 0) and torch.all(outs.m_b5 == 0)


@pytest.mark.parametrize("frames,size", [(16, 16), (8, 32), (16, 8)])
def test_backbone_shapes(frames, size):
    bb = ToyBackbone(3, (4, 5, 6, 7, 9))
    outs = bb(torch.randn(2, 3, frames, size, size))
    t, s = frames, size
    for _ in range(4):
        t, s = _half(t), _half(s)
    assert tuple(outs.m_b4.shape) == (2, 7, t, s, s)
    assert tuple(outs.m_b5.shape) == (2, 9, _half(t), _half(s), _half(s))


def test_backbone_deterministic():
    model = build_encoder(HyperParams(K=2), 0, widths=TINY_WIDTHS)
    clip = torch.randn(1, 1, 8, 16, 16)
    a = backbone_forward(torch.cat([clip, clip]), model)
    assert torch.equal(a.m_b4[0], a.m_b4[1]) and torch.equal(a.m_b5[0], a.m_b5[1])
    b = backbone_forward(clip, model)
    assert torch.allclose(a.m_b5[:1], b.m_b5)


def test_backbone_rejects_wrong_channels():
    with pytest.raises(ShapeError):
        ToyBackbone(1, TINY_WIDTHS)(torch.zeros(1, 3, 8, 8, 8))


def _random_outs(rng, b=2, c4=4, c5=6):
    m_b4 = torch.from_numpy(rng.standard_normal((b, c4, 2, 4, 4)))
    m_b5 = torch.from_numpy(rng.standard_normal((b, c5, 1, 2, 2)))
    return BackboneOutputs(m_b4, m_b5)


def test_attention_zero_is_identity(rng):
    sga = SelfGuidedAttention(4, K=2).double()
    outs = _random_outs(rng)
    res = sga_forward(outs, sga, attention=torch.zeros(2, 1, 1, 2, 2, dtype=torch.float64))
    assert torch.equal(res.m_a, outs.m_b5)


def test_attention_one_doubles(rng):
    sga = SelfGuidedAttention(4, K=2).double()
    outs = _random_outs(rng)
    res = sga_forward(outs, sga, attention=torch.ones(2, 1, 1, 2, 2, dtype=torch.float64))
    assert torch.equal(res.m_a, 2 * outs.m_b5)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_attended_map_algebra(seed):
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    sga = SelfGuidedAttention(4, K=3).double()
    outs = _random_outs(rng)
    res = sga(outs)
    assert torch.allclose(res.m_a - outs.m_b5, res.attention * outs.m_b5, atol=1e-12)
    assert torch.all((res.attention > 0) & (res.attention < 1))
    assert res.m_a.shape == outs.m_b5.shape
    assert res.m_star_b4.shape[1] == 6 and res.m.shape[1] == 6
    assert torch.allclose(res.p_hat.sum(1), torch.ones(2, dtype=torch.float64), atol=1e-6)
    assert torch.all(res.p_hat >= 0)


def test_guided_probabilities_k2(rng):
    m = rng.standard_normal((3, 4, 2, 3, 3))
    pooled = class_pool(torch.from_numpy(m), 2).softmax(1).numpy()
    for b in range(3):
        # channels 0..1 vote normal, 2..3 abnormal
        means = [np.mean([m[b, c].mean() for c in range(cls * 2, cls * 2 + 2)]) for cls in range(2)]
        expected = np.exp(means) / np.sum(np.exp(means))
        np.testing.assert_allclose(pooled[b], expected, atol=1e-12)


def test_class_pool_k1_is_identity(rng):
    m = torch.from_numpy(rng.standard_normal((2, 2, 1, 1, 1)))
    assert torch.equal(class_pool(m, 1), m.flatten(1))


def test_attention_resized_to_block5():
    sga = SelfGuidedAttention(4, K=2)
    outs = BackboneOutputs(torch.randn(1, 4, 3, 5, 5), torch.randn(1, 6, 3, 5, 5))
    res = sga(outs)
    assert res.attention.shape == (1, 1, 3, 5, 5)


def test_weighted_ce_examples():
    assert float(weighted_ce(torch.tensor(1.0 - 1e-12, dtype=torch.float64), 1.0)) < 1e-6
    assert float(weighted_ce(torch.tensor(0.5), 0.0, 1.2, 0.8)) == pytest.approx(0.8 * math.log(2), abs=1e-6)
    assert float(weighted_ce(torch.tensor(0.5), 0.5, 1.0, 1.0)) == pytest.approx(math.log(2), abs=1e-6)
    assert math.isfinite(float(weighted_ce(torch.tensor(0.0), 1.0)))


def test_weighted_ce_gradient():
    rng = np.random.default_rng(3)
    for _ in range(50):
        p = torch.tensor(rng.uniform(0.01, 0.99), dtype=torch.float64, requires_grad=True)
        y = float(rng.uniform())
        f = lambda v: weighted_ce(v, y, 1.2, 0.8)  # noqa: E731
        f(p).backward()
        assert relative_error(p.grad, numeric_grad(f, p)) < 1e-4


def test_symmetric_init_scores_half(rng):
    model = build_encoder(HyperParams(K=2), 0, widths=TINY_WIDTHS)
    clips = rng.standard_normal((5, 1, 8, 16, 16)).astype(np.float32)
    series = encoder_score_video(model, clips, "v")
    assert len(series) == 5
    np.testing.assert_allclose(series.scores, 0.5, atol=1e-7)


def test_probabilities_valid(rng):
    model = build_encoder(HyperParams(K=2), 1, widths=TINY_WIDTHS)
    with torch.no_grad():
        model.head_c.weight.normal_()
        out = model(torch.randn(3, 1, 8, 16, 16) * 5)
    assert torch.allclose(out.p.sum(1), torch.ones(3), atol=1e-6)
    assert torch.allclose(out.sga.p_hat.sum(1), torch.ones(3), atol=1e-6)


def test_disable_sga_uses_block5_directly():
    model = build_encoder(HyperParams(K=2), 0, widths=TINY_WIDTHS, disable_sga=True)
    assert model.sga is None
    with torch.no_grad():
        model.head_c.weight.normal_()
        x = torch.randn(2, 1, 8, 16, 16)
        out = model(x)
        expected = model.head_c(model.backbone(x).m_b5.flatten(2).mean(2)).softmax(1)
    assert out.sga is None
    assert torch.allclose(out.p, expected)


def test_loss_without_guided_head():
    hp = HyperParams(K=2)
    model = build_encoder(hp, 0, widths=TINY_WIDTHS)
    out = model(torch.randn(4, 1, 8, 16, 16))
    y = torch.tensor([0.0, 1.0, 0.3, 0.0])
    l1 = weighted_ce(out.p[:, 1], y, hp.w0, hp.w1).mean()
    l2 = weighted_ce(out.sga.p_hat[:, 1], y, hp.w0, hp.w1).mean()
    assert torch.allclose(encoder_loss(out, y, hp, use_hg=False), l1)
    assert torch.allclose(encoder_loss(out, y, hp, use_hg=True), l1 + l2)


def test_full_network_gradient():
    assert tiny_encoder_gradcheck() < 1e-3


def test_gradient_accumulation_matches_single_batch():
    hp = HyperParams(K=2)
    x = torch.randn(12, 1, 8, 16, 16)
    y = torch.rand(12)
    grads = []
    for micro in (1, 4):
        model = build_encoder(hp, 3, widths=TINY_WIDTHS)
        with torch.no_grad():
            model.head_c.weight.normal_(0, 0.5, generator=torch.Generator().manual_seed(0))
        accumulate_gradients(model, x, y, hp, micro_batches=micro)
        grads.append(torch.cat([p.grad.reshape(-1) for p in model.parameters()]))
    assert torch.allclose(grads[0], grads[1], atol=1e-5, rtol=0)


FT = HyperParams(K=2, ft_epochs=3, ft_warmup_epochs=2, ft_lr=1e-3, ft_videos_per_class_per_batch=4,
                 ft_clips_per_video=2)


@pytest.fixture(scope="module")
def ft_setup(tiny_synth):
    labels = {}
    for rec in select(tiny_synth.records, split="train"):
        labels[rec.video_id] = np.linspace(0, 1, rec.num_clips, dtype=np.float32) * rec.label
    return tiny_synth.records, labels


def test_finetune_deterministic(ft_setup):
    records, labels = ft_setup
    a, log_a = finetune(records, labels, FT, seed=1, widths=TINY_WIDTHS)
    b, log_b = finetune(records, labels, FT, seed=1, widths=TINY_WIDTHS)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)
    assert log_a.losses == log_b.losses


def test_finetune_warmup_ramp(ft_setup):
    records, labels = ft_setup
    _, log = finetune(records, labels, FT, seed=0, widths=TINY_WIDTHS)
    steps = log.steps_per_epoch
    assert steps == 2  # 6 videos per class, 4 per batch
    warm = 2 * steps
    assert log.lrs[:warm] == pytest.approx([FT.ft_lr * (i + 1) / warm for i in range(warm)])
    assert log.lrs[warm:] == pytest.approx([FT.ft_lr] * (len(log.lrs) - warm))


def test_finetune_ablation_flags(ft_setup):
    records, labels = ft_setup
    no_sga, _ = finetune(records, labels, FT, seed=0, widths=TINY_WIDTHS, disable_sga=True)
    assert no_sga.sga is None
    full, _ = finetune(records, labels, FT, seed=0, widths=TINY_WIDTHS)
    no_hg, _ = finetune(records, labels, FT, seed=0, widths=TINY_WIDTHS, disable_hg=True)
    # without L2 the guided branch F3 receives no gradient and stays at its initial value
    init = build_encoder(FT, 0, widths=TINY_WIDTHS)
    assert torch.equal(no_hg.sga.f3.weight, init.sga.f3.weight)
    assert not torch.equal(full.sga.f3.weight, init.sga.f3.weight)


def test_finetune_missing_labels(ft_setup):
    records, labels = ft_setup
    victim = select(records, split="train", label=1)[0].video_id
    partial = {k: v for k, v in labels.items() if k != victim}
    with pytest.raises(FileNotFoundError, match=victim):
        finetune(records, partial, FT, seed=0, widths=TINY_WIDTHS)


def test_checkpoint_and_attention_export(tmp_path, ft_setup, tiny_synth):
    records, labels = ft_setup
    model, _ = finetune(records, labels, FT, seed=0, widths=TINY_WIDTHS)
    path = tmp_path / "enc.pt"
    save_encoder(model, path, FT, seed=0, epochs=FT.ft_epochs)
    loaded, meta = load_encoder(path)
    assert meta["ablation"] == {"disable_sga": False, "disable_hg": False}
    assert meta["epochs"] == 3 and meta["hp"]["K"] == 2
    for rec in select(tiny_synth.records, split="test"):
        clips = read_clips(rec)
        np.testing.assert_allclose(
            encoder_score_video(loaded, clips).scores, encoder_score_video(model, clips).scores, atol=1e-6
        )
    clips = read_clips(records[0])
    maps = attention_maps(model, clips)
    assert maps.shape[0] == records[0].num_clips
    write_attention_file(maps, tmp_path / "a.attn", records[0].video_id)
    header, back = read_attention_file(tmp_path / "a.attn")
    assert header["video_id"] == records[0].video_id and header["shape"] == list(maps.shape)
    assert back.tobytes() == maps.tobytes()
