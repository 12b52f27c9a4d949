import itertools

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from csskit.dsp import AudioBuffer, MaskMatrix, Spectrogram, si_sdr, stft
from csskit.separator import (LinearMaskModel, SeparationSystem, SeparatorConfig, SeparatorNet,
                              StageConfigError, TrainConfig, TrainStage, batch_loss, collate,
                              default_stages, grad_check, prepare_example, separate_utterance,
                              train, upit_loss, upit_loss_batch)
from csskit.separator.loss import DegenerateReferenceError
from csskit.separator.model import FrameMismatchError
from csskit.separator.train import TrainingDivergedError
from csskit.ssl_encoder import EncoderConfig, SSLEncoder

from _tones import SR, TINY, tone_examples, tone_mix


def tiny_encoder(seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    return SSLEncoder(EncoderConfig(n_layers=2, n_heads=2, model_dim=8, ff_dim=16, vocab_k=4)).to(dtype)


# ---------------------------------------------------------------- forward

def test_zero_heads_give_half_masks():
    net = SeparatorNet(TINY)
    net.zero_heads()
    masks = net(torch.randn(2, 9, 257))
    assert masks.shape == (2, 2, 9, 257)
    assert torch.all(masks == 0.5)


def test_forward_contracts():
    net = SeparatorNet(TINY).eval()
    x = torch.randn(1, 7, 257)
    m = net(torch.cat([x, x]))
    assert torch.allclose(m[0], m[1], rtol=0, atol=1e-6)
    assert m.min() >= 0 and m.max() <= 1
    with_emb = SeparatorNet(SeparatorConfig(n_layers=1, n_heads=2, model_dim=16, ff_dim=32, embed_dim=8))
    assert with_emb(x, torch.zeros(1, 7, 8)).shape == net(x).shape
    with pytest.raises(FrameMismatchError):
        with_emb(x, torch.zeros(1, 6, 8))
    with pytest.raises(ValueError):
        with_emb(x)


def test_system_aligns_encoder_frames():
    system = SeparationSystem(TINY, tiny_encoder())
    assert system.cfg.embed_dim == 8
    masks = system(torch.randn(1, 20, 257), torch.randn(1, 10, 40))
    assert masks.shape == (1, 2, 20, 257)
    with pytest.raises(ValueError):
        SeparationSystem(TINY, tiny_encoder(), use_layers=3)


# ---------------------------------------------------------------- uPIT

def brute_force_upit(masks, mix_mag, refs):
    best = None
    for p in itertools.permutations(range(len(refs))):
        cost = np.mean([(masks[p[j]] * mix_mag - refs[j]) ** 2 for j in range(len(refs))])
        if best is None or cost < best[0]:
            best = (cost, p)
    return best


def _spec(mag):
    return Spectrogram(mag.astype(complex), 8, 4, SR)


def test_upit_examples():
    mix = np.random.default_rng(0).uniform(0.1, 1, (3, 5))
    loss, perm = upit_loss([np.ones((3, 5)), np.zeros((3, 5))], _spec(mix), [mix, np.zeros((3, 5))])
    assert loss == 0.0 and perm == (0, 1)
    with pytest.raises(DegenerateReferenceError):
        upit_loss([np.ones((3, 5))] * 2, _spec(mix), [np.zeros((3, 5))] * 2)
    with pytest.raises(ValueError):
        upit_loss([np.ones((3, 5))] * 2, _spec(mix), [mix])


@given(st.integers(0, 2**31 - 1), st.integers(2, 3))
def test_upit_matches_brute_force(seed, n):
    r = np.random.default_rng(seed)
    masks = [MaskMatrix(r.uniform(0, 1, (3, 5))) for _ in range(n)]
    mix = r.uniform(0, 2, (3, 5))
    refs = [r.uniform(0, 1, (3, 5)) for _ in range(n)]
    loss, perm = upit_loss(masks, _spec(mix), refs)
    ref_loss, ref_perm = brute_force_upit([m.values for m in masks], mix, refs)
    assert loss == pytest.approx(ref_loss, rel=1e-12, abs=0)
    assert perm == ref_perm
    for p in itertools.permutations(range(n)):
        fixed = np.mean([(masks[p[j]].values * mix - refs[j]) ** 2 for j in range(n)])
        assert loss <= fixed + 1e-15


@given(st.integers(0, 2**31 - 1))
def test_upit_swap_symmetry(seed):
    r = np.random.default_rng(seed)
    masks = [r.uniform(0, 1, (4, 5)) for _ in range(2)]
    mix = r.uniform(0, 2, (4, 5))
    refs = [r.uniform(0, 1, (4, 5)) for _ in range(2)]
    l1, p1 = upit_loss(masks, _spec(mix), refs)
    l2, p2 = upit_loss(masks, _spec(mix), refs[::-1])
    l3, _ = upit_loss(masks[::-1], _spec(mix), refs[::-1])
    assert l1 == pytest.approx(l2, rel=1e-12) and l1 == pytest.approx(l3, rel=1e-12)
    assert p2 == p1[::-1]


def test_upit_is_utterance_level():
    # half the frames favour each pairing; frame-level PIT would reach 0, one
    # permutation for the whole utterance leaves half the bins wrong
    ref = torch.zeros(1, 2, 4, 3)
    ref[0, 0], ref[0, 1] = 1.0, 0.0
    masks = torch.zeros(1, 2, 4, 3)
    masks[0, 0, :2], masks[0, 1, 2:] = 1.0, 1.0
    loss, idx, perms = upit_loss_batch(masks, torch.ones(1, 4, 3), ref)
    assert float(loss) == pytest.approx(0.5)


# ---------------------------------------------------------------- gradient checks

def _grad_fixture():
    torch.manual_seed(0)
    system = SeparationSystem(SeparatorConfig(n_layers=2, n_heads=2, model_dim=8, ff_dim=16),
                              tiny_encoder(dtype=torch.float64)).double()
    with torch.no_grad():
        system.layer_weights.logits.copy_(torch.tensor([0.3, -0.2]))
    g = torch.Generator().manual_seed(1)
    spec = torch.randn(1, 12, 257, generator=g, dtype=torch.float64)
    enc = torch.randn(1, 6, 40, generator=g, dtype=torch.float64)
    mix = torch.rand(1, 12, 257, generator=g, dtype=torch.float64)
    ref = torch.rand(1, 2, 12, 257, generator=g, dtype=torch.float64)
    return system, lambda m: upit_loss_batch(m(spec, enc), mix, ref)[0]


def test_grad_check_linear_toy():
    torch.manual_seed(0)
    model = LinearMaskModel(n_bins=9).double()
    g = torch.Generator().manual_seed(0)
    x, mix = torch.randn(1, 5, 9, generator=g, dtype=torch.float64), torch.rand(1, 5, 9, generator=g, dtype=torch.float64)
    ref = torch.rand(1, 2, 5, 9, generator=g, dtype=torch.float64)
    res = grad_check(model, lambda m: upit_loss_batch(m(x), mix, ref)[0], n_coords=200)
    assert res.max_rel_error < 1e-8


def test_grad_check_conformer_with_layer_weights():
    system, loss_fn = _grad_fixture()
    res = grad_check(system, loss_fn, n_coords=200, always_include=("layer_weights.logits",))
    assert len(res.coords) >= 200
    assert any(name == "layer_weights.logits" for name, _ in res.coords)
    assert res.max_rel_error < 1e-3


def test_grad_check_epsilon_sweep_has_interior_minimum():
    system, loss_fn = _grad_fixture()
    eps = [1e-3, 1e-4, 1e-5, 1e-6]
    med = [np.median(grad_check(system, loss_fn, e, n_coords=120).rel_errors) for e in eps]
    k = int(np.argmin(med))
    assert 0 < k < len(eps) - 1, med
    assert all(med[i] > med[i + 1] for i in range(k)) and all(med[i] < med[i + 1] for i in range(k, len(eps) - 1))


def test_grad_check_requires_float64():
    with pytest.raises(TypeError):
        grad_check(LinearMaskModel(4), lambda m: m(torch.zeros(1, 2, 4)).sum())


# ---------------------------------------------------------------- training

def test_training_halves_loss(tone_model):
    _, res = tone_model
    losses = [r["loss"] for r in res.records]
    assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:5])
    assert {"step", "loss", "lr", "stage"} <= res.records[0].keys()
    assert res.best_step > 0 and res.dev_scores


def test_separates_disjoint_tones(tone_model):
    model, _ = tone_model
    s = tone_mix(np.random.default_rng(99), seconds=1.5)
    outs = separate_utterance(model, s.mixture)
    assert all(len(o) == len(s.mixture) for o in outs)
    scores = max(([si_sdr(outs[p[j]], s.references[j]) for j in range(2)]
                  for p in itertools.permutations(range(2))), key=sum)
    assert min(scores) > 15


def test_single_speaker_goes_to_one_output(tone_model):
    model, _ = tone_model
    s = tone_mix(np.random.default_rng(5), seconds=1.5, single=True)
    e = [np.sum(o.samples ** 2) for o in separate_utterance(model, s.mixture)]
    assert max(e) >= 0.9 * sum(e)


def test_zero_input_zero_output(tone_model):
    model, _ = tone_model
    outs = separate_utterance(model, AudioBuffer(np.zeros(5000), SR))
    assert all(not np.any(o.samples) for o in outs)


def test_frozen_stage_keeps_encoder_bit_identical():
    enc = tiny_encoder()
    model = SeparationSystem(TINY, enc)
    before = {k: v.clone() for k, v in enc.state_dict().items()}
    lw_before = model.layer_weights.logits.detach().clone()
    data = tone_examples(8, 2, shift=20)
    train(model, [TrainStage("frozen_ssl", 1e-2, 100)], data, (), TrainConfig(batch_size=4, crop_seconds=0.5))
    assert all(torch.equal(before[k], v) for k, v in enc.state_dict().items())
    assert not torch.equal(lw_before, model.layer_weights.logits.detach())
    train(model, [TrainStage("unfrozen_ssl", 1e-3, 5, True)], data, (), TrainConfig(batch_size=4, crop_seconds=0.5))
    assert any(not torch.equal(before[k], v) for k, v in enc.state_dict().items())


def test_frozen_stage_has_no_encoder_gradient():
    model = SeparationSystem(TINY, tiny_encoder())
    batch = collate(tone_examples(2, 3, shift=20), 0.5, np.random.default_rng(0))
    model.encoder.requires_grad_(False)
    loss, _ = batch_loss(model, batch, ssl_grad=False)
    loss.backward()
    assert all(p.grad is None for p in model.encoder.parameters())
    assert model.layer_weights.logits.grad is not None


def test_training_is_deterministic():
    data = tone_examples(6, 4)

    def run():
        torch.manual_seed(0)
        m = SeparationSystem(TINY)
        train(m, default_stages(2e-3, frozen_steps=15), data, (), TrainConfig(batch_size=3, crop_seconds=0.5))
        return m.state_dict()

    a, b = run(), run()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_stage_validation():
    with pytest.raises(StageConfigError):
        TrainStage("pretrain", 1e-3, 10)
    with pytest.raises(StageConfigError):
        train(SeparationSystem(TINY), [TrainStage("unfrozen_ssl", 1e-4, 1, True)], tone_examples(2, 0))
    stages = default_stages(1e-3, warmup_steps=5, frozen_steps=10, unfrozen_steps=10)
    assert [s.name for s in stages] == ["warmup", "frozen_ssl", "unfrozen_ssl"]
    assert stages[2].learning_rate == pytest.approx(stages[1].learning_rate / 10)


def test_nan_loss_aborts():
    data = tone_examples(2, 0)
    data[0].spec_feats[:] = np.nan
    data[1].spec_feats[:] = np.nan
    with pytest.raises(TrainingDivergedError):
        train(SeparationSystem(TINY), [TrainStage("frozen_ssl", 1e-3, 3)], data, (), TrainConfig(batch_size=2))


def test_presets_match_table_rows():
    cfg = SeparatorConfig.preset("SS-9.5")
    assert (cfg.n_layers, cfg.n_heads, cfg.model_dim, cfg.ff_dim, cfg.n_outputs) == (8, 4, 256, 1024, 2)
