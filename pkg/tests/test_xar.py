import math

import pytest
import torch

from streamgesture.audioenc import AudioEncoder
from streamgesture.config import Config
from streamgesture.errors import ConfigError, DataError, StateMismatchError
from streamgesture.nncore import DTYPE, fingerprint, grad_check, seeded_init
from streamgesture.xar import (ExpertModel, TokenCorpus, build_experts, crop_window, expert_loss,
                               expert_nll, inject_noise, layer_window, train_experts)

K, DA = 16, 8


def make_expert(seed=0, history=8):
    with seeded_init(seed):
        codes = torch.randn(K, 4, dtype=DTYPE)
        return ExpertModel(codes, DA, d_model=16, n_heads=2, n_blocks=1, n_cross=1, n_self=2,
                           history=history, n_symbols=4).to(DTYPE).freeze()


def inputs(T=40, B=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randint(0, K, (B, T), generator=g), torch.randn(B, T, DA, generator=g, dtype=DTYPE),
            torch.randint(0, 5, (B, T), generator=g))


def test_layer_window():
    assert layer_window(32, 6) == 6
    assert layer_window(32, 3) == 11
    assert layer_window(1, 4) == 1
    with pytest.raises(ConfigError):
        layer_window(0, 2)


def test_cached_steps_match_full_recompute():
    m = make_expert()
    tok, audio, sym = inputs()
    full, h_full = m(tok, audio, sym)
    st, rows = m.open(), []
    for t in range(40):
        logits, h, st = m.step(st, None if t == 0 else tok[:, t - 1], audio[:, t], sym[:, t])
        rows.append(logits)
    assert (torch.stack(rows, 1) - full).abs().max() <= 1e-8


def test_first_step_is_finite_and_takes_no_token():
    m = make_expert()
    logits, h, _ = m.step(m.open(), None, torch.zeros(1, DA, dtype=DTYPE))
    assert logits.shape == (1, K) and torch.isfinite(logits).all()
    st = m.open()
    with pytest.raises(DataError):
        m.step(st, torch.zeros(1, dtype=torch.long), torch.zeros(1, DA, dtype=DTYPE))


@pytest.mark.parametrize("t", [0, 7, 20, 38])
def test_zero_lookahead(t):
    m = make_expert()
    tok, audio, sym = inputs()
    base, _ = m(tok, audio, sym)
    a2, t2, s2 = audio.clone(), tok.clone(), sym.clone()
    a2[:, t + 1:] += 1.0
    t2[:, t:] = (t2[:, t:] + 1) % K
    s2[:, t + 1:] = 0
    out, _ = m(t2, a2, s2)
    assert torch.equal(out[:, :t + 1], base[:, :t + 1])
    a3 = audio.clone()
    a3[:, t] += 1.0
    assert not torch.equal(m(tok, a3, sym)[0][:, t], base[:, t])


def test_history_bound():
    m = make_expert(history=8)
    tok, audio, sym = inputs(T=30)
    full, _ = m(tok, audio, sym)
    for t in (10, 20, 29):
        t2 = tok.clone()
        t2[:, :t - 7] = (t2[:, :t - 7] + 3) % K  # tokens more than 8 steps back
        assert torch.equal(m(t2, audio, sym)[0][:, t], full[:, t])
        t2[:, t - 7] = (t2[:, t - 7] + 3) % K
        assert not torch.equal(m(t2, audio, sym)[0][:, t], full[:, t])


def test_crop_with_prev_matches_full_sequence():
    m = make_expert(history=8)
    tok, audio, sym = inputs(T=30)
    full, _ = m(tok, audio, sym)
    s = 12
    crop, _ = m(tok[:, s:], audio[:, s:], sym[:, s:], prev=tok[:, s - 1], offset=s)
    # past the audio receptive field (one cross window + two self windows) the paths coincide
    assert (crop[:, 10:] - full[:, s + 10:]).abs().max() <= 1e-10
    assert torch.equal(crop.argmax(-1)[:, 10:], full.argmax(-1)[:, s + 10:])


def test_state_of_other_model_rejected():
    a, b = make_expert(0), make_expert(1)
    with pytest.raises(StateMismatchError):
        b.step(a.open(), None, torch.zeros(1, DA, dtype=DTYPE))


def test_embed_rejects_out_of_range_token():
    with pytest.raises(DataError):
        make_expert().embed_tokens(torch.tensor([[K]]))


def test_inject_noise():
    g = torch.Generator().manual_seed(0)
    e = torch.zeros(10, 100, 100, dtype=DTYPE)
    assert torch.equal(inject_noise(e, torch.ones(10), 0.0, g), e)
    d = inject_noise(e, torch.ones(10), 0.1, g)
    assert 0.09 <= float(d.std()) <= 0.11
    a = inject_noise(e, torch.full((10,), 0.5), 0.1, torch.Generator().manual_seed(3))
    b = inject_noise(e, torch.full((10,), 0.5), 0.1, torch.Generator().manual_seed(3))
    assert torch.equal(a, b)
    assert torch.equal(inject_noise(e, torch.zeros(10), 0.1, g), e)
    with pytest.raises(ConfigError):
        inject_noise(e, torch.ones(10), -1.0, g)


def test_expert_loss_values():
    tgt = torch.tensor([[0, 5, 9]])
    assert math.isclose(float(expert_loss(torch.zeros(1, 3, K, dtype=DTYPE), tgt)), math.log(K), abs_tol=1e-12)
    onehot = torch.full((1, 3, K), -30.0, dtype=DTYPE)
    onehot[0, torch.arange(3), tgt[0]] = 30.0
    assert float(expert_loss(onehot, tgt)) < 1e-9
    logits = torch.randn(1, 3, K, dtype=DTYPE)
    assert grad_check(lambda z: expert_loss(z, tgt), logits) < 1e-5
    with pytest.raises(DataError):
        expert_loss(logits, torch.tensor([[0, 1, K]]))


def test_crop_window():
    g = torch.Generator().manual_seed(0)
    assert crop_window(30, 0, g) == (0, 30, 0)
    assert crop_window(30, 40, g) == (0, 30, 0)
    for _ in range(20):
        s, L, warm = crop_window(30, 10, g)
        assert L == 10 and 0 <= s <= 20 and warm == min(s, 2)


def tiny_corpus(cfg, N=4, T=12, seed=0):
    g = torch.Generator().manual_seed(seed)
    toks = {r: torch.randint(0, cfg.n_codes, (N, T), generator=g) for r in ("upper_body", "hands")}
    mels = torch.randn(N, 16 * T, cfg.n_mels, generator=g, dtype=DTYPE)
    return TokenCorpus(toks, mels, torch.randint(0, 3, (N, T), generator=g))


def test_training_is_deterministic():
    cfg = Config.desk(expert_steps=3, ar_batch=2, ar_crop=8)
    corpus = tiny_corpus(cfg)
    fps = []
    for _ in range(2):
        codes = {r: torch.randn(cfg.n_codes, cfg.code_dim, generator=torch.Generator().manual_seed(1),
                                dtype=DTYPE) for r in corpus.tokens}
        experts = build_experts(codes, cfg, seed=5)
        with seeded_init(6):
            audio = AudioEncoder.from_config(cfg).to(DTYPE)
        curve = train_experts(corpus, experts, audio, cfg, seed=5)
        assert len(curve) == 3 and all(math.isfinite(c) for c in curve)
        fps.append([fingerprint(audio)] + [fingerprint(m) for m in experts.values()])
        nll = expert_nll(corpus, experts, audio)
        assert set(nll) == set(corpus.tokens)
    assert fps[0] == fps[1]
