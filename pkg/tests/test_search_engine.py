import hashlib
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from manas.core import AttentionOpKind, ColumnChoice, NetworkConfig, NumericalAbort, SearchConfig, TrainConfig
from manas.data import synthetic_split
from manas.losses import arch_reg_loss, train_a_loss
from manas.search_engine import (
    ArchParams,
    binarize,
    bilevel_step,
    cosine_lr,
    init_search_state,
    load_search_state,
    relax,
    round_robin_batch,
    run_search,
    run_train,
    save_search_state,
)
from manas.supernet import Mode, instantiate

TINY = NetworkConfig(num_cells=1, channels=4, height=16, width=16)


@pytest.fixture(scope="module")
def split():
    return synthetic_split(2, 2, 1, 16, seed=3)


def checksum(tensors) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def test_relax_values():
    assert torch.allclose(relax(torch.zeros(2)), torch.tensor([0.5, 0.5]))
    p = relax(torch.tensor([1.0, 0.0], dtype=torch.float64))
    assert abs(p[0].item() - 0.731059) <= 1e-6 and abs(p[1].item() - 0.268941) <= 1e-6
    assert torch.allclose(relax(torch.full((7,), 3.0)), torch.full((7,), 1 / 7))
    with pytest.raises(ValueError, match="NaN"):
        relax(torch.tensor([0.0, float("nan")]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_simplex_invariant(seed, shared):
    cfg = NetworkConfig(num_cells=2, channels=4, shared_attention_choice=shared)
    arch = ArchParams(cfg).double()
    with torch.no_grad():
        arch.mu.normal_(generator=torch.Generator().manual_seed(seed)).mul_(3)
        arch.nu.normal_(generator=torch.Generator().manual_seed(seed + 1)).mul_(3)
    a, b = arch.alphas(), arch.betas()
    assert b.shape == (2, 3, 7)
    assert (a.sum(-1) - 1).abs().max() <= 1e-6 and (b.sum(-1) - 1).abs().max() <= 1e-6
    assert (a > 0).all() and (a < 1).all() and (b > 0).all()
    assert arch.U == 2 * 4 * 2 and arch.V == (7 if shared else 21) * 2


def test_binarize_examples():
    cfg = NetworkConfig(num_cells=1, channels=4, columns=3)
    arch = ArchParams(cfg)
    with torch.no_grad():
        arch.mu[0, 0] = torch.tensor([0.2, 0.9])
        arch.mu[0, 1] = torch.tensor([0.5, 0.5])
        arch.mu[0, 2] = torch.tensor([0.9, 0.2])
        arch.nu[0, 0, 6] = 1.0
        arch.nu[0, 1] = torch.tensor([0.0, 0.3, 0.3, 0.0, 0.0, 0.0, 0.0])
    g = binarize(arch, cfg)
    assert g.cells[0].columns == (ColumnChoice.FUSION, ColumnChoice.PARALLEL, ColumnChoice.PARALLEL)
    assert g.cells[0].attention == (AttentionOpKind.ZERO, AttentionOpKind.CA_V2, AttentionOpKind.CA_V1)


def test_binarize_shared_choice():
    cfg = NetworkConfig(num_cells=1, channels=4, shared_attention_choice=True)
    arch = ArchParams(cfg)
    with torch.no_grad():
        arch.nu[0, 0, 4] = 1.0
    assert binarize(arch, cfg).cells[0].attention == (AttentionOpKind.CBA,) * 3


def test_round_robin_covers_each_epoch(split):
    pairs = list(range(5))
    seen = [round_robin_batch(pairs, 1, "trainA", s, 1)[0] for s in range(10)]
    assert sorted(seen[:5]) == pairs and sorted(seen[5:]) == pairs
    assert seen == [round_robin_batch(pairs, 1, "trainA", s, 1)[0] for s in range(10)]
    assert round_robin_batch(pairs, 1, "trainA", 3, 2) == seen[6:8]
    with pytest.raises(ValueError):
        round_robin_batch([], 0, "trainB", 0, 1)


def test_cosine_schedule():
    assert cosine_lr(0, 10, 2e-3, 1e-4) == 2e-3
    assert cosine_lr(9, 10, 2e-3, 1e-4) == pytest.approx(1e-4)
    vals = [cosine_lr(s, 10, 2e-3, 1e-4) for s in range(10)]
    assert vals == sorted(vals, reverse=True)


def _state(**kw):
    return init_search_state(TINY, SearchConfig(iterations=10, warmup_frac=0.0, **kw))


def test_alternation_purity(split):
    state = _state()
    w0, a0 = checksum(state.net.parameters()), checksum(state.arch.parameters())
    bilevel_step(state, split.trainA[:1], split.trainB[:1], update_arch=False)
    w1, a1 = checksum(state.net.parameters()), checksum(state.arch.parameters())
    assert w1 != w0 and a1 == a0
    # an architecture-only step leaves the weights alone
    state.opt_w.param_groups[0]["lr"] = 0.0
    state.scfg = SearchConfig(iterations=10, warmup_frac=0.0, lr_w_max=0.0, lr_w_min=0.0, momentum=0.0,
                              weight_decay_w=0.0)
    state.opt_w = torch.optim.SGD(state.net.parameters(), lr=0.0)
    bilevel_step(state, split.trainA[:1], split.trainB[:1])
    assert checksum(state.net.parameters()) == w1 and checksum(state.arch.parameters()) != a1


def test_one_step_changes_both(split):
    state = _state()
    w0, a0 = checksum(state.net.parameters()), checksum(state.arch.parameters())
    bilevel_step(state, split.trainA[:1], split.trainB[:1])
    assert checksum(state.net.parameters()) != w0 and checksum(state.arch.parameters()) != a0
    assert state.step == 1


def test_zero_step_sizes_change_nothing(split):
    state = init_search_state(TINY, SearchConfig(iterations=5, warmup_frac=0.0, lr_w_max=0.0, lr_w_min=0.0,
                                                 lr_arch=0.0, weight_decay_w=0.0, weight_decay_arch=0.0))
    w0, a0 = checksum(state.net.parameters()), checksum(state.arch.parameters())
    for _ in range(3):
        bilevel_step(state, split.trainA[:1], split.trainB[:1])
    assert checksum(state.net.parameters()) == w0 and checksum(state.arch.parameters()) == a0
    assert state.step == 3


def test_warmup_freezes_architecture(split):
    state = init_search_state(TINY, SearchConfig(iterations=10, warmup_frac=0.3))
    a0 = checksum(state.arch.parameters())
    for _ in range(3):
        bilevel_step(state, split.trainA[:1], split.trainB[:1])
    assert checksum(state.arch.parameters()) == a0
    bilevel_step(state, split.trainA[:1], split.trainB[:1])
    assert checksum(state.arch.parameters()) != a0


def test_small_step_does_not_blow_up_loss(split):
    # 8x8 images are below the SSIM window, so the check uses the 16x16 split
    batch = split.trainA[:1]
    state = init_search_state(TINY, SearchConfig(iterations=1, lr_w_max=1e-2, lr_w_min=1e-2, warmup_frac=0.0),
                              dtype=torch.float64)

    def loss():
        with torch.no_grad():
            out = state.net.forward_relaxed(torch.as_tensor(batch[0].rainy, dtype=torch.float64),
                                            state.arch.alphas(), state.arch.betas())
            return train_a_loss(out, torch.as_tensor(batch[0].gt, dtype=torch.float64)).trainA.item()

    before = loss()
    rep = bilevel_step(state, batch, split.trainB[:1])
    assert rep.trainA == pytest.approx(before, rel=1e-12)
    assert loss() <= 1.1 * before


def test_empty_batch_and_nan_abort(split):
    state = _state()
    with pytest.raises(ValueError):
        bilevel_step(state, [], split.trainB[:1])
    with torch.no_grad():
        next(state.net.parameters()).fill_(float("nan"))
    with pytest.raises(NumericalAbort, match="ext"):
        bilevel_step(state, split.trainA[:1], split.trainB[:1])


def test_zero_iterations_returns_initial_genotype(split):
    g, state, rows = run_search(TINY, SearchConfig(iterations=0), split)
    assert g == binarize(ArchParams(TINY), TINY) and rows == [] and state.step == 0


def test_search_is_deterministic(split):
    scfg = SearchConfig(iterations=4, warmup_frac=0.25, rng_seed=2, patch=12)
    g1, s1, r1 = run_search(TINY, scfg, split)
    g2, s2, r2 = run_search(TINY, scfg, split)
    assert g1 == g2 and r1 == r2
    assert checksum(s1.net.parameters()) == checksum(s2.net.parameters())


def test_resume_is_bit_identical(split, tmp_path):
    scfg = SearchConfig(iterations=6, warmup_frac=0.2, rng_seed=4)
    full_g, full, full_rows = run_search(TINY, scfg, split)
    _, part, _ = run_search(TINY, scfg, split, stop_at=3)
    assert part.step == 3
    save_search_state(tmp_path / "s.npz", part)
    resumed = load_search_state(tmp_path / "s.npz")
    g, resumed, rows = run_search(TINY, scfg, split, state=resumed)
    assert g == full_g and rows == full_rows
    assert checksum(resumed.net.parameters()) == checksum(full.net.parameters())
    assert checksum(resumed.arch.parameters()) == checksum(full.arch.parameters())
    for a, b in zip(resumed.opt_w.state.values(), full.opt_w.state.values()):
        assert torch.equal(a["momentum_buffer"], b["momentum_buffer"])


def test_checkpoint_every(split, tmp_path):
    path = tmp_path / "ck.npz"
    run_search(TINY, SearchConfig(iterations=2, checkpoint_every=1), split, checkpoint_path=path)
    assert load_search_state(path).step == 2


def test_arch_reg_decreases_when_theta_moves(split):
    cfg = TINY
    arch = ArchParams(cfg)
    with torch.no_grad():
        arch.mu.add_(1e-3 * torch.randn(arch.mu.shape, generator=torch.Generator().manual_seed(0)))
    opt = torch.optim.Adam(arch.parameters(), lr=1e-2)
    start = arch_reg_loss(arch.alphas(), arch.betas()).item()
    for _ in range(50):
        opt.zero_grad()
        (0.01 * arch_reg_loss(arch.alphas(), arch.betas())).backward()
        opt.step()
    assert arch_reg_loss(arch.alphas(), arch.betas()).item() < start


def test_run_train_zero_epochs_keeps_init(split):
    g = binarize(ArchParams(TINY), TINY)
    net, rows = run_train(g, TINY, split.train, TrainConfig(epochs=0, rng_seed=3))
    ref = instantiate(TINY, Mode.DISCRETE, g, seed=3)
    assert rows == []
    assert all(torch.equal(v, ref.state_dict()[k]) for k, v in net.state_dict().items())


def test_run_train_reduces_loss_and_is_reproducible(split):
    g = binarize(ArchParams(TINY), TINY)
    tcfg = TrainConfig(epochs=25, rng_seed=1)
    net, rows = run_train(g, TINY, split.trainA, tcfg)
    assert len(rows) == 25 * 2
    first = np.mean([r[5] for r in rows[:2]])
    last = np.mean([r[5] for r in rows[-2:]])
    assert last < first
    net2, rows2 = run_train(g, TINY, split.trainA, tcfg)
    assert rows == rows2
    assert checksum(net.parameters()) == checksum(net2.parameters())


def test_run_train_one_to_one_reports_zero_internal(split):
    g = binarize(ArchParams(TINY), TINY)
    _, rows = run_train(g, TINY, split.trainA, TrainConfig(epochs=1, internal_loss=False))
    assert all(r[2] == 0.0 for r in rows)
    assert all(math.isclose(r[5], r[1]) for r in rows)
