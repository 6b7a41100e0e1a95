import numpy as np
import pytest
import torch

from gradcheck import RTOL, fd_relative_error, projected
from manas.core import AttentionOpKind, ColumnChoice, ConfigError, Genotype, GenotypeError, NetworkConfig
from manas.search_engine import ArchParams, binarize
from manas.supernet import (
    DerainNetwork,
    Mode,
    derive_discrete,
    instantiate,
    load_weights,
    save_weights,
)

K = AttentionOpKind


def random_genotype(cfg, rng):
    cols = [[ColumnChoice(int(c)) for c in rng.integers(0, 2, cfg.columns)] for _ in range(cfg.num_cells)]
    att = [[K(int(k)) for k in rng.integers(0, 7, 3)] for _ in range(cfg.num_cells)]
    return Genotype.build(cfg, cols, att)


def one_hot_arch(g):
    T, M = g.config.num_cells, g.config.columns
    alphas = torch.zeros(T, M, 2)
    betas = torch.zeros(T, 3, 7)
    for t, cell in enumerate(g.cells):
        for m, c in enumerate(cell.columns):
            alphas[t, m, int(c)] = 1
        for s, k in enumerate(cell.attention):
            betas[t, s, int(k)] = 1
    return alphas, betas


def test_structure_of_relaxed_net():
    net = instantiate(NetworkConfig(num_cells=1, channels=16, height=64, width=64), Mode.RELAXED)
    assert len(net.cells) == 1
    cell = net.cells[0]
    assert len(cell.columns) == 4
    assert all(set(col.keys()) == {"parallel", "fusion"} for col in cell.columns)
    assert len(cell.attention.scales) == 2
    assert all(len(ops) == 7 for site in cell.attention.scales for ops in site)


def test_discrete_without_genotype_fails():
    with pytest.raises(ConfigError):
        instantiate(NetworkConfig(), Mode.DISCRETE)


def test_genotype_config_mismatch():
    g = random_genotype(NetworkConfig(num_cells=2, channels=8), np.random.default_rng(0))
    with pytest.raises(GenotypeError):
        instantiate(NetworkConfig(num_cells=1, channels=8), Mode.DISCRETE, g)


def test_same_seed_same_init_different_seed_differs():
    cfg = NetworkConfig(num_cells=1, channels=8)
    a, b, c = instantiate(cfg, seed=7), instantiate(cfg, seed=7), instantiate(cfg, seed=8)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not torch.equal(sa["stem.head.weight"], sc["stem.head.weight"])


def test_discrete_init_matches_supernet_candidates():
    cfg = NetworkConfig(num_cells=2, channels=8)
    g = random_genotype(cfg, np.random.default_rng(3))
    sup = instantiate(cfg, Mode.RELAXED, seed=5).state_dict()
    disc = instantiate(cfg, Mode.DISCRETE, g, seed=5).state_dict()
    assert all(torch.equal(v, sup[k]) for k, v in disc.items())


@pytest.mark.parametrize("seed", range(4))
def test_relaxed_one_hot_matches_discrete(seed):
    cfg = NetworkConfig(num_cells=2, channels=8, height=16, width=16)
    rng = np.random.default_rng(seed)
    sup = instantiate(cfg, Mode.RELAXED, seed=seed)
    g = random_genotype(cfg, rng)
    disc = derive_discrete(sup, g)
    x = torch.rand(2, 3, 16, 16, generator=torch.Generator().manual_seed(seed))
    a, b = one_hot_arch(g)
    with torch.no_grad():
        diff = (sup.forward_relaxed(x, a, b) - disc.forward_discrete(x)).abs().max().item()
    assert diff <= 1e-6


def test_output_shape_and_determinism():
    cfg = NetworkConfig(num_cells=2, channels=8, height=16, width=24)
    g = random_genotype(cfg, np.random.default_rng(1))
    net = instantiate(cfg, Mode.DISCRETE, g)
    x = torch.rand(1, 3, 16, 24)
    with torch.no_grad():
        y1, y2 = net(x), net(x)
    assert y1.shape == x.shape
    assert torch.equal(y1, y2)


def test_discrete_forward_touches_m_plus_three_ops():
    cfg = NetworkConfig(num_cells=2, channels=4, columns=4, height=8, width=8)
    net = instantiate(cfg, Mode.DISCRETE, random_genotype(cfg, np.random.default_rng(2)))
    net.reset_counters()
    with torch.no_grad():
        net(torch.rand(1, 3, 8, 8))
    assert net.searched_op_calls() == [cfg.columns + 3] * cfg.num_cells


def test_scale_count_grows_by_one_per_cell():
    cfg = NetworkConfig(num_cells=3, channels=4, height=16, width=16)
    net = instantiate(cfg, Mode.DISCRETE, random_genotype(cfg, np.random.default_rng(4)))
    seen = []
    for cell in net.cells:
        cell.register_forward_hook(lambda mod, inp, out: seen.append([tuple(o.shape[-2:]) for o in out]))
    net.check_shapes = True
    with torch.no_grad():
        net(torch.rand(1, 3, 16, 16))
    assert [len(s) for s in seen] == [2, 3, 4]
    assert seen[-1] == [(16, 16), (8, 8), (4, 4), (2, 2)]


def test_all_identity_network_hand_oracle():
    cfg = NetworkConfig(num_cells=1, channels=4, height=4, width=4)
    g = Genotype.build(cfg, [["P"] * 4], [["identity"] * 3])
    net = DerainNetwork(cfg, Mode.DISCRETE, g).double()
    rng = np.random.default_rng(0)
    W = rng.normal(size=(4, 6))
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
        for c in range(3):
            net.stem["head"].weight[c, c, 1, 1] = 1.0
            net.tail.weight[c, c, 0, 0] = 1.0
        net.cells[0].attention.fuse[0].weight[:, :, 0, 0] = torch.tensor(W)
    img = rng.uniform(size=(1, 3, 4, 4))
    got = net(torch.tensor(img)).detach().numpy()[0]
    expect = np.zeros((3, 4, 4))
    for i in range(4):
        for j in range(4):
            r, gg, b = img[0, :, i, j]
            y1 = np.array([r, gg])
            y2 = np.array([b, 0.0]) + y1
            cat = np.concatenate([y1, y2, y1 + y2])
            expect[:, i, j] = np.maximum(W @ cat, 0)[:3]
    np.testing.assert_allclose(got, expect, rtol=0, atol=1e-12)


def test_relaxed_input_validation():
    cfg = NetworkConfig(num_cells=1, channels=4, height=8, width=8)
    net = instantiate(cfg)
    a, b = ArchParams(cfg).alphas(), ArchParams(cfg).betas()
    x = torch.rand(1, 3, 8, 8)
    with pytest.raises(ValueError, match="sum to 1"):
        net.forward_relaxed(x, a * 0.9, b)
    with pytest.raises(ValueError, match="shapes"):
        net.forward_relaxed(x, a[:, :2], b)
    with pytest.raises(ValueError, match="divisible"):
        net.forward_relaxed(torch.rand(1, 3, 7, 8), a, b)
    with pytest.raises(ConfigError):
        net.forward_discrete(x)


def test_zero_cell_network_runs_both_modes():
    cfg = NetworkConfig(num_cells=0, channels=4, height=5, width=7)
    x = torch.rand(1, 3, 5, 7)
    relaxed = instantiate(cfg, Mode.RELAXED)
    disc = instantiate(cfg, Mode.DISCRETE, Genotype(cfg, ()))
    empty = torch.zeros(0, 4, 2), torch.zeros(0, 3, 7)
    with torch.no_grad():
        assert torch.equal(relaxed.forward_relaxed(x, *empty), disc(x))


def test_complexity_table_matches_param_counts():
    cfg = NetworkConfig(num_cells=1, channels=8)
    net = instantiate(cfg)
    table = net.complexity_table()
    cell = net.cells[0]
    p = sum(q.numel() for q in cell.columns[0]["parallel"].parameters())
    f = sum(q.numel() for q in cell.columns[0]["fusion"].parameters())
    assert table.omega[0, 0, 0].item() == pytest.approx(p / 1e6, abs=1e-15)
    assert table.omega[0, 0, 1].item() == pytest.approx(f / 1e6, abs=1e-15)
    assert table.lam[0, :, 5].abs().sum() == 0 and table.lam[0, :, 6].abs().sum() == 0
    assert (table.lam[0, :, :5] > 0).all()


def test_end_to_end_gradients_are_finite():
    cfg = NetworkConfig(num_cells=2, channels=4, height=8, width=8)
    net = instantiate(cfg)
    arch = ArchParams(cfg)
    out = net.forward_relaxed(torch.rand(2, 3, 8, 8), arch.alphas(), arch.betas())
    params = list(net.parameters()) + list(arch.parameters())
    grads = torch.autograd.grad(out.square().mean(), params, allow_unused=True)
    assert all(g is None or torch.isfinite(g).all() for g in grads)
    assert grads[-1] is not None and grads[-1].abs().sum() > 0


def test_relaxed_gradient_wrt_logits(float64):
    cfg = NetworkConfig(num_cells=1, channels=4, height=8, width=8)
    net = instantiate(cfg, dtype=torch.float64, seed=3)
    arch = ArchParams(cfg).double()
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        arch.mu.copy_(torch.randn(arch.mu.shape, generator=g))
        arch.nu.copy_(torch.randn(arch.nu.shape, generator=g))
    x = torch.rand(1, 3, 8, 8, generator=g)
    fn = lambda: net.forward_relaxed(x, arch.alphas(), arch.betas()).sum()
    assert fd_relative_error(fn, [arch.mu, arch.nu]) < RTOL


def test_checkpoint_round_trip(tmp_path):
    cfg = NetworkConfig(num_cells=1, channels=4, height=8, width=8)
    g = random_genotype(cfg, np.random.default_rng(5))
    net = instantiate(cfg, Mode.DISCRETE, g, seed=2)
    save_weights(tmp_path / "w.npz", net)
    back = load_weights(tmp_path / "w.npz")
    assert back.genotype == g and back.mode is Mode.DISCRETE and back.cfg == cfg
    for k, v in net.state_dict().items():
        assert torch.equal(v, back.state_dict()[k])
    with np.load(tmp_path / "w.npz") as z:
        assert all(z[k].dtype == np.dtype("<f4") for k in z.files if k != "__meta__")


def test_checkpoint_shape_mismatch(tmp_path):
    cfg = NetworkConfig(num_cells=1, channels=4, height=8, width=8)
    net = instantiate(cfg)
    save_weights(tmp_path / "w.npz", net)
    with np.load(tmp_path / "w.npz") as z:
        arrays = dict(z)
    arrays["tail.bias"] = np.zeros(5, dtype="<f4")
    np.savez(tmp_path / "bad.npz", **arrays)
    with pytest.raises(ValueError, match="tail.bias"):
        load_weights(tmp_path / "bad.npz")


def test_binarized_uniform_arch_is_all_parallel_ca_v1():
    cfg = NetworkConfig(num_cells=2, channels=4)
    g = binarize(ArchParams(cfg), cfg)
    assert all(c.columns == (ColumnChoice.PARALLEL,) * 4 for c in g.cells)
    assert all(c.attention == (K.CA_V1,) * 3 for c in g.cells)


def test_relaxed_gradient_wrt_weights(float64):
    cfg = NetworkConfig(num_cells=1, channels=4, height=8, width=8)
    net = instantiate(cfg, dtype=torch.float64, seed=1)
    arch = ArchParams(cfg).double()
    g = torch.Generator().manual_seed(1)
    with torch.no_grad():
        arch.mu.copy_(torch.randn(arch.mu.shape, generator=g))
        arch.nu.copy_(torch.randn(arch.nu.shape, generator=g))
    x = torch.rand(2, 3, 8, 8, generator=g)
    fn = projected(lambda: net.forward_relaxed(x, arch.alphas(), arch.betas()))
    # small step so no probe straddles a ReLU kink
    assert fd_relative_error(fn, list(net.parameters()), per_tensor=2, step=1e-6, pooled=True) < RTOL
