"""Architecture relaxation, alternating bi-level search, binarization and retraining."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .core import (
    NUM_ATTENTION_OPS,
    NUM_SITES,
    AttentionOpKind,
    CellGenotype,
    ColumnChoice,
    Genotype,
    NetworkConfig,
    NumericalAbort,
    SearchConfig,
    TrainConfig,
    validate_config,
)
from .data import MultiToOnePair, augment, check_disjoint, derive_seed
from .losses import LossReport, arch_reg_loss, complexity_loss, train_a_loss, train_b_loss
from .supernet import DerainNetwork, Mode, instantiate

log = logging.getLogger(__name__)


def relax(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis (pairs for alpha, 7-vectors for beta)."""
    if torch.isnan(logits).any():
        raise ValueError("architecture logits contain NaN")
    return torch.softmax(logits, dim=-1)


class ArchParams(nn.Module):
    """Column logits ``mu`` (T, M, 2) and attention logits ``nu`` (T, S, 7).

    ``S`` is 3 (one choice per application site) or 1 when the config asks
    for a single choice shared by all sites.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        T, M = cfg.num_cells, cfg.columns
        sites = 1 if cfg.shared_attention_choice else NUM_SITES
        self.shared = cfg.shared_attention_choice
        self.mu = nn.Parameter(torch.zeros(T, M, 2))
        self.nu = nn.Parameter(torch.zeros(T, sites, NUM_ATTENTION_OPS))

    def alphas(self) -> torch.Tensor:
        return relax(self.mu)

    def betas(self) -> torch.Tensor:
        b = relax(self.nu)
        return b.expand(-1, NUM_SITES, -1) if self.shared else b

    @property
    def U(self) -> int:
        return self.mu.numel()

    @property
    def V(self) -> int:
        return self.nu.numel()


def binarize(arch: ArchParams, cfg: NetworkConfig) -> Genotype:
    """Argmax of every logit group; ties go to the lowest index."""
    mu = arch.mu.detach().cpu()
    nu = arch.nu.detach().cpu()
    if arch.shared:
        nu = nu.expand(-1, NUM_SITES, -1)
    cells = []
    for t in range(cfg.num_cells):
        # torch.argmax does not promise first-index ties; numpy does
        cols = tuple(ColumnChoice(int(np.argmax(mu[t, m].numpy()))) for m in range(cfg.columns))
        att = tuple(AttentionOpKind(int(np.argmax(nu[t, s].numpy()))) for s in range(NUM_SITES))
        cells.append(CellGenotype(cols, att))
    return Genotype(cfg, tuple(cells))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def round_robin_batch(pairs: list, seed: int, tag: str, step: int, size: int) -> list:
    """Batch ``step`` of an endless stream of per-epoch shuffles.

    The order is a pure function of ``(seed, tag, step)``, which is what makes
    resuming from a checkpoint reproduce the same batches.
    """
    n = len(pairs)
    if n == 0:
        raise ValueError(f"empty {tag} split")
    out = []
    for k in range(step * size, step * size + size):
        epoch, pos = divmod(k, n)
        perm = np.random.default_rng(derive_seed(seed, tag, epoch)).permutation(n)
        out.append(pairs[perm[pos]])
    return out


def _prepare(pair: MultiToOnePair, seed: int, patch: int, flip: bool, resize: bool) -> MultiToOnePair:
    if patch or flip or resize:
        size = patch or pair.gt.shape[-2:]
        return augment(pair, seed, size, flip=flip, resize_instead_of_crop=resize)
    return pair


def _batch_report(net, pairs, dtype, loss_fn) -> LossReport:
    """Average per-pair loss reports; each pair is one forward of its N images."""
    reports = []
    for p in pairs:
        out = net(torch.as_tensor(p.rainy, dtype=dtype))
        reports.append(loss_fn(out, torch.as_tensor(p.gt, dtype=dtype)))
    if len(reports) == 1:
        return reports[0]
    k = len(reports)
    return LossReport(*(sum(getattr(r, f) for r in reports) / k
                        for f in ("ext", "internal", "arch", "comp", "trainA", "trainB")))


def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    if total <= 1:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * step / (total - 1)))


# ---------------------------------------------------------------------------
# search state
# ---------------------------------------------------------------------------


@dataclass
class SearchState:
    cfg: NetworkConfig
    scfg: SearchConfig
    net: DerainNetwork
    arch: ArchParams
    opt_w: torch.optim.Optimizer
    opt_a: torch.optim.Optimizer
    table: object = None  # ComplexityTable of the supernet
    step: int = 0
    log_rows: list = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.scfg.rng_seed

    @property
    def iterations(self) -> int:
        return self.scfg.iterations

    @property
    def warmup_steps(self) -> int:
        return int(round(self.scfg.warmup_frac * self.scfg.iterations))


def init_search_state(cfg: NetworkConfig, scfg: SearchConfig, dtype=torch.float32) -> SearchState:
    validate_config(cfg)
    net = instantiate(cfg, Mode.RELAXED, seed=scfg.rng_seed, dtype=dtype)
    arch = ArchParams(cfg).to(dtype)
    opt_w = torch.optim.SGD(net.parameters(), lr=scfg.lr_w_max, momentum=scfg.momentum,
                            weight_decay=scfg.weight_decay_w)
    opt_a = torch.optim.Adam(arch.parameters(), lr=scfg.lr_arch, weight_decay=scfg.weight_decay_arch)
    return SearchState(cfg, scfg, net, arch, opt_w, opt_a, net.complexity_table())


def _assign_grads(params, grads, what: str) -> None:
    for p, g in zip(params, grads):
        if g is None:
            g = torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise NumericalAbort(f"non-finite gradient in {what}")
        p.grad = g


def bilevel_step(state: SearchState, batch_a: list, batch_b: list, update_arch: bool | None = None) -> LossReport:
    """One alternation: an omega step on trainA, then a theta step on trainB.

    Both steps are plain first-order updates. The returned report is measured
    on ``batch_a`` with the architecture terms evaluated at the theta used for
    that forward; it is the row written to the search loss log. ``update_arch``
    defaults to "past the warm-up".
    """
    if not batch_a or not batch_b:
        raise ValueError("bilevel_step needs non-empty trainA and trainB batches")
    net, arch, scfg = state.net, state.arch, state.scfg
    dtype = arch.mu.dtype
    if update_arch is None:
        update_arch = state.step >= state.warmup_steps
    w_params = list(net.parameters())
    a_params = list(arch.parameters())
    net.train()
    state.opt_w.param_groups[0]["lr"] = cosine_lr(state.step, scfg.iterations, scfg.lr_w_max, scfg.lr_w_min)

    # (1) omega on trainA, theta fixed
    with torch.no_grad():
        alphas, betas = arch.alphas(), arch.betas()
        arch_v = arch_reg_loss(alphas, betas)
        comp_v = complexity_loss(alphas, betas, state.table.omega, state.table.lam)
    rep_a = _batch_report(lambda x: net.forward_relaxed(x, alphas, betas), batch_a, dtype, train_a_loss)
    report = LossReport(rep_a.ext, rep_a.internal, arch_v, comp_v, rep_a.trainA,
                        rep_a.trainA + scfg.lambda_arch * arch_v + scfg.lambda_comp * comp_v).detach()
    report.check_finite()
    _assign_grads(w_params, torch.autograd.grad(rep_a.trainA, w_params, allow_unused=True), "network weights")
    state.opt_w.step()
    state.opt_w.zero_grad(set_to_none=True)

    # (2) theta on trainB, omega fixed
    if update_arch and state.cfg.num_cells:
        alphas, betas = arch.alphas(), arch.betas()
        rep_b = _batch_report(
            lambda x: net.forward_relaxed(x, alphas, betas), batch_b, dtype,
            lambda o, g: train_b_loss(o, g, alphas, betas, state.table, scfg.lambda_arch, scfg.lambda_comp),
        )
        rep_b.check_finite()
        _assign_grads(a_params, torch.autograd.grad(rep_b.trainB, a_params), "architecture logits")
        state.opt_a.step()
        state.opt_a.zero_grad(set_to_none=True)
    state.step += 1
    return report


def _search_batches(state: SearchState, split, step: int):
    scfg = state.scfg
    bs = scfg.pairs_per_batch
    out = []
    for tag, pairs in (("trainA", split.trainA), ("trainB", split.trainB)):
        raw = round_robin_batch(pairs, scfg.rng_seed, tag, step, bs)
        out.append([
            _prepare(p, derive_seed(scfg.rng_seed, tag, step, k), scfg.patch, scfg.flip, scfg.resize_instead_of_crop)
            for k, p in enumerate(raw)
        ])
    return out


def run_search(cfg: NetworkConfig, scfg: SearchConfig, split, state: SearchState | None = None,
               checkpoint_path=None, dtype=torch.float32, stop_at: int | None = None):
    """Run (or resume) the bi-level search for ``scfg.iterations`` steps.

    ``stop_at`` interrupts the schedule early (the state can then be saved
    and resumed). Returns ``(genotype, state, log_rows)``; each log row is
    ``[step, ext, int, arch, comp, trainA, trainB]``.
    """
    check_disjoint(split.trainA, split.trainB)
    if state is None:
        state = init_search_state(cfg, scfg, dtype)
    end = scfg.iterations if stop_at is None else min(stop_at, scfg.iterations)
    while state.step < end:
        batch_a, batch_b = _search_batches(state, split, state.step)
        step = state.step
        rep = bilevel_step(state, batch_a, batch_b)
        state.log_rows.append(rep.csv_row(step))
        if step % 50 == 0:
            log.info("search step %d/%d trainA=%.4f arch=%.4f", step, scfg.iterations, rep.trainA, rep.arch)
        if checkpoint_path and scfg.checkpoint_every and state.step % scfg.checkpoint_every == 0:
            save_search_state(checkpoint_path, state)
    if checkpoint_path:
        save_search_state(checkpoint_path, state)
    return binarize(state.arch, cfg), state, state.log_rows


# ---------------------------------------------------------------------------
# search checkpoints
# ---------------------------------------------------------------------------


def _opt_arrays(prefix: str, opt: torch.optim.Optimizer, arrays: dict) -> dict:
    sd = opt.state_dict()
    for idx, st in sd["state"].items():
        for key, val in st.items():
            arrays[f"{prefix}/{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    return {"param_groups": sd["param_groups"]}


def _opt_restore(prefix: str, opt: torch.optim.Optimizer, groups: dict, z) -> None:
    state: dict = {}
    for name in z.files:
        if name.startswith(prefix + "/"):
            _, idx, key = name.split("/", 2)
            state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(z[name]))
    opt.load_state_dict({"state": state, "param_groups": groups["param_groups"]})


def save_search_state(path, state: SearchState) -> None:
    arrays = {f"weights/{k}": v.detach().cpu().numpy() for k, v in state.net.state_dict().items()}
    arrays["arch/mu"] = state.arch.mu.detach().cpu().numpy()
    arrays["arch/nu"] = state.arch.nu.detach().cpu().numpy()
    meta = {
        "config": state.cfg.to_json_dict(),
        "shared_attention_choice": state.cfg.shared_attention_choice,
        "search_config": asdict(state.scfg),
        "step": state.step,
        "dtype": str(state.arch.mu.dtype).replace("torch.", ""),
        "opt_w": _opt_arrays("opt_w", state.opt_w, arrays),
        "opt_a": _opt_arrays("opt_a", state.opt_a, arrays),
    }
    arrays["log"] = np.asarray(state.log_rows, dtype=np.float64).reshape(-1, 7)
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_search_state(path) -> SearchState:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        cfg = NetworkConfig.from_json_dict(meta["config"], shared_attention_choice=meta["shared_attention_choice"])
        scfg = SearchConfig(**meta["search_config"])
        state = init_search_state(cfg, scfg, getattr(torch, meta["dtype"]))
        state.net.load_state_dict({k: torch.from_numpy(np.array(z[f"weights/{k}"]))
                                   for k in state.net.state_dict()})
        with torch.no_grad():
            state.arch.mu.copy_(torch.from_numpy(np.array(z["arch/mu"])))
            state.arch.nu.copy_(torch.from_numpy(np.array(z["arch/nu"])))
        _opt_restore("opt_w", state.opt_w, meta["opt_w"], z)
        _opt_restore("opt_a", state.opt_a, meta["opt_a"], z)
        state.step = meta["step"]
        state.log_rows = [[int(r[0])] + [float(v) for v in r[1:]] for r in np.array(z["log"])]
    return state


# ---------------------------------------------------------------------------
# retraining the discrete network
# ---------------------------------------------------------------------------


def run_train(genotype: Genotype, cfg: NetworkConfig, pairs: list, tcfg: TrainConfig = TrainConfig(),
              init_weights: dict | None = None, dtype=torch.float32):
    """Train the discrete network on ``pairs`` with L_trainA only.

    Adam with cosine decay from ``tcfg.lr`` to 0 over all steps. ``init_weights``
    (e.g. the searched supernet's state dict) warm-starts every tensor whose
    path the discrete network shares. Returns ``(net, log_rows)``.
    """
    if not pairs:
        raise ValueError("run_train needs at least one pair")
    net = instantiate(cfg, Mode.DISCRETE, genotype, seed=tcfg.rng_seed, dtype=dtype)
    if init_weights is not None:
        own = net.state_dict()
        net.load_state_dict({k: init_weights[k].to(dtype) if k in init_weights else v for k, v in own.items()})
    params = list(net.parameters())
    opt = torch.optim.Adam(params, lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    bs = tcfg.pairs_per_batch
    steps_per_epoch = math.ceil(len(pairs) / bs)
    total = tcfg.epochs * steps_per_epoch
    rows = []
    net.train()
    loss_fn = lambda o, g: train_a_loss(o, g, use_internal=tcfg.internal_loss)
    for step in range(total):
        opt.param_groups[0]["lr"] = cosine_lr(step, total + 1, tcfg.lr, 0.0)
        batch = [
            _prepare(p, derive_seed(tcfg.rng_seed, "train", step, k), tcfg.patch, tcfg.flip,
                     tcfg.resize_instead_of_crop)
            for k, p in enumerate(round_robin_batch(pairs, tcfg.rng_seed, "train", step, bs))
        ]
        rep = _batch_report(net, batch, dtype, loss_fn)
        rep.check_finite()
        rows.append(rep.csv_row(step))
        _assign_grads(params, torch.autograd.grad(rep.trainA, params, allow_unused=True), "network weights")
        opt.step()
        opt.zero_grad(set_to_none=True)
        if step % (50 * steps_per_epoch) == 0:
            log.info("train epoch %d/%d trainA=%.4f", step // steps_per_epoch, tcfg.epochs, float(rep.trainA.detach()))
    net.eval()
    return net, rows
