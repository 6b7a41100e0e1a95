"""Command line: ``manas {gen-data,search,train,infer,eval}``.

Settings come from a flat ``key = value`` file (``--config``) overridden by
command-line flags; every key has a default and unknown keys are rejected.
Exit codes: 0 success, 2 usage or configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .core import (
    ConfigError,
    Genotype,
    GenotypeError,
    NetworkConfig,
    NumericalAbort,
    SearchConfig,
    TrainConfig,
    validate_config,
)
from .data import load_dataset, read_image, synthetic_split, write_dataset, write_image
from .losses import write_loss_log
from .metrics import evaluate
from .search_engine import load_search_state, run_search, run_train
from .supernet import Mode, instantiate, load_weights, save_weights

log = logging.getLogger("manas")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: str = ""
    # network
    num_cells: int = 1
    channels: int = 8
    columns: int = 4
    multi_to_one: int = 3
    shared_attention_choice: bool = False
    # data handling
    patch: int = 0
    flip: bool = True
    resize_instead_of_crop: bool = False
    # search
    lambda_arch: float = 0.01
    lambda_comp: str = "0"
    iterations: int = 300
    lr_w_max: float = 2e-3
    lr_w_min: float = 1e-4
    momentum: float = 0.9
    weight_decay_w: float = 3e-4
    lr_arch: float = 3e-4
    weight_decay_arch: float = 1e-3
    warmup_frac: float = 0.1
    pairs_per_batch: int = 1
    checkpoint_every: int = 0
    # train
    epochs: int = 200
    lr_train: float = 1e-3
    weight_decay_train: float = 3e-4
    internal_loss: bool = True
    warm_start: bool = False
    genotype: str = ""
    # infer / eval
    checkpoint: str = ""
    split: str = "test"
    psnr_peak: float = 1.0
    # gen-data
    trainA: int = 4
    trainB: int = 4
    test: int = 2
    size: int = 32

    @property
    def lambdas(self) -> list[float]:
        try:
            vals = [float(v) for v in str(self.lambda_comp).split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"lambda_comp must be a comma-separated list of numbers, got {self.lambda_comp!r}")
        if not vals:
            raise ConfigError("lambda_comp is empty")
        return vals

    def network(self, height: int, width: int) -> NetworkConfig:
        return NetworkConfig(self.num_cells, self.channels, self.columns, self.multi_to_one,
                             height, width, self.shared_attention_choice)

    def search(self, lambda_comp: float) -> SearchConfig:
        return SearchConfig(
            lambda_arch=self.lambda_arch, lambda_comp=lambda_comp, iterations=self.iterations,
            lr_w_max=self.lr_w_max, lr_w_min=self.lr_w_min, momentum=self.momentum,
            weight_decay_w=self.weight_decay_w, lr_arch=self.lr_arch,
            weight_decay_arch=self.weight_decay_arch, warmup_frac=self.warmup_frac,
            pairs_per_batch=self.pairs_per_batch, patch=self.patch, flip=self.flip,
            resize_instead_of_crop=self.resize_instead_of_crop,
            checkpoint_every=self.checkpoint_every, rng_seed=self.seed,
        )

    def train(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, lr=self.lr_train, weight_decay=self.weight_decay_train,
            internal_loss=self.internal_loss, pairs_per_batch=self.pairs_per_batch,
            patch=self.patch, flip=self.flip, resize_instead_of_crop=self.resize_instead_of_crop,
            rng_seed=self.seed,
        )

    def echo(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


_KEYS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _KEYS[key].type
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value configuration file")
    for key in _KEYS:
        common.add_argument(_flag(key), dest=key, default=None, metavar=_KEYS[key].type.upper())
    parser = argparse.ArgumentParser(prog="manas", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write a synthetic multi-to-one dataset")
    sub.add_parser("search", parents=[common], help="bi-level architecture search")
    sub.add_parser("train", parents=[common], help="train the discrete network of a genotype")
    p = sub.add_parser("infer", parents=[common], help="de-rain image files")
    p.add_argument("inputs", nargs="+")
    sub.add_parser("eval", parents=[common], help="PSNR/SSIM report on a dataset split")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = parse_config_file(args.config) if args.config else {}
    for key in _KEYS:
        raw = getattr(args, key)
        if raw is not None:
            values[key] = _coerce(key, raw)
    return RunConfig(**values)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _prepare_run_dir(rc: RunConfig) -> Path:
    out = Path(rc.out)
    for sub in ("ckpt", "logs", "report"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(rc.echo())
    return out


def _load_split(rc: RunConfig):
    if not rc.data:
        raise ConfigError("no dataset given (set data = <dir> or --data)")
    if not Path(rc.data).is_dir():
        raise FileNotFoundError(f"dataset directory {rc.data!r} does not exist")
    return load_dataset(rc.data)


def _image_dims(rc: RunConfig, pairs) -> tuple[int, int]:
    if rc.patch:
        return rc.patch, rc.patch
    h, w = pairs[0].gt.shape[-2:]
    return int(h), int(w)


def cmd_gen_data(rc: RunConfig) -> int:
    if rc.trainA < 1 or rc.trainB < 1 or rc.test < 0 or rc.size < 1:
        raise ConfigError("gen-data needs trainA >= 1, trainB >= 1, test >= 0, size >= 1")
    split = synthetic_split(rc.trainA, rc.trainB, rc.test, rc.size, rc.seed)
    write_dataset(rc.out, split)
    log.info("wrote %d pairs to %s", rc.trainA + rc.trainB + rc.test, rc.out)
    return EXIT_OK


def _search_one(rc: RunConfig, split, lam: float, out: Path) -> Genotype:
    cfg = rc.network(*_image_dims(rc, split.trainA))
    validate_config(cfg)
    ckpt = out / "ckpt" / "search.npz"
    if cfg.num_cells == 0:
        genotype = Genotype(cfg, ())
    else:
        genotype, state, rows = run_search(cfg, rc.search(lam), split, checkpoint_path=ckpt)
        write_loss_log(out / "logs" / "search.csv", rows)
    (out / "genotype.json").write_bytes(genotype.to_json())
    return genotype


def cmd_search(rc: RunConfig) -> int:
    split = _load_split(rc)
    out = _prepare_run_dir(rc)
    lambdas = rc.lambdas
    if len(lambdas) == 1:
        _search_one(rc, split, lambdas[0], out)
        return EXIT_OK
    rows = []
    for lam in lambdas:
        sub = out / f"lambda_{lam:g}"
        sub_rc = dataclasses.replace(rc, out=str(sub), lambda_comp=f"{lam:g}")
        _prepare_run_dir(sub_rc)
        genotype = _search_one(sub_rc, split, lam, sub)
        count = sum(p.numel() for p in instantiate(genotype.config, Mode.DISCRETE, genotype).parameters())
        rows.append([f"{lam:g}", count, str(sub / "genotype.json")])
        log.info("lambda_comp=%g -> %d parameters", lam, count)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda_comp", "param_count", "genotype"])
        w.writerows(rows)
    return EXIT_OK


def cmd_train(rc: RunConfig) -> int:
    out = Path(rc.out)
    gpath = Path(rc.genotype) if rc.genotype else out / "genotype.json"
    if not gpath.is_file():
        raise FileNotFoundError(f"genotype {gpath} not found")
    genotype = Genotype.from_json(gpath.read_bytes())
    g = genotype.config
    if (g.num_cells, g.channels, g.columns) != (rc.num_cells, rc.channels, rc.columns):
        raise GenotypeError(
            f"genotype is for T={g.num_cells}, C={g.channels}, M={g.columns}; "
            f"config says T={rc.num_cells}, C={rc.channels}, M={rc.columns}"
        )
    split = _load_split(rc)
    out = _prepare_run_dir(rc)
    cfg = rc.network(*_image_dims(rc, split.train))
    validate_config(cfg)
    init = None
    search_ckpt = out / "ckpt" / "search.npz"
    if rc.warm_start and search_ckpt.is_file():
        init = load_search_state(search_ckpt).net.state_dict()
        log.info("warm start from %s", search_ckpt)
    net, rows = run_train(genotype, cfg, split.train, rc.train(), init_weights=init)
    save_weights(out / "ckpt" / "model.npz", net)
    write_loss_log(out / "logs" / "train.csv", rows)
    return EXIT_OK


def _checkpoint_path(rc: RunConfig) -> Path:
    path = Path(rc.checkpoint) if rc.checkpoint else Path(rc.out) / "ckpt" / "model.npz"
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return path


@torch.no_grad()
def derain_image(net, img: np.ndarray) -> np.ndarray:
    """Run ``net`` on one (3, H, W) image of any size (reflect-pad, then crop back)."""
    step = 2 ** net.cfg.num_cells
    h, w = img.shape[-2:]
    ph, pw = -h % step, -w % step
    x = torch.from_numpy(img)[None]
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    return net(x)[0, :, :h, :w].clamp(0, 1).numpy()


def cmd_infer(rc: RunConfig, inputs: list[str]) -> int:
    net = load_weights(_checkpoint_path(rc)).eval()
    dest = Path(rc.out) / "infer"
    dest.mkdir(parents=True, exist_ok=True)
    for name in inputs:
        try:
            img = read_image(name)
        except (UnidentifiedImageError, OSError) as exc:
            raise ConfigError(f"cannot read image {name}: {exc}") from None
        write_image(dest / (Path(name).stem + ".png"), derain_image(net, img))
    return EXIT_OK


def cmd_eval(rc: RunConfig) -> int:
    net = load_weights(_checkpoint_path(rc)).eval()
    split = _load_split(rc)
    choices = {"test": split.test, "train": split.train, "trainA": split.trainA, "trainB": split.trainB}
    if rc.split not in choices:
        raise ConfigError(f"split must be one of {sorted(choices)}, got {rc.split!r}")
    pairs = choices[rc.split]
    report = evaluate(net, pairs, peak=rc.psnr_peak)
    baseline = evaluate(lambda x: x, pairs, peak=rc.psnr_peak)
    out = Path(rc.out) / "report"
    csv_path, json_path = report.write(out)
    summary = json.loads(json_path.read_text())
    summary["input_mean_psnr"] = baseline.mean_psnr
    summary["input_mean_ssim"] = baseline.mean_ssim
    summary["split"] = rc.split
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"{rc.split}: PSNR {report.mean_psnr:.2f} dB (input {baseline.mean_psnr:.2f}), "
          f"SSIM {report.mean_ssim:.4f} (input {baseline.mean_ssim:.4f}), n={report.count}")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        rc = resolve_config(args)
        torch.manual_seed(rc.seed)
        if args.command == "gen-data":
            return cmd_gen_data(rc)
        if args.command == "search":
            return cmd_search(rc)
        if args.command == "train":
            return cmd_train(rc)
        if args.command == "infer":
            return cmd_infer(rc, args.inputs)
        return cmd_eval(rc)
    except NumericalAbort as exc:
        print(f"manas: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, GenotypeError, ValueError, OSError) as exc:
        print(f"manas: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
