"""Training loop, prediction, evaluation and ablation runs."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import plotting
from .core import BBNetError, ConfigError, ModelConfig, TrainConfig, dump_config, load_config
from .dataset import IMAGE_EXTS, load_group, load_image, scan_dataset, sample_group
from .losses import total_loss
from .metrics import evaluate_arrays, evaluate_dirs, write_report
from .network import BBNet, load_checkpoint, save_checkpoint, state_hash

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "l_wbce_final", "l_wiou_final", "l_wbce_ofs", "l_wiou_ofs", "l_total")
METRIC_KEYS = ("s_alpha", "mae", "e_max", "f_max", "e_mean", "f_mean")


class AblationError(BBNetError, ValueError):
    pass


@dataclass
class RunManifest:
    model_config: dict
    train_config: dict
    seed: int
    code_hash: str
    loss_log: str
    checkpoints: list[str] = field(default_factory=list)
    final_checkpoint_hash: str = ""
    report: str | None = None

    def write(self, path) -> Path:
        path = Path(path)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        tmp.replace(path)
        return path


def code_hash() -> str:
    """sha256 over this package's source files, in path order."""
    h = hashlib.sha256()
    pkg = Path(__file__).parent
    for path in sorted(pkg.rglob("*.py")):
        h.update(path.relative_to(pkg).as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def to_uint8(p: torch.Tensor) -> np.ndarray:
    return (p.detach().clamp(0, 1) * 255).round().to(torch.uint8).cpu().numpy()


@torch.no_grad()
def predict_records(net: BBNet, records) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Run each group as one batch. Returns ``{stem: (pred_uint8, gt)}`` at input size."""
    net.eval()
    out = {}
    for rec in records:
        group = load_group(rec, net.cfg.input_size)
        p = net(group.images).P[:, 0]
        for stem, pred, gt in zip(group.stems, to_uint8(p), group.masks[:, 0].numpy()):
            out[stem] = (pred, gt)
    return out


def evaluate_net(net: BBNet, records):
    preds = predict_records(net, records)
    return evaluate_arrays((stem, pred, gt) for stem, (pred, gt) in preds.items())


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, records=None, evaluate: bool = True) -> RunManifest:
    """Momentum-SGD training on group-as-batch samples.

    Update rule (torch.optim.SGD): ``v <- momentum * v + (g + weight_decay * w)``,
    ``w <- w - learning_rate * v``.
    """
    out_dir = Path(train_cfg.out_dir)
    if records is None:
        if not train_cfg.data_root:
            raise ConfigError("data_root is not set")
        records = scan_dataset(train_cfg.data_root)
    if not records:
        raise ConfigError(f"no usable image groups under {train_cfg.data_root!r}")

    seed_everything(train_cfg.seed)
    rng = np.random.default_rng(train_cfg.seed)
    net = BBNet(model_cfg)
    opt = torch.optim.SGD(
        net.parameters(),
        lr=train_cfg.learning_rate,
        momentum=train_cfg.momentum,
        weight_decay=train_cfg.weight_decay,
    )

    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(dump_config(model_cfg, train_cfg))
    log_path = out_dir / "loss_log.csv"
    checkpoints = []

    net.train()
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_COLUMNS)
        for step in range(1, train_cfg.max_steps + 1):
            group = sample_group(records, train_cfg.batch_size, rng, model_cfg.input_size)
            terms = total_loss(net(group.images), group.masks, bce_only=train_cfg.bce_only)
            opt.zero_grad(set_to_none=True)
            terms.l_total.backward()
            opt.step()
            values = terms.as_floats()
            writer.writerow([step] + [repr(values[k]) for k in LOSS_COLUMNS[1:]])
            if step % train_cfg.checkpoint_every == 0:
                path = ckpt_dir / f"step_{step:06d}.pt"
                save_checkpoint(net, path, step)
                checkpoints.append(str(path))
            if step % 50 == 0 or step == 1:
                log.info("step %d loss %.4f", step, values["l_total"])

    final = ckpt_dir / "final.pt"
    save_checkpoint(net, final, train_cfg.max_steps)
    checkpoints.append(str(final))
    if train_cfg.max_steps:
        plotting.plot_loss_curve(log_path, out_dir / "loss_curve.png")

    manifest = RunManifest(
        model_config=dataclasses.asdict(model_cfg),
        train_config=dataclasses.asdict(train_cfg),
        seed=train_cfg.seed,
        code_hash=code_hash(),
        loss_log=str(log_path),
        checkpoints=checkpoints,
        final_checkpoint_hash=state_hash(net),
    )
    if evaluate:
        report = evaluate_net(net, records)
        manifest.report = str(write_report(report, out_dir / "train_report.json")["json"])
    manifest.write(out_dir / "manifest.json")
    return manifest


def read_loss_log(path) -> list[dict[str, float]]:
    with open(path) as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def cmd_train(config_path) -> RunManifest:
    model_cfg, train_cfg = load_config(config_path)
    return train(model_cfg, train_cfg)


def _group_images(group_dir: Path) -> list[Path]:
    return sorted(p for p in group_dir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTS)


@torch.no_grad()
def cmd_predict(checkpoint, group_dir, out_dir) -> list[Path]:
    """Predict every image in ``group_dir`` as one group; write 8-bit PNG maps."""
    seed_everything(0)
    net = load_checkpoint(checkpoint)
    net.eval()
    paths = _group_images(Path(group_dir))
    if not paths:
        raise FileNotFoundError(f"no images in {group_dir}")
    s = net.cfg.input_size
    natives, batch = [], []
    for path in paths:
        with Image.open(path) as im:
            natives.append((im.height, im.width))
        batch.append(load_image(path, s))
    images = torch.from_numpy(np.stack(batch)).permute(0, 3, 1, 2).contiguous()
    probs = net(images).P
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path, (h, w), p in zip(paths, natives, probs):
        if (h, w) != (s, s):
            p = F.interpolate(p[None], size=(h, w), mode="bilinear", align_corners=False)[0]
        target = out_dir / f"{path.stem}.png"
        Image.fromarray(to_uint8(p[0])).save(target)
        written.append(target)
    return written


def cmd_eval(pred_dir, gt_dir, report_path, adaptive: bool = False):
    report = evaluate_dirs(pred_dir, gt_dir, adaptive=adaptive)
    write_report(report, report_path)
    return report


# ---------------------------------------------------------------------------
# ablations

def apply_switch(model_cfg: ModelConfig, train_cfg: TrainConfig, switch: str):
    """Return the ``(model_cfg, train_cfg)`` pair for one named ablation variant."""
    name, _, arg = switch.partition("=")
    try:
        if name in ("no_cfe", "no_ofs", "no_lgr") and not arg:
            return model_cfg.replace(**{f"use_{name[3:]}": False}), train_cfg
        if name == "no_gamma" and not arg:
            return model_cfg.replace(learn_gamma=False), train_cfg
        if name == "consensus_off" and not arg:
            return model_cfg.replace(group_consensus=False), train_cfg
        if name == "bce_only" and not arg:
            return model_cfg, train_cfg.replace(bce_only=True)
        if name == "iters" and arg and 0 <= int(arg) <= 3:
            return model_cfg.replace(multiview_iters=int(arg)), train_cfg
        if name == "top_n" and arg and 1 <= int(arg) <= 4:
            return model_cfg.replace(lgr_top_n=int(arg)), train_cfg
    except ValueError as exc:
        raise AblationError(f"bad ablation switch {switch!r}: {exc}") from exc
    raise AblationError(
        f"unknown ablation switch {switch!r}; expected no_cfe, no_ofs, no_lgr, iters=0..3, "
        "no_gamma, top_n=1..4, bce_only or consensus_off"
    )


def ablate(model_cfg: ModelConfig, train_cfg: TrainConfig, switches, records=None) -> dict:
    """Train the full model and each variant with identical seed and data; compare train-set metrics."""
    variants = {"full": (model_cfg, train_cfg)}
    for switch in switches:
        variants[switch] = apply_switch(model_cfg, train_cfg, switch)
    if records is None:
        records = scan_dataset(train_cfg.data_root)
    base = Path(train_cfg.out_dir)
    rows = {}
    for name, (mcfg, tcfg) in variants.items():
        run_dir = base / name.replace("=", "_")
        manifest = train(mcfg, tcfg.replace(out_dir=str(run_dir)), records)
        summary = json.loads(Path(manifest.report).read_text())
        losses = read_loss_log(manifest.loss_log)
        rows[name] = {k: summary[k] for k in METRIC_KEYS}
        rows[name]["final_loss"] = float(np.mean([r["l_total"] for r in losses[-20:]])) if losses else None
    base.mkdir(parents=True, exist_ok=True)
    (base / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    with open(base / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", *METRIC_KEYS, "final_loss"])
        for name, row in rows.items():
            writer.writerow([name] + [row[k] for k in (*METRIC_KEYS, "final_loss")])
    plotting.plot_ablation(rows, base / "ablation.png")
    return rows


def cmd_ablate(config_path, switches) -> dict:
    model_cfg, train_cfg = load_config(config_path)
    return ablate(model_cfg, train_cfg, switches)


def configure_logging() -> None:
    level = os.environ.get("BBNET_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
