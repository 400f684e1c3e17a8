"""Optimization loop, checkpoint state, inference, evaluation and the gradient-check suite."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import losses as L
from .autodiff import Tensor, no_grad
from .config import ARCH_FIELDS, TrainConfig, diff_fields
from .discriminator import CriticPair
from .generator import Generator
from .imaging import (ImageFolder, MaskSource, batch_indices, generate_irregular_mask, load_image,
                      load_mask, make_batch, parse_bucket, save_image, stack_batch)
from .metrics import MetricReport, feat_dist, score_image

log = logging.getLogger(__name__)

CSV_FIELDS = ["step", "L_rec", "L_perc", "L_style", "L_adv", "L_rte", "L_rst", "L_total", "D_loss"]
FX_SEED = 1234


class NumericFailure(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None):
        where = f"; last good checkpoint: {checkpoint}" if checkpoint else "; no checkpoint written yet"
        super().__init__(message + where)
        self.checkpoint = checkpoint


class DataError(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    def __init__(self, fields: list[str], saved: dict, given: dict):
        detail = ", ".join(f"{k}: checkpoint={saved.get(k)!r} config={given.get(k)!r}" for k in fields)
        super().__init__(f"checkpoint/config mismatch in {detail}")
        self.fields = fields


class Adam:
    def __init__(self, params, lr: float, beta1: float, beta2: float, eps: float):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def records(self, prefix: str, names: list[str]) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array(self.t, dtype=np.int64)}
        for name, m, v in zip(names, self.m, self.v):
            out[f"{prefix}.m.{name}"] = m
            out[f"{prefix}.v.{name}"] = v
        return out

    def load(self, prefix: str, names: list[str], records: dict) -> None:
        self.t = int(records[f"{prefix}.t"])
        for i, name in enumerate(names):
            self.m[i] = records[f"{prefix}.m.{name}"].astype(self.params[i].dtype).copy()
            self.v[i] = records[f"{prefix}.v.{name}"].astype(self.params[i].dtype).copy()


@dataclass
class TrainState:
    cfg: TrainConfig
    generator: Generator
    critics: CriticPair
    fx: L.FeatureExtractor
    opt_g: Adam
    opt_d: Adam
    step: int = 0

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def g_names(self) -> list[str]:
        return [n for n, _ in self.generator.named_parameters()]

    def d_names(self) -> list[str]:
        return [n for n, _ in self.critics.named_parameters()]

    def records(self) -> dict[str, np.ndarray]:
        rec = {"step": np.array(self.step, dtype=np.int64)}
        rec.update({f"generator.{k}": v for k, v in self.generator.state_dict().items()})
        rec.update({f"critics.{k}": v for k, v in self.critics.state_dict().items()})
        for name, st in self.critics.spectral_states().items():
            rec[f"spectral.{name}.u"] = st.u
            rec[f"spectral.{name}.v"] = st.v
        rec.update(self.opt_g.records("adam_g", self.g_names()))
        rec.update(self.opt_d.records("adam_d", self.d_names()))
        return rec

    def save(self, path) -> Path:
        return ckpt.save_records(path, self.records(), self.cfg.to_dict())

    def load_records(self, rec: dict) -> None:
        def sub(prefix):
            n = len(prefix) + 1
            return {k[n:]: v for k, v in rec.items() if k.startswith(prefix + ".")}

        self.generator.load_state_dict(sub("generator"))
        self.critics.load_state_dict(sub("critics"))
        for name, st in self.critics.spectral_states().items():
            st.u = rec[f"spectral.{name}.u"].astype(self.dtype).copy()
            st.v = rec[f"spectral.{name}.v"].astype(self.dtype).copy()
        self.opt_g.load("adam_g", self.g_names(), rec)
        self.opt_d.load("adam_d", self.d_names(), rec)
        self.step = int(rec["step"])


def build_state(cfg: TrainConfig) -> TrainState:
    dtype = np.dtype(cfg.dtype)
    gen = Generator(cfg.generator_config(), seed=cfg.seed, dtype=dtype)
    critics = CriticPair(cfg.image_size, cfg.base_channels, seed=cfg.seed, dtype=dtype)
    fx = L.FeatureExtractor(seed=FX_SEED, dtype=dtype)
    opt_g = Adam(gen.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    opt_d = Adam(critics.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    return TrainState(cfg, gen, critics, fx, opt_g, opt_d)


def load_state(path, cfg: TrainConfig | None = None) -> TrainState:
    """Rebuild training state from a checkpoint.

    With ``cfg`` given, architecture fields must agree with the checkpoint's
    config echo; other fields (steps, lr, ...) come from ``cfg``.
    """
    rec, saved = ckpt.load_records(path)
    if cfg is None:
        cfg = TrainConfig.from_dict(saved)
    else:
        bad = diff_fields(saved, cfg.to_dict(), ARCH_FIELDS)
        if bad:
            raise CheckpointMismatch(bad, saved, cfg.to_dict())
    state = build_state(cfg)
    try:
        state.load_records(rec)
    except (KeyError, ValueError) as exc:
        raise ckpt.CheckpointError(f"checkpoint does not fit the model: {exc}") from exc
    return state


def _set_trainable(module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad = flag


def adversarial(critics: CriticPair, real: Tensor, fake: Tensor, masks: np.ndarray, fn) -> Tensor:
    """Sum of ``fn(real_scores, fake_scores)`` over the global and local critics."""
    total = None
    for which in ("global", "local"):
        sr = critics.critic_forward(real, which, masks)
        sf = critics.critic_forward(fake, which, masks)
        term = fn(sr, sf)
        total = term if total is None else total + term
    return total


def generator_components(state: TrainState, img: np.ndarray, st: np.ndarray, masks: np.ndarray):
    """Forward the generator and build the six loss terms (graph attached)."""
    gen, fx = state.generator, state.fx
    image = Tensor(img)
    out = gen(image, masks)
    with no_grad():
        target_feats = fx(image)
    out_feats = fx(out.raw)
    comps = {
        "rec": L.loss_rec(out.raw, img),
        "perc": L.perc_from_features(out_feats, target_feats),
        "style": L.style_from_features(out_feats, target_feats),
        "adv": adversarial(state.critics, image, out.raw, masks, L.loss_adv_g),
        "rte": L.loss_rte(out.branch_texture, img),
        "rst": L.loss_rst(out.branch_structure, st),
    }
    return out, comps


def _check_finite(values: dict, step: int, last_ckpt) -> None:
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        raise NumericFailure(f"non-finite loss at step {step}: {', '.join(bad)}", last_ckpt)


def train_step(state: TrainState, img: np.ndarray, st: np.ndarray, masks: np.ndarray,
               last_ckpt: Path | None = None) -> dict:
    """One critic update followed by one generator update. Returns the CSV row."""
    cfg = state.cfg
    gen, critics = state.generator, state.critics
    image = Tensor(img)

    with no_grad():
        fake = gen(image, masks).raw.detach()

    if cfg.freeze_critics:
        with no_grad():
            d_loss = adversarial(critics, image, fake, masks, L.loss_adv_d)
        _check_finite({"D_loss": d_loss.item()}, state.step + 1, last_ckpt)
    else:
        critics.update_spectral()
        critics.zero_grad()
        d_loss = adversarial(critics, image, fake, masks, L.loss_adv_d)
        _check_finite({"D_loss": d_loss.item()}, state.step + 1, last_ckpt)
        d_loss.backward()
        state.opt_d.step()

    _set_trainable(critics, False)
    try:
        gen.zero_grad()
        _, comps = generator_components(state, img, st, masks)
        total = L.loss_total(comps, cfg.weights)
        values = {f"L_{k}": comps[k].item() for k in L.COMPONENTS}
        values["L_total"] = total.item()
        _check_finite(values, state.step + 1, last_ckpt)
        total.backward()
    finally:
        _set_trainable(critics, True)
    state.opt_g.step()
    state.step += 1
    row = {"step": state.step}
    row.update(values)
    row["D_loss"] = d_loss.item()
    return row


# ---------------------------------------------------------------------------
# run management


def checkpoint_path(out_dir, step: int) -> Path:
    return Path(out_dir) / f"ckpt_{step:06d}.ckpt"


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


def read_loss_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def _open_log(path: Path, keep_until: int):
    """Open the loss CSV for appending, dropping rows after ``keep_until`` (resume)."""
    rows = []
    if keep_until > 0 and path.exists():
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh)][1:]
        rows = [r for r in rows if int(r[0]) <= keep_until]
    fh = open(path, "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    w.writerows(rows)
    return fh, w


@dataclass
class TrainResult:
    state: TrainState
    rows: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    csv_path: Path | None = None
    plot_path: Path | None = None


class DataSource:
    def __init__(self, data_root, cfg: TrainConfig):
        try:
            self.folder = ImageFolder(data_root, cfg.image_size)
            self.masks = MaskSource(cfg.mask_mode, cfg.image_size, cfg.seed)
        except (OSError, ValueError) as exc:
            raise DataError(str(exc)) from exc
        self.cfg = cfg
        self._cache: dict[tuple, tuple] = {}

    def batch(self, step: int):
        n = len(self.folder)
        idx, counter = batch_indices(n, min(self.cfg.batch, n), self.cfg.seed, step)
        key = (tuple(int(i) for i in idx), counter if self.cfg.mask_mode != "center" else 0)
        if key not in self._cache:
            samples = make_batch(self.folder, self.masks, idx, counter)
            arrays = stack_batch(samples, np.dtype(self.cfg.dtype))
            if len(self._cache) < 256:
                self._cache[key] = arrays
            return arrays
        return self._cache[key]


def train(cfg: TrainConfig, data_root, out_dir, resume=None, plot: bool = True,
          progress=None) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = DataSource(data_root, cfg)
    state = load_state(resume, cfg) if resume else build_state(cfg)
    (out_dir / "config.json").write_text(cfg.to_json() + "\n")
    result = TrainResult(state, csv_path=out_dir / "loss.csv")

    if cfg.steps == 0 and not resume:
        result.checkpoints.append(state.save(checkpoint_path(out_dir, 0)))
        return result

    last = Path(resume) if resume else None
    fh, writer = _open_log(result.csv_path, state.step)
    try:
        while state.step < cfg.steps:
            img, st, masks = data.batch(state.step)
            row = train_step(state, img, st, masks, last)
            result.rows.append(row)
            if row["step"] % cfg.log_every == 0 or row["step"] == cfg.steps:
                writer.writerow([_fmt(row[k]) for k in CSV_FIELDS])
                fh.flush()
            if progress:
                progress(row)
            if state.step % cfg.checkpoint_every == 0 or state.step == cfg.steps:
                last = state.save(checkpoint_path(out_dir, state.step))
                result.checkpoints.append(last)
    finally:
        fh.close()
    if plot:
        from .plotting import plot_loss_curve

        result.plot_path = plot_loss_curve(read_loss_csv(result.csv_path), out_dir / "loss_curve.png")
    return result


# ---------------------------------------------------------------------------
# inference and evaluation


def run_generator(state: TrainState, image: np.ndarray, mask: np.ndarray):
    """image HxWx3, mask HxW -> (composited, raw) as HxWx3 float arrays."""
    size = state.cfg.image_size
    if image.shape[:2] != (size, size) or mask.shape != (size, size):
        raise DataError(f"model expects {size}x{size} inputs, got image {image.shape[:2]} and mask {mask.shape}")
    x = image.transpose(2, 0, 1)[None].astype(state.dtype)
    m = mask[None, None].astype(state.dtype)
    with no_grad():
        out = state.generator(Tensor(x), m)
    return out.composited.data[0].transpose(1, 2, 0), out.raw.data[0].transpose(1, 2, 0)


def infer(ckpt_path, image_path, mask_path, out_dir) -> dict[str, Path]:
    state = load_state(ckpt_path)
    try:
        image = load_image(image_path)
        mask = load_mask(mask_path)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    comp, raw = run_generator(state, image, mask)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"composited": out_dir / "composited.ppm", "raw": out_dir / "raw.ppm"}
    save_image(comp, paths["composited"])
    save_image(raw, paths["raw"])
    return paths


@dataclass
class EvalResult:
    composited: MetricReport
    raw: MetricReport
    examples: list  # (name, masked, composited, target) for the figure


def eval_pairs(data_root, bucket: str, size: int, seed: int = 0):
    """(name, image, mask) triples for a bucket: manifest pairs when present, else generated masks."""
    root = Path(data_root)
    parse_bucket(bucket)
    manifest = root / "manifest.json"
    try:
        if manifest.exists():
            import json

            pairs = json.loads(manifest.read_text())["pairs"][bucket]
            return [(img_rel, load_image(root / img_rel), load_mask(root / mask_rel)) for img_rel, mask_rel in pairs]
        folder = ImageFolder(root, size)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read evaluation data: {exc}") from exc
    return [(p.name, img, generate_irregular_mask(size, size, bucket, seed * 7919 + k))
            for k, (p, img) in enumerate(zip(folder.paths, folder.images))]


def evaluate(ckpt_path, data_root, bucket: str, with_feat_dist: bool = True) -> EvalResult:
    state = load_state(ckpt_path)
    triples = eval_pairs(data_root, bucket, state.cfg.image_size, state.cfg.seed)
    comp_rows, raw_rows, examples, preds, targets = [], [], [], [], []
    for name, image, mask in triples:
        comp, raw = run_generator(state, image, mask)
        comp = comp.astype(np.float64)
        raw = raw.astype(np.float64)
        comp_rows.append(score_image(name, comp, image))
        raw_rows.append(score_image(name, raw, image))
        preds.append(comp.transpose(2, 0, 1))
        targets.append(image.transpose(2, 0, 1))
        if len(examples) < 4:
            examples.append((name, image * mask[:, :, None], comp, image))
    fd = None
    if with_feat_dist and len(preds) >= 2:
        fx = L.FeatureExtractor(seed=FX_SEED, dtype=np.float64)
        fd = feat_dist(np.stack(preds), np.stack(targets), fx)
    return EvalResult(MetricReport.from_scores(comp_rows, fd), MetricReport.from_scores(raw_rows), examples)


def eval_csv_rows(result: EvalResult) -> list[list[str]]:
    def f(x):
        return "inf" if x == math.inf else f"{x:.6f}"

    rows = [["path", "psnr_comp", "ssim_comp", "mae_comp", "psnr_raw", "ssim_raw", "mae_raw"]]
    for c, r in zip(result.composited.rows, result.raw.rows):
        rows.append([c.path, f(c.psnr), f(c.ssim), f(c.mae), f(r.psnr), f(r.ssim), f(r.mae)])
    c, r = result.composited, result.raw
    rows.append(["MEAN", f(c.psnr), f(c.ssim), f(c.mae), f(r.psnr), f(r.ssim), f(r.mae)])
    return rows


__all__ = [
    "Adam", "TrainState", "build_state", "load_state", "train_step", "train", "infer", "evaluate",
    "NumericFailure", "DataError", "CheckpointMismatch", "CSV_FIELDS", "read_loss_csv",
]
