"""Training loop, evaluation and model checkpoints."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .config import ConfigError, dump_config, parse_config
from .data import SamplePair
from .homography.geometry import Homography, PointAtInfinityError, base_corners, warp
from .homography.metrics import corner_error, psnr, ssim
from .network import CascadeError, LocalTrans, ModelConfig, cascade_forward
from .optim import Adam
from .tensor.checkpoint import load_checkpoint, save_checkpoint
from .tensor.core import NumericalError, backward, get_default_dtype, set_default_dtype

log = logging.getLogger(__name__)

PathLike = Union[str, Path]


class TrainingError(RuntimeError):
    def __init__(self, step: int, where: str, reason: str):
        super().__init__(f"step {step}: {reason} ({where})")
        self.step = step
        self.where = where


# --- model checkpoints ----------------------------------------------------------------------

MODEL_KEYS = ("levels", "channels", "height", "width", "radii", "boundary", "shared_encoder",
              "scaled_correlation", "seed", "precision")


def model_config_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["radii"] = ",".join(str(cfg.radius(k)) for k in range(1, cfg.levels + 1))
    d["precision"] = np.dtype(get_default_dtype()).name
    return d


def model_config_from_dict(d: dict) -> tuple[ModelConfig, str]:
    d = dict(d)
    precision = str(d.pop("precision", "float64"))
    radii = d.pop("radii", None)
    if isinstance(radii, int):
        radii = (radii,)
    elif isinstance(radii, str):
        radii = tuple(int(r) for r in radii.split(","))
    cfg = ModelConfig(**d, radii=radii)
    if cfg.radii == tuple(k + 1 for k in range(1, cfg.levels + 1)):
        cfg.radii = None
    return cfg, precision


def sidecar_path(path: PathLike) -> Path:
    return Path(str(path) + ".cfg")


def save_model(path: PathLike, model: LocalTrans, optimizer: Optional[Adam] = None, step: int = 0) -> None:
    state = {f"model.{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        state.update(optimizer.state_dict())
    state["train.step"] = np.array([float(step)])
    save_checkpoint(path, state)
    sidecar_path(path).write_text(dump_config(model_config_dict(model.cfg)))


def load_model(path: PathLike, set_precision: bool = True) -> tuple[LocalTrans, dict]:
    """Rebuild a model from a checkpoint and its config sidecar.

    Returns the model (in eval mode) and the full checkpoint state so a
    trainer can restore its optimizer.
    """
    side = sidecar_path(path)
    if not side.exists():
        raise ConfigError(f"missing config sidecar {side}")
    cfg, precision = model_config_from_dict(parse_config(side.read_text(), MODEL_KEYS, str(side)))
    if set_precision:
        set_default_dtype(np.dtype(precision))
    state = load_checkpoint(path)
    model = LocalTrans(cfg)
    model.load_state_dict({k[6:]: v for k, v in state.items() if k.startswith("model.")})
    return model.eval(), state


# --- evaluation -------------------------------------------------------------------------------

@dataclass
class EvalResult:
    errors: np.ndarray
    baseline: np.ndarray
    psnr: float = float("nan")
    ssim: float = float("nan")

    @property
    def mean(self) -> float:
        return float(self.errors.mean())

    @property
    def median(self) -> float:
        return float(np.median(self.errors))

    @property
    def baseline_mean(self) -> float:
        return float(self.baseline.mean())


def predict(model: LocalTrans, pairs: Sequence[SamplePair], batch_size: int = 8) -> list[Optional[Homography]]:
    """Cascade estimates in eval mode; ``None`` for samples whose cascade degenerates."""
    was_training = model.training
    model.eval()
    out: list[Optional[Homography]] = []
    try:
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i:i + batch_size]
            t = np.stack([p.target for p in chunk])
            u = np.stack([p.unaligned for p in chunk])
            try:
                out.extend(cascade_forward(model, t, u).estimates)
            except CascadeError:
                # retry one by one so a single degenerate sample does not hide the others
                for j in range(len(chunk)):
                    try:
                        out.extend(cascade_forward(model, t[j:j + 1], u[j:j + 1]).estimates)
                    except CascadeError as exc:
                        log.warning("sample %d: %s", i + j, exc)
                        out.append(None)
    finally:
        model.train(was_training)
    return out


def evaluate(
    model: LocalTrans, pairs: Sequence[SamplePair], batch_size: int = 8, image_metrics: bool = False
) -> EvalResult:
    """Corner error of the cascade estimate against ground truth, plus the identity baseline."""
    cfg = model.cfg
    base = base_corners(cfg.width, cfg.height)
    estimates = predict(model, pairs, batch_size)
    errors = np.array([_corner_error_or_inf(h, p.gt_h, base) for h, p in zip(estimates, pairs)])
    baseline = np.array([corner_error(Homography.identity(), p.gt_h, base) for p in pairs])
    res = EvalResult(errors, baseline)
    if image_metrics:
        ps, ss = [], []
        for h, p in zip(estimates, pairs):
            aligned = warp(p.unaligned, h if h is not None else Homography.identity())
            ps.append(psnr(aligned, p.target))
            ss.append(ssim(aligned, p.target))
        res.psnr, res.ssim = float(np.mean(ps)), float(np.mean(ss))
    return res


def _corner_error_or_inf(h: Optional[Homography], gt: Homography, base: np.ndarray) -> float:
    """Corner error, or infinity when the estimate is missing or sends a corner to infinity."""
    if h is None:
        return float("inf")
    try:
        return corner_error(h, gt, base)
    except PointAtInfinityError:
        return float("inf")


# --- training ----------------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    lr_schedule: str = "constant"
    lr_min: float = 0.0
    eval_every: int = 0
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch size must be positive and steps non-negative")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "constant" or self.steps <= 1:
            return self.lr
        frac = min(step / (self.steps - 1), 1.0)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + math.cos(math.pi * frac))


@dataclass
class History:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    evals: list[tuple[int, float]] = field(default_factory=list)


class Trainer:
    """Adam over the summed per-level residual corner loss.

    Batches are drawn without replacement from ``(seed, step)`` alone, so a
    resumed run sees exactly the batches the uninterrupted one would have.
    """

    def __init__(
        self,
        model: LocalTrans,
        pairs: Sequence[SamplePair],
        cfg: TrainConfig,
        val_pairs: Optional[Sequence[SamplePair]] = None,
        out_dir: Optional[PathLike] = None,
    ):
        self.model, self.cfg = model, cfg
        self.pairs = list(pairs)
        self.val_pairs = list(val_pairs) if val_pairs else None
        self.out_dir = Path(out_dir) if out_dir else None
        dt = get_default_dtype()
        self.targets = np.stack([p.target for p in self.pairs]).astype(dt)
        self.unaligned = np.stack([p.unaligned for p in self.pairs]).astype(dt)
        self.gt = [p.gt_h for p in self.pairs]
        self.optimizer = Adam(model.named_parameters(), lr=cfg.lr)
        self.step = 0
        self.best = float("inf")
        self.history = History()

    def batch_indices(self, step: int) -> np.ndarray:
        n = len(self.pairs)
        rng = np.random.default_rng([self.cfg.seed, step])
        return np.sort(rng.choice(n, size=min(self.cfg.batch_size, n), replace=False))

    def train_step(self) -> float:
        idx = self.batch_indices(self.step)
        self.model.train()
        self.optimizer.zero_grad()
        self.optimizer.lr = self.cfg.lr_at(self.step)
        try:
            out = cascade_forward(self.model, self.targets[idx], self.unaligned[idx], [self.gt[i] for i in idx])
            backward(out.loss)
            self.optimizer.step()
        except NumericalError as exc:
            where = _group_of(str(exc))
            raise TrainingError(self.step, where, str(exc)) from None
        except CascadeError as exc:
            raise TrainingError(self.step, f"head{exc.level}", str(exc)) from None
        except PointAtInfinityError as exc:
            raise TrainingError(self.step, "residual targets", str(exc)) from None
        loss = out.loss.item()
        if not math.isfinite(loss):
            raise TrainingError(self.step, "loss", "non-finite loss")
        self.step += 1
        self.history.steps.append(self.step)
        self.history.losses.append(loss)
        return loss

    def run(self, callback: Optional[Callable[["Trainer", float], None]] = None) -> History:
        while self.step < self.cfg.steps:
            loss = self.train_step()
            if callback is not None:
                callback(self, loss)
            if self.cfg.eval_every and self.step % self.cfg.eval_every == 0:
                self._evaluate_and_keep_best()
            if self.out_dir and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                self.save(self.out_dir / "last.ltck")
        if self.out_dir:
            self.save(self.out_dir / "last.ltck")
            if not self.cfg.eval_every:
                self.save(self.out_dir / "best.ltck")
        return self.history

    def _evaluate_and_keep_best(self) -> None:
        pairs = self.val_pairs or self.pairs
        err = evaluate(self.model, pairs).mean
        self.history.evals.append((self.step, err))
        log.info("step %d: loss %.4f corner error %.4f px", self.step, self.history.losses[-1], err)
        if err < self.best:
            self.best = err
            if self.out_dir:
                self.save(self.out_dir / "best.ltck")

    def save(self, path: PathLike) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        save_model(path, self.model, self.optimizer, self.step)

    def restore(self, state: dict) -> None:
        self.model.load_state_dict({k[6:]: v for k, v in state.items() if k.startswith("model.")})
        self.optimizer.load_state_dict(state)
        self.step = int(state["train.step"][0])


def _group_of(message: str) -> str:
    for token in message.replace(",", " ").split():
        head = token.split(".", 1)[0]
        if head in ("encoder",) or head[:4] in ("saem", "head") or head[:3] == "tdm":
            return head
    return "forward"

