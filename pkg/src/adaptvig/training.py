"""Synthetic blob data and a seeded SGD-momentum training loop."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import model as M
from . import tensor as T
from .layers import named_parameters
from .tensor import Tensor

log = logging.getLogger(__name__)

NOISE_SIGMA = 0.1


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became {value} at step {step}")
        self.step = step


def synthetic_blobs(seed: int, n_samples: int, classes: int, h: int, w: int, channels: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Two-region images: background 0 plus a square foreground whose value
    and anchor quadrant depend on the class, with N(0, 0.1) pixel noise.

    Foreground values are 1, 2, ..., so class means sit 10 noise sigmas apart.
    """
    if classes < 2 or n_samples < 1 or h < 4 or w < 4:
        raise ValueError("need classes >= 2, n_samples >= 1 and images at least 4x4")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, n_samples)
    images = rng.normal(0.0, NOISE_SIGMA, (n_samples, channels, h, w))
    sh, sw = h // 2, w // 2
    for i, y in enumerate(labels):
        qr, qc = divmod(int(y) % 4, 2)
        r0 = min(qr * sh + int(rng.integers(0, max(1, h // 8) + 1)), h - sh)
        c0 = min(qc * sw + int(rng.integers(0, max(1, w // 8) + 1)), w - sw)
        images[i, :, r0 : r0 + sh, c0 : c0 + sw] += 1.0 + y
    return images, labels


def write_dataset(out_dir: str | Path, images: np.ndarray, labels: np.ndarray) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    img_path, lab_path = out / "images.avgt", out / "labels.csv"
    T.save_tensor(img_path, images)
    with open(lab_path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["index", "label"])
        wr.writerows((i, int(y)) for i, y in enumerate(labels))
    return img_path, lab_path


def read_dataset(images_path: str | Path, labels_path: str | Path | None = None) -> tuple[np.ndarray, np.ndarray]:
    images = T.load_tensor(images_path)
    labels_path = Path(labels_path) if labels_path else Path(images_path).with_name("labels.csv")
    with open(labels_path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    if len(labels) != images.shape[0]:
        raise ValueError(f"{len(labels)} labels for {images.shape[0]} images")
    return images, labels


@dataclass
class TrainConfig:
    model: M.ModelConfig = field(default_factory=M.toy_config)
    optimizer: str = "sgd_momentum"
    learning_rate: float = 0.05
    momentum: float = 0.9
    steps: int = 200
    batch_size: int = 32
    seed: int = 0
    dataset: str = "synthetic_blobs"
    log_interval: int = 10
    # synthetic_blobs draws n_samples images of size h x w; tensor_file reads data_path
    n_samples: int = 200
    h: int = 16
    w: int = 16
    data_path: str | None = None

    def __post_init__(self):
        if self.optimizer != "sgd_momentum":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.steps < 1 or self.batch_size < 1 or self.log_interval < 1:
            raise ValueError("steps, batch_size and log_interval must be >= 1")
        if self.dataset not in ("synthetic_blobs", "tensor_file"):
            raise ValueError(f"unknown dataset kind {self.dataset!r}")
        if self.dataset == "tensor_file" and not self.data_path:
            raise ValueError("dataset 'tensor_file' needs data_path")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        if isinstance(d.get("model"), dict):
            d["model"] = M.ModelConfig.from_dict(d["model"])
        return cls(**d)

    def load_data(self) -> tuple[np.ndarray, np.ndarray]:
        if self.dataset == "tensor_file":
            return read_dataset(self.data_path)
        return synthetic_blobs(self.seed, self.n_samples, self.model.num_classes, self.h, self.w, self.model.in_channels)


class SGDMomentum:
    """v <- momentum * v + g;  p <- p - lr * v."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v


@dataclass
class TrainResult:
    params: M.ModelParams
    history: list[dict]

    @property
    def initial(self) -> dict:
        return self.history[0]

    @property
    def final(self) -> dict:
        return self.history[-1]

    def temperatures(self) -> list[float]:
        return [g.value for g in self.params.gatings()]


def evaluate(cfg: M.ModelConfig, params: M.ModelParams, images: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    logits = M.model_forward(Tensor(images), cfg, params)
    loss = T.cross_entropy(logits, labels).item()
    acc = float((logits.data.argmax(axis=1) == labels).mean())
    return loss, acc


def train(cfg: TrainConfig, images: np.ndarray, labels: np.ndarray) -> TrainResult:
    """Minibatch SGD; full-dataset loss, accuracy and every block's T are
    recorded at step 0, every ``log_interval`` steps and at the last step."""
    mcfg = cfg.model
    mcfg.check_input(*images.shape[2:])
    if labels.max() >= mcfg.num_classes:
        raise ValueError(f"label {labels.max()} out of range for {mcfg.num_classes} classes")
    params = M.init_model(mcfg, seed=cfg.seed)
    opt = SGDMomentum([p for _, p in named_parameters(params)], cfg.learning_rate, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    n = len(labels)
    bs = min(cfg.batch_size, n)
    order, cursor = rng.permutation(n), 0
    history: list[dict] = []

    def record(step: int) -> None:
        loss, acc = evaluate(mcfg, params, images, labels)
        if not np.isfinite(loss):
            raise NonFiniteLoss(step, loss)
        row = {"step": step, "loss": loss, "accuracy": acc}
        row.update({f"T{i}": g.value for i, g in enumerate(params.gatings())})
        history.append(row)
        log.info("step %d loss %.6f acc %.4f", step, loss, acc)

    record(0)
    for step in range(1, cfg.steps + 1):
        if cursor + bs > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor : cursor + bs]
        cursor += bs
        opt.zero_grad()
        loss = T.cross_entropy(M.model_forward(Tensor(images[idx]), mcfg, params), labels[idx])
        if not np.isfinite(loss.item()):
            raise NonFiniteLoss(step, loss.item())
        T.backward(loss)
        opt.step()
        if step % cfg.log_interval == 0 or step == cfg.steps:
            record(step)
    return TrainResult(params, history)


def flatten_params(params) -> tuple[np.ndarray, list[dict]]:
    chunks, index, offset = [], [], 0
    for name, p in named_parameters(params):
        chunks.append(p.data.reshape(-1))
        index.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += p.size
    return np.concatenate(chunks), index


def write_run(out_dir: str | Path, cfg: TrainConfig, result: TrainResult) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": out / "metrics.csv",
        "params": out / "params.avgt",
        "index": out / "params_index.json",
        "config": out / "config.json",
    }
    columns = list(result.history[0].keys())
    with open(paths["metrics"], "w", newline="", encoding="utf-8") as fh:
        wr = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        wr.writeheader()
        for row in result.history:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    flat, index = flatten_params(result.params)
    T.save_tensor(paths["params"], flat.reshape(1, 1, 1, -1))
    paths["index"].write_text(json.dumps(index, indent=1) + "\n", encoding="utf-8")
    paths["config"].write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
    return paths
