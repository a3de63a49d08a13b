"""Corpus loading, on-the-fly degradation batches, the joint loss, and the
Adam training loop with its halving learning-rate schedule.

Each batch sample degrades a full HR image with a freshly drawn kernel,
crops an aligned LR/HR patch pair, augments (horizontal flip, 90-degree
rotations), and attaches the bicubic-upsampled input plus the detail label
(HR minus upsampled input) used by the detail half of the loss.
"""

from __future__ import annotations

import logging
import queue
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .degradation import crop_to_multiple, degrade, sample_training_spec
from .imaging import Image, load_image, resize_array
from .model import Dssr, DssrConfig, save_checkpoint, StepOutput
from .variants import build_model, load_checkpoint

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

CSV_HEADER = "iter,lr,detail_loss,sr_loss,total\n"


@dataclass
class TrainConfig:
    alpha: float = 1.0
    lr0: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.99)
    total_iters: int = 20000
    lr_halve_every: int = 4000
    batch: int = 8
    lr_patch: int = 64
    kernel_kind: str = "isotropic"
    scale: int = 2
    seed: int = 0
    workers: int = 0
    log_every: int = 100
    checkpoint_every: int = 5000
    fixed_batch: bool = False  # overfit mode: reuse the first batch forever

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.lr_patch < self.scale:
            raise ValueError("lr_patch must be >= scale")
        if self.kernel_kind not in ("isotropic", "anisotropic"):
            raise ValueError(f"unknown kernel_kind {self.kernel_kind!r}")
        if self.scale not in (2, 3, 4):
            raise ValueError("scale must be 2, 3 or 4")
        if self.total_iters < 1 or self.lr_halve_every < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.workers < 0:
            raise ValueError("workers must be >= 0")


class Example(NamedTuple):
    lr: np.ndarray            # H x W x 3
    hr: np.ndarray            # sH x sW x 3
    ihat: np.ndarray          # sH x sW x 3
    detail_label: np.ndarray  # sH x sW x 3
    meta: dict


class Batch(NamedTuple):
    lr: np.ndarray            # B x 3 x H x W
    hr: np.ndarray            # B x 3 x sH x sW
    ihat: np.ndarray          # B x 3 x sH x sW
    detail_label: np.ndarray  # B x 3 x sH x sW
    meta: list


@dataclass
class TrainState:
    model: Dssr
    optimizer: torch.optim.Adam
    iteration: int
    history: list = field(default_factory=list)  # (iter, detail, sr, total)


class TrainingDiverged(RuntimeError):
    pass


def learning_rate(cfg: TrainConfig, iteration: int) -> float:
    """Rate for a 1-based iteration: halved every lr_halve_every iterations."""
    return cfg.lr0 * 0.5 ** (iteration // cfg.lr_halve_every)


def load_corpus(hr_dir, min_hw: int) -> list[np.ndarray]:
    """Load every raster in a directory, skipping those below min_hw."""
    paths = sorted(p for p in Path(hr_dir).iterdir()
                   if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise ValueError(f"no images found in {hr_dir}")
    corpus = []
    for p in paths:
        img = load_image(p)
        if img.height < min_hw or img.width < min_hw:
            log.warning("skipping %s: %dx%d below minimum %d",
                        p.name, img.height, img.width, min_hw)
            continue
        if img.channels == 1:
            img = Image(np.repeat(img.data, 3, axis=2))
        corpus.append(img.data)
    if not corpus:
        raise ValueError(f"all images in {hr_dir} are smaller than {min_hw}")
    return corpus


def augment(lr, hr, flip: bool, rot: int):
    """Apply the same flip/rotation to an aligned LR/HR pair."""
    if flip:
        lr, hr = lr[:, ::-1], hr[:, ::-1]
    if rot:
        lr, hr = np.rot90(lr, rot), np.rot90(hr, rot)
    return lr, hr


def sample_example(corpus: list[np.ndarray], cfg: TrainConfig, rng) -> Example:
    """One aligned, augmented LR/HR patch pair from a freshly degraded image."""
    s, p = cfg.scale, cfg.lr_patch
    idx = int(rng.integers(0, len(corpus)))
    spec = sample_training_spec(s, cfg.kernel_kind, rng)
    hr_full = crop_to_multiple(Image(corpus[idx]), s)
    lr_full = degrade(hr_full, spec)
    y = int(rng.integers(0, lr_full.height - p + 1))
    x = int(rng.integers(0, lr_full.width - p + 1))
    flip = bool(rng.random() < 0.5)
    rot = int(rng.integers(0, 4))
    lr = lr_full.data[y:y + p, x:x + p]
    hr = hr_full.data[y * s:(y + p) * s, x * s:(x + p) * s]
    lr, hr = augment(lr, hr, flip, rot)
    ihat = resize_array(np.ascontiguousarray(lr), p * s, p * s)
    meta = {"image": idx, "spec": spec, "crop": (y, x), "flip": flip, "rot": rot}
    return Example(lr, hr, ihat, hr - ihat, meta)


def sample_batch(corpus: list[np.ndarray], cfg: TrainConfig, rng) -> Batch:
    """Draw one training batch of aligned, augmented LR/HR patch pairs."""
    if not corpus:
        raise ValueError("empty corpus")
    examples = [sample_example(corpus, cfg, rng) for _ in range(cfg.batch)]

    def stack(field):
        arrs = [getattr(e, field) for e in examples]
        return np.ascontiguousarray(np.stack(arrs).transpose(0, 3, 1, 2))

    return Batch(stack("lr"), stack("hr"), stack("ihat"), stack("detail_label"),
                 [e.meta for e in examples])


def loss_terms(outputs: list[StepOutput], hr: torch.Tensor, m_hr: torch.Tensor,
               alpha: float):
    """Joint objective: sum over steps of alpha * L1(detail) + L1(SR)."""
    if hr.shape != outputs[0].sr.shape or m_hr.shape != outputs[0].detail.shape:
        raise ValueError("label shapes do not match network outputs")
    details = [(m_hr - out.detail).abs().mean() for out in outputs]
    srs = [(hr - out.sr).abs().mean() for out in outputs]
    total = sum(alpha * d + s for d, s in zip(details, srs))
    return total, details, srs


def train_step(model: Dssr, optimizer, batch: Batch, alpha: float):
    """One optimization step; returns (total, detail_sum, sr_sum) as floats."""
    dtype = next(model.parameters()).dtype
    lr = torch.from_numpy(batch.lr).to(dtype)
    hr = torch.from_numpy(batch.hr).to(dtype)
    m_hr = torch.from_numpy(batch.detail_label).to(dtype)
    optimizer.zero_grad()
    total, details, srs = loss_terms(model(lr), hr, m_hr, alpha)
    total.backward()
    optimizer.step()
    return (float(total.detach()),
            float(sum(d.detach() for d in details)),
            float(sum(s.detach() for s in srs)))


def _batch_source(corpus, cfg, start_iter, data_rng=None):
    """Yield (iteration, Batch) pairs, optionally produced by worker threads.

    Worker w owns its own generator seeded from (seed, w) and produces the
    batches for iterations w, w + N, ... so any fixed worker count is
    deterministic; workers=0 generates synchronously from a single stream
    (resumable via a restored generator state).
    """
    if cfg.workers == 0:
        rng = np.random.default_rng(cfg.seed) if data_rng is None else data_rng
        for it in range(start_iter, cfg.total_iters):
            yield it, sample_batch(corpus, cfg, rng)
        return

    n = cfg.workers
    queues = [queue.Queue(maxsize=2) for _ in range(n)]
    stop = threading.Event()

    def produce(w):
        rng = np.random.default_rng([cfg.seed, w])
        it = start_iter + ((w - start_iter) % n)
        while it < cfg.total_iters and not stop.is_set():
            batch = sample_batch(corpus, cfg, rng)
            while not stop.is_set():
                try:
                    queues[w].put((it, batch), timeout=0.5)
                    break
                except queue.Full:
                    continue
            it += n

    threads = [threading.Thread(target=produce, args=(w,), daemon=True)
               for w in range(n)]
    for t in threads:
        t.start()
    try:
        for it in range(start_iter, cfg.total_iters):
            yield queues[it % n].get()
    finally:
        stop.set()


def train(cfg: TrainConfig, model_cfg: DssrConfig, corpus, out_dir,
          variant: str = "full_smu", resume_from=None) -> TrainState:
    """Run the optimization loop; writes CSV log and checkpoints to out_dir."""
    if isinstance(corpus, (str, Path)):
        corpus = load_corpus(corpus, cfg.lr_patch * cfg.scale)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.csv"

    start_iter = 0
    data_rng = np.random.default_rng(cfg.seed)
    if resume_from is not None:
        model, payload = load_checkpoint(resume_from)
        extra = payload.get("extra", {})
        start_iter = extra.get("iteration", 0)
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr0, betas=cfg.betas)
        if "optimizer" in extra:
            optimizer.load_state_dict(extra["optimizer"])
        if "data_rng" in extra:
            data_rng.bit_generator.state = extra["data_rng"]
        if not log_path.exists():
            log_path.write_text(CSV_HEADER)
        log.info("resuming from %s at iteration %d", resume_from, start_iter)
    else:
        model = build_model(model_cfg, cfg.seed, variant)
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr0, betas=cfg.betas)
        log_path.write_text(CSV_HEADER)

    state = TrainState(model, optimizer, start_iter)
    fixed = None
    if cfg.fixed_batch:
        fixed = sample_batch(corpus, cfg, np.random.default_rng(cfg.seed))

    def checkpoint(it):
        extra = {
            "iteration": it,
            "optimizer": optimizer.state_dict(),
            "train_config": asdict(cfg),
        }
        if cfg.workers == 0:
            # synchronous data path: the generator state makes resume exact
            extra["data_rng"] = data_rng.bit_generator.state
        save_checkpoint(model, out_dir / "last.pt", extra=extra)

    with open(log_path, "a") as log_file:
        source = _batch_source(corpus, cfg, start_iter, data_rng)
        for it, batch in (((i, fixed) for i in range(start_iter, cfg.total_iters))
                          if fixed is not None else source):
            rate = learning_rate(cfg, it + 1)
            for group in optimizer.param_groups:
                group["lr"] = rate
            total, detail_sum, sr_sum = train_step(model, optimizer, batch, cfg.alpha)
            if not np.isfinite(total):
                checkpoint(it)
                raise TrainingDiverged(
                    f"non-finite loss {total} at iteration {it} "
                    f"(lr={rate:g}, seed={cfg.seed}, batch meta={batch.meta[:2]})")
            state.iteration = it + 1
            if (it + 1) % cfg.log_every == 0 or it + 1 == cfg.total_iters:
                state.history.append((it + 1, detail_sum, sr_sum, total))
                log_file.write(f"{it + 1},{rate:.12g},{detail_sum:.12g},"
                               f"{sr_sum:.12g},{total:.12g}\n")
                log_file.flush()
            if (it + 1) % cfg.checkpoint_every == 0 or it + 1 == cfg.total_iters:
                checkpoint(it + 1)
    return state
