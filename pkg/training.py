from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import filelock
import numpy as np

from dataio import Batch, Dataset, DatasetManifest, batch_iter, save_checkpoint
from log import add_file_handler, logger, remove_handler
from metrics import evaluate_split
from model import AblationFlags, ModelConfig, ModelParams, encode_captions, encode_images, similarity
from numerics import (
    AdamState,
    DimensionError,
    NumericError,
    Tensor,
    adam_step,
    backward,
    gather,
    max_over_axis,
    reshape,
    stack,
    zero_grad,
)
from settings import (
    BASE_LR,
    BATCH_SIZE,
    CHECKPOINT_EVERY,
    EMBED_DIM,
    EPOCHS,
    FF_MULT,
    HEADS,
    HIDDEN_DIM,
    LR_DECAY_PERIOD,
    MARGIN,
    POST_LAYERS,
    PRE_LAYERS,
)
from utils import ConfigError, append_json_line, check_keys, dump_json, load_json, lock_path

TRAIN_LOG = "train.log"
TRAIN_LOG_JSONL = "train_log.jsonl"
FINAL_CHECKPOINT = "final.ckpt"


@dataclass
class TrainConfig:
    dataset: str = ""
    output_dir: str = "runs/cpfean"
    margin: float = MARGIN
    lr: float = BASE_LR
    epochs: int = EPOCHS
    batch_size: int = BATCH_SIZE
    decay_period: int = LR_DECAY_PERIOD
    seed: int = 0
    ablate_csf: bool = False
    ablate_pti: bool = False
    ablate_tgr: bool = False
    normalize_affinity: bool = True
    embed_dim: int = EMBED_DIM
    hidden_dim: int = HIDDEN_DIM
    pre_layers: int = PRE_LAYERS
    post_layers: int = POST_LAYERS
    heads: int = HEADS
    ff_mult: int = FF_MULT
    checkpoint_every: int = CHECKPOINT_EVERY
    target_rsum: Optional[float] = None
    fusion_floor: Optional[float] = None

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        raw = load_json(path)
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        check_keys(raw, {f.name for f in fields(cls)}, path)
        config = cls(**raw)
        config.validate()
        return config

    def validate(self) -> None:
        if self.margin < 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        for key in ("batch_size", "epochs", "decay_period", "embed_dim", "hidden_dim", "heads", "ff_mult"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        for key in ("pre_layers", "post_layers", "checkpoint_every"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0, got {getattr(self, key)}")

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def flags(self) -> AblationFlags:
        return AblationFlags(
            no_csf=self.ablate_csf,
            no_pti=self.ablate_pti,
            no_tgr=self.ablate_tgr,
            literal_affinity=not self.normalize_affinity,
            fusion_floor=self.fusion_floor,
        )

    def model_config(self, manifest: DatasetManifest) -> ModelConfig:
        return ModelConfig(
            d_region=manifest.d_region,
            d_word=manifest.d_word,
            embed_dim=self.embed_dim,
            hidden_dim=self.hidden_dim,
            pre_layers=self.pre_layers,
            post_layers=self.post_layers,
            heads=self.heads,
            ff_mult=self.ff_mult,
        )


def batch_similarity(batch: Batch, params: ModelParams, flags: Optional[AblationFlags] = None) -> Tensor:
    """S [B x B] with S[a, b] = s(caption a, image of caption b); the diagonal holds the positives.

    Every distinct image in the batch is encoded once.
    """
    flags = flags or AblationFlags()
    V = encode_images(batch.images, params, flags)
    T = encode_captions(batch.captions, params, flags)
    C = stack([stack([similarity(T_a, V_u, params, flags) for V_u in V]) for T_a in T])
    B = len(batch)
    rows = np.repeat(np.arange(B), B)
    cols = np.tile(np.asarray(batch.image_index), B)
    return reshape(gather(C, rows, cols), (B, B))


def _off_diagonal(S: Tensor, transpose: bool = False) -> Tensor:
    # row a lists S[a, b] (or S[b, a]) for every b != a, in order
    B = S.shape[0]
    rows = np.repeat(np.arange(B), B - 1)
    cols = np.array([b for a in range(B) for b in range(B) if b != a])
    if transpose:
        rows, cols = cols, rows
    return reshape(gather(S, rows, cols), (B, B - 1))


def triplet_loss_hard(S: Tensor, margin: float = MARGIN) -> Tensor:
    """Sum over positives of the hinge against the hardest negative, in both directions"""
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"triplet loss needs a square similarity matrix, got {S.shape}")
    B = S.shape[0]
    if B < 2:
        return Tensor(0.0, dtype=S.dtype)
    positives = gather(S, np.arange(B), np.arange(B))
    hardest_image, _ = max_over_axis(_off_diagonal(S), axis=1)
    hardest_caption, _ = max_over_axis(_off_diagonal(S, transpose=True), axis=1)
    cost_image = (margin - positives + hardest_image).relu()
    cost_caption = (margin - positives + hardest_caption).relu()
    return (cost_image + cost_caption).sum()


def _epoch_record(epoch: int, loss: float, lr: float, report) -> dict:
    return {"epoch": epoch, "loss": loss, "lr": lr, **report.to_dict()}


def fit(dataset: Dataset, config: TrainConfig, validation: Optional[Dataset] = None) -> tuple[ModelParams, list]:
    """Train from a fresh seeded initialisation; returns the final parameters and one record per epoch"""
    config.validate()
    out = config.out
    out.mkdir(parents=True, exist_ok=True)

    instance_check = filelock.FileLock(lock_path(out / "run"))
    with instance_check.acquire(timeout=0):
        handler = add_file_handler(out / TRAIN_LOG)
        try:
            return _fit(dataset, config, validation or dataset, out)
        finally:
            remove_handler(handler)


def _fit(dataset: Dataset, config: TrainConfig, validation: Dataset, out: Path) -> tuple[ModelParams, list]:
    flags = config.flags()
    params = ModelParams.init(config.model_config(dataset.manifest), config.seed)
    state = AdamState(base_lr=config.lr, decay_period=config.decay_period)
    weights = params.parameters()

    jsonl = out / TRAIN_LOG_JSONL
    jsonl.unlink(missing_ok=True)
    dump_json(asdict(config), out / "config.json")
    logger.info(
        f"Training on {dataset.manifest.num_captions} captions / {dataset.manifest.num_images} images, "
        f"{params.num_weights()} weights, flags [{flags.label}], {config.epochs} epochs"
    )

    history = []
    for epoch in range(config.epochs):
        losses = []
        for b, batch in enumerate(batch_iter(dataset.captions, dataset.images, config.batch_size, config.seed, epoch)):
            zero_grad(weights)
            loss = triplet_loss_hard(batch_similarity(batch, params, flags), config.margin)
            value = loss.item()
            if not np.isfinite(value):
                caption_ids = ", ".join(cap.id for cap in batch.captions)
                raise NumericError(f"loss is {value} at epoch {epoch + 1}, batch {b + 1} (captions {caption_ids})")
            backward(loss).reset()
            adam_step(state, weights, epoch)
            losses.append(value)
            logger.debug(f"epoch {epoch + 1} batch {b + 1}: loss {value:.6f}")

        report = evaluate_split(validation, params, flags)
        record = _epoch_record(epoch + 1, float(np.mean(losses)), state.lr_at(epoch), report)
        history.append(record)
        append_json_line(record, jsonl)
        logger.info(
            f"Epoch {epoch + 1}/{config.epochs}: loss {record['loss']:.4f}, lr {record['lr']:.2e}, "
            f"{report.label} {report.rsum:.2f}"
        )

        if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(params, out / f"epoch_{epoch + 1}.ckpt")
        if config.target_rsum is not None and report.rsum >= config.target_rsum:
            logger.info(f"{report.label} {report.rsum:.2f} reached target {config.target_rsum:g}, stopping")
            break

    save_checkpoint(params, out / FINAL_CHECKPOINT)
    return params, history
