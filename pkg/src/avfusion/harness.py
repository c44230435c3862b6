"""Run orchestration: config parsing, training with ablation augmentation,
evaluation sweeps over corruption probabilities, gradient self-check, and
sweep-CSV merging.

Everything here is deterministic given the config seeds: shuffling, ablation
masks, and sweep corruption all draw from derived RNG streams keyed by stable
indices (epoch, window position), never by wall clock or iteration order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import AblationSpec, ablate_sequence
from .data import (
    Dataset,
    SyntheticConfig,
    Window,
    apply_norm,
    fit_norm,
    sync_clip,
    window_clips,
)
from .metrics import EvalSummary, ccc_loss, eval_summary
from .model import (
    ModelConfig,
    clone_params,
    init_params,
    model_forward,
    save_checkpoint,
)
from .seeding import derive_rng, mix_seed

SWEEP_HEADER = "strategy,modality,probability,seed,ccc_valence,ccc_arousal"
DEFAULT_GRIDS = {
    "clip_zero": (1.0, 0.7, 0.5, 0.3, 0.0),
    "frame_zero": (1.0, 0.95, 0.90, 0.85, 0.0),
    "frame_repeat": (1.0, 0.95, 0.90, 0.85, 0.0),
    "none": (0.0,),
}


class ConfigError(ValueError):
    """Invalid run configuration; message names the offending key."""


class DimensionMismatchError(ValueError):
    """Data feature dims disagree with the model config or checkpoint."""


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class TrainParams:
    epochs: int
    lr: float = 1e-4
    batch_size: int = 16
    seq_len: int = 100
    seed: int = 0


@dataclass
class SplitFractions:
    train: float = 0.8
    val: float = 0.2


@dataclass
class RunConfig:
    train: TrainParams
    model: dict = field(default_factory=dict)       # architecture keys of ModelConfig
    ablation: AblationSpec = AblationSpec("none", "video", 0.0, 0)
    data: SyntheticConfig | None = None
    data_path: str | None = None
    splits: SplitFractions = field(default_factory=SplitFractions)


def _check_keys(section: str, obj: dict, allowed: set[str]) -> None:
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in section {section!r}")


def synthetic_config_from_dict(obj: dict) -> SyntheticConfig:
    if not isinstance(obj, dict):
        raise ConfigError("data section must be a JSON object")
    allowed = {"n_clips", "clip_seconds", "d_audio_lld", "d_video",
               "sigma_audio", "sigma_video", "rho", "seed"}
    _check_keys("data", obj, allowed)
    for required in ("n_clips", "clip_seconds"):
        if required not in obj:
            raise ConfigError(f"data.{required} is required")
    try:
        return SyntheticConfig(**obj)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def ablation_from_dict(obj: dict) -> AblationSpec:
    _check_keys("ablation", obj, {"strategy", "modality", "probability", "seed"})
    if "strategy" not in obj:
        raise ConfigError("ablation.strategy is required")
    try:
        return AblationSpec(strategy=obj["strategy"],
                            modality=obj.get("modality", "video"),
                            probability=float(obj.get("probability", 0.5)),
                            seed=int(obj.get("seed", 0)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def run_config_from_dict(obj: dict) -> RunConfig:
    _check_keys("run", obj, {"model", "train", "ablation", "data", "splits"})
    train_obj = obj.get("train", {})
    _check_keys("train", train_obj, {"lr", "epochs", "batch_size", "seq_len", "seed"})
    if "epochs" not in train_obj:
        raise ConfigError("train.epochs is required")
    train = TrainParams(epochs=int(train_obj["epochs"]),
                        lr=float(train_obj.get("lr", 1e-4)),
                        batch_size=int(train_obj.get("batch_size", 16)),
                        seq_len=int(train_obj.get("seq_len", 100)),
                        seed=int(train_obj.get("seed", 0)))
    if train.lr <= 0:
        raise ConfigError("train.lr must be > 0")
    if train.epochs < 1:
        raise ConfigError("train.epochs must be >= 1")
    if train.batch_size < 1:
        raise ConfigError("train.batch_size must be >= 1")

    model_obj = dict(obj.get("model", {}))
    _check_keys("model", model_obj,
                {"num_layers", "d_model", "num_heads", "ffn_mult", "d_audio", "d_video", "seq_len"})

    splits_obj = obj.get("splits", {})
    _check_keys("splits", splits_obj, {"train", "val"})
    splits = SplitFractions(train=float(splits_obj.get("train", 0.8)),
                            val=float(splits_obj.get("val", 0.2)))
    if splits.train <= 0 or splits.val <= 0 or splits.train + splits.val > 1.0 + 1e-9:
        raise ConfigError("splits.train/splits.val must be positive with sum <= 1")

    ablation = (ablation_from_dict(obj["ablation"]) if "ablation" in obj
                else AblationSpec("none", "video", 0.0, 0))

    data_cfg = None
    data_path = None
    if "data" in obj:
        data_obj = obj["data"]
        if isinstance(data_obj, dict) and "path" in data_obj:
            _check_keys("data", data_obj, {"path"})
            data_path = str(data_obj["path"])
        else:
            data_cfg = synthetic_config_from_dict(data_obj)

    return RunConfig(train=train, model=model_obj, ablation=ablation,
                     data=data_cfg, data_path=data_path, splits=splits)


def load_run_config(path) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    return run_config_from_dict(obj)


# ---------------------------------------------------------------------------
# data preparation


@dataclass
class PreparedData:
    train_windows: list[Window]
    val_windows: list[Window]
    d_audio: int
    d_video: int


def prepare_data(dataset: Dataset, splits: SplitFractions, seq_len: int) -> PreparedData:
    """Split clips, fit normalization on train, sync, and window both splits."""
    n = len(dataset.clips)
    n_train = int(n * splits.train)
    n_val = int(n * splits.val)
    if n_train < 1 or n_val < 1:
        raise ConfigError(f"splits leave an empty partition ({n_train} train / {n_val} val "
                          f"clips from {n})")
    train_clips = dataset.clips[:n_train]
    val_clips = dataset.clips[n_train:n_train + n_val]
    stats = fit_norm(train_clips)
    train_synced = [sync_clip(apply_norm(c, stats)) for c in train_clips]
    val_synced = [sync_clip(apply_norm(c, stats)) for c in val_clips]
    train_windows = window_clips(train_synced, seq_len)
    val_windows = window_clips(val_synced, seq_len, evaluation=True)
    if not train_windows or not val_windows:
        raise ConfigError("no usable windows: clips shorter than seq_len")
    return PreparedData(train_windows, val_windows,
                        d_audio=train_windows[0].audio.shape[1],
                        d_video=train_windows[0].video.shape[1])


def model_config_for(run: RunConfig, prep: PreparedData) -> ModelConfig:
    spec = dict(run.model)
    for dim, have in (("d_audio", prep.d_audio), ("d_video", prep.d_video),
                      ("seq_len", run.train.seq_len)):
        if dim in spec and spec[dim] != have:
            raise DimensionMismatchError(f"config {dim}={spec[dim]} but data provides {have}")
        spec[dim] = have
    try:
        return ModelConfig(**spec)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    ccc_valence: float
    ccc_arousal: float


@dataclass
class TrainResult:
    params: dict
    config: ModelConfig
    log: list[EpochLog]
    best_epoch: int


_EVAL_CHUNK = 32  # windows per batched inference call


def evaluate_windows(params: dict, config: ModelConfig, windows: list[Window]) -> EvalSummary:
    """Global CCC over every scored frame of the given windows."""
    preds, golds = [], []
    t = config.seq_len
    for at in range(0, len(windows), _EVAL_CHUNK):
        chunk = windows[at:at + _EVAL_CHUNK]
        audio = np.concatenate([w.audio for w in chunk])
        video = np.concatenate([w.video for w in chunk])
        out = model_forward(ad.Tensor(audio), ad.Tensor(video), params, config,
                            batch=len(chunk)).data
        for i, w in enumerate(chunk):
            preds.append(out[i * t + w.score_from:(i + 1) * t])
            golds.append(w.labels[w.score_from:])
    return eval_summary(np.concatenate(preds), np.concatenate(golds))


def _ablated_window_inputs(w: Window, spec: AblationSpec, stream_index: int):
    audio, video = w.audio, w.video
    if spec.strategy != "none":
        if spec.modality == "audio":
            audio = ablate_sequence(audio, spec, stream_index)
        else:
            video = ablate_sequence(video, spec, stream_index)
    return audio, video


def train_on_prepared(run: RunConfig, prep: PreparedData) -> TrainResult:
    config = model_config_for(run, prep)
    params = init_params(config, run.train.seed)
    plist = list(params.values())
    state = ad.AdamState.for_params(plist)
    best_params = clone_params(params)
    best_metric = -np.inf
    best_epoch = 0
    log: list[EpochLog] = []
    for epoch in range(run.train.epochs):
        order = derive_rng(run.train.seed, epoch).permutation(len(prep.train_windows))
        epoch_spec = replace(run.ablation, seed=mix_seed(run.ablation.seed, epoch))
        losses = []
        for at in range(0, len(order), run.train.batch_size):
            batch = order[at:at + run.train.batch_size]
            for p in plist:
                p.zero_grad()
            audios, videos, golds = [], [], []
            for widx in batch:
                w = prep.train_windows[widx]
                audio, video = _ablated_window_inputs(w, epoch_spec, int(widx))
                audios.append(audio)
                videos.append(video)
                golds.append(w.labels)
            pred = model_forward(ad.Tensor(np.concatenate(audios)),
                                 ad.Tensor(np.concatenate(videos)),
                                 params, config, batch=len(batch))
            loss = ccc_loss(pred, np.concatenate(golds))
            ad.backward(loss)
            ad.adam_step(plist, [p.grad for p in plist], state, run.train.lr)
            losses.append(float(loss.data))
        summary = evaluate_windows(params, config, prep.val_windows)
        log.append(EpochLog(epoch, float(np.mean(losses)),
                            summary.ccc_valence, summary.ccc_arousal))
        if summary.mean_ccc() > best_metric:
            best_metric = summary.mean_ccc()
            best_params = clone_params(params)
            best_epoch = epoch
    return TrainResult(best_params, config, log, best_epoch)


def train(run: RunConfig, dataset: Dataset) -> TrainResult:
    return train_on_prepared(run, prepare_data(dataset, run.splits, run.train.seq_len))


def write_train_log(log: list[EpochLog], path) -> None:
    lines = ["epoch,train_loss,val_ccc_valence,val_ccc_arousal"]
    for row in log:
        lines.append(f"{row.epoch},{float(row.train_loss)!r},"
                     f"{float(row.ccc_valence)!r},{float(row.ccc_arousal)!r}")
    Path(path).write_text("\n".join(lines) + "\n", "utf-8")


# ---------------------------------------------------------------------------
# evaluation sweep


@dataclass
class SweepResult:
    strategy: str
    modality: str
    probability: float
    seed: int
    ccc_valence: float
    ccc_arousal: float


def corrupt_windows(windows: list[Window], spec: AblationSpec) -> list[Window]:
    """Corrupt each window's target modality; streams keyed by window position."""
    out = []
    for i, w in enumerate(windows):
        audio, video = _ablated_window_inputs(w, spec, i)
        out.append(replace(w, audio=audio, video=video))
    return out


def run_sweep(params: dict, config: ModelConfig, val_windows: list[Window],
              strategy: str, modality: str, probs: list[float], seed: int) -> list[SweepResult]:
    results = []
    for p in probs:
        spec = AblationSpec(strategy, modality, float(p), seed)
        summary = evaluate_windows(params, config, corrupt_windows(val_windows, spec))
        results.append(SweepResult(strategy, modality, float(p), seed,
                                   summary.ccc_valence, summary.ccc_arousal))
    return results


def write_sweep_csv(rows: list[SweepResult], path) -> None:
    lines = [SWEEP_HEADER]
    for r in rows:
        lines.append(f"{r.strategy},{r.modality},{float(r.probability)!r},{r.seed},"
                     f"{float(r.ccc_valence)!r},{float(r.ccc_arousal)!r}")
    Path(path).write_text("\n".join(lines) + "\n", "utf-8")


# ---------------------------------------------------------------------------
# gradient self-check


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    worst_param: str
    tolerance: float = 1e-4


def gradcheck(seed: int, h: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of the full CCC training loss against
    central finite differences for every parameter of a small model."""
    config = ModelConfig(d_audio=5, d_video=4, num_layers=1, d_model=8,
                         num_heads=2, ffn_mult=2, seq_len=6)
    params = init_params(config, seed)
    rng = derive_rng(seed, 0)
    audio = rng.uniform(-1.0, 1.0, (config.seq_len, config.d_audio))
    video = rng.uniform(-1.0, 1.0, (config.seq_len, config.d_video))
    gold = rng.uniform(-1.0, 1.0, (config.seq_len, 2))

    def loss_value() -> float:
        pred = model_forward(ad.Tensor(audio), ad.Tensor(video), params, config)
        return float(ccc_loss(pred, gold).data)

    pred = model_forward(ad.Tensor(audio), ad.Tensor(video), params, config)
    ad.backward(ccc_loss(pred, gold))

    worst_err, worst_name = 0.0, ""
    for name, p in params.items():
        fd = np.zeros_like(p.data)
        flat, fd_flat = p.data.ravel(), fd.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            fd_flat[i] = (up - down) / (2.0 * h)
        err = np.max(np.abs(p.grad - fd)) / max(np.max(np.abs(fd)), 1e-8)
        if err > worst_err:
            worst_err, worst_name = float(err), name
    return GradCheckReport(worst_err < tolerance, worst_err, worst_name, tolerance)


# ---------------------------------------------------------------------------
# report merging


class ReportError(ValueError):
    pass


def _parse_float(text: str, where: str) -> float:
    try:
        return float(text)
    except ValueError as exc:
        raise ReportError(f"bad number {text!r} in {where}") from exc


def read_sweep_results(path) -> dict[str, dict[tuple, tuple[float, float]]]:
    """Parse one CSV into {model label: {(strategy, modality, p): (ccc_v, ccc_a)}}.

    Accepts both the single-model sweep format and the merged multi-model
    format, so merged output can be re-merged unchanged.
    """
    lines = [ln for ln in Path(path).read_text("utf-8").splitlines() if ln]
    if not lines:
        raise ReportError(f"{path}: empty CSV")
    header = lines[0].split(",")
    rows = [ln.split(",") for ln in lines[1:]]
    if lines[0] == SWEEP_HEADER:
        label = Path(path).stem
        acc: dict[tuple, list[tuple[float, float]]] = {}
        for row in rows:
            if len(row) != 6:
                raise ReportError(f"{path}: malformed row {row!r}")
            key = (row[0], row[1], _parse_float(row[2], str(path)))
            acc.setdefault(key, []).append((_parse_float(row[4], str(path)),
                                            _parse_float(row[5], str(path))))
        merged = {key: (float(np.mean([v for v, _ in vals])),
                        float(np.mean([a for _, a in vals])))
                  for key, vals in acc.items()}
        return {label: merged}
    if header[:3] == ["strategy", "modality", "probability"]:
        value_cols = header[3:]
        labels = []
        for col in value_cols[::2]:
            if not col.endswith("_ccc_valence"):
                raise ReportError(f"{path}: unexpected merged column {col!r}")
            labels.append(col[: -len("_ccc_valence")])
        models: dict[str, dict[tuple, tuple[float, float]]] = {lbl: {} for lbl in labels}
        for row in rows:
            key = (row[0], row[1], _parse_float(row[2], str(path)))
            for j, lbl in enumerate(labels):
                v = _parse_float(row[3 + 2 * j], str(path))
                a = _parse_float(row[4 + 2 * j], str(path))
                models[lbl][key] = (v, a)
        return models
    raise ReportError(f"{path}: unrecognized CSV header {lines[0]!r}")


def merge_reports(paths) -> tuple[list[str], list[tuple], dict]:
    """Merge sweep CSVs keyed by (strategy, modality, probability).

    Returns (model labels in input order, sorted keys, {label: {key: (v, a)}}).
    Raises ReportError listing missing keys when the grids are inconsistent.
    """
    if not paths:
        raise ReportError("report needs at least one CSV")
    models: dict[str, dict[tuple, tuple[float, float]]] = {}
    for path in paths:
        for label, table in read_sweep_results(path).items():
            if label in models:
                raise ReportError(f"duplicate model label {label!r}")
            models[label] = table
    all_keys = sorted({k for table in models.values() for k in table},
                      key=lambda k: (k[0], k[1], -k[2]))
    problems = []
    for label, table in models.items():
        missing = [k for k in all_keys if k not in table]
        if missing:
            problems.append(f"{label} missing {', '.join(map(str, missing))}")
    if problems:
        raise ReportError("inconsistent probability grids: " + "; ".join(problems))
    return list(models), all_keys, models


def write_merged_csv(labels: list[str], keys: list[tuple], models: dict, path) -> None:
    header = ["strategy", "modality", "probability"]
    for label in labels:
        header += [f"{label}_ccc_valence", f"{label}_ccc_arousal"]
    lines = [",".join(header)]
    for key in keys:
        cells = [key[0], key[1], repr(float(key[2]))]
        for label in labels:
            v, a = models[label][key]
            cells += [repr(float(v)), repr(float(a))]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", "utf-8")


def format_merged_table(labels: list[str], keys: list[tuple], models: dict) -> str:
    """Plain-text aligned comparison table."""
    header = ["strategy", "modality", "p"]
    for label in labels:
        header += [f"{label}:V", f"{label}:A"]
    body = []
    for key in keys:
        row = [key[0], key[1], f"{key[2]:g}"]
        for label in labels:
            v, a = models[label][key]
            row += [f"{v:+.4f}", f"{a:+.4f}"]
        body.append(row)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    return "\n".join(fmt.format(*row) for row in [header] + body)


# ---------------------------------------------------------------------------
# checkpoint-facing helpers used by the CLI


def save_train_result(result: TrainResult, path) -> None:
    save_checkpoint(result.params, result.config, path)


def check_data_matches_config(config: ModelConfig, prep: PreparedData) -> None:
    if config.d_audio != prep.d_audio or config.d_video != prep.d_video:
        raise DimensionMismatchError(
            f"checkpoint expects audio {config.d_audio} / video {config.d_video} dims, "
            f"data provides {prep.d_audio} / {prep.d_video}")
