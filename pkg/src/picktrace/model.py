"""Per-timestep Pick/NoPick segmentation network and its training loop.

The network is a U-shaped 1-D encoder-decoder: five conv stages whose
pooling factors multiply to 384, mirrored by nearest-neighbor upsampling
in reverse order, with skip concatenation at equal temporal resolution
ahead of each upsample. A two-layer BiLSTM plus one LSTM runs on the
restored full-resolution features, and a two-conv head (tanh, then
softmax over 2 classes) emits per-timestep probabilities. Input length is
therefore any positive multiple of 384.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .annotate import FeatureFrame, LabelSequence, derive_speed
from .errors import (
    ConfigInvalid,
    FeatureMismatch,
    InsufficientWindows,
    NoLabeledData,
    ShapeMismatch,
    UnknownDate,
)
from .evaluate import ConfusionCounts, PRFScores, confusion, mean_scores, precision_recall_f1
from .ingest import NOPICK, PICK, CartSession

MIN_SEQ_LEN = 384  # cumulative pooling factor of the encoder

FEATURE_SETS = {
    "velocity": ("speed",),
    "accel": ("ax", "ay", "az"),
    "mass": ("mass",),
    "mass+accel": ("mass", "ax", "ay", "az"),
    "mass+accel+velocity": ("mass", "ax", "ay", "az", "speed"),
}

_FEATURE_ALIASES = {"all": "mass+accel+velocity", "imu": "accel"}
_TOKEN_ORDER = ("mass", "accel", "velocity")


def normalize_feature_set(name: str) -> str:
    """Canonicalize a feature-set name; commas work like plus signs."""
    name = name.strip().lower().replace(",", "+")
    name = _FEATURE_ALIASES.get(name, name)
    if name in FEATURE_SETS:
        return name
    tokens = [t.strip() for t in name.split("+") if t.strip()]
    unknown = [t for t in tokens if t not in _TOKEN_ORDER]
    if unknown or not tokens:
        raise ConfigInvalid(f"unknown feature set {name!r}; choose from {sorted(FEATURE_SETS)}")
    canonical = "+".join(t for t in _TOKEN_ORDER if t in tokens)
    if canonical not in FEATURE_SETS:
        raise ConfigInvalid(f"unsupported feature combination {name!r}")
    return canonical


def feature_channels(name: str) -> tuple:
    return FEATURE_SETS[normalize_feature_set(name)]


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 4
    seq_len: int = 768
    encoder_channels: tuple = (16, 32, 64, 128, 256)
    pool_factors: tuple = (1, 8, 6, 4, 2)
    up_factors: tuple = (2, 4, 6, 8)
    kernel: int = 9
    bilstm_units: tuple = (64, 32)
    lstm_units: int = 16
    head_hidden_channels: int = 16
    classes: int = 2
    strict: bool = True  # pin the reference stage widths

    def validate(self):
        if not 1 <= self.in_channels <= 5:
            raise ConfigInvalid(f"in_channels must be 1..5, got {self.in_channels}")
        if len(self.encoder_channels) != 5 or len(self.pool_factors) != 5:
            raise ConfigInvalid("encoder needs exactly 5 stages")
        if len(self.up_factors) != 4:
            raise ConfigInvalid("decoder needs exactly 4 stages")
        pool_prod = math.prod(self.pool_factors)
        if pool_prod != math.prod(self.up_factors):
            raise ConfigInvalid("pooling and upsampling factor products must match")
        if self.seq_len <= 0 or self.seq_len % pool_prod != 0:
            raise ConfigInvalid(f"seq_len must be a positive multiple of {pool_prod}, got {self.seq_len}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigInvalid("kernel must be odd so length-preserving padding exists")
        if any(c < 1 for c in self.encoder_channels) or self.lstm_units < 1:
            raise ConfigInvalid("channel and unit counts must be positive")
        if self.classes != 2:
            raise ConfigInvalid("this segmenter is two-class")
        if self.strict:
            reference = {
                "encoder_channels e2..e5": (tuple(self.encoder_channels[1:]), (32, 64, 128, 256)),
                "pool_factors": (tuple(self.pool_factors), (1, 8, 6, 4, 2)),
                "up_factors": (tuple(self.up_factors), (2, 4, 6, 8)),
                "kernel": (self.kernel, 9),
                "bilstm_units": (tuple(self.bilstm_units), (64, 32)),
                "lstm_units": (self.lstm_units, 16),
            }
            for name, (got, want) in reference.items():
                if got != want:
                    raise ConfigInvalid(f"{name} must be {want} (got {got}); set strict=False to override")


@dataclass(frozen=True)
class TrainConfig:
    feature_set: str = "mass+accel"
    epochs: int = 50          # the reference recipe trains up to 50
    batch_size: int = 270
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    val_fraction: float = 0.2
    seed: int = 0
    class_weighting: str = "none"  # or "inverse"

    def __post_init__(self):
        object.__setattr__(self, "feature_set", normalize_feature_set(self.feature_set))

    def validate(self, cfg: ModelConfig):
        if not 0 < self.val_fraction < 1:
            raise ConfigInvalid(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigInvalid("epochs and batch_size must be >= 1")
        if self.class_weighting not in ("none", "inverse"):
            raise ConfigInvalid(f"unknown class_weighting {self.class_weighting!r}")
        n_ch = len(feature_channels(self.feature_set))
        if n_ch != cfg.in_channels:
            raise ConfigInvalid(
                f"feature set {self.feature_set!r} has {n_ch} channels "
                f"but the model expects {cfg.in_channels}"
            )


@dataclass
class NormStats:
    """Per-channel training-set mean and standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ConfigInvalid("normalization std must be positive for every channel")

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.std


@dataclass
class WindowBatch:
    """Normalized feature windows, [batch, seq_len, channels]."""

    data: np.ndarray
    alignment: list  # (session_id, start_index, valid_length) per window

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ShapeMismatch("batch must be [batch, seq_len, channels]")
        if self.data.shape[1] % MIN_SEQ_LEN != 0:
            raise ShapeMismatch(f"seq_len must be a multiple of {MIN_SEQ_LEN}")
        if not np.all(np.isfinite(self.data)):
            raise ShapeMismatch("batch contains non-finite values")
        if len(self.alignment) != self.data.shape[0]:
            raise ShapeMismatch("alignment must have one entry per window")


@dataclass
class TrainedModel:
    config: ModelConfig
    net: nn.Module
    feature_set: str = "mass+accel"
    norm_stats: NormStats = None

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_f1: float


class _EncoderStage(nn.Module):
    def __init__(self, c_in, c_out, pool, kernel):
        super().__init__()
        self.conv = nn.Conv1d(c_in, c_out, kernel, padding="same")
        self.bn = nn.BatchNorm1d(c_out)
        self.pool = nn.MaxPool1d(pool) if pool > 1 else nn.Identity()

    def forward(self, x):
        return self.pool(F.relu(self.bn(self.conv(x))))


class _DecoderStage(nn.Module):
    """Concatenate the equal-resolution skip, upsample, then convolve."""

    def __init__(self, c_in, c_out, up, kernel):
        super().__init__()
        self.up = up
        self.conv = nn.Conv1d(c_in, c_out, kernel, padding="same")
        self.bn = nn.BatchNorm1d(c_out)

    def forward(self, x, skip):
        x = torch.cat([x, skip], dim=1)
        x = x.repeat_interleave(self.up, dim=2)
        return F.relu(self.bn(self.conv(x)))


class SegmentationNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        enc = cfg.encoder_channels
        ins = (cfg.in_channels,) + tuple(enc[:-1])
        self.encoders = nn.ModuleList(
            _EncoderStage(ins[i], enc[i], cfg.pool_factors[i], cfg.kernel) for i in range(5)
        )
        skip_ch = (enc[4], enc[3], enc[2], enc[1])
        dec_out = (enc[3], enc[2], enc[1], enc[0])
        dec_in = (enc[4] + skip_ch[0],) + tuple(dec_out[i - 1] + skip_ch[i] for i in range(1, 4))
        self.decoders = nn.ModuleList(
            _DecoderStage(dec_in[i], dec_out[i], cfg.up_factors[i], cfg.kernel) for i in range(4)
        )
        self.bilstm1 = nn.LSTM(dec_out[3], cfg.bilstm_units[0], batch_first=True, bidirectional=True)
        self.bilstm2 = nn.LSTM(
            2 * cfg.bilstm_units[0], cfg.bilstm_units[1], batch_first=True, bidirectional=True
        )
        self.lstm = nn.LSTM(2 * cfg.bilstm_units[1], cfg.lstm_units, batch_first=True)
        self.head1 = nn.Conv1d(cfg.lstm_units, cfg.head_hidden_channels, cfg.kernel, padding="same")
        self.head2 = nn.Conv1d(cfg.head_hidden_channels, cfg.classes, cfg.kernel, padding="same")

    def forward(self, x):
        """x: [batch, channels, length] -> class logits [batch, classes, length]."""
        outs = []
        h = x
        for enc in self.encoders:
            h = enc(h)
            outs.append(h)
        for i, dec in enumerate(self.decoders):
            h = dec(h, outs[4 - i])
        y = h.transpose(1, 2)
        y, _ = self.bilstm1(y)
        y, _ = self.bilstm2(y)
        y, _ = self.lstm(y)
        y = y.transpose(1, 2)
        return self.head2(torch.tanh(self.head1(y)))


def build_model(cfg: ModelConfig, seed: int = 0) -> TrainedModel:
    """Construct an untrained model with seed-deterministic parameters."""
    cfg.validate()
    torch.manual_seed(seed)
    return TrainedModel(config=cfg, net=SegmentationNet(cfg))


def forward(model: TrainedModel, batch: WindowBatch) -> np.ndarray:
    """Per-timestep class probabilities, [batch, seq_len, classes]."""
    if batch.data.shape[2] != model.config.in_channels:
        raise ShapeMismatch(
            f"batch has {batch.data.shape[2]} channels, model expects {model.config.in_channels}"
        )
    model.net.eval()
    with torch.no_grad():
        x = torch.from_numpy(batch.data).transpose(1, 2)
        probs = torch.softmax(model.net(x), dim=1)
    return probs.transpose(1, 2).numpy()


# --- feature and window assembly -------------------------------------------


def session_features(
    session: CartSession, feature_set: str, speed_window: int = 21, speed_vmax: float = 5.0
) -> np.ndarray:
    """(n, channels) raw feature matrix for one session."""
    channels = feature_channels(feature_set)
    if "speed" in channels:
        frame = derive_speed(session, window=speed_window, vmax=speed_vmax)
    else:
        frame = FeatureFrame(
            session_id=session.session_id,
            speed=np.zeros(len(session)),
            mass=session.raw_mass,
            ax=session.ax,
            ay=session.ay,
            az=session.az,
        )
    return frame.channels(channels)


def _windows(values: np.ndarray, seq_len: int, stride: int = None):
    """Split along axis 0 into zero-padded windows: (chunk, start, valid)."""
    stride = stride or seq_len
    out = []
    n = len(values)
    for start in range(0, max(n, 1), stride):
        chunk = values[start : start + seq_len]
        valid = len(chunk)
        if valid == 0:
            break
        if valid < seq_len:
            pad = [(0, seq_len - valid)] + [(0, 0)] * (values.ndim - 1)
            chunk = np.pad(chunk, pad)
        out.append((chunk, start, valid))
        if start + seq_len >= n:
            break
    return out


# --- training ----------------------------------------------------------------


def train(model: TrainedModel, sessions, tc: TrainConfig, speed_window: int = 21, speed_vmax: float = 5.0):
    """Optimize a copy of the model; returns (trained model, epoch history).

    Windows are shuffled with the config seed and split 80:20 (well,
    ``val_fraction``); normalization statistics come from the training
    windows only; the parameters kept are the best-validation-loss ones.
    Zero-padded tail timesteps are masked out of every loss and metric.
    """
    cfg = model.config
    tc.validate(cfg)
    if not sessions:
        raise NoLabeledData("no sessions provided")
    if any(not s.labeled for s in sessions):
        bad = [s.session_id for s in sessions if not s.labeled][:3]
        raise NoLabeledData(f"sessions without labels: {', '.join(bad)}")

    xs, ys, valids = [], [], []
    for s in sessions:
        feats = session_features(s, tc.feature_set, speed_window, speed_vmax)
        labels = (s.activity == PICK).astype(np.int64)
        for (chunk, start, valid) in _windows(feats, cfg.seq_len):
            xs.append(chunk)
            lab = labels[start : start + cfg.seq_len]
            ys.append(np.pad(lab, (0, cfg.seq_len - len(lab))))
            valids.append(valid)
    n_windows = len(xs)
    if n_windows < 2:
        raise InsufficientWindows(f"need >= 2 windows, got {n_windows}")

    rng = np.random.default_rng(tc.seed)
    perm = rng.permutation(n_windows)
    n_val = max(1, int(round(tc.val_fraction * n_windows)))
    if n_windows - n_val < 1:
        raise InsufficientWindows("split leaves no training windows")
    train_idx, val_idx = perm[n_val:], perm[:n_val]

    features = np.stack(xs)          # [N, L, C] float64
    targets = np.stack(ys)           # [N, L]
    valid_lens = np.array(valids)

    stats = _norm_stats(features[train_idx], valid_lens[train_idx])
    features = stats.apply(features).astype(np.float32)

    mask = np.arange(cfg.seq_len)[None, :] < valid_lens[:, None]

    x_all = torch.from_numpy(features).transpose(1, 2).contiguous()  # [N, C, L]
    y_all = torch.from_numpy(targets)
    m_all = torch.from_numpy(mask)

    weight = None
    if tc.class_weighting == "inverse":
        flat = targets[train_idx][mask[train_idx]]
        counts = np.bincount(flat, minlength=2).astype(np.float64)
        weight = torch.tensor(len(flat) / (2.0 * np.maximum(counts, 1)), dtype=torch.float32)

    torch.manual_seed(tc.seed)
    net = copy.deepcopy(model.net)
    net.train()
    optimizer = torch.optim.Adam(net.parameters(), lr=tc.learning_rate, betas=(tc.beta1, tc.beta2))

    history = []
    best_loss, best_state = float("inf"), None
    for epoch in range(1, tc.epochs + 1):
        epoch_rng = np.random.default_rng(np.random.SeedSequence([tc.seed, epoch]))
        order = train_idx[epoch_rng.permutation(len(train_idx))]
        net.train()
        loss_sum, step_count = 0.0, 0
        for b in range(0, len(order), tc.batch_size):
            idx = order[b : b + tc.batch_size]
            logits = net(x_all[idx])
            loss = _masked_loss(logits, y_all[idx], m_all[idx], weight)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_sum += float(loss.detach()) * int(m_all[idx].sum())
            step_count += int(m_all[idx].sum())
        train_loss = loss_sum / step_count

        val_loss, val_f1 = _evaluate_split(net, x_all, y_all, m_all, val_idx, tc.batch_size, weight)
        history.append(EpochStats(epoch, train_loss, val_loss, val_f1))
        if val_loss < best_loss:
            best_loss = val_loss
            best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}

    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()
    trained = TrainedModel(config=cfg, net=net, feature_set=tc.feature_set, norm_stats=stats)
    return trained, history


def _norm_stats(train_features, train_valid_lens) -> NormStats:
    seq_len = train_features.shape[1]
    mask = np.arange(seq_len)[None, :] < train_valid_lens[:, None]
    flat = train_features[mask]  # [sum(valid), C]
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    if np.any(std <= 0):
        dead = [i for i, v in enumerate(std) if v <= 0]
        raise ConfigInvalid(f"feature channels {dead} are constant on the training set")
    return NormStats(mean=mean, std=std)


def _masked_loss(logits, targets, mask, weight=None):
    per_step = F.cross_entropy(logits, targets, weight=weight, reduction="none")
    return (per_step * mask).sum() / mask.sum()


def _evaluate_split(net, x_all, y_all, m_all, idx, batch_size, weight):
    net.eval()
    loss_sum, n_steps = 0.0, 0
    tp = fp = fn = tn = 0
    with torch.no_grad():
        for b in range(0, len(idx), batch_size):
            sel = idx[b : b + batch_size]
            logits = net(x_all[sel])
            loss = _masked_loss(logits, y_all[sel], m_all[sel], weight)
            steps = int(m_all[sel].sum())
            loss_sum += float(loss) * steps
            n_steps += steps
            pred = logits.argmax(dim=1)
            target, mask = y_all[sel], m_all[sel]
            tp += int(((pred == 1) & (target == 1) & mask).sum())
            fp += int(((pred == 1) & (target == 0) & mask).sum())
            fn += int(((pred == 0) & (target == 1) & mask).sum())
            tn += int(((pred == 0) & (target == 0) & mask).sum())
    scores = precision_recall_f1(ConfusionCounts(tp, fp, fn, tn))
    return loss_sum / max(n_steps, 1), scores.f1


# --- inference ----------------------------------------------------------------


def classify_session(
    model: TrainedModel,
    session: CartSession,
    frame: FeatureFrame = None,
    overlap: bool = False,
    speed_window: int = 21,
    speed_vmax: float = 5.0,
):
    """Label every sample of a session; returns (LabelSequence, pick prob).

    The session is cut into consecutive seq_len windows (the tail is
    zero-padded and its predictions trimmed). With ``overlap`` the stride
    halves and samples take the majority label of their covering windows,
    mean probability breaking ties.
    """
    if model.norm_stats is None:
        raise FeatureMismatch("model has no normalization stats; train or load one first")
    channels = feature_channels(model.feature_set)
    if frame is not None:
        if len(frame) != len(session):
            raise FeatureMismatch(
                f"feature frame has {len(frame)} samples, session has {len(session)}"
            )
        feats = frame.channels(channels)
    else:
        feats = session_features(session, model.feature_set, speed_window, speed_vmax)

    seq_len = model.config.seq_len
    stride = seq_len // 2 if overlap else seq_len
    normalized = model.norm_stats.apply(feats)
    windows = _windows(normalized, seq_len, stride)

    n = len(session)
    pick_votes = np.zeros(n)
    cover = np.zeros(n)
    prob_sum = np.zeros((n, 2))
    batch = WindowBatch(
        data=np.stack([w for w, _, _ in windows]),
        alignment=[(session.session_id, start, valid) for _, start, valid in windows],
    )
    probs = forward(model, batch)
    for k, (_, start, valid) in enumerate(windows):
        p = probs[k, :valid]
        sl = slice(start, start + valid)
        prob_sum[sl] += p
        pick_votes[sl] += p[:, PICK] > p[:, NOPICK]
        cover[sl] += 1

    mean_probs = prob_sum / cover[:, None]
    labels = np.where(
        pick_votes * 2 > cover,
        PICK,
        np.where(pick_votes * 2 < cover, NOPICK, (mean_probs[:, PICK] >= mean_probs[:, NOPICK])),
    ).astype(np.int8)
    return LabelSequence(session_id=session.session_id, labels=labels), mean_probs[:, PICK]


# --- leave-one-day-out cross-validation ---------------------------------------


@dataclass
class FoldResult:
    held_out_date: str
    scores: PRFScores
    counts: ConfusionCounts
    history: list
    predictions: dict  # session_id -> LabelSequence
    model: TrainedModel = None


@dataclass
class LoocvResult:
    folds: list
    macro: PRFScores
    micro: PRFScores


def loocv(
    sessions,
    held_out_dates,
    cfg: ModelConfig,
    tc: TrainConfig,
    speed_window: int = 21,
    speed_vmax: float = 5.0,
    keep_models: bool = False,
) -> LoocvResult:
    """Hold out each date in turn: train on the rest, test on the date."""
    dates = {s.harvest_date for s in sessions}
    if len(dates) < 2:
        raise ConfigInvalid("cross-validation needs sessions from at least 2 dates")
    for d in held_out_dates:
        if d not in dates:
            raise UnknownDate(f"held-out date {d!r} not among {sorted(dates)}")

    folds = []
    for d in held_out_dates:
        train_sessions = [s for s in sessions if s.harvest_date != d]
        test_sessions = [s for s in sessions if s.harvest_date == d]
        base = build_model(cfg, seed=tc.seed)
        trained, history = train(base, train_sessions, tc, speed_window, speed_vmax)
        counts = ConfusionCounts(0, 0, 0, 0)
        predictions = {}
        for s in test_sessions:
            pred, _ = classify_session(trained, s, speed_window=speed_window, speed_vmax=speed_vmax)
            predictions[s.session_id] = pred
            counts = counts + confusion(pred, LabelSequence(s.session_id, s.activity))
        folds.append(
            FoldResult(
                held_out_date=d,
                scores=precision_recall_f1(counts),
                counts=counts,
                history=history,
                predictions=predictions,
                model=trained if keep_models else None,
            )
        )
    pairs = [(f.scores, f.counts) for f in folds]
    return LoocvResult(folds=folds, macro=mean_scores(pairs), micro=mean_scores(pairs, micro=True))


# --- persistence ---------------------------------------------------------------

FORMAT_VERSION = 1


def save_model(model: TrainedModel, path) -> None:
    """Single self-describing artifact: config, stats, tag, parameters."""
    payload = {
        "format_version": FORMAT_VERSION,
        "config": asdict(model.config),
        "feature_set": model.feature_set,
        "norm_mean": None if model.norm_stats is None else model.norm_stats.mean.tolist(),
        "norm_std": None if model.norm_stats is None else model.norm_stats.std.tolist(),
        "state_dict": model.net.state_dict(),
    }
    torch.save(payload, path)


def load_model(path) -> TrainedModel:
    payload = torch.load(path, weights_only=True)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigInvalid(f"unsupported model format version {version!r}")
    raw_cfg = dict(payload["config"])
    for key in ("encoder_channels", "pool_factors", "up_factors", "bilstm_units"):
        raw_cfg[key] = tuple(raw_cfg[key])
    cfg = ModelConfig(**raw_cfg)
    model = build_model(cfg)
    model.net.load_state_dict(payload["state_dict"])
    model.net.eval()
    stats = None
    if payload["norm_mean"] is not None:
        stats = NormStats(mean=np.array(payload["norm_mean"]), std=np.array(payload["norm_std"]))
    return TrainedModel(
        config=cfg, net=model.net, feature_set=payload["feature_set"], norm_stats=stats
    )
