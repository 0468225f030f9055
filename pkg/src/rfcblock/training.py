"""Run configuration, P x K clip sampling, plain gradient descent and the
train / evaluate pipeline used by the CLI and the desk-scale experiment."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rfct
from .block import BlockConfig
from .errors import EvaluationError, MiningError, RFCTFormatError, ValidationError
from .evaluation import EvalResult, GallerySet, clip_split_average, evaluate
from .losses import CSV_HEADER, LossReport, LossWeights
from .network import ModelConfig, RFCNet
from .synthdata import SynthConfig, generate_tracklet, read_manifest, rng_for

# training tracklets live far from the evaluation ones so they never share frames
TRAIN_TRACKLET_OFFSET = 1000
_SHUFFLE = 11


def _int_tuple(value) -> tuple[int, ...]:
    if isinstance(value, str):
        text = value.strip().strip("[](){}")
        if text.lower() in ("", "none"):
            return ()
        return tuple(int(v) for v in text.replace(";", ",").split(",") if v.strip())
    return tuple(int(v) for v in value)


def _float_pair(value) -> tuple[float, float]:
    vals = tuple(float(v) for v in (value.split(",") if isinstance(value, str) else value))
    if len(vals) != 2:
        raise ValidationError(f"expected two comma-separated numbers, got {value!r}")
    return vals


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # block
    arrangement: str = "st"
    regions: int = 6
    clusters: int = 3
    partition: str = "adaptive"
    stages: tuple[int, ...] = (2, 3)
    # objective
    lambda1: float = 0.1
    lambda2: float = 0.5
    lambda3: float = 0.05
    margin: float = 0.3
    # optimizer
    lr: float = 0.05
    decay: float = 0.1
    decay_at: float = 2.0 / 3.0  # fraction of the epochs after which lr is multiplied by decay
    epochs: int = 300
    batch_p: int = 4
    batch_k: int = 2
    clip_frames: int = 4
    clip_stride: int = 8
    eval_clip: int = 64
    # backbone
    channels: tuple[int, ...] = (16, 32, 32)
    # data: heavier noise and occluders than the generator defaults so the
    # 10-identity benchmark is not saturated for the block-free baseline
    data_seed: int = 0
    num_identities: int = 10
    tracklets: int = 4
    frames: int = 32
    height: int = 32
    width: int = 16
    image_channels: int = 3
    occlusion_prob: float = 0.5
    occlusion_range: tuple[float, float] = (0.5, 0.8)
    occlusion_position: str = "bottom"
    noise: float = 2.0
    query_occlusion: float = 0.5
    gallery_occlusion: float = 0.0
    out: str = "runs/default"

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "stages", _int_tuple(self.stages))
        set_(self, "channels", _int_tuple(self.channels))
        set_(self, "occlusion_range", _float_pair(self.occlusion_range))
        if self.epochs < 0:
            raise ValidationError("epochs must be non-negative")
        if self.lr <= 0 or self.decay <= 0:
            raise ValidationError("lr and decay must be positive")
        if not 0.0 <= self.decay_at <= 1.0:
            raise ValidationError("decay_at must lie in [0, 1]")
        if self.batch_p < 2 or self.batch_k < 2:
            raise ValidationError("batch mining needs P >= 2 identities and K >= 2 instances")
        if self.batch_p > self.num_identities or self.batch_k > self.tracklets:
            raise ValidationError("batch shape exceeds the number of identities/tracklets")
        if self.clip_frames < 1 or self.clip_stride < 1 or self.eval_clip < 1:
            raise ValidationError("clip lengths and stride must be positive")
        if (self.clip_frames - 1) * self.clip_stride >= self.frames:
            raise ValidationError(f"{self.clip_frames} frames at stride {self.clip_stride} "
                                  f"do not fit in {self.frames}-frame tracklets")
        if not self.channels:
            raise ValidationError("backbone needs at least one stage")
        for p in ("occlusion_prob", "query_occlusion", "gallery_occlusion"):
            if not 0.0 <= getattr(self, p) <= 1.0:
                raise ValidationError(f"{p} must lie in [0, 1]")
        # surface block / loss / data validation errors at parse time
        self.block_config()
        self.loss_weights()
        self.synth_config()

    def block_config(self) -> BlockConfig:
        return BlockConfig(self.arrangement, self.regions, self.clusters, self.partition, self.stages)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.margin)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(self.num_identities, self.tracklets, self.frames, self.height, self.width,
                           self.image_channels, self.occlusion_prob, self.occlusion_range,
                           self.occlusion_position, self.noise, self.data_seed)

    def model_config(self) -> ModelConfig:
        return ModelConfig((self.height, self.width, self.image_channels), self.channels,
                           self.num_identities, self.block_config())

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def coerce(key: str, value: str):
    """Convert a config-file string to the field's type."""
    if key not in _FIELD_TYPES:
        raise ValidationError(f"unknown config key {key!r}")
    kind = str(_FIELD_TYPES[key])
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise ValidationError(f"{key}: cannot parse {value!r}") from None
    return value  # strings and tuples are parsed by RunConfig itself


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = coerce(key.replace("-", "_"), value)
    return values


def read_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise RFCTFormatError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config_text(text)


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then file values, then flag overrides."""
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(merged) - set(_FIELD_TYPES)
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**merged)


# ---------------------------------------------------------------- data


class TrainingData:
    """Training tracklets generated lazily and cached per (identity, tracklet)."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.synth = config.synth_config()
        self._cache = {}

    def tracklet(self, identity: int, index: int):
        key = (identity, index)
        if key not in self._cache:
            self._cache[key] = generate_tracklet(identity, self.synth, tracklet=TRAIN_TRACKLET_OFFSET + index)
        return self._cache[key]

    def batches(self, epoch: int):
        """P x K batches for one epoch: every identity once, remainder dropped."""
        c = self.config
        rng = rng_for(c.seed, _SHUFFLE, epoch)
        order = rng.permutation(c.num_identities)
        span = (c.clip_frames - 1) * c.clip_stride + 1
        for b in range(c.num_identities // c.batch_p):
            images, ids, kps, fgs = [], [], [], []
            for identity in order[b * c.batch_p:(b + 1) * c.batch_p]:
                for tr in rng.choice(c.tracklets, size=c.batch_k, replace=False):
                    sample = self.tracklet(int(identity), int(tr))
                    start = int(rng.integers(0, c.frames - span + 1))
                    frames = slice(start, start + span, c.clip_stride)
                    images.append(sample.images[frames])
                    kps.append(sample.keypoints[frames])
                    fgs.append(sample.foreground[frames])
                    ids.append(int(identity))
            yield np.stack(images), np.array(ids), np.stack(kps), np.stack(fgs)


def step_size(config: RunConfig, epoch: int) -> float:
    boundary = int(np.ceil(config.decay_at * config.epochs))
    return config.lr * (config.decay if epoch >= boundary else 1.0)


# ---------------------------------------------------------------- training


def train(config: RunConfig, log=None, epoch_hook=None) -> tuple[RFCNet, list[LossReport]]:
    """Plain gradient descent on the full objective.

    ``log`` receives one CSV line per step (header first).
    """
    model = RFCNet(config.model_config(), seed=config.seed)
    weights = config.loss_weights()
    data = TrainingData(config)
    reports = []
    if log is not None:
        log(CSV_HEADER)
    step = 0
    for epoch in range(config.epochs):
        lr = step_size(config, epoch)
        for images, ids, kps, fgs in data.batches(epoch):
            model.zero_grad()
            try:
                report = model.loss(images, ids, kps, fgs, weights)
            except MiningError as exc:
                raise MiningError(f"step {step}: {exc}") from exc
            if report.graph is not None:
                report.graph.backward()
                report.graph = None  # release the tape
            for p in model.parameters():
                p.data -= lr * p.grad
            if log is not None:
                log(report.csv_line(step))
            reports.append(report)
            step += 1
        if epoch_hook is not None:
            epoch_hook(epoch, model)
    return model, reports


def save_run(directory, config: RunConfig, model: RFCNet) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.txt").write_text(config.to_text())
    rfct.save_checkpoint(directory / "checkpoint", model.state())
    return directory


def load_run(directory) -> tuple[RunConfig, RFCNet]:
    directory = Path(directory)
    config = build_config(read_config_file(directory / "config.txt"))
    model = RFCNet(config.model_config(), seed=config.seed)
    model.load_state(rfct.load_checkpoint(directory / "checkpoint"))
    return config, model


# ---------------------------------------------------------------- evaluation


@dataclass
class Tracklet:
    images: np.ndarray
    identity: int
    camera: int


def evaluation_split(config: RunConfig) -> tuple[list[Tracklet], list[Tracklet]]:
    """Queries are camera-0 tracklets (occluded at ``query_occlusion``); the rest is gallery."""
    synth = config.synth_config()
    queries, gallery = [], []
    for identity in range(config.num_identities):
        for tr in range(config.tracklets):
            prob = config.query_occlusion if tr == 0 else config.gallery_occlusion
            s = generate_tracklet(identity, synth, tracklet=tr, occlusion_prob=prob)
            (queries if s.camera == 0 else gallery).append(Tracklet(s.images, s.identity, s.camera))
    return queries, gallery


def load_split(manifest) -> tuple[list[Tracklet], list[Tracklet]]:
    try:
        rows = read_manifest(manifest)
    except OSError as exc:
        raise RFCTFormatError(f"cannot read manifest {manifest}: {exc.strerror}") from exc
    queries, gallery = [], []
    for row in rows:
        images = rfct.load(row["file"])
        t = Tracklet(images, row["identity"], row["camera"])
        (queries if row["camera"] == 0 else gallery).append(t)
    return queries, gallery


def embed_all(model, tracklets: list[Tracklet], clip_len: int) -> np.ndarray:
    return np.stack([clip_split_average(t.images, clip_len, model) for t in tracklets])


def evaluate_model(model, queries: list[Tracklet], gallery: list[Tracklet], clip_len: int = 64,
                   k_max: int = 10) -> EvalResult:
    if not queries:
        raise EvaluationError("query set is empty")
    if not gallery:
        raise EvaluationError("gallery set is empty")
    gal = GallerySet(embed_all(model, gallery, clip_len),
                     np.array([t.identity for t in gallery]), np.array([t.camera for t in gallery]))
    q = embed_all(model, queries, clip_len)
    return evaluate(q, np.array([t.identity for t in queries]), np.array([t.camera for t in queries]),
                    gal, k_max=min(k_max, len(gallery)))
