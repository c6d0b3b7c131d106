"""The multi-scale FCN: construction, forward/backward, training and checkpoints.

Five VGG-style scales of 3x3 conv + batch norm + relu, separated by 2x2 max
pooling. Each scale's last feature map is brought back to full resolution
(scales 2-5 by transposed convolution in one go, scale 1 untouched), the
maps are concatenated and three 1x1 convolutions predict K class scores.
"""
from __future__ import annotations

import copy
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .errors import CheckpointError, ConfigError, FormatError, NonFiniteError, ShapeError

log = logging.getLogger(__name__)

LADDER = ((16, 16), (32, 32), (64, 64, 64), (128, 128, 128), (256, 256, 256))
HEAD_WIDTHS = (64, 64)
TASK_CLASSES = {"sa": 4, "2ch": 2, "4ch": 3}
CLASSIFIER_GAIN = 0.1


@dataclass(frozen=True)
class NetworkConfig:
    k: int = 4
    ladder: tuple = LADDER
    head_widths: tuple = HEAD_WIDTHS
    input_size: int = 192

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError(f"need at least 2 classes, got K={self.k}")
        if len(self.ladder) != 5:
            raise ConfigError("the ladder must have 5 scales")
        if self.input_size % 2 ** (len(self.ladder) - 1):
            raise ConfigError(f"input size {self.input_size} must be divisible by "
                              f"{2 ** (len(self.ladder) - 1)}")

    @property
    def concat_width(self) -> int:
        return sum(widths[-1] for widths in self.ladder)

    @property
    def conv_layer_count(self) -> int:
        """3x3 plus 1x1 convolutions; the transposed convolutions are not counted."""
        return sum(len(w) for w in self.ladder) + len(self.head_widths) + 1


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    iterations: int = 50_000
    batch_size: int = 20
    seed: int = 0
    log_every: int = 100
    validate_every: int = 1_000
    checkpoint_every: int = 0
    augment: bool = True
    augment_params: object = None  # data.AugmentParams; None means the defaults

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        for name in ("batch_size", "log_every", "validate_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning rate must be positive")


@dataclass
class ModelState:
    config: NetworkConfig
    params: dict = field(default_factory=dict)   # name -> numcore.Param
    running: dict = field(default_factory=dict)  # bn name -> numcore.RunningStats
    iteration: int = 0
    optimizer: nc.OptimizerConfig = field(default_factory=nc.OptimizerConfig)

    def __getitem__(self, name) -> np.ndarray:
        return self.params[name].value

    def astype(self, dtype) -> "ModelState":
        """Deep copy with parameters and statistics cast to ``dtype``."""
        out = copy.deepcopy(self)
        for p in out.params.values():
            p.value = p.value.astype(dtype)
            p.grad = p.grad.astype(dtype)
            p.m = p.m.astype(dtype)
            p.v = p.v.astype(dtype)
        for st in out.running.values():
            if st.initialised:
                st.mean = st.mean.astype(dtype)
                st.var = st.var.astype(dtype)
        return out

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def build_network(config: NetworkConfig, seed: int = 0) -> ModelState:
    """Fresh parameters: He-normal conv weights, zero biases, bilinear upsampling kernels.

    The classifier layer's He draw is scaled by ``CLASSIFIER_GAIN`` so an
    untrained network starts close to uniform class probabilities.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, nc.Param] = {}
    running: dict[str, nc.RunningStats] = {}

    def add(name, arr):
        params[name] = nc.Param(name, np.ascontiguousarray(arr, dtype=np.float32))

    def conv(name, cout, cin, ksize, gain=1.0):
        fan_in = cin * ksize * ksize
        add(f"{name}.weight", gain * rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, ksize, ksize)))
        add(f"{name}.bias", np.zeros(cout))

    def bn(name, c):
        add(f"{name}.gamma", np.ones(c))
        add(f"{name}.beta", np.zeros(c))
        running[name] = nc.RunningStats()

    cin = 1
    for s, widths in enumerate(config.ladder, 1):
        for j, width in enumerate(widths, 1):
            conv(f"s{s}.conv{j}", width, cin, 3)
            bn(f"s{s}.bn{j}", width)
            cin = width
        if s > 1:
            f = 2 ** (s - 1)
            add(f"up{s}.weight", nc.bilinear_kernel(f, widths[-1]))
            add(f"up{s}.bias", np.zeros(widths[-1]))
    cin = config.concat_width
    for j, width in enumerate(config.head_widths, 1):
        conv(f"head.conv{j}", width, cin, 1)
        bn(f"head.bn{j}", width)
        cin = width
    conv(f"head.conv{len(config.head_widths) + 1}", config.k, cin, 1, gain=CLASSIFIER_GAIN)
    return ModelState(config, params, running)


def _check_input(model: ModelState, x: np.ndarray):
    s = model.config.input_size
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (s, s):
        raise ShapeError(f"network input must be (N, 1, {s}, {s}), got {x.shape}")


def forward_logits(model: ModelState, x: np.ndarray, mode: str = "infer", keep_tape: bool = False):
    """Class scores for a batch; with ``keep_tape`` also the caches for :func:`backward`."""
    _check_input(model, x)
    cfg = model.config
    P = model.params
    tape = {} if keep_tape else None
    x = x.astype(P["s1.conv1.weight"].value.dtype, copy=False)

    def rec(key, cache):
        if keep_tape:
            tape[key] = cache

    feats = []
    h = x
    for s, widths in enumerate(cfg.ladder, 1):
        if s > 1:
            h, c = nc.max_pool2(h)
            rec(f"pool{s}", c)
        for j in range(1, len(widths) + 1):
            conv, bn = f"s{s}.conv{j}", f"s{s}.bn{j}"
            h, c = nc.conv2d(h, P[f"{conv}.weight"].value, P[f"{conv}.bias"].value)
            rec(conv, c)
            h, c = nc.batch_norm(h, P[f"{bn}.gamma"].value, P[f"{bn}.beta"].value, model.running[bn], mode)
            rec(bn, c)
            h, c = nc.relu(h)
            rec(f"{bn}.relu", c)
        if s == 1:
            feats.append(h)
        else:
            up, c = nc.transposed_conv(h, 2 ** (s - 1), P[f"up{s}.weight"].value, P[f"up{s}.bias"].value)
            rec(f"up{s}", c)
            feats.append(up)
    h, c = nc.concat_channels(feats)
    rec("concat", c)
    del feats
    n_head = len(cfg.head_widths)
    for j in range(1, n_head + 2):
        conv = f"head.conv{j}"
        h, c = nc.conv1x1(h, P[f"{conv}.weight"].value, P[f"{conv}.bias"].value)
        rec(conv, c)
        if j <= n_head:
            bn = f"head.bn{j}"
            h, c = nc.batch_norm(h, P[f"{bn}.gamma"].value, P[f"{bn}.beta"].value, model.running[bn], mode)
            rec(bn, c)
            h, c = nc.relu(h)
            rec(f"{bn}.relu", c)
    return h, tape


def backward(model: ModelState, tape: dict, dlogits: np.ndarray) -> None:
    """Write d(loss)/d(param) into every ``Param.grad`` given d(loss)/d(logits)."""
    cfg = model.config
    P = model.params
    n_head = len(cfg.head_widths)
    g = dlogits
    for j in range(n_head + 1, 0, -1):
        if j <= n_head:
            bn = f"head.bn{j}"
            g = nc.relu_backward(g, tape[f"{bn}.relu"])
            g, P[f"{bn}.gamma"].grad, P[f"{bn}.beta"].grad = nc.batch_norm_backward(g, tape[bn])
        conv = f"head.conv{j}"
        g, P[f"{conv}.weight"].grad, P[f"{conv}.bias"].grad = nc.conv1x1_backward(g, tape[conv])
    dfeats = nc.concat_channels_backward(g, tape["concat"])

    from_below = None
    for s in range(len(cfg.ladder), 0, -1):
        widths = cfg.ladder[s - 1]
        if s == 1:
            g = dfeats[0]
        else:
            g, P[f"up{s}.weight"].grad, P[f"up{s}.bias"].grad = nc.transposed_conv_backward(
                dfeats[s - 1], tape[f"up{s}"])
        if from_below is not None:
            g = g + from_below
        for j in range(len(widths), 0, -1):
            conv, bn = f"s{s}.conv{j}", f"s{s}.bn{j}"
            g = nc.relu_backward(g, tape[f"{bn}.relu"])
            g, P[f"{bn}.gamma"].grad, P[f"{bn}.beta"].grad = nc.batch_norm_backward(g, tape[bn])
            g, P[f"{conv}.weight"].grad, P[f"{conv}.bias"].grad = nc.conv2d_backward(g, tape[conv])
        if s > 1:
            from_below = nc.max_pool2_backward(g, tape[f"pool{s}"])


def forward(model: ModelState, x: np.ndarray, mode: str = "infer") -> np.ndarray:
    """Per-pixel class probabilities, shape (N, K, H, W)."""
    logits, _ = forward_logits(model, x, mode)
    return nc.softmax(logits)


def predict_segmentation(probabilities: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest class index."""
    return probabilities.argmax(axis=1).astype(np.int16)


def segment(model: ModelState, images: np.ndarray, batch_size: int = 10) -> np.ndarray:
    """Label maps for a stack of normalised (M, H, W) slices."""
    out = []
    for i in range(0, len(images), batch_size):
        chunk = images[i:i + batch_size, None].astype(np.float32)
        out.append(predict_segmentation(forward(model, chunk, "infer")))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:], np.int16)


def loss_and_grads(model: ModelState, images: np.ndarray, labels: np.ndarray, ignore_classes=()) -> float:
    logits, tape = forward_logits(model, images, "train", keep_tape=True)
    loss, _, cache = nc.softmax_cross_entropy(logits, labels, ignore_classes)
    backward(model, tape, nc.softmax_cross_entropy_backward(cache))
    return loss


# ---------------------------------------------------------------------------
# training


@dataclass
class LossRecord:
    iteration: int
    loss: float
    val_loss: float | None = None
    seconds: float = 0.0


def train(model: ModelState, dataset, train_config: TrainConfig, *, validation=None,
          ignore_classes: Sequence[int] = (), checkpoint_path=None,
          on_log: Callable[[LossRecord], None] | None = None):
    """Run ``train_config.iterations`` Adam steps on augmented mini-batches.

    ``dataset`` is a :class:`cmrfcn.data.SliceDataset`. Returns the model
    (updated in place) and the list of logged :class:`LossRecord`.
    """
    from . import data  # deferred: data imports nothing from here, keeps module graph flat

    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    if dataset.images.shape[1:] != (model.config.input_size,) * 2:
        raise ShapeError(f"dataset slices {dataset.images.shape[1:]} do not match network "
                         f"input size {model.config.input_size}")
    opt = model.optimizer
    opt.alpha = train_config.learning_rate
    trace: list[LossRecord] = []
    t0 = time.perf_counter()
    start = model.iteration
    for it in range(start, start + train_config.iterations):
        rng = data.iteration_rng(train_config.seed, it)
        imgs, labs = data.sample_minibatch(dataset, train_config.batch_size, rng)
        if train_config.augment:
            imgs, labs = data.augment_batch(imgs, labs, train_config.augment_params or data.AugmentParams(), rng)
        loss = loss_and_grads(model, imgs[:, None], labs, ignore_classes)
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite loss {loss} at iteration {it}")
        nc.adam_step(model.params.values(), opt)
        model.iteration = it + 1
        done = it + 1 - start
        if done % train_config.log_every == 0 or done == train_config.iterations:
            rec = LossRecord(it + 1, loss, seconds=time.perf_counter() - t0)
            if validation is not None and (done % train_config.validate_every == 0
                                           or done == train_config.iterations):
                rec.val_loss = evaluate_loss(model, validation, ignore_classes)
            trace.append(rec)
            log.info("iter %d loss %.5f%s", rec.iteration, rec.loss,
                     "" if rec.val_loss is None else f" val {rec.val_loss:.5f}")
            if on_log is not None:
                on_log(rec)
        if checkpoint_path and train_config.checkpoint_every and done % train_config.checkpoint_every == 0:
            save_checkpoint(model, checkpoint_path)
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    return model, trace


def evaluate_loss(model: ModelState, dataset, ignore_classes=(), batch_size=20) -> float:
    total, count = 0.0, 0
    for i in range(0, len(dataset), batch_size):
        imgs = dataset.images[i:i + batch_size, None]
        labs = dataset.labels[i:i + batch_size]
        logits, _ = forward_logits(model, imgs, "infer")
        loss, _, _ = nc.softmax_cross_entropy(logits, labs, ignore_classes)
        total += loss * len(imgs)
        count += len(imgs)
    return total / count


def fine_tune(checkpoint, dataset, train_config: TrainConfig | None = None, *,
              iterations: int = 10_000, ignore_classes: Sequence[int] = (), expected_k=None, **kw):
    """Continue training a checkpoint (path or ModelState) on new data.

    Voxels labelled with a class in ``ignore_classes`` contribute no loss.
    """
    if isinstance(checkpoint, (str, Path)):
        model = load_checkpoint(checkpoint, expected_k=expected_k)
    else:
        model = copy.deepcopy(checkpoint)
        if expected_k is not None and model.config.k != expected_k:
            raise CheckpointError(f"checkpoint has K={model.config.k}, expected K={expected_k}")
    cfg = train_config or TrainConfig()
    cfg = TrainConfig(**{**cfg.__dict__, "iterations": iterations})
    if iterations == 0:
        return model, []
    return train(model, dataset, cfg, ignore_classes=ignore_classes, **kw)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"FCNC"
VERSION = 1


def _write_record(buf: list, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    buf.append(struct.pack("<H", len(nb)))
    buf.append(nb)
    buf.append(struct.pack("<B", arr.ndim))
    buf.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def checkpoint_bytes(model: ModelState) -> bytes:
    buf = [MAGIC, struct.pack("<IIQ", VERSION, model.config.k, len(model.params))]
    for name, p in model.params.items():
        _write_record(buf, name, p.value)
    for name, st in model.running.items():
        if st.initialised:
            _write_record(buf, f"{name}.running_mean", st.mean)
            _write_record(buf, f"{name}.running_var", st.var)
    buf.append(struct.pack("<Q", model.iteration))
    return b"".join(buf)


def save_checkpoint(model: ModelState, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def record(self):
        (nlen,) = self.unpack("<H")
        try:
            name = self.take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("checkpoint record name is not UTF-8") from exc
        (rank,) = self.unpack("<B")
        dims = self.unpack(f"<{rank}Q")
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        return name, arr

    @property
    def remaining(self):
        return len(self.raw) - self.pos


def checkpoint_from_bytes(raw: bytes, expected_k: int | None = None, config: NetworkConfig | None = None):
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, k, nparams = r.unpack("<IIQ")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if expected_k is not None and k != expected_k:
        raise CheckpointError(f"checkpoint has K={k}, configuration expects K={expected_k}")
    if config is not None and config.k != k:
        raise CheckpointError(f"checkpoint has K={k}, configuration expects K={config.k}")
    records = [r.record() for _ in range(nparams)]
    stats = []
    while r.remaining > 8:
        stats.append(r.record())
    if r.remaining != 8:
        raise FormatError("checkpoint truncated (missing iteration counter)")
    (iteration,) = r.unpack("<Q")

    template = build_network(config or NetworkConfig(k=k), seed=0)
    names = [n for n, _ in records]
    if names != list(template.params):
        raise CheckpointError("checkpoint parameter names do not match the network architecture")
    for name, arr in records:
        if arr.shape != template.params[name].value.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape} != architecture "
                                  f"{template.params[name].value.shape}")
        template.params[name] = nc.Param(name, arr.copy())
    if len(stats) % 2:
        raise FormatError("running statistics must come in mean/var pairs")
    for (mname, mean), (vname, var) in zip(stats[::2], stats[1::2]):
        layer = mname.removesuffix(".running_mean")
        if layer not in template.running or vname != f"{layer}.running_var":
            raise CheckpointError(f"unexpected running statistics record {mname!r}/{vname!r}")
        template.running[layer] = nc.RunningStats(mean.copy(), var.copy())
    template.iteration = iteration
    return template


def load_checkpoint(path, expected_k: int | None = None, config: NetworkConfig | None = None) -> ModelState:
    return checkpoint_from_bytes(Path(path).read_bytes(), expected_k, config)
