"""Training and evaluation loops for the prompted dual encoder.

Training minimizes the batch-mean difficulty-weighted loss over the
prompt parameters with an adaptive-moment optimizer under a
cosine-annealed learning rate. The frozen branch is evaluated once per
task and cached; encoder weights are never touched. All loops are
single logical sequences with seeded shuffling, so identical configs
and seeds reproduce byte-identical metrics and checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import read_checkpoint
from .config import TrainConfig
from .encoder import FrozenEncoder, FrozenFeatures
from .objective import total_loss
from .pipeline import PromptSet, forward, init_prompts
from .task import FewShotTask, generate_task
from .tensor import NonFiniteError, Tensor, no_grad

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

METRICS_COLUMNS = ("epoch", "mean_ce", "mean_alpha", "mean_reg", "train_acc")


class TrainingError(RuntimeError):
    """Training aborted; the message names the offending sample."""


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Annealed rate: base * (1 + cos(pi * step / total)) / 2."""
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def harmonic_mean(base: float, new: float) -> float:
    if base + new == 0:
        return 0.0
    return 2.0 * base * new / (base + new)


class Adam:
    """Adaptive-moment optimizer over a fixed ordered parameter set."""

    def __init__(self, params: dict[str, Tensor]):
        self._items = list(params.items())
        self._m = {name: np.zeros_like(p.data) for name, p in self._items}
        self._v = {name: np.zeros_like(p.data) for name, p in self._items}
        self._t = 0

    def step(self, lr: float) -> None:
        self._t += 1
        bias1 = 1.0 - ADAM_BETA1 ** self._t
        bias2 = 1.0 - ADAM_BETA2 ** self._t
        for name, p in self._items:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self._m[name]
            v = self._v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)


def format_value(x) -> str:
    """17 significant digits: enough for bit-stable float round-trips."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def metrics_csv(rows: list[tuple], config_text: str) -> str:
    """CSV with the config embedded as leading comment lines, a fixed
    header, and LF endings."""
    lines = [f"# {line}" for line in config_text.rstrip("\n").splitlines()]
    lines.append(",".join(METRICS_COLUMNS))
    for row in rows:
        lines.append(",".join(format_value(v) for v in row))
    return "\n".join(lines) + "\n"


def build_encoder(config: TrainConfig, task: FewShotTask | None = None) -> FrozenEncoder:
    encoder = FrozenEncoder(config.encoder_config())
    if task is not None:
        encoder.bind_class_identities(task.class_identities)
    return encoder


def build_task(config: TrainConfig, seed: int,
               encoder: FrozenEncoder | None = None) -> FewShotTask:
    encoder = encoder or FrozenEncoder(config.encoder_config())
    return generate_task(encoder, config.num_classes, config.shots,
                         config.noise_scale, seed, config.test_per_class)


def _frozen_cache(encoder: FrozenEncoder, samples, class_ids,
                  text_pool: str) -> list[FrozenFeatures]:
    """Zero-shot features per sample; the class text features are shared."""
    from .encoder import class_probabilities
    w_prime = encoder.class_text_features(class_ids, text_pool)
    cache = []
    for image, _ in samples:
        x_prime = encoder.image_feature(image)
        p = class_probabilities(x_prime, w_prime, encoder.config.temperature)
        cache.append(FrozenFeatures(x_prime, w_prime, p))
    return cache


def _forward_kwargs(config: TrainConfig) -> dict:
    return dict(beta=config.beta, ssp_residual=config.ssp_residual,
                csp_text_context=config.csp_text_context,
                text_pool=config.text_pool)


@dataclass
class TrainResult:
    prompts: PromptSet
    metrics_rows: list[tuple]
    csv_text: str
    encoder: FrozenEncoder


def train(task: FewShotTask, config: TrainConfig, seed: int) -> TrainResult:
    """Fit the prompt parameters on the task's base classes.

    ``seed`` drives prompt initialization and batch shuffling; the task
    carries its own generator seed. Returns the trained prompts, the
    per-epoch metrics rows, and the rendered CSV.
    """
    encoder = build_encoder(config, task)
    prompts = init_prompts(config.encoder_config(), config.visual_prompts,
                           config.text_prompts, config.active_layers(),
                           seed=(seed, 1))
    class_ids = list(task.base_classes)
    label_pos = {c: i for i, c in enumerate(class_ids)}
    frozen = _frozen_cache(encoder, task.train, class_ids, config.text_pool)
    optimizer = Adam(prompts.parameters())
    kwargs = _forward_kwargs(config)

    n = len(task.train)
    batch_size = min(config.batch_size, n)
    batches_per_epoch = math.ceil(n / batch_size)
    total_steps = config.epochs * batches_per_epoch
    shuffle_rng = np.random.default_rng((seed, 2))

    rows: list[tuple] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        ce_sum = alpha_sum = reg_sum = 0.0
        correct = 0
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            prompts.zero_grad()
            inv = 1.0 / len(batch)
            for idx in batch:
                image, label = task.train[idx]
                try:
                    out = forward(image, prompts, encoder, class_ids, **kwargs)
                    loss, br = total_loss(
                        out, frozen[idx], label_pos[label], config.gamma,
                        config.omega_v, config.omega_t, config.alpha_cap,
                        config.alpha_clip)
                    (loss * inv).backward()
                except NonFiniteError as exc:
                    raise TrainingError(
                        f"non-finite loss at train sample {idx} "
                        f"(epoch {epoch})") from exc
                ce_sum += br.ce
                alpha_sum += br.alpha
                reg_sum += config.omega_v * br.reg_v + config.omega_t * br.reg_t
                correct += int(np.argmax(out.p.data) == label_pos[label])
            optimizer.step(cosine_lr(config.lr, step, total_steps))
            step += 1
        rows.append((epoch, ce_sum / n, alpha_sum / n, reg_sum / n,
                     100.0 * correct / n))
    config_text = config.with_run_seed(seed).to_text()
    return TrainResult(prompts=prompts, metrics_rows=rows,
                       csv_text=metrics_csv(rows, config_text), encoder=encoder)


def accuracy(encoder: FrozenEncoder, prompts: PromptSet, samples,
             class_ids, config: TrainConfig) -> float:
    """Percent of argmax-correct prompted predictions, softmax restricted
    to the given class subset."""
    class_ids = list(class_ids)
    label_pos = {c: i for i, c in enumerate(class_ids)}
    kwargs = _forward_kwargs(config)
    correct = 0
    with no_grad():
        for image, label in samples:
            out = forward(image, prompts, encoder, class_ids, **kwargs)
            correct += int(np.argmax(out.p.data) == label_pos[label])
    return 100.0 * correct / len(samples)


def zero_shot_accuracy(encoder: FrozenEncoder, samples, class_ids,
                       config: TrainConfig) -> float:
    from .encoder import class_probabilities
    class_ids = list(class_ids)
    label_pos = {c: i for i, c in enumerate(class_ids)}
    w_prime = encoder.class_text_features(class_ids, config.text_pool)
    correct = 0
    for image, label in samples:
        p = class_probabilities(encoder.image_feature(image), w_prime,
                                config.temperature)
        correct += int(np.argmax(p) == label_pos[label])
    return 100.0 * correct / len(samples)


def evaluate(encoder: FrozenEncoder, prompts: PromptSet, task: FewShotTask,
             config: TrainConfig) -> dict:
    """Base and new accuracy (each over its own class subset) plus their
    harmonic mean."""
    base = accuracy(encoder, prompts, task.base_test, task.base_classes, config)
    new = accuracy(encoder, prompts, task.new_test, task.new_classes, config)
    return {"base_acc": base, "new_acc": new, "hm": harmonic_mean(base, new)}


@dataclass
class EvalReport:
    """Seed-averaged base-to-new evaluation."""

    base_acc: float
    new_acc: float
    hm: float
    per_seed: list[dict]
    config_hash: str

    def __post_init__(self):
        expected = harmonic_mean(self.base_acc, self.new_acc)
        if self.base_acc + self.new_acc > 0 and abs(self.hm - expected) > 1e-9:
            raise ValueError("harmonic mean does not match its closed form")


def aggregate_reports(per_seed: list[dict], config: TrainConfig) -> EvalReport:
    base = float(np.mean([r["base_acc"] for r in per_seed]))
    new = float(np.mean([r["new_acc"] for r in per_seed]))
    return EvalReport(base_acc=base, new_acc=new, hm=harmonic_mean(base, new),
                      per_seed=per_seed, config_hash=config.hash())


# -- difficulty probing -------------------------------------------------------

PROBE_BUCKETS = 5


def alpha_bucket(alpha: float, cap: float) -> int:
    """Index of alpha within five equal bins partitioning [0, cap]."""
    width = cap / PROBE_BUCKETS
    return min(int(alpha / width), PROBE_BUCKETS - 1)


def probe_dump(encoder: FrozenEncoder, prompts: PromptSet, task: FewShotTask,
               config: TrainConfig) -> list[dict]:
    """Per-train-sample difficulty records: prompted and zero-shot label
    probabilities, the weight alpha, and its bin."""
    from .objective import sample_weight

    class_ids = list(task.base_classes)
    label_pos = {c: i for i, c in enumerate(class_ids)}
    frozen = _frozen_cache(encoder, task.train, class_ids, config.text_pool)
    kwargs = _forward_kwargs(config)
    records = []
    with no_grad():
        for idx, (image, label) in enumerate(task.train):
            out = forward(image, prompts, encoder, class_ids, **kwargs)
            p = float(out.p.data[label_pos[label]])
            q = float(frozen[idx].p_zero_shot[label_pos[label]])
            alpha = sample_weight(q, p, config.gamma, config.alpha_cap,
                                  config.alpha_clip)
            records.append({"sample_id": idx, "p": p, "q": q, "alpha": alpha,
                            "bucket": alpha_bucket(alpha, config.alpha_cap)})
    return records


def probe_csv(records: list[dict], config_text: str) -> str:
    lines = [f"# {line}" for line in config_text.rstrip("\n").splitlines()]
    lines.append("sample_id,p,q,alpha,bucket")
    for r in records:
        lines.append(",".join([str(r["sample_id"]), format_value(r["p"]),
                               format_value(r["q"]), format_value(r["alpha"]),
                               str(r["bucket"])]))
    return "\n".join(lines) + "\n"


# -- checkpoint assembly ------------------------------------------------------


def checkpoint_params(encoder: FrozenEncoder,
                      prompts: PromptSet) -> dict[str, np.ndarray]:
    """Named arrays in serialization order: encoder blocks first
    (prefixed "encoder/"), then the trainable prompt blocks."""
    params: dict[str, np.ndarray] = {}
    for name, t in encoder.parameters().items():
        params[f"encoder/{name}"] = t.data
    for name, t in prompts.parameters().items():
        params[name] = t.data
    return params


def restore(path) -> tuple[TrainConfig, FrozenEncoder, PromptSet, int]:
    """Rebuild config, encoder, and prompts from a checkpoint file.

    Class identities are task data and are regenerated from the task
    seed; the returned run seed is the one recorded at training time.
    """
    from .config import parse_config

    config_text, arrays = read_checkpoint(path)
    config = parse_config(config_text)
    encoder = FrozenEncoder(config.encoder_config())
    for name, t in encoder.parameters().items():
        stored = arrays[f"encoder/{name}"]
        if stored.shape != t.data.shape:
            raise ValueError(f"checkpoint encoder block {name}: shape "
                             f"{stored.shape} != {t.data.shape}")
        t.data[:] = stored
    prompts = init_prompts(config.encoder_config(), config.visual_prompts,
                           config.text_prompts, config.active_layers(), seed=0)
    prompts.load_arrays(arrays)
    return config, encoder, prompts, config.run_seed
