"""Mini-group training loop with hand-derived reverse-mode gradients.

The caption-branch loss is differentiated analytically through the chain
classifier logits -> prototype -> softmax -> MLP -> similarity entries ->
unit normalization -> raw region features, covering both paths by which a
region feature reaches the prototype (the direct weighted-sum term and the
term through the similarity matrix). `finite_diff_check` verifies the chain
against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._binio import (
    atomic_writer,
    expect_magic,
    read_f64_array,
    read_str,
    read_u32,
    write_f64_array,
    write_str,
    write_u32,
)
from .core import (
    DiscoveryHead,
    OpenVocabClassifier,
    head_forward,
    sigmoid,
    softplus,
    text_guide_weights,
)
from .corpus import ConceptGroupIndex, MiniGroup, sample_mini_group
from .errors import FormatError

CHECKPOINT_MAGIC = b"CODC"
_CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    group_size: int = 8
    mini_groups_per_batch: int = 4
    steps: int = 2000
    learning_rate: float = 0.01
    momentum: float = 0.9
    lambda_region_word: float = 0.1
    lambda_image_text: float = 0.1
    seed: int = 0
    hidden: int = 128
    temperature: float = 10.0
    eval_interval: int = 200
    text_guidance: bool = True
    sorted_rows: bool = False
    train_head: bool = True
    train_features: bool = True

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.mini_groups_per_batch < 1:
            raise ValueError("mini_groups_per_batch must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate < 0.0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.lambda_region_word < 0.0 or self.lambda_image_text < 0.0:
            raise ValueError("loss weights must be >= 0")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be > 0")
        if self.eval_interval < 0:
            raise ValueError("eval_interval must be >= 0")


@dataclass
class ModelState:
    head: DiscoveryHead
    classifier: OpenVocabClassifier
    features: dict[str, np.ndarray]
    train_head: bool = True
    train_features: bool = True


@dataclass
class BatchLoss:
    total: float
    region_word: float
    image_text: float

    def __float__(self) -> float:
        return self.total


@dataclass
class GradientBundle:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    features: dict[str, np.ndarray]


@dataclass
class SgdVelocity:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    features: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_for(cls, state: ModelState) -> "SgdVelocity":
        head = state.head
        return cls(
            np.zeros_like(head.w1),
            np.zeros_like(head.b1),
            np.zeros_like(head.w2),
            np.zeros_like(head.b2),
        )


@dataclass
class MetricRow:
    step: int
    total_loss: float
    region_word_loss: float
    image_text_loss: float
    cover_rate: float | None = None


def init_model(scenario, index: ConceptGroupIndex, config: TrainConfig,
               rng: np.random.Generator | None = None) -> ModelState:
    """Build the initial model: fresh head, frozen classifier over the index's
    retained concepts, and a learnable copy of the scenario's region features."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    concept_ids = index.concept_ids()
    if not concept_ids:
        raise ValueError("index retains no concepts")
    classifier = OpenVocabClassifier.from_table(scenario.text_table, concept_ids)
    n = scenario.feature_sets[0].n
    head = DiscoveryHead.initialize(
        m=config.group_size - 1, n=n, hidden=config.hidden, rng=rng,
        sorted_rows=config.sorted_rows,
    )
    features = {fs.image_id: fs.features.astype(np.float64, copy=True)
                for fs in scenario.feature_sets}
    return ModelState(head, classifier, features,
                      train_head=config.train_head, train_features=config.train_features)


def caption_batch_loss(
    state: ModelState,
    mini_groups: list[MiniGroup],
    caption_vectors: dict[str, np.ndarray],
    config: TrainConfig,
) -> tuple[BatchLoss, GradientBundle]:
    """Weighted caption-branch loss and its analytic gradients.

    Every image's features are materialized (and normalized) once per batch;
    each mini-group iterates the query cursor over all positions, with the
    region-word term averaged over positions and groups. The image-text term
    runs over the batch's distinct images paired with their caption proxies.

    Args:
        state: current model parameters.
        mini_groups: sampled mini-groups; concepts must be in the classifier.
        caption_vectors: image id -> frozen caption embedding proxy.
        config: supplies loss weights, temperature, and the guidance flag.

    Returns:
        (BatchLoss with unweighted components, GradientBundle matching state).
    """
    if not mini_groups:
        raise ValueError("batch contains no mini-groups")
    head = state.head
    weights = state.classifier.weights

    batch_ids: list[str] = []
    seen: set[str] = set()
    for group in mini_groups:
        if group.concept_id not in state.classifier.row_of:
            raise ValueError(f"concept {group.concept_id} not in classifier")
        for image_id in group.image_ids:
            if image_id not in seen:
                seen.add(image_id)
                batch_ids.append(image_id)

    raw: dict[str, np.ndarray] = {}
    norms: dict[str, np.ndarray] = {}
    hat: dict[str, np.ndarray] = {}
    for image_id in batch_ids:
        f = state.features[image_id]
        nrm = np.linalg.norm(f, axis=1, keepdims=True)
        if np.any(nrm == 0.0):
            raise ValueError(f"image {image_id!r}: zero feature row")
        raw[image_id] = f
        norms[image_id] = nrm
        hat[image_id] = f / nrm

    grads = GradientBundle(
        np.zeros_like(head.w1), np.zeros_like(head.b1),
        np.zeros_like(head.w2), np.zeros_like(head.b2),
        {image_id: np.zeros_like(raw[image_id]) for image_id in batch_ids},
    )
    ghat = {image_id: np.zeros_like(raw[image_id]) for image_id in batch_ids}

    guides: dict[int, np.ndarray] = {}
    num_groups = len(mini_groups)
    rw_mean = 0.0
    for group in mini_groups:
        cid = group.concept_id
        row = state.classifier.row_of[cid]
        if cid not in guides:
            if config.text_guidance:
                guides[cid] = text_guide_weights(weights[row])
            else:
                guides[cid] = np.ones(weights.shape[1])
        guide = guides[cid]
        ids = group.image_ids
        scale = config.lambda_region_word / (num_groups * len(ids))
        group_total = 0.0
        for q in range(len(ids)):
            qid = ids[q]
            support_ids = [ids[j] for j in range(len(ids)) if j != q]
            qw = hat[qid] * guide
            blocks = [qw @ hat[sid].T for sid in support_ids]
            values = np.concatenate(blocks, axis=1)
            net, z1, hidden, _, p, perms = head_forward(values, head)
            f_q = raw[qid]
            f_p = p @ f_q
            s = weights @ f_p
            group_total += float(softplus(-s[row]) + softplus(s).sum() - softplus(s[row]))

            if scale == 0.0:
                continue
            ds = sigmoid(s)
            ds[row] -= 1.0
            ds *= scale
            dfp = weights.T @ ds
            dp = f_q @ dfp
            grads.features[qid] += np.outer(p, dfp)
            dlogits = p * (dp - p @ dp)
            grads.w2 += hidden.T @ dlogits
            grads.b2 += dlogits.sum()
            dhidden = np.outer(dlogits, head.w2)
            dz1 = dhidden * (z1 > 0.0)
            grads.w1 += dz1.T @ net
            grads.b1 += dz1.sum(axis=0)
            dnet = dz1 @ head.w1
            if perms is not None:
                dvalues = np.empty_like(dnet)
                n = values.shape[0]
                for k, idx in enumerate(perms):
                    np.put_along_axis(
                        dvalues[:, k * n : (k + 1) * n], idx,
                        dnet[:, k * n : (k + 1) * n], axis=1,
                    )
            else:
                dvalues = dnet
            n = values.shape[0]
            dqw = np.zeros_like(qw)
            for k, sid in enumerate(support_ids):
                dblock = dvalues[:, k * n : (k + 1) * n]
                dqw += dblock @ hat[sid]
                ghat[sid] += dblock.T @ qw
            ghat[qid] += dqw * guide
        rw_mean += group_total / len(ids)
    rw_mean /= num_groups

    # Image-text branch over the batch's distinct images.
    v = np.stack([raw[image_id].mean(axis=0) for image_id in batch_ids])
    t = np.stack([caption_vectors[image_id] for image_id in batch_ids])
    vnorm = np.linalg.norm(v, axis=1, keepdims=True)
    tnorm = np.linalg.norm(t, axis=1, keepdims=True)
    if np.any(vnorm == 0.0) or np.any(tnorm == 0.0):
        raise ValueError("zero row in the image-text batch")
    vhat = v / vnorm
    that = t / tnorm
    logits = config.temperature * (vhat @ that.T)
    diag = np.diag(logits)
    batch = len(batch_ids)
    it_loss = float((softplus(-diag).sum() + softplus(logits).sum() - softplus(diag).sum())
                    / batch)
    if config.lambda_image_text != 0.0:
        dlogits = sigmoid(logits)
        dlogits[np.diag_indices(batch)] -= 1.0
        dlogits *= config.lambda_image_text / batch
        dvhat = config.temperature * (dlogits @ that)
        proj = (dvhat * vhat).sum(axis=1, keepdims=True)
        dv = (dvhat - proj * vhat) / vnorm
        for a, image_id in enumerate(batch_ids):
            grads.features[image_id] += dv[a] / raw[image_id].shape[0]

    # Unit-normalization backward, applied once per image (linear in upstream).
    for image_id in batch_ids:
        g = ghat[image_id]
        h = hat[image_id]
        proj = (g * h).sum(axis=1, keepdims=True)
        grads.features[image_id] += (g - proj * h) / norms[image_id]

    total = config.lambda_region_word * rw_mean + config.lambda_image_text * it_loss
    return BatchLoss(total, rw_mean, it_loss), grads


def sgd_step(
    state: ModelState,
    grads: GradientBundle,
    lr: float,
    momentum: float,
    velocity: SgdVelocity | None = None,
) -> SgdVelocity:
    """In-place SGD with momentum: v = momentum*v + g; param -= lr*v.

    Frozen groups (classifier always; head/features per state flags) are
    untouched. Feature velocities live per image and update lazily when that
    image receives a gradient. Returns the velocity state to thread through
    subsequent steps.
    """
    if velocity is None:
        velocity = SgdVelocity.zeros_for(state)
    if state.train_head:
        for name in ("w1", "b1", "w2", "b2"):
            vel = getattr(velocity, name)
            vel *= momentum
            vel += getattr(grads, name)
            param = getattr(state.head, name)
            param -= lr * vel
            if not np.all(np.isfinite(param)):
                raise ValueError(f"non-finite head parameter {name} after update")
    if state.train_features:
        for image_id, grad in grads.features.items():
            vel = velocity.features.get(image_id)
            if vel is None:
                vel = velocity.features[image_id] = np.zeros_like(grad)
            vel *= momentum
            vel += grad
            state.features[image_id] -= lr * vel
            if not np.all(np.isfinite(state.features[image_id])):
                raise ValueError(f"non-finite features for image {image_id!r} after update")
    return velocity


def run_training(
    index: ConceptGroupIndex,
    scenario,
    config: TrainConfig,
    eval_seed: int | None = None,
) -> tuple[ModelState, list[MetricRow]]:
    """Train for config.steps batches of uniformly sampled mini-groups.

    Emits one MetricRow per step; every config.eval_interval steps (and on the
    final step) the row carries the region-region cover rate computed with a
    fixed evaluation seed.
    """
    rng = np.random.default_rng(config.seed)
    state = init_model(scenario, index, config, rng)
    caption_vectors = {
        record.image_id: scenario.text_table.caption_embedding(record.concepts)
        for record in scenario.records
    }
    concepts = index.concept_ids()
    if eval_seed is None:
        eval_seed = int(np.random.SeedSequence(entropy=config.seed,
                                               spawn_key=(1,)).generate_state(1)[0])
    metrics: list[MetricRow] = []
    velocity: SgdVelocity | None = None
    for step in range(1, config.steps + 1):
        picks = rng.integers(0, len(concepts), size=config.mini_groups_per_batch)
        groups = [
            sample_mini_group(index, concepts[int(i)], config.group_size, rng)
            for i in picks
        ]
        loss, grads = caption_batch_loss(state, groups, caption_vectors, config)
        velocity = sgd_step(state, grads, config.learning_rate, config.momentum, velocity)
        cover = None
        if config.eval_interval > 0 and (step % config.eval_interval == 0
                                         or step == config.steps):
            from .evaluation import compare_strategies

            report = compare_strategies(
                state, scenario, index, ("region_region",),
                group_size=config.group_size, seed=eval_seed,
                text_guidance=config.text_guidance,
            )
            cover = report.cover_rates["region_region"]
        metrics.append(MetricRow(step, loss.total, loss.region_word, loss.image_text, cover))
    return state, metrics


def finite_diff_check(
    state: ModelState,
    mini_groups: list[MiniGroup],
    caption_vectors: dict[str, np.ndarray],
    config: TrainConfig,
    selector: str,
    eps: float = 1e-5,
    num_coords: int = 64,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients to central finite differences.

    Args:
        selector: one of "w1", "b1", "w2", "b2", "features" (all images).
        eps: central-difference step, must lie in [1e-7, 1e-3].
        num_coords: coordinates sampled per parameter group (capped at the
            group's size).

    Returns:
        Max over sampled coordinates of |analytic - numeric| /
        max(1e-12, |analytic| + |numeric|). Coordinates whose error looks like
        a ReLU kink straddle are retried with eps/8 (twice), keeping the best
        estimate; a genuinely wrong analytic gradient does not improve under a
        smaller step.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must be in [1e-7, 1e-3]")
    if rng is None:
        rng = np.random.default_rng(0)
    _, grads = caption_batch_loss(state, mini_groups, caption_vectors, config)
    if selector in ("w1", "b1", "w2", "b2"):
        pairs = [(getattr(state.head, selector), getattr(grads, selector))]
    elif selector == "features":
        pairs = [(state.features[i], grads.features[i]) for i in sorted(grads.features)]
    else:
        raise ValueError(f"unknown parameter selector {selector!r}")

    sizes = [param.size for param, _ in pairs]
    total = int(np.sum(sizes))
    count = min(num_coords, total)
    coords = rng.choice(total, size=count, replace=False)

    def numeric(param: np.ndarray, flat_index: int, step: float) -> float:
        original = param.flat[flat_index]
        param.flat[flat_index] = original + step
        plus = caption_batch_loss(state, mini_groups, caption_vectors, config)[0].total
        param.flat[flat_index] = original - step
        minus = caption_batch_loss(state, mini_groups, caption_vectors, config)[0].total
        param.flat[flat_index] = original
        return (plus - minus) / (2.0 * step)

    def rel_error(a: float, b: float) -> float:
        return abs(a - b) / max(1e-12, abs(a) + abs(b))

    worst = 0.0
    offsets = np.cumsum([0] + sizes)
    for coord in coords:
        coord = int(coord)
        which = int(np.searchsorted(offsets, coord, side="right")) - 1
        param, grad = pairs[which]
        flat_index = coord - int(offsets[which])
        analytic = float(grad.flat[flat_index])
        step = eps
        err = rel_error(analytic, numeric(param, flat_index, step))
        retries = 0
        while err >= 1e-4 and retries < 2:
            step /= 8.0
            err = min(err, rel_error(analytic, numeric(param, flat_index, step)))
            retries += 1
        worst = max(worst, err)
    return worst


def write_metrics_csv(metrics: list[MetricRow], path: str) -> None:
    """CSV stream `step,total_loss,region_word_loss,image_text_loss,cover_rate`;
    the cover column is blank between evaluation intervals."""
    with atomic_writer(path, "w") as fh:
        fh.write("step,total_loss,region_word_loss,image_text_loss,cover_rate\n")
        for row in metrics:
            cover = "" if row.cover_rate is None else repr(row.cover_rate)
            fh.write(f"{row.step},{row.total_loss!r},{row.region_word_loss!r},"
                     f"{row.image_text_loss!r},{cover}\n")


def save_checkpoint(state: ModelState, path: str) -> None:
    """Binary CODC container holding head, classifier, and feature store."""
    head = state.head
    k, d = state.classifier.weights.shape
    image_ids = list(state.features)
    n = state.features[image_ids[0]].shape[0] if image_ids else 0
    for image_id in image_ids:
        if state.features[image_id].shape != (n, d):
            raise ValueError(f"image {image_id!r}: inconsistent feature shape")
    flags = (int(state.train_head) | (int(state.train_features) << 1)
             | (int(head.sorted_rows) << 2))
    with atomic_writer(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for value in (_CHECKPOINT_VERSION, head.hidden, head.in_dim, d, k, n, flags):
            write_u32(fh, value)
        for arr in (head.w1, head.b1, head.w2, head.b2):
            write_f64_array(fh, arr)
        for cid in state.classifier.concept_ids:
            write_u32(fh, cid)
        write_f64_array(fh, state.classifier.weights)
        write_u32(fh, len(image_ids))
        for image_id in image_ids:
            write_str(fh, image_id)
            write_f64_array(fh, state.features[image_id])


def load_checkpoint(path: str) -> ModelState:
    with open(path, "rb") as fh:
        expect_magic(fh, CHECKPOINT_MAGIC)
        version = read_u32(fh)
        if version != _CHECKPOINT_VERSION:
            raise FormatError(f"unsupported CODC version {version}")
        hidden, in_dim, d, k, n, flags = (read_u32(fh) for _ in range(6))
        w1 = read_f64_array(fh, hidden * in_dim).reshape(hidden, in_dim)
        b1 = read_f64_array(fh, hidden)
        w2 = read_f64_array(fh, hidden)
        b2 = read_f64_array(fh, 1)
        head = DiscoveryHead(w1, b1, w2, b2, sorted_rows=bool(flags & 4))
        concept_ids = [read_u32(fh) for _ in range(k)]
        weights = read_f64_array(fh, k * d).reshape(k, d)
        classifier = OpenVocabClassifier(weights, concept_ids)
        features: dict[str, np.ndarray] = {}
        for _ in range(read_u32(fh)):
            image_id = read_str(fh)
            features[image_id] = read_f64_array(fh, n * d).reshape(n, d)
        return ModelState(head, classifier, features,
                          train_head=bool(flags & 1), train_features=bool(flags & 2))
