"""Teacher-forced training: target construction, BCE over the step-by-frame
grid, Adam with decoupled weight decay, 5-fold splits, loss logging."""

import dataclasses
import os

import numpy as np

from .data_io import DataError
from .model import forward, init_params, save_checkpoint
from .numerics import Matrix, Tape, accumulate
from .segmentation import resolve_shots
from .selection import make_summary

CLAMP = 1e-7
LOG_HEADER = "epoch,split,loss,f_measure"


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    batch_size: int = 1
    seed: int = 0
    n_folds: int = 5
    clip_norm: float = 5.0  # 0 disables clipping
    target_mode: str = "grid"  # or "broadcast"
    eval_every: int = 0  # 0 = held-out F only after the last epoch

    def __post_init__(self):
        if self.epochs < 1 or self.learning_rate <= 0 or self.batch_size != 1:
            raise ValueError("epochs/learning_rate must be positive, batch_size is 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("bad Adam constants")
        if self.weight_decay < 0 or self.clip_norm < 0 or self.n_folds < 1:
            raise ValueError("weight_decay, clip_norm, n_folds must be >= 0")
        if self.target_mode not in ("grid", "broadcast"):
            raise ValueError("target_mode must be 'grid' or 'broadcast'")


# ---------------------------------------------------------------------------
# ground-truth summaries and targets


def consensus_scores(record) -> np.ndarray:
    """Average user annotation as a length-T score curve."""
    if record.user_scores is not None:
        return np.mean(record.user_scores, axis=0)
    if record.user_masks is not None:
        return np.mean(record.user_masks.astype(np.float64), axis=0)
    raise DataError("video %s has no user annotations" % record.video_id)


def ground_truth_frames(record, shots, ratio=0.15):
    """Key-shot summary frame indices from the consensus curve."""
    scores = np.clip(consensus_scores(record), 0.0, 1.0)
    result = make_summary(scores, shots, budget_ratio=ratio)
    frames = np.flatnonzero(result.keyframe_mask)
    if frames.size == 0:
        # degenerate consensus (all zero): fall back to the top-scoring shot
        # so the decoder always has at least one teacher step
        order = np.argsort([-scores[s:e].mean() for s, e in shots])
        s, e = shots[int(order[0])]
        frames = np.arange(s, min(e, s + max(1, result.budget)))
    return [int(f) for f in frames]


def build_targets(gt_summary, t, mode="grid") -> Matrix:
    """L x T target grid; rows are one-hot at each summary frame ("grid")
    or copies of the full binary summary vector ("broadcast")."""
    frames = [int(f) for f in gt_summary]
    if len(frames) == 0:
        raise ValueError("empty ground-truth summary")
    if any(not 0 <= f < t for f in frames):
        raise ValueError("summary frame out of range [0, %d)" % t)
    if len(set(frames)) != len(frames):
        raise ValueError("duplicate summary frames %r" % frames)
    if frames != sorted(frames):
        raise ValueError("summary frames must be sorted")
    y = np.zeros((len(frames), t))
    if mode == "grid":
        y[np.arange(len(frames)), frames] = 1.0
    elif mode == "broadcast":
        y[:, frames] = 1.0
    else:
        raise ValueError("unknown target mode %r" % mode)
    return Matrix.wrap(y)


def bce_loss(p: Matrix, y: Matrix, t, tape=None) -> Matrix:
    """-(1/t) * sum over the L x T grid of y log p + (1-y) log(1-p).

    Predictions are clamped to [1e-7, 1-1e-7]; no gradient flows where the
    clamp is active.
    """
    if p.shape != y.shape:
        raise ValueError("prediction %r and target %r shapes differ"
                         % (p.shape, y.shape))
    pd, yd = p.data, y.data
    active = (pd > CLAMP) & (pd < 1.0 - CLAMP)
    pc = np.clip(pd, CLAMP, 1.0 - CLAMP)
    total = -(np.sum(yd * np.log(pc) + (1.0 - yd) * np.log1p(-pc))) / float(t)
    out = Matrix.wrap(np.array([[total]], dtype=pd.dtype))
    if tape is not None:
        def backward(g, grads):
            gv = g[0, 0]
            dp = np.where(active, -(yd / pc - (1.0 - yd) / (1.0 - pc)) / float(t), 0.0)
            accumulate(grads, p, (gv * dp).astype(pd.dtype))
        tape.record(out, (p,), backward)
    return out


# ---------------------------------------------------------------------------
# Adam with decoupled weight decay


class AdamState:
    def __init__(self, params):
        self.t = 0
        self.m = {name: np.zeros_like(m.data) for name, m in params.items()}
        self.v = {name: np.zeros_like(m.data) for name, m in params.items()}


def adam_step(params, state, config):
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    lr = config.learning_rate
    for name, mat in params.items():
        g = params.grad(name)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        if config.weight_decay:
            step = step + lr * config.weight_decay * mat.data
        params.assign(name, mat.data - step)


# ---------------------------------------------------------------------------
# splits


def make_splits(n_videos, n_folds, seed):
    """Disjoint covering folds; fold k holds out every n_folds-th video of a
    seeded shuffle (80/20 at the default 5 folds)."""
    if n_videos < n_folds:
        raise ValueError("need at least %d videos for %d folds" % (n_folds, n_folds))
    order = np.random.default_rng(seed).permutation(n_videos)
    splits = []
    for k in range(n_folds):
        test = np.sort(order[k::n_folds])
        train = np.sort(np.setdiff1d(order, test))
        splits.append((train.tolist(), test.tolist()))
    return splits


# ---------------------------------------------------------------------------
# training loop


@dataclasses.dataclass
class FoldResult:
    fold: int
    loss_curve: list
    f_measure: float | None
    params: object
    checkpoint_path: str | None


@dataclasses.dataclass
class TrainResult:
    folds: list
    log_path: str | None
    counters: dict


def _prep_video(record, model_config):
    shots = resolve_shots(record, max_shots=model_config.kts_max_shots or None,
                          penalty=model_config.kts_penalty)
    gt = ground_truth_frames(record, shots, model_config.summary_ratio)
    return record, shots, gt


def _held_out_f(records, model_config, params, mode=None):
    from .evaluation import evaluate_videos

    rows = evaluate_videos(records, model_config, params, mode=mode)
    return float(np.mean([r["f_measure"] for r in rows]))


def train(videos, model_config, train_config, out_dir=None, splits=None,
          folds=None, eval_mode=None):
    """Optimize per fold; returns TrainResult and (optionally) writes
    checkpoints plus a CSV loss log under out_dir."""
    if len(videos) == 0:
        raise DataError("empty dataset")
    if splits is None:
        if len(videos) >= train_config.n_folds > 1:
            splits = make_splits(len(videos), train_config.n_folds,
                                 train_config.seed)
        else:
            splits = [(list(range(len(videos))), [])]
    log_rows = [LOG_HEADER]
    counters = {"teacher_forced_steps": 0, "prediction_fed_steps": 0}
    results = []
    for fold, (train_idx, test_idx) in enumerate(splits):
        if folds is not None and fold not in folds:
            continue
        prepped = [_prep_video(videos[i], model_config) for i in train_idx]
        held_out = [videos[i] for i in test_idx]
        params = init_params(model_config, seed=model_config.seed + fold)
        state = AdamState(params)
        curve = []
        f_final = None
        for epoch in range(1, train_config.epochs + 1):
            losses = []
            for record, shots, gt in prepped:  # fixed order: reproducibility
                tape = Tape()
                probs = forward(record.features, shots, gt, model_config,
                                params, tape)
                targets = build_targets(gt, record.n_frames,
                                        train_config.target_mode)
                loss = bce_loss(probs, targets, record.n_frames, tape)
                params.zero_grads()
                params.pull(tape.backward(loss))
                if train_config.clip_norm:
                    norm = params.global_grad_norm()
                    if norm > train_config.clip_norm:
                        params.scale_grads(train_config.clip_norm / norm)
                adam_step(params, state, train_config)
                losses.append(loss.item())
                counters["teacher_forced_steps"] += 1
            mean_loss = float(np.mean(losses))
            curve.append(mean_loss)
            want_eval = held_out and (
                epoch == train_config.epochs
                or (train_config.eval_every
                    and epoch % train_config.eval_every == 0)
            )
            if want_eval:
                f_final = _held_out_f(held_out, model_config, params, eval_mode)
                log_rows.append("%d,%d,%.8f,%.4f" % (epoch, fold, mean_loss, f_final))
            else:
                log_rows.append("%d,%d,%.8f," % (epoch, fold, mean_loss))
        ckpt = None
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            ckpt = os.path.join(out_dir, "fold%d.ftnc" % fold)
            save_checkpoint(ckpt, model_config, params)
        results.append(FoldResult(fold, curve, f_final, params, ckpt))
    log_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "loss_log.csv")
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(log_rows) + "\n")
    return TrainResult(results, log_path, counters)
