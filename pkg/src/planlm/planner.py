"""External planner: predict the next writing action from prior sentences.

Each context sentence embedding gets an absolute position embedding added, a
small Transformer encoder (full self-attention, no causal mask) contextualizes
the set, the outputs are mean-pooled, and a linear head scores the K actions.
The head matrix is initialized with the action centroids so that action
geometry is available from step zero. An empty context is represented by a
single learned "begin" embedding.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ValidationError

# one training/eval example: per-article (sentence embeddings, action ids)
ArticlePlan = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class PlannerConfig:
    dim: int
    n_actions: int
    n_layers: int = 2
    n_heads: int = 4
    context_limit: int = 64          # most recent sentences kept
    arch: str = "transformer"        # "transformer" | "mlp" (single pooled vector)
    head_init: str = "centroids"     # "centroids" | "random"

    def __post_init__(self):
        if self.arch not in ("transformer", "mlp"):
            raise ValidationError(f"unknown planner arch {self.arch!r}")
        if self.head_init not in ("centroids", "random"):
            raise ValidationError(f"unknown head init {self.head_init!r}")
        if self.context_limit < 1:
            raise ValidationError("context_limit must be >= 1")


@dataclass
class PlannerMetrics:
    accuracy: float
    average_rank: float
    n_examples: int


class PlannerModel:
    def __init__(self, config: PlannerConfig, rng: np.random.Generator,
                 centroids: np.ndarray | None = None):
        d, k = config.dim, config.n_actions
        self.config = config
        self.invocations = 0
        self.pos = nn.normal_param(rng, (config.context_limit, d))
        self.begin = nn.normal_param(rng, (d,))
        if config.arch == "transformer":
            self.blocks = [nn.Block(rng, d, config.n_heads, causal=False)
                           for _ in range(config.n_layers)]
            self.ln_f = nn.LayerNorm(d)
            self.mlp1 = self.mlp2 = None
        else:
            self.blocks = []
            self.ln_f = None
            self.mlp1 = nn.Linear(rng, d, 4 * d)
            self.mlp2 = nn.Linear(rng, 4 * d, d)
        if config.head_init == "centroids":
            if centroids is None:
                raise ValidationError("centroid head init requires centroids")
            if centroids.shape != (k, d):
                raise ValidationError(
                    f"centroids shape {centroids.shape} != ({k}, {d})")
            self.w_o = Tensor(centroids.astype(np.float32).copy(),
                              requires_grad=True)
        else:
            self.w_o = nn.normal_param(rng, (k, d))
        self.b = nn.zeros_param((k,))

    # -- parameters ------------------------------------------------------------

    def params_dict(self) -> dict[str, Tensor]:
        out = {"planner.pos": self.pos, "planner.begin": self.begin,
               "planner.w_o": self.w_o, "planner.b": self.b}
        for i, block in enumerate(self.blocks):
            out.update(block.params(f"planner.layer{i}"))
        if self.ln_f is not None:
            out.update(self.ln_f.params("planner.ln_f"))
        if self.mlp1 is not None:
            out.update(self.mlp1.params("planner.mlp1"))
            out.update(self.mlp2.params("planner.mlp2"))
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.values.copy() for k, v in self.params_dict().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in self.params_dict().items():
            v.values = snap[k].copy()

    # -- forward -----------------------------------------------------------------

    def _context_batch(self, contexts: np.ndarray | None, batch: int) -> Tensor:
        """(B, L, d) inputs; None means the learned begin embedding (L = 1)."""
        d = self.config.dim
        if contexts is None:
            zero = Tensor(np.zeros((batch, 1, d), dtype=np.float32))
            return zero + self.begin.reshape(1, 1, d)
        return Tensor(contexts.astype(np.float32, copy=False))

    def logits_batch(self, contexts: np.ndarray | None, batch: int) -> Tensor:
        """Scores over actions for a batch of equal-length contexts."""
        x = self._context_batch(contexts, batch)
        length = x.shape[1]
        if length > self.config.context_limit:
            raise ValidationError(
                f"context of {length} exceeds limit {self.config.context_limit}")
        self.invocations += batch
        if self.config.arch == "transformer":
            pos = ad.embedding(self.pos, np.arange(length))
            x = x + pos
            for block in self.blocks:
                x = block(x)
            pooled = self.ln_f(x).mean(axis=1)
        else:
            pooled = x.mean(axis=1)
            pooled = self.mlp2(ad.gelu(self.mlp1(pooled)))
        return (pooled @ self.w_o.swapaxes(0, 1)) + self.b

    def forward_probs(self, context: np.ndarray) -> np.ndarray:
        """Probability vector over actions given sentence embeddings so far.

        Keeps only the most recent context_limit sentences; an empty context
        uses the learned begin embedding.
        """
        context = np.asarray(context, dtype=np.float32)
        if context.size == 0:
            logits = self.logits_batch(None, 1)
        else:
            kept = context[-self.config.context_limit:]
            logits = self.logits_batch(kept[None, :, :], 1)
        return logits.softmax().values[0]

    def predict_next_action(self, context: np.ndarray) -> int:
        return int(self.forward_probs(context).argmax())


def predict_actions_for_article(model: PlannerModel,
                                embeddings: np.ndarray) -> list[int]:
    """Greedy next-action predictions, teacher-forcing the real sentences."""
    return [model.predict_next_action(embeddings[:i])
            for i in range(embeddings.shape[0])]


# -- training ----------------------------------------------------------------------


def _length_buckets(articles: Sequence[ArticlePlan], limit: int,
                    ) -> dict[int, list[tuple[int, int]]]:
    """Group (article, position) samples by effective context length."""
    buckets: dict[int, list[tuple[int, int]]] = {}
    for art_idx, (embeddings, actions) in enumerate(articles):
        m = len(actions)
        if embeddings.shape[0] != m:
            raise ValidationError("embeddings/actions length mismatch")
        for i in range(m):
            buckets.setdefault(min(i, limit), []).append((art_idx, i))
    return buckets


def _batch_arrays(articles: Sequence[ArticlePlan], samples: list[tuple[int, int]],
                  length: int, limit: int) -> tuple[np.ndarray | None, np.ndarray]:
    targets = np.array([articles[a][1][i] for a, i in samples], dtype=np.int64)
    if length == 0:
        return None, targets
    ctx = np.stack([articles[a][0][max(0, i - limit):i] for a, i in samples])
    return ctx.astype(np.float32), targets


def _iter_batches(articles, buckets, batch_size, rng):
    """Deterministically shuffled batches of equal-length contexts."""
    batches = []
    for length, samples in sorted(buckets.items()):
        samples = list(samples)
        if rng is not None:
            rng.shuffle(samples)
        for i in range(0, len(samples), batch_size):
            batches.append((length, samples[i:i + batch_size]))
    if rng is not None:
        order = rng.permutation(len(batches))
        batches = [batches[i] for i in order]
    return batches


def _dataset_cross_entropy(model: PlannerModel, articles: Sequence[ArticlePlan],
                           batch_size: int) -> float:
    buckets = _length_buckets(articles, model.config.context_limit)
    total = np.float64(0.0)
    count = 0
    for length, samples in _iter_batches(articles, buckets, batch_size, rng=None):
        ctx, targets = _batch_arrays(articles, samples, length,
                                     model.config.context_limit)
        logits = model.logits_batch(ctx, len(samples))
        loss = ad.cross_entropy(logits, targets)
        total += np.float64(loss.item()) * len(samples)
        count += len(samples)
    return float(total / count)


def train_planner(model: PlannerModel, train: Sequence[ArticlePlan],
                  val: Sequence[ArticlePlan], batch_size: int = 32,
                  lr: float = 1e-4, max_epochs: int = 20, patience: int = 3,
                  seed: int = 0) -> dict:
    """Cross-entropy training of next-action prediction with early stopping.

    Validation cross-entropy is checked once per epoch; training stops after
    `patience` evaluations without improvement and the best parameters are
    restored.
    """
    params = list(model.params_dict().values())
    opt = ad.Adam(params, lr=lr)
    buckets = _length_buckets(train, model.config.context_limit)
    history: dict = {"train_loss": [], "val_loss": []}
    best_val = np.inf
    best_snap = model.snapshot()
    since_best = 0

    for epoch in range(max_epochs):
        rng = np.random.default_rng((seed, epoch))
        epoch_loss = np.float64(0.0)
        n = 0
        for length, samples in _iter_batches(train, buckets, batch_size, rng):
            ctx, targets = _batch_arrays(train, samples, length,
                                         model.config.context_limit)
            loss = ad.cross_entropy(model.logits_batch(ctx, len(samples)),
                                    targets)
            ad.backward(loss)
            opt.step()
            epoch_loss += np.float64(loss.item()) * len(samples)
            n += len(samples)
        history["train_loss"].append(float(epoch_loss / n))

        val_loss = _dataset_cross_entropy(model, val, batch_size) if val else \
            history["train_loss"][-1]
        history["val_loss"].append(val_loss)
        if val_loss < best_val - 1e-6:
            best_val = val_loss
            best_snap = model.snapshot()
            since_best = 0
        else:
            since_best += 1
            if since_best >= patience:
                break

    model.restore(best_snap)
    history["best_val_loss"] = float(best_val)
    return history


def evaluate_planner(model: PlannerModel, data: Sequence[ArticlePlan],
                     batch_size: int = 64, tie_noise: float = 0.0,
                     noise_seed: int = 0) -> PlannerMetrics:
    """Accuracy and average oracle rank on held-out articles.

    Rank of the oracle action is 1 + the number of actions scoring strictly
    higher (optimistic on exact ties); `tie_noise` optionally adds tiny
    symmetric noise to the scores so that ties resolve uniformly.
    """
    buckets = _length_buckets(data, model.config.context_limit)
    rng = np.random.default_rng(noise_seed)
    hits = 0
    rank_total = 0
    count = 0
    for length, samples in _iter_batches(data, buckets, batch_size, rng=None):
        ctx, targets = _batch_arrays(data, samples, length,
                                     model.config.context_limit)
        scores = model.logits_batch(ctx, len(samples)).values.astype(np.float64)
        if tie_noise > 0.0:
            scores = scores + tie_noise * rng.standard_normal(scores.shape)
        rows = np.arange(len(samples))
        oracle_scores = scores[rows, targets]
        hits += int((scores.argmax(axis=1) == targets).sum())
        rank_total += int((scores > oracle_scores[:, None]).sum() + len(samples))
        count += len(samples)
    if count == 0:
        raise ValidationError("evaluate_planner needs at least one example")
    return PlannerMetrics(accuracy=hits / count, average_rank=rank_total / count,
                          n_examples=count)


# -- persistence --------------------------------------------------------------------


def planner_meta(model: PlannerModel) -> dict:
    return {"kind": "planner", "config": asdict(model.config)}


def planner_from_checkpoint(sections: dict[str, np.ndarray],
                            meta: dict) -> PlannerModel:
    if meta.get("kind") != "planner":
        raise ValidationError("checkpoint is not a planner")
    cfg_dict = copy.deepcopy(meta["config"])
    cfg_dict["head_init"] = "random"  # weights come from the checkpoint
    config = PlannerConfig(**cfg_dict)
    model = PlannerModel(config, np.random.default_rng(0))
    nn.load_params(model.params_dict(), sections)
    model.config = PlannerConfig(**meta["config"])
    return model
