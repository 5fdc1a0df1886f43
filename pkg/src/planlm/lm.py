"""Decoder-only language model with action conditioning.

Two conditioning styles:

* adapter: per adapted layer l (the last L layers), an action embedding table
  and a projection produce r_p = W_A E_A(a_{p+1}), added elementwise to the
  attention context at every position just before the attention output
  projection. No gating. The base LM stays frozen while adapters train.
* insert: the vocabulary is extended by one token per action and each
  sentence's tokens are preceded by its action token; all parameters train.

The action merged at position p is the action of the text unit containing the
token at position p+1, because the prediction at p scores that next token.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, asdict
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import evaluation
from . import nn
from .autodiff import Tensor
from .corpus import TokenStream
from .errors import ValidationError

REGIMES = ("none", "fixed", "oracle", "predicted_oa", "predicted_pa")
STYLES = ("adapter", "insert")
LOCI = ("external", "internal")

FIXED_ACTION_ID = 0


@dataclass(frozen=True)
class Regime:
    """Which actions the LM sees, and how they are presented."""

    actions: str
    style: str = "adapter"
    locus: str = "external"

    def __post_init__(self):
        if self.actions not in REGIMES:
            raise ValidationError(f"unknown regime {self.actions!r}")
        if self.style not in STYLES:
            raise ValidationError(f"unknown style {self.style!r}")
        if self.locus not in LOCI:
            raise ValidationError(f"unknown locus {self.locus!r}")
        if self.locus == "internal" and self.style != "insert":
            raise ValidationError("an internal planner requires insert style")

    @property
    def needs_planner(self) -> bool:
        return self.actions in ("predicted_oa", "predicted_pa") or (
            self.style == "insert" and self.locus == "external")


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    d_model: int = 256
    n_layers: int = 4
    n_heads: int = 4
    context_window: int = 128


@dataclass(frozen=True)
class AdapterConfig:
    n_actions: int
    action_dim: int
    adapted_layers: int          # L: adapters live in the last L layers
    init: str = "centroids"      # "centroids" | "random"
    share_tables: bool = False


class BaseLM:
    def __init__(self, config: LmConfig, rng: np.random.Generator):
        self.config = config
        d = config.d_model
        self.tok_emb = nn.normal_param(rng, (config.vocab_size, d))
        self.pos_emb = nn.normal_param(rng, (config.context_window, d))
        self.blocks = [nn.Block(rng, d, config.n_heads, causal=True)
                       for _ in range(config.n_layers)]
        self.ln_f = nn.LayerNorm(d)
        self.out = nn.Linear(rng, d, config.vocab_size)

    def params_dict(self) -> dict[str, Tensor]:
        out = {"lm.tok_emb": self.tok_emb, "lm.pos_emb": self.pos_emb}
        for i, block in enumerate(self.blocks):
            out.update(block.params(f"lm.layer{i}"))
        out.update(self.ln_f.params("lm.ln_f"))
        out.update(self.out.params("lm.out"))
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.values.copy() for k, v in self.params_dict().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in self.params_dict().items():
            v.values = snap[k].copy()

    def forward(self, ids: np.ndarray, adapter: "ActionAdapter | None" = None,
                actions: np.ndarray | None = None,
                action_noise: np.ndarray | None = None) -> Tensor:
        """(B, T) token ids -> (B, T, V) logits.

        With an adapter, `actions` holds the per-position conditioning action
        ids; `action_noise` optionally perturbs the looked-up action embedding
        (shared across adapted layers).
        """
        ids = np.asarray(ids)
        b, t = ids.shape
        if t > self.config.context_window:
            raise ValidationError(
                f"sequence of {t} exceeds context window "
                f"{self.config.context_window}")
        x = ad.embedding(self.tok_emb, ids) + ad.embedding(self.pos_emb,
                                                           np.arange(t))
        first_adapted = self.config.n_layers - adapter.config.adapted_layers \
            if adapter is not None else self.config.n_layers
        for i, block in enumerate(self.blocks):
            extra = None
            if adapter is not None and i >= first_adapted:
                extra = adapter.reps(i - first_adapted, actions, action_noise)
            x = block(x, extra_context=extra)
        return self.out(self.ln_f(x))


class ActionAdapter:
    """Per-layer action embedding tables and projections, no gating."""

    def __init__(self, config: AdapterConfig, lm_config: LmConfig,
                 rng: np.random.Generator, centroids: np.ndarray | None = None):
        if not 1 <= config.adapted_layers <= lm_config.n_layers:
            raise ValidationError(
                f"adapted_layers={config.adapted_layers} out of range for "
                f"{lm_config.n_layers} layers")
        if config.init not in ("centroids", "random"):
            raise ValidationError(f"unknown adapter init {config.init!r}")
        self.config = config
        self.lm_config = lm_config
        k, d, dm = config.n_actions, config.action_dim, lm_config.d_model

        def make_table() -> Tensor:
            if config.init == "centroids":
                if centroids is None:
                    raise ValidationError("centroid adapter init requires centroids")
                if centroids.shape != (k, d):
                    raise ValidationError(
                        f"centroids shape {centroids.shape} != ({k}, {d})")
                return Tensor(centroids.astype(np.float32).copy(),
                              requires_grad=True)
            return nn.normal_param(rng, (k, d))

        n_tables = 1 if config.share_tables else config.adapted_layers
        self.e_a = [make_table() for _ in range(n_tables)]
        self.w_a = [nn.normal_param(rng, (dm, d))
                    for _ in range(config.adapted_layers)]

    def table(self, slot: int) -> Tensor:
        return self.e_a[0] if self.config.share_tables else self.e_a[slot]

    def reps(self, slot: int, actions: np.ndarray,
             action_noise: np.ndarray | None = None) -> Tensor:
        """r = W_A E_A(a) for one adapted layer, shape (B, T, d_model)."""
        if actions is None:
            raise ValidationError("adapter forward requires per-position actions")
        emb = ad.embedding(self.table(slot), np.asarray(actions))
        if action_noise is not None:
            emb = emb + Tensor(action_noise.astype(np.float32, copy=False))
        return emb @ self.w_a[slot].swapaxes(0, 1)

    def layer_index(self, slot: int) -> int:
        return self.lm_config.n_layers - self.config.adapted_layers + slot

    def params_dict(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.config.share_tables:
            out["lm.adapter.shared.e_a"] = self.e_a[0]
        for slot in range(self.config.adapted_layers):
            layer = self.layer_index(slot)
            if not self.config.share_tables:
                out[f"lm.layer{layer}.adapter.e_a"] = self.e_a[slot]
            out[f"lm.layer{layer}.adapter.w_a"] = self.w_a[slot]
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.values.copy() for k, v in self.params_dict().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in self.params_dict().items():
            v.values = snap[k].copy()

    def embedding_std(self) -> float:
        """Empirical std across all action-embedding entries, all layers."""
        flat = np.concatenate([t.values.ravel() for t in self.e_a])
        return float(flat.std())


def adapter_forward(base: BaseLM, adapter: ActionAdapter | None,
                    token_ids: np.ndarray, per_position_actions: np.ndarray | None,
                    action_noise: np.ndarray | None = None) -> Tensor:
    """Logits of the conditioned model; with adapter=None this is the base LM."""
    return base.forward(token_ids, adapter=adapter, actions=per_position_actions,
                        action_noise=action_noise)


# -- action/position alignment ---------------------------------------------------


def select_action_for_position(stream: TokenStream, actions: Sequence[int],
                               p: int) -> int:
    """Action of the sentence containing token p+1 (last sentence past the end)."""
    n = len(stream)
    if not 0 <= p < n:
        raise ValidationError(f"position {p} out of range [0, {n})")
    sidx = stream.sentence_index_of_token
    j = int(sidx[p + 1]) if p + 1 < n else int(sidx[n - 1])
    return int(actions[j])


def per_position_actions(stream: TokenStream,
                         actions: Sequence[int]) -> np.ndarray:
    """Vectorized select_action_for_position over all positions."""
    sidx = stream.sentence_index_of_token
    action_arr = np.asarray(actions, dtype=np.int64)
    shifted = np.concatenate([sidx[1:], sidx[-1:]])
    return action_arr[shifted]


def constant_actions(length: int, action_id: int = FIXED_ACTION_ID) -> np.ndarray:
    return np.full(length, action_id, dtype=np.int64)


# -- insert style ------------------------------------------------------------------


def insert_style_sequence(stream: TokenStream, actions: Sequence[int],
                          vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Interleave action tokens: each sentence's tokens are preceded by a_j + V.

    A leading <bos> (sentence 0) stays at the very front. Returns the extended
    id sequence and a boolean mask marking the action-token positions.
    """
    from .corpus import BOS_ID

    ids = stream.token_ids
    sidx = stream.sentence_index_of_token
    out: list[int] = []
    is_action: list[bool] = []
    emitted: set[int] = set()
    for p in range(len(ids)):
        tok = int(ids[p])
        j = int(sidx[p])
        if tok != BOS_ID and j not in emitted:
            out.append(vocab_size + int(actions[j]))
            is_action.append(True)
            emitted.add(j)
        out.append(tok)
        is_action.append(False)
    return np.asarray(out, dtype=np.int64), np.asarray(is_action, dtype=bool)


def strip_action_tokens(extended_ids: np.ndarray, vocab_size: int) -> np.ndarray:
    """Inverse of the interleaving: drop ids >= V."""
    extended_ids = np.asarray(extended_ids)
    return extended_ids[extended_ids < vocab_size]


@dataclass
class InsertLM:
    """Base LM with the vocabulary extended by one token per action."""

    base: BaseLM
    n_text_tokens: int
    n_actions: int
    locus: str

    @property
    def extended_vocab(self) -> int:
        return self.n_text_tokens + self.n_actions


def extend_for_insert(base: BaseLM, n_actions: int, locus: str,
                      rng: np.random.Generator) -> InsertLM:
    """New rows for action tokens in both embedding and prediction layers."""
    if locus not in LOCI:
        raise ValidationError(f"unknown locus {locus!r}")
    v = base.config.vocab_size
    cfg = LmConfig(vocab_size=v + n_actions, d_model=base.config.d_model,
                   n_layers=base.config.n_layers, n_heads=base.config.n_heads,
                   context_window=base.config.context_window)
    extended = BaseLM(cfg, np.random.default_rng(0))
    snap = base.snapshot()
    for name, tensor in extended.params_dict().items():
        if name == "lm.tok_emb":
            tensor.values[:v] = snap[name]
            tensor.values[v:] = rng.normal(0, nn.INIT_STD,
                                           (n_actions, cfg.d_model)).astype(
                                               np.float32)
        elif name == "lm.out.w":
            tensor.values[:, :v] = snap[name]
            tensor.values[:, v:] = rng.normal(0, nn.INIT_STD,
                                              (cfg.d_model, n_actions)).astype(
                                                  np.float32)
        elif name == "lm.out.b":
            tensor.values[:v] = snap[name]
            tensor.values[v:] = 0.0
        else:
            tensor.values = snap[name].copy()
    return InsertLM(extended, v, n_actions, locus)


# -- training ---------------------------------------------------------------------


@dataclass
class WindowExample:
    inputs: np.ndarray
    targets: np.ndarray
    actions: np.ndarray | None
    mask: np.ndarray | None


def window_examples(ids: np.ndarray, window: int,
                    pp_actions: np.ndarray | None = None,
                    countable: np.ndarray | None = None) -> list[WindowExample]:
    """Non-overlapping training windows; targets shifted by one."""
    ids = np.asarray(ids)
    n = len(ids)
    out = []
    for s in range(0, max(n - 1, 0), window):
        chunk = ids[s:s + window + 1]
        if len(chunk) < 2:
            break
        inputs, targets = chunk[:-1], chunk[1:]
        acts = pp_actions[s:s + len(inputs)] if pp_actions is not None else None
        mask = None
        if countable is not None:
            mask = countable[s + 1:s + 1 + len(targets)].astype(np.float32)
            if mask.sum() == 0:
                continue
        out.append(WindowExample(inputs, targets, acts, mask))
    return out


def _batched(examples: list[WindowExample], batch_size: int,
             rng: np.random.Generator | None) -> list[list[WindowExample]]:
    buckets: dict[int, list[WindowExample]] = {}
    for ex in examples:
        buckets.setdefault(len(ex.inputs), []).append(ex)
    batches = []
    for _, group in sorted(buckets.items()):
        if rng is not None:
            order = rng.permutation(len(group))
            group = [group[i] for i in order]
        for i in range(0, len(group), batch_size):
            batches.append(group[i:i + batch_size])
    if rng is not None:
        order = rng.permutation(len(batches))
        batches = [batches[i] for i in order]
    return batches


def _batch_loss(forward: Callable[[np.ndarray, np.ndarray | None], Tensor],
                batch: list[WindowExample]) -> Tensor:
    ids = np.stack([ex.inputs for ex in batch])
    targets = np.stack([ex.targets for ex in batch])
    actions = np.stack([ex.actions for ex in batch]) \
        if batch[0].actions is not None else None
    mask = np.stack([ex.mask for ex in batch]) \
        if batch[0].mask is not None else None
    return ad.cross_entropy(forward(ids, actions), targets, mask)


def train_lm(forward: Callable[[np.ndarray, np.ndarray | None], Tensor],
             trainable: list[Tensor], examples: list[WindowExample],
             batch_size: int = 32, lr: float = 1e-4, max_epochs: int = 4,
             patience: int = 3, seed: int = 0,
             val_metric: Callable[[], float] | None = None,
             snapshot: Callable[[], dict] | None = None,
             restore: Callable[[dict], None] | None = None) -> dict:
    """Shared LM training loop.

    With `val_metric` (lower is better) the loop early-stops after `patience`
    non-improving epoch evaluations and restores the best snapshot; without it
    the budget is exactly `max_epochs` epochs.
    """
    opt = ad.Adam(trainable, lr=lr)
    history: dict = {"train_loss": [], "val_metric": []}
    best = np.inf
    best_snap = snapshot() if snapshot is not None else None
    since_best = 0
    for epoch in range(max_epochs):
        rng = np.random.default_rng((seed, epoch))
        total = np.float64(0.0)
        count = 0
        for batch in _batched(examples, batch_size, rng):
            loss = _batch_loss(forward, batch)
            ad.backward(loss)
            opt.step()
            total += np.float64(loss.item()) * len(batch)
            count += len(batch)
        history["train_loss"].append(float(total / max(count, 1)))
        if val_metric is None:
            continue
        score = val_metric()
        history["val_metric"].append(score)
        if score < best - 1e-9:
            best = score
            if snapshot is not None:
                best_snap = snapshot()
            since_best = 0
        else:
            since_best += 1
            if since_best >= patience:
                break
    if val_metric is not None and restore is not None and best_snap is not None:
        restore(best_snap)
        history["best_val_metric"] = float(best)
    return history


def pretrain_base(base: BaseLM, streams: Sequence[np.ndarray],
                  batch_size: int = 32, lr: float = 1e-4, max_epochs: int = 4,
                  seed: int = 0) -> dict:
    """Plain next-token pretraining on raw id streams, fixed epoch budget."""
    examples = []
    for ids in streams:
        examples.extend(window_examples(ids, base.config.context_window))
    params = list(base.params_dict().values())
    nn.set_trainable({str(i): p for i, p in enumerate(params)}, True)
    return train_lm(lambda ids, _: base.forward(ids), params, examples,
                    batch_size=batch_size, lr=lr, max_epochs=max_epochs,
                    seed=seed)


def finetune_adapter(base: BaseLM, adapter: ActionAdapter,
                     train_items: Sequence[tuple[np.ndarray, np.ndarray]],
                     val_items: Sequence[tuple[np.ndarray, np.ndarray]],
                     batch_size: int = 32, lr: float = 1e-4, max_epochs: int = 6,
                     patience: int = 3, seed: int = 0) -> dict:
    """Train only the adapter; the base LM is frozen bit-for-bit.

    Items are (token_ids, per_position_actions) per article; early stopping
    follows validation perplexity.
    """
    nn.set_trainable(base.params_dict(), False)
    nn.set_trainable(adapter.params_dict(), True)
    window = base.config.context_window
    examples = []
    for ids, acts in train_items:
        examples.extend(window_examples(ids, window, pp_actions=acts))

    def forward(ids, actions):
        return base.forward(ids, adapter=adapter, actions=actions)

    val_metric = None
    if val_items:
        scoring = [evaluation.ScoringItem(ids=ids, actions=acts)
                   for ids, acts in val_items]

        def val_metric():
            return evaluation.corpus_perplexity(
                lambda i, a: forward(i, a).values, scoring, window)

    try:
        history = train_lm(forward, list(adapter.params_dict().values()),
                           examples, batch_size=batch_size, lr=lr,
                           max_epochs=max_epochs, patience=patience, seed=seed,
                           val_metric=val_metric, snapshot=adapter.snapshot,
                           restore=adapter.restore)
    finally:
        nn.set_trainable(base.params_dict(), True)
    return history


def finetune_insert(insert_lm: InsertLM,
                    train_items: Sequence[tuple[np.ndarray, np.ndarray]],
                    val_items: Sequence[tuple[np.ndarray, np.ndarray]],
                    batch_size: int = 32, lr: float = 1e-4, max_epochs: int = 6,
                    patience: int = 3, seed: int = 0) -> dict:
    """Full-parameter finetuning on interleaved sequences.

    Items are (extended_ids, is_action_token) per article. With an external
    planner the loss is masked to text-token positions (actions are inputs,
    never targets); an internal planner learns the action tokens too.
    """
    base = insert_lm.base
    window = base.config.context_window
    external = insert_lm.locus == "external"
    examples = []
    for ext_ids, is_action in train_items:
        countable = ~is_action if external else None
        examples.extend(window_examples(ext_ids, window, countable=countable))
    nn.set_trainable(base.params_dict(), True)

    val_metric = None
    if val_items:
        scoring = [evaluation.ScoringItem(ids=ids, countable=~is_action)
                   for ids, is_action in val_items]

        def val_metric():
            return evaluation.corpus_perplexity(
                lambda i, a: base.forward(i).values, scoring, window)

    return train_lm(lambda ids, _: base.forward(ids),
                    list(base.params_dict().values()), examples,
                    batch_size=batch_size, lr=lr, max_epochs=max_epochs,
                    patience=patience, seed=seed, val_metric=val_metric,
                    snapshot=base.snapshot, restore=base.restore)


# -- persistence --------------------------------------------------------------------


def base_lm_meta(base: BaseLM) -> dict:
    return {"kind": "base_lm", "lm_config": asdict(base.config)}


def adapter_lm_meta(base: BaseLM, adapter: ActionAdapter, regime: Regime) -> dict:
    return {"kind": "adapter_lm", "lm_config": asdict(base.config),
            "adapter_config": asdict(adapter.config), "regime": asdict(regime)}


def insert_lm_meta(insert_lm: InsertLM, regime: Regime) -> dict:
    return {"kind": "insert_lm", "lm_config": asdict(insert_lm.base.config),
            "n_text_tokens": insert_lm.n_text_tokens,
            "n_actions": insert_lm.n_actions, "locus": insert_lm.locus,
            "regime": asdict(regime)}


def base_lm_from_checkpoint(sections: dict[str, np.ndarray],
                            meta: dict) -> BaseLM:
    if meta.get("kind") != "base_lm":
        raise ValidationError("checkpoint is not a base LM")
    base = BaseLM(LmConfig(**meta["lm_config"]), np.random.default_rng(0))
    nn.load_params(base.params_dict(), sections)
    return base


def adapter_lm_from_checkpoint(sections: dict[str, np.ndarray], meta: dict,
                               ) -> tuple[BaseLM, ActionAdapter, Regime]:
    if meta.get("kind") != "adapter_lm":
        raise ValidationError("checkpoint is not an adapter LM")
    lm_config = LmConfig(**meta["lm_config"])
    base = BaseLM(lm_config, np.random.default_rng(0))
    cfg_dict = copy.deepcopy(meta["adapter_config"])
    cfg_dict["init"] = "random"  # weights come from the checkpoint
    adapter = ActionAdapter(AdapterConfig(**cfg_dict), lm_config,
                            np.random.default_rng(0))
    params = {**base.params_dict(), **adapter.params_dict()}
    nn.load_params(params, sections)
    adapter.config = AdapterConfig(**meta["adapter_config"])
    return base, adapter, Regime(**meta["regime"])


def insert_lm_from_checkpoint(sections: dict[str, np.ndarray], meta: dict,
                              ) -> tuple[InsertLM, Regime]:
    if meta.get("kind") != "insert_lm":
        raise ValidationError("checkpoint is not an insert LM")
    base = BaseLM(LmConfig(**meta["lm_config"]), np.random.default_rng(0))
    nn.load_params(base.params_dict(), sections)
    insert_lm = InsertLM(base, meta["n_text_tokens"], meta["n_actions"],
                         meta["locus"])
    return insert_lm, Regime(**meta["regime"])
