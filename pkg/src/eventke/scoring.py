"""Convolutional triple scorer and the negative-sampling BCE objective.

A head/relation pair is scored against a tail by reshaping both vectors
to 2-D, stacking them, convolving, projecting back to d, and taking a
dot product with the tail embedding.  The trunk (everything before the
dot) depends only on (head, relation) and is shared across candidates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParameterStore, Tape, Tensor
from .kgdata import KnowledgeTriple

__all__ = [
    "ConvScorerConfig",
    "add_scorer_parameters",
    "conv_trunk",
    "conv_score",
    "score_against_all",
    "frozen_trunk",
    "NegativeSampler",
    "sample_negatives",
    "known_tails_from_triples",
    "triple_loss",
]


@dataclass
class ConvScorerConfig:
    rows: int = 8
    cols: int = 8
    filters: int = 32
    kernel: int = 3

    @property
    def dim(self) -> int:
        return self.rows * self.cols

    @property
    def flat_width(self) -> int:
        oh = 2 * self.rows - self.kernel + 1
        ow = self.cols - self.kernel + 1
        return self.filters * oh * ow

    def __post_init__(self) -> None:
        if min(self.rows, self.cols, self.filters, self.kernel) < 1:
            raise ValueError("scorer shape fields must be positive")
        if self.kernel > min(2 * self.rows, self.cols):
            raise ValueError(
                f"kernel {self.kernel} does not fit the stacked {2 * self.rows}x{self.cols} image"
            )


def add_scorer_parameters(store: ParameterStore, config: ConvScorerConfig, seed: int) -> None:
    """Filters and projection, drawn from a stream independent of the layers'."""
    rng = np.random.default_rng([seed, 303])
    k, f = config.kernel, config.filters
    limit = np.sqrt(6.0 / (k * k + f))
    store.add("conv_filters", rng.uniform(-limit, limit, size=(f, k, k)))
    fan_in = config.flat_width
    limit = np.sqrt(6.0 / (fan_in + config.dim))
    store.add("conv_projection", rng.uniform(-limit, limit, size=(config.dim, fan_in)))


def conv_trunk(
    tape: Tape, params: ParameterStore, config: ConvScorerConfig, s: Tensor, r: Tensor
) -> Tensor:
    """ReLU(project(flatten(ReLU(conv(stack(reshape s, reshape r)))))."""
    if s.data.shape != (config.dim,) or r.data.shape != (config.dim,):
        raise ValueError(f"scorer expects vectors of dim {config.dim}")
    image = tape.reshape2d(tape.concat(s, r), 2 * config.rows, config.cols)
    conv = tape.relu(tape.conv2d(image, params["conv_filters"]))
    flat = tape.flatten(conv)
    return tape.relu(tape.affine(params["conv_projection"], flat))


def conv_score(
    tape: Tape,
    params: ParameterStore,
    config: ConvScorerConfig,
    s: Tensor,
    r: Tensor,
    t: Tensor,
) -> Tensor:
    return tape.dot(conv_trunk(tape, params, config, s, r), t)


def score_against_all(
    tape: Tape,
    params: ParameterStore,
    config: ConvScorerConfig,
    s: Tensor,
    r: Tensor,
    candidates: Tensor,
) -> Tensor:
    """Scores of every row of the (m, d) candidate tensor, trunk computed once."""
    trunk = conv_trunk(tape, params, config, s, r)
    return tape.affine(candidates, trunk)


def frozen_trunk(
    params: ParameterStore, config: ConvScorerConfig, s: np.ndarray, r: np.ndarray
) -> np.ndarray:
    """Tape-free trunk for evaluation; must match conv_trunk to 1e-12."""
    image = np.concatenate([s, r]).reshape(2 * config.rows, config.cols)
    patches = np.lib.stride_tricks.sliding_window_view(
        image, (config.kernel, config.kernel)
    )
    conv = np.tensordot(params["conv_filters"].data, patches, axes=([1, 2], [2, 3]))
    flat = np.maximum(conv, 0.0).reshape(-1)
    return np.maximum(params["conv_projection"].data @ flat, 0.0)


def known_tails_from_triples(triples: list[KnowledgeTriple]) -> dict[tuple[int, int], set[int]]:
    out: dict[tuple[int, int], set[int]] = {}
    for h, r, t in triples:
        out.setdefault((h, r), set()).add(t)
    return out


class NegativeSampler:
    """Seeded corrupted-tail sampler; never returns the gold tail.

    With filtering on, no known-true tail for the query's (head, relation)
    is returned either.  Each (round, head, relation) triple derives its
    own child seed, so sampling is independent of query order.
    """

    def __init__(
        self,
        n_entities: int,
        k_neg: int,
        seed: int,
        known_tails: dict[tuple[int, int], set[int]] | None = None,
        filtered: bool = True,
    ) -> None:
        if k_neg < 0:
            raise ValueError("k_neg must be >= 0")
        self.n_entities = n_entities
        self.k_neg = k_neg
        self.seed = seed
        self.known_tails = known_tails or {}
        self.filtered = filtered

    def sample(self, h: int, r: int, gold_t: int, round_: int = 0) -> list[int]:
        return self._draw(h, r, {gold_t}, round_)

    def sample_group(self, h: int, r: int, gold_tails: list[int], round_: int = 0) -> list[int]:
        """Negatives for a grouped query; every gold tail is excluded."""
        return self._draw(h, r, set(gold_tails), round_)

    def _draw(self, h: int, r: int, excluded: set[int], round_: int) -> list[int]:
        if self.k_neg == 0:
            return []
        if self.filtered:
            excluded = excluded | self.known_tails.get((h, r), set())
        if self.n_entities - len(excluded) < 1:
            raise ValueError(
                f"no candidate negatives for query ({h}, {r}): all entities excluded"
            )
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, round_, h, r]))
        out: list[int] = []
        while len(out) < self.k_neg:
            draws = rng.integers(0, self.n_entities, size=self.k_neg - len(out))
            out.extend(int(x) for x in draws if int(x) not in excluded)
        return out


def sample_negatives(h: int, r: int, gold_t: int, sampler: NegativeSampler, round_: int = 0) -> list[int]:
    return sampler.sample(h, r, gold_t, round_)


def triple_loss(
    tape: Tape,
    params: ParameterStore,
    config: ConvScorerConfig,
    entity_vecs: Tensor,
    h: int,
    r: int,
    positives: list[int],
    negatives: list[int],
    mean_reduction: bool = False,
) -> Tensor:
    """Summed BCE over gold tails (label 1) and sampled tails (label 0).

    ``entity_vecs`` is the full (n, d) entity tensor.  The relation
    embedding is the original (non-augmented) relation row, shared with
    the aggregation layers.
    """
    if not positives:
        raise ValueError(f"query ({h}, {r}) has no gold tails")
    r_vec = tape.lookup(params["relation_embeddings"], r)
    candidates = tape.gather_rows(entity_vecs, np.array(positives + negatives, dtype=np.intp))
    head = tape.lookup(entity_vecs, h)
    scores = score_against_all(tape, params, config, head, r_vec, candidates)
    labels = np.concatenate([np.ones(len(positives)), np.zeros(len(negatives))])
    loss = tape.bce_with_logits(scores, labels)
    if mean_reduction:
        loss = tape.scale(loss, 1.0 / labels.shape[0])
    return loss
