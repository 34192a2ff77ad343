"""Evaluation machinery: mAP at a horizon, best-of-K multi-future scoring,
quaternion mean angle error, and n-gram KL against an exact grammar oracle."""
from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import InputError, MetricError, ParameterError
from .grammar import GrammarModel
from .synthdata import GroundTruthGrammar, exact_ngram_distribution, sample_sequence


def average_precision(scores, labels):
    """Ranked AP for one class: mean precision at each positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    if not hits.any():
        raise MetricError("average precision undefined without positives")
    cum = np.cumsum(hits)
    ranks = np.arange(1, len(hits) + 1)
    return float((cum[hits] / ranks[hits]).mean())


def map_at_horizon(predicted_scores, ground_truth):
    """Mean AP over classes with at least one positive.

    predicted_scores: (N, C) per-class scores at the horizon of interest;
    ground_truth: (N, C) binary labels.
    """
    scores = np.asarray(predicted_scores, dtype=np.float64)
    labels = np.asarray(ground_truth)
    if scores.shape != labels.shape:
        raise InputError("scores and labels must align")
    aps = []
    for c in range(scores.shape[1]):
        if labels[:, c].any():
            aps.append(average_precision(scores[:, c], labels[:, c]))
    if not aps:
        raise MetricError("mAP undefined: no positive labels in any class")
    return float(np.mean(aps))


def grammar_sampler(grammar, state=None):
    """Sampler over the ground-truth grammar from `state` (default: start)."""
    g = grammar if state is None else GroundTruthGrammar(
        grammar.states, grammar.tokens, state, grammar.rules)

    def sample(horizon, rng):
        return sample_sequence(g, horizon, rng)

    return sample


def model_sampler(model, prefix):
    """Sampler that seeds the generator from an observed one-hot prefix."""
    prefix = np.asarray(prefix, dtype=np.float64)
    if prefix.ndim == 2:
        prefix = prefix[None]

    def sample(horizon, rng):
        with ad.no_grad():
            n0 = model.encode_start(prefix).value
        path = model.sample_rule_paths(n0, horizon, 1,
                                       seed=int(rng.integers(2**63)))
        _, t_all, _ = model.rule_tables()
        return np.argmax(t_all[path[0]], axis=-1)

    return sample


def best_of_k(sampler, horizon, k, metric, seed=0, higher_is_better=True):
    """Best metric value over k seeded futures from `sampler(horizon, rng)`.

    The seed stream is prefix-stable: best_of_k with k' < k scores a prefix of
    the same sample set, so score metrics are monotone nondecreasing in k.
    """
    if k < 1:
        raise ParameterError("k must be >= 1")
    children = np.random.SeedSequence(seed).spawn(k)
    values = []
    for child in children:
        rng = np.random.default_rng(child)
        values.append(metric(sampler(horizon, rng)))
    return max(values) if higher_is_better else min(values)


def mean_angle_error(pred, truth):
    """Mean geodesic angle (radians) between unit-quaternion sequences.

    Inputs are (frames, 4*joints) or (frames, joints, 4); antipodal
    quaternions count as identical.
    """
    p = np.asarray(pred, dtype=np.float64).reshape(len(pred), -1, 4)
    t = np.asarray(truth, dtype=np.float64).reshape(len(truth), -1, 4)
    if p.shape != t.shape:
        raise InputError("quaternion sequences must share shape")
    for name, q in (("pred", p), ("truth", t)):
        norms = np.linalg.norm(q, axis=-1)
        if np.any(norms < 1e-12):
            raise InputError(f"zero quaternion in {name}")
        if np.any(np.abs(norms - 1.0) > 1e-6):
            warnings.warn(f"{name} quaternions not unit norm; normalizing")
    p = p / np.linalg.norm(p, axis=-1, keepdims=True)
    t = t / np.linalg.norm(t, axis=-1, keepdims=True)
    dots = np.abs(np.sum(p * t, axis=-1))
    theta = 2.0 * np.arccos(np.minimum(1.0, dots))
    return float(theta.mean())


def empirical_ngram_distribution(samples, n, num_tokens):
    """n-gram frequencies over all windows of the sampled token sequences."""
    samples = np.asarray(samples)
    if samples.ndim != 2 or samples.shape[1] < n:
        raise ParameterError("samples must be (N, horizon) with horizon >= n")
    counts = {}
    windows = samples.shape[1] - n + 1
    for j in range(windows):
        grams = samples[:, j:j + n]
        for row in map(tuple, grams):
            counts[row] = counts.get(row, 0) + 1
    total = samples.shape[0] * windows
    return {g: c / total for g, c in counts.items()}


def kl_divergence(p, q, support, eps=1e-6):
    """KL(p || q) in nats after epsilon-smoothing both over `support`."""
    pv = np.asarray([p.get(s, 0.0) for s in support]) + eps
    qv = np.asarray([q.get(s, 0.0) for s in support]) + eps
    pv /= pv.sum()
    qv /= qv.sum()
    return float(np.sum(pv * np.log(pv / qv)))


def ngram_kl(model_samples, oracle, n, horizon, eps=1e-6):
    """KL(data || model) over n-gram distributions, in nats.

    model_samples: (N, horizon) token-index array drawn from the model;
    oracle: GroundTruthGrammar giving the exact data-side distribution.
    """
    if eps <= 0:
        raise ParameterError("smoothing eps must be > 0")
    if n > horizon:
        raise ParameterError("n must be <= horizon")
    p_data = exact_ngram_distribution(oracle, n, horizon)
    p_model = empirical_ngram_distribution(model_samples, n, oracle.num_tokens)
    support = list(itertools.product(range(oracle.num_tokens), repeat=n))
    return kl_divergence(p_data, p_model, support, eps=eps)


def sample_model_futures(model, prefixes, horizon, num_samples_per_prefix=1, seed=0):
    """(N * num_samples, horizon) token paths from the generator, seeded by
    encoding each one-hot prefix."""
    prefixes = np.asarray(prefixes, dtype=np.float64)
    with ad.no_grad():
        n0 = model.encode_start(prefixes).value
    paths = model.sample_rule_paths(n0, horizon, num_samples_per_prefix, seed=seed)
    _, t_all, _ = model.rule_tables()
    return np.argmax(t_all[paths], axis=-1)


@dataclass
class EvalReport:
    per_horizon: dict                  # horizon -> metric value
    best_of_k_values: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        hs = list(self.per_horizon)
        if hs != sorted(hs):
            raise ParameterError("horizons must be strictly increasing")
        for v in self.per_horizon.values():
            if not np.isfinite(v):
                raise ParameterError("metric values must be finite")

    def to_json(self):
        return json.dumps({
            "per_horizon": {str(h): v for h, v in self.per_horizon.items()},
            "best_of_k": {str(k): v for k, v in self.best_of_k_values.items()},
            "metadata": self.metadata,
        }, indent=2)

    def render_table(self):
        """Aligned text table, horizons as columns."""
        horizons = list(self.per_horizon)
        header = ["metric"] + [str(h) for h in horizons]
        rows = [["value"] + [f"{self.per_horizon[h]:.4f}" for h in horizons]]
        for k, v in self.best_of_k_values.items():
            rows.append([f"best_of_{k}"] + [f"{v:.4f}"] + [""] * (len(horizons) - 1))
        widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
        lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
        for r in rows:
            lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
        return "\n".join(lines)
