"""Discriminator and the adversarial training loop.

The discriminator runs two 1-d conv stacks, one over the terminal stream and
one over the non-terminal stream, mean-pools each, concatenates, and maps the
joint feature to a real/fake probability. Training alternates discriminator
and generator momentum-SGD updates under the shared cosine schedule.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, InputError, ParameterError
from .nn import SGD, Conv1d, Dense
from .grammar import GrammarModel

LOG_CLAMP = 1e-7


@dataclass
class DiscriminatorConfig:
    conv_channels: tuple = (128, 256, 64)
    kernel_width: int = 5
    stride: int = 4
    padding: str = "same"

    def __post_init__(self):
        if any(c <= 0 for c in self.conv_channels):
            raise ParameterError("conv channels must be positive")
        if self.kernel_width % 2 == 0:
            raise ParameterError("kernel width must be odd")


class Discriminator:
    def __init__(self, d_terminal, d_nonterminal, config=None, seed=0):
        self.config = config or DiscriminatorConfig()
        rng = np.random.default_rng(seed)
        cfg = self.config
        self.t_stack = self._stack(rng, d_terminal, "d.t")
        self.n_stack = self._stack(rng, d_nonterminal, "d.n")
        self.head = Dense(rng, 2 * cfg.conv_channels[-1], 1, name="d.head")

    def _stack(self, rng, d_in, name):
        cfg = self.config
        layers = []
        c_prev = d_in
        for i, c in enumerate(cfg.conv_channels):
            layers.append(Conv1d(rng, c_prev, c, kernel=cfg.kernel_width,
                                 stride=cfg.stride, padding=cfg.padding,
                                 activation="relu", name=f"{name}.conv{i}"))
            c_prev = c
        return layers

    def __call__(self, t_seq, n_seq):
        """Real/fake probability in (0, 1) for aligned terminal and
        non-terminal streams of shape (B, L, d)."""
        t_seq = t_seq if isinstance(t_seq, Tensor) else Tensor(np.asarray(t_seq, dtype=np.float64))
        n_seq = n_seq if isinstance(n_seq, Tensor) else Tensor(np.asarray(n_seq, dtype=np.float64))
        if t_seq.value.ndim != 3 or n_seq.value.ndim != 3:
            raise DimensionError("discriminator inputs must be (B, L, d)")
        if t_seq.value.shape[1] == 0:
            raise InputError("discriminator got an empty sequence")
        if t_seq.value.shape[:2] != n_seq.value.shape[:2]:
            raise DimensionError("terminal and non-terminal streams must align")
        ht, hn = t_seq, n_seq
        for layer in self.t_stack:
            ht = layer(ht)
        for layer in self.n_stack:
            hn = layer(hn)
        feat = ad.concat([ad.mean(ht, axis=1), ad.mean(hn, axis=1)], axis=-1)
        p = ad.sigmoid(self.head(feat))
        return ad.reshape(p, (-1,))

    def parameters(self):
        ps = [p for layer in self.t_stack + self.n_stack for p in layer.parameters()]
        return ps + self.head.parameters()

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def load_state(self, state):
        for name, p in self.named_parameters().items():
            p.assign(state[name])


def discriminate(t_seq, n_seq, model):
    return model(t_seq, n_seq)


def discriminator_loss(p_real, p_fake):
    """-mean log p_real - mean log (1 - p_fake), log args clamped at 1e-7."""
    p_real = p_real if isinstance(p_real, Tensor) else Tensor(p_real)
    p_fake = p_fake if isinstance(p_fake, Tensor) else Tensor(p_fake)
    real_term = ad.mean(ad.log(ad.clamp_min(p_real, LOG_CLAMP)))
    fake_term = ad.mean(ad.log(ad.clamp_min(1.0 - p_fake, LOG_CLAMP)))
    return -real_term - fake_term


def generator_loss(p_fake, variant="non_saturating"):
    # no 1e-7 clamp here: clamping zeroes the gradient exactly when the
    # discriminator is winning, which is when the generator needs it most;
    # the tiny guard only dodges a literal log(0)
    p_fake = p_fake if isinstance(p_fake, Tensor) else Tensor(p_fake)
    if variant == "non_saturating":
        return -ad.mean(ad.log(ad.clamp_min(p_fake, 1e-300)))
    if variant == "saturating":
        return ad.mean(ad.log(ad.clamp_min(1.0 - p_fake, 1e-300)))
    raise ParameterError(f"unknown generator loss variant {variant!r}")


@dataclass
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 32
    d_steps_per_g_step: int = 1
    generator_loss_variant: str = "non_saturating"
    sequence_length: int | None = None   # default: dataset length
    prefix_len: int = 4
    seed: int = 0
    lr0: float = 0.1
    momentum: float = 0.9
    policy: str = "sample_hard"
    tau: float = 1.0
    tau_end: float | None = None         # optional linear anneal target
    harden_terminals: bool = True        # straight-through one-hot fake terminals
    teacher_forcing: str = "state_posterior"   # or "cosine"
    d_lr_scale: float = 1.0              # discriminator lr relative to generator
    d_loss_floor: float | None = 1.0     # skip D updates below this loss
    entropy_weight: float = 0.0          # bonus on rule-distribution entropy
    ema_decay: float | None = None       # Polyak-average generator weights
    log_every: int = 100
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if min(self.iterations, self.batch_size, self.d_steps_per_g_step,
               self.prefix_len) <= 0:
            raise ParameterError("train config values must be positive")
        if self.generator_loss_variant not in ("non_saturating", "saturating"):
            raise ParameterError("bad generator_loss_variant")


@dataclass
class TrainResult:
    metrics: list                 # rows of (iteration, d_loss, g_loss, d_acc, lr)
    holdout_accuracy: float
    iterations: int


def teacher_forced_states(model, batch, n0=None, rng=None):
    """Non-terminal stream for real data, built by a teacher-forced parse.

    Without n0, each step greedily picks the rule whose expansion terminal is
    nearest (cosine) to the observed terminal and takes that rule's
    non-terminal. With n0, the rule is *sampled* from the filtering posterior
    (rule probability at the current state times the rule's emission weight at
    the observed token), so the real stream has the same conditional law as a
    generator path that happens to emit the data. A deterministic argmax here
    would hand the discriminator an artifact that persists at convergence.
    Forward-only; no gradients flow to the generator here."""
    n_all, t_all, probs_all = model.rule_tables()
    B, L, C = batch.shape
    if n0 is None:
        tn = t_all / np.maximum(np.linalg.norm(t_all, axis=1, keepdims=True), 1e-12)
        flat = batch.reshape(B * L, C)
        flat = flat / np.maximum(np.linalg.norm(flat, axis=1, keepdims=True), 1e-12)
        cos = (flat @ tn.T).reshape(B, L, -1)
        idx = np.argmax(cos, axis=2)
        return n_all[idx.reshape(-1)].reshape(B, L, -1)
    if rng is None:
        rng = np.random.default_rng(0)
    tokens = np.argmax(batch, axis=2)                   # (B, L)
    emis = t_all.T                                      # (C, R) emission weight
    with ad.no_grad():
        p = model.rule_probs(Tensor(np.asarray(n0, dtype=np.float64))).value
    out = np.empty((B, L, n_all.shape[1]))
    for j in range(L):
        w = p * np.maximum(emis[tokens[:, j]], 1e-12)
        w /= w.sum(axis=1, keepdims=True)
        cum = np.cumsum(w, axis=-1)
        cum[:, -1] = 1.0
        idx = (cum < rng.random((B, 1))).sum(axis=-1)
        out[:, j, :] = n_all[idx]
        p = probs_all[idx]
    return out


def _harden(t_seq):
    """Straight-through one-hot of each fake terminal, so the discriminator
    sees the same vector space as the one-hot real data."""
    v = t_seq.value
    idx = np.argmax(v, axis=-1)
    hard = np.zeros_like(v)
    np.put_along_axis(hard, idx[..., None], 1.0, axis=-1)
    return ad.straight_through(t_seq, hard)


def _tau_at(cfg, it):
    if cfg.tau_end is None:
        return cfg.tau
    frac = it / max(cfg.iterations - 1, 1)
    return cfg.tau + frac * (cfg.tau_end - cfg.tau)


def _accuracy(p_real, p_fake):
    return 0.5 * (float(np.mean(p_real > 0.5)) + float(np.mean(p_fake < 0.5)))


def train_adversarial(dataset, grammar_model, disc_model, config,
                      on_log=None, checkpoint_fn=None):
    """Alternating GAN loop; no supervised loss on the generator.

    on_log(row) is called for each metrics row; checkpoint_fn(iteration) for
    periodic checkpointing (wired by the CLI).
    """
    if len(dataset) == 0:
        raise InputError("empty dataset")
    L = config.sequence_length or dataset.length
    if L != dataset.length:
        raise DimensionError("sequence_length must match the dataset")
    if config.prefix_len > L:
        raise ParameterError("prefix_len exceeds sequence length")
    X = dataset.one_hot()
    n_hold = int(len(X) * config.holdout_fraction)
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(X))
    X_hold, X_train = X[perm[:n_hold]], X[perm[n_hold:]]
    if len(X_train) == 0:
        raise InputError("no training data left after holdout split")

    g_opt = SGD(grammar_model.parameters(), lr0=config.lr0,
                momentum=config.momentum, total_steps=config.iterations)
    d_opt = SGD(disc_model.parameters(), lr0=config.lr0 * config.d_lr_scale,
                momentum=config.momentum,
                total_steps=config.iterations * config.d_steps_per_g_step)
    d_params = disc_model.parameters()
    g_params = grammar_model.parameters()
    # Polyak average damps the limit cycling of the adversarial game; the
    # averaged weights become the trained generator
    ema = None
    if config.ema_decay is not None:
        ema = [p.value.copy() for p in g_params]

    metrics = []
    for it in range(config.iterations):
        tau = _tau_at(config, it)
        d_loss_v = g_loss_v = acc_v = 0.0
        for extra in range(config.d_steps_per_g_step):
            last = extra == config.d_steps_per_g_step - 1
            take = rng.integers(0, len(X_train), size=config.batch_size)
            batch = X_train[take]
            if last:
                n0 = grammar_model.encode_start(Tensor(batch[:, :config.prefix_len]))
                t_fake, n_fake, _, _, ent = grammar_model.unroll_batch(
                    n0, L, config.policy, rng, tau=tau, return_entropy=True)
                if config.harden_terminals:
                    t_fake = _harden(t_fake)
                fake_t_v, fake_n_v = t_fake.detach(), n_fake.detach()
                n0_v = n0.value
            else:
                with ad.no_grad():
                    n0 = grammar_model.encode_start(Tensor(batch[:, :config.prefix_len]))
                    tf, nf, _, _ = grammar_model.unroll_batch(
                        n0, L, config.policy, rng, tau=tau)
                    if config.harden_terminals:
                        tf = _harden(tf)
                fake_t_v, fake_n_v = Tensor(tf.value), Tensor(nf.value)
                n0_v = n0.value
            if config.teacher_forcing == "state_posterior":
                n_real = teacher_forced_states(grammar_model, batch, n0_v, rng)
            else:
                n_real = teacher_forced_states(grammar_model, batch)
            p_real = disc_model(Tensor(batch), Tensor(n_real))
            p_fake = disc_model(fake_t_v, fake_n_v)
            d_loss = discriminator_loss(p_real, p_fake)
            d_loss_v = float(d_loss.value)
            acc_v = _accuracy(p_real.value, p_fake.value)
            # throttle D near the decision boundary: a saturated D pushes
            # p_fake under the log clamp and the generator goes gradient-dead
            if config.d_loss_floor is None or d_loss_v >= config.d_loss_floor:
                ad.backward(d_loss)
                d_opt.step()
            else:
                d_opt.skip()
        # generator step reuses the recorded fake-batch graph
        p_fake_g = disc_model(t_fake, n_fake)
        g_loss = generator_loss(p_fake_g, config.generator_loss_variant)
        g_obj = g_loss
        if config.entropy_weight:
            # data-free entropy bonus; keeps rule selection from sharpening
            # into a deterministic basin whose softmax gradient vanishes
            g_obj = ad.add(g_loss, ad.scale(ent, -config.entropy_weight))
        ad.backward(g_obj)
        for p in d_params:          # generator backward also reaches D weights
            p.grad = None
        g_opt.step()
        if ema is not None:
            d = config.ema_decay
            for avg, p in zip(ema, g_params):
                avg *= d
                avg += (1.0 - d) * p.value
        g_loss_v = float(g_loss.value)
        if not (np.isfinite(d_loss_v) and np.isfinite(g_loss_v)):
            raise ParameterError(f"non-finite loss at iteration {it}")

        if it % config.log_every == 0 or it == config.iterations - 1:
            row = {"iteration": it, "d_loss": d_loss_v, "g_loss": g_loss_v,
                   "d_accuracy": acc_v, "lr": g_opt.lr(min(it, config.iterations))}
            metrics.append(row)
            if on_log:
                on_log(row)
        if checkpoint_fn:
            checkpoint_fn(it)

    if ema is not None:
        for avg, p in zip(ema, g_params):
            p.assign(avg)
    holdout = _holdout_accuracy(grammar_model, disc_model, X_hold, config, rng)
    return TrainResult(metrics=metrics, holdout_accuracy=holdout,
                       iterations=config.iterations)


def _holdout_accuracy(grammar_model, disc_model, X_hold, config, rng):
    if len(X_hold) == 0:
        return float("nan")
    with ad.no_grad():
        n0 = grammar_model.encode_start(Tensor(X_hold[:, :config.prefix_len]))
        if config.teacher_forcing == "state_posterior":
            n_real = teacher_forced_states(grammar_model, X_hold, n0.value, rng)
        else:
            n_real = teacher_forced_states(grammar_model, X_hold)
        p_real = disc_model(Tensor(X_hold), Tensor(n_real)).value
        t_fake, n_fake, _, _ = grammar_model.unroll_batch(
            n0, X_hold.shape[1], config.policy, rng,
            tau=_tau_at(config, config.iterations - 1))
        if config.harden_terminals:
            t_fake = _harden(t_fake)
        p_fake = disc_model(t_fake, n_fake).value
    return _accuracy(p_real, p_fake)


# ---------------------------------------------------------------------------
# non-adversarial baseline: maximum likelihood over a pruned enumeration
# ---------------------------------------------------------------------------

@dataclass
class GrammarOnlyConfig:
    iterations: int = 1000
    batch_size: int = 16
    k_cap: int = 2
    max_paths: int = 64           # beam-style memory cap on the enumeration
    prefix_len: int = 4
    seed: int = 0
    lr0: float = 0.1
    momentum: float = 0.9
    log_every: int = 100


def _pruned_loglik(model, batch, n0, k_cap, max_paths):
    """Differentiable log-likelihood of token batches under the grammar,
    summed over the k_cap-per-step pruned enumeration of rule paths."""
    R = model.config.num_rules
    eye = Tensor(np.eye(R))
    n_all = model.f_n(eye)
    t_all_logits = model.f_t(eye)
    t_all = ad.softmax(t_all_logits)
    probs_all = model.rule_probs(n_all)          # (R, R)
    B, L = batch.shape
    p0 = model.rule_probs(n0)                    # (B, R)

    # level 0: top-k rules per example
    k = min(k_cap, R)
    idx0 = np.argsort(-p0.value, axis=1, kind="stable")[:, :k]        # (B, k)
    rows = np.repeat(np.arange(B)[:, None], k, axis=1)
    w = ad.mul(ad.gather_nd(p0, (rows, idx0)),
               ad.gather_nd(t_all, (idx0, batch[:, [0]])))            # (B, k)
    cur = idx0
    for j in range(1, L):
        W = cur.shape[1]
        trans_v = probs_all.value[cur]                                # (B, W, R)
        cand_v = w.value[:, :, None] * trans_v * t_all.value[:, batch[:, j]].T[:, None, :]
        # per parent keep top-k rules, then cap total paths
        keep_r = np.argsort(-trans_v, axis=2, kind="stable")[:, :, :k]  # (B, W, k)
        cand_sel = np.take_along_axis(cand_v, keep_r, axis=2).reshape(B, W * k)
        order = np.argsort(-cand_sel, axis=1, kind="stable")[:, :max_paths]
        parent = order // k                                           # (B, W')
        rule = np.take_along_axis(keep_r.reshape(B, W * k), order, axis=1)
        Wn = parent.shape[1]
        rowsB = np.repeat(np.arange(B)[:, None], Wn, axis=1)
        w_parent = ad.gather_nd(w, (rowsB, parent))
        trans = ad.gather_nd(probs_all, (np.take_along_axis(cur, parent, axis=1), rule))
        emis = ad.gather_nd(t_all, (rule, batch[:, [j]]))
        w = ad.mul(ad.mul(w_parent, trans), emis)
        cur = rule
    tot = ad.sum_along(w, axis=1)
    return ad.mean(ad.log(ad.clamp_min(tot, 1e-300)))


def train_grammar_only(dataset, grammar_model, config, on_log=None):
    """Maximize data likelihood over the pruned enumeration of futures."""
    if len(dataset) == 0:
        raise InputError("empty dataset")
    if dataset.kind != "discrete":
        raise InputError("grammar-only training expects a discrete dataset")
    X = dataset.one_hot()
    toks = np.stack([np.asarray(r) for r in dataset.records])
    rng = np.random.default_rng(config.seed)
    opt = SGD(grammar_model.parameters(), lr0=config.lr0,
              momentum=config.momentum, total_steps=config.iterations)
    metrics = []
    for it in range(config.iterations):
        take = rng.integers(0, len(X), size=config.batch_size)
        n0 = grammar_model.encode_start(Tensor(X[take][:, :config.prefix_len]))
        loglik = _pruned_loglik(grammar_model, toks[take], n0,
                                config.k_cap, config.max_paths)
        loss = -loglik
        ad.backward(loss)
        opt.step()
        if it % config.log_every == 0 or it == config.iterations - 1:
            row = {"iteration": it, "nll": float(loss.value), "lr": opt.lr(min(it, config.iterations))}
            metrics.append(row)
            if on_log:
                on_log(row)
    return metrics
