"""Conditional translation network for tabular records.

The generator maps ``(x, target group)`` to a vector of the same width as
``x``. It is a 1-D convolutional encoder, a stack of residual blocks and a
transposed-convolution decoder, with the target group fed in as constant extra
input channels. The critic is fully connected with two heads: a Wasserstein
score and logits over the protected groups. Training combines the
gradient-penalised Wasserstein loss, an auxiliary group-classification loss
and an L1 cycle loss. Labels never enter either network or any loss.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import OptimizerState, Tape, Tensor, adam_step
from .contrastive import ContrastiveSet
from .data import Dataset, FeatureSchema
from .errors import ContractViolation, NumericalFailure, SchemaError, TrainingDiverged

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class GanConfig:
    lambda_gp: float = 10.0
    lambda_cls: float = 1.0
    lambda_cyc: float = 10.0
    n_critic: int = 5
    batch_size: int = 64
    epochs: int = 10
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    # architecture
    base_channels: int = 16
    n_res: int = 3
    d_hidden: tuple = (256, 128)
    slope: float = 0.01
    residual: bool = True  # output = input + learned edit, edit starts at zero
    positional: bool = True  # one-hot position channels so convolutions can tell columns apart
    max_steps: int | None = None  # optional cap on generator updates

    def __post_init__(self):
        for name in ("lambda_gp", "lambda_cls", "lambda_cyc"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be >= 0")
        if self.n_critic < 1:
            raise ContractViolation("n_critic must be >= 1")
        if self.batch_size < 2:
            raise ContractViolation("batch_size must be >= 2")
        if self.epochs < 0 or self.lr_g <= 0 or self.lr_d <= 0:
            raise ContractViolation("epochs must be >= 0 and learning rates positive")
        if self.base_channels < 1 or self.n_res < 0 or not self.d_hidden:
            raise ContractViolation("invalid architecture sizes")
        object.__setattr__(self, "d_hidden", tuple(int(h) for h in self.d_hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["d_hidden"] = list(self.d_hidden)
        return d

    @classmethod
    def from_dict(cls, d) -> GanConfig:
        d = dict(d)
        if "d_hidden" in d:
            d["d_hidden"] = tuple(d["d_hidden"])
        return cls(**d)


# -- conditioning ------------------------------------------------------------------


def condition_channels(schema: FeatureSchema) -> int:
    """One channel per binary attribute, one per value for a multi-valued one."""
    return sum(1 if p.cardinality == 2 else p.cardinality for p in schema.protected)


def condition_values(schema: FeatureSchema, codes) -> np.ndarray:
    """(N,) joint group codes -> (N, channels) 0/1 conditioning values."""
    codes = np.asarray(codes, dtype=np.int64).reshape(-1)
    out = np.zeros((len(codes), condition_channels(schema)))
    for row, code in enumerate(codes):
        col = 0
        for p, v in zip(schema.protected, schema.decode_group_code(int(code))):
            if p.cardinality == 2:
                out[row, col] = v
                col += 1
            else:
                out[row, col + v] = 1.0
                col += p.cardinality
    return out


def condition_input(schema: FeatureSchema, x, target_s) -> np.ndarray:
    """Stack features and the target group as channels: (D,) -> (D, 1 + channels).

    Batched input (N, D) with N codes gives (N, D, 1 + channels).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != schema.total_dims:
        raise ContractViolation(f"expected {schema.total_dims} features, got {X.shape[1]}")
    codes = np.broadcast_to(np.asarray(target_s, dtype=np.int64), (len(X),))
    cond = condition_values(schema, codes)
    out = np.concatenate([X[:, :, None], np.repeat(cond[:, None, :], X.shape[1], axis=1)], axis=2)
    return out[0] if single else out


def _stacked(X, cond) -> Tensor:
    """(N, D) tensor and (N, k) array -> (N, 1 + k, D) network input."""
    X = ad._wrap(X)
    n, d = X.shape
    chans = Tensor(np.repeat(np.asarray(cond)[:, :, None], d, axis=2))
    return ad.concat([ad.reshape(X, (n, 1, d)), chans], axis=1)


# -- networks ---------------------------------------------------------------------


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def padded_length(dims: int) -> int:
    return 4 * math.ceil(dims / 4)


def init_generator(dims: int, cond: int, cfg: GanConfig, rng) -> dict[str, np.ndarray]:
    c = cfg.base_channels
    p: dict[str, np.ndarray] = {}

    def conv(name, c_out, c_in, k):
        p[f"{name}.w"] = _uniform(rng, (c_out, c_in, k), c_in * k)
        p[f"{name}.b"] = _uniform(rng, (c_out,), c_in * k)

    def convt(name, c_in, c_out, k):
        p[f"{name}.w"] = _uniform(rng, (c_in, c_out, k), c_in * k)
        p[f"{name}.b"] = _uniform(rng, (c_out,), c_in * k)

    def norm(name, ch):
        p[f"{name}.g"] = np.ones(ch)
        p[f"{name}.beta"] = np.zeros(ch)

    extra = padded_length(dims) if cfg.positional else 0
    conv("g.in", c, 1 + cond + extra, 7); norm("g.in_n", c)
    conv("g.down1", 2 * c, c, 4); norm("g.down1_n", 2 * c)
    conv("g.down2", 4 * c, 2 * c, 4); norm("g.down2_n", 4 * c)
    for r in range(cfg.n_res):
        conv(f"g.res{r}a", 4 * c, 4 * c, 3); norm(f"g.res{r}a_n", 4 * c)
        conv(f"g.res{r}b", 4 * c, 4 * c, 3); norm(f"g.res{r}b_n", 4 * c)
    convt("g.up1", 4 * c, 2 * c, 4); norm("g.up1_n", 2 * c)
    convt("g.up2", 2 * c, c, 4); norm("g.up2_n", c)
    conv("g.out", 1, c, 7)
    if cfg.residual:
        p["g.out.w"][:] = 0.0
        p["g.out.b"][:] = 0.0
    return p


def init_discriminator(dims: int, n_groups: int, cfg: GanConfig, rng) -> dict[str, np.ndarray]:
    p: dict[str, np.ndarray] = {}
    widths = (dims,) + cfg.d_hidden
    for i in range(len(cfg.d_hidden)):
        p[f"d.fc{i}.w"] = _uniform(rng, (widths[i], widths[i + 1]), widths[i])
        p[f"d.fc{i}.b"] = _uniform(rng, (widths[i + 1],), widths[i])
    h = widths[-1]
    p["d.src.w"] = _uniform(rng, (h, 1), h)
    p["d.src.b"] = _uniform(rng, (1,), h)
    p["d.cls.w"] = _uniform(rng, (h, n_groups), h)
    p["d.cls.b"] = _uniform(rng, (n_groups,), h)
    return p


def generator_forward(params, X, cond, cfg: GanConfig) -> Tensor:
    """(N, D) features, (N, k) conditioning -> (N, D) translated features."""
    X = ad._wrap(X)
    n, dims = X.shape
    h = _stacked(X, cond)
    h = ad.pad_last(h, 0, padded_length(dims) - dims)
    if cfg.positional:
        length = padded_length(dims)
        h = ad.concat([h, Tensor(np.broadcast_to(np.eye(length), (n, length, length)))], axis=1)

    def block(h, name, stride=1, padding=None, transposed=False):
        w, b = params[f"{name}.w"], params[f"{name}.b"]
        k = w.shape[-1]
        if transposed:
            h = ad.conv_transpose1d(h, w, b, stride=2, padding=1)
        else:
            h = ad.conv1d(h, w, b, stride=stride, padding=(k - 1) // 2 if padding is None else padding)
        return ad.instance_norm(h, params[f"{name}_n.g"], params[f"{name}_n.beta"])

    h = ad.relu(block(h, "g.in"))
    h = ad.relu(block(h, "g.down1", stride=2, padding=1))
    h = ad.relu(block(h, "g.down2", stride=2, padding=1))
    for r in range(cfg.n_res):
        t = ad.relu(block(h, f"g.res{r}a"))
        h = h + block(t, f"g.res{r}b")
    h = ad.relu(block(h, "g.up1", transposed=True))
    h = ad.relu(block(h, "g.up2", transposed=True))
    out = ad.conv1d(h, params["g.out.w"], params["g.out.b"], padding=3)
    out = ad.getitem(ad.reshape(out, (n, out.shape[-1])), (slice(None), slice(0, dims)))
    return X + out if cfg.residual else out


def _trunk(params, X, cfg: GanConfig) -> Tensor:
    h = ad._wrap(X)
    for i in range(len(cfg.d_hidden)):
        h = ad.leaky_relu(h @ params[f"d.fc{i}.w"] + params[f"d.fc{i}.b"], cfg.slope)
    return h


def critic_forward(params, X, cfg: GanConfig) -> tuple[Tensor, Tensor]:
    """Per-row Wasserstein score (N,) and group logits (N, groups)."""
    h = _trunk(params, X, cfg)
    score = ad.reshape(h @ params["d.src.w"] + params["d.src.b"], (h.shape[0],))
    return score, h @ params["d.cls.w"] + params["d.cls.b"]


def cross_entropy(logits: Tensor, codes) -> Tensor:
    """Mean negative log-softmax at the given class codes."""
    codes = np.asarray(codes, dtype=np.int64)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(codes)), codes] = 1.0
    picked = ad.tsum(logits * onehot, axis=1)
    return ad.mean(ad.logsumexp(logits, axis=1) - picked)


# -- model ------------------------------------------------------------------------


@dataclass(frozen=True)
class TabularStarGan:
    schema: FeatureSchema
    cfg: GanConfig
    g_params: dict
    d_params: dict
    history: tuple = ()
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, schema: FeatureSchema, cfg: GanConfig) -> TabularStarGan:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
        g = init_generator(schema.total_dims, condition_channels(schema), cfg, rng)
        d = init_discriminator(schema.total_dims, schema.n_groups, cfg, rng)
        return cls(schema, cfg, g, d)

    def translate(self, X, target_s) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.schema.total_dims:
            raise ContractViolation(f"expected {self.schema.total_dims} features, got {X.shape[1]}")
        codes = np.broadcast_to(np.asarray(target_s, dtype=np.int64), (len(X),))
        if codes.size and (codes.min() < 0 or codes.max() >= self.schema.n_groups):
            raise ContractViolation("target group code out of range")
        out = np.empty_like(X)
        for lo in range(0, len(X), 512):
            sl = slice(lo, lo + 512)
            out[sl] = generator_forward(self.g_params, X[sl], condition_values(self.schema, codes[sl]),
                                        self.cfg).value
        return out

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.g_params) + sorted(self.d_params):
            arr = self.g_params.get(name, self.d_params.get(name))
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def architecture(self) -> dict:
        return {
            "generator": f"conv7({self.cfg.base_channels}) -> 2x down-conv4/s2 -> {self.cfg.n_res} residual "
                         f"-> 2x up-convT4/s2 -> conv7(1); instance norm; "
                         f"{'input plus linear edit' if self.cfg.residual else 'linear output'}"
                         f"{'; positional channels' if self.cfg.positional else ''}",
            "critic": f"fc {list(self.cfg.d_hidden)} leaky-relu({self.cfg.slope}); heads: score, "
                      f"{self.schema.n_groups} group logits",
            "padded_length": padded_length(self.schema.total_dims),
            "condition_channels": condition_channels(self.schema),
        }


# -- losses -----------------------------------------------------------------------


def _leaves(params) -> dict[str, Tensor]:
    return {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in params.items()}


def _consts(params) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def interpolate(real, fake, alpha) -> np.ndarray:
    """Points on the segments between paired rows, one mixing weight per row."""
    alpha = np.asarray(alpha).reshape(-1, 1)
    return alpha * real + (1.0 - alpha) * fake


def d_loss(model: TabularStarGan, real, source_s, target_s, cfg: GanConfig | None = None,
           alpha=None, rng=None) -> tuple[float, dict, dict]:
    """Critic loss and its gradient in the critic parameters only.

    Returns (loss, grads, parts). ``alpha`` fixes the interpolation weights;
    otherwise they are drawn from ``rng``.
    """
    cfg = cfg or model.cfg
    real = np.asarray(real, dtype=np.float64)
    if len(real) == 0:
        raise ContractViolation("empty batch")
    fake = generator_forward(model.g_params, real, condition_values(model.schema, target_s), cfg).value
    if alpha is None:
        alpha = (rng or np.random.default_rng(0)).uniform(size=len(real))
    with Tape() as tape:
        p = _leaves(model.d_params)
        score_real, logits_real = critic_forward(p, real, cfg)
        score_fake, _ = critic_forward(p, fake, cfg)
        adv = ad.mean(score_real) - ad.mean(score_fake)
        total = -adv
        gp = Tensor(0.0)
        if cfg.lambda_gp:
            gp = ad.penalty_term(tape, lambda q, x: critic_forward(q, x, cfg)[0], p,
                                 interpolate(real, fake, alpha))
            total = total + cfg.lambda_gp * gp
        cls = cross_entropy(logits_real, source_s)
        if cfg.lambda_cls:
            total = total + cfg.lambda_cls * cls
        names = list(p)
        grads = tape.gradient(total, [p[k] for k in names])
    parts = {"d_adv": float(adv.value), "d_gp": float(gp.value), "d_cls": float(cls.value)}
    return float(total.value), {k: g.value for k, g in zip(names, grads)}, parts


def g_loss(model: TabularStarGan, real, source_s, target_s, cfg: GanConfig | None = None) -> tuple[float, dict, dict]:
    """Generator loss and its gradient in the generator parameters only."""
    cfg = cfg or model.cfg
    real = np.asarray(real, dtype=np.float64)
    if len(real) == 0:
        raise ContractViolation("empty batch")
    with Tape() as tape:
        p = _leaves(model.g_params)
        d = _consts(model.d_params)
        fake = generator_forward(p, real, condition_values(model.schema, target_s), cfg)
        score_fake, logits_fake = critic_forward(d, fake, cfg)
        adv = -ad.mean(score_fake)
        cls = cross_entropy(logits_fake, target_s)
        back = generator_forward(p, fake, condition_values(model.schema, source_s), cfg)
        # mean absolute error per entry, so the cycle weight does not scale with width
        cyc = ad.mean(ad.absolute(back - real))
        total = adv + cfg.lambda_cls * cls + cfg.lambda_cyc * cyc
        names = list(p)
        grads = tape.gradient(total, [p[k] for k in names])
    parts = {"g_adv": float(adv.value), "g_cls": float(cls.value), "g_cyc": float(cyc.value)}
    return float(total.value), {k: g.value for k, g in zip(names, grads)}, parts


def random_targets(source_s, n_groups: int, rng) -> np.ndarray:
    """Uniform draw over the groups other than each row's own."""
    source_s = np.asarray(source_s, dtype=np.int64)
    shift = rng.integers(1, n_groups, size=len(source_s))
    return (source_s + shift) % n_groups


# -- training ---------------------------------------------------------------------


def train_arrays(X, s, schema: FeatureSchema, cfg: GanConfig, callback=None) -> TabularStarGan:
    """Train on encoded features ``X`` and group codes ``s`` (no labels)."""
    X = np.asarray(X, dtype=np.float64)
    s = np.asarray(s, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] != schema.total_dims or len(s) != len(X):
        raise ContractViolation("X must be (N, total_dims) with one group code per row")
    if len(X) < cfg.batch_size:
        raise ContractViolation(f"{len(X)} records cannot fill a batch of {cfg.batch_size}")
    if schema.n_groups < 2:
        raise ContractViolation("need at least two protected groups")
    model = TabularStarGan.init(schema, cfg)
    g, d = model.g_params, model.d_params
    if cfg.epochs == 0:
        return model
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    opt_g = OptimizerState.fresh(g, cfg.lr_g, cfg.beta1, cfg.beta2)
    opt_d = OptimizerState.fresh(d, cfg.lr_d, cfg.beta1, cfg.beta2)
    history: list[dict] = []
    last_good = model
    step = 0
    per_epoch = len(X) // cfg.batch_size
    d_parts: dict = {}
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(X))
        for b in range(per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            xb, sb = X[idx], s[idx]
            tb = random_targets(sb, schema.n_groups, rng)
            alpha = rng.uniform(size=len(idx))
            cur = replace(model, g_params=g, d_params=d)
            try:
                loss_d, grads_d, d_parts = d_loss(cur, xb, sb, tb, cfg, alpha=alpha)
                if not np.isfinite(loss_d):
                    raise NumericalFailure("non-finite critic loss")
                d, opt_d = adam_step(opt_d, d, grads_d)
                if (b + 1) % cfg.n_critic:
                    continue
                loss_g, grads_g, g_parts = g_loss(replace(cur, d_params=d), xb, sb, tb, cfg)
                if not np.isfinite(loss_g):
                    raise NumericalFailure("non-finite generator loss")
                g, opt_g = adam_step(opt_g, g, grads_g)
            except NumericalFailure as exc:
                raise TrainingDiverged(step, last_good, str(exc)) from exc
            step += 1
            history.append({"step": step, "epoch": epoch, "d_loss": loss_d, "g_loss": loss_g,
                            **d_parts, **g_parts})
            last_good = replace(model, g_params=g, d_params=d, history=tuple(history))
            if callback is not None:
                callback(step, history[-1])
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    return replace(model, g_params=g, d_params=d, history=tuple(history))


def train(ds: Dataset, cfg: GanConfig, callback=None) -> TabularStarGan:
    """Train on a dataset's features and protected codes. ``ds.y`` is never read."""
    model = train_arrays(ds.X, ds.s, ds.schema, cfg, callback)
    return replace(model, meta={**model.meta, "trained_on": ds.fingerprint(),
                                "trained_role": ds.provenance.get("role")})


# -- generation -------------------------------------------------------------------


def harden(schema: FeatureSchema, X) -> tuple[np.ndarray, int]:
    """Replace each categorical block by its argmax one-hot (ties go to the lowest index).

    Returns the hardened matrix and the number of tied blocks.
    """
    X = np.array(X, dtype=np.float64)
    ties = 0
    for grp, sl in zip(schema.groups, schema.slices().values()):
        if grp.kind != "categorical":
            continue
        block = X[:, sl]
        top = block.max(axis=1, keepdims=True)
        ties += int(np.sum((block == top).sum(axis=1) > 1))
        hard = np.zeros_like(block)
        hard[np.arange(len(block)), block.argmax(axis=1)] = 1.0
        X[:, sl] = hard
    if ties:
        log.info("hardening broke %d argmax ties toward the lowest category", ties)
    return X, ties


def generate(model: TabularStarGan, record, target_s: int, harden_output: bool = False):
    """Single contrastive counterpart of ``record`` (a :class:`Record`) for group ``target_s``."""
    from .contrastive import ContrastiveExample

    if target_s == record.s:
        raise ContractViolation("target group equals the record's own group")
    x_bar = model.translate(record.x[None, :], [target_s])
    if harden_output:
        x_bar, _ = harden(model.schema, x_bar)
    return ContrastiveExample(record.index, int(target_s), x_bar[0], int(record.y))


def generate_contrastives(model: TabularStarGan, ds: Dataset, harden_output: bool = False) -> ContrastiveSet:
    """One counterpart per record and per other group, ordered by (source, target)."""
    if ds.schema.hash() != model.schema.hash():
        raise SchemaError("dataset schema differs from the model's")
    n, k = len(ds), ds.schema.n_groups
    src = np.repeat(np.arange(n), k - 1)
    own = ds.s[src]
    offset = np.tile(np.arange(1, k), n)
    tgt = (own + offset) % k
    # keep targets ascending per record
    tgt = tgt.reshape(n, k - 1)
    tgt.sort(axis=1)
    tgt = tgt.reshape(-1)
    x_bar = model.translate(ds.X[src], tgt)
    ties = 0
    if harden_output:
        x_bar, ties = harden(ds.schema, x_bar)
    meta = {"mode": "gan", "harden": bool(harden_output), "model_hash": model.param_hash(),
            "source": ds.fingerprint(), "trained_on": model.meta.get("trained_on"), "ties": ties}
    return ContrastiveSet(ds.schema.hash(), src, tgt, x_bar, ds.y[src], meta)


# -- checkpoints --------------------------------------------------------------------


def _encode_params(params) -> dict:
    return {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in params.items()}


def _decode_params(d) -> dict:
    return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d.items()}


def save_checkpoint(model: TabularStarGan, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format_version": FORMAT_VERSION,
        "schema_hash": model.schema.hash(),
        "schema": model.schema.to_dict(),
        "cfg": model.cfg.to_dict(),
        "architecture": model.architecture(),
        "generator": _encode_params(model.g_params),
        "discriminator": _encode_params(model.d_params),
        "history": list(model.history),
        "meta": model.meta,
    }
    path.write_text(json.dumps(doc))
    return path


def load_checkpoint(path, schema: FeatureSchema | None = None) -> TabularStarGan:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ContractViolation(f"unsupported checkpoint version {doc.get('format_version')}")
    stored = FeatureSchema.from_dict(doc["schema"])
    if schema is not None and schema.hash() != doc["schema_hash"]:
        raise SchemaError("checkpoint was trained on a different feature schema")
    return TabularStarGan(schema or stored, GanConfig.from_dict(doc["cfg"]), _decode_params(doc["generator"]),
                          _decode_params(doc["discriminator"]), tuple(doc["history"]), doc.get("meta", {}))
