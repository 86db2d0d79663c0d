"""Two-step training: source pre-training, weight transfer, and tri-domain
co-training with adversarial domain adaptation.

The domain head and the encoders play a minimax game realized in a single
backward pass: the domain head receives the descent gradient of the negated
domain score (so it learns to tell domains apart), while the encoders receive
that branch gradient scaled by lambda3 and sign-flipped by the gradient
reversal layer (so they learn to confuse it).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import losses as L
from .errors import ConfigurationError, DegenerateBatchError, NumericalError, UsageError
from .losses import LossWeights
from .model import Encoder, Head, Model, grl_apply, load_checkpoint, save_checkpoint
from .retrieval import evaluate_bidirectional
from .synthdata import Corpus, Split

Array = np.ndarray

DOMAIN_ORDER = ("s", "t1", "t2")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class LossToggles:
    """One switch per loss term. id_s/tri_s/att_s drive step 1; the rest drive
    step 2. step2_att_s keeps the source attribute term inside the step-2
    attribute total; step2_id_s/step2_tri_s optionally keep the source
    identity/triplet terms alive in step 2 (off by default)."""

    id_s: bool = True
    tri_s: bool = True
    att_s: bool = True
    id_t: bool = True
    tri_t: bool = True
    att_t: bool = True
    con_t: bool = True
    dom: bool = True
    step2_att_s: bool = True
    step2_id_s: bool = False
    step2_tri_s: bool = False


@dataclass
class TrainConfig:
    epochs_step1: int = 60
    epochs_step2: int = 60
    batch_source: int = 64
    batch_pairs: int = 32
    batch_source_step2: int = 32
    ids_per_batch: int = 16
    ids_per_batch_step2: int = 8
    base_lr: float = 1e-4
    warmup_epochs: int = 10
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    toggles: LossToggles = field(default_factory=LossToggles)
    encoder_kind: str = "dense"
    hidden: tuple = (128,)
    conv_channels: tuple = (8, 16)
    embedding_dim: int = 64
    head_hidden: int = 512
    image_size: int = 32
    entropy_full: bool = False
    normalize_for_triplet: bool = False
    triplet_mining: str = "batch_all"
    attribute_subset: tuple | None = None
    checkpoint_every: int = 0
    deterministic: bool = True

    def validate(self):
        self.weights.validate()
        if self.epochs_step1 < 1 or self.epochs_step2 < 1:
            raise ConfigurationError("epoch counts must be positive")
        if self.ids_per_batch < 2 or self.ids_per_batch_step2 < 2 or self.batch_pairs < 2:
            raise ConfigurationError("batches need at least 2 identities for triplet mining")
        if self.batch_source < self.ids_per_batch:
            raise ConfigurationError("batch_source smaller than ids_per_batch")
        if self.encoder_kind not in ("dense", "conv"):
            raise ConfigurationError(f"unknown encoder kind {self.encoder_kind!r}")
        if self.triplet_mining not in ("batch_all", "batch_hard"):
            raise ConfigurationError(f"unknown mining strategy {self.triplet_mining!r}")

    def encoder_arch(self) -> dict:
        if self.encoder_kind == "dense":
            layers = [{"kind": "dense", "width": int(w)} for w in self.hidden]
        else:
            layers = [{"kind": "conv", "channels": int(c)} for c in self.conv_channels]
        return {"input_shape": [self.image_size, self.image_size, 3],
                "layers": layers, "embedding_dim": self.embedding_dim}


def seed_streams(seed: int) -> dict[str, np.random.Generator]:
    """Named deterministic RNG streams derived from one run seed."""
    names = ("init1", "batch1", "init2", "batch2", "fraction")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: dict[str, Array]) -> AdamState:
    return AdamState(m={k: np.zeros_like(a) for k, a in params.items()},
                     v={k: np.zeros_like(a) for k, a in params.items()})


def adam_step(params: dict[str, Array], grads: dict[str, Array], state: AdamState,
              lr: float) -> None:
    """Bias-corrected Adam update, in place."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter block {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def warmup_lr(epoch: int, total_epochs: int, config: TrainConfig) -> float:
    """Linear ramp from base/100 to base over warmup_epochs, then a 10x decay
    at two thirds of the run."""
    base = config.base_lr
    if config.warmup_epochs > 0 and epoch < config.warmup_epochs:
        lr = base * (0.01 + 0.99 * epoch / config.warmup_epochs)
    else:
        lr = base
    if epoch >= math.floor(total_epochs * 2 / 3):
        lr *= 0.1
    return lr


# ---------------------------------------------------------------------------
# training views over corpus splits


class TrainSet:
    """A split restricted to chosen records, with optional attribute override
    (attribute rows aligned with the restricted index list)."""

    def __init__(self, split: Split, indices, attributes: Array | None = None):
        self.split = split
        self.indices = list(indices)
        self._attributes = attributes
        self.label_space = split.label_space

    def __len__(self):
        return len(self.indices)

    @property
    def identities(self):
        return sorted({self.split.records[i]["identity"] for i in self.indices})

    def images(self, sel) -> Array:
        return self.split.images([self.indices[i] for i in sel])

    def labels(self, sel) -> Array:
        return self.split.labels([self.indices[i] for i in sel])

    def attributes(self, sel) -> Array:
        if self._attributes is not None:
            return self._attributes[np.asarray(sel, dtype=int)]
        return self.split.attributes([self.indices[i] for i in sel])

    def by_identity(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for local, i in enumerate(self.indices):
            out.setdefault(self.split.records[i]["identity"], []).append(local)
        return out


def source_trainset(corpus: Corpus, attribute_subset=None) -> TrainSet:
    split = corpus.splits["source"]
    idx = split.indices_for(domain="s")
    atts = split.attributes(idx)
    if attribute_subset is not None:
        atts = atts[:, list(attribute_subset)]
    return TrainSet(split, idx, attributes=atts)


def target_trainsets(split: Split, identities=None) -> tuple[TrainSet, TrainSet]:
    photos = TrainSet(split, split.indices_for(domain="t1", identities=identities))
    sketches = TrainSet(split, split.indices_for(domain="t2", identities=identities))
    return photos, sketches


def _onehot(idx: Array, n: int) -> Array:
    out = np.zeros((len(idx), n))
    out[np.arange(len(idx)), idx] = 1.0
    return out


def _class_index(labels: Array, classes: list[int]) -> Array:
    lut = {c: i for i, c in enumerate(classes)}
    return np.array([lut[int(l)] for l in labels], dtype=int)


def _pk_sample(byid: dict[int, list[int]], batch: int, n_ids: int,
               rng: np.random.Generator) -> list[int]:
    """P identities x K instances; identities without enough images repeat."""
    ids = sorted(byid)
    p = min(n_ids, len(ids))
    k = max(1, batch // p)
    chosen = rng.choice(ids, size=p, replace=False)
    sel: list[int] = []
    for ident in chosen:
        pool = byid[ident]
        take = rng.choice(pool, size=k, replace=len(pool) < k)
        sel.extend(int(t) for t in take)
    return sel[:batch]


# ---------------------------------------------------------------------------
# step 1


@dataclass
class TrainResult:
    model: Model
    log: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)


def _l2norm_for_triplet(v: Array):
    norms = np.sqrt((v ** 2).sum(axis=1, keepdims=True))
    if np.any(norms == 0):
        raise NumericalError("zero embedding norm before triplet")
    y = v / norms

    def backward(dy):
        return (dy - y * (dy * y).sum(axis=1, keepdims=True)) / norms

    return y, backward


def compute_step1_gradients(model: Model, images: Array, y_idx: Array, z: Array | None,
                            config: TrainConfig) -> dict[str, float]:
    """Forward + backward for one source batch; gradients accumulate into the
    model blocks. Returns the loss components."""
    tg = config.toggles
    w = config.weights
    model.zero_grad()
    v, trace = model.e1.forward(images, train=True)
    g = np.zeros_like(v)
    comps: dict[str, float] = {}

    if tg.id_s:
        psi, tr = model.c_id_s.forward(v, train=True)
        val, dpsi = L.identity_ce(psi, _onehot(y_idx, model.c_id_s.output_dim))
        g += model.c_id_s.backward(tr, dpsi)
        comps["id_s"] = val
    if tg.tri_s:
        if config.normalize_for_triplet:
            vt, unnorm = _l2norm_for_triplet(v)
        else:
            vt, unnorm = v, None
        val, da, dg, degen = L.triplet_batch(vt, y_idx, vt, y_idx, w.alpha,
                                             same_set=True, mining=config.triplet_mining)
        dv = da + dg
        if unnorm is not None:
            dv = unnorm(dv)
        g += w.lambda1 * dv
        comps["tri_s"] = val
        comps["tri_s_degenerate"] = float(degen)
    if tg.att_s:
        phi, tr = model.c_att.forward(v, train=True)
        val, dphi = L.attribute_bce_source(phi, z)
        g += model.c_att.backward(tr, w.lambda2 * dphi)
        comps["att_s"] = val

    model.e1.backward(trace, g)
    comps["total"] = L.step1_loss(
        (comps.get("id_s", 0.0), comps.get("tri_s", 0.0), comps.get("att_s", 0.0)), w)
    return comps


def run_step1(config: TrainConfig, source: TrainSet, out_dir=None,
              forbidden_splits=("target_test",)) -> TrainResult:
    """Pre-train the photo encoder with identity/triplet/attribute losses on
    the source set."""
    config.validate()
    tg = config.toggles
    if tg.att_s:
        try:
            source.attributes([0])
        except (ConfigurationError, IndexError) as exc:
            raise ConfigurationError(f"source dataset lacks attribute labels: {exc}")
    streams = seed_streams(config.seed)
    classes = source.identities
    n_att = source.attributes([0]).shape[1] if tg.att_s else 0

    rng_init = streams["init1"]
    arch = config.encoder_arch()
    e1 = Encoder.create(arch, rng_init)
    c_id_s = Head.create("identity_source", config.embedding_dim, len(classes), rng_init,
                         config.head_hidden, label_space=source.label_space) if tg.id_s else None
    c_att = Head.create("attribute", config.embedding_dim, n_att, rng_init,
                        config.head_hidden) if tg.att_s else None
    model = Model(e1=e1, c_id_s=c_id_s, c_att=c_att,
                  meta={"classes_source": classes, "n_attributes": n_att,
                        "label_space_source": source.label_space})

    state = init_adam(model.params())
    byid = source.by_identity()
    n_batches = max(1, math.ceil(len(source) / config.batch_source))
    rng = streams["batch1"]
    audit = source.split.corpus.audit
    result = TrainResult(model=model)
    step = 0
    with audit.guard("train-step1", forbidden_splits):
        for epoch in range(config.epochs_step1):
            lr = warmup_lr(epoch, config.epochs_step1, config)
            epoch_total = 0.0
            for _ in range(n_batches):
                sel = _pk_sample(byid, config.batch_source, config.ids_per_batch, rng)
                images = source.images(sel)
                y_idx = _class_index(source.labels(sel), classes)
                z = source.attributes(sel) if tg.att_s else None
                comps = compute_step1_gradients(model, images, y_idx, z, config)
                adam_step(model.params(), model.grads(), state, lr)
                step += 1
                epoch_total += comps["total"]
                result.log.append({"step": step, "epoch": epoch, "lr": lr,
                                   **{k: float(val) for k, val in comps.items()},
                                   "wall_time": time.time()})
            result.epoch_losses.append(epoch_total / n_batches)
            if out_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(Path(out_dir) / f"step1_epoch{epoch + 1}.ckpt", model,
                                epoch=epoch + 1)
    if out_dir:
        save_checkpoint(Path(out_dir) / "step1.ckpt", model, epoch=config.epochs_step1)
    return result


def moving_average(values, window: int = 10):
    out = []
    for i in range(len(values) - window + 1):
        out.append(sum(values[i:i + window]) / window)
    return out


# ---------------------------------------------------------------------------
# weight transfer


def transfer_weights(step1_model: Model | str | Path | None, config: TrainConfig,
                     n_target_ids: int, target_label_space: str = "target-ids") -> Model:
    """Build the step-2 model: photo encoder weights reloaded for both
    encoders, attribute head resumed, fresh target-identity and domain heads."""
    config.validate()
    tg = config.toggles
    if isinstance(step1_model, (str, Path)):
        step1_model, _ = load_checkpoint(step1_model)
    streams = seed_streams(config.seed)
    rng = streams["init2"]
    arch = config.encoder_arch()

    if step1_model is None:
        e1 = Encoder.create(arch, rng)
        c_att_src = None
        c_id_s = None
        meta: dict = {}
    else:
        diffs = _arch_diffs(step1_model.e1.arch, arch)
        if diffs:
            raise ConfigurationError(
                "checkpoint architecture incompatible with config: " + "; ".join(diffs))
        e1 = step1_model.e1.copy()
        c_att_src = step1_model.c_att
        c_id_s = step1_model.c_id_s
        meta = dict(step1_model.meta)

    e2 = e1.copy()
    need_att = tg.step2_att_s or tg.att_t or tg.con_t
    c_att = None
    if need_att:
        if c_att_src is None:
            raise ConfigurationError(
                "step-2 attribute losses need an attribute head from step 1")
        c_att = _copy_head(c_att_src)
    c_id_t = Head.create("identity_target", config.embedding_dim, n_target_ids, rng,
                         config.head_hidden, label_space=target_label_space) if tg.id_t else None
    c_d = Head.create("domain", config.embedding_dim, len(DOMAIN_ORDER), rng,
                      config.head_hidden) if tg.dom else None
    kept_id_s = _copy_head(c_id_s) if (tg.step2_id_s and c_id_s is not None) else None
    meta.update({"classes_target_n": n_target_ids, "label_space_target": target_label_space})
    return Model(e1=e1, e2=e2, c_id_s=kept_id_s, c_id_t=c_id_t, c_att=c_att, c_d=c_d, meta=meta)


def _copy_head(head: Head) -> Head:
    import copy as _copy
    return _copy.deepcopy(head)


def _arch_diffs(a: dict, b: dict) -> list[str]:
    diffs = []
    if list(a.get("input_shape", [])) != list(b.get("input_shape", [])):
        diffs.append(f"input_shape {a.get('input_shape')} != {b.get('input_shape')}")
    if int(a.get("embedding_dim", -1)) != int(b.get("embedding_dim", -2)):
        diffs.append(f"embedding_dim {a.get('embedding_dim')} != {b.get('embedding_dim')}")
    la, lb = a.get("layers", []), b.get("layers", [])
    if len(la) != len(lb):
        diffs.append(f"layer count {len(la)} != {len(lb)}")
    else:
        for i, (x, y) in enumerate(zip(la, lb)):
            if x != y:
                diffs.append(f"layer {i}: {x} != {y}")
    return diffs


# ---------------------------------------------------------------------------
# step 2


@dataclass
class Step2Batch:
    x_t1: Array
    y_t1: Array  # class indices in the target space
    x_t2: Array
    y_t2: Array
    paired: Array
    x_s: Array | None = None
    y_s: Array | None = None  # class indices in the source space
    z_s: Array | None = None


def compose_step2_batch(source: TrainSet | None, photos: TrainSet, sketches: TrainSet,
                        rng: np.random.Generator, config: TrainConfig,
                        target_classes: list[int], source_classes: list[int] | None = None,
                        needs_source: bool = True) -> Step2Batch:
    """Sample sketch-to-photo pairs plus (optionally) source samples.

    Pairs are aligned: photo i and sketch i share an identity, so the pairing
    indicator is computed, not assumed.
    """
    photo_byid = photos.by_identity()
    sketch_byid = sketches.by_identity()
    ids = sorted(set(photo_byid) & set(sketch_byid))
    if len(ids) < 2:
        raise DegenerateBatchError(
            f"target batch needs >= 2 identities with photo+sketch, got {len(ids)}")
    n = config.batch_pairs
    chosen = list(rng.choice(ids, size=min(n, len(ids)), replace=False))
    if n > len(ids):
        chosen += list(rng.choice(ids, size=n - len(ids), replace=True))
    p_sel = [int(rng.choice(photo_byid[i])) for i in chosen]
    s_sel = [int(rng.choice(sketch_byid[i])) for i in chosen]
    y_t1 = photos.labels(p_sel)
    y_t2 = sketches.labels(s_sel)
    batch = Step2Batch(
        x_t1=photos.images(p_sel), y_t1=_class_index(y_t1, target_classes),
        x_t2=sketches.images(s_sel), y_t2=_class_index(y_t2, target_classes),
        paired=(y_t1 == y_t2).astype(float))
    if needs_source and source is not None:
        sel = _pk_sample(source.by_identity(), config.batch_source_step2,
                         config.ids_per_batch_step2, rng)
        batch.x_s = source.images(sel)
        if source_classes is not None:
            batch.y_s = _class_index(source.labels(sel), source_classes)
        batch.z_s = source.attributes(sel)
    return batch


def compute_step2_gradients(model: Model, batch: Step2Batch,
                            config: TrainConfig) -> dict[str, float]:
    """Forward + backward for one co-training batch.

    All blocks accumulate descent gradients of the step-2 objective except the
    domain head, which accumulates the descent gradient of the negated domain
    score (equivalently: it ascends the domain score). Returns loss components.
    """
    tg = config.toggles
    w = config.weights
    model.zero_grad()
    comps: dict[str, float] = {}

    v_t1, tr_t1 = model.e1.forward(batch.x_t1, train=True)
    v_t2, tr_t2 = model.e2.forward(batch.x_t2, train=True)
    g_t1 = np.zeros_like(v_t1)
    g_t2 = np.zeros_like(v_t2)
    has_source = batch.x_s is not None
    if has_source:
        v_s, tr_s = model.e1.forward(batch.x_s, train=True)
        g_s = np.zeros_like(v_s)

    if tg.id_t:
        n_cls = model.c_id_t.output_dim
        psi1, tr = model.c_id_t.forward(v_t1, train=True)
        val1, dpsi1 = L.identity_ce(psi1, _onehot(batch.y_t1, n_cls))
        g_t1 += model.c_id_t.backward(tr, dpsi1)
        psi2, tr = model.c_id_t.forward(v_t2, train=True)
        val2, dpsi2 = L.identity_ce(psi2, _onehot(batch.y_t2, n_cls))
        g_t2 += model.c_id_t.backward(tr, dpsi2)
        comps["id_t"] = val1 + val2

    if tg.tri_t:
        if config.normalize_for_triplet:
            a_emb, unnorm_a = _l2norm_for_triplet(v_t2)
            g_emb, unnorm_g = _l2norm_for_triplet(v_t1)
        else:
            a_emb, g_emb, unnorm_a, unnorm_g = v_t2, v_t1, None, None
        val, da, dg, degen = L.triplet_batch(a_emb, batch.y_t2, g_emb, batch.y_t1,
                                             w.alpha, same_set=False,
                                             mining=config.triplet_mining)
        if unnorm_a is not None:
            da, dg = unnorm_a(da), unnorm_g(dg)
        g_t2 += w.lambda1 * da
        g_t1 += w.lambda1 * dg
        comps["tri_t"] = val
        comps["tri_t_degenerate"] = float(degen)

    att_parts = []
    if model.c_att is not None and tg.step2_att_s and has_source:
        phi_s, tr = model.c_att.forward(v_s, train=True)
        val, dphi = L.attribute_bce_source(phi_s, batch.z_s)
        g_s += model.c_att.backward(tr, w.lambda2 * dphi)
        comps["att_s"] = val
        att_parts.append(val)
    if model.c_att is not None and (tg.att_t or tg.con_t):
        phi1, trp1 = model.c_att.forward(v_t1, train=True)
        phi2, trp2 = model.c_att.forward(v_t2, train=True)
        dphi1 = np.zeros_like(phi1)
        dphi2 = np.zeros_like(phi2)
        if tg.att_t:
            val, g1, g2 = L.attribute_entropy_target(phi1, phi2, full=config.entropy_full)
            dphi1 += g1
            dphi2 += g2
            comps["att_t"] = val
            att_parts.append(val)
        if tg.con_t:
            val, c1, c2 = L.attribute_consistency(phi1, phi2, batch.paired)
            dphi1 += c1
            dphi2 += c2
            comps["con_t"] = val
            att_parts.append(val)
        g_t1 += model.c_att.backward(trp1, w.lambda2 * dphi1)
        g_t2 += model.c_att.backward(trp2, w.lambda2 * dphi2)
    comps["att"] = float(sum(att_parts))

    if tg.dom:
        if not has_source:
            raise ConfigurationError("domain loss needs source samples in the batch")
        groups = ((grl_apply(v_s), 0), (grl_apply(v_t1), 1), (grl_apply(v_t2), 2))
        rhos, traces, donehots = [], [], []
        for emb, dcls in groups:
            rho, tr = model.c_d.forward(emb, train=True)
            rhos.append(rho)
            traces.append(tr)
            donehots.append(_onehot(np.full(len(emb), dcls, dtype=int), len(DOMAIN_ORDER)))
        val, dr_s, dr_t1, dr_t2 = L.domain_reverse_ce(*rhos, *donehots)
        comps["dom"] = val
        # domain head descends -L_d (ascends L_d); encoders receive the
        # lambda3-weighted branch gradient through the reversal layer
        din = [model.c_d.backward(tr, -dr) for tr, dr in zip(traces, (dr_s, dr_t1, dr_t2))]
        g_s += grl_apply(v_s, "backward", w.lambda3 * din[0])
        g_t1 += grl_apply(v_t1, "backward", w.lambda3 * din[1])
        g_t2 += grl_apply(v_t2, "backward", w.lambda3 * din[2])

    if tg.step2_id_s and model.c_id_s is not None and has_source:
        psi, tr = model.c_id_s.forward(v_s, train=True)
        val, dpsi = L.identity_ce(psi, _onehot(batch.y_s, model.c_id_s.output_dim))
        g_s += model.c_id_s.backward(tr, dpsi)
        comps["id_s2"] = val
    if tg.step2_tri_s and has_source:
        val, da, dg, _ = L.triplet_batch(v_s, batch.y_s, v_s, batch.y_s, w.alpha,
                                         same_set=True, mining=config.triplet_mining)
        g_s += w.lambda1 * (da + dg)
        comps["tri_s2"] = val

    if has_source:
        model.e1.backward(tr_s, g_s)
    model.e1.backward(tr_t1, g_t1)
    model.e2.backward(tr_t2, g_t2)
    comps["total"] = L.step2_loss(
        (comps.get("id_t", 0.0), comps.get("tri_t", 0.0), comps.get("att", 0.0),
         comps.get("dom", 0.0)), w) \
        + comps.get("id_s2", 0.0) + w.lambda1 * comps.get("tri_s2", 0.0)
    return comps


def run_step2(config: TrainConfig, model: Model, source: TrainSet | None,
              target_photos: TrainSet, target_sketches: TrainSet,
              out_dir=None) -> TrainResult:
    """Tri-domain co-training with the adversarial domain head."""
    config.validate()
    tg = config.toggles
    if len(set(target_photos.by_identity()) & set(target_sketches.by_identity())) == 0:
        raise ConfigurationError("target training data has no photo/sketch pairing structure")
    needs_source = tg.dom or (tg.step2_att_s and model.c_att is not None) \
        or tg.step2_id_s or tg.step2_tri_s
    if needs_source and source is None:
        raise ConfigurationError("step-2 configuration requires source data")
    target_classes = sorted(set(target_photos.identities) | set(target_sketches.identities))
    source_classes = None
    if model.c_id_s is not None and source is not None:
        source_classes = model.meta.get("classes_source") or source.identities
    if model.c_id_t is not None and model.c_id_t.output_dim != len(target_classes):
        raise ConfigurationError(
            f"target identity head width {model.c_id_t.output_dim} != "
            f"{len(target_classes)} target identities")
    # disjoint label spaces: the target head may never classify into Y^s
    if model.c_id_t is not None and model.c_id_t.label_space != target_photos.label_space:
        raise ConfigurationError(
            f"target identity head bound to label space {model.c_id_t.label_space!r}, "
            f"batch provides {target_photos.label_space!r}")

    n_pairs = sum(len(p) * len(target_sketches.by_identity().get(i, ()))
                  for i, p in target_photos.by_identity().items())
    n_batches = max(1, math.ceil(n_pairs / config.batch_pairs))
    streams = seed_streams(config.seed)
    rng = streams["batch2"]
    state = init_adam(model.params())
    audit = target_photos.split.corpus.audit
    result = TrainResult(model=model)
    step = 0
    with audit.guard("train-step2", ("target_test",)):
        for epoch in range(config.epochs_step2):
            lr = warmup_lr(epoch, config.epochs_step2, config)
            epoch_total = 0.0
            for _ in range(n_batches):
                batch = compose_step2_batch(source, target_photos, target_sketches, rng,
                                            config, target_classes, source_classes,
                                            needs_source)
                comps = compute_step2_gradients(model, batch, config)
                adam_step(model.params(), model.grads(), state, lr)
                step += 1
                epoch_total += comps["total"]
                result.log.append({"step": step, "epoch": epoch, "lr": lr,
                                   **{k: float(val) for k, val in comps.items()},
                                   "wall_time": time.time()})
            result.epoch_losses.append(epoch_total / n_batches)
            if out_dir and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(Path(out_dir) / f"step2_epoch{epoch + 1}.ckpt", model,
                                epoch=epoch + 1)
    if out_dir:
        save_checkpoint(Path(out_dir) / "step2.ckpt", model, epoch=config.epochs_step2)
    return result


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class RunPlan:
    do_step1: bool = True
    do_step2: bool = True
    target_fraction: float = 1.0


def step1_signature(config: TrainConfig) -> tuple:
    """Everything that determines a step-1 result, as a cache key."""
    t = config.toggles
    return (config.seed, t.id_s, t.tri_s, t.att_s, config.epochs_step1,
            config.batch_source, config.ids_per_batch, config.base_lr,
            config.warmup_epochs, config.encoder_kind, tuple(config.hidden),
            tuple(config.conv_channels), config.embedding_dim, config.head_hidden,
            config.image_size, config.normalize_for_triplet, config.triplet_mining,
            config.attribute_subset, config.weights.lambda1, config.weights.lambda2,
            config.weights.alpha)


@dataclass
class PipelineResult:
    model: Model
    cmc: dict
    step1: TrainResult | None = None
    step2: TrainResult | None = None
    target_identities: list = field(default_factory=list)


def run_pipeline(corpus: Corpus, config: TrainConfig, plan: RunPlan | None = None,
                 out_dir=None, step1_cache: dict | None = None) -> PipelineResult:
    """Step 1 -> transfer -> step 2 -> bidirectional CMC on target test.

    step1_cache maps step1_signature(config) to a finished step-1 model so
    ablation rows sharing a pre-training setting reuse it; results are
    identical to a fresh run because step 1 is deterministic in its signature.
    """
    plan = plan or RunPlan()
    config.validate()
    streams = seed_streams(config.seed)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    train_split = corpus.splits["target_train"]
    ids = train_split.identities
    if plan.target_fraction < 1.0:
        take = max(2, int(round(plan.target_fraction * len(ids))))
        ids = sorted(streams["fraction"].choice(ids, size=take, replace=False).tolist())
    photos, sketches = target_trainsets(train_split, identities=ids)

    needs_source_data = plan.do_step1 or config.toggles.dom or config.toggles.step2_att_s \
        or config.toggles.step2_id_s or config.toggles.step2_tri_s
    source = source_trainset(corpus, config.attribute_subset) if needs_source_data else None

    step1_res = None
    if plan.do_step1:
        key = step1_signature(config)
        if step1_cache is not None and key in step1_cache:
            base = step1_cache[key]
        else:
            step1_res = run_step1(config, source, out_dir=out_dir)
            base = step1_res.model
            if step1_cache is not None:
                step1_cache[key] = base
    else:
        base = None

    if plan.do_step2:
        target_classes = sorted(set(photos.identities) | set(sketches.identities))
        model = transfer_weights(base, config, len(target_classes),
                                 target_label_space=train_split.label_space)
        step2_res = run_step2(config, model, source, photos, sketches, out_dir=out_dir)
        final = step2_res.model
    else:
        step2_res = None
        if base is not None:
            final = Model(e1=base.e1, e2=base.e1.copy(), c_att=base.c_att,
                          c_id_s=base.c_id_s, meta=dict(base.meta))
        else:
            rng = streams["init2"]
            e1 = Encoder.create(config.encoder_arch(), rng)
            final = Model(e1=e1, e2=e1.copy())

    cmc_results = evaluate_bidirectional(final, corpus.splits["target_test"])
    if out_dir:
        save_checkpoint(out_dir / "final.ckpt", final)
        write_jsonl(out_dir / "train_log.jsonl",
                    (step1_res.log if step1_res else []) + (step2_res.log if step2_res else []))
    return PipelineResult(model=final, cmc=cmc_results, step1=step1_res, step2=step2_res,
                          target_identities=list(ids))


def write_jsonl(path, records) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
