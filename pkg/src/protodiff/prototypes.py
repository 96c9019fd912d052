"""Shared feature extractor, three prototype heads, and explanation reports.

A small conv autoencoder is trained on the phantom images; its frozen encoder
supplies the feature maps every head works over. Each head keeps a bank of m
prototype vectors in feature space:

- ppnet: cluster plus alignment objective, prototypes pushed onto real
  training patches afterwards.
- eppnet: ppnet objective plus a pairwise exponential repulsion term.
- protopool: soft assignment of every feature cell to the prototype pool,
  trained by feature reconstruction; prototypes stay free vectors (no push).

Explanations link a generated image to prototypes via max-similarity scores,
their softmax (the influence weights), per-prototype spatial correlation, and
the aggregate faithfulness score.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NonFiniteError
from . import metrics
from . import tensor as T
from .tensor import Tensor

Array = np.ndarray

HEADS = ("ppnet", "eppnet", "protopool")

# additive penalty that excludes non-assigned cells from a min without
# branching; must dominate any plausible squared feature distance
_EXCLUDE = 1e9


# -- feature extractor ------------------------------------------------------------


class FeatureExtractor:
    """Conv encoder mapping a 2-D image to an (feat_hw, feat_hw, feat_dim) map."""

    def __init__(self, rng: np.random.Generator, image_size: int,
                 feat_hw: int = 8, feat_dim: int = 16):
        if image_size < feat_hw or image_size % feat_hw != 0:
            raise ValueError("image size must be a multiple of the feature grid")
        ratio = image_size // feat_hw
        n_down = int(round(np.log2(ratio)))
        if 2 ** n_down != ratio:
            raise ValueError("image size / feature grid must be a power of two")
        self.image_size = image_size
        self.feat_hw = feat_hw
        self.feat_dim = feat_dim
        self.n_down = n_down
        self.frozen = False
        d = feat_dim
        p: dict[str, Tensor] = {"stem_w": T.he_conv(rng, d, 1, 3),
                                "stem_b": Tensor.zeros((d,), requires_grad=True)}
        for i in range(n_down):
            p[f"down{i}_w"] = T.he_conv(rng, d, d, 3)
            p[f"down{i}_b"] = Tensor.zeros((d,), requires_grad=True)
        p["head_w"] = T.he_conv(rng, d, d, 3)
        p["head_b"] = Tensor.zeros((d,), requires_grad=True)
        self.params = p

    @property
    def param_list(self) -> list[Tensor]:
        return list(self.params.values())

    def _conv(self, x: Tensor, name: str, stride: int = 1) -> Tensor:
        out = T.conv2d(x, self.params[f"{name}_w"], stride=stride, padding=1)
        return T.add(out, T.reshape(self.params[f"{name}_b"], (1, -1, 1, 1)))

    def encode(self, x: Tensor) -> Tensor:
        """(B, 1, H, W) -> (B, D, feat_hw, feat_hw); linear final layer."""
        h = T.silu(self._conv(x, "stem"))
        for i in range(self.n_down):
            h = T.silu(self._conv(h, f"down{i}", stride=2))
        return self._conv(h, "head")

    def features(self, image: Array) -> Array:
        """Frozen forward for one image; returns (feat_hw, feat_hw, feat_dim)."""
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (self.image_size, self.image_size):
            raise ValueError(f"expected {self.image_size}x{self.image_size} image")
        with T.no_grad():
            out = self.encode(Tensor(image[None, None]))
        return np.transpose(out.data[0], (1, 2, 0))

    def features_batch(self, images: Array) -> Array:
        """(N, H, W) -> (N, feat_hw, feat_hw, feat_dim), frozen forward."""
        images = np.asarray(images, dtype=np.float64)
        with T.no_grad():
            out = self.encode(Tensor(images[:, None]))
        return np.transpose(out.data, (0, 2, 3, 1))

    def save(self, ckpt_path, meta_path) -> None:
        T.save_checkpoint(ckpt_path, self.params)
        meta = {"image_size": self.image_size, "feat_hw": self.feat_hw,
                "feat_dim": self.feat_dim}
        with open(meta_path, "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, ckpt_path, meta_path) -> "FeatureExtractor":
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        ext = cls(np.random.default_rng(0), meta["image_size"],
                  meta["feat_hw"], meta["feat_dim"])
        state = T.load_checkpoint(ckpt_path)
        for name, param in ext.params.items():
            if name not in state:
                raise ValueError(f"extractor checkpoint missing {name!r}")
            if tuple(state[name].shape) != param.shape:
                raise ValueError(f"extractor parameter {name!r} shape mismatch")
            param.data = state[name]
        ext.frozen = True
        return ext


class _Decoder:
    """Mirror of the encoder, used only while training the extractor."""

    def __init__(self, rng: np.random.Generator, feat_dim: int, n_down: int):
        self.n_down = n_down
        d = feat_dim
        p: dict[str, Tensor] = {}
        for i in range(n_down):
            p[f"up{i}_w"] = T.he_conv(rng, d, d, 3)
            p[f"up{i}_b"] = Tensor.zeros((d,), requires_grad=True)
        p["out_w"] = T.he_conv(rng, 1, d, 3)
        p["out_b"] = Tensor.zeros((1,), requires_grad=True)
        self.params = p

    @property
    def param_list(self) -> list[Tensor]:
        return list(self.params.values())

    def decode(self, h: Tensor) -> Tensor:
        for i in range(self.n_down):
            up = T.conv2d(T.upsample2x(h), self.params[f"up{i}_w"], padding=1)
            h = T.silu(T.add(up, T.reshape(self.params[f"up{i}_b"], (1, -1, 1, 1))))
        out = T.conv2d(h, self.params["out_w"], padding=1)
        return T.add(out, T.reshape(self.params["out_b"], (1, -1, 1, 1)))


def train_extractor(images: Array, rng: np.random.Generator, *,
                    feat_hw: int = 8, feat_dim: int = 16, epochs: int = 20,
                    lr: float = 1e-3, batch_size: int = 8) -> FeatureExtractor:
    """Train encoder+decoder on image reconstruction, then freeze the encoder."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or images.shape[0] < 1:
        raise ValueError("expected a non-empty (N, H, W) image stack")
    n, size = images.shape[0], images.shape[1]
    ext = FeatureExtractor(rng, size, feat_hw=feat_hw, feat_dim=feat_dim)
    dec = _Decoder(rng, feat_dim, ext.n_down)
    opt = T.AdamState(lr=lr)
    params = ext.param_list + dec.param_list
    history: list[float] = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            batch = images[order[start:start + batch_size]][:, None]
            recon = dec.decode(ext.encode(Tensor(batch)))
            diff = T.sub(recon, Tensor(batch))
            loss = T.tmean(T.mul(diff, diff))
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteError("extractor reconstruction loss is not finite")
            T.backward(loss)
            T.adam_step(params, opt)
            epoch_loss += value * batch.shape[0]
        history.append(epoch_loss / n)
    ext.frozen = True
    ext.train_history = history
    return ext


# -- prototype bank ----------------------------------------------------------------


@dataclass
class Provenance:
    image_id: str
    h: int
    w: int


class PrototypeBank:
    def __init__(self, prototypes: Array, head_kind: str,
                 lambda_div: float = 0.1):
        prototypes = np.array(prototypes, dtype=np.float64)
        if prototypes.ndim != 2 or prototypes.shape[0] < 1:
            raise ValueError("prototypes must be a non-empty (m, D) array")
        if not np.all(np.isfinite(prototypes)):
            raise ValueError("prototypes must be finite")
        if head_kind not in HEADS:
            raise ValueError(f"unknown head kind {head_kind!r}")
        self.prototypes = prototypes
        self.head_kind = head_kind
        self.lambda_div = float(lambda_div)
        self.provenance: list[Provenance | None] = [None] * prototypes.shape[0]

    @property
    def m(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def save(self, ckpt_path, meta_path) -> None:
        T.save_checkpoint(ckpt_path, {"prototypes": self.prototypes})
        meta = {
            "head_kind": self.head_kind,
            "lambda_div": self.lambda_div,
            "provenance": [None if p is None else
                           {"image_id": p.image_id, "h": p.h, "w": p.w}
                           for p in self.provenance],
        }
        with open(meta_path, "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, ckpt_path, meta_path) -> "PrototypeBank":
        state = T.load_checkpoint(ckpt_path)
        if "prototypes" not in state:
            raise ValueError("bank checkpoint missing 'prototypes'")
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        bank = cls(state["prototypes"], meta["head_kind"], meta["lambda_div"])
        prov = meta.get("provenance", [])
        if len(prov) != bank.m:
            raise ValueError("provenance length does not match prototype count")
        bank.provenance = [None if p is None else
                           Provenance(p["image_id"], int(p["h"]), int(p["w"]))
                           for p in prov]
        return bank


# -- head math (pure array forms) ---------------------------------------------------


def similarity_map(f_x: Array, p: Array) -> Array:
    """Negative squared distance between every feature cell and the prototype."""
    f_x = np.asarray(f_x, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if f_x.ndim != 3 or p.ndim != 1 or f_x.shape[2] != p.shape[0]:
        raise ValueError("expected feature map (H, W, D) and prototype (D,)")
    return -np.sum((f_x - p) ** 2, axis=2)


def max_similarity(f_x: Array, p: Array) -> tuple[float, tuple[int, int]]:
    """Best similarity and its cell; ties go to the smallest row-major index."""
    s = similarity_map(f_x, p)
    if s.size == 0:
        raise ValueError("empty feature map")
    idx = int(np.argmax(s))
    h, w = np.unravel_index(idx, s.shape)
    return float(s[h, w]), (int(h), int(w))


def bank_scores(bank: PrototypeBank, f_x: Array) -> tuple[Array, list[tuple[int, int]]]:
    """Per-prototype max similarity g and matched cells for one feature map."""
    pairs = [max_similarity(f_x, bank.prototypes[j]) for j in range(bank.m)]
    g = np.array([p[0] for p in pairs])
    return g, [p[1] for p in pairs]


def nis(g: Array) -> Array:
    """Softmax of the similarity scores; the influence weights."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1 or g.size < 1:
        raise ValueError("expected a non-empty score vector")
    if not np.all(np.isfinite(g)):
        raise ValueError("scores must be finite")
    shifted = np.exp(g - g.max())
    return shifted / shifted.sum()


def alignment_loss(bank: PrototypeBank,
                   assigned: Sequence[Sequence[Array]]) -> float:
    """Sum over prototypes of the squared distance to the nearest assigned patch.

    `assigned[j]` holds the feature maps of the samples assigned to prototype
    j; for each map the relevant patch is its best-matching cell.
    """
    if len(assigned) != bank.m:
        raise ValueError("need one sample group per prototype")
    total = 0.0
    for j in range(bank.m):
        group = assigned[j]
        if len(group) == 0:
            raise ValueError(f"prototype {j} has no assigned samples")
        best = min(float(np.min(-similarity_map(f, bank.prototypes[j])))
                   for f in group)
        total += best
    return total


def diversity_loss(bank: PrototypeBank) -> float:
    """Pairwise exponential repulsion over ordered prototype pairs."""
    if bank.m < 2:
        warnings.warn("diversity loss of a single prototype is 0 by definition")
        return 0.0
    p = bank.prototypes
    d2 = np.sum((p[:, None, :] - p[None, :, :]) ** 2, axis=2)
    return float(np.exp(-d2).sum() - bank.m)


def pool_assign(f_x: Array, bank: PrototypeBank) -> tuple[Array, Array]:
    """Soft cell-to-prototype weights and the pooled feature map.

    alpha[h, w] is a softmax over prototypes of the negative squared
    distances; z[h, w] is the corresponding convex combination.
    """
    if bank.head_kind != "protopool":
        raise ValueError("pool assignment is defined for the protopool head")
    f_x = np.asarray(f_x, dtype=np.float64)
    if f_x.ndim != 3 or f_x.shape[2] != bank.dim:
        raise ValueError("feature depth does not match prototype dimension")
    d2 = np.sum((f_x[:, :, None, :] - bank.prototypes[None, None]) ** 2, axis=3)
    shifted = np.exp(-(d2 - d2.min(axis=2, keepdims=True)))
    alpha = shifted / shifted.sum(axis=2, keepdims=True)
    z = alpha @ bank.prototypes
    return alpha, z


def assign_images(prototypes: Array, feats: Array) -> Array:
    """Nearest prototype per image by best-cell similarity; ties to smallest j."""
    # feats (N, H, W, D) vs prototypes (m, D) -> g (N, m)
    d2 = np.sum((feats[:, :, :, None, :] - prototypes[None, None, None]) ** 2,
                axis=4)
    g = -d2.reshape(feats.shape[0], -1, prototypes.shape[0]).min(axis=1)
    return np.argmax(g, axis=1)


# -- differentiable head objectives --------------------------------------------------


def _proto_patch_d2(protos: Tensor, patches: Array) -> Tensor:
    """Squared distances (m, K) between prototype tensors and constant patches."""
    m, d = protos.shape
    diff = T.sub(T.reshape(protos, (m, 1, d)), Tensor(patches[None]))
    return T.tsum(T.mul(diff, diff), axes=2)


def ppnet_objective(protos: Tensor, feats: Array, assignment: Array) -> Tensor:
    """Cluster cost plus per-prototype alignment to assigned samples.

    feats is (N, P, D) with P cells per image; assignment maps each image to
    one prototype. Images never assigned to a prototype contribute nothing to
    its alignment term.
    """
    n, cells, d = feats.shape
    m = protos.shape[0]
    d2 = T.reshape(_proto_patch_d2(protos, feats.reshape(n * cells, d)),
                   (m, n, cells))

    best_per_cell, _ = T.tmax(T.neg(d2), axis=0)        # (n, cells)
    best_per_image, _ = T.tmax(best_per_cell, axis=1)   # (n,)
    cluster = T.tmean(T.neg(best_per_image))

    exclude = np.where(assignment[None, :] == np.arange(m)[:, None],
                       0.0, _EXCLUDE)[:, :, None]
    masked = T.add(d2, Tensor(exclude))
    nearest, _ = T.tmax(T.neg(T.reshape(masked, (m, n * cells))), axis=1)
    has_any = (np.bincount(assignment, minlength=m) > 0).astype(np.float64)
    align = T.tsum(T.mul(T.neg(nearest), Tensor(has_any)))
    return T.add(cluster, align)


def diversity_term(protos: Tensor) -> Tensor:
    """Differentiable ordered-pair repulsion, matching diversity_loss."""
    m, d = protos.shape
    diff = T.sub(T.reshape(protos, (m, 1, d)), T.reshape(protos, (1, m, d)))
    pd2 = T.tsum(T.mul(diff, diff), axes=2)
    return T.tsum(T.texp(T.neg(pd2))) - float(m)


def eppnet_objective(protos: Tensor, feats: Array, assignment: Array,
                     lambda_div: float) -> Tensor:
    base = ppnet_objective(protos, feats, assignment)
    return T.add(base, T.scale(diversity_term(protos), lambda_div))


def protopool_objective(protos: Tensor, patches: Array) -> Tensor:
    """Feature reconstruction through the soft prototype pool, summed over cells."""
    k, d = patches.shape
    m = protos.shape[0]
    diff = T.sub(Tensor(patches[:, None, :]), T.reshape(protos, (1, m, d)))
    d2 = T.tsum(T.mul(diff, diff), axes=2)              # (k, m)
    alpha = T.softmax(T.neg(d2), axis=1)
    z = T.matmul(alpha, protos)
    r = T.sub(Tensor(patches), z)
    return T.tsum(T.mul(r, r))


# -- training, push, explanation -----------------------------------------------------


def init_prototypes(rng: np.random.Generator, feats: Array, m: int) -> Array:
    """Sample m training feature patches as the starting bank."""
    n, hw, ww, d = feats.shape
    pool = feats.reshape(n * hw * ww, d)
    take = rng.choice(pool.shape[0], size=m, replace=pool.shape[0] < m)
    return pool[take].copy()


def train_head(bank: PrototypeBank, extractor: FeatureExtractor, images: Array,
               rng: np.random.Generator, *, epochs: int = 40, lr: float = 0.05,
               image_ids: Sequence[str] | None = None) -> PrototypeBank:
    """Optimize the bank's prototypes against the frozen extractor's features.

    ppnet and eppnet finish with a push onto real training patches; protopool
    keeps its soft pooled prototypes.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or images.shape[0] < 1:
        raise ValueError("expected a non-empty (N, H, W) image stack")
    del rng  # full-batch optimization; kept in the signature for symmetry
    feats = extractor.features_batch(images)
    n = feats.shape[0]
    patches = feats.reshape(n, -1, extractor.feat_dim)
    flat = patches.reshape(-1, extractor.feat_dim)

    protos = Tensor(bank.prototypes, requires_grad=True)
    opt = T.AdamState(lr=lr)
    history: list[float] = []
    for _ in range(epochs):
        if bank.head_kind == "protopool":
            obj = T.scale(protopool_objective(protos, flat), 1.0 / flat.shape[0])
        else:
            assignment = assign_images(protos.data, feats)
            if bank.head_kind == "ppnet":
                obj = ppnet_objective(protos, patches, assignment)
            else:
                obj = eppnet_objective(protos, patches, assignment,
                                       bank.lambda_div)
        value = obj.item()
        if not np.isfinite(value):
            raise NonFiniteError("prototype objective is not finite")
        history.append(value)
        T.backward(obj)
        T.adam_step([protos], opt)

    bank.prototypes = protos.data
    bank.train_history = history
    if bank.head_kind in ("ppnet", "eppnet"):
        push_prototypes(bank, extractor, images, image_ids=image_ids)
    return bank


def push_prototypes(bank: PrototypeBank, extractor: FeatureExtractor,
                    images: Array, image_ids: Sequence[str] | None = None
                    ) -> PrototypeBank:
    """Replace each prototype with its globally nearest training patch."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or images.shape[0] < 1:
        raise ValueError("expected a non-empty (N, H, W) image stack")
    if image_ids is None:
        image_ids = [f"train_{i:04d}" for i in range(images.shape[0])]
    if len(image_ids) != images.shape[0]:
        raise ValueError("one id per image required")
    feats = extractor.features_batch(images)
    n, hw, ww, d = feats.shape
    flat = feats.reshape(-1, d)
    for j in range(bank.m):
        idx = int(np.argmin(np.sum((flat - bank.prototypes[j]) ** 2, axis=1)))
        img, h, w = np.unravel_index(idx, (n, hw, ww))
        bank.prototypes[j] = flat[idx].copy()
        bank.provenance[j] = Provenance(str(image_ids[img]), int(h), int(w))
    return bank


@dataclass
class PrototypeRecord:
    j: int
    g: float
    nis: float
    corr: float
    match_h: int
    match_w: int
    source_image_id: str | None
    source_h: int | None
    source_w: int | None


@dataclass
class ExplanationReport:
    image_id: str
    head_kind: str
    m: int
    faithfulness: float
    records: list[PrototypeRecord]

    def __post_init__(self) -> None:
        total = sum(r.nis for r in self.records)
        if abs(total - 1.0) > 1e-9:
            raise ValueError("influence weights must sum to 1")
        ordered = all(self.records[i].nis >= self.records[i + 1].nis
                      for i in range(len(self.records) - 1))
        if not ordered:
            raise ValueError("records must be sorted by influence, descending")

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "head_kind": self.head_kind,
            "m": self.m,
            "faithfulness": self.faithfulness,
            "records": [{
                "j": r.j, "g": r.g, "nis": r.nis, "corr": r.corr,
                "match": {"h": r.match_h, "w": r.match_w},
                "source": None if r.source_image_id is None else {
                    "image_id": r.source_image_id,
                    "h": r.source_h, "w": r.source_w},
            } for r in self.records],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExplanationReport":
        records = []
        for r in data["records"]:
            src = r.get("source")
            records.append(PrototypeRecord(
                j=int(r["j"]), g=float(r["g"]), nis=float(r["nis"]),
                corr=float(r["corr"]),
                match_h=int(r["match"]["h"]), match_w=int(r["match"]["w"]),
                source_image_id=None if src is None else src["image_id"],
                source_h=None if src is None else int(src["h"]),
                source_w=None if src is None else int(src["w"])))
        return cls(image_id=data["image_id"], head_kind=data["head_kind"],
                   m=int(data["m"]), faithfulness=float(data["faithfulness"]),
                   records=records)


def explain(bank: PrototypeBank, extractor: FeatureExtractor, image: Array,
            image_id: str) -> ExplanationReport:
    """Full per-image explanation: scores, influence, correlations, sources."""
    needs_sources = bank.head_kind in ("ppnet", "eppnet")
    if needs_sources and any(p is None for p in bank.provenance):
        raise ValueError(f"{bank.head_kind} explanations need pushed provenance")
    f_x = extractor.features(np.asarray(image, dtype=np.float64))
    g, cells = bank_scores(bank, f_x)
    weights = nis(g)
    corrs = np.array([metrics.spatial_corr(bank.prototypes[j], f_x)
                      for j in range(bank.m)])
    score = metrics.faithfulness(weights, corrs)
    order = sorted(range(bank.m), key=lambda j: (-weights[j], j))
    records = []
    for j in order:
        prov = bank.provenance[j]
        records.append(PrototypeRecord(
            j=j, g=float(g[j]), nis=float(weights[j]), corr=float(corrs[j]),
            match_h=cells[j][0], match_w=cells[j][1],
            source_image_id=None if prov is None else prov.image_id,
            source_h=None if prov is None else prov.h,
            source_w=None if prov is None else prov.w))
    return ExplanationReport(image_id=image_id, head_kind=bank.head_kind,
                             m=bank.m, faithfulness=score, records=records)
