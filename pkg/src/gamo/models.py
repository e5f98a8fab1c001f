"""Networks and losses of the three-player oversampling game.

The classifier M has one independent sigmoid line per class (prediction is
argmax over lines), the conditional discriminator D sees features with a
one-hot class appended, and the convex generator produces new minority
samples as softmax-weighted combinations of the real class members, so every
generated point lies in the class's convex hull by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .data import Dataset
from .diffcore import Mlp, Parameter, Tensor, forward, init_mlp

LOSS_VARIANTS = ("ce", "ls")


def check_variant(variant: str) -> str:
    v = variant.lower()
    if v not in LOSS_VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}; expected one of {LOSS_VARIANTS}")
    return v


def onehot(labels, class_count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim == 0:
        labels = labels[None]
    if labels.min() < 0 or labels.max() >= class_count:
        raise ValueError(f"label out of range 0..{class_count - 1}")
    out = np.zeros((labels.size, class_count))
    out[np.arange(labels.size), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

class FeatureExtractor:
    """Identity (flattened inputs) or a trainable dense feature map."""

    def __init__(self, net: Mlp | None = None):
        self.net = net

    @property
    def is_identity(self) -> bool:
        return self.net is None

    def apply(self, x: Tensor) -> Tensor:
        if self.net is None:
            return x
        return forward(self.net, x)

    def transform(self, arr: np.ndarray) -> np.ndarray:
        """Untraced feature mapping for snapshots and evaluation."""
        if self.net is None:
            return np.asarray(arr, dtype=np.float64)
        with dc.no_grad():
            return forward(self.net, Tensor(arr)).data

    def out_dim(self, in_dim: int) -> int:
        return in_dim if self.net is None else self.net.out_dim

    def parameters(self) -> list[Parameter]:
        return [] if self.net is None else self.net.parameters()


class Classifier:
    """Network M: c independent sigmoid output lines."""

    def __init__(self, net: Mlp):
        if net.activations()[-1] != "sigmoid":
            raise ValueError("classifier output activation must be sigmoid")
        self.net = net
        self.class_count = net.out_dim

    def outputs(self, features: Tensor) -> Tensor:
        return forward(self.net, features)

    def parameters(self) -> list[Parameter]:
        return self.net.parameters()


def predict(classifier: Classifier, features: np.ndarray) -> np.ndarray:
    """Argmax over the class lines; ties break toward the smaller class id."""
    with dc.no_grad():
        out = classifier.outputs(Tensor(np.atleast_2d(features)))
    return np.argmax(out.data, axis=1)


class Discriminator:
    """Conditional real/fake discriminator: sigmoid on features + one-hot class."""

    def __init__(self, net: Mlp, class_count: int):
        if net.activations()[-1] != "sigmoid" or net.out_dim != 1:
            raise ValueError("discriminator must end in a single sigmoid line")
        self.net = net
        self.class_count = class_count

    def outputs(self, features: Tensor, labels) -> Tensor:
        cond = Tensor(onehot(labels, self.class_count))
        return forward(self.net, dc.concat_cols([features, cond]))

    def parameters(self) -> list[Parameter]:
        return self.net.parameters()


class ConvexGenerator:
    """Latent-to-sample generator constrained to per-class convex hulls.

    A conditional mapping network turns (z, one-hot class) into an
    intermediate vector; one instance-weighting unit per minority class turns
    that vector into softmax weights over the class's n_i frozen data rows.
    """

    kind = "convex"

    def __init__(self, ctmu: Mlp, igus: list[Mlp], class_data: list[np.ndarray],
                 latent_dim: int, class_count: int):
        if len(igus) != class_count - 1:
            raise ValueError("need one instance-weighting unit per minority class")
        for i, igu in enumerate(igus):
            if igu.activations()[-1] != "softmax":
                raise ValueError(f"IGU {i} must end in softmax")
        self.ctmu = ctmu
        self.igus = igus
        self.latent_dim = latent_dim
        self.class_count = class_count
        self.class_data: list[np.ndarray] = []
        self.set_class_data(class_data)

    def set_class_data(self, mats: list[np.ndarray]) -> None:
        """Install the frozen per-class matrices the convex weights act on."""
        if len(mats) != self.class_count - 1:
            raise ValueError("need one data matrix per minority class")
        for i, (igu, mat) in enumerate(zip(self.igus, mats)):
            if mat.shape[0] != igu.out_dim:
                raise ValueError(
                    f"class {i} matrix has {mat.shape[0]} rows, IGU emits {igu.out_dim} weights")
        self.class_data = [np.asarray(m, dtype=np.float64) for m in mats]

    def _check_class(self, class_id: int) -> None:
        if not 0 <= class_id < self.class_count - 1:
            raise ValueError(
                f"class {class_id} is not a minority class (majority {self.class_count - 1} "
                "has no instance-weighting unit)")

    def weights(self, z: np.ndarray, class_id: int) -> Tensor:
        """Simplex weights for one latent vector and one minority class."""
        self._check_class(class_id)
        z = np.asarray(z, dtype=np.float64).reshape(1, -1)
        if z.shape[1] != self.latent_dim:
            raise ValueError(f"latent dim {z.shape[1]} != {self.latent_dim}")
        inp = Tensor(np.concatenate([z, onehot(class_id, self.class_count)], axis=1))
        return forward(self.igus[class_id], forward(self.ctmu, inp))

    def generate(self, z: np.ndarray, class_id: int) -> Tensor:
        """One synthetic sample: weightsᵀ · X_i, inside the class hull."""
        w = self.weights(z, class_id)
        return dc.matmul(w, Tensor(self.class_data[class_id]))

    def generate_with_weights(self, z: np.ndarray, class_id: int) -> tuple[Tensor, np.ndarray]:
        w = self.weights(z, class_id)
        return dc.matmul(w, Tensor(self.class_data[class_id])), w.data[0].copy()

    def generate_batch(self, z: np.ndarray, labels) -> Tensor:
        """Batched generation with per-row minority labels; rows are grouped
        per class for the IGUs and restored to input order afterwards."""
        z = np.asarray(z, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"latent batch must be (b, {self.latent_dim})")
        if z.shape[0] != labels.size:
            raise ValueError("one label per latent row")
        for i in np.unique(labels):
            self._check_class(int(i))
        inp = Tensor(np.concatenate([z, onehot(labels, self.class_count)], axis=1))
        inter = forward(self.ctmu, inp)
        parts = []
        row_order = []
        for i in np.unique(labels):
            rows = np.flatnonzero(labels == i)
            w = forward(self.igus[int(i)], dc.take_rows(inter, rows))
            parts.append(dc.matmul(w, Tensor(self.class_data[int(i)])))
            row_order.append(rows)
        grouped = dc.concat_rows(parts)
        perm = np.concatenate(row_order)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(perm.size)
        return dc.take_rows(grouped, inverse)

    def parameters(self) -> list[Parameter]:
        params = list(self.ctmu.parameters())
        for igu in self.igus:
            params.extend(igu.parameters())
        return params


class UnconstrainedGenerator:
    """Plain conditional dense generator (the cGAN / cG baselines)."""

    kind = "unconstrained"

    def __init__(self, net: Mlp, latent_dim: int, class_count: int):
        self.net = net
        self.latent_dim = latent_dim
        self.class_count = class_count

    def generate_batch(self, z: np.ndarray, labels) -> Tensor:
        z = np.asarray(z, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ValueError(f"latent batch must be (b, {self.latent_dim})")
        inp = Tensor(np.concatenate([z, onehot(labels, self.class_count)], axis=1))
        return forward(self.net, inp)

    def parameters(self) -> list[Parameter]:
        return self.net.parameters()


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_classifier(in_dim: int, class_count: int, hidden: list[int], seed: int) -> Classifier:
    dims = [in_dim, *hidden, class_count]
    acts = ["relu"] * len(hidden) + ["sigmoid"]
    return Classifier(init_mlp(dims, acts, seed, name="m"))


def build_discriminator(in_dim: int, class_count: int, hidden: list[int],
                        seed: int) -> Discriminator:
    dims = [in_dim + class_count, *hidden, 1]
    acts = ["relu"] * len(hidden) + ["sigmoid"]
    return Discriminator(init_mlp(dims, acts, seed, name="d"), class_count)


def build_feature_extractor(in_dim: int, feature_dim: int | None, hidden: list[int],
                            seed: int) -> FeatureExtractor:
    if feature_dim is None:
        return FeatureExtractor(None)
    dims = [in_dim, *hidden, feature_dim]
    acts = ["relu"] * len(hidden) + ["identity"]
    return FeatureExtractor(init_mlp(dims, acts, seed, name="f"))


def build_convex_generator(class_data: list[np.ndarray], latent_dim: int,
                           class_count: int, intermediate_dim: int,
                           hidden: list[int], seed: int) -> ConvexGenerator:
    ctmu_dims = [latent_dim + class_count, *hidden, intermediate_dim]
    ctmu_acts = ["relu"] * len(hidden) + ["identity"]
    ctmu = init_mlp(ctmu_dims, ctmu_acts, seed, name="ctmu")
    igus = []
    for i, mat in enumerate(class_data):
        igus.append(init_mlp([intermediate_dim, mat.shape[0]], ["softmax"],
                             seed + 1 + i, name=f"igu{i}"))
    return ConvexGenerator(ctmu, igus, class_data, latent_dim, class_count)


def parameter_count(params: list[Parameter]) -> int:
    return sum(p.data.size for p in params)


def build_unconstrained_generator(latent_dim: int, class_count: int, out_dim: int,
                                  seed: int, target_params: int | None = None
                                  ) -> UnconstrainedGenerator:
    """Single-hidden-layer conditional generator; when target_params is given
    the hidden width is solved so the parameter count matches within 10%."""
    in_dim = latent_dim + class_count
    if target_params is None:
        hidden = 128
    else:
        # params(h) = h*(in_dim + 1 + out_dim) + out_dim
        hidden = max(8, round((target_params - out_dim) / (in_dim + 1 + out_dim)))
    dims = [in_dim, hidden, out_dim]
    net = init_mlp(dims, ["relu", "identity"], seed, name="g")
    return UnconstrainedGenerator(net, latent_dim, class_count)


# ---------------------------------------------------------------------------
# The model bundle
# ---------------------------------------------------------------------------

@dataclass
class GamoModel:
    """Parameter bundle for one training run: F, M, optional D, optional G."""

    feature_extractor: FeatureExtractor
    classifier: Classifier
    discriminator: Discriminator | None
    generator: ConvexGenerator | UnconstrainedGenerator | None
    loss_variant: str
    latent_dim: int

    @property
    def class_count(self) -> int:
        return self.classifier.class_count

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        named: list[tuple[str, Parameter]] = []
        for p in self.feature_extractor.parameters():
            named.append((p.name, p))
        for p in self.classifier.parameters():
            named.append((p.name, p))
        if self.discriminator is not None:
            for p in self.discriminator.parameters():
                named.append((p.name, p))
        if self.generator is not None:
            for p in self.generator.parameters():
                named.append((p.name, p))
        return named

    def refresh_generator_data(self, train: Dataset) -> None:
        """Re-snapshot the frozen per-class matrices in feature space (only
        meaningful for the convex generator; identity F makes it a no-op
        beyond the initial snapshot)."""
        if isinstance(self.generator, ConvexGenerator):
            mats = [self.feature_extractor.transform(train.class_features(i))
                    for i in range(train.class_count - 1)]
            self.generator.set_class_data(mats)

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(name, p.data.copy()) for name, p in self.named_parameters()]

    def load_state_arrays(self, state: list[tuple[str, np.ndarray]]) -> None:
        by_name = dict(state)
        for name, p in self.named_parameters():
            arr = by_name.get(name)
            if arr is None:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    def manifest(self) -> dict:
        info: dict = {
            "class_count": self.class_count,
            "latent_dim": self.latent_dim,
            "loss_variant": self.loss_variant,
            "classifier_dims": self.classifier.net.dims(),
            "feature_extractor_dims":
                None if self.feature_extractor.is_identity
                else self.feature_extractor.net.dims(),
            "discriminator_dims":
                None if self.discriminator is None else self.discriminator.net.dims(),
            "generator": None,
        }
        if isinstance(self.generator, ConvexGenerator):
            info["generator"] = {
                "kind": "convex",
                "ctmu_dims": self.generator.ctmu.dims(),
                "class_sizes": [m.shape[0] for m in self.generator.class_data],
            }
        elif isinstance(self.generator, UnconstrainedGenerator):
            info["generator"] = {"kind": "unconstrained",
                                 "dims": self.generator.net.dims()}
        return info


def save_model(path, model: GamoModel, extra_manifest: dict | None = None) -> None:
    manifest = model.manifest()
    if extra_manifest:
        manifest.update(extra_manifest)
    dc.save_checkpoint(path, model.state_arrays(), manifest)


def load_model_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    return dc.load_checkpoint(path)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------
# The priors P_i and the oversampling weights (P_c - P_i) are realized by the
# trainer's sampling frequencies, so every per-sample loss here is unweighted.

def classifier_loss(variant: str, outputs: Tensor, labels, role: str = "real") -> Tensor:
    """Per sample of class y: push line y to 1 and every other line to 0.

    ce: -[log M_y + sum_{i != y} log(1 - M_i)];  ls: (1-M_y)^2 + sum M_i^2.
    """
    variant = check_variant(variant)
    if role not in ("real", "generated"):
        raise ValueError(f"unknown role {role!r}")
    b, c = outputs.shape
    labels = np.asarray(labels, dtype=np.int64)
    if role == "generated" and labels.size and labels.max() >= c - 1:
        raise ValueError("generated samples must carry minority labels")
    target = Tensor(onehot(labels, c))
    if variant == "ce":
        pos = dc.mul(target, dc.log(outputs))
        neg = dc.mul(dc.sub(1.0, target), dc.log(dc.sub(1.0, outputs)))
        total = dc.tsum(dc.add(pos, neg))
        return dc.mul(total, -1.0 / b)
    sq = dc.square(dc.sub(outputs, target))
    return dc.mul(dc.tsum(sq), 1.0 / b)


def _complement_masks(labels: np.ndarray, class_count: int) -> tuple[np.ndarray, np.ndarray]:
    """Line-wise generator targets: its own line down, every *other minority*
    line up; the majority line carries no term."""
    own = onehot(labels, class_count)
    others = 1.0 - own
    others[:, class_count - 1] = 0.0
    return own, others


def generator_classifier_loss(variant: str, outputs: Tensor, labels) -> Tensor:
    """The generator's misclassification objective against M (ones'
    complement of the label over the minority lines)."""
    variant = check_variant(variant)
    b, c = outputs.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and labels.max() >= c - 1:
        raise ValueError("generator labels must be minority classes")
    own, others = _complement_masks(labels, c)
    own_t, others_t = Tensor(own), Tensor(others)
    if variant == "ce":
        down = dc.mul(own_t, dc.log(dc.sub(1.0, outputs)))
        up = dc.mul(others_t, dc.log(outputs))
        return dc.mul(dc.tsum(dc.add(down, up)), -1.0 / b)
    down = dc.mul(own_t, dc.square(outputs))
    up = dc.mul(others_t, dc.square(dc.sub(1.0, outputs)))
    return dc.mul(dc.tsum(dc.add(down, up)), 1.0 / b)


def generator_discriminator_loss(variant: str, d_outputs: Tensor) -> Tensor:
    """The generator's realism objective: make D answer 'real'."""
    variant = check_variant(variant)
    b = d_outputs.shape[0]
    if variant == "ce":
        return dc.mul(dc.tsum(dc.log(d_outputs)), -1.0 / b)
    return dc.mul(dc.tsum(dc.square(dc.sub(1.0, d_outputs))), 1.0 / b)


def generator_loss(variant: str, m_outputs: Tensor, d_outputs: Tensor | None,
                   labels) -> Tensor:
    """Combined generator objective; d_outputs is None when no discriminator
    is in the game."""
    loss = generator_classifier_loss(variant, m_outputs, labels)
    if d_outputs is not None:
        loss = dc.add(loss, generator_discriminator_loss(variant, d_outputs))
    return loss


def discriminator_loss(variant: str, d_outputs: Tensor, real: bool) -> Tensor:
    """ce: -log D on real, -log(1-D) on generated; ls: (1-D)^2 / D^2."""
    variant = check_variant(variant)
    b = d_outputs.shape[0]
    if variant == "ce":
        inner = dc.log(d_outputs) if real else dc.log(dc.sub(1.0, d_outputs))
        return dc.mul(dc.tsum(inner), -1.0 / b)
    inner = dc.square(dc.sub(1.0, d_outputs)) if real else dc.square(d_outputs)
    return dc.mul(dc.tsum(inner), 1.0 / b)
