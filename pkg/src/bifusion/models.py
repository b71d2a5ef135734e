"""The three architectures: multi-glimpse bilinear fusion ("omniban"), the
transformer co-attention baseline, and the additive concat-linear control.

All models share the same input contract (a raw image feature matrix, a
padded question token matrix and its validity mask) and the same staging:
``encode`` projects raw image features, ``fuse_features`` produces the pooled
joint representation, ``classify`` maps it to answer logits.  The staging
exists so the cost model can meter the fusion stage separately.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .attention import MultiHeadAttention, self_attend, self_attention, xavier
from .bilinear import BilinearFusion, GlimpseBundle
from .config import FusionConfig
from .rng import generator
from .tensor import Tensor, concat, dropout, linear, mul, parameter, relu, tsum


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def masked_mean(x: Tensor, mask: Optional[np.ndarray]) -> Tensor:
    """Mean over valid positions of (B, N, d) -> (B, d)."""
    if mask is None:
        return x.mean(axis=1)
    m = np.asarray(mask, dtype=np.float64)
    weights = m[:, :, None] / m.sum(axis=1)[:, None, None]
    return tsum(mul(x, Tensor(weights)), axis=1)


class Classifier:
    """Two fully connected layers with a ReLU between them."""

    def __init__(self, d_in: int, hidden: int, n_out: int,
                 rng: np.random.Generator, prefix: str = "classifier"):
        self.prefix = prefix
        self.w1 = parameter(xavier(rng, d_in, hidden))
        self.b1 = parameter(np.zeros(hidden))
        self.w2 = parameter(xavier(rng, hidden, n_out))
        self.b2 = parameter(np.zeros(n_out))

    def params(self) -> dict:
        return {f"{self.prefix}.{n}": getattr(self, n)
                for n in ("w1", "b1", "w2", "b2")}

    def __call__(self, x: Tensor, rate: float = 0.0,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        h = relu(linear(x, self.w1, self.b1))
        if rate > 0.0 and rng is not None:
            h = dropout(h, rate, rng)
        return linear(h, self.w2, self.b2)


class BilinearFusionModel:
    """Image projection, per-modality self-attention, multi-glimpse bilinear
    fusion, then the shared classifier head."""

    arch = "omniban"

    def __init__(self, config: FusionConfig, seed: int = 0):
        self.config = config.validate()
        c = config
        self.w_proj = parameter(xavier(generator(seed, "proj"), c.d_hid, c.d_v))
        self.b_proj = parameter(np.zeros(c.d_v))
        self.intra_v = self_attention(c.d_v, c.heads, generator(seed, "intra_v"), "intra_v")
        self.intra_q = self_attention(c.d_q, c.heads, generator(seed, "intra_q"), "intra_q")
        self.fusion = BilinearFusion(c.d_v, c.d_q, c.d_m, c.d_joint, c.glimpses,
                                     generator(seed, "fusion"))
        hidden = c.classifier_hidden or 2 * c.d_joint
        self.classifier = Classifier(c.d_joint, hidden, c.answers,
                                     generator(seed, "classifier"))

    def params(self) -> dict:
        out = {"proj.w": self.w_proj, "proj.b": self.b_proj}
        out.update(self.intra_v.params())
        out.update(self.intra_q.params())
        out.update(self.fusion.params())
        out.update(self.classifier.params())
        return out

    def encode(self, image) -> Tensor:
        return linear(_as_tensor(image), self.w_proj, self.b_proj)

    def fuse_features(self, v: Tensor, question, q_mask,
                      v_mask=None) -> GlimpseBundle:
        q = _as_tensor(question)
        if self.config.use_intra_attention:
            v = self_attend(v, v_mask, self.intra_v)
            q = self_attend(q, q_mask, self.intra_q)
        return self.fusion.fuse(v, q, q_mask, v_mask)

    def classify(self, joint: Tensor, rng=None) -> Tensor:
        return self.classifier(joint, self.config.dropout, rng)

    def forward(self, image, question, q_mask, v_mask=None, rng=None):
        """Returns (logits (B, answers), GlimpseBundle)."""
        bundle = self.fuse_features(self.encode(image), question, q_mask, v_mask)
        return self.classify(bundle.joint, rng), bundle


class CoAttentionLayer:
    """Bidirectional cross-attention plus a per-modality feed-forward block."""

    def __init__(self, d_v: int, d_q: int, heads: int, expansion: int,
                 rng: np.random.Generator, prefix: str):
        self.prefix = prefix
        # attention width follows the question side in both directions
        self.cross_vq = MultiHeadAttention(d_v, d_q, d_q, d_v, heads, rng,
                                           f"{prefix}.cross_vq")
        self.cross_qv = MultiHeadAttention(d_q, d_v, d_q, d_q, heads, rng,
                                           f"{prefix}.cross_qv")
        self.ffn_v = (parameter(xavier(rng, d_v, expansion * d_v)),
                      parameter(np.zeros(expansion * d_v)),
                      parameter(xavier(rng, expansion * d_v, d_v)),
                      parameter(np.zeros(d_v)))
        self.ffn_q = (parameter(xavier(rng, d_q, expansion * d_q)),
                      parameter(np.zeros(expansion * d_q)),
                      parameter(xavier(rng, expansion * d_q, d_q)),
                      parameter(np.zeros(d_q)))

    def params(self) -> dict:
        out = {}
        out.update(self.cross_vq.params())
        out.update(self.cross_qv.params())
        for tag, ffn in (("ffn_v", self.ffn_v), ("ffn_q", self.ffn_q)):
            for name, t in zip(("w1", "b1", "w2", "b2"), ffn):
                out[f"{self.prefix}.{tag}.{name}"] = t
        return out

    @staticmethod
    def _ffn(x: Tensor, weights, mask) -> Tensor:
        w1, b1, w2, b2 = weights
        out = linear(relu(linear(x, w1, b1)), w2, b2)
        if mask is not None:
            out = mul(out, Tensor(np.asarray(mask, dtype=np.float64)[:, :, None]))
        return out

    def __call__(self, v: Tensor, q: Tensor, q_mask, v_mask):
        v2 = self.cross_vq(v, q, key_mask=q_mask, query_mask=v_mask)
        q2 = self.cross_qv(q, v, key_mask=v_mask, query_mask=q_mask)
        return (self._ffn(v2, self.ffn_v, v_mask),
                self._ffn(q2, self.ffn_q, q_mask))


class CoAttentionModel:
    """Intra-modal attention followed by a stack of co-attention layers,
    masked mean pooling over both modalities, and the classifier head."""

    arch = "coattention"

    def __init__(self, config: FusionConfig, seed: int = 0):
        self.config = config.validate()
        c = config
        self.w_proj = parameter(xavier(generator(seed, "proj"), c.d_hid, c.d_v))
        self.b_proj = parameter(np.zeros(c.d_v))
        self.intra_v = self_attention(c.d_v, c.heads, generator(seed, "intra_v"), "intra_v")
        self.intra_q = self_attention(c.d_q, c.heads, generator(seed, "intra_q"), "intra_q")
        self.layers = [
            CoAttentionLayer(c.d_v, c.d_q, c.heads, c.ffn_expansion,
                             generator(seed, "layer", i), f"layer{i}")
            for i in range(c.coattention_layers)
        ]
        pooled = c.d_v + c.d_q
        hidden = c.classifier_hidden or 2 * pooled
        self.classifier = Classifier(pooled, hidden, c.answers,
                                     generator(seed, "classifier"))

    def params(self) -> dict:
        out = {"proj.w": self.w_proj, "proj.b": self.b_proj}
        out.update(self.intra_v.params())
        out.update(self.intra_q.params())
        for layer in self.layers:
            out.update(layer.params())
        out.update(self.classifier.params())
        return out

    def encode(self, image) -> Tensor:
        return linear(_as_tensor(image), self.w_proj, self.b_proj)

    def fuse_features(self, v: Tensor, question, q_mask, v_mask=None) -> Tensor:
        q = _as_tensor(question)
        if self.config.use_intra_attention:
            v = self_attend(v, v_mask, self.intra_v)
            q = self_attend(q, q_mask, self.intra_q)
        for layer in self.layers:
            v, q = layer(v, q, q_mask, v_mask)
        return concat([masked_mean(v, v_mask), masked_mean(q, q_mask)], axis=-1)

    def classify(self, pooled: Tensor, rng=None) -> Tensor:
        return self.classifier(pooled, self.config.dropout, rng)

    def forward(self, image, question, q_mask, v_mask=None, rng=None):
        pooled = self.fuse_features(self.encode(image), question, q_mask, v_mask)
        return self.classify(pooled, rng), None


class ConcatLinearModel:
    """Additive control: pooled features concatenated into a single affine
    map.  No cross-modal interaction terms exist, so pair-dependent answer
    rules are out of reach by construction."""

    arch = "concat"

    def __init__(self, config: FusionConfig, seed: int = 0):
        self.config = config.validate()
        c = config
        rng = generator(seed, "concat")
        self.w = parameter(xavier(rng, c.d_hid + c.d_q, c.answers))
        self.b = parameter(np.zeros(c.answers))

    def params(self) -> dict:
        return {"concat.w": self.w, "concat.b": self.b}

    def encode(self, image) -> Tensor:
        return _as_tensor(image)

    def fuse_features(self, v: Tensor, question, q_mask, v_mask=None) -> Tensor:
        q = _as_tensor(question)
        return concat([masked_mean(v, v_mask), masked_mean(q, q_mask)], axis=-1)

    def classify(self, pooled: Tensor, rng=None) -> Tensor:
        return linear(pooled, self.w, self.b)

    def forward(self, image, question, q_mask, v_mask=None, rng=None):
        pooled = self.fuse_features(self.encode(image), question, q_mask, v_mask)
        return self.classify(pooled), None


def build_model(config: FusionConfig, seed: int = 0):
    cls = {
        "omniban": BilinearFusionModel,
        "coattention": CoAttentionModel,
        "concat": ConcatLinearModel,
    }[config.validate().arch]
    return cls(config, seed)
