"""Two-view fraud detector: MLP encoders, attention fusion, classifier,
decoders, and the three loss terms (cross-entropy, reconstruction,
cross-view exclusion)."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import DimensionError, GraphLoadError
from .graphdata import BatchSubgraph
from .rng import generator

MODEL_MAGIC = b"DIGNN\x00"
MODEL_VERSION = 1


@dataclass
class DignnConfig:
    embed_dim: int = 32          # d
    hidden_dim: int = 64         # width of the 2-layer encoders/decoders
    alpha: float = 0.05          # reconstruction weight
    beta: float = 0.8            # exclusion weight
    sigma_enc: float = 1.0       # fixed sampling std of the encoder posteriors
    prior_mean: float = 0.0      # shared prior mean (per coordinate)
    prior_std: float = 1.0
    mc_samples: int = 1
    shared_attention: bool = True     # one (q, W, b) for both views
    drop_conditional_terms: bool = False  # drop zero-gradient terms of exc loss

    def validate(self):
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise ValueError("embed_dim and hidden_dim must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.sigma_enc <= 0 or self.prior_std <= 0:
            raise ValueError("stds must be positive")


@dataclass
class ForwardOut:
    z_A: Var
    z_X: Var
    z_A_s: Var
    z_X_s: Var
    alpha_A: Var        # (b, 1)
    alpha_X: Var        # (b, 1)
    z: Var              # fused (b, d)
    logits: Var         # (b, 2)
    x_A_hat: Var | None = None
    x_X_hat: Var | None = None


class DignnParams:
    """All trainable tensors, in a fixed serialization order."""

    def __init__(self, tensors: "OrderedDict[str, Var]", n_nodes: int,
                 feat_dim: int, cfg: DignnConfig):
        self.tensors = tensors
        self.n_nodes = n_nodes
        self.feat_dim = feat_dim
        self.cfg = cfg

    @staticmethod
    def shape_spec(n_nodes: int, feat_dim: int, cfg: DignnConfig):
        d, h = cfg.embed_dim, cfg.hidden_dim
        spec = [
            ("enc_a_w1", (n_nodes, h)), ("enc_a_b1", (1, h)),
            ("enc_a_w2", (h, d)), ("enc_a_b2", (1, d)),
            ("enc_x_w1", (feat_dim, h)), ("enc_x_b1", (1, h)),
            ("enc_x_w2", (h, d)), ("enc_x_b2", (1, d)),
            ("att_w", (d, d)), ("att_b", (1, d)), ("att_q", (d, 1)),
        ]
        if not cfg.shared_attention:
            spec += [("att_w_x", (d, d)), ("att_b_x", (1, d)), ("att_q_x", (d, 1))]
        spec += [
            ("clf_w", (d, 2)), ("clf_b", (1, 2)),
            ("dec_a_w1", (d, h)), ("dec_a_b1", (1, h)),
            ("dec_a_w2", (h, n_nodes)), ("dec_a_b2", (1, n_nodes)),
            ("dec_x_w1", (d, h)), ("dec_x_b1", (1, h)),
            ("dec_x_w2", (h, feat_dim)), ("dec_x_b2", (1, feat_dim)),
        ]
        return spec

    @classmethod
    def init(cls, n_nodes: int, feat_dim: int, cfg: DignnConfig, seed) -> "DignnParams":
        """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
        cfg.validate()
        rng = generator(seed)
        tensors = OrderedDict()
        for name, shape in cls.shape_spec(n_nodes, feat_dim, cfg):
            if cls.is_bias(name):
                value = np.zeros(shape)
            else:
                limit = math.sqrt(6.0 / (shape[0] + shape[1]))
                value = rng.uniform(-limit, limit, size=shape)
            tensors[name] = Var(value)
        return cls(tensors, n_nodes, feat_dim, cfg)

    @staticmethod
    def is_bias(name: str) -> bool:
        return name.split("_")[-1].startswith("b")

    def no_decay_names(self):
        return {n for n in self.tensors if self.is_bias(n)}

    def __getitem__(self, name: str) -> Var:
        return self.tensors[name]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: v.value.copy() for n, v in self.tensors.items()}

    def restore(self, snap: dict[str, np.ndarray]):
        for n, v in self.tensors.items():
            v.value[...] = snap[n]

    def save(self, path: str):
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(struct.pack(
                "<6I", MODEL_VERSION, self.n_nodes, self.feat_dim,
                self.cfg.embed_dim, self.cfg.hidden_dim, len(self.tensors),
            ))
            fh.write(struct.pack("<B", int(self.cfg.shared_attention)))
            for name, var in self.tensors.items():
                raw = name.encode()
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<II", *var.value.shape))
                fh.write(var.value.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str) -> "DignnParams":
        with open(path, "rb") as fh:
            if fh.read(len(MODEL_MAGIC)) != MODEL_MAGIC:
                raise GraphLoadError(f"not a model file: {path}")
            version, n, d_in, d, h, n_tensors = struct.unpack("<6I", fh.read(24))
            if version != MODEL_VERSION:
                raise GraphLoadError(f"unsupported model version {version}")
            shared = bool(struct.unpack("<B", fh.read(1))[0])
            cfg = DignnConfig(embed_dim=d, hidden_dim=h, shared_attention=shared)
            tensors = OrderedDict()
            for _ in range(n_tensors):
                (nlen,) = struct.unpack("<I", fh.read(4))
                name = fh.read(nlen).decode()
                rows, cols = struct.unpack("<II", fh.read(8))
                buf = fh.read(rows * cols * 8)
                if len(buf) != rows * cols * 8:
                    raise GraphLoadError(f"truncated tensor {name} in {path}")
                tensors[name] = Var(
                    np.frombuffer(buf, dtype="<f8").reshape(rows, cols).copy()
                )
        expected = [s for s, _ in cls.shape_spec(n, d_in, cfg)]
        if list(tensors) != expected:
            raise GraphLoadError(f"unexpected tensor layout in {path}")
        return cls(tensors, n, d_in, cfg)


def _mlp2(x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var:
    hidden = ad.relu(ad.add(ad.matmul(x, w1), b1))
    return ad.add(ad.matmul(hidden, w2), b2)


def encode_views(params: DignnParams, batch: BatchSubgraph) -> tuple[Var, Var]:
    """Topology rows and attribute rows through their 2-layer MLP encoders."""
    if batch.topo_rows.shape[1] != params.n_nodes:
        raise DimensionError(
            f"topology width {batch.topo_rows.shape[1]} vs model {params.n_nodes}"
        )
    if batch.features.shape[1] != params.feat_dim:
        raise DimensionError(
            f"feature width {batch.features.shape[1]} vs model {params.feat_dim}"
        )
    h_a = ad.relu(ad.add(
        ad.sparse_dense_matmul(batch.topo_rows, params["enc_a_w1"]),
        params["enc_a_b1"],
    ))
    z_a = ad.add(ad.matmul(h_a, params["enc_a_w2"]), params["enc_a_b2"])
    z_x = _mlp2(ad.constant(batch.features), params["enc_x_w1"],
                params["enc_x_b1"], params["enc_x_w2"], params["enc_x_b2"])
    return z_a, z_x


def reparameterize(mu: Var, sigma: float, eps: np.ndarray) -> Var:
    """mu + sigma * eps with eps fixed data; gradient flows through mu only."""
    return ad.add_const(mu, sigma * eps)


def _attention_score(z: Var, w: Var, b: Var, q: Var) -> Var:
    return ad.matmul(ad.tanh(ad.add(ad.matmul(z, w), b)), q)


def attention_fuse(params: DignnParams, z_a: Var, z_x: Var):
    """Per-node scalar scores, two-way softmax, convex combination."""
    s_a = _attention_score(z_a, params["att_w"], params["att_b"], params["att_q"])
    if params.cfg.shared_attention:
        s_x = _attention_score(z_x, params["att_w"], params["att_b"], params["att_q"])
    else:
        s_x = _attention_score(
            z_x, params["att_w_x"], params["att_b_x"], params["att_q_x"]
        )
    alphas = ad.row_softmax(ad.concat_cols(s_a, s_x))
    alpha_a = ad.take_cols(alphas, 0, 1)
    alpha_x = ad.take_cols(alphas, 1, 2)
    fused = ad.add(ad.mul(alpha_a, z_a), ad.mul(alpha_x, z_x))
    return alpha_a, alpha_x, fused


def classify(params: DignnParams, z: Var) -> Var:
    return ad.add(ad.matmul(z, params["clf_w"]), params["clf_b"])


def forward(params: DignnParams, batch: BatchSubgraph, cfg: DignnConfig,
            eps_a: np.ndarray | None = None, eps_x: np.ndarray | None = None,
            with_reconstruction: bool = False) -> ForwardOut:
    """Full forward pass. Pass eps arrays to use sampled embeddings
    (training); omit them for the deterministic mean path (evaluation)."""
    mu_a, mu_x = encode_views(params, batch)
    z_a_s = reparameterize(mu_a, cfg.sigma_enc, eps_a) if eps_a is not None else mu_a
    z_x_s = reparameterize(mu_x, cfg.sigma_enc, eps_x) if eps_x is not None else mu_x
    alpha_a, alpha_x, fused = attention_fuse(params, z_a_s, z_x_s)
    logits = classify(params, fused)
    out = ForwardOut(
        z_A=mu_a, z_X=mu_x, z_A_s=z_a_s, z_X_s=z_x_s,
        alpha_A=alpha_a, alpha_X=alpha_x, z=fused, logits=logits,
    )
    if with_reconstruction:
        out.x_A_hat = _mlp2(z_a_s, params["dec_a_w1"], params["dec_a_b1"],
                            params["dec_a_w2"], params["dec_a_b2"])
        out.x_X_hat = _mlp2(z_x_s, params["dec_x_w1"], params["dec_x_b1"],
                            params["dec_x_w2"], params["dec_x_b2"])
    return out


def rec_loss(batch: BatchSubgraph, x_a_hat: Var, x_x_hat: Var) -> Var:
    """Decoder mean-squared errors against the two original views."""
    target_a = np.asarray(batch.topo_rows.todense(), dtype=np.float64)
    return ad.add(ad.mse(x_a_hat, target_a), ad.mse(x_x_hat, batch.features))


def _mean_log_normal(z: Var, mu: Var | float, var: float, dim: int, n: int) -> Var:
    """Mean over nodes of log N(z_i; mu_i, var*I)."""
    diff = ad.sub(z, mu) if isinstance(mu, Var) else ad.add_const(z, -mu)
    ssq = ad.sum_all(ad.square(diff))
    out = ad.scale(ssq, -1.0 / (2.0 * var * n))
    return ad.add_const(out, -0.5 * dim * math.log(2.0 * math.pi * var))


def exc_loss(mu_a: Var, mu_x: Var, z_a_s: Var, z_x_s: Var, cfg: DignnConfig) -> Var:
    """Cross-view exclusion bound: mean conditional log-densities of the
    samples minus their log-densities under the shared prior, symmetrized."""
    n, d = mu_a.value.shape
    s2 = cfg.sigma_enc ** 2
    p2 = cfg.prior_std ** 2
    prior_a = _mean_log_normal(z_a_s, cfg.prior_mean, p2, d, n)
    prior_x = _mean_log_normal(z_x_s, cfg.prior_mean, p2, d, n)
    total = ad.scale(ad.add(prior_a, prior_x), -1.0)
    if not cfg.drop_conditional_terms:
        # zero expected gradient with fixed sigma; kept for the exact value
        cond_a = _mean_log_normal(z_a_s, mu_a, s2, d, n)
        cond_x = _mean_log_normal(z_x_s, mu_x, s2, d, n)
        total = ad.add(total, ad.add(cond_a, cond_x))
    return ad.scale(total, 0.5)


def total_loss(ce: Var, rec: Var, exc: Var, cfg: DignnConfig) -> Var:
    return ad.add(ce, ad.add(ad.scale(rec, cfg.alpha), ad.scale(exc, cfg.beta)))


def predict(params: DignnParams, batch: BatchSubgraph, cfg: DignnConfig):
    """Deterministic scores and classes; exact ties go to class 0."""
    out = forward(params, batch, cfg)
    z = out.logits.value
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    probs = e / e.sum(axis=1, keepdims=True)
    scores = probs[:, 1]
    preds = (probs[:, 1] > probs[:, 0]).astype(np.int64)
    return preds, scores
