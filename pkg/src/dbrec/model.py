"""All scoring and loss math: interaction networks, group discovery, hierarchies.

Scores and losses are built as autodiff graphs over named parameters, so one
code path serves forward evaluation, training, and gradient checking. Hard
group labels are recomputed from current parameter values at call time and
enter the graphs as constants (no gradient flows through the argmax).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Parameter
from .errors import ConfigError

USER, ITEM = "user", "item"


@dataclass(frozen=True)
class VariantMask:
    """Which bridging sides are active.

    User groups drive the group-item branch and the user-side group and
    hierarchy losses; item groups drive the user-group branch and the
    item-side losses.
    """

    user_groups: bool
    item_groups: bool


VARIANTS = {
    "dbrec": VariantMask(user_groups=True, item_groups=True),
    "dbrec-o": VariantMask(user_groups=False, item_groups=False),
    "dbrec-u": VariantMask(user_groups=True, item_groups=False),
    "dbrec-i": VariantMask(user_groups=False, item_groups=True),
}


@dataclass
class HyperParams:
    d: int = 128
    d_g: int = 64
    k: int = 5
    alpha: float = 0.01
    lr: float = 1e-4
    batch_size: int = 256
    neg_cf: int = 5
    neg_group: int = 5
    hidden_uv: tuple[int, ...] = (64, 16)
    hidden_ug: tuple[int, ...] = (64, 16)
    hidden_vg: tuple[int, ...] = (64, 16)
    hidden_hier: tuple[int, ...] = (64, 128)
    seed: int = 0

    def validate(self) -> None:
        positive = {
            "d": self.d,
            "d_g": self.d_g,
            "k": self.k,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "neg_cf": self.neg_cf,
            "neg_group": self.neg_group,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ConfigError(f"hyperparameter {name} must be positive, got {value}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be nonnegative, got {self.alpha}")
        if self.d_g > self.d:
            raise ConfigError(f"d_g={self.d_g} must not exceed d={self.d}")
        for name in ("hidden_uv", "hidden_ug", "hidden_vg", "hidden_hier"):
            sizes = getattr(self, name)
            if not sizes or any(s <= 0 for s in sizes):
                raise ConfigError(f"{name} must be a nonempty tuple of positive sizes")


@dataclass
class TrainBatch:
    """Positive pairs, their CF negatives, and shared group-learning negatives."""

    pos_users: np.ndarray
    pos_items: np.ndarray
    neg_users: np.ndarray
    neg_items: np.ndarray
    group_neg_users: np.ndarray
    group_neg_items: np.ndarray

    def distinct_users(self) -> np.ndarray:
        return np.unique(self.pos_users)

    def distinct_items(self) -> np.ndarray:
        return np.unique(np.concatenate([self.pos_items, self.neg_items]))


@dataclass
class LossTerms:
    """The joint objective and its five components (values, not nodes)."""

    total: float
    cf: float
    hier_user: float
    hier_item: float
    group_user: float
    group_item: float

    def as_row(self) -> list[float]:
        return [self.cf, self.hier_user, self.hier_item, self.group_user, self.group_item]


def _mlp_shapes(input_dim: int, hidden: tuple[int, ...]) -> list[tuple[int, int]]:
    dims = [input_dim, *hidden]
    return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


class ModelParams:
    """Every learnable array of the model, keyed by name.

    Embeddings and weights initialize uniform(-0.05, 0.05) from the given
    seed; offsets start at zero. One training thread owns the parameters
    during forward/backward/step; evaluators may read concurrently but
    nothing locks, so the single-writer contract is the caller's.
    """

    def __init__(self, num_users: int, num_items: int, hp: HyperParams) -> None:
        hp.validate()
        if hp.k >= num_users or hp.k >= num_items:
            raise ConfigError(
                f"k={hp.k} must be smaller than num_users={num_users} and num_items={num_items}"
            )
        self.num_users = num_users
        self.num_items = num_items
        self.hp = hp
        rng = np.random.default_rng(hp.seed)

        def u(shape):
            return rng.uniform(-0.05, 0.05, size=shape)

        d, d_g, k = hp.d, hp.d_g, hp.k
        self.user_emb = Parameter("user_emb", u((num_users, d)))
        self.item_emb = Parameter("item_emb", u((num_items, d)))
        self.user_group_emb = Parameter("user_group_emb", u((k, d_g)))
        self.item_group_emb = Parameter("item_group_emb", u((k, d_g)))
        self.user_offset = Parameter("user_offset", np.zeros((num_users, d)))
        self.item_offset = Parameter("item_offset", np.zeros((num_items, d)))

        self.group_proj_user_w = Parameter("group_proj_user_w", u((k, d)))
        self.group_proj_user_b = Parameter("group_proj_user_b", np.zeros(k))
        self.group_proj_item_w = Parameter("group_proj_item_w", u((k, d)))
        self.group_proj_item_b = Parameter("group_proj_item_b", np.zeros(k))

        self.recon_user_w = Parameter("recon_user_w", u((d, d_g)))
        self.recon_user_b = Parameter("recon_user_b", np.zeros(d))
        self.recon_item_w = Parameter("recon_item_w", u((d, d_g)))
        self.recon_item_b = Parameter("recon_item_b", np.zeros(d))

        self.mlp_uv = self._make_mlp("mlp_uv", 3 * d, hp.hidden_uv, rng)
        self.mlp_ug = self._make_mlp("mlp_ug", d + d_g + 1, hp.hidden_ug, rng)
        self.mlp_vg = self._make_mlp("mlp_vg", d + d_g + 1, hp.hidden_vg, rng)
        # hierarchy nets: stated hidden sizes, then a linear head down to d_g
        # so the output can dot with group embeddings
        self.mlp_hier_u = self._make_mlp("mlp_hier_u", d, hp.hidden_hier, rng)
        self.hier_u_out_w = Parameter("hier_u_out_w", u((d_g, hp.hidden_hier[-1])))
        self.hier_u_out_b = Parameter("hier_u_out_b", np.zeros(d_g))
        self.mlp_hier_v = self._make_mlp("mlp_hier_v", d, hp.hidden_hier, rng)
        self.hier_v_out_w = Parameter("hier_v_out_w", u((d_g, hp.hidden_hier[-1])))
        self.hier_v_out_b = Parameter("hier_v_out_b", np.zeros(d_g))

        self.bilinear_u = Parameter("bilinear_u", u((d, d_g)))
        self.bilinear_v = Parameter("bilinear_v", u((d, d_g)))
        self.fusion_uv = Parameter("fusion_uv", u((hp.hidden_uv[-1], 1)))
        self.fusion_ug = Parameter("fusion_ug", u((hp.hidden_ug[-1], 1)))
        self.fusion_vg = Parameter("fusion_vg", u((hp.hidden_vg[-1], 1)))

    def _make_mlp(self, name, input_dim, hidden, rng) -> list[tuple[Parameter, Parameter]]:
        layers = []
        for i, (out_dim, in_dim) in enumerate(_mlp_shapes(input_dim, hidden)):
            w = Parameter(f"{name}_w{i}", rng.uniform(-0.05, 0.05, size=(out_dim, in_dim)))
            b = Parameter(f"{name}_b{i}", np.zeros(out_dim))
            layers.append((w, b))
        return layers

    def all_parameters(self) -> list[Parameter]:
        out = [
            self.user_emb,
            self.item_emb,
            self.user_group_emb,
            self.item_group_emb,
            self.user_offset,
            self.item_offset,
            self.group_proj_user_w,
            self.group_proj_user_b,
            self.group_proj_item_w,
            self.group_proj_item_b,
            self.recon_user_w,
            self.recon_user_b,
            self.recon_item_w,
            self.recon_item_b,
        ]
        for net in (self.mlp_uv, self.mlp_ug, self.mlp_vg, self.mlp_hier_u, self.mlp_hier_v):
            for w, b in net:
                out.extend([w, b])
        out.extend(
            [
                self.hier_u_out_w,
                self.hier_u_out_b,
                self.hier_v_out_w,
                self.hier_v_out_b,
                self.bilinear_u,
                self.bilinear_v,
                self.fusion_uv,
                self.fusion_ug,
                self.fusion_vg,
            ]
        )
        return out

    def by_name(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.all_parameters()}


class DBRec:
    """Scoring and loss graphs for one parameter set under one variant mask."""

    def __init__(self, params: ModelParams, mask: VariantMask = VARIANTS["dbrec"]) -> None:
        self.params = params
        self.mask = mask

    @property
    def hp(self) -> HyperParams:
        return self.params.hp

    def with_mask(self, mask: VariantMask) -> "DBRec":
        return DBRec(self.params, mask)

    # -- building blocks ---------------------------------------------------

    def _run_mlp(self, x: Node, layers) -> Node:
        h = x
        for w, b in layers:
            h = ad.relu(ad.linear(h, ad.param(w), ad.param(b)))
        return h

    def _side(self, side: str):
        p = self.params
        if side == USER:
            return p.user_emb, p.group_proj_user_w, p.group_proj_user_b, p.user_group_emb
        if side == ITEM:
            return p.item_emb, p.group_proj_item_w, p.group_proj_item_b, p.item_group_emb
        raise ConfigError(f"unknown side '{side}'")

    def group_activation(self, x: Node, side: str) -> Node:
        """Softmax group-membership weights for a (batch, d) embedding block."""
        _, w, b, _ = self._side(side)
        return ad.softmax(ad.linear(x, ad.param(w), ad.param(b)))

    def soft_group_repr(self, beta: Node, side: str) -> Node:
        """Membership-weighted mixture of the group embedding rows."""
        _, _, _, g = self._side(side)
        return ad.matmul(beta, ad.param(g))

    def reconstruct(self, mu: Node, side: str) -> Node:
        p = self.params
        w, b = (p.recon_user_w, p.recon_user_b) if side == USER else (p.recon_item_w, p.recon_item_b)
        return ad.sigmoid(ad.linear(mu, ad.param(w), ad.param(b)))

    def group_margin_loss(self, recon: Node, original: Node, negatives: Node) -> Node:
        """Contrastive hinge on cosine similarities, summed over all pairs.

        recon, original: (batch, d); negatives: (p, d), shared across the batch.
        """
        r = ad.l2_normalize(recon)
        x = ad.l2_normalize(original)
        n = ad.l2_normalize(negatives)
        pos = ad.rowwise_dot(r, x)  # (batch, 1)
        neg = ad.matmul(r, ad.transpose(n))  # (batch, p)
        return ad.sum_all(ad.relu(ad.shift(ad.sub(neg, pos), 1.0)))

    def activation_values(self, indices: np.ndarray, side: str) -> np.ndarray:
        """Group-membership weights as plain values (no graph)."""
        emb, w, b, _ = self._side(side)
        logits = emb.values[indices] @ w.values.T + b.values
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def hard_labels(self, indices: np.ndarray, side: str) -> np.ndarray:
        """Argmax group per entity; ties break to the lowest index; constant
        for differentiation."""
        return hard_assignment(self.activation_values(indices, side))

    def hierarchy_posterior(self, indices: np.ndarray, side: str) -> Node:
        """Group posterior from the offset-shifted embedding, (batch, k)."""
        p = self.params
        if side == USER:
            emb, offset, hidden = p.user_emb, p.user_offset, p.mlp_hier_u
            out_w, out_b, groups = p.hier_u_out_w, p.hier_u_out_b, p.user_group_emb
        else:
            emb, offset, hidden = p.item_emb, p.item_offset, p.mlp_hier_v
            out_w, out_b, groups = p.hier_v_out_w, p.hier_v_out_b, p.item_group_emb
        z0 = ad.add(ad.rows(emb, indices), ad.rows(offset, indices))
        h = self._run_mlp(z0, hidden)
        z = ad.linear(h, ad.param(out_w), ad.param(out_b))
        logits = ad.linear(z, ad.param(groups))
        return ad.softmax(logits)

    def hierarchy_loss(self, indices: np.ndarray, side: str) -> Node:
        """Summed negative log posterior at each entity's hard group label."""
        labels = self.hard_labels(indices, side)
        posterior = self.hierarchy_posterior(indices, side)
        picked = ad.take_per_row(posterior, labels)
        return ad.scale(ad.sum_all(ad.log(picked)), -1.0)

    def group_recon_loss(self, indices: np.ndarray, neg_indices: np.ndarray, side: str) -> Node:
        """Hinge reconstruction loss for one side over a batch of entities."""
        emb, _, _, _ = self._side(side)
        x = ad.rows(emb, indices)
        beta = self.group_activation(x, side)
        mu = self.soft_group_repr(beta, side)
        recon = self.reconstruct(mu, side)
        negatives = ad.rows(emb, neg_indices)
        return self.group_margin_loss(recon, x, negatives)

    # -- scoring -----------------------------------------------------------

    def _score_logit(self, users: np.ndarray, items: np.ndarray, mask: VariantMask) -> Node:
        p = self.params
        u = ad.rows(p.user_emb, users)
        v = ad.rows(p.item_emb, items)
        z_uv = self._run_mlp(ad.concat([u, v, ad.hadamard(u, v)]), p.mlp_uv)
        logit = ad.matmul(z_uv, ad.param(p.fusion_uv))
        if mask.item_groups:
            item_labels = self.hard_labels(items, ITEM)
            g_v = ad.rows(p.item_group_emb, item_labels)
            sim = ad.bilinear(u, ad.param(p.bilinear_u), g_v)
            z_ug = self._run_mlp(ad.concat([u, g_v, sim]), p.mlp_ug)
            logit = ad.add(logit, ad.matmul(z_ug, ad.param(p.fusion_ug)))
        if mask.user_groups:
            user_labels = self.hard_labels(users, USER)
            g_u = ad.rows(p.user_group_emb, user_labels)
            sim = ad.bilinear(v, ad.param(p.bilinear_v), g_u)
            z_vg = self._run_mlp(ad.concat([g_u, v, sim]), p.mlp_vg)
            logit = ad.add(logit, ad.matmul(z_vg, ad.param(p.fusion_vg)))
        return logit

    def basic_score(self, users, items) -> Node:
        """Interaction probability through the user-item network alone."""
        users = np.asarray(users, dtype=np.intp)
        items = np.asarray(items, dtype=np.intp)
        return ad.sigmoid(self._score_logit(users, items, VariantMask(False, False)))

    def dual_bridge_score(self, users, items) -> Node:
        """Interaction probability through all active bridging branches."""
        users = np.asarray(users, dtype=np.intp)
        items = np.asarray(items, dtype=np.intp)
        return ad.sigmoid(self._score_logit(users, items, self.mask))

    def score_values(self, users, items) -> np.ndarray:
        """Flat probability array for evaluation (no gradient use)."""
        return self.dual_bridge_score(users, items).value[:, 0]

    # -- losses --------------------------------------------------------------

    def cf_loss(self, batch: TrainBatch) -> Node:
        """Summed BCE over positives and sampled negatives."""
        users = np.concatenate([batch.pos_users, batch.neg_users])
        items = np.concatenate([batch.pos_items, batch.neg_items])
        labels = np.concatenate(
            [np.ones(len(batch.pos_users)), np.zeros(len(batch.neg_users))]
        )[:, None]
        scores = self.dual_bridge_score(users, items)
        return ad.bce_sum(scores, labels)

    def total_loss(self, batch: TrainBatch) -> tuple[Node, LossTerms]:
        """Joint objective: CF loss plus alpha-weighted auxiliary terms.

        Auxiliary terms run over the distinct users and items appearing in
        the batch (positives and CF negatives).
        """
        alpha = self.hp.alpha
        if alpha < 0:
            raise ConfigError(f"alpha must be nonnegative, got {alpha}")
        cf = self.cf_loss(batch)
        use_user = self.mask.user_groups and alpha > 0.0
        use_item = self.mask.item_groups and alpha > 0.0

        aux_parts = []
        hier_u = group_u = hier_v = group_v = None
        if use_user:
            users = batch.distinct_users()
            hier_u = self.hierarchy_loss(users, USER)
            group_u = self.group_recon_loss(users, batch.group_neg_users, USER)
            aux_parts.extend([hier_u, group_u])
        if use_item:
            items = batch.distinct_items()
            hier_v = self.hierarchy_loss(items, ITEM)
            group_v = self.group_recon_loss(items, batch.group_neg_items, ITEM)
            aux_parts.extend([hier_v, group_v])

        if aux_parts:
            aux = aux_parts[0]
            for part in aux_parts[1:]:
                aux = ad.add(aux, part)
            total = ad.add(cf, ad.scale(aux, alpha))
        else:
            total = cf

        terms = LossTerms(
            total=float(total.value),
            cf=float(cf.value),
            hier_user=float(hier_u.value) if hier_u is not None else 0.0,
            hier_item=float(hier_v.value) if hier_v is not None else 0.0,
            group_user=float(group_u.value) if group_u is not None else 0.0,
            group_item=float(group_v.value) if group_v is not None else 0.0,
        )
        return total, terms


def hard_assignment(beta: np.ndarray):
    """Argmax group label(s) of membership weights; ties resolve to the lowest index."""
    beta = np.asarray(beta)
    if beta.ndim == 1:
        return int(np.argmax(beta))
    return np.argmax(beta, axis=1)


def trainable_parameters(params: ModelParams, mask: VariantMask) -> list[Parameter]:
    """Parameters that can receive gradient under the given mask.

    Masked-out parameters are excluded from optimizer updates so a masked
    run is bit-identical to a model that never had those parts.
    """
    p = params
    out = [p.user_emb, p.item_emb]
    for w, b in p.mlp_uv:
        out.extend([w, b])
    out.append(p.fusion_uv)
    if mask.user_groups:
        out.extend([p.user_group_emb, p.user_offset])
        out.extend([p.group_proj_user_w, p.group_proj_user_b])
        out.extend([p.recon_user_w, p.recon_user_b])
        for w, b in p.mlp_hier_u:
            out.extend([w, b])
        out.extend([p.hier_u_out_w, p.hier_u_out_b])
        for w, b in p.mlp_vg:
            out.extend([w, b])
        out.extend([p.bilinear_v, p.fusion_vg])
    if mask.item_groups:
        out.extend([p.item_group_emb, p.item_offset])
        out.extend([p.group_proj_item_w, p.group_proj_item_b])
        out.extend([p.recon_item_w, p.recon_item_b])
        for w, b in p.mlp_hier_v:
            out.extend([w, b])
        out.extend([p.hier_v_out_w, p.hier_v_out_b])
        for w, b in p.mlp_ug:
            out.extend([w, b])
        out.extend([p.bilinear_u, p.fusion_ug])
    return out
