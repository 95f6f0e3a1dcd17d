"""Scalar objectives and their closed-form gradients in parameter space.

Every loss is a batch mean. Pairwise ranking losses act on (user,
positive, negative) triples through the propagated state; the contrastive
term aligns fused and behavior embeddings of sampled nodes with an
in-batch softmax denominator; the L2 penalty acts on raw parameters.
Gradients flow analytically through fusion and propagation via
`model.backprop_state`; frozen modality features receive none.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .model import backprop_state

_LOG2 = float(np.log(2.0))


@dataclass(frozen=True)
class TripleBatch:
    """(u, i+, j-) ranking triples; j- must not be a train positive of u."""

    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray

    def __post_init__(self):
        if len(self.users) == 0:
            raise DataError("empty triple batch")
        if not (len(self.users) == len(self.pos) == len(self.neg)):
            raise DataError("triple arrays must share a length")

    def __len__(self):
        return len(self.users)


@dataclass(frozen=True)
class NodeSample:
    """Users and items entering the contrastive term."""

    users: np.ndarray
    items: np.ndarray


@dataclass
class LossReport:
    """Scalar loss terms plus a parameter-shaped gradient buffer."""

    bpr: float = 0.0
    rpr: float = 0.0
    contrastive: float = 0.0
    l2: float = 0.0
    preserve: float = 0.0
    impair: float = 0.0
    combined: float = 0.0
    grads: object = None


def _softplus(x):
    # log(1 + exp(x)) without overflow
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _pair_margins(state, batch):
    uf = state.user_final[batch.users]
    return np.einsum("nd,nd->n", uf, state.item_final[batch.pos]) - \
        np.einsum("nd,nd->n", uf, state.item_final[batch.neg])


def _bpr_state_grads(state, batch, sign):
    """State-level cotangents of mean +-ln sigmoid(margin) over the batch.

    sign=-1 gives the forward BPR loss (-ln sigma), sign=+1 the reverse.
    Returns (value, d_user_final, d_item_final).
    """
    margins = _pair_margins(state, batch)
    n = len(batch)
    value = -sign * float(_softplus(-margins).sum()) / n
    coef = sign * _sigmoid(-margins) / n
    n_u, n_i = state.user_final.shape[0], state.item_final.shape[0]
    d_uf = np.zeros_like(state.user_final)
    d_if = np.zeros_like(state.item_final)
    np.add.at(d_uf, batch.users,
              coef[:, None] * (state.item_final[batch.pos] - state.item_final[batch.neg]))
    np.add.at(d_if, batch.pos, coef[:, None] * state.user_final[batch.users])
    np.add.at(d_if, batch.neg, -coef[:, None] * state.user_final[batch.users])
    return value, d_uf, d_if


def bpr_loss(params, state, batch):
    """Mean -ln sigmoid(score(u,i+) - score(u,j-)) with analytic gradients."""
    value, d_uf, d_if = _bpr_state_grads(state, batch, sign=-1)
    grads = backprop_state(params, state, d_user_final=d_uf, d_item_final=d_if)
    return LossReport(bpr=value, grads=grads)


def reverse_bpr_loss(params, state, batch):
    """Sign-flipped BPR on marked interactions: mean +ln sigmoid(margin)."""
    value, d_uf, d_if = _bpr_state_grads(state, batch, sign=-1)
    grads = backprop_state(params, state, d_user_final=d_uf, d_item_final=d_if)
    grads = grads.scaled(-1.0)
    return LossReport(rpr=-value, grads=grads)


def _contrastive_state_grads(state, nodes, tau):
    """Alignment InfoNCE over the node sample; in-batch denominators.

    Per sampled user u the positive logit is user_mul[u].user_beh[u]/tau
    and the denominator runs over the sampled users' own alignment
    logits; items analogously. Returns the per-node mean and cotangents
    for (user_mul, user_beh, item_mul, item_beh).
    """
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    us, its = np.asarray(nodes.users), np.asarray(nodes.items)
    if len(us) < 2 or len(its) < 2:
        raise DataError("contrastive sample needs >=2 users and >=2 items")
    n_total = len(us) + len(its)

    d_um = np.zeros_like(state.user_mul)
    d_ub = np.zeros_like(state.user_beh)
    d_im = np.zeros_like(state.item_mul)
    d_ib = np.zeros_like(state.item_beh)

    def side(idx, mul, beh, d_mul, d_beh):
        q = np.einsum("nd,nd->n", mul[idx], beh[idx]) / tau
        zmax = q.max()
        lse = zmax + np.log(np.exp(q - zmax).sum())
        value = float((-q + lse).sum())
        p = np.exp(q - lse)
        # d value / d q_v = |sample| * p_v - 1, then /tau through the logits
        dq = (len(idx) * p - 1.0) / tau
        np.add.at(d_mul, idx, dq[:, None] * beh[idx])
        np.add.at(d_beh, idx, dq[:, None] * mul[idx])
        return value

    total = side(us, state.user_mul, state.user_beh, d_um, d_ub)
    total += side(its, state.item_mul, state.item_beh, d_im, d_ib)
    for buf in (d_um, d_ub, d_im, d_ib):
        buf /= n_total
    return total / n_total, d_um, d_ub, d_im, d_ib


def contrastive_loss(params, state, nodes, tau):
    """Mutual-information auxiliary loss between fused and behavior features."""
    value, d_um, d_ub, d_im, d_ib = _contrastive_state_grads(state, nodes, tau)
    grads = backprop_state(params, state, d_user_mul=d_um, d_user_beh=d_ub,
                           d_item_mul=d_im, d_item_beh=d_ib)
    return LossReport(contrastive=value, grads=grads)


def l2_penalty(params):
    """Sum of squares over all trainable tensors; gradient 2*phi."""
    value = 0.0
    grads = params.zeros_like()
    for (_, g), (_, t) in zip(grads.named_tensors(), params.named_tensors()):
        value += float(np.vdot(t, t))
        g += 2.0 * t
    return value, grads


def preserve_loss(params, state, retain_batch, nodes, hyper):
    """Original training objective on the retain set: BPR + weighted extras."""
    rep = bpr_loss(params, state, retain_batch)
    con_val = 0.0
    if hyper.lambda_c != 0.0:
        con = contrastive_loss(params, state, nodes, hyper.tau)
        con_val = con.contrastive
        rep.grads.add_scaled(con.grads, hyper.lambda_c)
    l2_val, l2_grads = l2_penalty(params)
    rep.grads.add_scaled(l2_grads, hyper.lambda_phi)
    rep.contrastive = con_val
    rep.l2 = l2_val
    rep.preserve = rep.bpr + hyper.lambda_c * con_val + hyper.lambda_phi * l2_val
    return rep


def impair_loss(params, state, forget_batch, nodes, hyper):
    """Reverse BPR on the forget set minus the weighted auxiliary terms."""
    rep = reverse_bpr_loss(params, state, forget_batch)
    con_val = 0.0
    if hyper.lambda_c != 0.0:
        con = contrastive_loss(params, state, nodes, hyper.tau)
        con_val = con.contrastive
        rep.grads.add_scaled(con.grads, -hyper.lambda_c)
    l2_val, l2_grads = l2_penalty(params)
    rep.grads.add_scaled(l2_grads, -hyper.lambda_phi)
    rep.contrastive = con_val
    rep.l2 = l2_val
    rep.impair = rep.rpr - (hyper.lambda_c * con_val + hyper.lambda_phi * l2_val)
    return rep


def combined_loss(preserve, impair, alpha):
    """alpha-weighted blend of preserve and impair reports."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("alpha must lie in [0, 1]")
    grads = preserve.grads.scaled(alpha)
    grads.add_scaled(impair.grads, 1.0 - alpha)
    return LossReport(
        bpr=preserve.bpr,
        rpr=impair.rpr,
        contrastive=preserve.contrastive,
        l2=preserve.l2,
        preserve=preserve.preserve,
        impair=impair.impair,
        combined=alpha * preserve.preserve + (1.0 - alpha) * impair.impair,
        grads=grads,
    )


def bpr_divergence(state_a, state_b, probe):
    """Mean squared score difference over a probe of positives and negatives.

    probe: iterable of (user, positive item array, negative item array).
    """
    probe = list(probe)
    if not probe:
        raise DataError("empty divergence probe")
    total = 0.0
    for u, pos, neg in probe:
        pos = np.asarray(pos, dtype=np.int64)
        neg = np.asarray(neg, dtype=np.int64)
        if len(pos) == 0 or len(neg) == 0:
            raise DataError(f"probe user {u} needs >=1 positive and >=1 negative")
        da = state_a.item_final[pos] @ state_a.user_final[u] - \
            state_b.item_final[pos] @ state_b.user_final[u]
        db = state_a.item_final[neg] @ state_a.user_final[u] - \
            state_b.item_final[neg] @ state_b.user_final[u]
        total += float((da ** 2).mean()) + float((db ** 2).mean())
    return total / len(probe)
