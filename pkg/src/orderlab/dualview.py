"""Dual-view detection model.

Two item-input paths feed two independent recurrent encoders:

* semantic view: a two-layer adapter over the external embeddings plus a
  scaled linear residual, X_s = Adapter(E) + coef * (W_res E);
* collaborative view: a learned gate blends a projection of the
  PCA-reduced embeddings with free ID embeddings,
  X_c = G * (W_fuse E_red + b) + (1 - G) * E_id,  G = sigmoid(W_gate [E_red; E_id] + b_gate).

Each view scores next items against its own input table (tied weights).
The joint objective blends both views' recommendation losses with a
symmetric cross-view InfoNCE term on final sequence representations.
All gradients are exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import encoder
from .errors import DegenerateVector, InvalidArgument
from .numkit import SeededRng
from .params import ParamVector, TrainConfig, run_training

VIEWS = ("semantic", "collaborative")


@dataclass
class DualViewConfig:
    vocab: int
    sem_dim: int
    hidden: int = 64
    max_len: int = 200
    init_scale: float = 0.1
    residual_coef: float = 0.5

    def validate(self) -> None:
        if self.vocab < 2 or self.hidden < 8 or self.sem_dim < 8:
            raise InvalidArgument("need vocab >= 2, hidden >= 8, sem_dim >= 8")


@dataclass
class LossConfig:
    view_blend: float = 0.5  # weight of the semantic view's recommendation loss
    contrastive_weight: float = 0.1
    temperature: float = 0.1
    batch_size: int = 32

    def validate(self) -> None:
        if not (0.0 <= self.view_blend <= 1.0):
            raise InvalidArgument("view_blend must lie in [0, 1]")
        if self.contrastive_weight < 0.0 or self.temperature <= 0.0 or self.batch_size < 1:
            raise InvalidArgument("bad loss config")


def _silu(x: np.ndarray):
    s = encoder.sigmoid(x)
    return x * s, s


def contrastive_loss(rep_sem: np.ndarray, rep_col: np.ndarray, temperature: float):
    """Symmetric cross-view InfoNCE over a batch of final representations.

    Returns (loss, d_rep_sem, d_rep_col); gradients are with respect to the
    raw (pre-normalization) representations.
    """
    rs = np.asarray(rep_sem, dtype=np.float64)
    rc = np.asarray(rep_col, dtype=np.float64)
    if rs.shape != rc.shape or rs.ndim != 2:
        raise InvalidArgument("representation batches must share shape (B, d)")
    b = rs.shape[0]
    ns = np.linalg.norm(rs, axis=1, keepdims=True)
    nc = np.linalg.norm(rc, axis=1, keepdims=True)
    if float(ns.min()) == 0.0 or float(nc.min()) == 0.0:
        raise DegenerateVector("zero-norm representation in contrastive batch")
    us = rs / ns
    uc = rc / nc
    sim = (us @ uc.T) / temperature
    row_max = sim.max(axis=1, keepdims=True)
    row_p = np.exp(sim - row_max)
    row_p /= row_p.sum(axis=1, keepdims=True)
    col_max = sim.max(axis=0, keepdims=True)
    col_p = np.exp(sim - col_max)
    col_p /= col_p.sum(axis=0, keepdims=True)
    diag = np.arange(b)
    l_row = np.log(row_p[diag, diag])
    l_col = np.log(col_p[diag, diag])
    loss = float(-(l_row + l_col).sum() / (2 * b)) + 0.0  # normalize -0.0

    d_sim = (row_p + col_p) / (2 * b)
    d_sim[diag, diag] -= 1.0 / b
    d_sim /= temperature
    d_us = d_sim @ uc
    d_uc = d_sim.T @ us
    d_rs = (d_us - us * (d_us * us).sum(axis=1, keepdims=True)) / ns
    d_rc = (d_uc - uc * (d_uc * uc).sum(axis=1, keepdims=True)) / nc
    return loss, d_rs, d_rc


class DualViewModel:
    """Stateless definition over fixed semantic inputs.

    `sem` is the (V, sem_dim) embedding table; `reduced` its (V, hidden)
    PCA projection. Both are constants of the model, not parameters.
    """

    ARCH = "dualview-gru/1"

    def __init__(self, cfg: DualViewConfig, sem: np.ndarray, reduced: np.ndarray):
        cfg.validate()
        self.cfg = cfg
        self.sem = np.asarray(sem, dtype=np.float64)
        self.reduced = np.asarray(reduced, dtype=np.float64)
        if self.sem.shape != (cfg.vocab, cfg.sem_dim):
            raise InvalidArgument(
                f"semantic table shape {self.sem.shape} != ({cfg.vocab}, {cfg.sem_dim})"
            )
        if self.reduced.shape != (cfg.vocab, cfg.hidden):
            raise InvalidArgument(
                f"reduced table shape {self.reduced.shape} != ({cfg.vocab}, {cfg.hidden})"
            )
        d_h, d_s = cfg.hidden, cfg.sem_dim
        registry: dict[str, tuple[int, ...]] = {
            "adapter_hidden_w": (d_h, d_s),
            "adapter_hidden_bias": (d_h,),
            "adapter_out_w": (d_h, d_h),
            "adapter_out_bias": (d_h,),
            "residual_w": (d_h, d_s),
            "fusion_w": (d_h, d_h),
            "fusion_bias": (d_h,),
            "gate_w": (d_h, 2 * d_h),
            "gate_bias": (d_h,),
            "item_embeddings": (cfg.vocab, d_h),
        }
        for prefix in ("sem_enc", "collab_enc"):
            for name, shape in encoder.encoder_shapes(d_h, d_h).items():
                registry[f"{prefix}.{name}"] = shape
        self.registry = registry

    def zero_params(self) -> ParamVector:
        return ParamVector(self.registry)

    def init_params(self, rng: SeededRng) -> ParamVector:
        params = self.zero_params()
        for name in params.block_names():
            if name.endswith("bias"):
                continue
            block = params.view(name)
            block[...] = rng.gen.normal(0.0, self.cfg.init_scale, size=block.shape)
        return params

    def _enc_weights(self, params: ParamVector, view: str) -> dict[str, np.ndarray]:
        prefix = "sem_enc" if view == "semantic" else "collab_enc"
        return {name: params.view(f"{prefix}.{name}") for name in encoder.encoder_shapes(1, 1)}

    # -- item input paths ----------------------------------------------------

    def item_inputs(self, params: ParamVector):
        """Both views' per-item input tables plus the backward cache."""
        p = params
        pre_hidden = self.sem @ p.view("adapter_hidden_w").T + p.view("adapter_hidden_bias")
        hidden, hidden_sig = _silu(pre_hidden)
        table_sem = (
            hidden @ p.view("adapter_out_w").T
            + p.view("adapter_out_bias")
            + self.cfg.residual_coef * (self.sem @ p.view("residual_w").T)
        )
        fused = self.reduced @ p.view("fusion_w").T + p.view("fusion_bias")
        ids = p.view("item_embeddings")
        gate_pre = (
            np.concatenate([self.reduced, ids], axis=1) @ p.view("gate_w").T
            + p.view("gate_bias")
        )
        gate = encoder.sigmoid(gate_pre)
        table_col = gate * fused + (1.0 - gate) * ids
        cache = {
            "pre_hidden": pre_hidden,
            "hidden": hidden,
            "hidden_sig": hidden_sig,
            "fused": fused,
            "gate": gate,
        }
        return table_sem, table_col, cache

    def _item_inputs_backward(self, params, cache, d_sem_table, d_col_table, grad):
        p = params
        hidden, sig = cache["hidden"], cache["hidden_sig"]
        grad.view("adapter_out_w")[...] += d_sem_table.T @ hidden
        grad.view("adapter_out_bias")[...] += d_sem_table.sum(axis=0)
        d_hidden = d_sem_table @ p.view("adapter_out_w")
        d_pre = d_hidden * (sig * (1.0 + cache["pre_hidden"] * (1.0 - sig)))
        grad.view("adapter_hidden_w")[...] += d_pre.T @ self.sem
        grad.view("adapter_hidden_bias")[...] += d_pre.sum(axis=0)
        grad.view("residual_w")[...] += self.cfg.residual_coef * (d_sem_table.T @ self.sem)

        gate, fused = cache["gate"], cache["fused"]
        ids = p.view("item_embeddings")
        d_gate = d_col_table * (fused - ids)
        d_fused = d_col_table * gate
        d_ids = d_col_table * (1.0 - gate)
        grad.view("fusion_w")[...] += d_fused.T @ self.reduced
        grad.view("fusion_bias")[...] += d_fused.sum(axis=0)
        d_gate_pre = d_gate * gate * (1.0 - gate)
        grad.view("gate_w")[...] += d_gate_pre.T @ np.concatenate([self.reduced, ids], axis=1)
        grad.view("gate_bias")[...] += d_gate_pre.sum(axis=0)
        d_ids += d_gate_pre @ p.view("gate_w")[:, self.cfg.hidden :]
        grad.view("item_embeddings")[...] += d_ids

    # -- forward -------------------------------------------------------------

    def _check_items(self, seq) -> np.ndarray:
        arr = np.asarray(seq, dtype=np.int64)
        if arr.ndim != 1 or arr.size == 0:
            raise InvalidArgument("item sequence must be non-empty and 1-D")
        if arr.size > self.cfg.max_len:
            raise InvalidArgument(f"sequence length {arr.size} exceeds max {self.cfg.max_len}")
        if arr.min() < 0 or arr.max() >= self.cfg.vocab:
            raise InvalidArgument("item index outside the vocabulary")
        return arr

    def encode(self, params: ParamVector, view: str, seq):
        """Per-position representations and predictive distributions.

        reps[k] is the hidden state after consuming item k; dists[k] is the
        view's distribution over position k given items before it, with
        dists[0] uniform (no prefix exists).
        """
        if view not in VIEWS:
            raise InvalidArgument(f"view must be one of {VIEWS}")
        items = self._check_items(seq)
        table_sem, table_col, _ = self.item_inputs(params)
        table = table_sem if view == "semantic" else table_col
        x = table[items][None, :, :]
        states, _ = encoder.gru_forward(self._enc_weights(params, view), x)
        reps = states[0]
        dists = np.empty((items.size, self.cfg.vocab))
        dists[0] = 1.0 / self.cfg.vocab
        if items.size > 1:
            dists[1:] = encoder.next_step_probs(reps[:-1], table)
        return reps, dists

    def batch_view_states(self, params: ParamVector, view: str, seqs, tables=None):
        """Batched hidden states for one view; returns (states, items, lengths, table, cache)."""
        checked = [self._check_items(s) for s in seqs]
        items, lengths = encoder.pad_sequences(checked)
        if tables is None:
            table_sem, table_col, _ = self.item_inputs(params)
        else:
            table_sem, table_col = tables
        table = table_sem if view == "semantic" else table_col
        x = table[items]
        states, cache = encoder.gru_forward(self._enc_weights(params, view), x)
        return states, items, lengths, table, cache

    # -- joint objective -----------------------------------------------------

    def joint_loss(self, params: ParamVector, seqs, loss_cfg: LossConfig):
        """Blended recommendation losses + weighted InfoNCE, with exact gradient.

        Recommendation loss per view is the mean over the batch of each
        sequence's mean next-item cross-entropy under that view's tied
        table. The contrastive term uses the batch's final hidden states.
        """
        loss_cfg.validate()
        if not seqs:
            raise InvalidArgument("joint_loss needs a non-empty batch")
        checked = [self._check_items(s) for s in seqs]
        if any(s.size < 2 for s in checked):
            raise InvalidArgument("joint_loss sequences need length >= 2")
        table_sem, table_col, in_cache = self.item_inputs(params)
        items, lengths = encoder.pad_sequences(checked)
        b, t_len = items.shape
        weights = encoder.term_weight_matrix(lengths, t_len) / b

        grad = self.zero_params()
        alpha = loss_cfg.view_blend
        view_losses = {}
        d_tables = {}
        final_idx = (np.arange(b), lengths - 1)
        finals = {}
        view_items = {"semantic": (table_sem, "sem_enc", alpha), "collaborative": (table_col, "collab_enc", 1.0 - alpha)}
        caches = {}
        states_by_view = {}
        for view, (table, prefix, coef) in view_items.items():
            x = table[items]
            states, cache = encoder.gru_forward(self._enc_weights(params, view), x)
            loss_v, d_states, d_table = encoder.tied_next_item_loss(states, table, items, weights)
            view_losses[view] = loss_v
            caches[view] = (cache, d_states * coef)
            d_tables[view] = d_table * coef
            finals[view] = states[final_idx]
            states_by_view[view] = states

        c_loss, d_fin_sem, d_fin_col = contrastive_loss(
            finals["semantic"], finals["collaborative"], loss_cfg.temperature
        )
        lam = loss_cfg.contrastive_weight
        total = (
            alpha * view_losses["semantic"]
            + (1.0 - alpha) * view_losses["collaborative"]
            + lam * c_loss
        )

        d_tables_total = {}
        for view, d_fin in (("semantic", d_fin_sem), ("collaborative", d_fin_col)):
            cache, d_states = caches[view]
            d_states[final_idx] += lam * d_fin
            d_enc, d_x = encoder.gru_backward(self._enc_weights(params, view), cache, d_states)
            prefix = "sem_enc" if view == "semantic" else "collab_enc"
            for name, val in d_enc.items():
                grad.view(f"{prefix}.{name}")[...] = val
            d_table = d_tables[view]
            np.add.at(d_table, items.ravel(), d_x.reshape(-1, self.cfg.hidden))
            d_tables_total[view] = d_table
        self._item_inputs_backward(
            params, in_cache, d_tables_total["semantic"], d_tables_total["collaborative"], grad
        )
        parts = {
            "rec_semantic": view_losses["semantic"],
            "rec_collaborative": view_losses["collaborative"],
            "contrastive": c_loss,
        }
        return total, grad, parts

    def train(
        self, params: ParamVector, sequences, loss_cfg: LossConfig, cfg: TrainConfig, rng: SeededRng
    ) -> tuple[ParamVector, list[float]]:
        """Same optimizer regime as the target model, on the joint objective."""
        usable = [np.asarray(s, dtype=np.int64) for s in sequences if len(s) >= 2]
        if not usable:
            raise InvalidArgument("no trainable sequences")

        def loss_grad(p, batch_idx):
            batch = [usable[i] for i in batch_idx]
            loss, grad, _ = self.joint_loss(p, batch, loss_cfg)
            return loss, grad

        trained = params.copy()
        trace = run_training(
            loss_grad, trained, len(usable), cfg, rng, example_size_fn=lambda i: len(usable[i])
        )
        return trained, trace
