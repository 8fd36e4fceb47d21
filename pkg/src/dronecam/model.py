"""Autoregressive camera-motion transformer, implemented from first principles.

Token layout per frame (52 tokens): 1 camera-pose token, 45 image-patch
tokens, 1 <BoA> begin-of-action token, 5 action tokens. A Gaussian <Cond>
token opens every sequence. Positional information is a concatenation of a
frame-level embedding (30 rows) and a slot-level embedding (52 rows), each
half the hidden width. Action predictions are continuous 6-vectors read by a
linear head at the <BoA> token (first sub-step) and at each embedded action
token (following sub-step), trained with an L1 loss under causal masking.

Everything is plain numpy with hand-written backward passes so gradients can
be verified against central finite differences at double precision. A
config flag drops the pose and action tokens and shortens the context,
giving the image-only short-horizon baseline used as an ablation contrast.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

PATCH_ROWS, PATCH_COLS = 5, 9
N_PATCHES = PATCH_ROWS * PATCH_COLS
CHECKPOINT_MAGIC = b"DCAM"

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    layers: int = 4
    heads: int = 4
    hidden_dim: int = 128
    max_frames: int = 30
    n_substeps: int = 5
    feature_dim: int = 32
    seed: int = 0
    learning_rate: float = 3e-4
    position_scale: float = 50.0  # pose positions are divided by this before embedding
    depth_conv_channels: tuple[int, int] = (8, 16)
    pose_token: bool = True
    action_tokens: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.hidden_dim % 2 != 0:
            raise ModelError("hidden_dim must be even (positional embedding halves)")
        if self.hidden_dim % self.heads != 0:
            raise ModelError("hidden_dim must be divisible by heads")
        if self.dtype not in ("float64", "float32"):
            raise ModelError(f"dtype must be float64 or float32, got {self.dtype}")
        if isinstance(self.depth_conv_channels, list):
            self.depth_conv_channels = tuple(self.depth_conv_channels)

    @property
    def tokens_per_frame(self) -> int:
        n = N_PATCHES + 1  # patches + <BoA>
        if self.pose_token:
            n += 1
        if self.action_tokens:
            n += self.n_substeps
        return n

    @property
    def boa_slot(self) -> int:
        return (1 if self.pose_token else 0) + N_PATCHES

    @property
    def max_tokens(self) -> int:
        return 1 + self.tokens_per_frame * self.max_frames

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(data: dict) -> "ModelConfig":
        return ModelConfig(**{k: v for k, v in data.items()})


def sample_cond(seed: int, dim: int) -> np.ndarray:
    """Standard-normal conditioning vector from a seeded generator."""
    return np.random.default_rng(seed).standard_normal(dim)


# --- primitive layers (forward + backward) -----------------------------------------


def gelu(x: np.ndarray) -> np.ndarray:
    """Smooth gated activation (tanh-form GELU)."""
    x2 = x * x
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x2 * x)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)


def _layer_norm(x, gamma, beta, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, (xhat, inv)


def _layer_norm_backward(dy, cache, gamma):
    xhat, inv = cache
    d = xhat.shape[-1]
    dxhat = dy * gamma
    dgamma = (dy * xhat).reshape(-1, d).sum(axis=0)
    dbeta = dy.reshape(-1, d).sum(axis=0)
    dx = inv / d * (
        d * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def _mlp3_forward(x, params, prefix):
    """Three linear layers with GELU between (tokenizer MLPs)."""
    h0 = x @ params[f"{prefix}.w0"] + params[f"{prefix}.b0"]
    a0 = gelu(h0)
    h1 = a0 @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"]
    a1 = gelu(h1)
    out = a1 @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]
    return out, (x, h0, a0, h1, a1)


def _mlp3_backward(dout, cache, params, grads, prefix):
    x, h0, a0, h1, a1 = cache
    grads[f"{prefix}.w2"] += a1.reshape(-1, a1.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
    grads[f"{prefix}.b2"] += dout.reshape(-1, dout.shape[-1]).sum(axis=0)
    da1 = dout @ params[f"{prefix}.w2"].T
    dh1 = da1 * gelu_grad(h1)
    grads[f"{prefix}.w1"] += a0.reshape(-1, a0.shape[-1]).T @ dh1.reshape(-1, dh1.shape[-1])
    grads[f"{prefix}.b1"] += dh1.reshape(-1, dh1.shape[-1]).sum(axis=0)
    da0 = dh1 @ params[f"{prefix}.w1"].T
    dh0 = da0 * gelu_grad(h0)
    grads[f"{prefix}.w0"] += x.reshape(-1, x.shape[-1]).T @ dh0.reshape(-1, dh0.shape[-1])
    grads[f"{prefix}.b0"] += dh0.reshape(-1, dh0.shape[-1]).sum(axis=0)
    return dh0 @ params[f"{prefix}.w0"].T


def _im2col3(x):
    """(T, 5, 9, C) -> (T, 5, 9, 9C) patches of the 3x3 neighborhood, zero-padded."""
    t, h, w, c = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((t, h, w, 9, c), dtype=x.dtype)
    idx = 0
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, idx, :] = padded[:, dy : dy + h, dx : dx + w, :]
            idx += 1
    return cols.reshape(t, h, w, 9 * c)


def _col2im3(dcols, shape):
    """Adjoint of _im2col3; scatter-adds gradients back to the input layout."""
    t, h, w, c = shape
    dcols = dcols.reshape(t, h, w, 9, c)
    dpadded = np.zeros((t, h + 2, w + 2, c), dtype=dcols.dtype)
    idx = 0
    for dy in range(3):
        for dx in range(3):
            dpadded[:, dy : dy + h, dx : dx + w, :] += dcols[:, :, :, idx, :]
            idx += 1
    return dpadded[:, 1 : 1 + h, 1 : 1 + w, :]


def _conv_stack_forward(x, params):
    """Three same-padded 3x3 conv layers with GELU between, on (T, 5, 9, 1) input."""
    caches = []
    out = x
    for i in range(3):
        cols = _im2col3(out)
        pre = cols @ params[f"depth_conv.w{i}"] + params[f"depth_conv.b{i}"]
        caches.append((out.shape, cols, pre))
        out = gelu(pre) if i < 2 else pre
    return out, caches


def _conv_stack_backward(dout, caches, params, grads):
    for i in reversed(range(3)):
        shape, cols, pre = caches[i]
        dpre = dout if i == 2 else dout * gelu_grad(pre)
        w = params[f"depth_conv.w{i}"]
        grads[f"depth_conv.w{i}"] += cols.reshape(-1, cols.shape[-1]).T @ dpre.reshape(-1, dpre.shape[-1])
        grads[f"depth_conv.b{i}"] += dpre.reshape(-1, dpre.shape[-1]).sum(axis=0)
        dcols = dpre @ w.T
        dout = _col2im3(dcols, shape)
    return dout


# --- parameter initialization --------------------------------------------------------


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    d = cfg.hidden_dim
    dt = cfg.np_dtype
    params: dict[str, np.ndarray] = {}

    def linear(name, fan_in, fan_out):
        std = np.sqrt(2.0 / (fan_in + fan_out))
        params[f"{name}.w"] = (rng.standard_normal((fan_in, fan_out)) * std).astype(dt)
        params[f"{name}.b"] = np.zeros(fan_out, dtype=dt)

    def mlp3(prefix, in_dim):
        for i, (fi, fo) in enumerate([(in_dim, d), (d, d), (d, d)]):
            std = np.sqrt(2.0 / (fi + fo))
            params[f"{prefix}.w{i}"] = (rng.standard_normal((fi, fo)) * std).astype(dt)
            params[f"{prefix}.b{i}"] = np.zeros(fo, dtype=dt)

    if cfg.pose_token:
        mlp3("pose_mlp", 7)
    if cfg.action_tokens:
        mlp3("motion_mlp", 6)

    # feature branch: two linear layers; depth branch: three 3x3 convs
    for i, (fi, fo) in enumerate([(cfg.feature_dim, d), (d, d)]):
        std = np.sqrt(2.0 / (fi + fo))
        params[f"feat_proj.w{i}"] = (rng.standard_normal((fi, fo)) * std).astype(dt)
        params[f"feat_proj.b{i}"] = np.zeros(fo, dtype=dt)
    c1, c2 = cfg.depth_conv_channels
    for i, (fi, fo) in enumerate([(1, c1), (c1, c2), (c2, d)]):
        std = np.sqrt(2.0 / (9 * fi + fo))
        params[f"depth_conv.w{i}"] = (rng.standard_normal((9 * fi, fo)) * std).astype(dt)
        params[f"depth_conv.b{i}"] = np.zeros(fo, dtype=dt)

    params["boa"] = (rng.standard_normal(d) * 0.02).astype(dt)
    params["cond_pos"] = (rng.standard_normal(d) * 0.02).astype(dt)
    params["pe_frame"] = (rng.standard_normal((cfg.max_frames, d // 2)) * 0.02).astype(dt)
    params["pe_slot"] = (rng.standard_normal((cfg.tokens_per_frame, d // 2)) * 0.02).astype(dt)

    for layer in range(cfg.layers):
        p = f"block{layer}"
        params[f"{p}.ln1.g"] = np.ones(d, dtype=dt)
        params[f"{p}.ln1.b"] = np.zeros(d, dtype=dt)
        for name in ("wq", "wk", "wv", "wo"):
            linear(f"{p}.{name}", d, d)
        params[f"{p}.ln2.g"] = np.ones(d, dtype=dt)
        params[f"{p}.ln2.b"] = np.zeros(d, dtype=dt)
        linear(f"{p}.mlp1", d, 4 * d)
        linear(f"{p}.mlp2", 4 * d, d)

    params["ln_f.g"] = np.ones(d, dtype=dt)
    params["ln_f.b"] = np.zeros(d, dtype=dt)
    head_out = cfg.n_substeps * 6 if not cfg.action_tokens else 6
    linear("head", d, head_out)
    return params


def count_params(params: dict[str, np.ndarray]) -> int:
    return sum(int(np.prod(p.shape)) for p in params.values())


# --- the model ------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """Embedded tokens plus their (frame, slot) positions; <Cond> uses (-1, -1)."""

    embeddings: np.ndarray  # (S, D), positional embeddings already added
    frame_index: np.ndarray  # (S,)
    slot_index: np.ndarray  # (S,)


class DVGModel:
    """Camera-motion transformer with explicit forward/backward passes."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)

    # -- tokenizers --------------------------------------------------------------

    def embed_pose(self, poses: np.ndarray) -> np.ndarray:
        """(T, 7) pose vectors -> (T, D); positions are scaled down first."""
        x = np.asarray(poses, dtype=self.cfg.np_dtype).copy()
        x[..., :3] /= self.cfg.position_scale
        out, _ = _mlp3_forward(x, self.params, "pose_mlp")
        return out

    def embed_motion(self, motions: np.ndarray) -> np.ndarray:
        """(..., 6) normalized motions -> (..., D)."""
        x = np.asarray(motions, dtype=self.cfg.np_dtype)
        out, _ = _mlp3_forward(x, self.params, "motion_mlp")
        return out

    def embed_patches(self, feats: np.ndarray, depths: np.ndarray) -> np.ndarray:
        """(T, 5, 9, F) features + (T, 5, 9) depths -> (T, 45, D), branches summed."""
        feats = np.asarray(feats, dtype=self.cfg.np_dtype)
        depths = np.asarray(depths, dtype=self.cfg.np_dtype)
        if feats.shape[-3:-1] != (PATCH_ROWS, PATCH_COLS) or depths.shape[-2:] != (PATCH_ROWS, PATCH_COLS):
            raise ModelError(
                f"patch grids must be {PATCH_ROWS}x{PATCH_COLS}, got {feats.shape} / {depths.shape}"
            )
        h = gelu(feats @ self.params["feat_proj.w0"] + self.params["feat_proj.b0"])
        feat_tok = h @ self.params["feat_proj.w1"] + self.params["feat_proj.b1"]
        depth_in = np.log1p(depths)[..., None]  # compress world-unit depths
        depth_tok, _ = _conv_stack_forward(depth_in, self.params)
        out = feat_tok + depth_tok
        return out.reshape(depths.shape[0], N_PATCHES, self.cfg.hidden_dim)

    def positional_embedding(self, frame_index: int, slot_index: int) -> np.ndarray:
        cfg = self.cfg
        if not 0 <= frame_index < cfg.max_frames:
            raise ModelError(f"frame_index {frame_index} out of range [0, {cfg.max_frames})")
        if not 0 <= slot_index < cfg.tokens_per_frame:
            raise ModelError(f"slot_index {slot_index} out of range [0, {cfg.tokens_per_frame})")
        return np.concatenate(
            [self.params["pe_frame"][frame_index], self.params["pe_slot"][slot_index]]
        )

    def assemble_tokens(
        self,
        poses: np.ndarray,
        feats: np.ndarray,
        depths: np.ndarray,
        actions_norm: np.ndarray | None,
        cond: np.ndarray,
    ) -> TokenSequence:
        """Build the <Cond> + per-frame token sequence with positional embeddings."""
        cfg = self.cfg
        n_frames = feats.shape[0]
        if n_frames > cfg.max_frames:
            raise ModelError(f"{n_frames} frames exceed the {cfg.max_frames}-frame context")
        tpf = cfg.tokens_per_frame
        s = 1 + tpf * n_frames
        d = cfg.hidden_dim
        x = np.empty((s, d), dtype=cfg.np_dtype)
        frame_idx = np.full(s, -1, dtype=np.int64)
        slot_idx = np.full(s, -1, dtype=np.int64)

        x[0] = np.asarray(cond, dtype=cfg.np_dtype) + self.params["cond_pos"]

        patch_tok = self.embed_patches(feats, depths)
        pose_tok = self.embed_pose(poses) if cfg.pose_token else None
        act_tok = None
        if cfg.action_tokens:
            if actions_norm is None:
                raise ModelError("actions_norm required when the config uses action tokens")
            act_tok = self.embed_motion(actions_norm)

        pe_frame = self.params["pe_frame"]
        pe_slot = self.params["pe_slot"]
        for t in range(n_frames):
            base = 1 + t * tpf
            slot = 0
            if cfg.pose_token:
                x[base] = pose_tok[t]
                slot += 1
            x[base + slot : base + slot + N_PATCHES] = patch_tok[t]
            slot += N_PATCHES
            x[base + slot] = self.params["boa"]
            slot += 1
            if cfg.action_tokens:
                x[base + slot : base + slot + cfg.n_substeps] = act_tok[t]
            frame_idx[base : base + tpf] = t
            slot_idx[base : base + tpf] = np.arange(tpf)
            x[base : base + tpf, : d // 2] += pe_frame[t]
            x[base : base + tpf, d // 2 :] += pe_slot
        return TokenSequence(embeddings=x, frame_index=frame_idx, slot_index=slot_idx)

    # -- transformer core ---------------------------------------------------------

    def forward(self, tokens: TokenSequence, want_cache: bool = False):
        """Per-token hidden states under strict causal attention."""
        cfg = self.cfg
        x = tokens.embeddings
        s = x.shape[0]
        if s > cfg.max_tokens:
            raise ModelError(f"sequence of {s} tokens exceeds context of {cfg.max_tokens}")
        h = cfg.heads
        dh = cfg.hidden_dim // h
        scale = float(1.0 / np.sqrt(dh))
        mask = np.triu(np.full((s, s), -np.inf, dtype=x.dtype), k=1)
        caches = [] if want_cache else None

        for layer in range(cfg.layers):
            p = f"block{layer}"
            xn, ln1_cache = _layer_norm(x, self.params[f"{p}.ln1.g"], self.params[f"{p}.ln1.b"])
            q = xn @ self.params[f"{p}.wq.w"] + self.params[f"{p}.wq.b"]
            k = xn @ self.params[f"{p}.wk.w"] + self.params[f"{p}.wk.b"]
            v = xn @ self.params[f"{p}.wv.w"] + self.params[f"{p}.wv.b"]
            # contiguous per-head layouts keep the batched matmuls on the BLAS path
            qh = np.ascontiguousarray(q.reshape(s, h, dh).transpose(1, 0, 2))
            kh = np.ascontiguousarray(k.reshape(s, h, dh).transpose(1, 0, 2))
            vh = np.ascontiguousarray(v.reshape(s, h, dh).transpose(1, 0, 2))
            att = qh @ kh.transpose(0, 2, 1)
            att *= scale
            att += mask
            att -= att.max(axis=-1, keepdims=True)
            probs = np.exp(att, out=att)
            probs /= probs.sum(axis=-1, keepdims=True)
            ctx = (probs @ vh).transpose(1, 0, 2).reshape(s, cfg.hidden_dim)
            attn_out = ctx @ self.params[f"{p}.wo.w"] + self.params[f"{p}.wo.b"]
            x_mid = x + attn_out

            xn2, ln2_cache = _layer_norm(
                x_mid, self.params[f"{p}.ln2.g"], self.params[f"{p}.ln2.b"]
            )
            m_pre = xn2 @ self.params[f"{p}.mlp1.w"] + self.params[f"{p}.mlp1.b"]
            m_act = gelu(m_pre)
            m_out = m_act @ self.params[f"{p}.mlp2.w"] + self.params[f"{p}.mlp2.b"]
            x_out = x_mid + m_out
            if want_cache:
                caches.append(
                    (x, xn, ln1_cache, qh, kh, vh, probs, ctx, x_mid, xn2, ln2_cache, m_pre, m_act)
                )
            x = x_out

        hidden, lnf_cache = _layer_norm(x, self.params["ln_f.g"], self.params["ln_f.b"])
        if want_cache:
            return hidden, (caches, x, lnf_cache)
        return hidden

    def _backward(self, dhidden, cache, grads):
        cfg = self.cfg
        caches, x_last, lnf_cache = cache
        dx, dg, db = _layer_norm_backward(dhidden, lnf_cache, self.params["ln_f.g"])
        grads["ln_f.g"] += dg
        grads["ln_f.b"] += db

        s = dx.shape[0]
        h = cfg.heads
        dh_dim = cfg.hidden_dim // h
        scale = float(1.0 / np.sqrt(dh_dim))

        for layer in reversed(range(cfg.layers)):
            p = f"block{layer}"
            (x_in, xn, ln1_cache, qh, kh, vh, probs, ctx, x_mid, xn2, ln2_cache, m_pre, m_act) = caches[layer]

            # MLP sub-block
            dm_out = dx
            grads[f"{p}.mlp2.w"] += m_act.T @ dm_out
            grads[f"{p}.mlp2.b"] += dm_out.sum(axis=0)
            dm_act = dm_out @ self.params[f"{p}.mlp2.w"].T
            dm_pre = dm_act * gelu_grad(m_pre)
            grads[f"{p}.mlp1.w"] += xn2.T @ dm_pre
            grads[f"{p}.mlp1.b"] += dm_pre.sum(axis=0)
            dxn2 = dm_pre @ self.params[f"{p}.mlp1.w"].T
            dx_mid, dg2, db2 = _layer_norm_backward(dxn2, ln2_cache, self.params[f"{p}.ln2.g"])
            grads[f"{p}.ln2.g"] += dg2
            grads[f"{p}.ln2.b"] += db2
            dx_mid = dx_mid + dx  # residual

            # attention sub-block
            dattn_out = dx_mid
            grads[f"{p}.wo.w"] += ctx.T @ dattn_out
            grads[f"{p}.wo.b"] += dattn_out.sum(axis=0)
            dctx = np.ascontiguousarray(
                (dattn_out @ self.params[f"{p}.wo.w"].T).reshape(s, h, dh_dim).transpose(1, 0, 2)
            )
            dprobs = dctx @ vh.transpose(0, 2, 1)
            dvh = probs.transpose(0, 2, 1) @ dctx
            # softmax backward in place: datt = (dprobs - rowsum(dprobs * probs)) * probs
            dprobs -= np.einsum("hij,hij->hi", dprobs, probs)[:, :, None]
            dprobs *= probs
            datt = dprobs
            dqh = datt @ kh * scale
            dkh = np.ascontiguousarray(datt.transpose(0, 2, 1)) @ qh * scale
            dq = dqh.transpose(1, 0, 2).reshape(s, cfg.hidden_dim)
            dk = dkh.transpose(1, 0, 2).reshape(s, cfg.hidden_dim)
            dv = dvh.transpose(1, 0, 2).reshape(s, cfg.hidden_dim)
            grads[f"{p}.wq.w"] += xn.T @ dq
            grads[f"{p}.wq.b"] += dq.sum(axis=0)
            grads[f"{p}.wk.w"] += xn.T @ dk
            grads[f"{p}.wk.b"] += dk.sum(axis=0)
            grads[f"{p}.wv.w"] += xn.T @ dv
            grads[f"{p}.wv.b"] += dv.sum(axis=0)
            dxn = dq @ self.params[f"{p}.wq.w"].T + dk @ self.params[f"{p}.wk.w"].T + dv @ self.params[f"{p}.wv.w"].T
            dx_in, dg1, db1 = _layer_norm_backward(dxn, ln1_cache, self.params[f"{p}.ln1.g"])
            grads[f"{p}.ln1.g"] += dg1
            grads[f"{p}.ln1.b"] += db1
            dx = dx_in + dx_mid  # residual
        return dx

    # -- training -----------------------------------------------------------------

    def sequence_predictions(self, seq_arrays: dict, cond: np.ndarray, want_cache: bool = False):
        """Teacher-forced normalized action predictions for one sequence.

        seq_arrays holds poses (T, 7), feats (T, 5, 9, F), depths (T, 5, 9) and
        actions_norm (T, 5, 6); returns predictions (T, 5, 6) and, on request,
        the forward cache needed for the backward pass. When an actions_input
        entry is present it feeds the action tokens instead (input perturbation
        for robust cloning); targets always come from actions_norm.
        """
        cfg = self.cfg
        actions_in = seq_arrays.get("actions_input", seq_arrays.get("actions_norm"))
        tokens = self.assemble_tokens(
            seq_arrays["poses"],
            seq_arrays["feats"],
            seq_arrays["depths"],
            actions_in,
            cond,
        )
        result = self.forward(tokens, want_cache=want_cache)
        hidden, cache = result if want_cache else (result, None)
        n_frames = seq_arrays["feats"].shape[0]
        pred_rows = self._prediction_rows(n_frames)
        raw = hidden[pred_rows] @ self.params["head.w"] + self.params["head.b"]
        preds = raw.reshape(n_frames, cfg.n_substeps, 6)
        if want_cache:
            return preds, (tokens, hidden, cache, pred_rows)
        return preds

    def _prediction_rows(self, n_frames: int) -> np.ndarray:
        """Token rows whose hidden states the action head reads."""
        cfg = self.cfg
        tpf = cfg.tokens_per_frame
        boa = cfg.boa_slot
        if cfg.action_tokens:
            # <BoA> predicts sub-step 0; action token k predicts sub-step k+1
            per_frame = np.arange(cfg.n_substeps) + boa
        else:
            per_frame = np.array([boa])
        bases = 1 + np.arange(n_frames) * tpf
        return (bases[:, None] + per_frame[None, :]).reshape(-1)

    def loss_and_grads(self, batch: list[dict], stats=None) -> tuple[float, dict[str, np.ndarray]]:
        """Mean L1 over all valid (frame, sub-step, component) targets, plus grads.

        The batch is a list of per-sequence dicts (see prepare_batch); frames
        with mask 0 (padding) contribute exactly zero to loss and gradients.
        Sequences are processed one at a time in list order, so gradient
        accumulation is deterministic.
        """
        if not batch:
            raise ModelError("empty batch")
        total_count = sum(int(item["mask"].sum()) for item in batch) * self.cfg.n_substeps * 6
        if total_count == 0:
            raise ModelError("batch has no valid frames")
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        total_abs = 0.0
        n_out = 6 if self.cfg.action_tokens else self.cfg.n_substeps * 6
        for item in batch:
            preds, (tokens, hidden, cache, pred_rows) = self.sequence_predictions(
                item, item["cond"], want_cache=True
            )
            diff = (preds - item["actions_norm"]) * item["mask"][:, None, None]
            total_abs += float(np.abs(diff).sum())
            dpreds = np.sign(diff) / total_count
            draw = dpreds.reshape(-1, n_out)
            dhidden = np.zeros_like(hidden)
            grads["head.w"] += hidden[pred_rows].T @ draw
            grads["head.b"] += draw.sum(axis=0)
            dhidden[pred_rows] += draw @ self.params["head.w"].T
            dtokens = self._backward(dhidden, cache, grads)
            self._token_backward(dtokens, tokens, item, grads)
        return total_abs / total_count, grads

    def _token_backward(self, dtokens, tokens: TokenSequence, item: dict, grads):
        """Propagate token gradients into embeddings, PEs, and tokenizer weights."""
        cfg = self.cfg
        d = cfg.hidden_dim
        tpf = cfg.tokens_per_frame
        n_frames = item["feats"].shape[0]

        grads["cond_pos"] += dtokens[0]
        body = dtokens[1:].reshape(n_frames, tpf, d)
        grads["pe_frame"][:n_frames] += body[:, :, : d // 2].sum(axis=1)
        grads["pe_slot"] += body[:, :, d // 2 :].sum(axis=0)

        slot = 0
        if cfg.pose_token:
            dpose_tok = body[:, 0, :]
            x = np.asarray(item["poses"], dtype=cfg.np_dtype).copy()
            x[..., :3] /= cfg.position_scale
            _, cache = _mlp3_forward(x, self.params, "pose_mlp")
            _mlp3_backward(dpose_tok, cache, self.params, grads, "pose_mlp")
            slot += 1

        dpatch = body[:, slot : slot + N_PATCHES, :]
        feats = np.asarray(item["feats"], dtype=cfg.np_dtype)
        h_pre = feats @ self.params["feat_proj.w0"] + self.params["feat_proj.b0"]
        h_act = gelu(h_pre)
        dflat = dpatch.reshape(n_frames, PATCH_ROWS, PATCH_COLS, d)
        grads["feat_proj.w1"] += h_act.reshape(-1, d).T @ dflat.reshape(-1, d)
        grads["feat_proj.b1"] += dflat.reshape(-1, d).sum(axis=0)
        dh_act = dflat @ self.params["feat_proj.w1"].T
        dh_pre = dh_act * gelu_grad(h_pre)
        grads["feat_proj.w0"] += feats.reshape(-1, cfg.feature_dim).T @ dh_pre.reshape(-1, d)
        grads["feat_proj.b0"] += dh_pre.reshape(-1, d).sum(axis=0)

        depth_in = np.log1p(np.asarray(item["depths"], dtype=cfg.np_dtype))[..., None]
        _, conv_caches = _conv_stack_forward(depth_in, self.params)
        _conv_stack_backward(dflat, conv_caches, self.params, grads)
        slot += N_PATCHES

        grads["boa"] += body[:, slot, :].sum(axis=0)
        slot += 1

        if cfg.action_tokens:
            dact = body[:, slot : slot + cfg.n_substeps, :]
            x = np.asarray(
                item.get("actions_input", item.get("actions_norm")), dtype=cfg.np_dtype
            )
            _, cache = _mlp3_forward(x, self.params, "motion_mlp")
            _mlp3_backward(dact, cache, self.params, grads, "motion_mlp")

    # -- persistence ----------------------------------------------------------------

    def save(self, path: Path, extra: dict | None = None):
        """Single-file checkpoint: JSON header + named row-major float64 tensors.

        `extra` is an optional JSON-compatible payload stored in the header
        (the train CLI uses it to carry the motion-normalization statistics).
        """
        names = sorted(self.params)
        header = {
            "config": self.cfg.to_json(),
            "tensors": [{"name": n, "shape": list(self.params[n].shape)} for n in names],
        }
        if extra:
            header["extra"] = extra
        blob = json.dumps(header, sort_keys=True).encode()
        with Path(path).open("wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for n in names:
                fh.write(np.ascontiguousarray(self.params[n], dtype=np.float64).tobytes())

    @staticmethod
    def load(path: Path) -> "DVGModel":
        model, _ = DVGModel.load_with_extra(path)
        return model

    @staticmethod
    def load_with_extra(path: Path) -> tuple["DVGModel", dict]:
        with Path(path).open("rb") as fh:
            magic = fh.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise ModelError(f"{path}: not a model checkpoint (magic {magic!r})")
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen))
            cfg = ModelConfig.from_json(header["config"])
            params = {}
            for spec in header["tensors"]:
                shape = tuple(spec["shape"])
                n_items = int(np.prod(shape)) if shape else 1
                buf = fh.read(8 * n_items)
                arr = np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()
                params[spec["name"]] = arr.astype(cfg.np_dtype)
        return DVGModel(cfg, params), header.get("extra", {})


# --- batching ---------------------------------------------------------------------------


def prepare_batch(sequences, stats, cfg: ModelConfig) -> list[dict]:
    """Per-sequence arrays with normalized actions, cond vectors, and a frame mask.

    Sequences keep their own lengths; the mask marks every real frame valid so
    padded entries (used when stacking to equal length downstream) are zeroed.
    """
    batch = []
    dt = cfg.np_dtype
    for seq in sequences:
        actions = seq.actions()
        actions_norm = (actions - stats.mean) / stats.std
        n = len(seq)
        batch.append(
            {
                "clip_id": seq.clip_id,
                "poses": seq.poses()[: cfg.max_frames].astype(dt),
                "feats": seq.features()[: cfg.max_frames].astype(dt),
                "depths": seq.depths()[: cfg.max_frames].astype(dt),
                "actions_norm": actions_norm[: cfg.max_frames].astype(dt),
                "mask": np.ones(min(n, cfg.max_frames), dtype=dt),
                "cond": sample_cond(seq.cond_seed, cfg.hidden_dim).astype(dt),
            }
        )
    return batch


class AdamOptimizer:
    """Adam with bias correction; state is part of the training run, not the checkpoint."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for k in params:
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)


def train(
    model: DVGModel,
    sequences,
    stats,
    steps: int,
    batch_size: int = 2,
    seed: int = 0,
    action_input_noise: float = 0.2,
    action_dropout: float = 0.15,
    average_tail: int = 200,
    log_every: int = 50,
    progress=None,
) -> list[float]:
    """Plain Adam training loop over shuffled mini-batches; returns per-step losses.

    Two robustness measures target the closed-loop compounding-error failure
    of behavior cloning (targets always stay exact, so the loss contract is
    untouched): `action_input_noise` perturbs the teacher-forced action tokens
    with fresh seeded Gaussian noise each draw, and `action_dropout` is the
    per-sequence probability of replacing the action-token inputs with pure
    noise so the policy must sometimes steer from observations alone. The
    final parameters are the average of the last `average_tail` steps (Polyak
    tail), which collapses late-training oscillation between policy modes.
    Everything is deterministic given the seed; 0 disables each feature.
    """
    rng = np.random.default_rng(seed)
    batch_all = prepare_batch(sequences, stats, model.cfg)
    optimizer = AdamOptimizer(model.params, lr=model.cfg.learning_rate)
    losses = []
    tail_from = max(steps - average_tail, 0) if average_tail else steps
    tail_sum: dict[str, np.ndarray] | None = None
    tail_count = 0
    for step in range(steps):
        picks = rng.choice(len(batch_all), size=min(batch_size, len(batch_all)), replace=False)
        batch = []
        for i in picks:
            item = batch_all[i]
            if model.cfg.action_tokens and (action_input_noise > 0 or action_dropout > 0):
                item = dict(item)
                noise = rng.standard_normal(item["actions_norm"].shape)
                if action_dropout > 0 and rng.random() < action_dropout:
                    item["actions_input"] = noise.astype(model.cfg.np_dtype)
                else:
                    item["actions_input"] = (
                        item["actions_norm"] + action_input_noise * noise
                    ).astype(model.cfg.np_dtype)
            batch.append(item)
        loss, grads = model.loss_and_grads(batch)
        optimizer.step(model.params, grads)
        losses.append(loss)
        if step >= tail_from:
            if tail_sum is None:
                tail_sum = {k: v.astype(np.float64).copy() for k, v in model.params.items()}
            else:
                for k, v in model.params.items():
                    tail_sum[k] += v
            tail_count += 1
        if progress and (step % log_every == 0 or step == steps - 1):
            progress(step, loss)
    if tail_sum is not None and tail_count > 1:
        for k in model.params:
            model.params[k] = (tail_sum[k] / tail_count).astype(model.cfg.np_dtype)
    return losses


def evaluate_loss(model: DVGModel, sequences, stats) -> float:
    """Teacher-forced mean L1 over a corpus (no gradient work)."""
    batch_all = prepare_batch(sequences, stats, model.cfg)
    total_abs = 0.0
    total_count = 0
    for item in batch_all:
        preds = model.sequence_predictions(item, item["cond"])
        diff = (preds - item["actions_norm"]) * item["mask"][:, None, None]
        total_abs += float(np.abs(diff).sum())
        total_count += int(item["mask"].sum()) * model.cfg.n_substeps * 6
    return total_abs / total_count


# --- incremental inference ---------------------------------------------------------------


class InferenceSession:
    """Token-by-token decoding with per-layer key/value caches.

    Produces the same hidden states as a full forward pass over the same
    tokens (identical arithmetic up to float addition order), while paying
    only for the new tokens.
    """

    def __init__(self, model: DVGModel, cond: np.ndarray):
        self.model = model
        cfg = model.cfg
        self.keys = [np.zeros((0, cfg.hidden_dim), dtype=cfg.np_dtype) for _ in range(cfg.layers)]
        self.values = [np.zeros((0, cfg.hidden_dim), dtype=cfg.np_dtype) for _ in range(cfg.layers)]
        self.n_tokens = 0
        self.n_frames = 0
        self.last_hidden: np.ndarray | None = None
        self._append_block(
            np.asarray(cond, dtype=cfg.np_dtype)[None, :] + model.params["cond_pos"][None, :]
        )

    def _append_block(self, block: np.ndarray) -> np.ndarray:
        """Run `block` (m, D) through every layer against the cache; returns hiddens."""
        model, cfg = self.model, self.model.cfg
        if self.n_tokens + block.shape[0] > cfg.max_tokens:
            raise ModelError("inference context overflow; slide the window first")
        m = block.shape[0]
        h = cfg.heads
        dh = cfg.hidden_dim // h
        scale = float(1.0 / np.sqrt(dh))
        x = block
        for layer in range(cfg.layers):
            p = f"block{layer}"
            xn, _ = _layer_norm(x, model.params[f"{p}.ln1.g"], model.params[f"{p}.ln1.b"])
            q = xn @ model.params[f"{p}.wq.w"] + model.params[f"{p}.wq.b"]
            k = xn @ model.params[f"{p}.wk.w"] + model.params[f"{p}.wk.b"]
            v = xn @ model.params[f"{p}.wv.w"] + model.params[f"{p}.wv.b"]
            k_all = np.concatenate([self.keys[layer], k], axis=0)
            v_all = np.concatenate([self.values[layer], v], axis=0)
            self.keys[layer] = k_all
            self.values[layer] = v_all
            s_all = k_all.shape[0]
            qh = q.reshape(m, h, dh).transpose(1, 0, 2)
            kh = k_all.reshape(s_all, h, dh).transpose(1, 0, 2)
            vh = v_all.reshape(s_all, h, dh).transpose(1, 0, 2)
            att = qh @ kh.transpose(0, 2, 1) * scale
            # causal mask within the new block (the cache is fully visible)
            cols = np.arange(s_all)[None, :]
            rows = (self.n_tokens + np.arange(m))[:, None]
            att = np.where(cols[None] > rows[None], -np.inf, att)
            att -= att.max(axis=-1, keepdims=True)
            probs = np.exp(att)
            probs /= probs.sum(axis=-1, keepdims=True)
            ctx = (probs @ vh).transpose(1, 0, 2).reshape(m, cfg.hidden_dim)
            x = x + ctx @ model.params[f"{p}.wo.w"] + model.params[f"{p}.wo.b"]
            xn2, _ = _layer_norm(x, model.params[f"{p}.ln2.g"], model.params[f"{p}.ln2.b"])
            m_out = (
                gelu(xn2 @ model.params[f"{p}.mlp1.w"] + model.params[f"{p}.mlp1.b"])
                @ model.params[f"{p}.mlp2.w"]
                + model.params[f"{p}.mlp2.b"]
            )
            x = x + m_out
        self.n_tokens += m
        hidden, _ = _layer_norm(x, model.params["ln_f.g"], model.params["ln_f.b"])
        self.last_hidden = hidden[-1]
        return hidden

    def _pe(self, frame: int, rows: np.ndarray, block: np.ndarray) -> np.ndarray:
        d = self.model.cfg.hidden_dim
        out = block.copy()
        out[:, : d // 2] += self.model.params["pe_frame"][frame]
        out[:, d // 2 :] += self.model.params["pe_slot"][rows]
        return out

    def append_observation(self, pose7: np.ndarray, feats: np.ndarray, depths: np.ndarray):
        """Add one frame's pose (optional), patch, and <BoA> tokens."""
        model, cfg = self.model, self.model.cfg
        if self.n_frames >= cfg.max_frames:
            raise ModelError("frame context full; slide the window first")
        parts = []
        if cfg.pose_token:
            parts.append(model.embed_pose(np.asarray(pose7)[None, :]))
        parts.append(model.embed_patches(feats[None], depths[None])[0])
        parts.append(model.params["boa"][None, :])
        block = np.concatenate(parts, axis=0)
        slots = np.arange(cfg.boa_slot + 1)
        block = self._pe(self.n_frames, slots, block)
        return self._append_block(block)

    def predict_next_action(self) -> np.ndarray:
        """Normalized prediction read from the hidden state of the last token."""
        raw = self.last_hidden @ self.model.params["head.w"] + self.model.params["head.b"]
        return raw

    def append_action(self, action_norm: np.ndarray, substep: int):
        """Commit an executed action as the next token (autoregressive feedback)."""
        cfg = self.model.cfg
        block = self.model.embed_motion(np.asarray(action_norm)[None, :])
        slots = np.array([cfg.boa_slot + 1 + substep])
        block = self._pe(self.n_frames, slots, block)
        self._append_block(block)

    def end_frame(self):
        self.n_frames += 1
