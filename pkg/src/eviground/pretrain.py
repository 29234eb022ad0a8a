"""Alignment-stage objectives: symmetric image-text contrastive loss,
reconstruction losses, and the EMA momentum update, plus a small driver
that trains linear encoders/decoders over cohort volumes and record text."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimMismatchError, ValidationError
from .losses import LossWithGrad, mse_loss, softmax, token_nll
from .textenc import token_bucket, tokenize


def itc_loss(
    img_feats: np.ndarray,
    txt_feats: np.ndarray,
    tau: float = 0.07,
    extra_img: np.ndarray | None = None,
    extra_txt: np.ndarray | None = None,
) -> LossWithGrad:
    """Mean of image->text and text->image cross-entropies over the pairwise
    similarity matrix, diagonal pairs as targets.

    Rows are expected unit-normalized; similarities are plain dot products.
    Optional extra rows (e.g. momentum features) join as negatives only.
    """
    f_i = np.asarray(img_feats, dtype=np.float64)
    f_t = np.asarray(txt_feats, dtype=np.float64)
    if f_i.shape != f_t.shape:
        raise DimMismatchError(f"batch shapes differ: {f_i.shape} vs {f_t.shape}")
    b = f_i.shape[0]
    if b < 2:
        raise ValidationError("need batch size >= 2")

    cand_t = f_t if extra_txt is None else np.vstack([f_t, extra_txt])
    cand_i = f_i if extra_img is None else np.vstack([f_i, extra_img])
    s_i2t = f_i @ cand_t.T / tau  # (b, b + extra)
    s_t2i = f_t @ cand_i.T / tau

    p_i2t = softmax(s_i2t)
    p_t2i = softmax(s_t2i)
    idx = np.arange(b)
    value = float(
        0.5 * (-np.mean(np.log(p_i2t[idx, idx])) - np.mean(np.log(p_t2i[idx, idx])))
    )

    d_i2t = p_i2t.copy()
    d_i2t[idx, idx] -= 1.0
    d_i2t /= 2.0 * b * tau
    d_t2i = p_t2i.copy()
    d_t2i[idx, idx] -= 1.0
    d_t2i /= 2.0 * b * tau

    # image rows get i2t query grads plus t2i candidate grads (first b columns)
    grad_img = d_i2t @ cand_t + d_t2i[:, :b].T @ f_t
    grad_txt = d_t2i @ cand_i + d_i2t[:, :b].T @ f_i
    return LossWithGrad(value, {"img_feats": grad_img, "txt_feats": grad_txt})


def reconstruction_losses(
    x_v: np.ndarray,
    x_v_hat: np.ndarray,
    token_targets: np.ndarray,
    txt_logits: np.ndarray,
) -> tuple[LossWithGrad, LossWithGrad]:
    """(pixel MSE, token cross-entropy) pair; the combined stage objective
    l_itc + lambda_res * (sum of these) is assembled by the caller."""
    res_v = mse_loss(x_v, x_v_hat)
    probs = softmax(txt_logits)
    nll = token_nll(probs, token_targets)
    dprobs = nll.grads["probs"]
    dlogits = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
    res_t = LossWithGrad(nll.value, {"txt_logits": dlogits})
    return res_v, res_t


@dataclass
class EmaState:
    online: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    m: float = 0.995

    def __post_init__(self):
        if not 0.0 <= self.m < 1.0:
            raise ValidationError("momentum coefficient must be in [0, 1)")
        for key, value in self.online.items():
            if self.momentum[key].shape != value.shape:
                raise DimMismatchError(f"momentum copy of {key} has wrong shape")


def ema_update(state: EmaState) -> EmaState:
    """momentum <- m * momentum + (1 - m) * online, elementwise."""
    for key, online in state.online.items():
        state.momentum[key] = state.m * state.momentum[key] + (1.0 - state.m) * online
    return state


@dataclass
class PretrainConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 0.05
    tau: float = 0.07
    lambda_res: float = 0.5
    ema_momentum: float = 0.995
    use_momentum_negatives: bool = False
    max_text_tokens: int = 24
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 2:
            raise ValidationError("steps >= 1 and batch_size >= 2 required")
        if self.lambda_res < 0 or self.tau <= 0:
            raise ValidationError("lambda_res >= 0 and tau > 0 required")


def _normalize_rows(x: np.ndarray):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / norms, norms


def _backprop_normalize(d_unit: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    inner = np.sum(unit * d_unit, axis=1, keepdims=True)
    return (d_unit - inner * unit) / norms


@dataclass
class PretrainData:
    """Pooled image features, hashed text features, and token targets."""

    img_pooled: np.ndarray  # (n, n_patches)
    volumes: np.ndarray  # (n, dim, dim, dim)
    txt_feats: np.ndarray  # (n, base_dim)
    token_ids: list[np.ndarray]  # per-sample hashed token targets
    vocab: int


def pretrain_data_from_cohort(cohort, split: str = "train", cfg: PretrainConfig | None = None) -> PretrainData:
    from .segdecoder import patchify
    from .textenc import Embedder

    cfg = cfg or PretrainConfig()
    helper = Embedder()
    ids = cohort.split[split]
    volumes = np.stack([cohort.volume(pid) for pid in ids])
    patch = 4
    img_pooled = np.stack([patchify(v, patch).mean(axis=1) for v in volumes])
    texts = [
        " ".join(e.descriptor for e in cohort.records[pid].evidence) for pid in ids
    ]
    txt_feats = helper.features_of_texts(texts)
    token_ids = [
        np.array(
            [token_bucket(t, helper.vocab_hash_dim) for t in tokenize(text)][: cfg.max_text_tokens]
        )
        for text in texts
    ]
    return PretrainData(img_pooled, volumes, txt_feats, token_ids, helper.vocab_hash_dim)


def run_pretrain(data: PretrainData, cfg: PretrainConfig) -> list[dict]:
    """Train linear encoders with ITC plus reconstruction; returns step logs.

    Momentum copies of both encoders are maintained by EMA; when enabled
    they contribute extra in-batch negatives to the contrastive loss.
    """
    rng = np.random.default_rng(cfg.seed)
    n, img_dim = data.img_pooled.shape
    txt_dim = data.txt_feats.shape[1]
    d = 32
    vol_flat = data.volumes.reshape(n, -1)

    params = {
        "img_enc": rng.normal(0, 1 / np.sqrt(img_dim), (img_dim, d)),
        "txt_enc": rng.normal(0, 1 / np.sqrt(txt_dim), (txt_dim, d)),
        "img_dec": rng.normal(0, 0.01, (d, vol_flat.shape[1])),
        "img_dec_b": np.zeros(vol_flat.shape[1]),
        "txt_dec": rng.normal(0, 0.01, (d, data.vocab)),
        "txt_dec_b": np.zeros(data.vocab),
    }
    ema = EmaState(
        online={"img_enc": params["img_enc"], "txt_enc": params["txt_enc"]},
        momentum={"img_enc": params["img_enc"].copy(), "txt_enc": params["txt_enc"].copy()},
        m=cfg.ema_momentum,
    )

    history = []
    for step in range(cfg.steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        img_in = data.img_pooled[idx]
        txt_in = data.txt_feats[idx]

        img_u = img_in @ params["img_enc"]
        txt_u = txt_in @ params["txt_enc"]
        img_f, img_norms = _normalize_rows(img_u)
        txt_f, txt_norms = _normalize_rows(txt_u)

        extra_img = extra_txt = None
        if cfg.use_momentum_negatives:
            extra_img = _normalize_rows(img_in @ ema.momentum["img_enc"])[0]
            extra_txt = _normalize_rows(txt_in @ ema.momentum["txt_enc"])[0]
        itc = itc_loss(img_f, txt_f, cfg.tau, extra_img=extra_img, extra_txt=extra_txt)

        grads = {k: np.zeros_like(v) for k, v in params.items()}
        d_img_f = itc.grads["img_feats"].copy()
        d_txt_f = itc.grads["txt_feats"].copy()

        # reconstruction branches read the normalized features
        x_hat = img_f @ params["img_dec"] + params["img_dec_b"]
        res_v_val, res_t_val = 0.0, 0.0
        if cfg.lambda_res > 0:
            step_losses_v = []
            step_losses_t = []
            for row, sample_idx in enumerate(idx):
                targets = data.token_ids[sample_idx]
                logits_row = txt_f[row] @ params["txt_dec"] + params["txt_dec_b"]
                txt_logits = np.tile(logits_row, (len(targets), 1))
                res_v, res_t = reconstruction_losses(
                    vol_flat[sample_idx], x_hat[row], targets, txt_logits
                )
                step_losses_v.append(res_v.value)
                step_losses_t.append(res_t.value)
                scale = cfg.lambda_res / len(idx)
                dxhat = scale * res_v.grads["x_hat"]
                grads["img_dec"] += np.outer(img_f[row], dxhat)
                grads["img_dec_b"] += dxhat
                d_img_f[row] += dxhat @ params["img_dec"].T
                dlogits = scale * res_t.grads["txt_logits"].sum(axis=0)
                grads["txt_dec"] += np.outer(txt_f[row], dlogits)
                grads["txt_dec_b"] += dlogits
                d_txt_f[row] += dlogits @ params["txt_dec"].T
            res_v_val = float(np.mean(step_losses_v))
            res_t_val = float(np.mean(step_losses_t))

        d_img_u = _backprop_normalize(d_img_f, img_f, img_norms)
        d_txt_u = _backprop_normalize(d_txt_f, txt_f, txt_norms)
        grads["img_enc"] += img_in.T @ d_img_u
        grads["txt_enc"] += txt_in.T @ d_txt_u

        for key, grad in grads.items():
            params[key] -= cfg.lr * grad
        ema_update(ema)

        history.append(
            {
                "step": step,
                "l_itc": itc.value,
                "l_res_v": res_v_val,
                "l_res_t": res_t_val,
                "l_pt": itc.value + cfg.lambda_res * (res_v_val + res_t_val),
            }
        )
    return history
