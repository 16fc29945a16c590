"""Fully-connected noise-prediction network with hand-rolled backprop.

Small enough to train on a laptop CPU in seconds, deterministic given a
seeded generator, and simple enough to verify every gradient against central
finite differences.
"""

from __future__ import annotations

import numpy as np

from .validation import require


def sinusoidal_embedding(steps, dim: int) -> np.ndarray:
    """Classic sin/cos positional features of the diffusion step index."""
    steps = np.atleast_1d(np.asarray(steps, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = steps[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class Denoiser:
    """3-layer MLP over flattened sequences, with a learned scalar
    condition embedding and a learned null-condition embedding.

    Input: [flattened noised sequence | condition embedding | step embedding].
    Output: predicted noise, same shape as the sequence.
    """

    def __init__(self, layer: int, seq_len: int, channels: int,
                 hidden: int = 128, cond_dim: int = 16, step_dim: int = 16,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.layer = layer
        self.seq_len = seq_len
        self.channels = channels
        self.cond_dim = cond_dim
        self.step_dim = step_dim
        self.flat_dim = seq_len * channels
        in_dim = self.flat_dim + cond_dim + step_dim

        def glorot(fan_in, fan_out):
            scale = np.sqrt(2.0 / (fan_in + fan_out))
            return rng.standard_normal((fan_in, fan_out)) * scale

        self.params = {
            "W1": glorot(in_dim, hidden),
            "b1": np.zeros(hidden),
            "W2": glorot(hidden, hidden),
            "b2": np.zeros(hidden),
            "W3": glorot(hidden, self.flat_dim),
            "b3": np.zeros(self.flat_dim),
            "cond_w": rng.standard_normal(cond_dim) * 0.1,
            "cond_b": np.zeros(cond_dim),
            "null": rng.standard_normal(cond_dim) * 0.1,
        }
        self.trained = False

    # -- bookkeeping ---------------------------------------------------------

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def param_names(self):
        return sorted(self.params)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in self.param_names()])

    def set_flat(self, vec: np.ndarray):
        off = 0
        for name in self.param_names():
            size = self.params[name].size
            self.params[name] = vec[off:off + size].reshape(self.params[name].shape).copy()
            off += size
        require(off == vec.size, "flat parameter vector has the wrong length")

    def clone_params(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    # -- forward/backward ----------------------------------------------------

    def embed_condition(self, y) -> np.ndarray:
        """Learned embedding of the scalar condition: cond_w * y + cond_b."""
        y = np.atleast_1d(np.asarray(y, dtype=np.float64))
        return y[:, None] * self.params["cond_w"][None, :] + self.params["cond_b"][None, :]

    def null_embedding(self, batch: int) -> np.ndarray:
        return np.repeat(self.params["null"][None, :], batch, axis=0)

    def _flatten(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        require(x.shape[1:] == (self.seq_len, self.channels),
                f"sequence shape {x.shape[1:]} != ({self.seq_len}, {self.channels})")
        return x.reshape(x.shape[0], self.flat_dim)

    def forward(self, x, cond_emb: np.ndarray, k, cache: bool = False):
        """Predict noise for a batch. ``cond_emb`` is the already-blended
        condition embedding; ``k`` the integer diffusion steps."""
        squeeze = np.asarray(x).ndim == 2
        flat = self._flatten(x)
        batch = flat.shape[0]
        cond_emb = np.atleast_2d(cond_emb)
        require(cond_emb.shape == (batch, self.cond_dim), "condition embedding shape mismatch")
        step = sinusoidal_embedding(k, self.step_dim)
        if step.shape[0] == 1 and batch > 1:
            step = np.repeat(step, batch, axis=0)
        z = np.concatenate([flat, cond_emb, step], axis=1)

        p = self.params
        a1 = z @ p["W1"] + p["b1"]
        h1 = np.maximum(a1, 0.0)
        a2 = h1 @ p["W2"] + p["b2"]
        h2 = np.maximum(a2, 0.0)
        out = h2 @ p["W3"] + p["b3"]
        eps = out.reshape(batch, self.seq_len, self.channels)
        if squeeze:
            eps = eps[0]
        if cache:
            return eps, {"z": z, "a1": a1, "h1": h1, "a2": a2, "h2": h2}
        return eps

    def backward(self, cache: dict, dout: np.ndarray):
        """Gradients of a scalar loss given d(loss)/d(output).

        Returns (grads, dcond) where dcond is the gradient w.r.t. the blended
        condition embedding, for the caller to route into cond_w/cond_b/null.
        """
        p = self.params
        batch = cache["z"].shape[0]
        dflat = np.asarray(dout, dtype=np.float64).reshape(batch, self.flat_dim)

        grads = {}
        grads["W3"] = cache["h2"].T @ dflat
        grads["b3"] = dflat.sum(axis=0)
        dh2 = dflat @ p["W3"].T
        da2 = dh2 * (cache["a2"] > 0)
        grads["W2"] = cache["h1"].T @ da2
        grads["b2"] = da2.sum(axis=0)
        dh1 = da2 @ p["W2"].T
        da1 = dh1 * (cache["a1"] > 0)
        grads["W1"] = cache["z"].T @ da1
        grads["b1"] = da1.sum(axis=0)
        dz = da1 @ p["W1"].T
        dcond = dz[:, self.flat_dim:self.flat_dim + self.cond_dim]
        return grads, dcond


class Adam:
    """Textbook Adam on a parameter dict."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / b1c
            v_hat = self.v[name] / b2c
            params[name] = params[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class EMA:
    """Exponential moving average of parameters for stable inference."""

    def __init__(self, params: dict, decay: float = 0.995):
        self.decay = decay
        self.shadow = {k: v.copy() for k, v in params.items()}

    def update(self, params: dict):
        d = self.decay
        for name, value in params.items():
            self.shadow[name] = d * self.shadow[name] + (1 - d) * value
