"""Per-layer conditional Gaussian diffusion.

Each hierarchy layer gets its own denoiser: the top layer models the full
subgoal sequence conditioned on normalized cumulative reward, intermediate
layers model child-subgoal sequences conditioned on their community's
structural information gain, and the base layer models state-action segments.
Conditioning uses classifier-free guidance with a learned null embedding.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, cumulative_reward
from .encoding_tree import EncodingTree, gain_table, layer_partition
from .network import EMA, Adam, Denoiser
from .segmentation import SegmentHierarchy, pad_sequence, split_to_length
from .state_graph import StateGraph
from .validation import require


@dataclass
class VarianceSchedule:
    """Forward-process noise levels beta_1..beta_K and their cumulative
    signal fractions alpha_bar_k = prod(1 - beta_j)."""

    betas: np.ndarray

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        require(np.all((self.betas > 0) & (self.betas < 1)),
                "betas must lie strictly in (0, 1)")
        self.alpha_bars = np.cumprod(1.0 - self.betas)
        require(np.all(np.diff(self.alpha_bars) < 0), "alpha_bar must strictly decrease")

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, k) -> np.ndarray:
        """alpha_bar at step k, with the k=0 identity convention."""
        k = np.asarray(k, dtype=np.int64)
        ab = np.concatenate([[1.0], self.alpha_bars])
        return ab[k]


def make_schedule(kind: str, n_steps: int) -> VarianceSchedule:
    require(n_steps >= 2, "n_steps must be >= 2")
    if kind == "linear":
        betas = np.linspace(1e-4, 2e-2, n_steps)
    elif kind == "cosine":
        s = 0.008
        ks = np.arange(n_steps + 1)
        f = np.cos((ks / n_steps + s) / (1 + s) * math.pi / 2.0) ** 2
        alpha_bar = f / f[0]
        betas = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind '{kind}'")
    return VarianceSchedule(betas=betas)


def forward_diffuse(seq, k, schedule: VarianceSchedule, noise) -> np.ndarray:
    """Closed-form forward corruption: sqrt(ab_k) x0 + sqrt(1-ab_k) eps."""
    seq = np.asarray(seq, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    require(noise.shape == seq.shape, "noise shape must match the sequence")
    ab = schedule.alpha_bar(k)
    if seq.ndim == 3:  # batched, one step index per element
        ab = np.asarray(ab).reshape(-1, 1, 1)
    return np.sqrt(ab) * seq + np.sqrt(1.0 - ab) * noise


def blended_condition(denoiser: Denoiser, y, omega: float) -> np.ndarray:
    """Condition fed to the network: (1-omega) embed(y) + omega null."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    emb = denoiser.embed_condition(y)
    return (1.0 - omega) * emb + omega * denoiser.null_embedding(len(y))


def cfg_predict(denoiser: Denoiser, noised, y, omega: float, k,
                blend: str = "input") -> np.ndarray:
    """Classifier-free guided noise prediction.

    ``blend='input'`` mixes the condition embedding with the null embedding
    before the network (the default); ``blend='output'`` mixes two separate
    noise predictions instead. ``y=None`` is fully unconditional.
    """
    require(blend in ("input", "output"), "blend must be input|output")
    batch = 1 if np.asarray(noised).ndim == 2 else np.asarray(noised).shape[0]
    if y is None:
        return denoiser.forward(noised, denoiser.null_embedding(batch), k)
    if blend == "input":
        cond = blended_condition(denoiser, np.full(batch, float(y)) if np.isscalar(y) else y,
                                 omega)
        return denoiser.forward(noised, cond, k)
    ys = np.full(batch, float(y)) if np.isscalar(y) else np.asarray(y, dtype=np.float64)
    cond_eps = denoiser.forward(noised, denoiser.embed_condition(ys), k)
    uncond_eps = denoiser.forward(noised, denoiser.null_embedding(batch), k)
    return (1.0 - omega) * cond_eps + omega * uncond_eps


def reverse_step(denoiser: Denoiser, noised, y, omega: float, k: int,
                 schedule: VarianceSchedule, rng: np.random.Generator,
                 blend: str = "input", x0_clip: float | None = None) -> np.ndarray:
    """One posterior sampling step k -> k-1.

    The mean is the standard noise-prediction posterior, computed through the
    implied clean-sequence estimate so it can be clamped (``x0_clip``) for
    stability at the nearly-pure-noise steps of short schedules. The sampling
    covariance is beta_k times the identity; the final step (k = 1) returns
    the mean without added noise.
    """
    require(1 <= k <= schedule.n_steps, f"step {k} out of range")
    noised = np.asarray(noised, dtype=np.float64)
    eps_hat = cfg_predict(denoiser, noised, y, omega, k, blend=blend)
    beta = schedule.betas[k - 1]
    ab = schedule.alpha_bars[k - 1]
    ab_prev = schedule.alpha_bars[k - 2] if k > 1 else 1.0
    x0_hat = (noised - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    if x0_clip is not None:
        x0_hat = np.clip(x0_hat, -x0_clip, x0_clip)
    mean = ((math.sqrt(ab_prev) * beta / (1.0 - ab)) * x0_hat
            + (math.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)) * noised)
    if k == 1:
        return mean
    return mean + math.sqrt(beta) * rng.standard_normal(noised.shape)


@dataclass
class Normalizer:
    """Per-channel affine normalization of sequence data."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, sequences: np.ndarray) -> "Normalizer":
        flat = sequences.reshape(-1, sequences.shape[-1])
        std = flat.std(axis=0)
        return cls(mean=flat.mean(axis=0), std=np.where(std > 1e-6, std, 1.0))

    @classmethod
    def identity(cls, channels: int) -> "Normalizer":
        return cls(mean=np.zeros(channels), std=np.ones(channels))

    def encode(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def decode(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


DEFAULT_X0_CLIP = 2.0


def sample_sequence(denoiser: Denoiser, schedule: VarianceSchedule, y,
                    omega: float, rng: np.random.Generator,
                    inpaint_mask: np.ndarray | None = None,
                    inpaint_values: np.ndarray | None = None,
                    terminal: np.ndarray | None = None,
                    terminal_cols: slice | None = None,
                    blend: str = "input",
                    normalizer: Normalizer | None = None,
                    x0_clip: float | None = DEFAULT_X0_CLIP) -> np.ndarray:
    """Full reverse rollout from pure noise, with optional inpainting.

    Inpainted values and the result live in raw data space; the rollout runs
    in the normalizer's space. Known entries (``inpaint_mask`` true) are
    re-imposed after every reverse step so committed history stays exact. If
    ``terminal`` is given, the last row's ``terminal_cols`` are replaced by it
    after denoising, pinning the sequence to its governing subgoal.
    """
    norm = normalizer or Normalizer.identity(denoiser.channels)
    x = rng.standard_normal((denoiser.seq_len, denoiser.channels))
    values = None
    if inpaint_mask is not None:
        values = norm.encode(inpaint_values)
        x = np.where(inpaint_mask, values, x)
    for k in range(schedule.n_steps, 0, -1):
        x = reverse_step(denoiser, x, y, omega, k, schedule, rng,
                         blend=blend, x0_clip=x0_clip)
        if inpaint_mask is not None:
            x = np.where(inpaint_mask, values, x)
    x = norm.decode(x)
    if terminal is not None:
        cols = terminal_cols if terminal_cols is not None else slice(None)
        x[-1, cols] = terminal
    return x


# ---------------------------------------------------------------------------
# Conditioning values
# ---------------------------------------------------------------------------

def condition_value(layer: int, n_layers: int, *, cum_reward: float | None = None,
                    r_max: float | None = None, gain: float | None = None,
                    max_gain: float | None = None) -> float:
    """Scalar condition for one sequence.

    Top layer: cumulative reward normalized by r_max into [-1, 1]. Lower
    layers: the community's structural information gain normalized by the
    largest gain at that height.
    """
    require(1 <= layer <= n_layers, "layer out of range")
    if layer == n_layers:
        require(cum_reward is not None and r_max is not None,
                "top layer conditions on cumulative reward")
        if r_max == 0:
            return 0.0
        return float(np.clip(cum_reward / r_max, -1.0, 1.0))
    require(gain is not None, "lower layers condition on structural gain")
    if not max_gain:
        return 0.0
    return float(gain / max_gain)


@dataclass
class ConditioningTables:
    """State -> community -> normalized-gain lookup used at planning time."""

    vertices: np.ndarray                      # (n, d)
    community_of: dict[int, np.ndarray]       # height -> (n,) tree node ids
    gains: dict[int, dict[int, float]]        # height -> node id -> normalized gain

    def resolve(self, height: int, state: np.ndarray):
        """(community node id, normalized gain) of the vertex nearest a state."""
        if height not in self.community_of or len(self.vertices) == 0:
            raise KeyError(f"no conditioning table for height {height}")
        d2 = ((self.vertices - state[None, :]) ** 2).sum(axis=1)
        v = int(np.argmin(d2))
        node = int(self.community_of[height][v])
        return node, self.gains[height].get(node, 0.0)


def build_conditioning_tables(graph: StateGraph, tree: EncodingTree) -> ConditioningTables:
    gains_raw = gain_table(graph, tree)
    community_of: dict[int, np.ndarray] = {}
    gains: dict[int, dict[int, float]] = {}
    for h in range(1, tree.height):
        part = layer_partition(tree, h)
        community_of[h] = part.community_of.copy()
        level = {nid: gains_raw.get(nid, 0.0) for nid in part.members}
        top = max(level.values()) if level else 0.0
        gains[h] = {nid: (v / top if top > 0 else 0.0) for nid, v in level.items()}
    return ConditioningTables(vertices=graph.vertices.copy(),
                              community_of=community_of, gains=gains)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def training_loss(denoiser: Denoiser, noised, true_eps, ys, ks, omega: float,
                  uncond_mask=None, sample_weights=None,
                  entropy_bonus: float = 0.0, eta: float = 0.0):
    """Weighted noise-prediction MSE and its parameter gradients.

    ``uncond_mask`` marks elements trained with the pure null embedding (the
    unconditional branch); others use the guidance blend. The exploration
    regularizer enters the reported loss as -eta * entropy_bonus; its gradient
    pathway is the per-sample weighting supplied by the caller.
    """
    noised = np.asarray(noised, dtype=np.float64)
    true_eps = np.asarray(true_eps, dtype=np.float64)
    require(noised.shape == true_eps.shape, "noise target shape mismatch")
    if noised.ndim == 2:
        noised = noised[None]
        true_eps = true_eps[None]
    batch = noised.shape[0]
    ys = np.atleast_1d(np.asarray(ys, dtype=np.float64))
    uncond = (np.zeros(batch, dtype=bool) if uncond_mask is None
              else np.asarray(uncond_mask, dtype=bool))
    weights = (np.ones(batch) if sample_weights is None
               else np.asarray(sample_weights, dtype=np.float64))

    cond = blended_condition(denoiser, ys, omega)
    cond[uncond] = denoiser.null_embedding(int(uncond.sum()))
    eps_hat, cache = denoiser.forward(noised, cond, ks, cache=True)

    diff = eps_hat - true_eps
    per_elem = weights[:, None, None] / (batch * denoiser.flat_dim)
    mse = float((weights * (diff ** 2).reshape(batch, -1).mean(axis=1)).sum() / batch)
    loss = mse - eta * entropy_bonus

    dout = 2.0 * per_elem * diff
    grads, dcond = denoiser.backward(cache, dout)
    # Route the condition gradient into the embedding parameters.
    dblend = np.where(uncond[:, None], 0.0, dcond)
    grads["cond_w"] = ((1.0 - omega) * dblend * ys[:, None]).sum(axis=0)
    grads["cond_b"] = ((1.0 - omega) * dblend).sum(axis=0)
    grads["null"] = (omega * dblend).sum(axis=0) + dcond[uncond].sum(axis=0)
    return loss, grads


@dataclass
class TrainConfig:
    n_steps: int = 3000
    batch_size: int = 32
    learning_rate: float = 2e-3
    ema_decay: float = 0.995
    p_uncond: float = 0.25
    guidance_weight: float = 0.1
    explore_coef: float = 0.0
    refresh_every: int = 50
    kde_rollouts: int = 64
    hidden: int = 192
    blend: str = "input"


@dataclass
class DiffusionStack:
    """One denoiser per hierarchy layer plus everything planning needs."""

    denoisers: dict[int, Denoiser]
    schedule: VarianceSchedule
    guidance_weight: float
    explore_coef: float
    pad_lengths: dict[int, int]
    state_dim: int
    action_dim: int
    r_max: float
    tables: ConditioningTables
    blend: str = "input"
    ema_params: dict[int, dict] = field(default_factory=dict)
    normalizers: dict[int, Normalizer] = field(default_factory=dict)
    trained: bool = False

    @property
    def n_layers(self) -> int:
        return max(self.denoisers)

    def use_ema(self):
        """Swap EMA shadows into the live networks (returns self)."""
        for layer, shadow in self.ema_params.items():
            self.denoisers[layer].params = {k: v.copy() for k, v in shadow.items()}
        return self


def build_stack(dataset: Dataset, tree: EncodingTree, graph: StateGraph,
                schedule: VarianceSchedule, pad_length: int = 8,
                guidance_weight: float = 0.1, explore_coef: float = 0.0,
                hidden: int = 192, blend: str = "input",
                rng: np.random.Generator | None = None) -> DiffusionStack:
    rng = rng if rng is not None else np.random.default_rng(0)
    d, m = dataset.state_dim, dataset.action_dim
    n_layers = tree.height
    denoisers = {}
    pads = {}
    for h in range(1, n_layers + 1):
        channels = d + m if h == 1 else d
        denoisers[h] = Denoiser(layer=h, seq_len=pad_length, channels=channels,
                                hidden=hidden, rng=rng)
        pads[h] = pad_length
    return DiffusionStack(denoisers=denoisers, schedule=schedule,
                          guidance_weight=guidance_weight, explore_coef=explore_coef,
                          pad_lengths=pads, state_dim=d, action_dim=m,
                          r_max=dataset.r_max,
                          tables=build_conditioning_tables(graph, tree),
                          blend=blend)


def fit_normalizers(stack: DiffusionStack,
                    data: dict[int, tuple[np.ndarray, np.ndarray]]):
    for h, (x0, _) in data.items():
        stack.normalizers[h] = Normalizer.fit(x0)


def collect_training_sequences(dataset: Dataset, stack: DiffusionStack,
                               hierarchies: list[SegmentHierarchy]):
    """Padded per-layer sequences and their scalar conditions.

    Sequences longer than the pad length are split into consecutive chunks
    rather than truncated.
    """
    require(len(hierarchies) == len(dataset.trajectories), "one hierarchy per trajectory")
    n_layers = stack.n_layers
    per_layer: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for h in range(1, n_layers + 1):
        xs, ys = [], []
        pad = stack.pad_lengths[h]
        for traj, hier in zip(dataset.trajectories, hierarchies):
            require(hier.n_layers == n_layers, "hierarchy depth mismatch")
            if h == n_layers:
                y = condition_value(h, n_layers, cum_reward=cumulative_reward(traj),
                                    r_max=stack.r_max)
            for seq, community in hier.child_sequences(h):
                if h < n_layers:
                    node_gains = stack.tables.gains.get(h, {})
                    y = node_gains.get(community, 0.0)
                for chunk in split_to_length(seq, pad):
                    padded, _ = pad_sequence(chunk, pad)
                    xs.append(padded)
                    ys.append(y)
        require(len(xs) > 0, f"no training sequences for layer {h}")
        per_layer[h] = (np.stack(xs), np.asarray(ys, dtype=np.float64))
    return per_layer


def train(stack: DiffusionStack, dataset: Dataset, tree: EncodingTree,
          hierarchies: list[SegmentHierarchy], config: TrainConfig,
          seed: int = 0):
    """Train every layer's denoiser with Adam and an EMA shadow.

    The unconditional branch is learned by substituting the null embedding
    with probability ``p_uncond`` per element. With ``explore_coef > 0`` the
    base layer periodically refreshes a transition model from its own
    rollouts and reweights sample losses toward under-visited states.

    Returns (stack, traces) where traces maps layer -> per-step loss list;
    the base layer additionally records a state-entropy trace.
    """
    from .transitions import estimate_transitions, entropy_terms

    data = collect_training_sequences(dataset, stack, hierarchies)
    fit_normalizers(stack, data)
    traces: dict = {"loss": {}, "state_entropy": []}
    root = np.random.SeedSequence(seed)
    layer_seeds = root.spawn(stack.n_layers)

    for h in range(1, stack.n_layers + 1):
        rng = np.random.default_rng(layer_seeds[h - 1])
        net = stack.denoisers[h]
        raw, ys = data[h]
        x0 = stack.normalizers[h].encode(raw)
        n = len(x0)
        adam = Adam(net.params, lr=config.learning_rate)
        ema = EMA(net.params, decay=config.ema_decay)
        losses = []
        model = None
        bonus = 0.0
        exploring = h == 1 and config.explore_coef > 0

        for step in range(config.n_steps):
            if exploring and step % config.refresh_every == 0:
                net.trained = True  # rollouts sample the partially trained net
                model = estimate_transitions(net, stack.schedule,
                                             config.kde_rollouts, rng,
                                             stack.tables.vertices, stack.state_dim,
                                             normalizer=stack.normalizers[h])
                h_state, layer_ents, etas = entropy_terms(model, tree)
                bonus = h_state - sum(etas[j] * layer_ents[j] for j in etas)
                traces["state_entropy"].append(h_state)

            idx = rng.integers(0, n, size=config.batch_size)
            ks = rng.integers(1, stack.schedule.n_steps + 1, size=config.batch_size)
            eps = rng.standard_normal(x0[idx].shape)
            noised = forward_diffuse(x0[idx], ks, stack.schedule, eps)
            uncond = rng.random(config.batch_size) < config.p_uncond

            weights = None
            if exploring and model is not None:
                weights = _exploration_weights(model, raw[idx], stack.state_dim,
                                               config.explore_coef)
            loss, grads = training_loss(net, noised, eps, ys[idx], ks,
                                        config.guidance_weight,
                                        uncond_mask=uncond, sample_weights=weights,
                                        entropy_bonus=bonus, eta=config.explore_coef)
            adam.step(net.params, grads)
            ema.update(net.params)
            losses.append(loss)

        net.trained = True
        stack.ema_params[h] = ema.shadow
        traces["loss"][h] = losses

    stack.trained = True
    return stack, traces


def _exploration_weights(model, x0_batch: np.ndarray, state_dim: int,
                         eta: float) -> np.ndarray:
    """Sample weights favoring sequences through under-visited states.

    Each sequence is scored by the mean visitation log-density of its states;
    weights are 1 - eta * (score - batch mean), clipped to stay positive, so
    over-visited sequences contribute less to the denoising loss.
    """
    flat = x0_batch[:, :, :state_dim].reshape(-1, state_dim)
    logp = model.visitation_logpdf(flat).reshape(len(x0_batch), -1).mean(axis=1)
    dev = logp - logp.mean()
    return np.clip(1.0 - eta * dev, 0.1, None)
