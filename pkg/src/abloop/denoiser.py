"""The three-headed denoising network, its training loop, and persistence.

The network is an invariant message-passing transformer over pairwise
distances, frame-relative directions, and relative orientations. Type
logits are rigid-motion invariant by construction; position and
orientation outputs are made equivariant by reading them out in each
residue's current local frame. Everything runs in float64 on CPU.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .constants import N_TYPES, REGIONS
from .diffusion import (
    LossBreakdown,
    NoiseSchedule,
    NoisedComplex,
    noise_complex_pair,
    type_posterior_many,
)
from .errors import (
    CorruptFile,
    NonFiniteActivation,
    NonFiniteGradient,
    ShapeMismatch,
    VersionMismatch,
)
from .structio import Complex, extract_patch

# The embedding table reserves a 21st token; mask residues embed their
# current noised type s_t (the network input is the noised complex, never
# the clean one) and carry an explicit design-mask flag embedding.
UNK_TOKEN = N_TYPES
PARAMS_MAGIC = "ABLOOP-PARAMS v1"
PARAMS_SCHEMA = 1


@dataclass(frozen=True)
class DenoiserConfig:
    d: int = 64
    n_blocks: int = 4
    t_max: int = 100
    n_rbf: int = 16
    d_edge: int = 32
    seq_clip: int = 8


@dataclass(frozen=True)
class DenoiserOutput:
    """Per-mask-residue predictions in global coordinates."""

    type_probs: np.ndarray   # (m, 20)
    pos_mean: np.ndarray     # (m, 3), angstroms
    orient_pred: np.ndarray  # (m, 3, 3)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    learning_rate: float = 1e-4
    batch_size: int = 8
    lambdas: tuple = (10.0, 1.0, 1.0)
    patch_size: int = 128
    seed: int = 0
    checkpoint_interval: int = 1000
    log_interval: int = 25


def _gram_schmidt_6d(v: torch.Tensor) -> torch.Tensor:
    """Map (..., 6) to rotation matrices with columns from two GS vectors."""
    a1, a2 = v[..., :3], v[..., 3:]
    b1 = a1 / (a1.norm(dim=-1, keepdim=True) + 1e-12)
    a2p = a2 - (b1 * a2).sum(dim=-1, keepdim=True) * b1
    b2 = a2p / (a2p.norm(dim=-1, keepdim=True) + 1e-12)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1)


class _Block(nn.Module):
    """Pre-norm attention over residues with edge-conditioned logits."""

    def __init__(self, d: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)
        self.out = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, 2 * d), nn.SiLU(), nn.Linear(2 * d, d))
        self.scale = d ** -0.5

    def forward(self, h, edge_val, edge_bias, pad_mask):
        x = self.norm1(h)
        logits = torch.einsum("bid,bjd->bij", self.q(x), self.k(x)) * self.scale
        logits = logits + edge_bias
        logits = logits.masked_fill(~pad_mask[:, None, :], -1e30)
        attn = torch.softmax(logits, dim=-1)
        msg = torch.einsum("bij,bjd->bid", attn, self.v(x))
        msg = msg + torch.einsum("bij,bijd->bid", attn, edge_val)
        h = h + self.out(msg)
        h = h + self.ffn(self.norm2(h))
        return h


class Denoiser(nn.Module):
    """Three-headed denoiser: type logits, local position offsets, and
    local orientation corrections for the mask residues."""

    def __init__(self, config: DenoiserConfig, init_seed: int = 0):
        super().__init__()
        self.config = config
        d = config.d
        n_edge_feat = config.n_rbf + 3 + 9 + (2 * config.seq_clip + 1) + 1
        with torch.random.fork_rng():
            torch.manual_seed(init_seed)
            self.type_emb = nn.Embedding(N_TYPES + 1, d)
            self.region_emb = nn.Embedding(len(REGIONS), d)
            self.mask_emb = nn.Embedding(2, d)
            self.time_emb = nn.Embedding(config.t_max + 1, d)
            self.edge_net = nn.Sequential(
                nn.Linear(n_edge_feat, config.d_edge), nn.SiLU(),
                nn.Linear(config.d_edge, config.d_edge))
            self.edge_val = nn.Linear(config.d_edge, d)
            self.edge_bias = nn.Linear(config.d_edge, config.n_blocks)
            self.blocks = nn.ModuleList(_Block(d) for _ in range(config.n_blocks))
            self.head_norm = nn.LayerNorm(d)
            self.type_head = nn.Linear(d, N_TYPES)
            self.pos_head = nn.Linear(d, 3)
            self.orient_head = nn.Linear(d, 6)
            # start the geometry heads at the identity update
            with torch.no_grad():
                self.pos_head.weight.mul_(0.01)
                self.pos_head.bias.zero_()
                self.orient_head.weight.mul_(0.01)
                self.orient_head.bias.copy_(
                    torch.tensor([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]))
        self.double()

    @property
    def rbf_centers(self) -> torch.Tensor:
        return torch.linspace(0.0, 24.0, self.config.n_rbf, dtype=torch.float64)


def build_batch(noised_list: list[NoisedComplex]) -> dict:
    """Pad a list of noised complexes into dense tensors.

    Chain codes are ranks of the chain id among the sorted unique ids so
    that results do not depend on residue storage order.
    """
    sizes = [nc.complex.n for nc in noised_list]
    n_max = max(sizes)
    b = len(noised_list)
    types = torch.zeros((b, n_max), dtype=torch.long)
    regions = torch.zeros((b, n_max), dtype=torch.long)
    seq_idx = torch.zeros((b, n_max), dtype=torch.long)
    chain = torch.zeros((b, n_max), dtype=torch.long)
    pos = torch.zeros((b, n_max, 3), dtype=torch.float64)
    orients = torch.zeros((b, n_max, 3, 3), dtype=torch.float64)
    orients[:, :] = torch.eye(3, dtype=torch.float64)
    pad_mask = torch.zeros((b, n_max), dtype=torch.bool)
    design_mask = torch.zeros((b, n_max), dtype=torch.bool)
    t_idx = torch.zeros((b,), dtype=torch.long)
    scales = torch.ones((b,), dtype=torch.float64)
    for i, nc in enumerate(noised_list):
        c = nc.complex
        n = c.n
        types[i, :n] = torch.tensor(np.asarray(c.res_types), dtype=torch.long)
        regions[i, :n] = torch.from_numpy(np.asarray(c.regions)).long()
        seq_idx[i, :n] = torch.from_numpy(np.asarray(c.seq_index)).long()
        order = {cid: k for k, cid in enumerate(sorted(set(c.chain_ids)))}
        chain[i, :n] = torch.tensor([order[cid] for cid in c.chain_ids])
        pos[i, :n] = torch.from_numpy(c.ca_pos)
        orients[i, :n] = torch.from_numpy(c.orients)
        pad_mask[i, :n] = True
        design_mask[i, torch.from_numpy(c.mask_indices)] = True
        t_idx[i] = nc.t
        scales[i] = nc.whitening.scale
    return {
        "types": types, "regions": regions, "seq_idx": seq_idx, "chain": chain,
        "pos": pos, "orients": orients, "pad_mask": pad_mask,
        "design_mask": design_mask, "t": t_idx, "scale": scales,
        "sizes": sizes,
    }


def _edge_features(model: Denoiser, batch: dict) -> torch.Tensor:
    pos = batch["pos"]
    orients = batch["orients"]
    cfg = model.config
    dvec = pos[:, None, :, :] - pos[:, :, None, :]          # (b, i, j, 3)
    dist = dvec.norm(dim=-1)
    width = 24.0 / cfg.n_rbf
    rbf = torch.exp(-((dist[..., None] - model.rbf_centers) / width) ** 2)
    local = torch.einsum("bixk,bijx->bijk", orients, dvec)
    local = local / (dist[..., None] + 1e-8)
    rel = torch.einsum("bixy,bjxz->bijyz", orients, orients)
    rel = rel.reshape(*rel.shape[:3], 9)
    same = (batch["chain"][:, :, None] == batch["chain"][:, None, :])
    off = (batch["seq_idx"][:, None, :] - batch["seq_idx"][:, :, None])
    off = torch.clamp(off, -cfg.seq_clip, cfg.seq_clip) + cfg.seq_clip
    off_1h = torch.nn.functional.one_hot(off, 2 * cfg.seq_clip + 1).double()
    off_1h = off_1h * same[..., None]
    return torch.cat([rbf, local, rel, off_1h, same[..., None].double()], dim=-1)


def forward_batch_torch(model: Denoiser, batch: dict) -> dict:
    """Run the network; returns padded head outputs as torch tensors."""
    h = (model.type_emb(batch["types"])
         + model.region_emb(batch["regions"])
         + model.mask_emb(batch["design_mask"].long())
         + model.time_emb(batch["t"])[:, None, :])
    edges = _edge_features(model, batch)
    e = model.edge_net(edges)
    edge_val = model.edge_val(e)
    edge_bias = model.edge_bias(e)
    for i, block in enumerate(model.blocks):
        h = block(h, edge_val, edge_bias[..., i], batch["pad_mask"])
    h = model.head_norm(h)
    logits = model.type_head(h)
    probs = torch.softmax(logits, dim=-1)
    delta = model.pos_head(h) * batch["scale"][:, None, None]
    pos_mean = batch["pos"] + torch.einsum("bnxy,bny->bnx", batch["orients"], delta)
    rot = _gram_schmidt_6d(model.orient_head(h))
    orient_pred = torch.einsum("bnxy,bnyz->bnxz", batch["orients"], rot)
    if not (torch.isfinite(probs).all() and torch.isfinite(pos_mean).all()
            and torch.isfinite(orient_pred).all()):
        raise NonFiniteActivation("non-finite network output")
    return {"type_probs": probs, "pos_mean": pos_mean, "orient_pred": orient_pred}


def _extract_outputs(batch: dict, heads: dict,
                     noised_list: list[NoisedComplex]) -> list[DenoiserOutput]:
    outs = []
    for i, nc in enumerate(noised_list):
        idx = torch.from_numpy(nc.complex.mask_indices)
        outs.append(DenoiserOutput(
            type_probs=heads["type_probs"][i, idx].detach().numpy(),
            pos_mean=heads["pos_mean"][i, idx].detach().numpy(),
            orient_pred=heads["orient_pred"][i, idx].detach().numpy(),
        ))
    return outs


def forward(model: Denoiser, noised: NoisedComplex,
            t: int | None = None) -> DenoiserOutput:
    """Predict type probabilities, denoised positions, and orientations
    for the mask residues of one noised complex."""
    return forward_many(model, [noised])[0]


def forward_many(model: Denoiser,
                 noised_list: list[NoisedComplex]) -> list[DenoiserOutput]:
    """Batched forward over independently generated complexes."""
    for nc in noised_list:
        if not 0 <= nc.t <= model.config.t_max:
            raise ShapeMismatch(f"timestep {nc.t} outside [0, T]")
    with torch.no_grad():
        batch = build_batch(noised_list)
        heads = forward_batch_torch(model, batch)
    return _extract_outputs(batch, heads, noised_list)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _batch_targets(pairs: list[tuple[NoisedComplex, NoisedComplex]],
                   clean: list[Complex], sched: NoiseSchedule,
                   batch: dict) -> dict:
    """Posterior/positional/orientation targets aligned with the padding."""
    b, n_max = batch["pad_mask"].shape
    post = torch.zeros((b, n_max, N_TYPES), dtype=torch.float64)
    x_tm1 = torch.zeros((b, n_max, 3), dtype=torch.float64)
    o_0 = torch.zeros((b, n_max, 3, 3), dtype=torch.float64)
    for i, ((nc_tm1, nc_t), c0) in enumerate(zip(pairs, clean)):
        mask = c0.mask_indices
        idx = torch.from_numpy(mask)
        post[i, idx] = torch.from_numpy(type_posterior_many(
            nc_t.complex.res_types[mask], c0.res_types[mask], nc_t.t, sched))
        x_tm1[i, idx] = torch.from_numpy(nc_tm1.complex.ca_pos[mask])
        o_0[i, idx] = torch.from_numpy(c0.orients[mask])
    return {"post": post, "x_tm1": x_tm1, "o_0": o_0}


def _torch_losses(heads: dict, targets: dict, batch: dict,
                  lambdas) -> tuple[torch.Tensor, LossBreakdown]:
    """Batch-mean of the per-complex mean losses, differentiable."""
    dm = batch["design_mask"]
    counts = dm.sum(dim=1).clamp(min=1).double()

    q = heads["type_probs"].clamp(min=1e-10)
    p = targets["post"]
    kl = torch.where(p > 0, p * (torch.log(p.clamp(min=1e-300)) - torch.log(q)),
                     torch.zeros_like(p)).sum(dim=-1)
    l_type = ((kl * dm).sum(dim=1) / counts).mean()

    diff = (targets["x_tm1"] - heads["pos_mean"]) / batch["scale"][:, None, None]
    sq = (diff ** 2).sum(dim=-1)
    l_pos = ((sq * dm).sum(dim=1) / counts).mean()

    eye = torch.eye(3, dtype=torch.float64)
    dev = torch.einsum("bnxy,bnxz->bnyz", targets["o_0"], heads["orient_pred"]) - eye
    fro = (dev ** 2).sum(dim=(-1, -2))
    l_orient = ((fro * dm).sum(dim=1) / counts).mean()

    lt, lp, lo = lambdas
    total = lt * l_type + lp * l_pos + lo * l_orient
    breakdown = LossBreakdown.from_terms(
        l_type.item(), l_pos.item(), l_orient.item(), lambdas)
    return total, breakdown


def train_step(model: Denoiser, optimizer: torch.optim.Optimizer,
               complexes: list[Complex], sched: NoiseSchedule,
               cfg: TrainConfig, rng: np.random.Generator) -> LossBreakdown:
    """One gradient step on a batch of clean complexes.

    Timesteps are drawn uniformly in [1, T] per item; the forward pair at
    (t-1, t) supplies the targets. A non-finite gradient rejects the step
    and raises NonFiniteGradient.
    """
    if not complexes:
        raise ShapeMismatch("empty training batch")
    pairs = []
    for c in complexes:
        t = int(rng.integers(1, sched.t_max + 1))
        pairs.append(noise_complex_pair(c, t, sched, rng))
    noised_t = [p[1] for p in pairs]
    batch = build_batch(noised_t)
    heads = forward_batch_torch(model, batch)
    targets = _batch_targets(pairs, complexes, sched, batch)
    total, breakdown = _torch_losses(heads, targets, batch, cfg.lambdas)
    optimizer.zero_grad()
    total.backward()
    for p in model.parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            optimizer.zero_grad()
            raise NonFiniteGradient("rejected step with non-finite gradient")
    optimizer.step()
    return breakdown


@dataclass
class TrainResult:
    model: Denoiser
    loss_table: list  # rows: (step, l_type, l_pos, l_orient, total)
    manifest: dict
    rejected_steps: int = 0
    checkpoints: dict = field(default_factory=dict)


def train(dataset: list[Complex], sched: NoiseSchedule, cfg: TrainConfig,
          model_config: DenoiserConfig | None = None,
          checkpoint_dir=None) -> TrainResult:
    """Desk-scale training loop; fully deterministic for a given config."""
    model_config = model_config or DenoiserConfig(t_max=sched.t_max)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    init_seed = int(seeds[0].generate_state(1)[0] % (2 ** 31))
    rng = np.random.Generator(np.random.PCG64(seeds[1]))
    model = Denoiser(model_config, init_seed=init_seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    patched = [extract_patch(c, cfg.patch_size) for c in dataset]

    loss_table = []
    rejected = 0
    checkpoints = {}
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(patched), size=cfg.batch_size)
        batch = [patched[i] for i in idx]
        try:
            breakdown = train_step(model, optimizer, batch, sched, cfg, rng)
        except NonFiniteGradient:
            rejected += 1
            continue
        if step == 1 or step % cfg.log_interval == 0 or step == cfg.steps:
            loss_table.append((step, breakdown.l_type, breakdown.l_pos,
                               breakdown.l_orient, breakdown.total))
        if checkpoint_dir is not None and cfg.checkpoint_interval > 0 \
                and step % cfg.checkpoint_interval == 0:
            path = Path(checkpoint_dir) / f"params_step{step:06d}.bin"
            save_params(model, path)
            checkpoints[step] = path
    manifest = {
        "optimizer": "adam",
        "learning_rate": cfg.learning_rate,
        "steps": cfg.steps,
        "batch_size": cfg.batch_size,
        "lambdas": list(cfg.lambdas),
        "patch_size": cfg.patch_size,
        "seed": cfg.seed,
        "model": {"d": model_config.d, "n_blocks": model_config.n_blocks,
                  "t_max": model_config.t_max},
        "rejected_steps": rejected,
    }
    return TrainResult(model=model, loss_table=loss_table, manifest=manifest,
                       rejected_steps=rejected, checkpoints=checkpoints)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_params(model: Denoiser, path, manifest_hash: str = "") -> None:
    """Write parameters to a versioned container with raw float64 payload."""
    state = model.state_dict()
    arrays = []
    payload = bytearray()
    for name, tensor in state.items():
        arr = tensor.detach().numpy()
        arrays.append({"name": name, "shape": list(arr.shape),
                       "dtype": str(arr.dtype)})
        payload.extend(arr.tobytes())
    meta = {
        "schema": PARAMS_SCHEMA,
        "d": model.config.d,
        "n_blocks": model.config.n_blocks,
        "t_max": model.config.t_max,
        "n_rbf": model.config.n_rbf,
        "d_edge": model.config.d_edge,
        "seq_clip": model.config.seq_clip,
        "manifest_hash": manifest_hash,
        "arrays": arrays,
    }
    header = PARAMS_MAGIC + "\n" + json.dumps(meta, sort_keys=True) + "\n"
    Path(path).write_bytes(header.encode() + bytes(payload))


def load_params(path, expected: DenoiserConfig | None = None) -> Denoiser:
    """Load parameters; raises VersionMismatch if the stored architecture
    disagrees with the expected config, CorruptFile on damage."""
    raw = Path(path).read_bytes()
    try:
        magic, meta_line, payload = raw.split(b"\n", 2)
    except ValueError as exc:
        raise CorruptFile(f"{path}: truncated header") from exc
    if magic.decode(errors="replace") != PARAMS_MAGIC:
        raise CorruptFile(f"{path}: bad magic")
    try:
        meta = json.loads(meta_line.decode())
    except json.JSONDecodeError as exc:
        raise CorruptFile(f"{path}: bad metadata") from exc
    if meta.get("schema") != PARAMS_SCHEMA:
        raise VersionMismatch(f"unsupported schema {meta.get('schema')}")
    config = DenoiserConfig(
        d=meta["d"], n_blocks=meta["n_blocks"], t_max=meta["t_max"],
        n_rbf=meta["n_rbf"], d_edge=meta["d_edge"], seq_clip=meta["seq_clip"])
    if expected is not None and expected != config:
        raise VersionMismatch(
            f"stored architecture {config} differs from expected {expected}")
    model = Denoiser(config, init_seed=0)
    state = {}
    offset = 0
    for spec in meta["arrays"]:
        size = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = size * np.dtype(spec["dtype"]).itemsize
        chunk = payload[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise CorruptFile(f"{path}: truncated payload at {spec['name']}")
        state[spec["name"]] = torch.from_numpy(
            np.frombuffer(chunk, dtype=spec["dtype"]).reshape(spec["shape"]).copy())
        offset += nbytes
    if offset != len(payload):
        raise CorruptFile(f"{path}: {len(payload) - offset} trailing bytes")
    model.load_state_dict(state)
    return model
