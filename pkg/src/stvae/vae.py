"""Convolutional autoencoder with an MMD latent regulariser.

The encoder is deterministic (field -> K-vector) and the decoder has a
constant-variance Gaussian likelihood, so the reconstruction term reduces to
a squared distance. The latent codes are pulled towards a standard-normal
prior with a Gaussian-kernel maximum mean discrepancy.

Model file layout (all integers little-endian)::

    8 bytes   magic b"STVAEMDL"
    u32       format version
    u64       header length H
    H bytes   UTF-8 JSON header (sorted keys): architecture, array names and
              shapes in storage order, bounds, mask, sigma2, history
    u64       payload length P (bytes, multiple of 8)
    P bytes   float64 little-endian weights, arrays concatenated in header order
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .fields import Bounds, FormatError, default_mask, denormalize, format_mask, pad_and_normalize, parse_mask

log = logging.getLogger(__name__)

MAGIC = b"STVAEMDL"
MODEL_FORMAT_VERSION = 1


@dataclass
class MmdConfig:
    bandwidth: float | None = None  # tau^2; None -> K / 2
    prior_samples: int | None = None  # None -> batch size
    weight: float = 1.0
    unbiased: bool = False

    def resolved_bandwidth(self, latent_dim: int) -> float:
        bw = latent_dim / 2.0 if self.bandwidth is None else float(self.bandwidth)
        if not bw > 0:
            raise ValueError(f"kernel bandwidth must be positive, got {bw}")
        return bw

    def __post_init__(self):
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError(f"kernel bandwidth must be positive, got {self.bandwidth}")
        if self.weight < 0:
            raise ValueError(f"regularisation weight must be non-negative, got {self.weight}")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 100
    learning_rate: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 for the MMD term")


class TrainingError(RuntimeError):
    pass


@dataclass
class VaeModel:
    latent_dim: int
    encoder_specs: list[nn.LayerSpec]
    encoder_params: list[dict[str, np.ndarray]]
    decoder_specs: list[nn.LayerSpec]
    decoder_params: list[dict[str, np.ndarray]]
    bounds: Bounds = field(default_factory=lambda: Bounds(-37.0, 0.0))
    mask: np.ndarray = field(default_factory=default_mask)
    sigma2: float = 0.0
    history: dict = field(default_factory=dict)

    @property
    def grid(self) -> int:
        return self.mask.shape[0]

    def arrays(self) -> list[np.ndarray]:
        """Weights in storage order: encoder layers then decoder layers, w before b."""
        out = []
        for p in self.encoder_params + self.decoder_params:
            if p:
                out.extend([p["w"], p["b"]])
        return out

    def set_arrays(self, arrays: list[np.ndarray]) -> None:
        it = iter(arrays)
        for p in self.encoder_params + self.decoder_params:
            if p:
                p["w"] = next(it)
                p["b"] = next(it)

    def copy(self) -> "VaeModel":
        clone = lambda ps: [{k: v.copy() for k, v in p.items()} for p in ps]
        return VaeModel(
            self.latent_dim,
            list(self.encoder_specs),
            clone(self.encoder_params),
            list(self.decoder_specs),
            clone(self.decoder_params),
            self.bounds,
            self.mask.copy(),
            self.sigma2,
            json.loads(json.dumps(self.history)),
        )


def build_model(
    latent_dim: int = 8,
    channels: tuple[int, int] = (32, 64),
    seed: int = 0,
    bounds: Bounds | None = None,
    mask: np.ndarray | None = None,
    grid: int = 12,
) -> VaeModel:
    """Encoder conv/s2 -> conv/s2 -> flatten -> dense(K); decoder mirrors it."""
    c1, c2 = channels
    h1 = nn.conv_output_extent(grid)
    h2 = nn.conv_output_extent(h1)
    if h2 * 4 != grid:
        raise ValueError(f"grid {grid} must be divisible by 4 so deconvolutions restore it")
    flat = h2 * h2 * c2
    enc = [
        nn.LayerSpec("reshape", shape=(grid, grid, 1)),
        nn.LayerSpec("conv2d", 1, c1, "relu"),
        nn.LayerSpec("conv2d", c1, c2, "relu"),
        nn.LayerSpec("reshape", shape=(flat,)),
        nn.LayerSpec("dense", flat, latent_dim, "identity"),
    ]
    dec = [
        nn.LayerSpec("dense", latent_dim, flat, "relu"),
        nn.LayerSpec("reshape", shape=(h2, h2, c2)),
        nn.LayerSpec("deconv2d", c2, c1, "relu"),
        nn.LayerSpec("deconv2d", c1, 1, "sigmoid"),
        nn.LayerSpec("reshape", shape=(grid, grid)),
    ]
    rng = np.random.default_rng(seed)
    enc_p = nn.init_params(enc, rng)
    dec_p = nn.init_params(dec, rng)
    if mask is None:
        mask = default_mask() if grid == 12 else np.ones((grid, grid), dtype=bool)
    return VaeModel(latent_dim, enc, enc_p, dec, dec_p, bounds or Bounds(-37.0, 0.0), mask)


# ---------------------------------------------------------------------------
# encode / decode


def _as_batch(fields: np.ndarray, grid: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(fields, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1:] != (grid, grid):
        raise nn.ShapeError(f"fields must be ({grid}, {grid}) or (n, {grid}, {grid}), got {x.shape}")
    return x, single


def encode(model: VaeModel, fields: np.ndarray) -> np.ndarray:
    x, single = _as_batch(fields, model.grid)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot encode a field with non-finite entries")
    z, _ = nn.forward_stack(model.encoder_specs, model.encoder_params, x)
    return z[0] if single else z


def decode(model: VaeModel, codes: np.ndarray) -> np.ndarray:
    z = np.asarray(codes, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None]
    if z.ndim != 2 or z.shape[1] != model.latent_dim:
        raise nn.ShapeError(f"latent codes must have length {model.latent_dim}, got shape {np.shape(codes)}")
    if not np.all(np.isfinite(z)):
        raise ValueError("cannot decode non-finite latent codes")
    out, _ = nn.forward_stack(model.decoder_specs, model.decoder_params, z)
    return out[0] if single else out


def encode_values(model: VaeModel, values: np.ndarray) -> np.ndarray:
    """Encode decibel values (..., 52); out-of-range values are clamped."""
    return encode(model, pad_and_normalize(values, model.mask, model.bounds, clip=True))


def decode_values(model: VaeModel, codes: np.ndarray) -> np.ndarray:
    """Decode latent codes to decibel values over the informative locations."""
    return denormalize(decode(model, codes), model.mask, model.bounds)


# ---------------------------------------------------------------------------
# losses


def reconstruction_loss(batch, reconstructions) -> float:
    a = np.asarray(batch, dtype=np.float64)
    b = np.asarray(reconstructions, dtype=np.float64)
    if a.shape != b.shape:
        raise nn.ShapeError(f"batch {a.shape} and reconstructions {b.shape} differ in shape")
    if a.ndim == 2:
        a, b = a[None], b[None]
    return float(np.mean(np.sum((a - b) ** 2, axis=tuple(range(1, a.ndim)))))


def gaussian_kernel(x, y, bandwidth: float) -> float:
    """exp(-||x - y||^2 / (2 tau^2))."""
    if not bandwidth > 0:
        raise ValueError(f"kernel bandwidth must be positive, got {bandwidth}")
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise nn.ShapeError(f"kernel arguments differ in shape: {x.shape} vs {y.shape}")
    return float(np.exp(-np.sum((x - y) ** 2) / (2.0 * bandwidth)))


def _kernel_matrix(a: np.ndarray, b: np.ndarray, bandwidth: float) -> tuple[np.ndarray, np.ndarray]:
    diff = a[:, None, :] - b[None, :, :]
    k = np.exp(-np.sum(diff * diff, axis=2) / (2.0 * bandwidth))
    return k, diff


def _as_samples(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    if s.ndim != 2 or s.shape[0] < 1:
        raise ValueError("MMD needs a non-empty (n, K) sample set")
    return s


def _pair_mean(k: np.ndarray, same: bool, unbiased: bool) -> float:
    n = k.shape[0]
    if same and unbiased:
        if n < 2:
            raise ValueError("the unbiased MMD estimator needs at least two samples per set")
        return float((k.sum() - np.trace(k)) / (n * (n - 1)))
    return float(k.mean())


def mmd(samples_q, samples_p, config: MmdConfig | None = None, bandwidth: float | None = None) -> float:
    """Kernel MMD estimate between two sample sets.

    By default every expectation is the mean over all ordered pairs including
    self-pairs, which is non-negative and exactly zero for identical sets.
    """
    config = config or MmdConfig()
    q, p = _as_samples(samples_q), _as_samples(samples_p)
    if q.shape[1] != p.shape[1]:
        raise nn.ShapeError(f"sample dimensions differ: {q.shape[1]} vs {p.shape[1]}")
    bw = bandwidth if bandwidth is not None else config.resolved_bandwidth(q.shape[1])
    kqq, _ = _kernel_matrix(q, q, bw)
    kpp, _ = _kernel_matrix(p, p, bw)
    kqp, _ = _kernel_matrix(q, p, bw)
    return (
        _pair_mean(kqq, True, config.unbiased)
        + _pair_mean(kpp, True, config.unbiased)
        - 2.0 * float(kqp.mean())
    )


def mmd_and_grad(q: np.ndarray, p: np.ndarray, bandwidth: float, unbiased: bool = False):
    """MMD value and its gradient with respect to the first sample set."""
    n, m = q.shape[0], p.shape[0]
    kqq, dqq = _kernel_matrix(q, q, bandwidth)
    kpp, _ = _kernel_matrix(p, p, bandwidth)
    kqp, dqp = _kernel_matrix(q, p, bandwidth)
    if unbiased:
        np.fill_diagonal(kqq, 0.0)
        cq = 1.0 / (n * (n - 1))
        np.fill_diagonal(kpp, 0.0)
        val = kqq.sum() * cq + kpp.sum() / (m * (m - 1)) - 2.0 * kqp.mean()
    else:
        cq = 1.0 / (n * n)
        val = kqq.mean() + kpp.mean() - 2.0 * kqp.mean()
    # d k(a,b) / da = -k (a - b) / tau^2; each q appears in both slots of kqq
    g = -2.0 * cq * np.einsum("ij,ijk->ik", kqq, dqq) / bandwidth
    g += 2.0 / (n * m) * np.einsum("ij,ijk->ik", kqp, dqp) / bandwidth
    return float(val), g


def vae_loss(model: VaeModel, batch, prior_samples, config: MmdConfig | None = None):
    """(total, reconstruction part, regularisation part) on one batch."""
    total, recon, reg, _ = vae_loss_and_grad(model, batch, prior_samples, config, need_grad=False)
    return total, recon, reg


def vae_loss_and_grad(model: VaeModel, batch, prior_samples, config: MmdConfig | None = None, need_grad: bool = True):
    config = config or MmdConfig()
    x, _ = _as_batch(batch, model.grid)
    if x.shape[0] < 2:
        raise ValueError("a training batch needs at least two fields")
    prior = _as_samples(prior_samples)
    if prior.shape[1] != model.latent_dim:
        raise nn.ShapeError(f"prior samples have dimension {prior.shape[1]}, model has {model.latent_dim}")
    bw = config.resolved_bandwidth(model.latent_dim)
    z, enc_acts = nn.forward_stack(model.encoder_specs, model.encoder_params, x)
    xhat, dec_acts = nn.forward_stack(model.decoder_specs, model.decoder_params, z)
    b = x.shape[0]
    resid = xhat - x
    recon = float(np.sum(resid * resid) / b)
    reg, gz_mmd = mmd_and_grad(z, prior, bw, config.unbiased)
    total = recon + config.weight * reg
    if not need_grad:
        return total, recon, reg, None
    gz, dec_grads = nn.backward_stack(model.decoder_specs, model.decoder_params, dec_acts, 2.0 * resid / b)
    gz = gz + config.weight * gz_mmd
    _, enc_grads = nn.backward_stack(model.encoder_specs, model.encoder_params, enc_acts, gz)
    grads = []
    for g in enc_grads + dec_grads:
        if g:
            grads.extend([g["w"], g["b"]])
    return total, recon, reg, grads


# ---------------------------------------------------------------------------
# KL variant


def kl_gaussian_closed_form(mu, sigma2) -> float:
    """KL(N(mu, diag sigma2) || N(0, I))."""
    mu, sigma2 = np.asarray(mu, dtype=np.float64), np.asarray(sigma2, dtype=np.float64)
    if mu.shape != sigma2.shape:
        raise nn.ShapeError(f"mu {mu.shape} and sigma2 {sigma2.shape} differ in shape")
    if np.any(sigma2 <= 0):
        raise ValueError("variances must be positive")
    return float(0.5 * np.sum(sigma2 + mu * mu - 1.0 - np.log(sigma2)))


def reparameterize(mu, sigma, noise) -> np.ndarray:
    mu, sigma, noise = (np.asarray(a, dtype=np.float64) for a in (mu, sigma, noise))
    if mu.shape != sigma.shape or mu.shape[-1:] != noise.shape[-1:]:
        raise nn.ShapeError(f"mu {mu.shape}, sigma {sigma.shape} and noise {noise.shape} are incompatible")
    return mu + sigma * noise


def elbo_loss(batch, reconstructions, mu, sigma2, decoder_variance: float = 1.0) -> float:
    """Negative ELBO per field for a Gaussian encoder and constant-variance decoder."""
    x = np.asarray(batch, dtype=np.float64)
    r = np.asarray(reconstructions, dtype=np.float64)
    if x.shape != r.shape:
        raise nn.ShapeError(f"batch {x.shape} and reconstructions {r.shape} differ in shape")
    if x.ndim == 2:
        x, r = x[None], r[None]
        mu, sigma2 = np.atleast_2d(mu), np.atleast_2d(sigma2)
    d = int(np.prod(x.shape[1:]))
    sq = np.sum((x - r) ** 2, axis=tuple(range(1, x.ndim)))
    nll = sq / (2.0 * decoder_variance) + 0.5 * d * math.log(2.0 * math.pi * decoder_variance)
    kl = np.array([kl_gaussian_closed_form(m, s) for m, s in zip(mu, sigma2)])
    return float(np.mean(nll + kl))


# ---------------------------------------------------------------------------
# training


def _batches(n: int, size: int, order: np.ndarray) -> list[np.ndarray]:
    chunks = [order[i : i + size] for i in range(0, n, size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _evaluate(model, x, prior_blocks, config, batch_size):
    tot = rec = reg = 0.0
    order = np.arange(x.shape[0])
    chunks = _batches(x.shape[0], batch_size, order)
    for idx, prior in zip(chunks, prior_blocks):
        t, r, g, _ = vae_loss_and_grad(model, x[idx], prior, config, need_grad=False)
        w = len(idx) / x.shape[0]
        tot, rec, reg = tot + w * t, rec + w * r, reg + w * g
    return tot, rec, reg


def train(
    model: VaeModel,
    train_set: np.ndarray,
    validation_set: np.ndarray,
    train_config: TrainConfig | None = None,
    mmd_config: MmdConfig | None = None,
) -> tuple[VaeModel, dict]:
    """Minibatch Adam training; returns the weights of the best validation epoch.

    ``train_set`` and ``validation_set`` are normalised (n, 12, 12) grids.
    Shuffling and prior draws come from one generator seeded by
    ``train_config.seed``, so equal seeds give bit-identical runs.
    """
    tc = train_config or TrainConfig()
    mc = mmd_config or MmdConfig()
    xtr, _ = _as_batch(train_set, model.grid)
    xva, _ = _as_batch(validation_set, model.grid)
    if xtr.shape[0] < 2 or xva.shape[0] < 1:
        raise ValueError("training needs >= 2 training fields and a non-empty validation set")
    if xva.shape[0] < 2:
        xva = np.concatenate([xva, xva])
    k = model.latent_dim
    rng = np.random.default_rng(tc.seed)
    val_rng = np.random.default_rng([tc.seed, 1])
    n_prior = mc.prior_samples or tc.batch_size
    val_chunks = _batches(xva.shape[0], tc.batch_size, np.arange(xva.shape[0]))
    val_prior = [val_rng.standard_normal((max(n_prior, len(c)), k)) for c in val_chunks]

    model = model.copy()
    params = model.arrays()
    state = nn.AdamState.for_params(params, lr=tc.learning_rate)
    keys = ["train_total", "train_recon", "train_mmd", "val_total", "val_recon", "val_mmd"]
    hist: dict = {key: [] for key in keys}
    best, best_arrays = math.inf, [p.copy() for p in params]

    for epoch in range(tc.epochs):
        order = rng.permutation(xtr.shape[0])
        acc = np.zeros(3)
        for bi, idx in enumerate(_batches(xtr.shape[0], tc.batch_size, order)):
            prior = rng.standard_normal((n_prior, k))
            total, recon, reg, grads = vae_loss_and_grad(model, xtr[idx], prior, mc)
            if not math.isfinite(total):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {bi + 1}")
            try:
                params = nn.adam_step(params, grads, state)
            except nn.NonFiniteGradient as exc:
                raise TrainingError(f"epoch {epoch + 1}, batch {bi + 1}: {exc}") from None
            model.set_arrays(params)
            acc += np.array([total, recon, reg]) * len(idx)
        acc /= xtr.shape[0]
        vt, vr, vg = _evaluate(model, xva, val_prior, mc, tc.batch_size)
        if not math.isfinite(vt):
            raise TrainingError(f"non-finite validation loss at epoch {epoch + 1}")
        for key, val in zip(keys, [*acc, vt, vr, vg]):
            hist[key].append(float(val))
        log.debug("epoch %d train %.5f val %.5f", epoch + 1, acc[0], vt)
        if vt < best:
            best, best_arrays = vt, [p.copy() for p in params]

    model.set_arrays(best_arrays)
    hist["best_epoch"] = int(np.argmin(hist["val_total"]))
    recon = decode(model, encode(model, xtr))
    model.sigma2 = float(np.mean((recon - xtr) ** 2))
    model.history = hist
    return model, hist


# ---------------------------------------------------------------------------
# serialisation


def serialize_model(model: VaeModel) -> bytes:
    arrays = model.arrays()
    header = {
        "format_version": MODEL_FORMAT_VERSION,
        "latent_dim": model.latent_dim,
        "encoder": [s.to_dict() for s in model.encoder_specs],
        "decoder": [s.to_dict() for s in model.decoder_specs],
        "arrays": [list(a.shape) for a in arrays],
        "bounds": [model.bounds.lower, model.bounds.upper],
        "mask": format_mask(model.mask),
        "sigma2": model.sigma2,
        "history": model.history,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    return b"".join(
        [MAGIC, struct.pack("<I", MODEL_FORMAT_VERSION), struct.pack("<Q", len(head)), head,
         struct.pack("<Q", len(payload)), payload]
    )


def deserialize_model(data: bytes) -> VaeModel:
    if len(data) < 20 or data[:8] != MAGIC:
        raise FormatError("not a model file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != MODEL_FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {version}")
    (hlen,) = struct.unpack_from("<Q", data, 12)
    start = 20
    if start + hlen + 8 > len(data):
        raise FormatError(f"header length {hlen} exceeds file size {len(data)}")
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt model header: {exc}") from None
    (plen,) = struct.unpack_from("<Q", data, start + hlen)
    pstart = start + hlen + 8
    if pstart + plen != len(data):
        raise FormatError(f"payload length {plen} does not match remaining {len(data) - pstart} bytes")
    shapes = [tuple(s) for s in header["arrays"]]
    need = sum(int(np.prod(s)) for s in shapes) * 8
    if need != plen:
        raise FormatError(f"payload holds {plen} bytes, architecture needs {need}")
    flat = np.frombuffer(data, dtype="<f8", count=plen // 8, offset=pstart).astype(np.float64)
    arrays, off = [], 0
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(flat[off : off + n].reshape(s).copy())
        off += n
    enc = [nn.LayerSpec.from_dict(d) for d in header["encoder"]]
    dec = [nn.LayerSpec.from_dict(d) for d in header["decoder"]]
    model = VaeModel(
        int(header["latent_dim"]),
        enc,
        [{} if s.kind == "reshape" else {"w": None, "b": None} for s in enc],
        dec,
        [{} if s.kind == "reshape" else {"w": None, "b": None} for s in dec],
        Bounds(*header["bounds"]),
        parse_mask("\n".join(header["mask"])),
        float(header["sigma2"]),
        header["history"],
    )
    n_arrays = 2 * sum(1 for s in enc + dec if s.kind != "reshape")
    if n_arrays != len(arrays):
        raise FormatError(f"header lists {len(arrays)} arrays, layers need {n_arrays}")
    model.set_arrays(arrays)
    for spec, p in zip(enc + dec, model.encoder_params + model.decoder_params):
        if p and p["w"].shape != spec.weight_shape():
            raise FormatError(f"array shape {p['w'].shape} does not match layer {spec.kind} {spec.weight_shape()}")
    return model


def save_model(model: VaeModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_model(model))


def load_model(path) -> VaeModel:
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())
