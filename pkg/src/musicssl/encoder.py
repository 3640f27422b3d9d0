"""Waveform encoder: CNN frontend (16 kHz -> 50 Hz), span masking with a
learned mask embedding, bidirectional transformer stack exposing every layer
output, the discrete codebook head and continuous regression head, and the
EMA teacher copy.

The layer stack returned by a forward pass always has length L+1: index 0 is
the projected CNN output, indices 1..L the transformer layers. Probes and
objectives index layers only through that structure.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import UnsupportedFormatError, WorkbenchError

_CKPT_MAGIC = b"SSLC"
_CKPT_VERSION = 1

PARADIGMS = ("none", "discrete", "continuous")

DEFAULT_CONV_LAYERS = ((64, 10, 5), (64, 3, 2), (64, 3, 2), (64, 3, 2),
                       (64, 3, 2), (64, 2, 2), (64, 2, 2))


@dataclass
class EncoderConfig:
    conv_layers: tuple = DEFAULT_CONV_LAYERS
    n_transformer_layers: int = 2
    hidden: int = 64
    heads: int = 4
    ff_dim: int = 256
    dropout: float = 0.1
    max_frames: int = 2048
    sample_rate: int = 16000
    frame_rate: int = 50

    def __post_init__(self):
        self.conv_layers = tuple(tuple(layer) for layer in self.conv_layers)
        stride_product = math.prod(s for _, _, s in self.conv_layers)
        if stride_product * self.frame_rate != self.sample_rate:
            raise WorkbenchError(
                f"conv strides multiply to {stride_product}, need "
                f"{self.sample_rate // self.frame_rate} for {self.frame_rate} Hz frames")
        if self.hidden % self.heads != 0:
            raise WorkbenchError("hidden must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise WorkbenchError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return {"conv_layers": [list(l) for l in self.conv_layers],
                "n_transformer_layers": self.n_transformer_layers,
                "hidden": self.hidden, "heads": self.heads, "ff_dim": self.ff_dim,
                "dropout": self.dropout, "max_frames": self.max_frames,
                "sample_rate": self.sample_rate, "frame_rate": self.frame_rate}

    @classmethod
    def from_dict(cls, doc: dict) -> "EncoderConfig":
        return cls(**{**doc, "conv_layers": tuple(tuple(l) for l in doc["conv_layers"])})


@dataclass
class MaskSpec:
    span: int = 10
    prob: float = 0.65
    seed: int = 0

    def __post_init__(self):
        if self.span < 1:
            raise WorkbenchError("mask span must be >= 1")
        if not 0.0 <= self.prob <= 1.0:
            raise WorkbenchError("mask prob must be in [0, 1]")


@dataclass
class EncoderOutput:
    """layers[0] is the CNN token output; layers[1..L] the transformer layers."""

    layers: list
    mask_indices: np.ndarray | None = None


def receptive_field(config: EncoderConfig) -> int:
    rf, jump = 1, 1
    for _, kernel, stride in config.conv_layers:
        rf += (kernel - 1) * jump
        jump *= stride
    return rf


def conv_output_length(config: EncoderConfig, n_samples: int) -> int:
    t = n_samples
    for _, kernel, stride in config.conv_layers:
        if t < kernel:
            return 0
        t = (t - kernel) // stride + 1
    return t


def num_mask_spans(t: int, spec: MaskSpec) -> int:
    return int(np.floor(spec.prob * t / spec.span))


def sample_mask_starts(t: int, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Span start positions: floor(prob * t / span) of them, drawn without
    replacement from [0, t - span] so spans never extend past t."""
    if t < spec.span:
        raise WorkbenchError(f"sequence length {t} shorter than mask span {spec.span}")
    n_starts = min(num_mask_spans(t, spec), t - spec.span + 1)
    if n_starts <= 0:
        return np.zeros(0, dtype=np.int64)
    return rng.choice(t - spec.span + 1, size=n_starts, replace=False)


def sample_mask(t: int, spec: MaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of length t covering the sampled spans."""
    mask = np.zeros(t, dtype=bool)
    for s in sample_mask_starts(t, spec, rng):
        mask[s:s + spec.span] = True
    return mask


def _linear_init(rng, fan_in, fan_out, scale=0.02):
    return rng.normal(0.0, scale, size=(fan_in, fan_out)).astype(np.float32)


class MusicEncoder:
    """CNN frontend plus post-LN transformer stack."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self._params: dict[str, Parameter] = {}

        in_channels = 1
        for i, (channels, kernel, _) in enumerate(config.conv_layers):
            std = math.sqrt(2.0 / (in_channels * kernel))
            w = rng.normal(0.0, std, size=(channels, in_channels, kernel)).astype(np.float32)
            self._add(f"conv{i}.w", w)
            in_channels = channels

        h = config.hidden
        self._add("proj.w", _linear_init(rng, in_channels, h))
        self._add("proj.b", np.zeros(h, dtype=np.float32))
        self._add("token_ln.g", np.ones(h, dtype=np.float32))
        self._add("token_ln.b", np.zeros(h, dtype=np.float32))
        self._add("pos", rng.normal(0.0, 0.02, size=(config.max_frames, h)).astype(np.float32))
        self._add("mask_emb", rng.normal(0.0, 0.02, size=(h,)).astype(np.float32))

        for i in range(config.n_transformer_layers):
            prefix = f"layer{i}."
            for name in ("wq", "wk", "wv", "wo"):
                self._add(prefix + name, _linear_init(rng, h, h))
                self._add(prefix + name + "_b", np.zeros(h, dtype=np.float32))
            self._add(prefix + "ln1.g", np.ones(h, dtype=np.float32))
            self._add(prefix + "ln1.b", np.zeros(h, dtype=np.float32))
            self._add(prefix + "ff1.w", _linear_init(rng, h, config.ff_dim))
            self._add(prefix + "ff1.b", np.zeros(config.ff_dim, dtype=np.float32))
            self._add(prefix + "ff2.w", _linear_init(rng, config.ff_dim, h))
            self._add(prefix + "ff2.b", np.zeros(h, dtype=np.float32))
            self._add(prefix + "ln2.g", np.ones(h, dtype=np.float32))
            self._add(prefix + "ln2.b", np.zeros(h, dtype=np.float32))

    def _add(self, name: str, data: np.ndarray) -> None:
        if name in self._params:
            raise WorkbenchError(f"duplicate parameter name {name}")
        self._params[name] = Parameter(data, name=name)

    def parameters(self) -> list:
        return list(self._params.values())

    def param(self, name: str) -> Parameter:
        return self._params[name]

    def set_trainable(self, trainable: bool) -> None:
        for p in self._params.values():
            p.requires_grad = trainable

    def state_arrays(self) -> dict:
        return {name: p.data for name, p in self._params.items()}

    def load_state_arrays(self, arrays: dict) -> None:
        for name, p in self._params.items():
            if name not in arrays:
                raise WorkbenchError(f"missing parameter {name} in state")
            if arrays[name].shape != p.data.shape:
                raise WorkbenchError(f"shape mismatch for {name}")
            p.data = arrays[name].astype(np.float32).copy()

    # ---- forward pieces ----

    def conv_frontend(self, waves: np.ndarray) -> Tensor:
        """waves (B, n_samples) float in [-1,1] -> tokens (B, T, H)."""
        waves = np.asarray(waves, dtype=np.float32)
        if waves.ndim != 2:
            raise WorkbenchError("conv_frontend expects a (batch, samples) array")
        if waves.shape[1] < receptive_field(self.config):
            raise WorkbenchError(
                f"clip of {waves.shape[1]} samples is shorter than the receptive "
                f"field ({receptive_field(self.config)})")
        x = Tensor(waves[:, None, :])
        for i, (_, _, stride) in enumerate(self.config.conv_layers):
            x = ad.gelu(ad.conv1d(x, self._params[f"conv{i}.w"], stride))
        x = transpose_btc(x)
        x = ad.add(ad.matmul(x, self._params["proj.w"]), self._params["proj.b"])
        x = ad.layer_norm(x)
        x = ad.add(ad.mul(x, self._params["token_ln.g"]), self._params["token_ln.b"])
        return x

    def apply_mask(self, tokens: Tensor, spec: MaskSpec):
        """Replace sampled spans with the learned mask embedding.

        Returns (masked tokens, boolean mask of shape (B, T)).
        """
        b, t, _ = tokens.shape
        mask = np.zeros((b, t), dtype=bool)
        for i in range(b):
            rng = ad.philox_rng((spec.seed, i))
            mask[i] = sample_mask(t, spec, rng)
        if not mask.any():
            return tokens, mask
        keep = Tensor((~mask[:, :, None]).astype(np.float32))
        fill = Tensor(mask[:, :, None].astype(np.float32))
        masked = ad.add(ad.mul(tokens, keep), ad.mul(fill, self._params["mask_emb"]))
        return masked, mask

    def transformer(self, x: Tensor, training: bool = False, rng_key=()) -> list:
        """Run the stack; returns the list of per-layer outputs (length L)."""
        cfg = self.config
        b, t, h = x.shape
        if t > cfg.max_frames:
            raise WorkbenchError(f"sequence of {t} frames exceeds max_frames={cfg.max_frames}")
        pos = ad.narrow(self._params["pos"], 0, 0, t)
        x = ad.add(x, pos)
        site = iter(range(1000))
        x = self._dropout(x, training, rng_key, site)
        outputs = []
        n_heads, dh = cfg.heads, h // cfg.heads
        inv_sqrt_dh = 1.0 / math.sqrt(dh)
        for i in range(cfg.n_transformer_layers):
            p = lambda name: self._params[f"layer{i}.{name}"]
            q = ad.add(ad.matmul(x, p("wq")), p("wq_b"))
            k = ad.add(ad.matmul(x, p("wk")), p("wk_b"))
            v = ad.add(ad.matmul(x, p("wv")), p("wv_b"))
            q = ad.transpose(ad.reshape(q, (b, t, n_heads, dh)), (0, 2, 1, 3))
            k = ad.transpose(ad.reshape(k, (b, t, n_heads, dh)), (0, 2, 1, 3))
            v = ad.transpose(ad.reshape(v, (b, t, n_heads, dh)), (0, 2, 1, 3))
            att = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                                      inv_sqrt_dh))
            att = self._dropout(att, training, rng_key, site)
            ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, t, h))
            ctx = ad.add(ad.matmul(ctx, p("wo")), p("wo_b"))
            ctx = self._dropout(ctx, training, rng_key, site)
            x = ad.layer_norm(ad.add(x, ctx))
            x = ad.add(ad.mul(x, p("ln1.g")), p("ln1.b"))
            ff = ad.gelu(ad.add(ad.matmul(x, p("ff1.w")), p("ff1.b")))
            ff = ad.add(ad.matmul(ff, p("ff2.w")), p("ff2.b"))
            ff = self._dropout(ff, training, rng_key, site)
            x = ad.layer_norm(ad.add(x, ff))
            x = ad.add(ad.mul(x, p("ln2.g")), p("ln2.b"))
            outputs.append(x)
        return outputs

    def _dropout(self, x: Tensor, training: bool, rng_key, site) -> Tensor:
        if not training or self.config.dropout == 0.0:
            return x
        return ad.dropout(x, self.config.dropout, tuple(rng_key) + (next(site),))

    def forward(self, waves: np.ndarray, mask_spec: MaskSpec | None = None,
                training: bool = False, rng_key=()) -> EncoderOutput:
        """Full pass; collects the CNN tokens plus every transformer layer."""
        tokens = self.conv_frontend(waves)
        mask = None
        x = tokens
        if mask_spec is not None:
            x, mask = self.apply_mask(tokens, mask_spec)
        layer_outputs = self.transformer(x, training=training, rng_key=rng_key)
        return EncoderOutput(layers=[tokens] + layer_outputs, mask_indices=mask)


def transpose_btc(x: Tensor) -> Tensor:
    """(B, C, T) -> (B, T, C)."""
    return ad.transpose(x, (0, 2, 1))


class DiscreteHead:
    """Cosine-similarity classifier over learned code embeddings."""

    # proj_dim keeps initial cosine logits near-uniform: their spread scales
    # as 1/(temperature * sqrt(proj_dim)), so a wide projection starts the
    # classifier close to the ln(K) plateau.
    def __init__(self, hidden: int, n_codes: int, proj_dim: int = 1024,
                 temperature: float = 0.1, seed: int = 0):
        if n_codes < 1:
            raise WorkbenchError("need at least one code")
        if temperature <= 0:
            raise WorkbenchError("temperature must be positive")
        rng = np.random.default_rng(seed)
        self.n_codes = n_codes
        self.proj_dim = proj_dim
        self.temperature = temperature
        self.proj_w = Parameter(_linear_init(rng, hidden, proj_dim), name="discrete.proj_w")
        self.proj_b = Parameter(np.zeros(proj_dim, dtype=np.float32), name="discrete.proj_b")
        self.code_embeddings = Parameter(
            rng.normal(0.0, 1.0, size=(n_codes, proj_dim)).astype(np.float32),
            name="discrete.codes")

    def parameters(self) -> list:
        return [self.proj_w, self.proj_b, self.code_embeddings]

    def logits(self, h: Tensor) -> Tensor:
        """(B, T, H) -> (B, T, K) cosine logits divided by temperature."""
        u = ad.l2_normalize(ad.add(ad.matmul(h, self.proj_w), self.proj_b))
        codes = ad.l2_normalize(self.code_embeddings)
        return ad.scale(ad.matmul(u, ad.transpose(codes)), 1.0 / self.temperature)


class RegressionHead:
    """Linear map from the final student layer to the teacher target space."""

    def __init__(self, hidden: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.w = Parameter(_linear_init(rng, hidden, hidden), name="regression.w")
        self.b = Parameter(np.zeros(hidden, dtype=np.float32), name="regression.b")

    def parameters(self) -> list:
        return [self.w, self.b]

    def predict(self, h: Tensor) -> Tensor:
        return ad.add(ad.matmul(h, self.w), self.b)

    def set_identity(self) -> None:
        self.w.data = np.eye(self.w.data.shape[0], dtype=np.float32)
        self.b.data = np.zeros_like(self.b.data)


def select_target_layers(n_layers: int, target_layers) -> list:
    """Transformer-layer indices (1-based into the L+1 stack) for the target.

    target_layers is either 'all' or an integer k meaning the top-k layers.
    """
    if target_layers == "all":
        return list(range(1, n_layers + 1))
    k = int(target_layers)
    if not 1 <= k <= n_layers:
        raise WorkbenchError(f"target top-{k} outside 1..{n_layers}")
    return list(range(n_layers - k + 1, n_layers + 1))


def frame_layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(sd * sd + eps)


class EmaTeacher:
    """Non-gradient copy of the student; tracks it by exponential moving average."""

    def __init__(self, student: MusicEncoder):
        self.encoder = MusicEncoder(student.config, seed=0)
        self.encoder.set_trainable(False)
        self.copy_from(student)

    def copy_from(self, student: MusicEncoder) -> None:
        self.encoder.load_state_arrays(student.state_arrays())
        self.encoder.set_trainable(False)

    def update(self, student: MusicEncoder, tau: float) -> None:
        ema_update(self.encoder, student, tau)

    def targets(self, waves: np.ndarray, target_layers, normalize: bool = True) -> np.ndarray:
        """Teacher forward on unmasked input; averaged (optionally per-frame
        normalized) selected transformer layers, shape (B, T, H)."""
        out = self.encoder.forward(waves)
        picks = select_target_layers(self.encoder.config.n_transformer_layers, target_layers)
        stacked = np.stack([out.layers[i].data for i in picks], axis=0)
        if normalize:
            stacked = frame_layer_norm(stacked)
        return stacked.mean(axis=0)


def ema_update(teacher: MusicEncoder, student: MusicEncoder, tau: float) -> None:
    """theta_T <- tau * theta_T + (1 - tau) * theta_S, in float32."""
    if not 0.0 <= tau <= 1.0:
        raise WorkbenchError("tau must lie in [0, 1]")
    t_arrays, s_arrays = teacher._params, student._params
    if set(t_arrays) != set(s_arrays):
        raise WorkbenchError("teacher/student parameter names differ")
    for name, tp in t_arrays.items():
        sp = s_arrays[name]
        if tp.data.shape != sp.data.shape:
            raise WorkbenchError(f"teacher/student shape mismatch for {name}")
        tp.data = (np.float32(tau) * tp.data + np.float32(1.0 - tau) * sp.data).astype(np.float32)


# ---------------------------------------------------------------------------
# checkpoint format


@dataclass
class Checkpoint:
    model: MusicEncoder
    paradigm: str
    step: int
    config: dict
    discrete_head: DiscreteHead | None = None
    regression_head: RegressionHead | None = None
    teacher: EmaTeacher | None = None
    moments: dict = field(default_factory=dict)


def _write_entry(fh, name: str, data: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", data.ndim))
    for dim in data.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def _read_entry(fh):
    raw = fh.read(2)
    if len(raw) < 2:
        raise WorkbenchError("truncated checkpoint entry")
    (name_len,) = struct.unpack("<H", raw)
    name = fh.read(name_len).decode("utf-8")
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(count * 4), dtype="<f4").reshape(shape).copy()
    return name, data


def save_checkpoint(path, model: MusicEncoder, paradigm: str = "none", step: int = 0,
                    discrete_head: DiscreteHead | None = None,
                    regression_head: RegressionHead | None = None,
                    teacher: EmaTeacher | None = None,
                    moments: dict | None = None,
                    extra_config: dict | None = None) -> None:
    if paradigm not in PARADIGMS:
        raise WorkbenchError(f"unknown paradigm {paradigm!r}")
    blob = {"encoder": model.config.to_dict()}
    if discrete_head is not None:
        blob["discrete_head"] = {"n_codes": discrete_head.n_codes,
                                 "proj_dim": discrete_head.proj_dim,
                                 "temperature": discrete_head.temperature}
    if regression_head is not None:
        blob["regression_head"] = True
    if extra_config:
        blob["extra"] = extra_config
    blob_bytes = json.dumps(blob, sort_keys=True).encode("utf-8")

    entries = list(model.state_arrays().items())
    if discrete_head is not None:
        entries += [(p.name, p.data) for p in discrete_head.parameters()]
    if regression_head is not None:
        entries += [(p.name, p.data) for p in regression_head.parameters()]
    if teacher is not None:
        entries += [(f"teacher.{name}", data)
                    for name, data in teacher.encoder.state_arrays().items()]
    for name, pair in (moments or {}).items():
        entries.append((f"adam.m.{name}", pair[0]))
        entries.append((f"adam.v.{name}", pair[1]))

    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIBQI", _CKPT_MAGIC, _CKPT_VERSION,
                             PARADIGMS.index(paradigm), step, len(blob_bytes)))
        fh.write(blob_bytes)
        fh.write(struct.pack("<I", len(entries)))
        for name, data in entries:
            _write_entry(fh, name, data)


def load_checkpoint(path) -> Checkpoint:
    from pathlib import Path as _Path
    if not _Path(path).exists():
        raise WorkbenchError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<4sIBQI"))
        if len(header) < struct.calcsize("<4sIBQI"):
            raise UnsupportedFormatError(f"{path}: not a checkpoint file (truncated)")
        magic, version, paradigm_id, step, blob_len = struct.unpack("<4sIBQI", header)
        if magic != _CKPT_MAGIC:
            raise UnsupportedFormatError(f"{path}: not a checkpoint file")
        if version != _CKPT_VERSION:
            raise UnsupportedFormatError(f"{path}: unsupported version {version}")
        blob = json.loads(fh.read(blob_len).decode("utf-8"))
        (n_entries,) = struct.unpack("<I", fh.read(4))
        entries = dict(_read_entry(fh) for _ in range(n_entries))

    config = EncoderConfig.from_dict(blob["encoder"])
    model = MusicEncoder(config, seed=0)
    model.load_state_arrays({k: v for k, v in entries.items()
                             if k in model._params})

    discrete_head = None
    if "discrete_head" in blob:
        spec = blob["discrete_head"]
        discrete_head = DiscreteHead(config.hidden, spec["n_codes"], spec["proj_dim"],
                                     spec["temperature"])
        discrete_head.proj_w.data = entries["discrete.proj_w"].copy()
        discrete_head.proj_b.data = entries["discrete.proj_b"].copy()
        discrete_head.code_embeddings.data = entries["discrete.codes"].copy()

    regression_head = None
    if blob.get("regression_head"):
        regression_head = RegressionHead(config.hidden)
        regression_head.w.data = entries["regression.w"].copy()
        regression_head.b.data = entries["regression.b"].copy()

    teacher = None
    teacher_arrays = {k[len("teacher."):]: v for k, v in entries.items()
                      if k.startswith("teacher.")}
    if teacher_arrays:
        teacher = EmaTeacher(model)
        teacher.encoder.load_state_arrays(teacher_arrays)
        teacher.encoder.set_trainable(False)

    moments = {}
    for key, value in entries.items():
        if key.startswith("adam.m."):
            name = key[len("adam.m."):]
            moments.setdefault(name, [None, None])[0] = value
        elif key.startswith("adam.v."):
            name = key[len("adam.v."):]
            moments.setdefault(name, [None, None])[1] = value

    return Checkpoint(model=model, paradigm=PARADIGMS[paradigm_id], step=step,
                      config=blob, discrete_head=discrete_head,
                      regression_head=regression_head, teacher=teacher,
                      moments=moments)
