"""The dual-branch temporal-spectral-spatial decoder.

Branch 1 consumes the raw EEG [N, 1, ch, T]; branch 2 consumes the
time-frequency power in two orientations, [N, ch, F, T] and its
channel/frequency transpose [N, F, ch, T].  Each branch runs

    time conv -> batch norm -> separable (depthwise) spatial or frequency
    conv -> batch norm -> ELU -> average pooling -> pointwise conv

and is reshaped to a [L_i, D] feature sequence.  Enabled branch outputs
are concatenated along the sequence axis, a learnable positional encoding
is added, and a post-norm transformer encoder plus a GAP/MLP head produce
the class logits.

Attention scores are scaled by sqrt(embed_dim) (the full embedding width,
not the per-head width); set ``per_head_scaling`` to use sqrt(head_dim)
instead.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DataError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"DTSS"
CHECKPOINT_VERSION = 1
BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LN_EPS = 1e-5


@dataclass
class ModelConfig:
    """Architecture hyperparameters.  Defaults are the full-scale recipe;
    geometry fields (channels/times/freqs/classes) come from the dataset."""

    n_channels: int
    n_times: int
    n_freqs: int
    n_classes: int
    branch_channels: int = 40        # width after the time convolutions
    embed_dim: int = 120             # width after the pointwise convolutions
    time_kernel_raw: int = 30        # branch-1 time kernel
    time_kernel_tfr: int = 125       # branch-2 time kernel
    pool_raw: int = 120              # branch-1 pooling kernel
    pool_raw_stride: int = 0         # 0 -> pool_raw // 10
    pool_tfr: int = 64               # branch-2 pooling kernel
    pool_tfr_stride: int = 0         # 0 -> pool_tfr // 2
    encoder_layers: int = 4
    encoder_heads: int = 10
    encoder_mlp_ratio: int = 2
    classifier_hidden: int = 64
    dropout: float = 0.0
    use_branch1: bool = True
    use_branch2_input1: bool = True
    use_branch2_input2: bool = True
    use_transformer: bool = True
    per_head_scaling: bool = False

    # -- derived geometry ----------------------------------------------------

    def raw_pool_stride(self) -> int:
        if self.pool_raw_stride:
            return self.pool_raw_stride
        if self.pool_raw % 10:
            raise DataError(f"pool_raw={self.pool_raw} not divisible by 10; set pool_raw_stride")
        return self.pool_raw // 10

    def tfr_pool_stride(self) -> int:
        if self.pool_tfr_stride:
            return self.pool_tfr_stride
        if self.pool_tfr % 2:
            raise DataError(f"pool_tfr={self.pool_tfr} not divisible by 2; set pool_tfr_stride")
        return self.pool_tfr // 2

    def seq_len_raw(self) -> int:
        t1 = self.n_times - self.time_kernel_raw + 1
        return (t1 - self.pool_raw) // self.raw_pool_stride() + 1

    def seq_len_tfr(self) -> int:
        t1 = self.n_times - self.time_kernel_tfr + 1
        return (t1 - self.pool_tfr) // self.tfr_pool_stride() + 1

    def fused_len(self) -> int:
        total = 0
        if self.use_branch1:
            total += self.seq_len_raw()
        if self.use_branch2_input1:
            total += self.seq_len_tfr()
        if self.use_branch2_input2:
            total += self.seq_len_tfr()
        return total

    def validate(self) -> None:
        for name in ("n_channels", "n_times", "n_freqs", "n_classes",
                     "branch_channels", "embed_dim", "classifier_hidden"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not (self.use_branch1 or self.use_branch2_input1 or self.use_branch2_input2):
            raise DataError("all branches disabled; at least one input must remain")
        if self.use_transformer:
            if self.encoder_layers < 1:
                raise DataError("encoder_layers must be >= 1 when the transformer is enabled")
            if self.embed_dim % self.encoder_heads:
                raise DataError(
                    f"embed_dim={self.embed_dim} not divisible by heads={self.encoder_heads}"
                )
        if not 0.0 <= self.dropout < 1.0:
            raise DataError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.use_branch1:
            if self.time_kernel_raw > self.n_times:
                raise DataError(
                    f"time_kernel_raw={self.time_kernel_raw} exceeds n_times={self.n_times}"
                )
            t1 = self.n_times - self.time_kernel_raw + 1
            if self.pool_raw > t1:
                raise DataError(f"pool_raw={self.pool_raw} exceeds conv output {t1}")
            if self.seq_len_raw() < 1:
                raise DataError("branch-1 sequence collapses to zero length")
        if self.use_branch2_input1 or self.use_branch2_input2:
            if self.time_kernel_tfr > self.n_times:
                raise DataError(
                    f"time_kernel_tfr={self.time_kernel_tfr} exceeds n_times={self.n_times}"
                )
            t1 = self.n_times - self.time_kernel_tfr + 1
            if self.pool_tfr > t1:
                raise DataError(f"pool_tfr={self.pool_tfr} exceeds conv output {t1}")
            if self.seq_len_tfr() < 1:
                raise DataError("branch-2 sequence collapses to zero length")


def config_from_preset(p, **geometry) -> ModelConfig:
    """Build a ModelConfig from a DatasetPreset plus its model overrides."""
    kwargs = dict(
        n_channels=p.n_channels,
        n_times=p.n_times,
        n_freqs=len(p.freqs()),
        n_classes=p.n_classes,
    )
    kwargs.update(p.model_overrides)
    kwargs.update(geometry)
    return ModelConfig(**kwargs)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class DualTsstModel:
    """Parameter container plus forward pass.

    Parameters live in an ordered name -> Tensor registry (creation order,
    which is also the checkpoint order); batch-norm running statistics are
    plain arrays in ``buffers``.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        self._rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

        c = config
        if c.use_branch1:
            self._build_branch("branch1", in_channels=1, spatial=c.n_channels,
                               time_kernel=c.time_kernel_raw)
        if c.use_branch2_input1:
            # channel axis feeds the conv input channels; frequency axis is spatial
            self._build_branch("branch2.view1", in_channels=c.n_channels,
                               spatial=c.n_freqs, time_kernel=c.time_kernel_tfr)
        if c.use_branch2_input2:
            self._build_branch("branch2.view2", in_channels=c.n_freqs,
                               spatial=c.n_channels, time_kernel=c.time_kernel_tfr)
        if c.use_transformer:
            self._param("pos_encoding",
                        self._rng.normal(0.0, 0.02, size=(c.fused_len(), c.embed_dim)))
            for i in range(c.encoder_layers):
                self._build_encoder_layer(f"encoder.{i}")
        self._linear_param("classifier.fc1", c.embed_dim, c.classifier_hidden)
        self._linear_param("classifier.fc2", c.classifier_hidden, c.n_classes)

    # -- construction helpers ------------------------------------------------

    def _param(self, name: str, array) -> Tensor:
        t = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def _uniform(self, shape, fan_in: int):
        bound = 1.0 / np.sqrt(fan_in)
        return self._rng.uniform(-bound, bound, size=shape)

    def _conv_param(self, name: str, cout: int, cin_g: int, kh: int, kw: int):
        self._param(name + ".weight", self._uniform((cout, cin_g, kh, kw), cin_g * kh * kw))

    def _linear_param(self, name: str, din: int, dout: int):
        self._param(name + ".weight", self._uniform((din, dout), din))
        self._param(name + ".bias", np.zeros(dout))

    def _bn_param(self, name: str, channels: int):
        self._param(name + ".gamma", np.ones(channels))
        self._param(name + ".beta", np.zeros(channels))
        self.buffers[name + ".running_mean"] = np.zeros(channels, dtype=self.dtype)
        self.buffers[name + ".running_var"] = np.ones(channels, dtype=self.dtype)

    def _build_branch(self, prefix: str, in_channels: int, spatial: int, time_kernel: int):
        c = self.config
        self._conv_param(f"{prefix}.tc", c.branch_channels, in_channels, 1, time_kernel)
        self._bn_param(f"{prefix}.bn1", c.branch_channels)
        # depthwise kernel spanning the full spatial (electrode or frequency) axis
        self._conv_param(f"{prefix}.sc", c.branch_channels, 1, spatial, 1)
        self._bn_param(f"{prefix}.bn2", c.branch_channels)
        self._conv_param(f"{prefix}.pwc", c.embed_dim, c.branch_channels, 1, 1)
        self._param(f"{prefix}.pwc.bias", np.zeros(c.embed_dim))

    def _build_encoder_layer(self, prefix: str):
        d = self.config.embed_dim
        hidden = d * self.config.encoder_mlp_ratio
        for proj in ("q", "k", "v", "o"):
            self._linear_param(f"{prefix}.{proj}", d, d)
        self._param(f"{prefix}.ln1.gamma", np.ones(d))
        self._param(f"{prefix}.ln1.beta", np.zeros(d))
        self._linear_param(f"{prefix}.mlp1", d, hidden)
        self._linear_param(f"{prefix}.mlp2", hidden, d)
        self._param(f"{prefix}.ln2.gamma", np.ones(d))
        self._param(f"{prefix}.ln2.beta", np.zeros(d))

    # -- forward pieces --------------------------------------------------------

    def _bn(self, x, name: str, train: bool):
        return T.batch_norm(
            x,
            self.params[name + ".gamma"],
            self.params[name + ".beta"],
            self.buffers[name + ".running_mean"],
            self.buffers[name + ".running_var"],
            train=train,
            momentum=BN_MOMENTUM,
            eps=BN_EPS,
        )

    def _branch(self, prefix: str, x, pool: int, stride: int, train: bool):
        c = self.config
        h = T.conv2d(x, self.params[f"{prefix}.tc.weight"])
        h = self._bn(h, f"{prefix}.bn1", train)
        h = T.conv2d(h, self.params[f"{prefix}.sc.weight"], groups=c.branch_channels)
        h = self._bn(h, f"{prefix}.bn2", train)
        h = T.elu(h)
        h = T.avg_pool2d(h, pool, stride)
        h = T.conv2d(h, self.params[f"{prefix}.pwc.weight"])
        h = h + T.reshape(self.params[f"{prefix}.pwc.bias"], (1, c.embed_dim, 1, 1))
        n, d, _, seq = h.shape
        h = T.reshape(h, (n, d, seq))
        return T.transpose(h, (0, 2, 1))  # [N, L, D]

    def branch1_forward(self, eeg, train: bool = False) -> Tensor:
        """Raw-EEG branch: [N, 1, ch, T] -> [N, L1, D]."""
        eeg = T.as_tensor(eeg)
        c = self.config
        if eeg.shape[1:] != (1, c.n_channels, c.n_times):
            raise DataError(
                f"branch-1 input {tuple(eeg.shape)} != (N, 1, {c.n_channels}, {c.n_times})"
            )
        return self._branch("branch1", eeg, c.pool_raw, c.raw_pool_stride(), train)

    def branch2_forward(self, tfr_view1, tfr_view2, train: bool = False):
        """Time-frequency branch on both orientations.

        ``tfr_view1`` is [N, ch, F, T]; ``tfr_view2`` must be the same data
        with channel and frequency axes swapped, [N, F, ch, T].
        Returns the tuple of enabled outputs, each [N, L2, D].
        """
        c = self.config
        v1 = T.as_tensor(tfr_view1) if tfr_view1 is not None else None
        v2 = T.as_tensor(tfr_view2) if tfr_view2 is not None else None
        if v1 is not None and v1.shape[1:] != (c.n_channels, c.n_freqs, c.n_times):
            raise DataError(
                f"branch-2 view-1 input {tuple(v1.shape)} != (N, {c.n_channels}, "
                f"{c.n_freqs}, {c.n_times})"
            )
        if v2 is not None and v2.shape[1:] != (c.n_freqs, c.n_channels, c.n_times):
            raise DataError(
                f"branch-2 view-2 input {tuple(v2.shape)} != (N, {c.n_freqs}, "
                f"{c.n_channels}, {c.n_times})"
            )
        if v1 is not None and v2 is not None and v1.shape[0] != v2.shape[0]:
            raise DataError("branch-2 views disagree on batch size")
        outs = []
        if c.use_branch2_input1:
            if v1 is None:
                raise DataError("branch-2 view 1 enabled but no input given")
            outs.append(self._branch("branch2.view1", v1, c.pool_tfr,
                                     c.tfr_pool_stride(), train))
        if c.use_branch2_input2:
            if v2 is None:
                raise DataError("branch-2 view 2 enabled but no input given")
            outs.append(self._branch("branch2.view2", v2, c.pool_tfr,
                                     c.tfr_pool_stride(), train))
        return tuple(outs)

    def fuse(self, branch_outputs) -> Tensor:
        """Concatenate branch sequences along the sequence axis, in the fixed
        order (branch 1, branch-2 view 1, branch-2 view 2)."""
        outputs = [b for b in branch_outputs if b is not None]
        if not outputs:
            raise DataError("no branch outputs to fuse")
        return T.concat(outputs, axis=-2)

    def encoder_forward(self, fused, train: bool = False,
                        rng: np.random.Generator | None = None,
                        attention_maps: list | None = None) -> Tensor:
        """Add the positional encoding, then run the post-norm encoder stack.

        When ``attention_maps`` is a list, each layer appends its attention
        weights [N, heads, L, L] for inspection.
        """
        c = self.config
        if not c.use_transformer:
            raise DataError("encoder_forward called with the transformer ablated")
        pos = self.params["pos_encoding"]
        if fused.shape[-2:] != pos.shape:
            raise DataError(
                f"fused sequence {tuple(fused.shape[-2:])} != positional encoding "
                f"{tuple(pos.shape)}"
            )
        x = fused + pos
        for i in range(c.encoder_layers):
            x = self._encoder_layer(f"encoder.{i}", x, train, rng, attention_maps)
        return x

    def _encoder_layer(self, prefix: str, x, train: bool,
                       rng: np.random.Generator | None,
                       attention_maps: list | None = None):
        a = self._mha(prefix, x, attention_maps)
        a = self._maybe_dropout(a, train, rng)
        x = T.layer_norm(x + a, self.params[f"{prefix}.ln1.gamma"],
                         self.params[f"{prefix}.ln1.beta"], eps=LN_EPS)
        m = T.linear(x, self.params[f"{prefix}.mlp1.weight"], self.params[f"{prefix}.mlp1.bias"])
        m = T.elu(m)
        m = T.linear(m, self.params[f"{prefix}.mlp2.weight"], self.params[f"{prefix}.mlp2.bias"])
        m = self._maybe_dropout(m, train, rng)
        return T.layer_norm(x + m, self.params[f"{prefix}.ln2.gamma"],
                            self.params[f"{prefix}.ln2.beta"], eps=LN_EPS)

    def _mha(self, prefix: str, x, attention_maps: list | None = None):
        c = self.config
        n, seq, d = x.shape
        heads = c.encoder_heads
        head_dim = d // heads
        q = T.linear(x, self.params[f"{prefix}.q.weight"], self.params[f"{prefix}.q.bias"])
        k = T.linear(x, self.params[f"{prefix}.k.weight"], self.params[f"{prefix}.k.bias"])
        v = T.linear(x, self.params[f"{prefix}.v.weight"], self.params[f"{prefix}.v.bias"])

        def split(t):
            t = T.reshape(t, (n, seq, heads, head_dim))
            return T.transpose(t, (0, 2, 1, 3))  # [N, h, L, hd]

        q, k, v = split(q), split(k), split(v)
        scale = head_dim if c.per_head_scaling else d
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(scale))
        attn = T.softmax(scores, axis=-1)
        if attention_maps is not None:
            attention_maps.append(attn.data)
        ctx = T.matmul(attn, v)  # [N, h, L, hd]
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (n, seq, d))
        return T.linear(ctx, self.params[f"{prefix}.o.weight"], self.params[f"{prefix}.o.bias"])

    def _maybe_dropout(self, x, train: bool, rng: np.random.Generator | None):
        if not train or self.config.dropout == 0.0:
            return x
        if rng is None:
            raise DataError("dropout > 0 requires an rng in training mode")
        return T.dropout(x, self.config.dropout, rng)

    def classify(self, encoded) -> Tensor:
        """GAP over the sequence axis, then the two-layer head; returns logits."""
        h = T.gap(encoded)
        h = T.linear(h, self.params["classifier.fc1.weight"], self.params["classifier.fc1.bias"])
        h = T.elu(h)
        return T.linear(h, self.params["classifier.fc2.weight"], self.params["classifier.fc2.bias"])

    def _encode(self, eeg, tfr, train: bool,
                rng: np.random.Generator | None) -> Tensor:
        """Fused (and, unless ablated, encoded) feature sequence [N, L, D]."""
        c = self.config
        outs = []
        if c.use_branch1:
            if eeg is None:
                raise DataError("branch 1 enabled but no EEG input given")
            x = np.asarray(eeg, dtype=self.dtype)
            if x.ndim != 3:
                raise DataError(f"EEG batch must be [N, ch, T], got {x.shape}")
            outs.append(self.branch1_forward(x[:, None, :, :], train=train))
        if c.use_branch2_input1 or c.use_branch2_input2:
            if tfr is None:
                raise DataError("branch 2 enabled but no TFR input given")
            t = np.asarray(tfr, dtype=self.dtype)
            if t.ndim != 4:
                raise DataError(f"TFR batch must be [N, ch, F, T], got {t.shape}")
            v1 = t if c.use_branch2_input1 else None
            v2 = np.ascontiguousarray(t.transpose(0, 2, 1, 3)) if c.use_branch2_input2 else None
            outs.extend(self.branch2_forward(v1, v2, train=train))
        fused = self.fuse(outs)
        if c.use_transformer:
            fused = self.encoder_forward(fused, train=train, rng=rng)
        return fused

    def pooled_features(self, eeg, tfr, train: bool = False,
                        rng: np.random.Generator | None = None) -> Tensor:
        """Pre-classifier features [N, D]: the encoded sequence after GAP."""
        return T.gap(self._encode(eeg, tfr, train, rng))

    def forward(self, eeg, tfr, train: bool = False,
                rng: np.random.Generator | None = None) -> Tensor:
        """Full pass from input views to logits [N, n_classes]."""
        return self.classify(self._encode(eeg, tfr, train, rng))

    # -- bookkeeping -----------------------------------------------------------

    def param_count(self) -> int:
        """Number of trainable scalars (buffers excluded)."""
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- checkpointing -----------------------------------------------------------

    def save(self, path) -> None:
        """Checkpoint: magic, version, config JSON, then named tensors
        (parameters first, then buffers) in registry order as float32."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cfg = json.dumps(dataclasses.asdict(self.config)).encode()
        entries = [(n, p.data) for n, p in self.params.items()]
        entries += [(n, b) for n, b in self.buffers.items()]
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", CHECKPOINT_VERSION))
            fh.write(struct.pack("<I", len(cfg)))
            fh.write(cfg)
            fh.write(struct.pack("<I", len(entries)))
            for name, arr in entries:
                nb = name.encode()
                arr32 = np.ascontiguousarray(arr, dtype="<f4")
                fh.write(struct.pack("<I", len(nb)))
                fh.write(nb)
                fh.write(struct.pack("<B", arr32.ndim))
                fh.write(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
                fh.write(arr32.tobytes())

    @classmethod
    def load(cls, path, dtype=np.float64) -> "DualTsstModel":
        path = Path(path)
        blob = path.read_bytes()
        if blob[:4] != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: bad checkpoint magic {blob[:4]!r}")
        version, cfg_len = struct.unpack_from("<II", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        cfg = ModelConfig(**json.loads(blob[off : off + cfg_len].decode()))
        off += cfg_len
        (n_entries,) = struct.unpack_from("<I", blob, off)
        off += 4
        model = cls(cfg, rng=np.random.default_rng(0), dtype=dtype)
        seen = set()
        for _ in range(n_entries):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + name_len].decode()
            off += name_len
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            count = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
            if name in model.params:
                if model.params[name].data.shape != shape:
                    raise DataError(f"{path}: {name} has shape {shape}, expected "
                                    f"{model.params[name].data.shape}")
                model.params[name].data = arr.astype(dtype)
            elif name in model.buffers:
                model.buffers[name][...] = arr
            else:
                raise DataError(f"{path}: unknown tensor {name!r} for this configuration")
            seen.add(name)
        missing = (set(model.params) | set(model.buffers)) - seen
        if missing:
            raise DataError(f"{path}: checkpoint is missing tensors: {sorted(missing)}")
        return model
