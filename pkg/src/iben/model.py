"""The two-branch funniness regressor.

Branch A runs a Bi-GRU over the fused encoder-layer matrix; branch B
runs a Bi-GRU and a multi-kernel convolution bank over the word-vector
matrix.  Each enabled branch is projected through its own dense layer,
the projections are concatenated, and an affine head emits one real.

Either branch (and either branch-B sub-model) can be switched off to
reproduce the single-component architectures of the ablation grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import DataFormatError

CHECKPOINT_SCHEMA = 1


@dataclass(frozen=True)
class ModelConfig:
    use_bert_branch: bool = True
    use_emb_branch: bool = True
    emb_submodel: str = "both"  # bigru | cnn | both
    fused_width: int = 4096  # columns of the branch-A input matrix
    n_pairs: int = 12  # rows of the branch-A input matrix
    emb_dim: int = 900  # columns of the branch-B input matrix
    hidden_size: int = 128
    dense_size: int = 64
    kernel_sizes: tuple[int, ...] = (1, 2, 3, 4)
    filters_per_kernel: int = 9
    dense_activation: bool = True  # relu after the per-branch dense layers
    use_bias: bool = True
    learn_layer_weights: bool = False
    seed: int = 0

    def __post_init__(self):
        if not (self.use_bert_branch or self.use_emb_branch):
            raise ValueError("at least one branch must be enabled")
        if self.emb_submodel not in ("bigru", "cnn", "both"):
            raise ValueError(f"unknown emb_submodel {self.emb_submodel!r}")
        for name in ("fused_width", "n_pairs", "emb_dim", "hidden_size",
                     "dense_size", "filters_per_kernel"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.kernel_sizes or any(k < 1 for k in self.kernel_sizes):
            raise ValueError("kernel sizes must be positive")
        object.__setattr__(self, "kernel_sizes", tuple(self.kernel_sizes))


def _glorot(rng, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, shape)


class GruCell:
    """One direction's gate parameters; step() applies the gate equations."""

    def __init__(self, input_size: int, hidden_size: int, name: str, rng,
                 use_bias: bool = True):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.use_bias = use_bias
        H, I = hidden_size, input_size
        self.W_z = Parameter(_glorot(rng, (H, I), I, H), f"{name}.W_z")
        self.W_r = Parameter(_glorot(rng, (H, I), I, H), f"{name}.W_r")
        self.W_h = Parameter(_glorot(rng, (H, I), I, H), f"{name}.W_h")
        self.U_z = Parameter(_glorot(rng, (H, H), H, H), f"{name}.U_z")
        self.U_r = Parameter(_glorot(rng, (H, H), H, H), f"{name}.U_r")
        self.U_h = Parameter(_glorot(rng, (H, H), H, H), f"{name}.U_h")
        if use_bias:
            self.b_z = Parameter(np.zeros(H), f"{name}.b_z")
            self.b_r = Parameter(np.zeros(H), f"{name}.b_r")
            self.b_h = Parameter(np.zeros(H), f"{name}.b_h")
        else:
            self.b_z = self.b_r = self.b_h = None
        self._ones = Tensor(np.ones(H))

    def parameters(self) -> list[Parameter]:
        params = [self.W_z, self.W_r, self.W_h, self.U_z, self.U_r, self.U_h]
        if self.use_bias:
            params += [self.b_z, self.b_r, self.b_h]
        return params

    def step(self, x: Tensor, h_prev: Tensor) -> Tensor:
        """z gates the old state; (1 - z) admits the tanh candidate."""
        z_pre = ad.add(ad.matmul(self.W_z, x), ad.matmul(self.U_z, h_prev))
        r_pre = ad.add(ad.matmul(self.W_r, x), ad.matmul(self.U_r, h_prev))
        if self.use_bias:
            z_pre = ad.add(z_pre, self.b_z)
            r_pre = ad.add(r_pre, self.b_r)
        z = ad.sigmoid(z_pre)
        r = ad.sigmoid(r_pre)
        h_pre = ad.add(ad.matmul(self.W_h, x), ad.hadamard(r, ad.matmul(self.U_h, h_prev)))
        if self.use_bias:
            h_pre = ad.add(h_pre, self.b_h)
        h_tilde = ad.tanh(h_pre)
        keep = ad.hadamard(z, h_prev)
        update = ad.hadamard(ad.sub(self._ones, z), h_tilde)
        return ad.add(keep, update)


class BiGru:
    """Forward and backward cells with independent parameters."""

    def __init__(self, input_size: int, hidden_size: int, name: str, rng,
                 use_bias: bool = True):
        self.fwd = GruCell(input_size, hidden_size, f"{name}.fwd", rng, use_bias)
        self.bwd = GruCell(input_size, hidden_size, f"{name}.bwd", rng, use_bias)

    def parameters(self) -> list[Parameter]:
        return self.fwd.parameters() + self.bwd.parameters()


def _seq_rows(seq: Tensor) -> list[Tensor]:
    if len(seq.shape) != 2:
        raise ad.ShapeError(f"sequence input must be 2-D, got shape {seq.shape}")
    T, width = seq.shape
    return [ad.reshape(ad.slice_axis(seq, 0, t, t + 1), (width,)) for t in range(T)]


def _run_cell(rows, cell: GruCell, h0: Tensor | None) -> list[Tensor]:
    h = h0 if h0 is not None else Tensor(np.zeros(cell.hidden_size))
    states = []
    for x in rows:
        h = cell.step(x, h)
        states.append(h)
    return states


def gru_forward(seq: Tensor, cell: GruCell, h0: Tensor | None = None) -> Tensor:
    """Apply the cell along the sequence; row t holds the state after step t."""
    return ad.stack_rows(_run_cell(_seq_rows(seq), cell, h0))


def bi_gru(seq: Tensor, params: BiGru) -> Tensor:
    """Row t is the forward state at t joined with the backward state at t.

    The backward half comes from running the backward cell over the
    reversed sequence and re-reversing its states.
    """
    rows = _seq_rows(seq)
    fwd_states = _run_cell(rows, params.fwd, None)
    bwd_states = _run_cell(list(reversed(rows)), params.bwd, None)[::-1]
    return ad.stack_rows(
        [ad.concat([f, b]) for f, b in zip(fwd_states, bwd_states)]
    )


def pool_states(states: Tensor) -> Tensor:
    """Max-over-time block followed by avg-over-time block; length 4H."""
    return ad.concat([ad.max_over_time(states), ad.avg_over_time(states)])


class ConvBank:
    """One kernel tensor and bias per kernel size."""

    def __init__(self, emb_dim: int, kernel_sizes, filters_per_kernel: int,
                 name: str, rng):
        self.kernel_sizes = tuple(kernel_sizes)
        self.kernels = {}
        self.biases = {}
        for k in self.kernel_sizes:
            shape = (filters_per_kernel, k, emb_dim)
            self.kernels[k] = Parameter(
                _glorot(rng, shape, k * emb_dim, filters_per_kernel), f"{name}.k{k}.kernels"
            )
            self.biases[k] = Parameter(np.zeros(filters_per_kernel), f"{name}.k{k}.bias")

    @property
    def total_filters(self) -> int:
        return sum(self.kernels[k].shape[0] for k in self.kernel_sizes)

    def parameters(self) -> list[Parameter]:
        params = []
        for k in self.kernel_sizes:
            params += [self.kernels[k], self.biases[k]]
        return params


def conv_features(matrix: Tensor, bank: ConvBank) -> Tensor:
    """Per kernel size: valid convolution, relu, max over time; concatenated."""
    outs = []
    for k in bank.kernel_sizes:
        conv = ad.conv1d(matrix, bank.kernels[k], bank.biases[k])
        outs.append(ad.max_over_time(ad.relu(conv)))
    return ad.concat(outs)


class Dense:
    def __init__(self, in_size: int, out_size: int, name: str, rng,
                 use_bias: bool = True):
        self.W = Parameter(_glorot(rng, (out_size, in_size), in_size, out_size),
                           f"{name}.W")
        self.b = Parameter(np.zeros(out_size), f"{name}.b") if use_bias else None

    def __call__(self, v: Tensor) -> Tensor:
        out = ad.matmul(self.W, v)
        if self.b is not None:
            out = ad.add(out, self.b)
        return out

    def parameters(self) -> list[Parameter]:
        return [self.W] if self.b is None else [self.W, self.b]


def _input_matrix(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(getattr(x, "data", x))


class IbenModel:
    """All trainable parameters of both branches plus the prediction head."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        H = config.hidden_size
        self._params: list[Parameter] = []

        self.branch_a = None
        self.layer_weights = None
        if config.use_bert_branch:
            self.branch_a = BiGru(config.fused_width, H, "branch_a", rng, config.use_bias)
            self._params += self.branch_a.parameters()
            if config.learn_layer_weights:
                self.layer_weights = [
                    Parameter(np.asarray(1.0), f"layer_weights.alpha_{i + 1}")
                    for i in range(config.n_pairs)
                ]
                self._params += self.layer_weights

        self.branch_b_rnn = None
        self.branch_b_conv = None
        if config.use_emb_branch:
            if config.emb_submodel in ("bigru", "both"):
                self.branch_b_rnn = BiGru(config.emb_dim, H, "branch_b_rnn", rng,
                                          config.use_bias)
                self._params += self.branch_b_rnn.parameters()
            if config.emb_submodel in ("cnn", "both"):
                self.branch_b_conv = ConvBank(config.emb_dim, config.kernel_sizes,
                                              config.filters_per_kernel,
                                              "branch_b_conv", rng)
                self._params += self.branch_b_conv.parameters()

        self.dense_a = None
        if config.use_bert_branch:
            self.dense_a = Dense(4 * H, config.dense_size, "dense_a", rng, config.use_bias)
            self._params += self.dense_a.parameters()
        self.dense_b = None
        if config.use_emb_branch:
            b_width = 0
            if self.branch_b_rnn is not None:
                b_width += 4 * H
            if self.branch_b_conv is not None:
                b_width += self.branch_b_conv.total_filters
            self.dense_b = Dense(b_width, config.dense_size, "dense_b", rng, config.use_bias)
            self._params += self.dense_b.parameters()

        head_width = config.dense_size * (int(config.use_bert_branch)
                                          + int(config.use_emb_branch))
        self.head = Dense(head_width, 1, "head", rng, config.use_bias)
        self._params += self.head.parameters()

    def parameters(self) -> list[Parameter]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params:
            p.zero_grad()

    def forward(self, fused=None, emb=None) -> Tensor:
        """Scalar prediction; inputs for disabled branches are ignored."""
        feats = []
        if self.config.use_bert_branch:
            if fused is None:
                raise ValueError("encoder branch is enabled but got no fused input")
            x = _input_matrix(fused)
            if x.shape[1] != self.config.fused_width:
                raise ad.ShapeError(
                    f"fused input width {x.shape[1]} != configured {self.config.fused_width}"
                )
            if self.layer_weights is not None:
                if x.shape[0] != self.config.n_pairs:
                    raise ad.ShapeError(
                        f"fused input has {x.shape[0]} rows, expected {self.config.n_pairs}"
                    )
                rows = _seq_rows(x)
                x = ad.stack_rows(
                    [ad.smul(row, w) for row, w in zip(rows, self.layer_weights)]
                )
            va = self.dense_a(pool_states(bi_gru(x, self.branch_a)))
            if self.config.dense_activation:
                va = ad.relu(va)
            feats.append(va)
        if self.config.use_emb_branch:
            if emb is None:
                raise ValueError("embedding branch is enabled but got no matrix input")
            x = _input_matrix(emb)
            if x.shape[1] != self.config.emb_dim:
                raise ad.ShapeError(
                    f"embedding width {x.shape[1]} != configured {self.config.emb_dim}"
                )
            parts = []
            if self.branch_b_rnn is not None:
                parts.append(pool_states(bi_gru(x, self.branch_b_rnn)))
            if self.branch_b_conv is not None:
                parts.append(conv_features(x, self.branch_b_conv))
            vb = self.dense_b(parts[0] if len(parts) == 1 else ad.concat(parts))
            if self.config.dense_activation:
                vb = ad.relu(vb)
            feats.append(vb)
        joined = feats[0] if len(feats) == 1 else ad.concat(feats)
        return ad.reshape(self.head(joined), ())

    def predict(self, fused=None, emb=None, clamp: bool = False) -> float:
        """Forward pass outside any tape, as a plain float."""
        value = self.forward(fused=fused, emb=emb).item()
        if clamp:
            value = min(max(value, 0.0), 3.0)
        return value


# ---------------------------------------------------------------------------
# checkpoints: one JSON header line, then a little-endian float64 blob

def _config_to_json(config: ModelConfig) -> dict:
    data = asdict(config)
    data["kernel_sizes"] = list(config.kernel_sizes)
    return data


def _config_from_json(data) -> ModelConfig:
    data = dict(data)
    data["kernel_sizes"] = tuple(data.get("kernel_sizes", (1, 2, 3, 4)))
    try:
        return ModelConfig(**data)
    except (TypeError, ValueError) as exc:
        raise DataFormatError(f"checkpoint config is invalid: {exc}") from exc


def save_checkpoint(model: IbenModel, path, manifest: dict | None = None) -> None:
    """Write the model to ``path``; ``manifest`` rides along in the header.

    The manifest is free-form JSON (e.g. the resolved run configuration)
    so a checkpoint records how its input features were produced.
    """
    params = model.parameters()
    entries = []
    offset = 0
    for p in params:
        entries.append({"name": p.name, "shape": list(p.shape), "offset": offset})
        offset += p.values.size * 8
    header = {
        "schema": CHECKPOINT_SCHEMA,
        "config": _config_to_json(model.config),
        "seed": model.config.seed,
        "params": entries,
        "blob_bytes": offset,
    }
    if manifest is not None:
        header["manifest"] = manifest
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for p in params:
            fh.write(p.values.astype("<f8").tobytes())


def _read_checkpoint_header(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: unreadable checkpoint header") from exc
    if not isinstance(header, dict):
        raise DataFormatError(f"{path}: checkpoint header is not a JSON object")
    return header, blob


def checkpoint_manifest(path) -> dict | None:
    """Return the manifest stored alongside the weights, if any."""
    header, _ = _read_checkpoint_header(path)
    manifest = header.get("manifest")
    if manifest is not None and not isinstance(manifest, dict):
        raise DataFormatError(f"{path}: checkpoint manifest is not a JSON object")
    return manifest


def load_checkpoint(path) -> IbenModel:
    """Rebuild a model from a checkpoint, validating every declared shape."""
    header, blob = _read_checkpoint_header(path)
    if header.get("schema") != CHECKPOINT_SCHEMA:
        raise DataFormatError(f"{path}: unsupported checkpoint schema {header.get('schema')!r}")
    model = IbenModel(_config_from_json(header.get("config", {})))
    params = model.parameters()
    entries = header.get("params", [])
    if len(entries) != len(params):
        raise DataFormatError(
            f"{path}: checkpoint lists {len(entries)} parameters, model has {len(params)}"
        )
    if header.get("blob_bytes") != len(blob):
        raise DataFormatError(
            f"{path}: blob is {len(blob)} bytes, header declares {header.get('blob_bytes')}"
        )
    for p, entry in zip(params, entries):
        if entry.get("name") != p.name:
            raise DataFormatError(
                f"{path}: parameter {entry.get('name')!r} does not match model's {p.name!r}"
            )
        if tuple(entry.get("shape", ())) != p.shape:
            raise DataFormatError(f"{path}: shape mismatch for parameter {p.name!r}")
        offset = entry.get("offset")
        nbytes = p.values.size * 8
        if not isinstance(offset, int) or offset < 0 or offset + nbytes > len(blob):
            raise DataFormatError(f"{path}: bad offset for parameter {p.name!r}")
        flat = np.frombuffer(blob, dtype="<f8", count=p.values.size, offset=offset)
        p.values[...] = flat.reshape(p.shape)
    return model
