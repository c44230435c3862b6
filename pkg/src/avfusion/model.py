"""Two-branch transformer with cross-modal attention fusion and a two-output head.

Audio and video feature sequences pass through independent self-attention
encoder branches; a cross-modal layer attends each branch to the other and
adds the results back through learnable scalar weights alpha/beta; a linear
head maps the fused representation to per-frame (valence, arousal).
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import binio

CHECKPOINT_MAGIC = b"AVCK"
CHECKPOINT_VERSION = 1

ParameterSet = dict[str, ad.Tensor]


@dataclass
class ModelConfig:
    d_audio: int
    d_video: int
    num_layers: int = 2
    d_model: int = 512
    num_heads: int = 4
    ffn_mult: int = 4
    seq_len: int = 100

    def __post_init__(self):
        for name in ("d_audio", "d_video", "num_layers", "d_model", "num_heads", "ffn_mult", "seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.num_heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")


@lru_cache(maxsize=8)
def _pe_table(seq_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    half = (d_model + 1) // 2
    freq = 1.0 / np.power(10000.0, 2.0 * np.arange(half) / d_model)
    pe = np.zeros((seq_len, d_model))
    angles = pos * freq
    pe[:, 0::2] = np.sin(angles[:, : (d_model + 1) // 2])
    pe[:, 1::2] = np.cos(angles[:, : d_model // 2])
    pe.setflags(write=False)
    return pe


def positional_encoding(seq_len: int, d_model: int) -> np.ndarray:
    """Sinusoidal position table [seq_len x d_model], values in [-1, 1]."""
    return _pe_table(seq_len, d_model)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter name -> shape map; also fixes the creation order."""
    d, ff = config.d_model, config.ffn_mult * config.d_model
    shapes: dict[str, tuple[int, ...]] = {}
    for branch, d_in in (("audio", config.d_audio), ("video", config.d_video)):
        shapes[f"{branch}.in_proj.W"] = (d_in, d)
        shapes[f"{branch}.in_proj.b"] = (d,)
        for i in range(config.num_layers):
            pre = f"{branch}.layers.{i}"
            for w in ("Wq", "Wk", "Wv", "Wo"):
                shapes[f"{pre}.attn.{w}"] = (d, d)
            shapes[f"{pre}.ln1.gain"] = (d,)
            shapes[f"{pre}.ln1.bias"] = (d,)
            shapes[f"{pre}.ffn.W1"] = (d, ff)
            shapes[f"{pre}.ffn.b1"] = (ff,)
            shapes[f"{pre}.ffn.W2"] = (ff, d)
            shapes[f"{pre}.ffn.b2"] = (d,)
            shapes[f"{pre}.ln2.gain"] = (d,)
            shapes[f"{pre}.ln2.bias"] = (d,)
    for side in ("audio", "video"):
        for w in ("Wq", "Wk", "Wv", "Wo"):
            shapes[f"cross.{side}.attn.{w}"] = (d, d)
    shapes["fusion.alpha"] = ()
    shapes["fusion.beta"] = ()
    shapes["head.W"] = (d, 2)
    shapes["head.b"] = (2,)
    return shapes


def init_params(config: ModelConfig, seed: int) -> ParameterSet:
    """Glorot-uniform weights, zero biases, unit layer-norm gains, alpha=beta=1."""
    rng = np.random.default_rng(seed)
    params: ParameterSet = {}
    for name, shape in param_shapes(config).items():
        if name.endswith((".gain",)) :
            data = np.ones(shape)
        elif name in ("fusion.alpha", "fusion.beta"):
            data = np.asarray(1.0)
        elif len(shape) == 2:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-limit, limit, shape)
        else:
            data = np.zeros(shape)
        params[name] = ad.Tensor(data, requires_grad=True)
    return params


def clone_params(params: ParameterSet) -> ParameterSet:
    out: ParameterSet = {}
    for name, p in params.items():
        out[name] = ad.Tensor(p.data.copy(), requires_grad=True)
    return out


def multi_head_attention(q_src: ad.Tensor, kv_src: ad.Tensor,
                         wq: ad.Tensor, wk: ad.Tensor, wv: ad.Tensor, wo: ad.Tensor,
                         num_heads: int, block_len: int | None = None) -> ad.Tensor:
    """Scaled dot-product attention: softmax(Q_h K_h^T / sqrt(d_h)) V_h per head.

    Q comes from q_src, K and V from kv_src; the softmax reduces over the
    key axis; head outputs are concatenated and output-projected. Inputs may
    stack several independent sequences of length block_len (attention never
    crosses block boundaries); by default one sequence spans all rows.
    """
    if q_src.data.shape != kv_src.data.shape or q_src.data.ndim != 2:
        raise ad.ShapeError(f"attention: q_src {q_src.data.shape} vs kv_src {kv_src.data.shape}")
    block_len = q_src.data.shape[0] if block_len is None else block_len
    q, k, v = ad.matmul(q_src, wq), ad.matmul(kv_src, wk), ad.matmul(kv_src, wv)
    return ad.matmul(ad.attention(q, k, v, num_heads, block_len), wo)


def _branch_attention(params: ParameterSet, prefix: str):
    return (params[f"{prefix}.Wq"], params[f"{prefix}.Wk"],
            params[f"{prefix}.Wv"], params[f"{prefix}.Wo"])


def encoder_forward(x: ad.Tensor, params: ParameterSet, branch: str,
                    config: ModelConfig, batch: int = 1) -> ad.Tensor:
    """Input projection + positional encoding, then post-norm self-attention blocks.

    `x` may stack `batch` independent sequences along its rows; self-attention
    stays within each sequence.
    """
    seq_len = x.data.shape[0] // batch
    h = ad.linear(x, params[f"{branch}.in_proj.W"], params[f"{branch}.in_proj.b"])
    pe = positional_encoding(seq_len, config.d_model)
    h = ad.add(h, ad.Tensor(pe if batch == 1 else np.tile(pe, (batch, 1))))
    for i in range(config.num_layers):
        pre = f"{branch}.layers.{i}"
        attn = multi_head_attention(h, h, *_branch_attention(params, f"{pre}.attn"),
                                    config.num_heads, block_len=seq_len)
        h = ad.layer_norm(ad.add(h, attn), params[f"{pre}.ln1.gain"], params[f"{pre}.ln1.bias"])
        ff = ad.linear(ad.relu(ad.linear(h, params[f"{pre}.ffn.W1"], params[f"{pre}.ffn.b1"])),
                       params[f"{pre}.ffn.W2"], params[f"{pre}.ffn.b2"])
        h = ad.layer_norm(ad.add(h, ff), params[f"{pre}.ln2.gain"], params[f"{pre}.ln2.bias"])
    return h


def cross_modal_fuse(enc_a: ad.Tensor, enc_v: ad.Tensor, params: ParameterSet,
                     num_heads: int, block_len: int | None = None) -> ad.Tensor:
    """Attend each branch to the other, add back with alpha/beta, sum the branches."""
    x_a = multi_head_attention(enc_a, enc_v, *_branch_attention(params, "cross.audio.attn"),
                               num_heads, block_len=block_len)
    x_v = multi_head_attention(enc_v, enc_a, *_branch_attention(params, "cross.video.attn"),
                               num_heads, block_len=block_len)
    aud = ad.add(enc_a, ad.mul(x_a, params["fusion.alpha"]))
    vid = ad.add(enc_v, ad.mul(x_v, params["fusion.beta"]))
    return ad.add(aud, vid)


def model_forward(audio: ad.Tensor, video: ad.Tensor, params: ParameterSet,
                  config: ModelConfig, batch: int = 1) -> ad.Tensor:
    """Per-frame (valence, arousal) predictions, shape [batch*seq_len x 2].

    With batch > 1 the inputs stack that many seq_len-frame sequences row-wise
    and are processed independently (attention never crosses sequences).
    """
    rows = batch * config.seq_len
    if audio.data.shape != (rows, config.d_audio):
        raise ad.ShapeError(f"model_forward: audio {audio.data.shape} vs expected "
                            f"{(rows, config.d_audio)}")
    if video.data.shape != (rows, config.d_video):
        raise ad.ShapeError(f"model_forward: video {video.data.shape} vs expected "
                            f"{(rows, config.d_video)}")
    enc_a = encoder_forward(audio, params, "audio", config, batch)
    enc_v = encoder_forward(video, params, "video", config, batch)
    fused = cross_modal_fuse(enc_a, enc_v, params, config.num_heads,
                             block_len=config.seq_len)
    return ad.linear(fused, params["head.W"], params["head.b"])


# ---------------------------------------------------------------------------
# checkpoint format: magic "AVCK", u32 version, u32 config-JSON length,
# config JSON, u32 param count, then per param: u16 name length, name,
# u8 rank, u32 dims[rank], f32 data row-major. Little-endian throughout.


def save_checkpoint(params: ParameterSet, config: ModelConfig, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    binio.write_u32(buf, CHECKPOINT_VERSION)
    cfg = json.dumps(asdict(config), sort_keys=True, separators=(",", ":")).encode("utf-8")
    binio.write_u32(buf, len(cfg))
    buf.write(cfg)
    binio.write_u32(buf, len(params))
    for name, p in params.items():
        encoded = name.encode("utf-8")
        binio.write_u16(buf, len(encoded))
        buf.write(encoded)
        binio.write_u8(buf, p.data.ndim)
        for dim in p.data.shape:
            binio.write_u32(buf, dim)
        binio.write_f32_array(buf, p.data)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> tuple[ParameterSet, ModelConfig]:
    with open(path, "rb") as f:
        binio.expect_magic(f, CHECKPOINT_MAGIC)
        binio.expect_version(f, CHECKPOINT_VERSION)
        cfg_len = binio.read_u32(f, "config length")
        cfg_raw = binio.read_exact(f, cfg_len, "config JSON")
        try:
            config = ModelConfig(**json.loads(cfg_raw.decode("utf-8")))
        except (ValueError, TypeError) as exc:
            raise binio.FileFormatError(f"invalid checkpoint config: {exc}") from exc
        expected = param_shapes(config)
        n = binio.read_u32(f, "param count")
        if n != len(expected):
            raise binio.FileFormatError(
                f"shape inconsistency: {n} params in file, config implies {len(expected)}")
        params: ParameterSet = {}
        for _ in range(n):
            name_len = binio.read_u16(f, "param name length")
            name = binio.read_exact(f, name_len, "param name").decode("utf-8")
            rank = binio.read_u8(f, "param rank")
            shape = tuple(binio.read_u32(f, "param dim") for _ in range(rank))
            if name not in expected or expected[name] != shape:
                raise binio.FileFormatError(
                    f"shape inconsistency: param {name!r} has shape {shape}, "
                    f"expected {expected.get(name)}")
            params[name] = ad.Tensor(binio.read_f32_array(f, shape, f"param {name!r} data"),
                                     requires_grad=True)
    return params, config
