"""Encoder-decoder summarization model.

The encoder runs sparse (windowed + shot-anchor) self-attention over the
valid frames of a video; the decoder consumes embedded summary-frame
features under a causal mask, cross-attends into the encoder output, and a
linear head followed by a row softmax turns each decoder step into a
distribution over the video's frames.

All computation happens on the valid T frames only, so padding a video
changes nothing bitwise and no gradient can reach padded positions.
"""

import dataclasses
import json
import struct

import numpy as np

from .attention import (
    ConfigError,
    SELF_KINDS,
    build_causal_pattern,
    build_cross_pattern,
    build_encoder_pattern,
    canonical_kind,
    multi_head,
)
from .data_io import DataError, ParseError
from .numerics import (
    Matrix,
    ParameterStore,
    add,
    col_slice,
    concat_rows,
    linear,
    layer_norm,
    pad_rows,
    relu,
    softmax_row,
    xavier_uniform,
)
from .segmentation import resolve_shots

CHECKPOINT_MAGIC = b"FTNC"
CHECKPOINT_VERSION = 1

_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclasses.dataclass
class ModelConfig:
    n_layers: int = 6
    d: int = 64
    d_ff: int = 2048
    h: int = 8
    window: int = 17
    input_dim: int = 1024
    max_len: int = 1536
    seed: int = 0
    attention: str = "local_global"
    globals_per_shot: int = 3
    kts_max_shots: int = 0  # 0 = scale with length
    kts_penalty: float = 1.0
    summary_ratio: float = 0.15
    decode_aggregate: str = "max"
    ln_eps: float = 1e-8
    pos_base: float = 10000.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.d < 1 or self.d % self.h != 0:
            raise ConfigError("d=%d must be a positive multiple of h=%d"
                              % (self.d, self.h))
        if self.d_ff < 1 or self.input_dim < 1 or self.max_len < 1:
            raise ConfigError("d_ff, input_dim, max_len must be positive")
        self.attention = canonical_kind(self.attention)
        if self.attention not in SELF_KINDS:
            raise ConfigError("encoder attention must be one of %s"
                              % sorted(SELF_KINDS))
        if not 1 <= self.globals_per_shot <= 3:
            raise ConfigError("globals_per_shot must be 1..3")
        if not 0.0 < self.summary_ratio <= 1.0:
            raise ConfigError("summary_ratio must be in (0, 1]")
        if self.decode_aggregate not in ("max", "mean"):
            raise ConfigError("decode_aggregate must be 'max' or 'mean'")
        if self.dtype not in _DTYPES:
            raise ConfigError("dtype must be one of %s" % sorted(_DTYPES))
        if self.kts_max_shots < 0 or self.kts_penalty < 0:
            raise ConfigError("kts settings must be non-negative")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError("unknown config keys: %s" % sorted(unknown))
        return cls(**doc)


# ---------------------------------------------------------------------------
# parameters


def _param_specs(config):
    """(name, rows, cols, init) for every parameter, in creation order."""
    d, dff = config.d, config.d_ff
    specs = [
        ("embed.enc.w", config.input_dim, d, "xavier"),
        ("embed.enc.b", 1, d, "zeros"),
        ("embed.dec.w", config.input_dim, d, "xavier"),
        ("embed.dec.b", 1, d, "zeros"),
        ("decoder.start", 1, d, "xavier"),
    ]

    def block(prefix):
        return [
            (prefix + ".wq", d, d, "xavier"),
            (prefix + ".wk", d, d, "xavier"),
            (prefix + ".wv", d, d, "xavier"),
            (prefix + ".wo", d, d, "xavier"),
        ]

    def ln(prefix):
        return [(prefix + ".g", 1, d, "ones"), (prefix + ".b", 1, d, "zeros")]

    def ffn(prefix):
        return [
            (prefix + ".w1", d, dff, "xavier"),
            (prefix + ".b1", 1, dff, "zeros"),
            (prefix + ".w2", dff, d, "xavier"),
            (prefix + ".b2", 1, d, "zeros"),
        ]

    for i in range(config.n_layers):
        p = "enc.%d" % i
        specs += block(p + ".attn") + ln(p + ".ln1") + ffn(p + ".ffn") + ln(p + ".ln2")
    for i in range(config.n_layers):
        p = "dec.%d" % i
        specs += block(p + ".self") + ln(p + ".ln1")
        specs += block(p + ".cross") + ln(p + ".ln2")
        specs += ffn(p + ".ffn") + ln(p + ".ln3")
    specs += [("head.w", d, config.max_len, "xavier"),
              ("head.b", 1, config.max_len, "zeros")]
    return specs


def init_params(config, seed=None) -> ParameterStore:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dt = config.np_dtype
    store = ParameterStore()
    for name, rows, cols, kind in _param_specs(config):
        if kind == "xavier":
            m = xavier_uniform(rows, cols, rng, dtype=dt)
        elif kind == "ones":
            m = Matrix.wrap(np.ones((rows, cols), dtype=dt))
        else:
            m = Matrix.zeros(rows, cols, dtype=dt)
        store.add(name, m)
    return store


def n_parameters(store) -> int:
    return sum(m.rows * m.cols for _, m in store.items())


# ---------------------------------------------------------------------------
# embedding


def positional_encoding(n, d, base=10000.0, dtype=np.float32) -> Matrix:
    """Sinusoidal table: PE[p, 2i] = sin(p / base^(2i/d)), odd = cos."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i2 = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(base, i2 / d)
    pe = np.zeros((n, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return Matrix.wrap(pe.astype(dtype))


def embed(features: Matrix, params, config, kind, tape=None) -> Matrix:
    """Linear projection to width d plus the sinusoidal position table."""
    if kind not in ("enc", "dec"):
        raise ValueError("kind must be 'enc' or 'dec'")
    if features.cols != config.input_dim:
        raise DataError(
            "feature width %d does not match config input_dim %d"
            % (features.cols, config.input_dim)
        )
    x = linear(features, params["embed.%s.w" % kind],
               params["embed.%s.b" % kind], tape)
    pe = positional_encoding(x.rows, config.d, config.pos_base, config.np_dtype)
    return add(x, pe, tape)


# ---------------------------------------------------------------------------
# layers


def _attn_block(params, prefix):
    return (params[prefix + ".wq"], params[prefix + ".wk"],
            params[prefix + ".wv"], params[prefix + ".wo"])


def _ffn(x, params, prefix, tape):
    hidden = relu(linear(x, params[prefix + ".w1"], params[prefix + ".b1"], tape), tape)
    return linear(hidden, params[prefix + ".w2"], params[prefix + ".b2"], tape)


def _ln(x, params, prefix, eps, tape):
    return layer_norm(x, params[prefix + ".g"], params[prefix + ".b"], eps, tape)


def encoder_layer(x: Matrix, pattern, params, prefix, config, tape=None,
                  weights_sink=None) -> Matrix:
    wq, wk, wv, wo = _attn_block(params, prefix + ".attn")
    att = multi_head(x, x, x, pattern, wq, wk, wv, wo, config.h, tape,
                     weights_sink)
    x1 = _ln(add(x, att, tape), params, prefix + ".ln1", config.ln_eps, tape)
    x2 = _ln(add(x1, _ffn(x1, params, prefix + ".ffn", tape), tape),
             params, prefix + ".ln2", config.ln_eps, tape)
    return x2


def decoder_layer(s: Matrix, enc_out: Matrix, causal, cross, params, prefix,
                  config, tape=None, self_sink=None, cross_sink=None) -> Matrix:
    wq, wk, wv, wo = _attn_block(params, prefix + ".self")
    att = multi_head(s, s, s, causal, wq, wk, wv, wo, config.h, tape, self_sink)
    s1 = _ln(add(s, att, tape), params, prefix + ".ln1", config.ln_eps, tape)
    wq, wk, wv, wo = _attn_block(params, prefix + ".cross")
    ca = multi_head(s1, enc_out, enc_out, cross, wq, wk, wv, wo, config.h,
                    tape, cross_sink)
    s2 = _ln(add(s1, ca, tape), params, prefix + ".ln2", config.ln_eps, tape)
    s3 = _ln(add(s2, _ffn(s2, params, prefix + ".ffn", tape), tape),
             params, prefix + ".ln3", config.ln_eps, tape)
    return s3


# ---------------------------------------------------------------------------
# encoder / decoder stacks


@dataclasses.dataclass
class EncodedVideo:
    y: Matrix  # valid_len x d, last encoder layer
    pattern: object
    valid_len: int
    features: np.ndarray  # raw valid_len x input_dim, for decode-time embeds
    shots: object
    attn_weights: list | None = None  # per layer: list of (head, dense) maps

    def padded(self, max_len, tape=None) -> Matrix:
        """Zero-padded view; rows at and past valid_len are exactly zero."""
        return pad_rows(self.y, max_len, tape)


def _valid_features(features, config, valid_len):
    arr = np.asarray(features)
    if arr.ndim != 2:
        raise DataError("features must be 2-D, got shape %r" % (arr.shape,))
    if valid_len is not None:
        if not 1 <= valid_len <= arr.shape[0]:
            raise DataError("valid_len %d out of range for %d rows"
                            % (valid_len, arr.shape[0]))
        arr = arr[:valid_len]  # padding rows never enter any computation
    return np.ascontiguousarray(arr, dtype=config.np_dtype)


def encode_video(features, shots, config, params, tape=None,
                 collect_weights=False, valid_len=None) -> EncodedVideo:
    """Run the encoder stack over the valid frames only."""
    valid = _valid_features(features, config, valid_len)
    feats = Matrix.wrap(valid)
    t = feats.rows
    if t > config.max_len:
        raise DataError("video length %d exceeds max_len %d" % (t, config.max_len))
    pattern = build_encoder_pattern(
        config.attention, t, t, config.window, shots, config.globals_per_shot
    )
    x = embed(feats, params, config, "enc", tape)
    collected = [] if collect_weights else None
    for i in range(config.n_layers):
        sink = None
        if collect_weights:
            layer_maps = []
            collected.append(layer_maps)
            sink = lambda head, w, _m=layer_maps: _m.append((head, w))
        x = encoder_layer(x, pattern, params, "enc.%d" % i, config, tape, sink)
    return EncodedVideo(
        y=x, pattern=pattern, valid_len=t, features=valid, shots=shots,
        attn_weights=collected,
    )


def _decoder_inputs(encoded, teacher_frames, config, params, tape):
    """Shifted-right teacher inputs: [start, embed(f_1), ..., embed(f_{L-1})]."""
    l = len(teacher_frames)
    start = params["decoder.start"]
    if l > 1:
        rows = encoded.features[np.asarray(teacher_frames[:-1], dtype=np.int64)]
        emb = linear(Matrix.wrap(np.ascontiguousarray(rows)),
                     params["embed.dec.w"], params["embed.dec.b"], tape)
        seq = concat_rows([start, emb], tape)
    else:
        seq = start
    pe = positional_encoding(l, config.d, config.pos_base, config.np_dtype)
    return add(seq, pe, tape)


def _decoder_stack(seq, encoded, config, params, tape, collector=None):
    l = seq.rows
    causal = build_causal_pattern(l)
    cross = build_cross_pattern(l, encoded.valid_len)
    s = seq
    for i in range(config.n_layers):
        self_sink = cross_sink = None
        if collector is not None:
            maps = {"self": [], "cross": []}
            collector.append(maps)
            self_sink = lambda head, w, _m=maps: _m["self"].append((head, w))
            cross_sink = lambda head, w, _m=maps: _m["cross"].append((head, w))
        s = decoder_layer(s, encoded.y, causal, cross, params, "dec.%d" % i,
                          config, tape, self_sink, cross_sink)
    return s


def output_head(dec_out: Matrix, t, params, tape=None) -> Matrix:
    logits = linear(dec_out, params["head.w"], params["head.b"], tape)
    return softmax_row(col_slice(logits, 0, t, tape), tape)


def forward(features, shots, teacher_frames, config, params, tape=None,
            encoded=None, valid_len=None, decoder_collector=None) -> Matrix:
    """Teacher-forced pass; returns an L x T matrix of frame distributions."""
    if encoded is None:
        encoded = encode_video(features, shots, config, params, tape,
                               valid_len=valid_len)
    if len(teacher_frames) == 0:
        raise ValueError("teacher summary must be nonempty")
    bad = [f for f in teacher_frames if not 0 <= int(f) < encoded.valid_len]
    if bad:
        raise ValueError("teacher frames %r outside [0, %d)"
                         % (bad, encoded.valid_len))
    seq = _decoder_inputs(encoded, list(teacher_frames), config, params, tape)
    dec = _decoder_stack(seq, encoded, config, params, tape, decoder_collector)
    return output_head(dec, encoded.valid_len, params, tape)


def decode_autoregressive(encoded, config, params):
    """Free-running decode; returns per-frame scores of length valid_len.

    Runs ceil(summary_ratio * T) steps from the learned start token, feeding
    each step's argmax frame back in.  A frame's score aggregates its softmax
    probability over steps (max by default).
    """
    t = encoded.valid_len
    l_max = max(1, int(np.ceil(config.summary_ratio * t)))
    start = params["decoder.start"]
    chosen = []
    step_rows = np.zeros((l_max, t), dtype=np.float64)
    for step in range(l_max):
        if chosen:
            rows = encoded.features[np.asarray(chosen, dtype=np.int64)]
            emb = linear(Matrix.wrap(np.ascontiguousarray(rows)),
                         params["embed.dec.w"], params["embed.dec.b"])
            seq = concat_rows([start, emb])
        else:
            seq = start
        pe = positional_encoding(seq.rows, config.d, config.pos_base,
                                 config.np_dtype)
        seq = add(seq, pe)
        dec = _decoder_stack(seq, encoded, config, params, None)
        probs = output_head(dec, t, params)
        row = probs.data[-1].astype(np.float64)
        step_rows[step] = row
        chosen.append(int(np.argmax(row)))
    if config.decode_aggregate == "max":
        return step_rows.max(axis=0)
    return step_rows.mean(axis=0)


def summarize(video, config, params):
    """VideoRecord -> (SummaryResult, frame scores, shots)."""
    from .selection import make_summary

    shots = resolve_shots(
        video,
        max_shots=config.kts_max_shots or None,
        penalty=config.kts_penalty,
    )
    encoded = encode_video(video.features, shots, config, params)
    scores = decode_autoregressive(encoded, config, params)
    result = make_summary(scores, shots, budget_ratio=config.summary_ratio)
    return result, scores, shots


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, config, params):
    cfg_bytes = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    names = params.names()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            nb = name.encode("utf-8")
            m = params[name]
            fh.write(struct.pack("<III", len(nb), m.rows, m.cols))
            fh.write(nb)
            fh.write(np.ascontiguousarray(m.data, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ParseError("bad checkpoint magic %r in %s" % (raw[:4], path), 0)
    if len(raw) < 12:
        raise ParseError("short checkpoint header in %s" % path, len(raw))
    version, cfg_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ParseError("unsupported checkpoint version %d" % version, 4)
    off = 12
    try:
        config = ModelConfig.from_dict(json.loads(raw[off:off + cfg_len]))
    except (json.JSONDecodeError, TypeError) as exc:
        raise ParseError("unreadable checkpoint config: %s" % exc, off)
    off += cfg_len
    (n_params,) = struct.unpack_from("<I", raw, off)
    off += 4
    store = ParameterStore()
    dt = config.np_dtype
    for _ in range(n_params):
        if off + 12 > len(raw):
            raise ParseError("truncated checkpoint %s" % path, len(raw))
        name_len, rows, cols = struct.unpack_from("<III", raw, off)
        off += 12
        name = raw[off:off + name_len].decode("utf-8")
        off += name_len
        need = rows * cols * 4
        if off + need > len(raw):
            raise ParseError("truncated checkpoint %s in %r" % (path, name),
                             len(raw))
        vals = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=off)
        off += need
        store.add(name, Matrix.wrap(vals.reshape(rows, cols).astype(dt)))
    if off != len(raw):
        raise ParseError("trailing bytes in checkpoint %s" % path, off)
    expected = [name for name, *_ in _param_specs(config)]
    if store.names() != expected:
        raise DataError(
            "checkpoint %s parameter set does not match its config" % path
        )
    return config, store
