"""Model assembly: reference-channel encoder stub, channel-agnostic
spatial encoder, spatial conformer / spatial diarization network, and the
FiLM-conditioned conformer EEND with powerset output."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .frontend import FeatureStreams
from .nn import tensor as T
from .nn.modules import (
    ConformerBlock,
    FeedForward,
    Film,
    LayerNorm,
    Linear,
    Module,
    SelfAttention,
    Tac,
    WeightedLayerSum,
    sinusoidal_encoding,
)
from .nn.tensor import Tensor
from .powerset import MAX_CONCURRENT, PowersetPosteriors, PowersetSpace, enumerate_classes

CONDITIONING_MODES = ("none", "spatial_encoder", "spatial_conformer",
                      "spatial_diarization", "oracle_count")
COUNT_CATEGORIES = MAX_CONCURRENT + 1  # speaker counts 0, 1, 2


@dataclass
class ModelConfig:
    max_speakers: int = 4
    d_enc: int = 64
    d_spat: int = 32
    stub_layers: int = 4
    conformer_blocks: int = 2
    spatial_layers: int = 2
    spatial_conformer_blocks: int = 2
    heads: int = 4
    ff_mult: int = 4
    conv_kernel: int = 9
    sample_rate: int = 16000
    frame_len: int = 512
    hop: int = 320
    conditioning: str = "none"
    freeze_aux: bool = False
    dropout: float = 0.0
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.conditioning not in CONDITIONING_MODES:
            raise ValueError(f"unknown conditioning mode {self.conditioning!r}")
        for name in ("max_speakers", "d_enc", "d_spat", "stub_layers", "conformer_blocks",
                     "spatial_layers", "spatial_conformer_blocks", "heads", "ff_mult",
                     "sample_rate", "frame_len", "hop"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.stub_layers < 2:
            raise ValueError("encoder stub needs at least an embedding and one block")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def num_bins(self) -> int:
        return self.frame_len // 2 + 1

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def space(self) -> PowersetSpace:
        return enumerate_classes(self.max_speakers)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class SpatialEmbedding:
    """Frame-synchronous spatial embedding; kind is 'encoder' or 'conformer'."""

    values: Tensor
    kind: str


class TransformerBlock(Module):
    """Pre-norm self-attention + feed-forward block used by the stub."""

    def __init__(self, d: int, heads: int, ff_mult: int):
        self.norm_attn = LayerNorm(d)
        self.attn = SelfAttention(d, heads)
        self.norm_ff = LayerNorm(d)
        self.ff = FeedForward(d, ff_mult)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm_attn(x))
        return x + self.ff(self.norm_ff(x))


class EncoderStub(Module):
    """Trainable stand-in for a pretrained speech encoder.

    Layer 0 embeds the log-compressed magnitude frame; each further layer
    is a transformer block. All layer outputs are retained for the
    learnable weighted sum.
    """

    def __init__(self, num_bins: int, d_enc: int, layers: int, heads: int, ff_mult: int):
        self.embed = Linear(num_bins, d_enc)
        self.blocks = [TransformerBlock(d_enc, heads, ff_mult) for _ in range(layers - 1)]

    def __call__(self, magnitude: np.ndarray, dtype=np.float64) -> list[Tensor]:
        x = Tensor(np.log1p(np.asarray(magnitude)).astype(dtype))
        h = self.embed(x)
        outputs = [h]
        for blk in self.blocks:
            h = blk(h)
            outputs.append(h)
        return outputs


class SpatialEncoder(Module):
    """Shared-weight self-attention plus TAC exchange, stacked N times,
    then averaged across streams into one (T, d_spat) embedding.

    One parameter set serves any number of input streams, so the module is
    agnostic to microphone count and array geometry.
    """

    def __init__(self, num_bins: int, d_spat: int, layers: int, heads: int):
        if layers < 1:
            raise ValueError("spatial encoder needs at least one layer")
        self.proj = Linear(num_bins, d_spat)
        self.attn = [SelfAttention(d_spat, heads) for _ in range(layers)]
        self.attn_norm = [LayerNorm(d_spat) for _ in range(layers)]
        self.tac = [Tac(d_spat) for _ in range(layers)]

    def __call__(self, feats: FeatureStreams, dtype=np.float64) -> SpatialEmbedding:
        if feats.num_streams < 1:
            raise ValueError("need at least one feature stream")
        stacked = np.stack([
            np.log1p(s) if kind.startswith("magnitude") else s
            for s, kind in zip(feats.streams, feats.stream_kinds)
        ]).astype(dtype)
        x = self.proj(Tensor(stacked))  # (n_streams, T, d_spat)
        for attn, norm, tac in zip(self.attn, self.attn_norm, self.tac):
            x = x + attn(norm(x))
            x = tac(x)
        return SpatialEmbedding(T.tmean(x, axis=0), "encoder")


class SpatialConformer(Module):
    """Projection, layer norm and a conformer stack on top of the spatial
    encoder output, yielding the refined embedding."""

    def __init__(self, d_spat: int, blocks: int, heads: int, ff_mult: int, kernel: int):
        self.proj = Linear(d_spat, d_spat)
        self.norm = LayerNorm(d_spat)
        self.blocks = [ConformerBlock(d_spat, heads, ff_mult, kernel) for _ in range(blocks)]

    def __call__(self, h: SpatialEmbedding) -> SpatialEmbedding:
        if h.kind != "encoder":
            raise ValueError(f"spatial conformer expects an encoder embedding, got {h.kind!r}")
        x = self.norm(self.proj(h.values))
        x = x + Tensor(sinusoidal_encoding(x.shape[-2], x.shape[-1], dtype=x.data.dtype))
        for blk in self.blocks:
            x = blk(x)
        return SpatialEmbedding(x, "conformer")


class SpatialDiarizationNet(Module):
    """Spatial encoder, optional conformer, optional classification head.

    Covers all three auxiliary variants: encoder-only, spatial conformer,
    and the full spatial diarization network.
    """

    def __init__(self, cfg: ModelConfig, with_conformer: bool = True, with_head: bool = True):
        self.encoder = SpatialEncoder(cfg.num_bins, cfg.d_spat, cfg.spatial_layers, cfg.heads)
        self.conformer = (
            SpatialConformer(cfg.d_spat, cfg.spatial_conformer_blocks, cfg.heads,
                             cfg.ff_mult, cfg.conv_kernel)
            if with_conformer else None
        )
        self.head = Linear(cfg.d_spat, cfg.space().num_classes) if with_head else None
        self._dtype = cfg.np_dtype

    def condition(self, feats: FeatureStreams) -> SpatialEmbedding:
        """Embedding offered to FiLM: refined when a conformer exists."""
        h = self.encoder(feats, dtype=self._dtype)
        if self.conformer is not None:
            h = self.conformer(h)
        return h

    def __call__(self, feats: FeatureStreams) -> tuple[SpatialEmbedding, Tensor | None]:
        h = self.condition(feats)
        logits = self.head(h.values) if self.head is not None else None
        return h, logits


def spatial_diarization_head(h: SpatialEmbedding, space: PowersetSpace,
                             head: Linear) -> PowersetPosteriors:
    """Per-frame softmax over powerset classes from a refined embedding."""
    if h.kind != "conformer":
        raise ValueError(f"classification head expects a conformer embedding, got {h.kind!r}")
    logits = head(h.values)
    return PowersetPosteriors(T.softmax(logits, axis=-1).data, space)


class StandaloneSpatialDiarization(Module):
    """Autonomous spatial diarization model (the purely spatial baseline).

    input_kinds='magnitude' restricts the input to the reference magnitude
    stream, giving the otherwise identical magnitude-only control model.
    """

    def __init__(self, cfg: ModelConfig, input_kinds: str = "all"):
        if input_kinds not in ("all", "magnitude"):
            raise ValueError("input_kinds must be 'all' or 'magnitude'")
        self.spatial = SpatialDiarizationNet(cfg, with_conformer=True, with_head=True)
        self.config = cfg
        self.input_kinds = input_kinds

    def select_streams(self, feats: FeatureStreams) -> FeatureStreams:
        return feats if self.input_kinds == "all" else feats.subset("magnitude")

    def logits(self, feats: FeatureStreams) -> Tensor:
        _, logits = self.spatial(self.select_streams(feats))
        return logits

    def posteriors(self, feats: FeatureStreams) -> PowersetPosteriors:
        return PowersetPosteriors(
            T.softmax(self.logits(feats), axis=-1).data, self.config.space()
        )


class ConditionedEend(Module):
    """Encoder stub, learnable layer-weighted sum, linear + layer norm,
    FiLM conditioning and a conformer stack with a powerset head.

    Without conditioning the FiLM layers are absent and the model is the
    exact unconditioned baseline. In oracle_count mode the condition is a
    per-frame one-hot speaker count applied only at the FiLM layer before
    the conformer stack.
    """

    def __init__(self, cfg: ModelConfig):
        self.config = cfg
        space = cfg.space()
        self.stub = EncoderStub(cfg.num_bins, cfg.d_enc, cfg.stub_layers, cfg.heads, cfg.ff_mult)
        self.wsum = WeightedLayerSum(cfg.stub_layers)
        self.proj = Linear(cfg.d_enc, cfg.d_enc)
        self.norm = LayerNorm(cfg.d_enc)
        mode = cfg.conditioning
        if mode in ("spatial_encoder", "spatial_conformer", "spatial_diarization"):
            self.spatial = SpatialDiarizationNet(
                cfg,
                with_conformer=mode in ("spatial_conformer", "spatial_diarization"),
                with_head=mode == "spatial_diarization",
            )
            self.film_pre = Film(cfg.d_enc, cfg.d_spat)
            self.films = [Film(cfg.d_enc, cfg.d_spat) for _ in range(cfg.conformer_blocks)]
        elif mode == "oracle_count":
            self.spatial = None
            self.film_pre = Film(cfg.d_enc, COUNT_CATEGORIES)
            self.films = []
        else:
            self.spatial = None
            self.film_pre = None
            self.films = []
        self.blocks = [
            ConformerBlock(cfg.d_enc, cfg.heads, cfg.ff_mult, cfg.conv_kernel, cfg.dropout)
            for _ in range(cfg.conformer_blocks)
        ]
        self.head = Linear(cfg.d_enc, space.num_classes)

    def aux_parameters(self):
        if self.spatial is None:
            return []
        return [p for _, p in self.spatial.named_parameters("spatial.")]

    def freeze_aux(self, frozen: bool = True) -> None:
        if self.spatial is not None:
            self.spatial.set_frozen(frozen)

    def logits(self, magnitude: np.ndarray, feats: FeatureStreams | None = None,
               counts: np.ndarray | None = None,
               cond_override: Tensor | None = None) -> Tensor:
        """Frame logits over the powerset classes.

        magnitude: (T, F) reference-channel magnitude; feats supply the
        spatial condition, counts the per-frame oracle speaker count.
        cond_override short-circuits the auxiliary network with a
        precomputed condition (valid while the auxiliary is frozen).
        """
        cfg = self.config
        dtype = cfg.np_dtype
        layers = self.stub(magnitude, dtype=dtype)
        x = self.norm(self.proj(self.wsum(layers)))
        t = x.shape[-2]
        mode = cfg.conditioning
        cond = None
        if mode in ("spatial_encoder", "spatial_conformer", "spatial_diarization"):
            if cond_override is not None:
                cond = cond_override
            elif feats is None:
                raise ValueError(f"conditioning mode {mode} requires feature streams")
            else:
                cond = self.spatial.condition(feats).values
        elif mode == "oracle_count":
            if counts is None:
                raise ValueError("oracle_count conditioning requires per-frame counts")
            counts = np.asarray(counts)
            if counts.shape != (t,):
                raise ValueError(f"expected {t} frame counts, got shape {counts.shape}")
            onehot = np.zeros((t, COUNT_CATEGORIES), dtype=dtype)
            onehot[np.arange(t), np.clip(counts, 0, MAX_CONCURRENT)] = 1.0
            cond = Tensor(onehot)
        if cond is not None and cond.shape[-2] != t:
            raise ValueError(
                f"condition has {cond.shape[-2]} frames but encoder produced {t}"
            )
        if self.film_pre is not None:
            x = self.film_pre(x, cond)
        x = x + Tensor(sinusoidal_encoding(t, cfg.d_enc, dtype=dtype))
        for i, blk in enumerate(self.blocks):
            if self.films:
                x = self.films[i](x, cond)
            x = blk(x)
        return self.head(x)

    def posteriors(self, magnitude: np.ndarray, feats: FeatureStreams | None = None,
                   counts: np.ndarray | None = None) -> PowersetPosteriors:
        logits = self.logits(magnitude, feats, counts)
        return PowersetPosteriors(T.softmax(logits, axis=-1).data, self.config.space())


def build_model(cfg: ModelConfig):
    """Initialised conditioned EEND (aux frozen when the config says so)."""
    model = ConditionedEend(cfg)
    model.initialize(cfg.seed, dtype=cfg.np_dtype)
    if cfg.freeze_aux:
        model.freeze_aux(True)
    return model


def build_standalone(cfg: ModelConfig, input_kinds: str = "all") -> StandaloneSpatialDiarization:
    model = StandaloneSpatialDiarization(cfg, input_kinds)
    model.initialize(cfg.seed, dtype=cfg.np_dtype)
    return model
