"""A deterministic, randomly initialized, frozen dual encoder.

Toy-scale stand-in for a contrastively pre-trained image/text model:
both branches are stacks of pre-norm transformer blocks over token
sequences, with a frozen linear projection into a shared embedding
space and a temperature-scaled cosine softmax over classes. Weights are
drawn once from a seeded Gaussian and never updated; gradients flow
*through* them to any prompt rows present in the sequences.

Synthetic "images" enter directly as patch-embedding matrices -- there
is no pixel pipeline. Class identity enters the text branch as a single
identity row (the stand-in for a tokenized class name) supplied by the
task generator via :meth:`FrozenEncoder.bind_class_identities`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import (
    Tensor,
    add,
    concat_cols,
    concat_rows,
    gelu,
    layer_norm,
    matmul,
    matmul_t,
    mul,
    no_grad,
    reshape,
    slice_cols,
    slice_rows,
    softmax_rows,
)

CLASS_TOKEN = "class_token"
CONTENT = "content"
PROMPT = "prompt"

VISUAL = "visual"
TEXT = "text"

WEIGHT_STD = 0.02
MLP_RATIO = 4
_MASK_VALUE = -1e30


@dataclass(frozen=True)
class EncoderConfig:
    """Dimensions, temperature, and weight seed of the frozen encoder.

    The same (config, seed) pair always produces bit-identical weights.
    """

    num_layers: int = 12
    visual_dim: int = 32
    text_dim: int = 16
    embed_dim: int = 16
    visual_tokens: int = 16
    text_tokens: int = 8
    num_heads: int = 4
    temperature: float = 0.07
    seed: int = 0

    def __post_init__(self):
        if self.visual_dim <= self.text_dim:
            raise ValueError(
                f"visual_dim ({self.visual_dim}) must exceed text_dim "
                f"({self.text_dim}) for the channel reduction to make sense")
        for name in ("visual_dim", "text_dim"):
            dim = getattr(self, name)
            if dim % self.num_heads != 0:
                raise ValueError(f"{name}={dim} not divisible by "
                                 f"num_heads={self.num_heads}")
        for name in ("num_layers", "visual_dim", "text_dim", "embed_dim",
                     "visual_tokens", "text_tokens", "num_heads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class TokenSequence:
    """Per-layer activation matrix of one image or one class sentence.

    Rows are labelled by role; prompt rows, when present, always form a
    contiguous trailing block.
    """

    tokens: Tensor
    roles: tuple[str, ...]
    modality: str
    layer_index: int

    def __post_init__(self):
        if len(self.roles) != self.tokens.shape[0]:
            raise ValueError("one role per token row required")
        if self.modality not in (VISUAL, TEXT):
            raise ValueError(f"unknown modality {self.modality!r}")
        n_class = sum(r == CLASS_TOKEN for r in self.roles)
        if self.modality == VISUAL:
            if n_class != 1 or self.roles[0] != CLASS_TOKEN:
                raise ValueError("visual sequences need exactly one class token "
                                 "at position 0")
        elif n_class != 0:
            raise ValueError("text sequences carry no class token")
        in_tail = True
        for role in reversed(self.roles):
            if role == PROMPT and not in_tail:
                raise ValueError("prompt rows must form a contiguous trailing block")
            if role != PROMPT:
                in_tail = False

    @property
    def num_prompts(self) -> int:
        return sum(r == PROMPT for r in self.roles)

    @property
    def prompt_start(self) -> int:
        return len(self.roles) - self.num_prompts

    def content_bounds(self) -> tuple[int, int]:
        """Half-open row range of content rows (contiguous by construction)."""
        idx = [i for i, r in enumerate(self.roles) if r == CONTENT]
        return idx[0], idx[-1] + 1

    def prompt_rows(self) -> Tensor:
        return slice_rows(self.tokens, self.prompt_start, len(self.roles))

    def append_prompts(self, prompts: Tensor) -> "TokenSequence":
        tokens = concat_rows([self.tokens, prompts])
        roles = self.roles + (PROMPT,) * prompts.shape[0]
        return TokenSequence(tokens, roles, self.modality, self.layer_index)

    def with_prompt_rows(self, prompts: Tensor) -> "TokenSequence":
        """Replace the trailing prompt block, keeping gradient flow into
        the untouched rows."""
        if prompts.shape[0] != self.num_prompts:
            raise ValueError(f"expected {self.num_prompts} prompt rows, "
                             f"got {prompts.shape[0]}")
        head = slice_rows(self.tokens, 0, self.prompt_start)
        return TokenSequence(concat_rows([head, prompts]), self.roles,
                             self.modality, self.layer_index)


@dataclass
class FrozenFeatures:
    """Zero-shot image feature, class text features, and Eq-style class
    probabilities from the fully frozen path."""

    x_prime: np.ndarray
    w_prime: np.ndarray
    p_zero_shot: np.ndarray

    def __post_init__(self):
        if not (np.isfinite(self.x_prime).all() and np.isfinite(self.w_prime).all()):
            raise ValueError("non-finite frozen features")
        if abs(self.p_zero_shot.sum() - 1.0) > 1e-10:
            raise ValueError("zero-shot probabilities must sum to 1")


def class_probabilities(x: np.ndarray, w: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature-scaled softmax over cosine similarities (plain numpy)."""
    xn = x / np.linalg.norm(x)
    wn = w / np.linalg.norm(w, axis=1, keepdims=True)
    logits = (wn @ xn) / temperature
    e = np.exp(logits - logits.max())
    return e / e.sum()


class FrozenEncoder:
    """Both branches of the dual encoder, weights frozen after seeding.

    Parameter creation order (also the checkpoint serialization order):
    visual class token, visual positions, visual blocks 1..L (each:
    ln1 gain/bias, attention wq/wk/wv/wo, ln2 gain/bias, mlp w1/w2),
    visual projection w/b, text template, text positions, text blocks
    1..L, text projection w/b. Gaussian draws consume the seeded
    generator in exactly this order; layer-norm affines are constant
    (gain 1, bias 0) and consume no draws.
    """

    def __init__(self, config: EncoderConfig):
        self.config = config
        self._params: dict[str, Tensor] = {}
        self._class_rows: np.ndarray | None = None
        rng = np.random.default_rng(config.seed)

        def gauss(name: str, *shape: int) -> None:
            self._params[name] = Tensor(rng.standard_normal(shape) * WEIGHT_STD)

        def affine(name: str, dim: int) -> None:
            self._params[f"{name}_gain"] = Tensor(np.ones(dim))
            self._params[f"{name}_bias"] = Tensor(np.zeros(dim))

        c = config
        gauss("visual/class_token", 1, c.visual_dim)
        gauss("visual/pos", c.visual_tokens + 1, c.visual_dim)
        self._build_blocks(VISUAL, c.visual_dim, gauss, affine)
        gauss("visual/proj_w", c.visual_dim, c.embed_dim)
        gauss("visual/proj_b", c.embed_dim)
        gauss("text/template", c.text_tokens, c.text_dim)
        gauss("text/pos", c.text_tokens, c.text_dim)
        self._build_blocks(TEXT, c.text_dim, gauss, affine)
        gauss("text/proj_w", c.text_dim, c.embed_dim)
        gauss("text/proj_b", c.embed_dim)

    def _build_blocks(self, modality: str, dim: int, gauss, affine) -> None:
        for layer in range(1, self.config.num_layers + 1):
            base = f"{modality}/l{layer:02d}"
            affine(f"{base}/ln1", dim)
            for w in ("wq", "wk", "wv", "wo"):
                gauss(f"{base}/attn_{w}", dim, dim)
            affine(f"{base}/ln2", dim)
            gauss(f"{base}/mlp_w1", dim, MLP_RATIO * dim)
            gauss(f"{base}/mlp_w2", MLP_RATIO * dim, dim)

    # -- parameter access ---------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        """Named frozen parameters in creation order."""
        return dict(self._params)

    def serialize_weights(self) -> bytes:
        """Raw little-endian float64 bytes of all parameters in order."""
        return b"".join(t.data.astype("<f8").tobytes() for t in self._params.values())

    def _p(self, name: str) -> Tensor:
        return self._params[name]

    # -- class identity binding -----------------------------------------

    def bind_class_identities(self, rows: np.ndarray) -> None:
        """Attach per-class identity rows (the tokenized-name stand-in)."""
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.config.text_dim:
            raise ValueError(f"identity rows must be [C x {self.config.text_dim}], "
                             f"got {rows.shape}")
        self._class_rows = rows

    @property
    def num_classes(self) -> int:
        if self._class_rows is None:
            raise RuntimeError("no class identities bound")
        return self._class_rows.shape[0]

    # -- embedding --------------------------------------------------------

    def embed_image(self, patches) -> TokenSequence:
        """Prepend the frozen class token and add positional offsets."""
        data = patches.data if isinstance(patches, Tensor) else np.asarray(patches, float)
        c = self.config
        if data.shape != (c.visual_tokens, c.visual_dim):
            raise ValueError(f"expected patches of shape "
                             f"({c.visual_tokens}, {c.visual_dim}), got {data.shape}")
        rows = np.vstack([self._p("visual/class_token").data, data]) \
            + self._p("visual/pos").data
        roles = (CLASS_TOKEN,) + (CONTENT,) * c.visual_tokens
        return TokenSequence(Tensor(rows), roles, VISUAL, 0)

    def embed_text(self, class_id: int) -> TokenSequence:
        """The frozen template sequence with the class identity row last."""
        if self._class_rows is None:
            raise RuntimeError("no class identities bound")
        if not 0 <= class_id < self.num_classes:
            raise IndexError(f"class_id {class_id} out of range "
                             f"[0, {self.num_classes})")
        return self.embed_text_identity(self._class_rows[class_id])

    def embed_text_identity(self, identity_row: np.ndarray) -> TokenSequence:
        """Template sequence for an explicit identity row (probe path)."""
        c = self.config
        rows = self._p("text/template").data.copy()
        rows[-1] = np.asarray(identity_row, dtype=np.float64)
        rows = rows + self._p("text/pos").data
        roles = (CONTENT,) * c.text_tokens
        return TokenSequence(Tensor(rows), roles, TEXT, 0)

    # -- transformer blocks ---------------------------------------------

    def encode_layer(self, seq: TokenSequence, layer: int,
                     mask_prompt_attention: bool = False) -> TokenSequence:
        """One frozen pre-norm block (multi-head self-attention + MLP).

        Prompt rows attend and are attended to like ordinary tokens
        unless ``mask_prompt_attention`` hides them from other rows
        (test rig for the ablation identity).
        """
        c = self.config
        if not 1 <= layer <= c.num_layers:
            raise IndexError(f"layer {layer} out of range [1, {c.num_layers}]")
        base = f"{seq.modality}/l{layer:02d}"
        x = seq.tokens
        normed = layer_norm(x, self._p(f"{base}/ln1_gain"), self._p(f"{base}/ln1_bias"))
        attn = self._attention(normed, base, seq, mask_prompt_attention)
        h = add(x, attn)
        normed2 = layer_norm(h, self._p(f"{base}/ln2_gain"), self._p(f"{base}/ln2_bias"))
        mlp = matmul(gelu(matmul(normed2, self._p(f"{base}/mlp_w1"))),
                     self._p(f"{base}/mlp_w2"))
        out = add(h, mlp)
        return TokenSequence(out, seq.roles, seq.modality, layer)

    def _attention(self, normed: Tensor, base: str, seq: TokenSequence,
                   mask_prompts: bool) -> Tensor:
        c = self.config
        dim = normed.shape[1]
        head_dim = dim // c.num_heads
        q = matmul(normed, self._p(f"{base}/attn_wq"))
        k = matmul(normed, self._p(f"{base}/attn_wk"))
        v = matmul(normed, self._p(f"{base}/attn_wv"))
        mask = None
        if mask_prompts and seq.num_prompts:
            m = np.zeros((len(seq.roles), len(seq.roles)))
            m[:, seq.prompt_start:] = _MASK_VALUE
            mask = Tensor(m)
        heads = []
        scale = 1.0 / math.sqrt(head_dim)
        for h in range(c.num_heads):
            lo, hi = h * head_dim, (h + 1) * head_dim
            qh = slice_cols(q, lo, hi)
            kh = slice_cols(k, lo, hi)
            vh = slice_cols(v, lo, hi)
            scores = mul(matmul_t(qh, kh), scale)
            if mask is not None:
                scores = add(scores, mask)
            heads.append(matmul(softmax_rows(scores), vh))
        joined = heads[0] if len(heads) == 1 else concat_cols(heads)
        return matmul(joined, self._p(f"{base}/attn_wo"))

    # -- feature projection ----------------------------------------------

    def project_features(self, seq: TokenSequence, text_pool: str = "last") -> Tensor:
        """Frozen linear map of the pooled row into the shared space.

        Visual: the class-token row. Text: the last non-prompt row by
        default; ``text_pool="mean"`` averages the non-prompt rows.
        """
        c = self.config
        if seq.layer_index != c.num_layers:
            raise ValueError(f"sequence is at layer {seq.layer_index}, "
                             f"projection requires layer {c.num_layers}")
        if seq.modality == VISUAL:
            pooled = slice_rows(seq.tokens, 0, 1)
            w, b = self._p("visual/proj_w"), self._p("visual/proj_b")
        else:
            stop = seq.prompt_start
            if text_pool == "last":
                pooled = slice_rows(seq.tokens, stop - 1, stop)
            elif text_pool == "mean":
                weights = Tensor(np.full((1, stop), 1.0 / stop))
                pooled = matmul(weights, slice_rows(seq.tokens, 0, stop))
            else:
                raise ValueError(f"unknown text_pool {text_pool!r}")
            w, b = self._p("text/proj_w"), self._p("text/proj_b")
        return reshape(add(matmul(pooled, w), b), (c.embed_dim,))

    # -- frozen zero-shot path ---------------------------------------------

    def _run_layers(self, seq: TokenSequence) -> TokenSequence:
        for layer in range(1, self.config.num_layers + 1):
            seq = self.encode_layer(seq, layer)
        return seq

    def image_feature(self, patches) -> np.ndarray:
        """Zero-shot image feature (no prompts, no gradients)."""
        with no_grad():
            return self.project_features(self._run_layers(self.embed_image(patches))).data.copy()

    def text_feature(self, class_id: int, text_pool: str = "last") -> np.ndarray:
        with no_grad():
            seq = self._run_layers(self.embed_text(class_id))
            return self.project_features(seq, text_pool).data.copy()

    def text_feature_identity(self, identity_row: np.ndarray,
                              text_pool: str = "last") -> np.ndarray:
        with no_grad():
            seq = self._run_layers(self.embed_text_identity(identity_row))
            return self.project_features(seq, text_pool).data.copy()

    def class_text_features(self, class_ids: Iterable[int],
                            text_pool: str = "last") -> np.ndarray:
        return np.stack([self.text_feature(c, text_pool) for c in class_ids])

    def zero_shot_predict(self, image, class_ids: Iterable[int] | None = None,
                          text_pool: str = "last") -> FrozenFeatures:
        """Run the fully frozen path and return features + probabilities."""
        if class_ids is None:
            class_ids = range(self.num_classes)
        x = self.image_feature(image)
        w = self.class_text_features(class_ids, text_pool)
        p = class_probabilities(x, w, self.config.temperature)
        return FrozenFeatures(x, w, p)
