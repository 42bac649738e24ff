"""Token codec for layouts and grid images, and the packed multi-task sequence.

Vocabulary ranges (in order): specials, colour words, qualifier words,
coordinate bins (one per grid line), image codebook.

Attention is described at the segment level by a 3x3 ``MaskSpec``.  Some
visible segment pairs cannot be attended in every layer without leaking
information transitively (IMG rows read G1, G2 rows read IMG, so deep IMG
states would carry G1 into G2).  Such pairs are *deferred*: they are attended
only in the final layer, whose outputs feed the logits and nothing else.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .world import QUALIFIERS, Box, Expression, Layout, LayoutItem, WorldConfig

SPECIALS = ("BOS", "EOS_G", "EOS_I", "OBJ_OPEN", "OBJ_CLOSE", "PAD")
BOS, EOS_G, EOS_I, OBJ_OPEN, OBJ_CLOSE, PAD = range(len(SPECIALS))

G1, IMG, G2 = 0, 1, 2
SEGMENT_NAMES = ("G1", "IMG", "G2")
ITEM_LEN = 7  # OBJ_OPEN colour qualifier x0 y0 x1 y1; items are fixed width so no closer


class CodecError(ValueError):
    def __init__(self, msg: str, position: int | None = None):
        super().__init__(msg if position is None else f"{msg} (at token {position})")
        self.position = position


class GrammarError(CodecError):
    pass


class RangeError(CodecError):
    pass


class TruncatedError(CodecError):
    pass


class WrongLength(CodecError):
    pass


class IdOutOfRange(CodecError):
    pass


@dataclass(frozen=True)
class Vocab:
    n_colors: int
    n_coords: int
    v_img: int
    n_quals: int = len(QUALIFIERS)   # micro vocabularies may keep only a prefix

    @classmethod
    def for_world(cls, cfg: WorldConfig) -> "Vocab":
        return cls(cfg.C, max(cfg.H, cfg.W) + 1, cfg.v_img)

    @property
    def color_lo(self) -> int:
        return len(SPECIALS)

    @property
    def qual_lo(self) -> int:
        return self.color_lo + self.n_colors

    @property
    def coord_lo(self) -> int:
        return self.qual_lo + self.n_quals

    @property
    def img_lo(self) -> int:
        return self.coord_lo + self.n_coords

    @property
    def size(self) -> int:
        return self.img_lo + self.v_img

    def ranges(self) -> dict[str, tuple[int, int]]:
        return {
            "special": (0, self.color_lo),
            "color": (self.color_lo, self.qual_lo),
            "qualifier": (self.qual_lo, self.coord_lo),
            "coord": (self.coord_lo, self.img_lo),
            "image": (self.img_lo, self.size),
        }

    def kind(self, tok: int) -> str:
        for name, (lo, hi) in self.ranges().items():
            if lo <= tok < hi:
                return name
        raise IdOutOfRange(f"token id {tok} outside vocabulary of {self.size}")

    def color(self, c: int) -> int:
        return self.color_lo + c

    def qualifier(self, q: str) -> int:
        i = QUALIFIERS.index(q)
        if i >= self.n_quals:
            raise IdOutOfRange(f"qualifier {q!r} not in this vocabulary")
        return self.qual_lo + i

    def coord(self, v: int) -> int:
        return self.coord_lo + v

    def to_dict(self) -> dict:
        return {"n_colors": self.n_colors, "n_coords": self.n_coords, "v_img": self.v_img,
                "n_quals": self.n_quals,
                "size": self.size, "ranges": {k: list(v) for k, v in self.ranges().items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(d["n_colors"], d["n_coords"], d["v_img"], d.get("n_quals", len(QUALIFIERS)))


def layout_length(k: int) -> int:
    return 2 + k * ITEM_LEN


def encode_layout(layout: Layout, vocab: Vocab) -> list[int]:
    toks = [BOS]
    for it in layout.items:
        b = it.box
        toks += [OBJ_OPEN, vocab.color(it.expr.color), vocab.qualifier(it.expr.qualifier),
                 vocab.coord(b.x0), vocab.coord(b.y0), vocab.coord(b.x1), vocab.coord(b.y1)]
    toks.append(EOS_G)
    return toks


def parse_box(coords, vocab: Vocab, H: int | None = None, W: int | None = None) -> Box | None:
    """Decode four coordinate tokens; ``None`` if any is malformed."""
    if len(coords) != 4:
        return None
    vals = []
    for t in coords:
        t = int(t)
        if not vocab.coord_lo <= t < vocab.img_lo:
            return None
        vals.append(t - vocab.coord_lo)
    box = Box(*vals)
    if box.x1 <= box.x0 or box.y1 <= box.y0:
        return None
    if W is not None and box.x1 > W or H is not None and box.y1 > H:
        return None
    return box


def decode_layout(tokens, vocab: Vocab, H: int | None = None, W: int | None = None) -> Layout:
    """Strict inverse of :func:`encode_layout`."""
    toks = [int(t) for t in tokens]
    n = len(toks)

    def need(pos: int) -> int:
        if pos >= n:
            raise TruncatedError("sequence ended early", pos)
        return toks[pos]

    def expect_kind(pos: int, kind: str) -> int:
        t = need(pos)
        lo, hi = vocab.ranges()[kind]
        if not lo <= t < hi:
            raise GrammarError(f"expected {kind} token, got id {t}", pos)
        return t - lo

    if need(0) != BOS:
        raise GrammarError(f"expected BOS, got id {toks[0]}", 0)
    pos = 1
    items = []
    while True:
        t = need(pos)
        if t == EOS_G:
            pos += 1
            break
        if t != OBJ_OPEN:
            raise GrammarError(f"expected OBJ_OPEN or EOS_G, got id {t}", pos)
        color = expect_kind(pos + 1, "color")
        qual = QUALIFIERS[expect_kind(pos + 2, "qualifier")]
        c = [expect_kind(pos + 3 + j, "coord") for j in range(4)]
        if c[2] <= c[0]:
            raise RangeError(f"x1={c[2]} <= x0={c[0]}", pos + 5)
        if c[3] <= c[1]:
            raise RangeError(f"y1={c[3]} <= y0={c[1]}", pos + 6)
        if W is not None and c[2] > W:
            raise RangeError(f"x1={c[2]} beyond width {W}", pos + 5)
        if H is not None and c[3] > H:
            raise RangeError(f"y1={c[3]} beyond height {H}", pos + 6)
        items.append(LayoutItem(Expression(color, qual), Box(*c)))
        pos += ITEM_LEN
    if pos != n:
        raise GrammarError("trailing tokens after EOS_G", pos)
    return Layout(tuple(items))


def encode_image(image: np.ndarray, vocab: Vocab) -> list[int]:
    flat = np.asarray(image).ravel()
    if flat.size and (flat.min() < 0 or flat.max() >= vocab.v_img):
        raise IdOutOfRange("image cell outside codebook")
    return (flat + vocab.img_lo).tolist()


def decode_image(tokens, vocab: Vocab, H: int, W: int) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64).ravel()
    if arr.size != H * W:
        raise WrongLength(f"expected {H * W} image tokens, got {arr.size}")
    bad = np.flatnonzero((arr < vocab.img_lo) | (arr >= vocab.size))
    if bad.size:
        raise IdOutOfRange(f"token id {arr[bad[0]]} is not an image token", int(bad[0]))
    return (arr - vocab.img_lo).reshape(H, W)


# -- attention masks --------------------------------------------------------

@dataclass(frozen=True)
class MaskSpec:
    """Segment visibility; ``allowed[a, b]``: rows of segment a may read segment b."""

    allowed: np.ndarray = field(default_factory=lambda: np.array(
        [[True, False, False],
         [True, True, False],
         [False, True, True]]))

    def __post_init__(self):
        a = np.asarray(self.allowed, dtype=bool)
        if a.shape != (3, 3) or not a.diagonal().all():
            raise ValueError("MaskSpec needs a 3x3 matrix with a true diagonal")
        object.__setattr__(self, "allowed", a)

    def deferred(self) -> np.ndarray:
        """Pairs (a, b) that some segment c reads a but may not read b."""
        a = self.allowed.astype(np.int64)
        unsafe = (a.T @ (1 - a)) > 0
        return unsafe & self.allowed


STAGE1_MASK = MaskSpec()


def segment_masks(segment: np.ndarray, spec: MaskSpec = STAGE1_MASK) -> tuple[np.ndarray, np.ndarray]:
    """(attn_mask, deep_mask) for one sequence; ``True`` means may attend.

    ``attn_mask`` is the dependency contract and is applied in the final
    layer; ``deep_mask`` drops deferred pairs and is applied in all others.
    """
    seg = np.asarray(segment)
    T = seg.size
    causal = np.tri(T, dtype=bool)
    attn = spec.allowed[seg[:, None], seg[None, :]] & causal
    deep = attn & ~spec.deferred()[seg[:, None], seg[None, :]]
    return attn, deep


def segment_positions(segment: np.ndarray) -> np.ndarray:
    """Position index restarted at the first token of every segment."""
    seg = np.asarray(segment)
    pos = np.zeros(seg.size, dtype=np.int64)
    for i in range(1, seg.size):
        pos[i] = pos[i - 1] + 1 if seg[i] == seg[i - 1] else 0
    return pos


@dataclass
class PackedSequence:
    tokens: np.ndarray
    segment: np.ndarray
    loss_mask: np.ndarray
    attn_mask: np.ndarray
    deep_mask: np.ndarray
    positions: np.ndarray

    def __len__(self) -> int:
        return int(self.tokens.size)

    def span(self, seg: int) -> slice:
        idx = np.flatnonzero(self.segment == seg)
        return slice(int(idx[0]), int(idx[-1]) + 1) if idx.size else slice(0, 0)


def build_sequence(parts: list[tuple[int, list[int]]], loss_segments=(IMG, G2),
                   spec: MaskSpec = STAGE1_MASK) -> PackedSequence:
    tokens = np.concatenate([np.asarray(t, dtype=np.int64) for _, t in parts])
    segment = np.concatenate([np.full(len(t), s, dtype=np.int64) for s, t in parts])
    attn, deep = segment_masks(segment, spec)
    positions = segment_positions(segment)
    # the opening BOS of G2 is a constant separator predicted from the last image row
    loss_mask = np.isin(segment, loss_segments) & ~((segment == G2) & (positions == 0))
    return PackedSequence(
        tokens=tokens,
        segment=segment,
        loss_mask=loss_mask,
        attn_mask=attn,
        deep_mask=deep,
        positions=positions,
    )


def pack_pretrain(layout: Layout, image: np.ndarray, vocab: Vocab,
                  spec: MaskSpec = STAGE1_MASK) -> PackedSequence:
    """[G1, IMG, G2] with loss on the image and on the second layout copy."""
    g = encode_layout(layout, vocab)
    return build_sequence([(G1, g), (IMG, encode_image(image, vocab)), (G2, g)], spec=spec)


def pack_generation(layout: Layout, vocab: Vocab, image: np.ndarray | None = None) -> PackedSequence:
    """[G1, IMG] (or just G1 as a decode prompt when ``image`` is None)."""
    parts = [(G1, encode_layout(layout, vocab))]
    if image is not None:
        parts.append((IMG, encode_image(image, vocab)))
    return build_sequence(parts)


def pack_grounding(image: np.ndarray, vocab: Vocab, layout: Layout | None = None) -> PackedSequence:
    """[IMG, G2] (or IMG followed by BOS when ``layout`` is None)."""
    g2 = encode_layout(layout, vocab) if layout is not None else [BOS]
    return build_sequence([(IMG, encode_image(image, vocab)), (G2, g2)])


@dataclass
class Batch:
    tokens: np.ndarray
    segment: np.ndarray
    positions: np.ndarray
    loss_mask: np.ndarray
    attn_mask: np.ndarray
    deep_mask: np.ndarray
    valid: np.ndarray
    offsets: np.ndarray


def collate(seqs: list[PackedSequence], left_pad: bool = False) -> Batch:
    """Pad to a common length; padded rows see only themselves and nobody sees them."""
    B = len(seqs)
    T = max(len(s) for s in seqs)
    tokens = np.full((B, T), PAD, dtype=np.int64)
    segment = np.zeros((B, T), dtype=np.int64)
    positions = np.zeros((B, T), dtype=np.int64)
    loss_mask = np.zeros((B, T), dtype=bool)
    valid = np.zeros((B, T), dtype=bool)
    eye = np.eye(T, dtype=bool)
    attn = np.repeat(eye[None], B, axis=0)
    deep = attn.copy()
    offsets = np.zeros(B, dtype=np.int64)
    for b, s in enumerate(seqs):
        n = len(s)
        o = T - n if left_pad else 0
        offsets[b] = o
        sl = slice(o, o + n)
        tokens[b, sl] = s.tokens
        segment[b, sl] = s.segment
        positions[b, sl] = s.positions
        loss_mask[b, sl] = s.loss_mask
        valid[b, sl] = True
        attn[b, sl, sl] = s.attn_mask
        deep[b, sl, sl] = s.deep_mask
    return Batch(tokens, segment, positions, loss_mask, attn, deep, valid, offsets)
