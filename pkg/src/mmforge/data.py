"""Synthetic image-text forgery corpus.

Each sample is a pre-patchified G x G x d_raw feature grid plus a length-L
integer token sequence, drawn from a topic world derived from the master
seed. Topics tie the modalities together: a topic owns an image tint and a
vocabulary block, so cross-modal consistency is a real, learnable signal.

Manipulation types:
  FS  additive offset inside a random rectangle (bbox recorded) plus a
      drift toward a donor topic's tint, like swapped-in content from
      another identity; a fraction of swaps are "clean" (drift only),
      plausible in isolation but inconsistent with the caption's topic
  FA  weaker multiplicative + additive pattern inside a rectangle
  TS  token span replaced with another topic's core words (each token is
      individually plausible; only context/cross-modal cues reveal it)
  TA  token span replaced with the topic's edit-attribute words, which
      never occur in genuine text

Records are stored as UTF-8 JSON lines: line 0 is a header with the schema
version and full config, lines 1..N are samples in canonical key order, so
writes are byte-stable and files diff cleanly.
"""

from __future__ import annotations

import dataclasses
import json
import math

import numpy as np

from .errors import DataFormatError, DegenerateInputError

SCHEMA_VERSION = 1

# sub-stream tags so world/record RNG draws never collide
_WORLD_TAG = 101
_RECORD_TAG = 202

# forgery signature geometry (world constants, scaled by cfg.signal_strength).
# Both manipulation types shift patches along a shared axis (detectability)
# at different gains, plus a type-specific axis (FS/FA distinguishability);
# FA additionally applies a multiplicative pattern.
_BASE_NOISE = 0.30
_TINT_SCALE = 0.7
_FS_DET_GAIN = 2.2
_FS_SIG_GAIN = 1.0
_FS_SWAP_GAIN = 1.2
# a fraction of face swaps are "clean": the swapped-in content matches the
# donor topic so well that the displacement lies wholly in the tint
# subspace. Such regions look like plausible content of another topic, so a
# single-image detector has little to key on, while the caption pins down
# which topic the region should have matched. The gain is norm-matched to
# the dirty-swap signature so region extent stays equally recoverable.
_FS_CLEAN_RATIO = 0.4
_FS_CLEAN_GAIN = 2.4
_FA_DET_GAIN = 1.5
_FA_SIG_GAIN = 1.2
_FA_MUL_GAIN = 0.4
# keep the amplitude floor low so most of the amplitude range encodes the
# fractional cell overlap: box edges are then recoverable to sub-cell
# precision while grazed cells stay well above the noise floor
_AMP_FLOOR = 0.30
_BOX_MIN = 1.5

_CLASS_NAMES = ("FS", "FA", "TS", "TA")


@dataclasses.dataclass
class DatasetConfig:
    num_samples: int = 1000
    grid: int = 8              # G; patches per side
    seq_len: int = 16          # L
    d_raw: int = 12            # raw per-patch feature dim
    vocab_size: int = 120      # W; must split evenly across topics
    num_topics: int = 6
    p_genuine: float = 77426 / 230000
    p_image_only: float = 90440 / 230000
    p_text_only: float = 29441 / 230000
    p_mixed: float = 32693 / 230000
    fs_ratio: float = 0.54     # P(FS | fake image)
    ts_ratio: float = 0.70     # P(TS | fake text)
    signal_strength: float = 1.0
    seed: int = 0

    def validate(self):
        if self.num_samples < 0:
            raise DegenerateInputError("num_samples must be >= 0")
        for name in ("grid", "seq_len", "d_raw", "vocab_size", "num_topics"):
            if getattr(self, name) <= 0:
                raise DegenerateInputError(f"{name} must be positive")
        mix = (self.p_genuine, self.p_image_only, self.p_text_only, self.p_mixed)
        if any(p < 0 for p in mix) or abs(sum(mix) - 1.0) > 1e-9:
            raise DegenerateInputError(
                f"class-mix proportions must be >= 0 and sum to 1, got {mix}")
        for name in ("fs_ratio", "ts_ratio"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise DegenerateInputError(f"{name} must lie in (0,1), got {v}")
        if self.signal_strength <= 0:
            raise DegenerateInputError("signal_strength must be positive")
        if self.vocab_size % self.num_topics != 0:
            raise DegenerateInputError(
                f"vocab_size {self.vocab_size} must divide evenly into "
                f"{self.num_topics} topics")
        if self.vocab_size // self.num_topics < 5:
            raise DegenerateInputError("topics need >= 5 words each")
        if self.seq_len < 2:
            raise DegenerateInputError("seq_len must be >= 2 to fit a forged span")
        if self.grid / 2.0 < _BOX_MIN:
            raise DegenerateInputError(
                f"forged rectangle cannot fit: grid {self.grid} too small")
        return self

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataFormatError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclasses.dataclass
class LabelSet:
    y_v_bin: int
    y_t_bin: int
    y_multi: list            # [FS, FA, TS, TA]
    bbox: tuple | None       # (x0, y0, x1, y1) in patch-grid units
    y_pat: np.ndarray        # (G*G,) int
    y_tok: np.ndarray        # (L,) int
    y_v_m: int | None        # 1=FS, 0=FA
    y_t_m: int | None        # 1=TS, 0=TA


@dataclasses.dataclass
class Sample:
    patch_grid: np.ndarray   # (G, G, d_raw) float64
    tokens: np.ndarray       # (L,) int
    labels: LabelSet
    seed: int


class World:
    """Topic-level constants derived deterministically from the master seed."""

    def __init__(self, cfg: DatasetConfig):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _WORLD_TAG]))
        self.tints = _TINT_SCALE * rng.normal(size=(cfg.num_topics, cfg.d_raw))
        # forgery directions orthogonal to the tint subspace whenever the
        # feature dim allows, so topic variation cannot mask the signal
        u = rng.normal(size=(cfg.d_raw, 3))
        if cfg.num_topics + 3 <= cfg.d_raw:
            basis = np.linalg.qr(np.concatenate(
                [self.tints.T, u], axis=1))[0]
            q = basis[:, cfg.num_topics:cfg.num_topics + 3]
        else:
            q = np.linalg.qr(u)[0]
        self.det_dir = q[:, 0]   # shared fake-vs-real axis
        self.fs_dir = q[:, 1]
        self.fa_dir = q[:, 2]
        self.fa_pattern = rng.choice([-1.0, 1.0], size=cfg.d_raw)
        block = cfg.vocab_size // cfg.num_topics
        n_core = math.ceil(0.7 * block)
        n_attr = block - n_core
        n_edit = max(1, n_attr // 2)
        self.core = []       # per topic: ids usable in genuine text
        self.genuine_attr = []
        self.edit_attr = []  # per topic: ids only TA produces
        for t in range(cfg.num_topics):
            lo = t * block
            self.core.append(np.arange(lo, lo + n_core))
            self.genuine_attr.append(np.arange(lo + n_core, lo + block - n_edit))
            self.edit_attr.append(np.arange(lo + block - n_edit, lo + block))


def record_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence(
        [master_seed, _RECORD_TAG, index]).generate_state(1)[0])


def patch_intersection_area(bbox, patch_cell):
    """Intersection area between ``bbox`` (x0,y0,x1,y1) and the unit grid
    cell at (row, col), i.e. x in [col, col+1], y in [row, row+1]."""
    x0, y0, x1, y1 = bbox
    row, col = patch_cell
    w = min(x1, col + 1.0) - max(x0, float(col))
    h = min(y1, row + 1.0) - max(y0, float(row))
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def overlap_ratios(bbox, grid):
    """Per-patch intersection-over-patch-area, shape (G*G,), row-major."""
    g = grid
    out = np.zeros(g * g)
    if bbox is None:
        return out
    for row in range(g):
        for col in range(g):
            out[row * g + col] = patch_intersection_area(bbox, (row, col))
    return out


def _sample_bbox(rng, grid):
    hi = grid / 2.0
    if hi < _BOX_MIN:
        raise DegenerateInputError(f"forged rectangle cannot fit in grid {grid}")
    w = rng.uniform(_BOX_MIN, hi)
    h = rng.uniform(_BOX_MIN, hi)
    x0 = rng.uniform(0.0, grid - w)
    y0 = rng.uniform(0.0, grid - h)
    return (x0, y0, x0 + w, y0 + h)


def _draw_genuine_tokens(rng, world, topic, n):
    toks = np.empty(n, dtype=np.int64)
    attr = world.genuine_attr[topic]
    use_attr = (rng.random(n) < 0.3) & (attr.size > 0)
    toks[~use_attr] = rng.choice(world.core[topic], size=int((~use_attr).sum()))
    if use_attr.any():
        toks[use_attr] = rng.choice(attr, size=int(use_attr.sum()))
    return toks


def _forged_span(rng, seq_len):
    max_len = max(2, seq_len // 4)
    length = int(rng.integers(2, max_len + 1))
    start = int(rng.integers(0, seq_len - length + 1))
    return start, length


def generate_sample(cfg: DatasetConfig, index: int, world: World | None = None) -> Sample:
    if index >= cfg.num_samples:
        raise DegenerateInputError(
            f"index {index} out of range for num_samples {cfg.num_samples}")
    if world is None:
        world = World(cfg)
    rng = np.random.default_rng(record_seed(cfg.seed, index))
    g, L, s = cfg.grid, cfg.seq_len, cfg.signal_strength

    u = rng.random()
    fake_img = u >= cfg.p_genuine and u < cfg.p_genuine + cfg.p_image_only + cfg.p_mixed
    fake_txt = u >= cfg.p_genuine + cfg.p_image_only

    topic = int(rng.integers(cfg.num_topics))
    grid = _BASE_NOISE * rng.normal(size=(g, g, cfg.d_raw)) + world.tints[topic]
    tokens = _draw_genuine_tokens(rng, world, topic, L)

    bbox = None
    y_pat = np.zeros(g * g, dtype=np.int64)
    y_v_m = None
    if fake_img:
        y_v_m = 1 if rng.random() < cfg.fs_ratio else 0
        bbox = _sample_bbox(rng, g)
        ratios = overlap_ratios(bbox, g)
        y_pat = (ratios > 0.0).astype(np.int64)
        amp = np.where(ratios > 0.0, (_AMP_FLOOR + (1 - _AMP_FLOOR) * ratios) * s, 0.0)
        amp = amp.reshape(g, g, 1)
        if y_v_m == 1:
            # swapped-in content drifts toward a donor topic's tint: the
            # displacement lies in the tint subspace, so it is ambiguous
            # unimodally but revealed by the caption's topic
            donor = int(rng.integers(cfg.num_topics - 1))
            donor = donor + 1 if donor >= topic else donor
            swap = world.tints[donor] - world.tints[topic]
            swap = swap / np.linalg.norm(swap)
            if rng.random() < _FS_CLEAN_RATIO:
                grid = grid + amp * _FS_CLEAN_GAIN * swap
            else:
                grid = grid + amp * (_FS_DET_GAIN * world.det_dir
                                     + _FS_SIG_GAIN * world.fs_dir
                                     + _FS_SWAP_GAIN * swap)
        else:
            grid = grid * (1.0 + amp * _FA_MUL_GAIN * world.fa_pattern)
            grid = grid + amp * (_FA_DET_GAIN * world.det_dir
                                 + _FA_SIG_GAIN * world.fa_dir)

    y_tok = np.zeros(L, dtype=np.int64)
    y_t_m = None
    if fake_txt:
        y_t_m = 1 if rng.random() < cfg.ts_ratio else 0
        start, length = _forged_span(rng, L)
        y_tok[start:start + length] = 1
        if y_t_m == 1:
            other = int(rng.integers(cfg.num_topics - 1))
            other = other + 1 if other >= topic else other
            tokens[start:start + length] = rng.choice(world.core[other], size=length)
        else:
            tokens[start:start + length] = rng.choice(world.edit_attr[topic], size=length)

    y_multi = [int(fake_img and y_v_m == 1), int(fake_img and y_v_m == 0),
               int(fake_txt and y_t_m == 1), int(fake_txt and y_t_m == 0)]
    labels = LabelSet(y_v_bin=int(fake_img), y_t_bin=int(fake_txt),
                      y_multi=y_multi, bbox=bbox, y_pat=y_pat, y_tok=y_tok,
                      y_v_m=y_v_m, y_t_m=y_t_m)
    return Sample(patch_grid=grid, tokens=tokens, labels=labels,
                  seed=record_seed(cfg.seed, index))


def generate_dataset(cfg: DatasetConfig):
    cfg.validate()
    world = World(cfg)
    return [generate_sample(cfg, i, world) for i in range(cfg.num_samples)]


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _sample_to_record(sample: Sample):
    lab = sample.labels
    return {
        "seed": int(sample.seed),
        "patch_grid": sample.patch_grid.tolist(),
        "tokens": [int(t) for t in sample.tokens],
        "labels": {
            "y_v_bin": int(lab.y_v_bin),
            "y_t_bin": int(lab.y_t_bin),
            "y_multi": [int(v) for v in lab.y_multi],
            "bbox": list(lab.bbox) if lab.bbox is not None else None,
            "y_pat": [int(v) for v in lab.y_pat],
            "y_tok": [int(v) for v in lab.y_tok],
            "y_v_m": None if lab.y_v_m is None else int(lab.y_v_m),
            "y_t_m": None if lab.y_t_m is None else int(lab.y_t_m),
        },
    }


def _record_to_sample(rec) -> Sample:
    lab = rec["labels"]
    return Sample(
        patch_grid=np.asarray(rec["patch_grid"], dtype=np.float64),
        tokens=np.asarray(rec["tokens"], dtype=np.int64),
        labels=LabelSet(
            y_v_bin=lab["y_v_bin"], y_t_bin=lab["y_t_bin"],
            y_multi=list(lab["y_multi"]),
            bbox=None if lab["bbox"] is None else tuple(lab["bbox"]),
            y_pat=np.asarray(lab["y_pat"], dtype=np.int64),
            y_tok=np.asarray(lab["y_tok"], dtype=np.int64),
            y_v_m=lab["y_v_m"], y_t_m=lab["y_t_m"]),
        seed=rec["seed"])


def validate_sample(sample: Sample, cfg: DatasetConfig, line=None):
    """Check every label-schema invariant; raise DataFormatError on the first
    violation, citing the line number when reading from a file."""
    def fail(msg):
        raise DataFormatError(msg, line=line)

    lab = sample.labels
    g, L = cfg.grid, cfg.seq_len
    if sample.patch_grid.shape != (g, g, cfg.d_raw):
        fail(f"patch_grid shape {sample.patch_grid.shape} != {(g, g, cfg.d_raw)}")
    if not np.all(np.isfinite(sample.patch_grid)):
        fail("patch_grid contains non-finite values")
    if sample.tokens.shape != (L,):
        fail(f"tokens length {sample.tokens.shape} != {L}")
    if np.any(sample.tokens < 0) or np.any(sample.tokens >= cfg.vocab_size):
        fail("token id outside vocabulary")
    if lab.y_v_bin not in (0, 1) or lab.y_t_bin not in (0, 1):
        fail("binary labels must be 0/1")
    if len(lab.y_multi) != 4 or any(v not in (0, 1) for v in lab.y_multi):
        fail("y_multi must be a 4-bit vector")
    if lab.y_pat.shape != (g * g,):
        fail(f"y_pat length {lab.y_pat.shape} != {g * g}")
    if lab.y_tok.shape != (L,):
        fail(f"y_tok length {lab.y_tok.shape} != {L}")

    fs, fa, ts, ta = lab.y_multi
    if lab.y_v_bin == 1:
        if lab.bbox is None:
            fail("y_v_bin=1 requires a bbox")
        if fs + fa != 1:
            fail("fake image must set exactly one of FS/FA")
        if lab.y_v_m is None:
            fail("fake image requires y_v_m")
        if (lab.y_v_m == 1) != (fs == 1):
            fail("y_v_m inconsistent with FS/FA bits")
        if not np.any(lab.y_pat):
            fail("fake image must flag at least one patch")
        x0, y0, x1, y1 = lab.bbox
        if not (x1 > x0 and y1 > y0):
            fail("bbox must have positive area")
        if x0 < 0 or y0 < 0 or x1 > g or y1 > g:
            fail("bbox outside the patch grid")
        expect = (overlap_ratios(lab.bbox, g) > 0.0).astype(np.int64)
        if not np.array_equal(expect, lab.y_pat):
            fail("y_pat does not match the patches intersecting bbox")
    else:
        if lab.bbox is not None:
            fail("genuine image must not carry a bbox")
        if fs or fa or lab.y_v_m is not None or np.any(lab.y_pat):
            fail("genuine image carries image-forgery labels")

    if lab.y_t_bin == 1:
        if ts + ta != 1:
            fail("fake text must set exactly one of TS/TA")
        if lab.y_t_m is None:
            fail("fake text requires y_t_m")
        if (lab.y_t_m == 1) != (ts == 1):
            fail("y_t_m inconsistent with TS/TA bits")
        if not np.any(lab.y_tok):
            fail("fake text must flag at least one token")
    else:
        if ts or ta or lab.y_t_m is not None or np.any(lab.y_tok):
            fail("genuine text carries text-forgery labels")
    return sample


def write_dataset(samples, path, cfg: DatasetConfig):
    header = {"schema_version": SCHEMA_VERSION, "config": cfg.to_dict()}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for sample in samples:
            fh.write(json.dumps(_sample_to_record(sample),
                                separators=(",", ":")) + "\n")


def read_dataset(path):
    """Load and fully validate a dataset file; returns (cfg, samples)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError("empty file: missing header", line=0)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DataFormatError(f"header is not valid JSON: {e}", line=0) from e
    if not isinstance(header, dict) or header.get("schema_version") != SCHEMA_VERSION:
        raise DataFormatError(
            f"unsupported schema_version {header.get('schema_version')!r}", line=0)
    cfg = DatasetConfig.from_dict(header["config"])
    samples = []
    for i, raw in enumerate(lines[1:], start=1):
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"record is not valid JSON: {e}", line=i) from e
        try:
            sample = _record_to_sample(rec)
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"malformed record: {e}", line=i) from e
        validate_sample(sample, cfg, line=i)
        samples.append(sample)
    return cfg, samples
