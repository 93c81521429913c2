"""Feature fusion: branch reorganization, multi-scale refinement, local
similarity-matched fusion, and cross-scale equalization.

Encoded features from the five encoder blocks are split into a texture branch
(blocks 1-3, resampled to the block-3 scale) and a structure branch (blocks
4-5, resampled to the block-4 scale). Each branch is refined by parallel
multi-kernel convolution streams, then K per-image feature maps are fused
into one: a base map is picked, and every spatial position of the base is
blended with the best cosine-matching position of each reference map under a
convex weight vector. The fused branches are finally resampled to a common
scale, concatenated, and projected into equalized features that supplement
the decoder at every resolution.
"""

from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import PlanError

COSINE_EPS = 1e-8
SIMPLEX_TOL = 1e-6


@dataclass
class FusionPlan:
    """Sampled mixing weights plus the matched positions of one fusion.

    ``alpha`` lies on the simplex and is indexed like the K input features;
    ``base_index`` selects the anchor feature. ``match_indices`` is filled in
    by :func:`local_fuse`: row r holds, for every base position, the flat
    position of reference r that was blended in. Keeping it allows the exact
    same fusion to be replayed (e.g. at image resolution).
    """

    alpha: np.ndarray
    base_index: int
    match_indices: np.ndarray | None = None  # (K-1, n) int64

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.match_indices is not None:
            self.match_indices = np.asarray(self.match_indices, dtype=np.int64)

    @property
    def k(self) -> int:
        return int(self.alpha.shape[0])

    def validate(self, n_positions=None):
        if self.alpha.ndim != 1 or self.k < 2:
            raise PlanError(f"alpha must be a vector of length K >= 2, got shape {self.alpha.shape}")
        if np.any(self.alpha < 0) or abs(float(self.alpha.sum()) - 1.0) > SIMPLEX_TOL:
            raise PlanError(
                f"alpha must be non-negative and sum to 1, got sum {float(self.alpha.sum()):.8f}"
            )
        if not 0 <= self.base_index < self.k:
            raise PlanError(f"base_index {self.base_index} out of range for K={self.k}")
        if self.match_indices is not None:
            if self.match_indices.shape[0] != self.k - 1:
                raise PlanError(
                    f"match_indices must have K-1={self.k - 1} rows, got {self.match_indices.shape}"
                )
            if n_positions is not None:
                if self.match_indices.shape[1] != n_positions:
                    raise PlanError(
                        f"match_indices cover {self.match_indices.shape[1]} positions, "
                        f"expected {n_positions}"
                    )
                if self.match_indices.min() < 0 or self.match_indices.max() >= n_positions:
                    raise PlanError("match_indices out of range")

    def to_record(self) -> dict:
        """JSON-friendly debug record for replaying a fusion in tests."""
        return {
            "alpha": self.alpha.tolist(),
            "base_index": int(self.base_index),
            "match_indices": None if self.match_indices is None else self.match_indices.tolist(),
        }

    @classmethod
    def from_record(cls, record) -> "FusionPlan":
        match = record.get("match_indices")
        return cls(
            alpha=np.asarray(record["alpha"], dtype=np.float64),
            base_index=int(record["base_index"]),
            match_indices=None if match is None else np.asarray(match, dtype=np.int64),
        )


def sample_plan(k: int, rng) -> FusionPlan:
    """Uniform simplex weights (flat Dirichlet) and a uniform base index."""
    if k < 2:
        raise PlanError(f"K must be >= 2, got {k}")
    alpha = rng.dirichlet(np.ones(k))
    base = int(rng.integers(k))
    return FusionPlan(alpha=alpha, base_index=base)


@dataclass
class FeaturePyramid:
    """Per-block encoder outputs, shallow to deep."""

    levels: list

    def __post_init__(self):
        if len(self.levels) != 5:
            raise ValueError(f"a pyramid has exactly 5 levels, got {len(self.levels)}")
        k = self.levels[0].shape[0]
        prev = None
        for i, lvl in enumerate(self.levels):
            if lvl.ndim != 4:
                raise ValueError(f"level {i} must be rank-4, got rank {lvl.ndim}")
            if lvl.shape[0] != k:
                raise ValueError("all levels must share the leading K dimension")
            hw = lvl.shape[2] * lvl.shape[3]
            if prev is not None and hw >= prev:
                raise ValueError("spatial size must strictly decrease with depth")
            prev = hw

    @property
    def k(self) -> int:
        return int(self.levels[0].shape[0])


@dataclass
class BranchFeatures:
    """Aggregated texture (shallow) and structure (deep) maps, K per task."""

    texture: torch.Tensor  # (K, c_te, h_te, w_te)
    structure: torch.Tensor  # (K, c_st, h_st, w_st)

    def __post_init__(self):
        if self.texture.ndim != 4 or self.structure.ndim != 4:
            raise ValueError("branch features must be rank-4")
        if self.texture.shape[0] != self.structure.shape[0]:
            raise ValueError("texture and structure must share the K dimension")


@dataclass
class EqualizedFeatures:
    """Fused-and-equalized features plus per-encoder-level resampled variants."""

    f_eq: torch.Tensor  # (B, c_eq, h_eq, w_eq)
    per_level: list  # 5 tensors, per_level[i] spatially matching encoder level i+1


def similarity_map(f_base: torch.Tensor, f_ref: torch.Tensor, eps: float = COSINE_EPS) -> torch.Tensor:
    """Cosine similarity between every base position and every reference position.

    Inputs are (c, h, w); the result is (h*w, h*w) with entry (i, j) the cosine
    of the channel vectors at base position i and reference position j. Norms
    are clamped below by ``eps`` so zero vectors compare as 0.
    """
    if f_base.shape != f_ref.shape:
        raise ValueError(f"shape mismatch: {tuple(f_base.shape)} vs {tuple(f_ref.shape)}")
    if f_base.ndim != 3:
        raise ValueError(f"expected rank-3 (c, h, w) features, got rank {f_base.ndim}")
    c = f_base.shape[0]
    a = f_base.reshape(c, -1)
    b = f_ref.reshape(c, -1)
    a = a / a.norm(dim=0, keepdim=True).clamp_min(eps)
    b = b / b.norm(dim=0, keepdim=True).clamp_min(eps)
    return (a.transpose(0, 1) @ b).clamp(-1.0, 1.0)


def local_fuse(features: torch.Tensor, plan: FusionPlan):
    """Blend K feature maps into one by per-position similarity matching.

    For every spatial position of the base map, each reference contributes the
    channel vector at its most similar position; the fused vector is the
    alpha-weighted combination. Matching is recomputed unless the plan already
    carries match indices (replay mode). Gradients flow through the gathered
    values only; the argmax itself is taken as constant.

    Returns (fused, plan_out) where fused is (c, h, w) and plan_out records
    the match indices actually used.
    """
    if features.ndim != 4:
        raise ValueError(f"features must be (K, c, h, w), got rank {features.ndim}")
    k, c, h, w = features.shape
    if k < 2:
        raise ValueError(f"local fusion needs K >= 2 features, got {k}")
    if plan.k != k:
        raise PlanError(f"plan is for K={plan.k} but {k} features were given")
    n = h * w
    plan.validate(n_positions=n if plan.match_indices is not None else None)

    base_index = plan.base_index
    ref_order = [i for i in range(k) if i != base_index]
    flat = features.reshape(k, c, n)

    if plan.match_indices is None:
        with torch.no_grad():
            rows = []
            base = features[base_index]
            for r in ref_order:
                sim = similarity_map(base, features[r])
                rows.append(sim.argmax(dim=1))
            match = torch.stack(rows)
    else:
        match = torch.as_tensor(plan.match_indices, dtype=torch.int64, device=features.device)

    alpha = torch.as_tensor(plan.alpha, dtype=features.dtype, device=features.device)
    fused = alpha[base_index] * flat[base_index]
    for row, r in enumerate(ref_order):
        fused = fused + alpha[r] * flat[r][:, match[row]]
    plan_out = replace(plan, match_indices=match.cpu().numpy())
    return fused.reshape(c, h, w), plan_out


class MultiScaleBlock(nn.Module):
    """Parallel convolution streams with different kernel sizes.

    Each stream stacks ``depth`` same-kernel convolutions; stream outputs are
    concatenated on channels and projected back to the input width by a 1x1
    convolution, so spatial and channel dimensions are preserved.
    """

    def __init__(self, channels, kernel_sizes=(3, 5, 7), depth=5, negative_slope=0.2):
        super().__init__()
        self.channels = channels
        self.kernel_sizes = tuple(kernel_sizes)
        self.depth = depth
        streams = []
        for ks in self.kernel_sizes:
            layers = []
            for _ in range(depth):
                layers.append(nn.Conv2d(channels, channels, ks, padding=ks // 2))
                layers.append(nn.LeakyReLU(negative_slope, inplace=True))
            streams.append(nn.Sequential(*layers))
        self.streams = nn.ModuleList(streams)
        self.project = nn.Conv2d(len(self.kernel_sizes) * channels, channels, 1)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        outs = [stream(x) for stream in self.streams]
        return self.project(torch.cat(outs, dim=1))


class BranchReorganizer(nn.Module):
    """Resample and sum encoder levels into texture and structure maps.

    Texture aggregates levels 1-3 at the level-3 scale (1/8 of the input);
    structure aggregates levels 4-5 at the level-4 scale (1/16). The learned
    resampling convolutions force every summand to an identical shape.
    """

    def __init__(self, channel_plan, negative_slope=0.2):
        super().__init__()
        if len(channel_plan) != 5:
            raise ValueError("channel_plan must list 5 block widths")
        plan = list(channel_plan)
        self.texture_channels = plan[2]
        self.structure_channels = plan[3]
        act = nn.LeakyReLU(negative_slope, inplace=True)
        self.down = nn.ModuleList(
            [
                nn.Sequential(nn.Conv2d(plan[0], self.texture_channels, 4, stride=4), act),
                nn.Sequential(nn.Conv2d(plan[1], self.texture_channels, 4, stride=2, padding=1), act),
                nn.Sequential(nn.Conv2d(plan[2], self.texture_channels, 3, padding=1), act),
            ]
        )
        self.up = nn.ModuleList(
            [
                nn.Sequential(nn.Conv2d(plan[3], self.structure_channels, 3, padding=1), act),
                nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(plan[4], self.structure_channels, 3, padding=1),
                    act,
                ),
            ]
        )

    def forward(self, levels):
        """levels: 5 tensors (N, c_i, h_i, w_i) -> (texture, structure)."""
        if len(levels) != 5:
            raise ValueError(f"expected 5 pyramid levels, got {len(levels)}")
        te_terms = [conv(levels[i]) for i, conv in enumerate(self.down)]
        st_terms = [conv(levels[3 + i]) for i, conv in enumerate(self.up)]
        for terms in (te_terms, st_terms):
            shapes = {tuple(t.shape) for t in terms}
            assert len(shapes) == 1, f"branch summands disagree on shape: {shapes}"
        texture = te_terms[0]
        for t in te_terms[1:]:
            texture = texture + t
        structure = st_terms[0] + st_terms[1]
        return texture, structure


def _tile_channels(x, out_channels):
    """Parameter-free channel adapter: repeat and trim to the target width."""
    c = x.shape[1]
    reps = -(-out_channels // c)
    return x.repeat(1, reps, 1, 1)[:, :out_channels]


class FeatureEqualizer(nn.Module):
    """Blend fused texture/structure into equalized features at every scale.

    Both branch maps are resampled to the equalization scale (1/4 of the
    input, matching the decoder's third-block output), concatenated, and
    projected by a bias-free 1x1 convolution. Per-level variants are produced
    by nearest resampling plus bias-free 1x1 projections for the four skip
    levels; the deepest level gets a parameter-free channel tiling since the
    decoder consumes the fused bottleneck there directly. Disabling a branch
    zeroes its contribution exactly, so with both branches off every output
    is the zero tensor.
    """

    def __init__(self, channel_plan, image_size, texture_skips=True, structure_skips=True):
        super().__init__()
        plan = list(channel_plan)
        self.image_size = image_size
        self.eq_channels = plan[1]
        self.channel_plan = plan
        self.texture_skips = texture_skips
        self.structure_skips = structure_skips
        in_ch = plan[2] + plan[3]
        self.project = nn.Conv2d(in_ch, self.eq_channels, 1, bias=False)
        self.level_projections = nn.ModuleList(
            [nn.Conv2d(self.eq_channels, plan[i], 1, bias=False) for i in range(4)]
        )

    def forward(self, fused_texture, fused_structure) -> EqualizedFeatures:
        te = fused_texture.unsqueeze(0) if fused_texture.ndim == 3 else fused_texture
        st = fused_structure.unsqueeze(0) if fused_structure.ndim == 3 else fused_structure
        target = self.image_size // 4
        te = F.interpolate(te, size=(target, target), mode="nearest")
        st = F.interpolate(st, size=(target, target), mode="nearest")
        if not self.texture_skips:
            te = torch.zeros_like(te)
        if not self.structure_skips:
            st = torch.zeros_like(st)
        f_eq = self.project(torch.cat([te, st], dim=1))

        per_level = []
        for i in range(5):
            size_i = self.image_size // (2 ** (i + 1))
            resized = F.interpolate(f_eq, size=(size_i, size_i), mode="nearest")
            if i < 4:
                per_level.append(self.level_projections[i](resized))
            else:
                per_level.append(_tile_channels(resized, self.channel_plan[4]))
        return EqualizedFeatures(f_eq=f_eq, per_level=per_level)


class FeatureFusion(nn.Module):
    """End-to-end fusion pipeline used by the generator.

    reorganize -> multi-scale refinement -> per-branch local fusion with a
    shared plan -> equalization. Exposed piecewise so each stage can be
    exercised and replayed on its own.
    """

    def __init__(self, channel_plan, image_size, texture_skips=True, structure_skips=True,
                 kernel_sizes=(3, 5, 7), depth=5):
        super().__init__()
        self.reorganizer = BranchReorganizer(channel_plan)
        self.texture_scales = MultiScaleBlock(self.reorganizer.texture_channels, kernel_sizes, depth)
        self.structure_scales = MultiScaleBlock(self.reorganizer.structure_channels, kernel_sizes, depth)
        self.equalizer = FeatureEqualizer(channel_plan, image_size, texture_skips, structure_skips)

    def reorganize(self, pyramid: FeaturePyramid) -> BranchFeatures:
        texture, structure = self.reorganizer(list(pyramid.levels))
        return BranchFeatures(texture=texture, structure=structure)

    def multi_scale(self, branch, which) -> torch.Tensor:
        block = self.texture_scales if which == "texture" else self.structure_scales
        return block(branch)

    def semantic_fuse(self, branches: BranchFeatures, plan: FusionPlan):
        """Refine both branches, then locally fuse each with the shared plan.

        Returns (fused_texture, fused_structure, texture_plan, structure_plan);
        the fused maps are rank-3 (the K dimension is consumed by fusion).
        """
        te = self.texture_scales(branches.texture)
        st = self.structure_scales(branches.structure)
        fused_te, te_plan = local_fuse(te, replace(plan, match_indices=None))
        fused_st, st_plan = local_fuse(st, replace(plan, match_indices=None))
        return fused_te, fused_st, te_plan, st_plan

    def equalize(self, fused_texture, fused_structure) -> EqualizedFeatures:
        return self.equalizer(fused_texture, fused_structure)
