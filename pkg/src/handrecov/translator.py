"""Appearance wrapping generator and the dual adversarial discrimination kit.

The generator extracts structure and appearance pyramids with one shared
conv backbone, then fuses them coarse-to-fine with wrapper blocks: a
modulated convolution styled by the max-pooled appearance feature plus a
1x1 conv that filters the appearance stream. Each level maps to RGB; skips
accumulate by default and the last level is the output.

Training confronts two discriminators: one scores lone outputs against the
bare domain, the other scores (input, output) concatenations against real
(degraded, clean) partner pairs, with relaxed targets for synthetic pairs.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .structure import DimensionError
from .tokenizer import ParameterError

TAP_LAYERS = (1, 3, 5, 10, 13)  # 1-indexed convs of the 13-conv backbone
MASK_THRESHOLD = 0.5


class SharedBackbone(nn.Module):
    """13-conv feature net (VGG-16 layout, width-scaled); taps after convs
    1, 3, 5, 10, 13 give 5 pyramid levels at strides 1,2,4,8,16."""

    def __init__(self, base_channels: int = 32):
        super().__init__()
        c = base_channels
        plan = [(c, 2), (2 * c, 2), (4 * c, 3), (8 * c, 3), (8 * c, 3)]
        convs = []
        cin = 3
        for width, reps in plan:
            for _ in range(reps):
                convs.append(nn.Conv2d(cin, width, 3, padding=1))
                cin = width
        self.convs = nn.ModuleList(convs)
        self.widths = [c, 2 * c, 4 * c, 8 * c, 8 * c]
        self._pool_after = {2, 4, 7, 10}  # conv indices (1-based) ending a block

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        for i, conv in enumerate(self.convs, start=1):
            x = F.relu(conv(x))
            if i in TAP_LAYERS:
                taps.append(x)
            if i in self._pool_after:
                x = F.max_pool2d(x, 2)
        return taps


class ModulatedConv2d(nn.Module):
    """StyleGAN2-style weight modulation with demodulation."""

    def __init__(self, cin, cout, style_dim, kernel=3):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(cout, cin, kernel, kernel) * 0.02)
        self.bias = nn.Parameter(torch.zeros(cout))
        self.affine = nn.Linear(style_dim, cin)
        nn.init.ones_(self.affine.bias)
        self.padding = kernel // 2

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        b, cin, h, w = x.shape
        s = self.affine(style)  # (b,cin)
        wgt = self.weight[None] * s[:, None, :, None, None]
        demod = torch.rsqrt((wgt ** 2).sum(dim=(2, 3, 4)) + 1e-8)
        wgt = wgt * demod[:, :, None, None, None]
        out = F.conv2d(
            x.reshape(1, b * cin, h, w),
            wgt.reshape(-1, cin, *self.weight.shape[2:]),
            padding=self.padding,
            groups=b,
        )
        return out.reshape(b, -1, h, w) + self.bias[None, :, None, None]


class WrapperBlock(nn.Module):
    """One fusion level: style from max-pooled appearance, modulated conv on
    the (state, structure) stack, filtered appearance injection, toRGB."""

    def __init__(self, state_ch, feat_ch, out_ch, style_dim):
        super().__init__()
        self.style = nn.Sequential(
            nn.Linear(feat_ch, style_dim), nn.LeakyReLU(0.2),
            nn.Linear(style_dim, style_dim),
        )
        self.modconv = ModulatedConv2d(state_ch + feat_ch, out_ch, style_dim)
        self.filter = nn.Conv2d(feat_ch, out_ch, 1)
        self.to_rgb = nn.Conv2d(out_ch, 3, 1)

    def style_vector(self, appearance: torch.Tensor) -> torch.Tensor:
        pooled = appearance.amax(dim=(2, 3))  # spatial max pool -> (b,c)
        return self.style(pooled)

    def forward(self, state, structure_feat, appearance_feat):
        style = self.style_vector(appearance_feat)
        fused = self.modconv(torch.cat([state, structure_feat], dim=1), style)
        out = F.leaky_relu(fused + self.filter(appearance_feat), 0.2)
        return out, self.to_rgb(out)


class WrapperStack(nn.Module):
    """The translator G: shared backbone + N wrappers + per-level RGB."""

    def __init__(self, base_channels: int = 32, style_dim: int = 128,
                 num_wrappers: int = 5, rgb_skip_accumulate: bool = True):
        super().__init__()
        if num_wrappers != len(TAP_LAYERS):
            raise ParameterError("wrapper count must match the 5 backbone taps")
        self.backbone = SharedBackbone(base_channels)
        self.rgb_skip_accumulate = rgb_skip_accumulate
        widths = self.backbone.widths
        self.entry = nn.Conv2d(widths[-1], widths[-1], 3, padding=1)
        blocks = []
        state_ch = widths[-1]
        for level in reversed(range(num_wrappers)):
            out_ch = widths[level]
            blocks.append(WrapperBlock(state_ch, widths[level], out_ch, style_dim))
            state_ch = out_ch
        self.wrappers = nn.ModuleList(blocks)

    def forward(self, image: torch.Tensor, structure_img: torch.Tensor):
        """image, structure_img: (b,3,h,w) in [0,1]. Returns (y, levels):
        the final output and every level's RGB mapping, coarse to fine."""
        if image.shape != structure_img.shape:
            raise DimensionError(
                f"image {tuple(image.shape)} and structure {tuple(structure_img.shape)} differ"
            )
        app = self.backbone(image)
        struct = self.backbone(structure_img)
        state = F.leaky_relu(self.entry(struct[-1]), 0.2)
        rgb_acc = None
        levels = []
        for i, block in enumerate(self.wrappers):
            level = len(self.wrappers) - 1 - i  # 4..0 into the tap pyramid
            if i > 0:
                state = F.interpolate(state, scale_factor=2, mode="bilinear",
                                      align_corners=False)
            state, rgb = block(state, struct[level], app[level])
            if rgb_acc is not None and self.rgb_skip_accumulate:
                rgb_acc = F.interpolate(rgb_acc, scale_factor=2, mode="bilinear",
                                        align_corners=False) + rgb
            else:
                rgb_acc = rgb
            levels.append(torch.sigmoid(rgb_acc))
        return levels[-1], levels


def translate(model: WrapperStack, image, structure_map):
    """Typed single-image API: numpy image (3,h,w) in [0,1] + StructureMap
    -> (output image (3,h,w), per-level outputs)."""
    import numpy as np

    from .structure import StructureMap, to_image_range

    arr = torch.from_numpy(np.asarray(image, dtype="float32"))[None]
    if isinstance(structure_map, StructureMap):
        s = torch.from_numpy(to_image_range(structure_map))[None]
    else:
        s = torch.from_numpy(np.asarray(structure_map, dtype="float32"))[None]
    model.eval()
    with torch.no_grad():
        y, levels = model(arr, s)
    return y[0].numpy(), [lv[0].numpy() for lv in levels]


# ---------------------------------------------------------------------------
# Discriminators
# ---------------------------------------------------------------------------

class _PatchD(nn.Module):
    def __init__(self, in_ch, base=32, layers=3):
        super().__init__()
        seq = [nn.Conv2d(in_ch, base, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        c = base
        for i in range(1, layers):
            seq += [nn.Conv2d(c, min(2 * c, 8 * base), 4, stride=2, padding=1),
                    nn.LeakyReLU(0.2)]
            c = min(2 * c, 8 * base)
        seq.append(nn.Conv2d(c, 1, 4, padding=1))
        self.net = nn.Sequential(*seq)

    def forward(self, x):
        return self.net(x)


class MultiScalePatchDiscriminator(nn.Module):
    """PatchGAN score maps at `scales` resolutions (input halved per scale)."""

    def __init__(self, in_channels: int, base_channels: int = 32, scales: int = 2):
        super().__init__()
        self.in_channels = in_channels
        self.heads = nn.ModuleList(_PatchD(in_channels, base_channels)
                                   for _ in range(scales))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.shape[1] != self.in_channels:
            raise DimensionError(
                f"discriminator expects {self.in_channels} channels, got {x.shape[1]}"
            )
        outs = []
        for i, head in enumerate(self.heads):
            outs.append(head(x))
            if i + 1 < len(self.heads):
                x = F.avg_pool2d(x, 2)
        return outs


class DiscriminatorPair(nn.Module):
    """Result discriminator (3-channel) + process discriminator (6-channel,
    input-output concatenation)."""

    def __init__(self, base_channels: int = 32, scales: int = 2):
        super().__init__()
        self.result = MultiScalePatchDiscriminator(3, base_channels, scales)
        self.process = MultiScalePatchDiscriminator(6, base_channels, scales)


def _score_l1(scores: list[torch.Tensor], target: float) -> torch.Tensor:
    return torch.stack([(s - target).abs().mean() for s in scores]).mean()


def masked_background_mse(y: torch.Tensor, x: torch.Tensor,
                          mask: torch.Tensor) -> torch.Tensor:
    """Mean-square of (y - x) outside the binarized hand mask."""
    keep = (mask < MASK_THRESHOLD).to(y.dtype)
    if keep.ndim == 3:
        keep = keep[:, None]
    return (((y - x) * keep) ** 2).mean()


def generator_loss(
    x_a: torch.Tensor, y_a: torch.Tensor,
    x_bt: torch.Tensor, y_bt: torch.Tensor,
    mask_a: torch.Tensor, mask_bt: torch.Tensor,
    pair: DiscriminatorPair,
) -> dict[str, torch.Tensor]:
    """Six-term translator loss: two background terms, two result-adversarial
    terms, two process-adversarial terms. total is exactly their sum."""
    terms = {
        "bg_a": masked_background_mse(y_a, x_a, mask_a),
        "bg_bt": masked_background_mse(y_bt, x_bt, mask_bt),
        "adv_result_a": _score_l1(pair.result(y_a), 1.0),
        "adv_result_bt": _score_l1(pair.result(y_bt), 1.0),
        "adv_process_a": _score_l1(pair.process(torch.cat([x_a, y_a], dim=1)), 1.0),
        "adv_process_bt": _score_l1(pair.process(torch.cat([x_bt, y_bt], dim=1)), 1.0),
    }
    terms["total"] = sum(v for k, v in terms.items() if k != "total")
    return terms


def discriminator_loss(
    x_a: torch.Tensor, y_a: torch.Tensor,
    x_bt: torch.Tensor, y_bt: torch.Tensor,
    x_b: torch.Tensor,
    pair: DiscriminatorPair,
    alpha1: float, alpha2: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Stop-gradient discriminator objectives (L_result, L_process); relaxed
    targets score the synthetic partner translations."""
    for a in (alpha1, alpha2):
        if not (0.0 <= a <= 1.0):
            raise ParameterError(f"alpha tolerance {a} outside [0,1]")
    y_a = y_a.detach()
    y_bt = y_bt.detach()
    l_r = (_score_l1(pair.result(y_a), 0.0)
           + _score_l1(pair.result(y_bt), alpha2)
           + _score_l1(pair.result(x_b), 1.0))
    l_p = (_score_l1(pair.process(torch.cat([x_a, y_a], dim=1)), 0.0)
           + _score_l1(pair.process(torch.cat([x_bt, y_bt], dim=1)), alpha1)
           + _score_l1(pair.process(torch.cat([x_bt, x_b], dim=1)), 1.0))
    return l_r, l_p


def multilevel_background_terms(
    levels: list[torch.Tensor], x: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Background supervision for every non-final level at its resolution;
    images resampled bilinearly, masks by nearest neighbor."""
    total = x.new_zeros(())
    for lv in levels[:-1]:
        size = lv.shape[-2:]
        x_lv = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
        m_lv = F.interpolate(mask[:, None], size=size, mode="nearest")[:, 0]
        total = total + masked_background_mse(lv, x_lv, m_lv)
    return total


def train_dad_steps(
    generator: WrapperStack,
    pair: DiscriminatorPair,
    sample_batch,
    steps: int,
    lr: float = 1e-4,
    alpha_low: float = 0.4,
    alpha_high: float = 0.7,
    multilevel: bool = True,
    seed: int = 0,
    log=None,
    start_step: int = 0,
    opt_state: dict | None = None,
):
    """Alternating G/D updates. sample_batch(step, gen) must yield a dict
    with x_a, s_a, m_a, x_bt, s_bt, m_bt, x_b tensors; alpha tolerances are
    resampled uniformly per discriminator step."""
    opt_g = torch.optim.Adam(generator.parameters(), lr=lr)
    opt_d = torch.optim.Adam(pair.parameters(), lr=lr)
    if opt_state:
        opt_g.load_state_dict(opt_state["g"])
        opt_d.load_state_dict(opt_state["d"])
    gen = torch.Generator().manual_seed(seed + 7 * start_step)
    history = []
    for step in range(start_step, steps):
        batch = sample_batch(step, gen)
        y_a, levels_a = generator(batch["x_a"], batch["s_a"])
        y_bt, levels_bt = generator(batch["x_bt"], batch["s_bt"])

        alpha1 = alpha_low + (alpha_high - alpha_low) * float(torch.rand((), generator=gen))
        alpha2 = alpha_low + (alpha_high - alpha_low) * float(torch.rand((), generator=gen))
        l_r, l_p = discriminator_loss(
            batch["x_a"], y_a, batch["x_bt"], y_bt, batch["x_b"], pair, alpha1, alpha2
        )
        opt_d.zero_grad()
        (l_r + l_p).backward()
        opt_d.step()

        terms = generator_loss(
            batch["x_a"], y_a, batch["x_bt"], y_bt, batch["m_a"], batch["m_bt"], pair
        )
        g_total = terms["total"]
        if multilevel:
            ml = (multilevel_background_terms(levels_a, batch["x_a"], batch["m_a"])
                  + multilevel_background_terms(levels_bt, batch["x_bt"], batch["m_bt"]))
            g_total = g_total + ml
        else:
            ml = torch.zeros(())
        opt_g.zero_grad()
        g_total.backward()
        opt_g.step()

        rec = {k: float(v.detach()) for k, v in terms.items()}
        rec.update({"d_result": float(l_r), "d_process": float(l_p),
                    "multilevel": float(ml), "step": step})
        history.append(rec)
        if log and (step + 1) % 100 == 0:
            log(f"dad step {step + 1}/{steps} g {rec['total']:.4f} "
                f"d_r {rec['d_result']:.4f} d_p {rec['d_process']:.4f}")
    return history, {"g": opt_g.state_dict(), "d": opt_d.state_dict()}
