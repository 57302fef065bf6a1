"""Analytic per-image multiply-accumulate counts and trainable-parameter totals.

Inference cost assumes text features of every prompt set are cached, which
holds once training ends because the text encoder and finished prompt sets
are frozen. Counts cover matrix products only; layer norms, softmax and
elementwise ops are ignored on both branches alike.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

from .config import RunConfig


def encoder_macs(n_tokens: int, width: int, depth: int, mlp_ratio: int = 4) -> int:
    """One pre-LN transformer stack over ``n_tokens`` tokens."""
    proj = 4 * n_tokens * width * width            # q, k, v, o
    attn = 2 * n_tokens * n_tokens * width         # scores and weighted sum
    mlp = 2 * n_tokens * width * mlp_ratio * width
    return depth * (proj + attn + mlp)


def vision_macs(image_size: int, patch_size: int, channels: int, width: int, depth: int,
                n_prompts: int, out_dim: int | None = None) -> int:
    n_patches = (image_size // patch_size) ** 2
    embed = n_patches * patch_size * patch_size * channels * width
    tokens = 1 + n_prompts + n_patches
    proj = width * out_dim if out_dim and out_dim != width else 0
    return embed + encoder_macs(tokens, width, depth) + proj


@dataclass(frozen=True)
class CostReport:
    stabilizer: int
    booster: int
    fusion: int
    gate: int
    activation_rate: float
    promptfusion: float
    lite: float
    flops: float                 # cost of the configured variant
    params: int
    param_breakdown: dict

    def to_dict(self) -> dict:
        return asdict(self)


def _n_prompt_rows(cfg: RunConfig) -> int:
    # domain streams add a full set of class prompts per task
    k = cfg.stream.n_classes
    if cfg.scenario == "domain":
        return k * len(cfg.stream.train_domains)
    return k


def cost_model(cfg: RunConfig, activation_rate: float | None = None, channels: int = 3) -> CostReport:
    """Per-image MACs of each component and the trainable-parameter count.

    ``activation_rate`` defaults to the gate's target rate ``rho``. The Lite
    cost is ``stabilizer + gate + rate * booster + fusion``.
    """
    m, s = cfg.model, cfg.stream
    rate = cfg.gate.rho if activation_rate is None else float(activation_rate)
    if not 0.0 <= rate <= 1.0:
        raise ValueError("activation rate must lie in [0, 1]")
    k = s.n_classes
    rows = _n_prompt_rows(cfg)
    stab = vision_macs(s.image_size, m.patch_size, channels, m.vision_width, m.depth,
                       m.image_prompt_length, m.text_width) + rows * m.text_width
    boost = vision_macs(s.image_size, m.patch_size, channels, m.vision_width, m.depth,
                        m.booster_prompt_length) + k * m.vision_width
    fusion = 2 * k
    gate = m.text_width * cfg.gate.hidden + cfg.gate.hidden * 2
    if cfg.gate.feature == "plain":
        gate += vision_macs(s.image_size, m.patch_size, channels, m.vision_width, m.depth, 0, m.text_width)
    pf = stab + boost + fusion
    lite = stab + gate + rate * boost + fusion
    flops = {"stabilizer": stab, "booster": boost}.get(m.variant, lite if cfg.gate.enabled else pf)

    params: dict[str, int] = {}
    if m.variant in ("promptfusion", "stabilizer"):
        params["text_prompts"] = rows * m.text_prompt_length * m.text_width
        params["image_prompts"] = m.image_prompt_length * m.vision_width
    if m.variant in ("promptfusion", "booster"):
        params["booster_prompts"] = m.booster_prompt_length * m.vision_width
        params["booster_head"] = k * m.vision_width + k
    if m.variant == "promptfusion":
        if cfg.fusion.use_mask:
            params["mask"] = k
        if cfg.fusion.use_lambda:
            params["lambda"] = 1
        if cfg.gate.enabled:
            h = cfg.gate.hidden
            params["gate"] = m.text_width * h + h + h * 2 + 2
    return CostReport(stab, boost, fusion, gate, rate, float(pf), float(lite), float(flops),
                      int(sum(params.values())), params)


def full_scale_config() -> RunConfig:
    """Reference setting: 100 classes, M=30, e_text=512, p=30, L~=40, e_vis=768, ViT-B/16."""
    cfg = RunConfig()
    cfg.stream.n_classes, cfg.stream.n_tasks, cfg.stream.image_size = 100, 10, 224
    cfg.model.text_prompt_length, cfg.model.text_width = 30, 512
    cfg.model.booster_prompt_length, cfg.model.image_prompt_length = 30, 40
    cfg.model.vision_width, cfg.model.depth, cfg.model.n_heads, cfg.model.patch_size = 768, 12, 12, 16
    cfg.rehearsal.mode = "buffer"
    return cfg
