"""Closed-form and measured parameter/FLOP accounting.

Closed forms use integer keep counts (round half up, floor one), so they
agree exactly with enumerating tensors of a surgically pruned model. FLOPs
count matmul multiply-accumulates only; softmax, norms and elementwise work
are excluded by convention. Counting conventions are decoupled from runtime
execution: a Convention can include reference extras (biases, position
tables) that the runtime blocks never materialize.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .blocks import Backbone, BackboneConfig, WindowSpec, mlp_forward, patch_embed, \
    patch_merge, stage_geometry, wmsa_forward
from .errors import ConfigError
from .pruner import keep_count
from .tensor import count_macs


@dataclass(frozen=True)
class Convention:
    """Counting flags: what the totals include and how MACs convert to FLOPs."""

    mac_factor: int = 1
    include_bias: bool = False
    include_rpb: bool = False
    include_norms_and_head: bool = True

    def __post_init__(self):
        if self.mac_factor not in (1, 2):
            raise ConfigError(f"mac_factor must be 1 or 2, got {self.mac_factor}")


RUNTIME_CONVENTION = Convention()
# Published Swin-T accounting: biases and relative-position tables included.
REFERENCE_CONVENTION = Convention(include_bias=True, include_rpb=True)


def runtime_convention(config: BackboneConfig, mac_factor: int = 1) -> Convention:
    """Convention matching the actual tensors a model of this config holds."""
    return Convention(mac_factor=mac_factor,
                      include_rpb=config.use_relative_position_bias)


@dataclass(frozen=True)
class SiteCost:
    site_id: str
    params: int
    flops: int


@dataclass
class CostReport:
    config: BackboneConfig
    rho: float
    convention: Convention
    sites: list = field(default_factory=list)
    overhead_params: int = 0
    overhead_flops: int = 0
    head_params: int = 0

    @property
    def total_params(self) -> int:
        return sum(s.params for s in self.sites) + self.overhead_params

    @property
    def total_flops(self) -> int:
        return sum(s.flops for s in self.sites) + self.overhead_flops

    @property
    def backbone_params(self) -> int:
        return self.total_params - self.head_params

    def site(self, site_id: str) -> SiteCost:
        for s in self.sites:
            if s.site_id == site_id:
                return s
        raise KeyError(site_id)


def _attn_site_cost(n, d, h, window, kq, conv: Convention):
    hk = h * kq
    params = 4 * d * hk
    if conv.include_bias:
        params += 3 * hk + d          # qkv bias on kept columns, proj bias
    if conv.include_rpb:
        params += (2 * window - 1) ** 2 * h
    flops = conv.mac_factor * (4 * n * d * hk + 2 * n * window * window * hk)
    return params, flops


def msa_cost(n, d, h, rho, conv: Convention = RUNTIME_CONVENTION) -> dict:
    """Global attention over n tokens: params 4*rho*d^2, flops 4*rho*n*d^2 + 2*rho*n^2*d."""
    if d % h:
        raise ConfigError(f"dim {d} not divisible by {h} heads")
    kq = keep_count(d // h, rho)
    hk = h * kq
    params = 4 * d * hk + ((3 * hk + d) if conv.include_bias else 0)
    flops = conv.mac_factor * (4 * n * d * hk + 2 * n * n * hk)
    return {"params": params, "flops": flops}


def wmsa_cost(n, d, h, window, rho, conv: Convention = RUNTIME_CONVENTION) -> dict:
    """Windowed attention: the n^2 term shrinks to n*M^2."""
    if d % h:
        raise ConfigError(f"dim {d} not divisible by {h} heads")
    if n % (window * window):
        raise ConfigError(f"{n} tokens do not tile into {window}x{window} windows")
    params, flops = _attn_site_cost(n, d, h, window, keep_count(d // h, rho), conv)
    return {"params": params, "flops": flops}


def mlp_cost(n, d, d_m, rho, conv: Convention = RUNTIME_CONVENTION) -> dict:
    km = keep_count(d_m, rho)
    params = 2 * d * km + ((km + d) if conv.include_bias else 0)
    flops = conv.mac_factor * 2 * n * d * km
    return {"params": params, "flops": flops}


def model_cost(config: BackboneConfig, rho: float = 1.0,
               conv: Convention = RUNTIME_CONVENTION,
               site_dims: dict | None = None) -> CostReport:
    """Closed-form report over all sites plus non-prunable overhead.

    site_dims (same keys as Backbone.site_dims) overrides the uniform keep
    ratio per site, so reports can be produced for surgically pruned models.
    """
    site_dims = site_dims or {}
    report = CostReport(config=config, rho=rho, convention=conv)

    def kept(key, full):
        if key in site_dims:
            k = int(site_dims[key])
            if not 1 <= k <= full:
                raise ConfigError(f"site {key} width {k} outside [1, {full}]")
            return k
        return keep_count(full, rho)

    overhead_p = 0
    overhead_f = 0
    patch_width = config.in_channels * config.patch_size ** 2
    n0 = (config.image_size // config.patch_size) ** 2
    overhead_p += patch_width * config.base_dim
    overhead_f += conv.mac_factor * n0 * patch_width * config.base_dim
    if conv.include_bias:
        overhead_p += 3 * config.base_dim   # embed bias plus embed norm

    for geom in stage_geometry(config):
        n = geom.tokens
        for b in range(config.depths[geom.index]):
            base = f"stage{geom.index}.block{b}"
            if conv.include_norms_and_head:
                overhead_p += 4 * geom.dim
            kq = kept(f"{base}.attn", geom.head_dim)
            p, f = _attn_site_cost(n, geom.dim, geom.heads, config.window, kq, conv)
            report.sites.append(SiteCost(f"{base}.attn", p, f))
            km = kept(f"{base}.mlp", geom.hidden)
            p = 2 * geom.dim * km + ((km + geom.dim) if conv.include_bias else 0)
            f = conv.mac_factor * 2 * n * geom.dim * km
            report.sites.append(SiteCost(f"{base}.mlp", p, f))
        if geom.index < config.num_stages - 1:
            overhead_p += 8 * geom.dim * geom.dim
            if conv.include_bias:
                overhead_p += 8 * geom.dim
            overhead_f += conv.mac_factor * 2 * n * geom.dim * geom.dim

    last = config.stage_dim(config.num_stages - 1)
    if conv.include_norms_and_head:
        overhead_p += 2 * last
        head = last * config.num_classes + (config.num_classes if conv.include_bias else 0)
        overhead_p += head
        overhead_f += conv.mac_factor * last * config.num_classes
        report.head_params = head
    report.overhead_params = overhead_p
    report.overhead_flops = overhead_f
    return report


def measured_cost(model: Backbone, mac_factor: int = 1) -> CostReport:
    """Count parameters by enumerating tensors and FLOPs by instrumenting
    matmuls in one forward pass, split per site."""
    cfg = model.config
    report = CostReport(config=cfg, rho=float("nan"),
                        convention=runtime_convention(cfg, mac_factor))

    site_params = {}
    overhead_p = 0
    for name, t in model.named_parameters():
        parts = name.split(".")
        if len(parts) >= 3 and parts[0].startswith("stage") \
                and parts[1].startswith("block") and parts[2] in ("attn", "mlp"):
            key = ".".join(parts[:3])
            site_params[key] = site_params.get(key, 0) + t.size
        else:
            overhead_p += t.size
            if name == "head":
                report.head_params = t.size

    site_flops = {}
    overhead_macs = 0
    img = np.zeros((cfg.in_channels, cfg.image_size, cfg.image_size), dtype=np.float32)
    with count_macs() as embed_macs:
        x = patch_embed(img, cfg.patch_size, model.patch_embed)
    overhead_macs += embed_macs.macs
    grid = cfg.image_size // cfg.patch_size
    for s, stage in enumerate(model.stages):
        for b, blk in enumerate(stage.blocks):
            spec = WindowSpec(grid, grid, cfg.window, blk.shift)
            normed = T.layer_norm(x, blk.norm1_gain, blk.norm1_bias)
            with count_macs() as mc:
                attn_out = wmsa_forward(normed, blk.attn, spec)
            site_flops[f"stage{s}.block{b}.attn"] = mac_factor * mc.macs
            x = T.add(x, attn_out)
            normed = T.layer_norm(x, blk.norm2_gain, blk.norm2_bias)
            with count_macs() as mc:
                mlp_out = mlp_forward(normed, blk.mlp)
            site_flops[f"stage{s}.block{b}.mlp"] = mac_factor * mc.macs
            x = T.add(x, mlp_out)
        if stage.merge is not None:
            with count_macs() as mc:
                x = patch_merge(x, grid, grid, stage.merge)
            overhead_macs += mc.macs
            grid //= 2
    x = T.layer_norm(x, model.final_gain, model.final_bias)
    with count_macs() as mc:
        T.matmul(T.mean_rows(x), model.head)
    overhead_macs += mc.macs

    for key in site_params:
        report.sites.append(SiteCost(key, site_params[key], site_flops[key]))
    report.overhead_params = overhead_p
    report.overhead_flops = mac_factor * overhead_macs
    return report


def swin_t_config(num_classes: int = 100, image_size: int = 224) -> BackboneConfig:
    """The published Swin-T shape: d=96, depths 2/2/6/2, heads 3/6/12/24, M=7."""
    return BackboneConfig(
        image_size=image_size, patch_size=4, in_channels=3, base_dim=96,
        depths=(2, 2, 6, 2), heads=(3, 6, 12, 24), window=7, mlp_ratio=4.0,
        num_classes=num_classes)


def calibrate_mac_factor(config: BackboneConfig | None = None,
                         target_flops: float = 4.49e9,
                         rel_tol: float = 0.05) -> int:
    """Pick the MAC-to-FLOP factor whose full-model count hits the target."""
    config = config or swin_t_config()
    for mac in (1, 2):
        conv = replace(REFERENCE_CONVENTION, mac_factor=mac)
        flops = model_cost(config, 1.0, conv).total_flops
        if abs(flops - target_flops) <= rel_tol * target_flops:
            return mac
    raise ConfigError(
        f"neither mac factor lands within {rel_tol:.0%} of {target_flops:.3g} flops")
