"""Representation-typed convolutional networks with architectural equivariance.

Layers carry an input and output `Representation` over C_n.  Weight tying is
rotate-and-tie: each layer stores free base kernels and assembles, per group
element, a spatially rotated and channel-permuted copy.  Quarter-turn
rotations of kernels are exact index permutations; the in-between elements of
C_8 rotate kernels through a Gaussian-RBF interpolant, so their equivariance
is interpolation-limited while the C_4 subgroup is exact to float precision.

The same module also provides parameter-matched conventional baselines, the
equivariance certification used by the test suite and CLI, squashed-Gaussian
action sampling, and the checkpoint archive format.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from equirl.env import ActionBounds
from equirl.groups import (
    REGULAR,
    STANDARD,
    TRIVIAL,
    CyclicGroup,
    Representation,
    rotate_image,
    rotate_image_quarter,
    rotation_matrix_2d,
)

LOG_SIGMA_MIN = -20.0
LOG_SIGMA_MAX = 2.0

# channel layout of actor outputs, before reordering into action order
ACTOR_MEAN_CHANNELS = ("x", "y", "grip", "z", "theta")
_MEAN_TO_ACTION = (2, 0, 1, 3, 4)  # (grip, x, y, z, theta) <- channel index


def _torch_dtype(name: str) -> torch.dtype:
    return {"float32": torch.float32, "float64": torch.float64}[name]


# --- steerable kernel basis ------------------------------------------------


def _kernel_grid(k: int) -> np.ndarray:
    """(k*k, 2) world coordinates (x right, y up) of kernel taps."""
    c = (k - 1) / 2.0
    pts = []
    for row in range(k):
        for col in range(k):
            pts.append((col - c, c - row))
    return np.array(pts)


_QUARTER_COS_SIN = ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))


def _harmonic_limit(ring_points: int) -> int:
    # frequencies above points/2 - 1 alias on the sampled ring
    return max(0, ring_points // 2 - 1)


def steerable_kernel_basis(k: int) -> tuple[np.ndarray, list]:
    """Sampled ring-harmonic kernel basis for a k x k grid.

    Returns (B, harmonics): B is (D, k*k) with basis function d sampled at
    every tap, harmonics[d] is the angular frequency paired as (cos, sin)
    rows for m > 0.  Angular parts are computed algebraically from the tap
    coordinates so symmetric taps get bitwise-identical values.
    """
    pts = _kernel_grid(k)
    radii = np.hypot(pts[:, 0], pts[:, 1])
    rings = sorted(set(np.round(radii, 9)))
    width = 0.6
    rows = []
    harmonics = []
    for ring in rings:
        on_ring = int(np.sum(np.round(radii, 9) == ring))
        m_max = 0 if ring == 0 else _harmonic_limit(on_ring)
        radial = np.exp(-((radii - ring) ** 2) / (2.0 * width**2))
        unit = np.zeros_like(pts)
        nz = radii > 0
        unit[nz] = pts[nz] / radii[nz, None]
        for m in range(m_max + 1):
            # cos/sin of m*phi via complex powers: exact on symmetric taps
            z = (unit[:, 0] + 1j * unit[:, 1]) ** m
            cos_m = np.where(nz, z.real, 1.0 if m == 0 else 0.0)
            sin_m = np.where(nz, z.imag, 0.0)
            rows.append(radial * cos_m)
            harmonics.append(m)
            if m > 0:
                rows.append(radial * sin_m)
                harmonics.append(m)
    basis = np.stack(rows)
    # shared per-pair scale keeps the (cos, sin) rotation structure intact
    d = 0
    while d < len(rows):
        if harmonics[d] == 0 or (d + 1 < len(rows) and harmonics[d + 1] != harmonics[d]):
            basis[d] /= np.linalg.norm(basis[d])
            d += 1
        else:
            scale = max(np.linalg.norm(basis[d]), np.linalg.norm(basis[d + 1]))
            basis[d] /= scale
            basis[d + 1] /= scale
            d += 2
    return basis, harmonics


def _coefficient_rotation(harmonics: list, group: CyclicGroup, g: int) -> np.ndarray:
    """Exact rotation of basis coefficients: harmonics pick up phase m*angle."""
    d_total = len(harmonics)
    out = np.zeros((d_total, d_total))
    q = group.quarter_turns(g)
    i = 0
    while i < d_total:
        m = harmonics[i]
        if m == 0:
            out[i, i] = 1.0
            i += 1
            continue
        if q is not None:
            c, s = _QUARTER_COS_SIN[(m * q) % 4]
        else:
            c, s = math.cos(m * group.angle(g)), math.sin(m * group.angle(g))
        out[i, i], out[i, i + 1] = c, s
        out[i + 1, i], out[i + 1, i + 1] = -s, c
        i += 2
    return out


def steerable_sample_ops(group: CyclicGroup, k: int) -> np.ndarray:
    """(n, k*k, D) maps from basis coefficients to rotated sampled kernels.

    ops[g] @ c samples the analytic kernel sum(c_d * b_d), rotated by g, at
    the grid taps; quarter-turn coefficient rotations are exact sign tables.
    """
    basis, harmonics = steerable_kernel_basis(k)
    ops = []
    for g in group.elements():
        c_rot = _coefficient_rotation(harmonics, group, g)
        ops.append(basis.T @ c_rot.T)
    return np.stack(ops)


# --- steerable convolution ------------------------------------------------


class NetError(ValueError):
    """Shape or representation mismatches in network construction."""


def _check_blocks(rep: Representation, allowed: set, where: str):
    for kind, _ in rep.blocks:
        if kind not in allowed:
            raise NetError(f"{where} does not support {kind!r} blocks")


class SteerableConv(nn.Module):
    """Group-equivariant 2-D convolution between representation-typed fields.

    Supported block pairs: trivial/standard/regular input to regular output,
    and regular input to trivial/standard/regular output.  Bias is tied per
    field on trivial and regular outputs and absent on standard outputs.
    """

    def __init__(
        self,
        in_rep: Representation,
        out_rep: Representation,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
        dtype: torch.dtype = torch.float64,
    ):
        super().__init__()
        if in_rep.order != out_rep.order:
            raise NetError("input and output representations live over different groups")
        _check_blocks(in_rep, {TRIVIAL, STANDARD, REGULAR}, "SteerableConv input")
        _check_blocks(out_rep, {TRIVIAL, STANDARD, REGULAR}, "SteerableConv output")
        self.in_rep = in_rep
        self.out_rep = out_rep
        self.group = CyclicGroup(in_rep.order)
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding

        n = self.group.order
        ops = steerable_sample_ops(self.group, kernel_size)
        self.basis_dim = ops.shape[2]
        self.register_buffer("rot_ops", torch.tensor(ops, dtype=dtype))
        rho1 = np.stack([rotation_matrix_2d(g, n) for g in self.group.elements()])
        self.register_buffer("rho1", torch.tensor(rho1, dtype=dtype))
        delta = (np.arange(n)[None, :] - np.arange(n)[:, None]) % n  # delta[g_o, g_i]
        self.register_buffer("delta", torch.tensor(delta, dtype=torch.long))

        self.weights = nn.ParameterList()
        self._pairs = []
        for out_kind, out_mult in out_rep.blocks:
            for in_kind, in_mult in in_rep.blocks:
                shape = self._base_shape(out_kind, in_kind, out_mult, in_mult, self.basis_dim)
                fan_in = in_rep.dim * self.basis_dim
                w = torch.randn(*shape, dtype=dtype) * math.sqrt(2.0 / fan_in)
                self.weights.append(nn.Parameter(w))
                self._pairs.append((out_kind, in_kind, out_mult, in_mult))

        self.bias_params = nn.ParameterList()
        self._bias_blocks = []
        if bias:
            for kind, mult in out_rep.blocks:
                if kind in (TRIVIAL, REGULAR):
                    self.bias_params.append(nn.Parameter(torch.zeros(mult, dtype=dtype)))
                else:
                    self.bias_params.append(nn.Parameter(torch.zeros(0, dtype=dtype)))
                self._bias_blocks.append((kind, mult))

    def _base_shape(self, out_kind, in_kind, m_o, m_i, d):
        n = self.group.order
        if out_kind == REGULAR:
            if in_kind == TRIVIAL:
                return (m_o, m_i, d)
            if in_kind == STANDARD:
                return (m_o, m_i, 2, d)
            return (m_o, m_i, n, d)
        if in_kind != REGULAR:
            raise NetError(f"unsupported steerable pair {in_kind} -> {out_kind}")
        if out_kind == TRIVIAL:
            return (m_o, m_i, d)
        if out_kind == STANDARD:
            return (m_o, 2, m_i, d)
        raise NetError(f"unsupported steerable pair {in_kind} -> {out_kind}")

    def _pair_kernel(self, w, out_kind, in_kind, m_o, m_i):
        """Assemble one (out_block_dim, in_block_dim, k, k) tied kernel."""
        n = self.group.order
        k = self.kernel_size
        rot = self.rot_ops
        if out_kind == REGULAR:
            if in_kind == TRIVIAL:
                kern = torch.einsum("gxy,oiy->ogix", rot, w)
                return kern.reshape(m_o * n, m_i, k, k)
            if in_kind == STANDARD:
                rho_inv = self.rho1.transpose(1, 2)  # rho1(g)^-1 = rho1(g)^T
                kern = torch.einsum("gxy,oicy,gcd->ogidx", rot, w, rho_inv)
                return kern.reshape(m_o * n, m_i * 2, k, k)
            gathered = w[:, :, self.delta]  # (m_o, m_i, g_o, g_i, k2)
            kern = torch.einsum("gxy,oigjy->ogijx", rot, gathered)
            return kern.reshape(m_o * n, m_i * n, k, k)
        if out_kind == TRIVIAL:
            kern = torch.einsum("gxy,oiy->oigx", rot, w)
            return kern.reshape(m_o, m_i * n, k, k)
        # regular -> standard
        kern = torch.einsum("gxy,ociy,gdc->odigx", rot, w, self.rho1)
        return kern.reshape(m_o * 2, m_i * n, k, k)

    def effective_kernel(self) -> torch.Tensor:
        """Full tied kernel (out_dim, in_dim, k, k), rebuilt from base weights."""
        rows = []
        idx = 0
        for out_kind, out_mult in self.out_rep.blocks:
            cols = []
            for in_kind, in_mult in self.in_rep.blocks:
                cols.append(
                    self._pair_kernel(self.weights[idx], out_kind, in_kind, out_mult, in_mult)
                )
                idx += 1
            rows.append(torch.cat(cols, dim=1))
        return torch.cat(rows, dim=0)

    def effective_bias(self):
        if not len(self.bias_params):
            return None
        n = self.group.order
        parts = []
        for p, (kind, mult) in zip(self.bias_params, self._bias_blocks):
            if kind == TRIVIAL:
                parts.append(p)
            elif kind == REGULAR:
                parts.append(p.repeat_interleave(n))
            else:
                parts.append(torch.zeros(2 * mult, dtype=p.dtype, device=p.device))
        return torch.cat(parts)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_rep.dim:
            raise NetError(f"expected {self.in_rep.dim} channels, got {x.shape[1]}")
        return nn.functional.conv2d(
            x,
            self.effective_kernel(),
            bias=self.effective_bias(),
            stride=self.stride,
            padding=self.padding,
        )


class GroupPool(nn.Module):
    """Max over the n group channels of each regular field; output is trivial."""

    def __init__(self, rep: Representation):
        super().__init__()
        _check_blocks(rep, {REGULAR}, "GroupPool")
        self.rep = rep
        self.n = rep.order
        self.fields = sum(m for _, m in rep.blocks)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        shape = x.shape
        grouped = x.reshape(shape[0], self.fields, self.n, *shape[2:])
        return grouped.max(dim=2).values


def group_pool(x: np.ndarray, n: int) -> np.ndarray:
    """Array version of GroupPool for (fields*n, ...) inputs."""
    if x.shape[0] % n:
        raise NetError(f"channel count {x.shape[0]} is not a multiple of {n}")
    return x.reshape(x.shape[0] // n, n, *x.shape[1:]).max(axis=1)


# --- architecture specs and builders ------------------------------------------


@dataclass(frozen=True)
class AgentSpec:
    """Architecture description; serialized verbatim into checkpoints."""

    algorithm: str = "iql"  # "cql" | "iql"
    group_order: int = 8
    resolution: int = 65
    in_channels: int = 2
    actor_equivariant: bool = True
    critic_invariant: bool = True
    base_fields: int = 4
    encoder_fields: int = 8
    fusion_fields: int = 8
    kernel_size: int = 3
    dtype: str = "float64"

    def torch_dtype(self) -> torch.dtype:
        return _torch_dtype(self.dtype)


def reduction_schedule(resolution: int) -> list:
    """(stride, padding, out_size) steps taking an odd resolution to 1x1.

    Stride-2 steps are only taken where they keep sizes odd, which keeps the
    pixel lattice symmetric under quarter turns at every depth.
    """
    if resolution % 2 == 0 or resolution < 3:
        raise NetError("resolution must be odd and >= 3")
    ops = []
    size = resolution
    while size > 1:
        if size >= 9 and size % 4 == 1:
            size = (size - 1) // 2 + 1
            ops.append((2, 1, size))
        else:
            size = size - 2
            ops.append((1, 0, size))
    return ops


def conv_schedule(resolution: int, n_layers: int) -> list:
    """Pad the reduction schedule with cheap stride-1 layers at the 3x3 stage."""
    ops = reduction_schedule(resolution)
    fillers = n_layers - len(ops)
    if fillers < 0:
        raise NetError(
            f"resolution {resolution} needs {len(ops)} layers, more than {n_layers}"
        )
    return ops[:-1] + [(1, 1, 3)] * fillers + ops[-1:]


def _trunk_widths(n_layers: int, base: int, out_fields: int) -> list:
    widths = []
    for i in range(n_layers - 1):
        widths.append(base if i < 2 else 2 * base)
    widths.append(out_fields)
    return widths


class EquivariantEncoder(nn.Module):
    """Stack of steerable convs taking the state image to 1x1 regular fields."""

    def __init__(self, spec: AgentSpec, n_layers: int, out_fields: int):
        super().__init__()
        n = spec.group_order
        dtype = spec.torch_dtype()
        schedule = conv_schedule(spec.resolution, n_layers)
        widths = _trunk_widths(n_layers, spec.base_fields, out_fields)
        layers = []
        in_rep = Representation.trivial(n, spec.in_channels)
        for (stride, padding, _), fields in zip(schedule, widths):
            out_rep = Representation.regular(n, fields)
            layers.append(
                SteerableConv(
                    in_rep, out_rep, spec.kernel_size, stride, padding, dtype=dtype
                )
            )
            in_rep = out_rep
        self.layers = nn.ModuleList(layers)
        self.out_rep = in_rep

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x  # (B, out_fields*n, 1, 1)


class EquivariantActor(nn.Module):
    """Equivariant policy network: rho1 xy mean + invariant means (+ sigmas)."""

    def __init__(self, spec: AgentSpec):
        super().__init__()
        self.spec = spec
        self.outputs_sigma = spec.algorithm == "cql"
        self.trunk = EquivariantEncoder(spec, n_layers=7, out_fields=2 * spec.base_fields)
        n_trivial = 3 + (5 if self.outputs_sigma else 0)
        out_rep = Representation(
            spec.group_order, ((STANDARD, 1), (TRIVIAL, n_trivial))
        )
        self.head = SteerableConv(
            self.trunk.out_rep, out_rep, kernel_size=1, dtype=spec.torch_dtype()
        )

    def forward(self, obs: torch.Tensor):
        z = torch.relu(self.trunk(obs))
        out = self.head(z)[:, :, 0, 0]
        mean = out[:, list(_MEAN_TO_ACTION)]
        log_sigma = out[:, 5:10] if self.outputs_sigma else None
        return mean, log_sigma


class ConvEncoder(nn.Module):
    """Plain convolutional twin of EquivariantEncoder (same schedule)."""

    def __init__(self, spec: AgentSpec, n_layers: int, out_channels: int, width_scale: float):
        super().__init__()
        schedule = conv_schedule(spec.resolution, n_layers)
        n = spec.group_order
        widths = [
            max(4, round(f * n * width_scale))
            for f in _trunk_widths(n_layers, spec.base_fields, 1)[:-1]
        ] + [out_channels]
        layers = []
        in_ch = spec.in_channels
        for (stride, padding, _), ch in zip(schedule, widths):
            layers.append(
                nn.Conv2d(in_ch, ch, spec.kernel_size, stride, padding).to(
                    spec.torch_dtype()
                )
            )
            in_ch = ch
        self.layers = nn.ModuleList(layers)
        self.out_channels = in_ch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x


class ConvActor(nn.Module):
    """Conventional actor with the same stride schedule and output layout."""

    def __init__(self, spec: AgentSpec, width_scale: float):
        super().__init__()
        self.spec = spec
        self.outputs_sigma = spec.algorithm == "cql"
        trunk_out = max(4, round(2 * spec.base_fields * spec.group_order * width_scale))
        self.trunk = ConvEncoder(spec, 7, trunk_out, width_scale)
        out_dim = 5 + (5 if self.outputs_sigma else 0)
        self.head = nn.Conv2d(trunk_out, out_dim, 1).to(spec.torch_dtype())

    def forward(self, obs: torch.Tensor):
        z = torch.relu(self.trunk(obs))
        out = self.head(z)[:, :, 0, 0]
        mean = out[:, list(_MEAN_TO_ACTION)]
        log_sigma = out[:, 5:10] if self.outputs_sigma else None
        return mean, log_sigma


def action_to_field_channels(actions: torch.Tensor) -> torch.Tensor:
    """(B, 5) action vectors -> (B, 5) channels ordered (x, y, grip, z, theta).

    The reordering puts the rho1 pair first so the fused 1x1 field has block
    structure [standard, trivial x 3].
    """
    return actions[:, [1, 2, 0, 3, 4]]


class EquivariantCritic(nn.Module):
    """Invariant twin-head Q network: shared encoder, per-head fusion convs."""

    def __init__(self, spec: AgentSpec):
        super().__init__()
        self.spec = spec
        n = spec.group_order
        dtype = spec.torch_dtype()
        self.encoder = EquivariantEncoder(spec, n_layers=8, out_fields=spec.encoder_fields)
        fused_rep = Representation(
            n,
            ((REGULAR, spec.encoder_fields), (STANDARD, 1), (TRIVIAL, 3)),
        )
        fusion_rep = Representation.regular(n, spec.fusion_fields)
        self.fusions = nn.ModuleList(
            [
                SteerableConv(fused_rep, fusion_rep, kernel_size=1, dtype=dtype)
                for _ in range(2)
            ]
        )
        self.pool = GroupPool(fusion_rep)
        self.heads = nn.ModuleList(
            [nn.Linear(spec.fusion_fields, 1).to(dtype) for _ in range(2)]
        )

    def forward(self, obs: torch.Tensor, actions: torch.Tensor):
        z = torch.relu(self.encoder(obs))
        a = action_to_field_channels(actions)[:, :, None, None].to(z.dtype)
        fused_in = torch.cat([z, a], dim=1)
        qs = []
        for fusion, head in zip(self.fusions, self.heads):
            h = torch.relu(fusion(fused_in))
            qs.append(head(self.pool(h)[:, :, 0, 0])[:, 0])
        return qs[0], qs[1]


class ConvCritic(nn.Module):
    """Conventional twin-head critic matching the invariant critic's layout."""

    def __init__(self, spec: AgentSpec, width_scale: float):
        super().__init__()
        self.spec = spec
        enc_out = max(4, round(spec.encoder_fields * spec.group_order * width_scale))
        fus_out = max(4, round(spec.fusion_fields * spec.group_order * width_scale))
        self.encoder = ConvEncoder(spec, 8, enc_out, width_scale)
        self.fusions = nn.ModuleList(
            [nn.Conv2d(enc_out + 5, fus_out, 1).to(spec.torch_dtype()) for _ in range(2)]
        )
        self.heads = nn.ModuleList(
            [nn.Linear(fus_out, 1).to(spec.torch_dtype()) for _ in range(2)]
        )

    def forward(self, obs: torch.Tensor, actions: torch.Tensor):
        z = torch.relu(self.encoder(obs))
        a = action_to_field_channels(actions)[:, :, None, None].to(z.dtype)
        fused_in = torch.cat([z, a], dim=1)
        qs = []
        for fusion, head in zip(self.fusions, self.heads):
            h = torch.relu(fusion(fused_in))
            qs.append(head(h[:, :, 0, 0])[:, 0])
        return qs[0], qs[1]


class EquivariantValue(nn.Module):
    """Invariant state-value network (no group pooling, direct trivial map)."""

    def __init__(self, spec: AgentSpec):
        super().__init__()
        self.spec = spec
        self.encoder = EquivariantEncoder(spec, n_layers=8, out_fields=spec.encoder_fields)
        self.head = SteerableConv(
            self.encoder.out_rep,
            Representation.trivial(spec.group_order, 1),
            kernel_size=1,
            dtype=spec.torch_dtype(),
        )

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        z = torch.relu(self.encoder(obs))
        return self.head(z)[:, 0, 0, 0]


class ConvValue(nn.Module):
    def __init__(self, spec: AgentSpec, width_scale: float):
        super().__init__()
        self.spec = spec
        enc_out = max(4, round(spec.encoder_fields * spec.group_order * width_scale))
        self.encoder = ConvEncoder(spec, 8, enc_out, width_scale)
        self.head = nn.Conv2d(enc_out, 1, 1).to(spec.torch_dtype())

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        z = torch.relu(self.encoder(obs))
        return self.head(z)[:, 0, 0, 0]


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def matched_width_scale(spec: AgentSpec, build_equi, build_conv) -> float:
    """Width multiplier putting the conventional twin within 10% parameters."""
    target = count_parameters(build_equi(spec))
    lo, hi = 0.05, 4.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        got = count_parameters(build_conv(spec, mid))
        if got < target:
            lo = mid
        else:
            hi = mid
    mid = 0.5 * (lo + hi)
    got = count_parameters(build_conv(spec, mid))
    if not 0.9 <= got / target <= 1.1:
        raise NetError(
            f"could not match parameter counts: equivariant {target}, baseline {got}"
        )
    return mid


def build_actor(spec: AgentSpec) -> nn.Module:
    if spec.actor_equivariant:
        return EquivariantActor(spec)
    scale = matched_width_scale(
        replace(spec, actor_equivariant=True), EquivariantActor, ConvActor
    )
    return ConvActor(spec, scale)


def build_critic(spec: AgentSpec) -> nn.Module:
    if spec.critic_invariant:
        return EquivariantCritic(spec)
    scale = matched_width_scale(
        replace(spec, critic_invariant=True), EquivariantCritic, ConvCritic
    )
    return ConvCritic(spec, scale)


def build_value(spec: AgentSpec) -> nn.Module:
    if spec.critic_invariant:
        return EquivariantValue(spec)
    scale = matched_width_scale(
        replace(spec, critic_invariant=True), EquivariantValue, ConvValue
    )
    return ConvValue(spec, scale)


# --- squashed-Gaussian action machinery ----------------------------------------


def action_scaling(bounds: ActionBounds, dtype, device=None):
    center = torch.tensor(np.asarray(bounds.center), dtype=dtype, device=device)
    half = torch.tensor(np.asarray(bounds.half_width), dtype=dtype, device=device)
    return center, half


def squash(mean_space_u: torch.Tensor, bounds: ActionBounds) -> torch.Tensor:
    center, half = action_scaling(bounds, mean_space_u.dtype, mean_space_u.device)
    return center + half * torch.tanh(mean_space_u)


def _log_one_minus_tanh_sq(u: torch.Tensor) -> torch.Tensor:
    # log(1 - tanh(u)^2) = 2*(log 2 - u - softplus(-2u)), numerically stable
    return 2.0 * (math.log(2.0) - u - nn.functional.softplus(-2.0 * u))


def sample_action(
    mean: torch.Tensor,
    log_sigma: torch.Tensor,
    bounds: ActionBounds,
    generator: torch.Generator | None = None,
    deterministic: bool = False,
):
    """Reparameterized tanh-Gaussian sample scaled into the action box.

    Returns (action, log_prob); log_prob includes the tanh and affine-scaling
    corrections so exp(log_prob) is a density over the action box.
    """
    log_sigma = torch.clamp(log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    if deterministic:
        u = mean
    else:
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        u = mean + noise * torch.exp(log_sigma)
    action = squash(u, bounds)
    log_prob = _gaussian_tanh_log_prob(u, mean, log_sigma, bounds)
    return action, log_prob


def _gaussian_tanh_log_prob(u, mean, log_sigma, bounds):
    _, half = action_scaling(bounds, u.dtype, u.device)
    var_term = -0.5 * (((u - mean) / torch.exp(log_sigma)) ** 2)
    normal = var_term - log_sigma - 0.5 * math.log(2.0 * math.pi)
    correction = _log_one_minus_tanh_sq(u) + torch.log(half)
    return (normal - correction).sum(dim=-1)


def action_log_prob(
    mean: torch.Tensor,
    log_sigma: torch.Tensor,
    bounds: ActionBounds,
    actions: torch.Tensor,
) -> torch.Tensor:
    """log pi(a|s) of given box-space actions under the squashed Gaussian."""
    log_sigma = torch.clamp(log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    center, half = action_scaling(bounds, mean.dtype, mean.device)
    unit = torch.clamp((actions - center) / half, -1.0 + 1e-6, 1.0 - 1e-6)
    u = torch.atanh(unit)
    return _gaussian_tanh_log_prob(u, mean, log_sigma, bounds)


class Policy(nn.Module):
    """Actor network plus the sampling head shared by both algorithms.

    CQL actors emit state-conditioned log-sigmas; IQL actors emit only means
    and the log-sigma is a single unconditioned learnable vector.
    """

    def __init__(self, actor: nn.Module, spec: AgentSpec):
        super().__init__()
        self.actor = actor
        self.spec = spec
        self.bounds = ActionBounds()
        if spec.algorithm == "iql":
            self.global_log_sigma = nn.Parameter(
                torch.full((5,), -1.0, dtype=spec.torch_dtype())
            )

    def distribution(self, obs: torch.Tensor):
        mean, log_sigma = self.actor(obs)
        if log_sigma is None:
            log_sigma = self.global_log_sigma.expand_as(mean)
        return mean, torch.clamp(log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX)

    def sample(self, obs: torch.Tensor, generator=None, deterministic=False):
        mean, log_sigma = self.distribution(obs)
        return sample_action(mean, log_sigma, self.bounds, generator, deterministic)

    def log_prob(self, obs: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        mean, log_sigma = self.distribution(obs)
        return action_log_prob(mean, log_sigma, self.bounds, actions)

    def act(self, obs_np: np.ndarray) -> np.ndarray:
        """Deterministic single-observation action for environment rollouts."""
        with torch.no_grad():
            obs = torch.tensor(obs_np[None], dtype=self.spec.torch_dtype())
            action, _ = self.sample(obs, deterministic=True)
        return action[0].numpy()


# --- equivariance certification -------------------------------------------------


@dataclass
class CertificationReport:
    network: str
    n_samples: int
    residuals: dict  # group element -> max abs residual
    tying_exact_elements: tuple

    @property
    def max_exact(self) -> float:
        vals = [v for g, v in self.residuals.items() if g in self.tying_exact_elements]
        return max(vals) if vals else 0.0

    @property
    def max_interpolated(self) -> float:
        vals = [v for g, v in self.residuals.items() if g not in self.tying_exact_elements]
        return max(vals) if vals else 0.0

    def to_dict(self) -> dict:
        return {
            "network": self.network,
            "n_samples": self.n_samples,
            "residuals": {str(g): v for g, v in self.residuals.items()},
            "max_exact": self.max_exact,
            "max_interpolated": self.max_interpolated,
        }


def smooth_disc_probes(
    n_samples: int, channels: int, resolution: int, rng: np.random.Generator
) -> np.ndarray:
    """Random band-limited images supported on the inscribed disc.

    Rotations of the plane only act exactly on functions with circular
    support; these probes avoid conflating corner clipping with genuine
    equivariance error when measuring the interpolated 45-degree elements.
    """
    noise = rng.normal(size=(n_samples, channels, resolution, resolution))
    blur = max(2.0, resolution / 10.0)
    smooth = ndimage.gaussian_filter(noise, sigma=(0, 0, blur, blur))
    c = (resolution - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(resolution), np.arange(resolution), indexing="ij")
    radius = np.hypot(rr - c, cc - c)
    rolloff = np.clip((c - 1.0 - radius) / 2.0, 0.0, 1.0)
    smooth *= rolloff
    flat = np.abs(smooth.reshape(n_samples, -1)).max(axis=1)
    return smooth / flat[:, None, None, None]


def _rotate_probe_batch(probes: np.ndarray, group: CyclicGroup, g: int) -> np.ndarray:
    q = group.quarter_turns(g)
    if q is not None:
        return rotate_image_quarter(probes, q)
    return rotate_image(probes, group.angle(g))


def _rotate_actions(actions: np.ndarray, group: CyclicGroup, g: int) -> np.ndarray:
    out = actions.copy()
    rot = rotation_matrix_2d(g, group.order)
    out[:, 1:3] = actions[:, 1:3] @ rot.T
    return out


def _elements(group: CyclicGroup, subgroup: int | None):
    if subgroup is None:
        return list(group.elements())
    if group.order % subgroup:
        raise NetError(f"C_{subgroup} is not a subgroup of C_{group.order}")
    step = group.order // subgroup
    return [g * step for g in range(0, group.order, step)][:subgroup]


def certify_policy(
    policy: Policy,
    n_samples: int = 100,
    subgroup: int | None = None,
    seed: int = 0,
) -> CertificationReport:
    """Max residual of the actor equivariance relation over probe states."""
    spec = policy.spec
    group = CyclicGroup(spec.group_order)
    rng = np.random.default_rng(seed)
    probes = smooth_disc_probes(n_samples, spec.in_channels, spec.resolution, rng)
    dtype = spec.torch_dtype()
    residuals = {}
    with torch.no_grad():
        base_mean, base_sigma = policy.distribution(torch.tensor(probes, dtype=dtype))
        base_mean = base_mean.numpy()
        base_sigma = base_sigma.numpy()
        for g in _elements(group, subgroup):
            rotated = _rotate_probe_batch(probes, group, g)
            mean_g, sigma_g = policy.distribution(torch.tensor(rotated, dtype=dtype))
            expected = _rotate_actions(base_mean, group, g)
            err = np.abs(mean_g.numpy() - expected).max()
            err = max(err, np.abs(sigma_g.numpy() - base_sigma).max())
            residuals[g] = float(err)
    exact = tuple(g for g in group.elements() if group.quarter_turns(g) is not None)
    return CertificationReport("actor", n_samples, residuals, exact)


def certify_critic(
    critic: nn.Module,
    n_samples: int = 100,
    subgroup: int | None = None,
    seed: int = 0,
) -> CertificationReport:
    """Max residual of Q(g s, g a) - Q(s, a) over probe states and actions."""
    spec = critic.spec
    group = CyclicGroup(spec.group_order)
    rng = np.random.default_rng(seed)
    probes = smooth_disc_probes(n_samples, spec.in_channels, spec.resolution, rng)
    actions = np.stack([ActionBounds().sample(rng) for _ in range(n_samples)])
    dtype = spec.torch_dtype()
    residuals = {}
    with torch.no_grad():
        q1, q2 = critic(
            torch.tensor(probes, dtype=dtype), torch.tensor(actions, dtype=dtype)
        )
        base = torch.stack([q1, q2]).numpy()
        for g in _elements(group, subgroup):
            rs = _rotate_probe_batch(probes, group, g)
            ra = _rotate_actions(actions, group, g)
            q1g, q2g = critic(torch.tensor(rs, dtype=dtype), torch.tensor(ra, dtype=dtype))
            residuals[g] = float(np.abs(torch.stack([q1g, q2g]).numpy() - base).max())
    exact = tuple(g for g in group.elements() if group.quarter_turns(g) is not None)
    return CertificationReport("critic", n_samples, residuals, exact)


def certify_value(
    value: nn.Module,
    n_samples: int = 100,
    subgroup: int | None = None,
    seed: int = 0,
) -> CertificationReport:
    spec = value.spec
    group = CyclicGroup(spec.group_order)
    rng = np.random.default_rng(seed)
    probes = smooth_disc_probes(n_samples, spec.in_channels, spec.resolution, rng)
    dtype = spec.torch_dtype()
    residuals = {}
    with torch.no_grad():
        base = value(torch.tensor(probes, dtype=dtype)).numpy()
        for g in _elements(group, subgroup):
            rs = _rotate_probe_batch(probes, group, g)
            vg = value(torch.tensor(rs, dtype=dtype)).numpy()
            residuals[g] = float(np.abs(vg - base).max())
    exact = tuple(g for g in group.elements() if group.quarter_turns(g) is not None)
    return CertificationReport("value", n_samples, residuals, exact)


# --- checkpoint archive -----------------------------------------------------------


def save_checkpoint(path, spec: AgentSpec, networks: dict, extra: dict | None = None):
    """Zip archive: arch.json (spec + tensor shapes) + raw LE float32 weights."""
    tensors = {}
    for net_name, module in networks.items():
        for pname, p in module.state_dict().items():
            tensors[f"{net_name}/{pname}"] = p
    arch = {
        "spec": asdict(spec),
        "extra": extra or {},
        "tensors": {k: list(v.shape) for k, v in tensors.items()},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("arch.json", json.dumps(arch, indent=2, sort_keys=True))
        for name, tensor in tensors.items():
            blob = tensor.detach().cpu().numpy().astype("<f4").tobytes()
            zf.writestr(f"weights/{name}", blob)


def load_checkpoint(path):
    """Rebuild (spec, networks, extra) from a checkpoint archive."""
    with zipfile.ZipFile(path) as zf:
        arch = json.loads(zf.read("arch.json"))
        spec = AgentSpec(**arch["spec"])
        networks = build_agent_networks(spec)
        dtype = spec.torch_dtype()
        for net_name, module in networks.items():
            state = {}
            prefix = f"{net_name}/"
            for full_name, shape in arch["tensors"].items():
                if not full_name.startswith(prefix):
                    continue
                raw = zf.read(f"weights/{full_name}")
                arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
                state[full_name[len(prefix):]] = torch.tensor(arr, dtype=dtype)
            module.load_state_dict(state)
    return spec, networks, arch["extra"]


def build_agent_networks(spec: AgentSpec) -> dict:
    """All networks an algorithm trains, keyed by role."""
    networks = {
        "policy": Policy(build_actor(spec), spec),
        "critic": build_critic(spec),
        "target_critic": build_critic(spec),
    }
    if spec.algorithm == "iql":
        networks["value"] = build_value(spec)
    networks["target_critic"].load_state_dict(networks["critic"].state_dict())
    return networks
