"""The reconstruction network: 2D feature extractors, a 3D U-Net over the guided
feature volume, and point-queryable TSDF / per-voxel occupancy heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import backprojection as bp
from .autodiff import tensor as T
from .autodiff.layers import Layer, LayerSpec, forward, init_layer
from .autodiff.tensor import Tensor
from .backprojection import FeatureMap2D, FeatureVolume, GuidanceStrategy
from .geometry import GridSpec, trilinear_weights

COARSE_STRIDE = 4
FINE_STRIDE = 2


@dataclass(frozen=True)
class ModelConfig:
    image_channels: int = 3
    c_coarse: int = 16
    c_fine: int = 16
    c_psi: int = 32
    hidden_s: int = 64
    hidden_o: int = 32
    strategy: GuidanceStrategy = field(default_factory=lambda: GuidanceStrategy("tsdf"))

    @property
    def volume_channels(self) -> int:
        return self.strategy.output_channels(self.c_coarse)


def _feature_net_specs(cfg: ModelConfig, out_channels: int) -> dict:
    """Shared 2D architecture: a strided trunk with 1x1 heads at stride 2 and 4."""
    w = out_channels
    return {
        "c1": LayerSpec("conv2d", cfg.image_channels, w, 3, 2, 1),
        "c2": LayerSpec("conv2d", w, w, 3, 1, 1),
        "c3": LayerSpec("conv2d", w, w, 3, 2, 1),
        "head2": LayerSpec("conv2d", w, w, 1, 1, 0),
        "head4": LayerSpec("conv2d", w, w, 1, 1, 0),
    }


def _psi_specs(cfg: ModelConfig) -> dict:
    cin, c = cfg.volume_channels, cfg.c_psi
    return {
        "enc0": LayerSpec("conv3d", cin, 16, 3, 1, 1),
        "enc1": LayerSpec("conv3d", 16, c, 3, 2, 1),
        "enc2": LayerSpec("conv3d", c, c, 3, 2, 1),
        "dec1": LayerSpec("conv3d", 2 * c, c, 3, 1, 1),
        "dec0": LayerSpec("conv3d", c + 16, c, 3, 1, 1),
    }


def _mlp_specs(widths) -> dict:
    return {f"fc{i}": LayerSpec("linear", a, b) for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))}


def architecture(cfg: ModelConfig) -> dict:
    """Layer specs per sub-network; omega_c and omega_f are identical by construction."""
    return {
        "omega_c": _feature_net_specs(cfg, cfg.c_coarse),
        "omega_f": _feature_net_specs(cfg, cfg.c_fine),
        "psi": _psi_specs(cfg),
        "theta_s": _mlp_specs([cfg.c_fine + cfg.c_psi, cfg.hidden_s, cfg.hidden_s, 1]),
        "theta_o": _mlp_specs([cfg.c_psi, cfg.hidden_o, 1]),
    }


@dataclass
class ModelParams:
    config: ModelConfig
    nets: dict  # net name -> {layer name -> Layer}

    def named(self) -> dict:
        """Flat ``"net.layer.param" -> Tensor`` view (shared storage)."""
        out = {}
        for net, layers in self.nets.items():
            for lname, layer in layers.items():
                for pname, t in layer.params.items():
                    out[f"{net}.{lname}.{pname}"] = t
        return out

    def parameters(self) -> list:
        return list(self.named().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def layer_manifest(self) -> dict:
        return {net: {ln: l.spec.to_dict() for ln, l in layers.items()} for net, layers in self.nets.items()}

    def load_arrays(self, arrays: dict) -> None:
        named = self.named()
        missing = set(named) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint is missing parameters: {sorted(missing)}")
        for name, t in named.items():
            a = np.asarray(arrays[name], dtype=float)
            if a.shape != t.shape:
                raise ValueError(f"parameter {name}: checkpoint shape {a.shape} != model shape {t.shape}")
            t.data = a.copy()


def init_model(cfg: ModelConfig | None = None, seed: int = 0) -> ModelParams:
    cfg = cfg or ModelConfig()
    rng = np.random.default_rng(seed)
    nets = {}
    for net, specs in architecture(cfg).items():
        nets[net] = {name: init_layer(spec, rng, f"{net}.{name}") for name, spec in specs.items()}
    return ModelParams(cfg, nets)


def receptive_radius(stride_level: int) -> int:
    """Half-width in input pixels of the region that can influence one output cell
    of the stride-``stride_level`` head (derived from the trunk layer specs)."""
    specs = _feature_net_specs(ModelConfig(), 16)
    chain = ["c1", "c2"] + (["c3"] if stride_level == 4 else []) + [f"head{stride_level}"]
    radius, jump = 0, 1
    for name in chain:
        s = specs[name]
        radius += (s.kernel_size - 1) // 2 * jump
        jump *= s.stride
    return radius


# ---------------------------------------------------------------- differentiable pieces


def _relu_conv(layer: Layer, x: Tensor) -> Tensor:
    return T.relu(forward(layer, x))


def feature_net(layers: dict, images: Tensor, level: int) -> Tensor:
    """(V, 3, H, W) images to (V, C, H/level, W/level) features."""
    x = _relu_conv(layers["c1"], images)
    x = _relu_conv(layers["c2"], x)
    if level == 2:
        return forward(layers["head2"], x)
    x = _relu_conv(layers["c3"], x)
    return forward(layers["head4"], x)


def _as_tensor_images(images) -> Tensor:
    if isinstance(images, Tensor):
        return images
    return Tensor(np.stack([np.asarray(im, dtype=float) for im in images]))


def _check_images(images: Tensor):
    h, w = images.shape[2:]
    if h % COARSE_STRIDE or w % COARSE_STRIDE:
        raise ValueError(f"image size {w}x{h} must be divisible by {COARSE_STRIDE}")


def psi_forward(layers: dict, x: Tensor) -> Tensor:
    """2-level 3D U-Net; (1, Cin, X, Y, Z) -> (1, C_psi, X, Y, Z).

    Spatial dims that are not multiples of 4 are zero-padded and cropped back.
    """
    dims = x.shape[2:]
    padded = tuple(-(-n // 4) * 4 for n in dims)
    if padded != dims:
        x = T.pad(x, [(0, 0), (0, 0)] + [(0, p - n) for n, p in zip(dims, padded)])
    e0 = _relu_conv(layers["enc0"], x)
    e1 = _relu_conv(layers["enc1"], e0)
    e2 = _relu_conv(layers["enc2"], e1)
    d1 = _relu_conv(layers["dec1"], T.concat([T.upsample_nearest(e2, 2), e1], axis=1))
    out = forward(layers["dec0"], T.concat([T.upsample_nearest(d1, 2), e0], axis=1))
    if padded != dims:
        out = T.crop(out, (slice(None), slice(None)) + tuple(slice(0, n) for n in dims))
    return out


def mlp(layers: dict, x: Tensor) -> Tensor:
    names = sorted(layers, key=lambda n: int(n[2:]))
    for i, name in enumerate(names):
        x = forward(layers[name], x)
        if i < len(names) - 1:
            x = T.relu(x)
    return x


def to_grid_tensor(flat: Tensor, dims) -> Tensor:
    """(N, C) per-voxel rows in C order to a (1, C, X, Y, Z) volume."""
    c = flat.shape[1]
    return T.reshape(T.transpose(flat, (1, 0)), (1, c) + tuple(dims))


def from_grid_tensor(vol: Tensor) -> Tensor:
    c = vol.shape[1]
    return T.transpose(T.reshape(vol, (c, -1)), (1, 0))


def stacked(features: Tensor) -> Tensor:
    """(V, C, H, W) -> (V*H*W, C), the layout the sampling operators expect."""
    v, c, h, w = features.shape
    return T.reshape(T.transpose(features, (0, 2, 3, 1)), (v * h * w, c))


def trilinear_operator(spec: GridSpec, points):
    idx, w, oob = trilinear_weights(spec, points)
    n = len(idx)
    A = sp.csr_matrix((w.ravel(), (np.repeat(np.arange(n), 8), idx.ravel())), shape=(n, spec.num_voxels))
    A.sum_duplicates()
    return A, oob


def guided_volume(params: ModelParams, images: Tensor, op: bp.DenseOperator) -> Tensor:
    """V^g as a (N_voxels, C_in) tensor."""
    parts = []
    if op.matrix is not None:
        fc = feature_net(params.nets["omega_c"], images, COARSE_STRIDE)
        parts.append(T.sparse_matmul(op.matrix, stacked(fc)))
    if op.extra is not None:
        parts.append(Tensor(op.extra))
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=1)


def encode(params: ModelParams, vg_flat: Tensor, dims):
    """Returns (V^Psi as (N_voxels, C_psi), occupancy logits (N_voxels, 1))."""
    if vg_flat.shape[1] != params.config.volume_channels:
        raise ValueError(
            f"guided volume has {vg_flat.shape[1]} channels, model expects {params.config.volume_channels}"
        )
    vpsi = from_grid_tensor(psi_forward(params.nets["psi"], to_grid_tensor(vg_flat, dims)))
    logits = mlp(params.nets["theta_o"], vpsi)
    return vpsi, logits


def tsdf_head(params: ModelParams, vpsi_flat: Tensor, tri_op, w_feat: Tensor | None) -> Tensor:
    """Ŝ at points from trilinearly sampled V^Psi and (optionally) point features."""
    v = T.sparse_matmul(tri_op, vpsi_flat)
    if w_feat is None:
        w_feat = Tensor(np.zeros((v.shape[0], params.config.c_fine)))
    return mlp(params.nets["theta_s"], T.concat([w_feat, v], axis=1))


def point_features(params: ModelParams, fine_stacked: Tensor, point_op) -> Tensor:
    return T.sparse_matmul(point_op, fine_stacked)


# ---------------------------------------------------------------- numpy-level API


def extract_features(images, params: ModelParams):
    """Coarse (stride 4) and fine (stride 2) feature maps for every image."""
    x = _as_tensor_images(images)
    _check_images(x)
    with T.no_grad():
        fc = feature_net(params.nets["omega_c"], x, COARSE_STRIDE).data
        ff = feature_net(params.nets["omega_f"], x, FINE_STRIDE).data
    return ([FeatureMap2D(f, COARSE_STRIDE) for f in fc], [FeatureMap2D(f, FINE_STRIDE) for f in ff])


def encode_volume(vg: FeatureVolume, params: ModelParams):
    """Run the 3D network on a guided feature volume.

    Returns ``(V^Psi, occupancy_logits)`` with V^Psi a FeatureVolume of C_psi
    channels on the same grid and logits shaped like the grid.
    """
    dims = vg.spec.dims
    with T.no_grad():
        vpsi, logits = encode(params, Tensor(vg.data.reshape(-1, vg.channels)), dims)
    return (
        FeatureVolume(vg.spec, vpsi.data.reshape(dims + (-1,)), vg.validity),
        logits.data.reshape(dims),
    )


def predict_tsdf(points, vpsi: FeatureVolume, fine_features, cameras, params: ModelParams,
                 enable_pb: bool = True):
    """Ŝ at arbitrary points; with PB disabled the point-feature slot is zero-filled."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    tri, _ = trilinear_operator(vpsi.spec, points)
    with T.no_grad():
        w = None
        if enable_pb:
            ff = list(fine_features)
            op, _ = bp.point_operator(points, cameras, (ff[0].height, ff[0].width), ff[0].stride)
            w = Tensor(np.asarray(op @ bp.stack_features(ff)))
        out = tsdf_head(params, Tensor(vpsi.data.reshape(-1, vpsi.channels)), tri, w)
    return out.data[:, 0]


def tsdf_transform(x):
    """``sign(x) * ln(|x| + 1)``."""
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.log1p(np.abs(x))


def loss_terms(s_hat: Tensor, s_true, logits: Tensor, occupancy):
    """Differentiable (L, L_S, L_O)."""
    target = Tensor(tsdf_transform(np.asarray(s_true, dtype=float).reshape(s_hat.shape)))
    l_s = T.mean(T.absolute(T.signed_log(s_hat) - target))
    occ = np.asarray(occupancy, dtype=float).reshape(logits.shape)
    l_o = T.mean(T.bce_with_logits(logits, occ))
    return l_s + l_o, l_s, l_o


def compute_loss(s_hat, s_true, occupancy_logits, occupancy):
    """Numpy convenience wrapper: returns floats (L, L_S, L_O)."""
    s_hat = np.asarray(s_hat, dtype=float).reshape(-1, 1)
    s_true = np.asarray(s_true, dtype=float)
    if s_hat.shape[0] != s_true.size:
        raise ValueError(f"{s_hat.shape[0]} predictions for {s_true.size} targets")
    logits = np.asarray(occupancy_logits, dtype=float).reshape(-1, 1)
    occ = np.asarray(getattr(occupancy, "flags", occupancy), dtype=float).reshape(-1, 1)
    if logits.shape != occ.shape:
        raise ValueError("occupancy logits and targets differ in size")
    total, l_s, l_o = loss_terms(Tensor(s_hat), s_true, Tensor(logits), occ)
    return float(total.data), float(l_s.data), float(l_o.data)
