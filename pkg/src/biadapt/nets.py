"""Detector H = G o F, student extractor F', and domain discriminator Q."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as Fn

from .freqmap import CB_SCALE, CR_SCALE, Y_WEIGHTS, dct_matrix

CHECKPOINT_FORMAT = 1
BACKBONES = ("dual_vit", "tiny_vit", "tiny_cnn")
LOG_EPS = 1e-2
# fixed input standardisation; without it every token carries a large common offset
PIXEL_MEAN, PIXEL_STD = 0.5, 0.25
LOG_MEAN, LOG_STD = -3.3, 0.9


class ShapeError(ValueError):
    pass


class StateCorruptionError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "dual_vit"
    visual_layers: int = 4
    freq_layers: int = 2
    embed_dim: int = 64
    patch: int = 8
    freq_channels: int = 64
    freq_depth: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    image_side: int = 32
    disc_hidden: int = 64
    classifier_activation: str = "gelu"

    def __post_init__(self) -> None:
        if self.kind not in BACKBONES:
            raise ValueError(f"unknown backbone {self.kind!r}; expected one of {BACKBONES}")
        if self.visual_layers < 1 or self.freq_layers < 1 or self.freq_depth < 1:
            raise ValueError("visual_layers, freq_layers and freq_depth must be >= 1")
        if self.image_side % self.patch or self.image_side % 8:
            raise ValueError(f"image_side {self.image_side} must be divisible by patch {self.patch} and by 8")
        if self.patch % 8:
            raise ValueError("patch must be a multiple of the 8x8 DCT block")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.classifier_activation not in ("gelu", "identity"):
            raise ValueError("classifier_activation must be 'gelu' or 'identity'")

    @classmethod
    def desk(cls, **overrides) -> "BackboneConfig":
        return cls(**overrides)

    @classmethod
    def paper_parity(cls, **overrides) -> "BackboneConfig":
        base = dict(visual_layers=12, freq_layers=4, embed_dim=768, patch=16, freq_channels=768,
                    freq_depth=4, heads=12, mlp_ratio=4, image_side=224, disc_hidden=256)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    @property
    def feature_dim(self) -> int:
        if self.kind == "dual_vit":
            return 2 * self.embed_dim
        if self.kind == "tiny_vit":
            return self.embed_dim
        return self.freq_channels


# --------------------------------------------------------------------------- building blocks

class FrequencyTransform(nn.Module):
    """Differentiable RGB -> YCbCr -> 8x8 block DCT on NCHW tensors."""

    def __init__(self):
        super().__init__()
        wr, wg, wb = Y_WEIGHTS
        # rows: Y, Cb, Cr as affine maps of (R, G, B)
        mat = torch.tensor([
            [wr, wg, wb],
            [-CB_SCALE * wr, -CB_SCALE * wg, CB_SCALE * (1 - wb)],
            [CR_SCALE * (1 - wr), -CR_SCALE * wg, -CR_SCALE * wb],
        ], dtype=torch.float64)
        self.register_buffer("color", mat)
        self.register_buffer("offset", torch.tensor([0.0, 0.5, 0.5], dtype=torch.float64))
        self.register_buffer("dct", torch.from_numpy(dct_matrix()))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        ycc = torch.einsum("oc,bchw->bohw", self.color.to(x.dtype), x) + self.offset.to(x.dtype)[:, None, None]
        d = self.dct.to(x.dtype)
        blocks = ycc.reshape(b, 3, h // 8, 8, w // 8, 8).transpose(3, 4)
        coeffs = d @ blocks @ d.T
        return coeffs.transpose(3, 4).reshape(b, 3, h, w)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(d // self.heads)
        out = att.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    """Pre-norm transformer layer: self-attention then MLP, each residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TokenEncoder(nn.Module):
    def __init__(self, n_tokens: int, dim: int, depth: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.pos = nn.Parameter(torch.zeros(1, n_tokens, dim))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(Block(dim, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def forward(self, tokens):
        x = tokens + self.pos
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


def _grid(tokens: torch.Tensor) -> torch.Tensor:
    b, n, d = tokens.shape
    s = int(round(math.sqrt(n)))
    return tokens.transpose(1, 2).reshape(b, d, s, s)


class VisualBranch(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.patch = cfg.patch
        n = (cfg.image_side // cfg.patch) ** 2
        self.embed = nn.Linear(3 * cfg.patch ** 2, cfg.embed_dim)
        self.encoder = TokenEncoder(n, cfg.embed_dim, cfg.visual_layers, cfg.heads, cfg.mlp_ratio)

    def forward(self, x, maps=None):
        b, c, h, w = x.shape
        p = self.patch
        patches = x.reshape(b, c, h // p, p, w // p, p).permute(0, 2, 4, 1, 3, 5).reshape(b, -1, c * p * p)
        tokens = self.encoder(self.embed((patches - PIXEL_MEAN) / PIXEL_STD))
        if maps is not None:
            maps["visual_tokens"] = _grid(tokens)
        return tokens.mean(dim=1)


class FrequencyBranch(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.transform = FrequencyTransform()
        layers: list[nn.Module] = [nn.Conv2d(3, cfg.freq_channels, cfg.patch, stride=cfg.patch)]
        for _ in range(cfg.freq_depth - 1):
            layers += [nn.GELU(), nn.Conv2d(cfg.freq_channels, cfg.freq_channels, 3, padding=1)]
        self.conv = nn.Sequential(*layers)
        self.proj = nn.Linear(cfg.freq_channels, cfg.embed_dim)
        n = (cfg.image_side // cfg.patch) ** 2
        self.encoder = TokenEncoder(n, cfg.embed_dim, cfg.freq_layers, cfg.heads, cfg.mlp_ratio)

    def forward(self, x, maps=None):
        # log-magnitude keeps the per-block coefficient energies on a comparable scale
        coeffs = self.transform(x)
        fmap = self.conv((torch.log(coeffs.abs() + LOG_EPS) - LOG_MEAN) / LOG_STD)
        if maps is not None:
            maps["freq_conv"] = fmap
        tokens = self.encoder(self.proj(fmap.flatten(2).transpose(1, 2)))
        return tokens.mean(dim=1)


class DualViT(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.visual = VisualBranch(cfg)
        self.freq = FrequencyBranch(cfg)

    def forward(self, x, maps=None):
        return torch.cat([self.visual(x, maps), self.freq(x, maps)], dim=1)


class TinyViT(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.visual = VisualBranch(cfg)

    def forward(self, x, maps=None):
        return self.visual(x, maps)


class TinyCNN(nn.Module):
    """Four conv blocks, global average pool."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        c = cfg.freq_channels
        widths = [3, c // 4, c // 2, c, c]
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.Conv2d(widths[i], widths[i + 1], 3, padding=1), nn.GELU()) for i in range(4))

    def forward(self, x, maps=None):
        x = (x - PIXEL_MEAN) / PIXEL_STD
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            if i < 3:
                x = Fn.avg_pool2d(x, 2)
        if maps is not None:
            maps["cnn_conv"] = x
        return x.mean(dim=(2, 3))


GRADCAM_LAYERS = {
    "dual_vit": ("freq_conv", "visual_tokens"),
    "tiny_vit": ("visual_tokens",),
    "tiny_cnn": ("cnn_conv",),
}


def build_extractor(cfg: BackboneConfig) -> nn.Module:
    return {"dual_vit": DualViT, "tiny_vit": TinyViT, "tiny_cnn": TinyCNN}[cfg.kind](cfg)


class Classifier(nn.Module):
    """Two linear layers with a nonlinearity between; outputs (real, fake) logits."""

    def __init__(self, in_dim: int, hidden: int | None = None, activation: str = "gelu"):
        super().__init__()
        hidden = hidden or max(1, in_dim // 2)
        self.fc1 = nn.Linear(in_dim, hidden)
        self.act = nn.GELU() if activation == "gelu" else nn.Identity()
        self.fc2 = nn.Linear(hidden, 2)

    def forward(self, f):
        return self.fc2(self.act(self.fc1(f)))


class Discriminator(nn.Module):
    """Two hidden ReLU layers and a sigmoid; output is P(feature came from the source domain)."""

    def __init__(self, in_dim: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(),
                                 nn.Linear(hidden, 1))

    def logit(self, f):
        return self.net(f).squeeze(-1)

    def forward(self, f):
        return torch.sigmoid(self.logit(f))


# --------------------------------------------------------------------------- functional surface

def _check_images(images: torch.Tensor, cfg: BackboneConfig | None) -> None:
    if cfg is None:  # toy extractors over arbitrary inputs
        return
    if images.ndim != 4 or images.shape[1] != 3 or images.shape[2] != cfg.image_side \
            or images.shape[3] != cfg.image_side:
        raise ShapeError(f"expected N x 3 x {cfg.image_side} x {cfg.image_side} images, got {tuple(images.shape)}")


def _check_features(f: torch.Tensor, module: nn.Module) -> None:
    first = next(m for m in module.modules() if isinstance(m, nn.Linear))
    if f.shape[-1] != first.in_features:
        raise ShapeError(f"feature length {f.shape[-1]} does not match expected {first.in_features}")


def extract_features(extractor: nn.Module, images: torch.Tensor, cfg: BackboneConfig | None, maps=None) -> torch.Tensor:
    _check_images(images, cfg)
    return extractor(images, maps)


def classify(classifier: Classifier, f: torch.Tensor) -> torch.Tensor:
    _check_features(f, classifier)
    return classifier(f)


def discriminate(disc: Discriminator, f: torch.Tensor) -> torch.Tensor:
    _check_features(f, disc)
    return disc(f)


def to_nchw(images) -> torch.Tensor:
    """``N x H x W x 3`` numpy/tensor -> float tensor ``N x 3 x H x W``."""
    t = torch.as_tensor(images)
    return t.permute(0, 3, 1, 2).contiguous()


# --------------------------------------------------------------------------- model state

@dataclass
class ModelState:
    """theta_F (teacher), theta_F' (student), theta_G and theta_Q, held as modules."""

    F: nn.Module
    F_prime: nn.Module
    G: nn.Module
    Q: nn.Module
    cfg: BackboneConfig

    def modules(self) -> dict[str, nn.Module]:
        return {"F": self.F, "F_prime": self.F_prime, "G": self.G, "Q": self.Q}

    def clone(self) -> "ModelState":
        return ModelState(copy.deepcopy(self.F), copy.deepcopy(self.F_prime), copy.deepcopy(self.G),
                          copy.deepcopy(self.Q), self.cfg)

    def to(self, dtype: torch.dtype) -> "ModelState":
        for m in self.modules().values():
            m.to(dtype)
        return self

    def eval(self) -> "ModelState":
        for m in self.modules().values():
            m.eval()
        return self

    def detector_scores(self, images: torch.Tensor, batch: int = 256) -> torch.Tensor:
        """Fake-class probability from H' = G o F'."""
        out = []
        with torch.no_grad():
            for i in range(0, len(images), batch):
                logits = classify(self.G, extract_features(self.F_prime, images[i:i + batch], self.cfg))
                out.append(logits.softmax(dim=-1)[:, 1])
        return torch.cat(out) if out else torch.zeros(0)


def build_model_state(cfg: BackboneConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> ModelState:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        F = build_extractor(cfg)
        G = Classifier(cfg.feature_dim, activation=cfg.classifier_activation)
        Q = Discriminator(cfg.feature_dim, cfg.disc_hidden)
    state = ModelState(F, copy.deepcopy(F), G, Q, cfg)
    return state.to(dtype).eval()


def init_student_from_teacher(state: ModelState) -> ModelState:
    state.F_prime = copy.deepcopy(state.F)
    return state


def max_param_diff(a: nn.Module, b: nn.Module) -> float:
    pa, pb = dict(a.named_parameters()), dict(b.named_parameters())
    if pa.keys() != pb.keys():
        raise StateCorruptionError("parameter sets differ in structure")
    return max((float((pa[k] - pb[k]).detach().abs().max()) for k in pa), default=0.0)


def save_checkpoint(state: ModelState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"format_version": CHECKPOINT_FORMAT, "backbone": asdict(state.cfg)}
    payload.update({k: m.state_dict() for k, m in state.modules().items()})
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> ModelState:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise StateCorruptionError(f"unsupported checkpoint format {payload.get('format_version')!r}")
    cfg = BackboneConfig.from_dict(payload["backbone"])
    dtype = next(iter(payload["G"].values())).dtype
    state = build_model_state(cfg, seed=0, dtype=dtype)
    for k, m in state.modules().items():
        if k in payload:
            m.load_state_dict(payload[k])
    return state
