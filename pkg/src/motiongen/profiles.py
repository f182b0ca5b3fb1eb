"""Shipped configuration profiles.

"desk" is the small 2D point-mass setup the acceptance suite pins;
"paper" mirrors the published architecture/optimizer settings (encoder
depth 3, embedding 16, latent length 32, decoder 8 heads / 10 layers,
lr 5e-4, batch 256 Cartesian / 128 joint).
"""

from __future__ import annotations

from .datagen import SimConfig
from .model import ModelConfig
from .training import TrainConfig

__all__ = ["PROFILES", "desk_profile", "paper_profile", "resolve_profile"]


def desk_profile() -> dict:
    return {
        "sim": SimConfig(space="cartesian", d=2, p_via=0.5, seed=0),
        "model": ModelConfig(d=2, T=64, K=32, m=16, embed_dim=16, encoder_depth=3,
                             encoder_heads=4, decoder_layers=4, decoder_heads=4),
        "train": TrainConfig(xi_kl=8.0, eta=0.01, batch_size=256, epochs=130,
                             patience=15),
        "splits": (2000, 256, 256),
    }


def paper_profile() -> dict:
    return {
        "sim": SimConfig(space="cartesian", d=3, workspace_lo=(0.0, 0.0, 0.0),
                         workspace_hi=(1.0, 1.0, 1.0), p_via=0.5, seed=0),
        "model": ModelConfig(d=3, T=64, K=32, m=16, embed_dim=16, encoder_depth=3,
                             encoder_heads=4, decoder_layers=10, decoder_heads=8),
        "train": TrainConfig(xi_kl=8.0, eta=0.01, batch_size=256, epochs=400),
        "splits": (20000, 2048, 2048),
    }


def paper_joint_profile() -> dict:
    p = paper_profile()
    p["sim"] = SimConfig(space="joint", p_via=0.5, seed=0)
    p["model"] = ModelConfig(d=7, T=64, K=32, m=16, embed_dim=16, encoder_depth=3,
                             encoder_heads=4, decoder_layers=10, decoder_heads=8)
    p["train"] = TrainConfig(xi_kl=8.0, eta=0.01, batch_size=128, epochs=400,
                             mixup=True)
    return p


PROFILES = {
    "desk": desk_profile,
    "paper": paper_profile,
    "paper-joint": paper_joint_profile,
}


def resolve_profile(name: str) -> dict:
    if name not in PROFILES:
        raise KeyError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return PROFILES[name]()
