"""CertSim: certifiably robust perceptual similarity built on 1-Lipschitz networks."""

__all__ = [
    "config",
    "errors",
]
