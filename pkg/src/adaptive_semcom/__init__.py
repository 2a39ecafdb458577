"""Entropy- and channel-adaptive semantic image transmission over
multi-user MIMO Rayleigh fading channels."""

from .bench import cpp, psnr, sweep
from .link import SemComSystem, Streams, SystemConfig, cpp_user, run_frames, train_forward
from .train import TrainConfig, anneal_tau, load_checkpoint, save_checkpoint, toy_config, train

__version__ = "0.1.0"

__all__ = [
    "SemComSystem", "Streams", "SystemConfig", "TrainConfig",
    "anneal_tau", "cpp", "cpp_user", "load_checkpoint", "psnr", "run_frames",
    "save_checkpoint", "sweep", "toy_config", "train", "train_forward",
]
