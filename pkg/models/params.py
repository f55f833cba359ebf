"""
Helpers shared by the parameter stores: seeded construction, hashing,
counting and freezing.
"""

import contextlib
import hashlib

import torch
from torch import nn


@contextlib.contextmanager
def seeded(seed: int):
    """Run a block under a private torch RNG seeded with ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def param_hash(module: nn.Module) -> str:
    """SHA-256 over every state_dict entry, in key order."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(str(tuple(tensor.shape)).encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def set_requires_grad(module: nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad = flag
