"""Seed-stream derivation. Every generator is PCG64 fed by a SeedSequence."""
import hashlib

import numpy as np


def stream(seed: int, stream_id: int, *indices: int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, int(stream_id)] + [int(i) for i in indices]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def job_seed(base_seed: int, job_index: int) -> int:
    digest = hashlib.blake2b(f"{int(base_seed)}:{int(job_index)}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFFFFFFFFFFFFFF
