"""
Reproducible Brownian increments.

Increments are produced by a Philox counter-based generator keyed by
``(master_seed, path_index)``.  Steps are grouped in blocks of
``BLOCK_STEPS``; block ``b`` of a path starts at Philox counter ``(0, 0, b, 0)``
so any range of steps can be regenerated without replaying earlier ones, and
paths never share a stream.  The increments of a path are therefore a pure
function of the lineage, independent of batching and of thread count.
"""
import zlib

import numpy as np

BLOCK_STEPS = 1024
_MASK64 = (1 << 64) - 1


def derive_seed(master_seed, *tags):
    """Deterministic 64-bit substream seed from a master seed and tags.

    Tags may be integers or strings (hashed with CRC32, which is stable
    across interpreter runs unlike ``hash``).
    """
    key = []
    for tag in tags:
        if isinstance(tag, str):
            key.append(zlib.crc32(tag.encode()))
        else:
            key.append(int(tag) & 0xFFFFFFFF)
    ss = np.random.SeedSequence(int(master_seed) & _MASK64, spawn_key=tuple(key))
    return int(ss.generate_state(1, np.uint64)[0])


def _block_normals(master_seed, path_index, block, count):
    bitgen = np.random.Philox(key=[int(master_seed) & _MASK64, int(path_index) & _MASK64],
                              counter=[0, 0, int(block), 0])
    return np.random.Generator(bitgen).standard_normal(count)


def standard_normals(master_seed, path_index, start, count, dim=1):
    """Standard normal draws for steps ``start .. start+count-1``, shape (count, dim)."""
    if count <= 0:
        return np.zeros((0, dim))
    out = np.empty((count, dim))
    k = start
    end = start + count
    while k < end:
        block, offset = divmod(k, BLOCK_STEPS)
        take = min(BLOCK_STEPS - offset, end - k)
        z = _block_normals(master_seed, path_index, block, (offset + take) * dim)
        out[k - start:k - start + take] = z[offset * dim:].reshape(take, dim)
        k += take
    return out


class NoiseStream:
    """Sequential view on the increments of one path.

    Parameters
    ----------
    master_seed : int
        64-bit master seed.
    path_index : int
        Path identifier; distinct indices give independent streams.
    position : int
        Index of the next step to be drawn.
    """

    def __init__(self, master_seed, path_index=0, position=0):
        self.master_seed = int(master_seed) & _MASK64
        self.path_index = int(path_index)
        self.position = int(position)

    @property
    def lineage(self):
        return (self.master_seed, self.path_index)

    def take(self, count, delta, dim=1):
        """Draw the next ``count`` increments N(0, delta I_dim) and advance."""
        out = gaussian_increments(self, count, delta, dim)
        self.position += count
        return out

    def __repr__(self):
        return f"NoiseStream(master_seed={self.master_seed}, path_index={self.path_index}, position={self.position})"


def gaussian_increments(stream, count, delta, dim=1):
    """Increments delta W_k ~ N(0, delta I_dim) at the stream's current position.

    The stream is not advanced; see :meth:`NoiseStream.take`.
    """
    z = standard_normals(stream.master_seed, stream.path_index, stream.position, count, dim)
    return np.sqrt(delta) * z


def batch_normals(master_seed, path_indices, start, count, dim=1):
    """Standard normals for several paths, shape (count, len(path_indices), dim)."""
    out = np.empty((count, len(path_indices), dim))
    for i, p in enumerate(path_indices):
        out[:, i, :] = standard_normals(master_seed, p, start, count, dim)
    return out
